import numpy as np
import pytest

from sgdiff.core.elements import (
    TypeVocabulary,
    atomic_mass,
    element_descriptors,
    get_element,
    load_element_table,
)
from sgdiff.core.utils import DocumentError, DomainError


def test_element_rows():
    na = get_element("Na")
    assert (na.z, na.period, na.group) == (11, 3, 1)
    assert na.electronegativity == pytest.approx(0.93)
    cl = get_element("Cl")
    assert (cl.period, cl.group) == (3, 17)
    assert cl.electronegativity == pytest.approx(3.16)
    assert get_element("He").electronegativity is None
    assert atomic_mass("O") == pytest.approx(16.0, abs=0.01)


def test_unknown_element():
    with pytest.raises(DomainError, match="Xx"):
        get_element("Xx")
    with pytest.raises(DomainError):
        element_descriptors(["Na", "Xx"])


def test_descriptors_are_z_scored():
    table = load_element_table()
    rows = element_descriptors(table)
    assert rows.shape == (len(table), 5)
    assert np.all(np.isfinite(rows)), "missing electronegativities should be imputed"
    assert np.allclose(rows.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(rows.std(axis=0), 1.0, atol=1e-10)


def test_chemically_close_elements_are_close():
    na, k, cl = element_descriptors(["Na", "K", "Cl"])
    assert np.linalg.norm(na - k) < np.linalg.norm(na - cl)


def test_table_header_is_checked(tmp_path):
    path = tmp_path / "elements.tsv"
    path.write_text("symbol\tz\n", encoding="utf-8")
    with pytest.raises(DocumentError, match="header"):
        load_element_table(path)


def test_vocabulary_orders_by_atomic_number():
    vocabulary = TypeVocabulary.from_species(["Cl", "Na", "Cl"])
    assert vocabulary.symbols == ("Na", "Cl")
    one_hot = vocabulary.one_hot(["Cl", "Na"])
    assert np.array_equal(one_hot, [[0.0, 1.0], [1.0, 0.0]])
    assert vocabulary.decode(np.array([[0.2, 0.9], [3.0, -1.0]])) == ("Cl", "Na")


def test_vocabulary_rejects_bad_symbols():
    with pytest.raises(DomainError):
        TypeVocabulary(())
    with pytest.raises(DomainError):
        TypeVocabulary(("Na", "Na"))
    with pytest.raises(DomainError, match="not in the type vocabulary"):
        TypeVocabulary(("Na",)).index("Cl")
