import numpy as np
import pytest
import torch

from sgdiff.core.denoiser import DenoiserConfig, ScoreNetwork
from sgdiff.core.diffusion import (
    OracleDenoiser,
    decode_state,
    diffusion_loss,
    encode_crystal,
    forward_A,
    forward_F,
    forward_k,
    isotropic_wn_score,
    lambda_table,
    noised_state,
    state_from_encoded,
    wn_log_density,
    wn_score,
)
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.lattice import mask_for_family
from sgdiff.core.schedule import NoiseSchedule
from sgdiff.core.spacegroup import relax_to_p1
from sgdiff.core.storage import blob_path, canonical_json, compute_digest
from sgdiff.core.utils import DomainError, wrap_frac, wrapped_delta

from tests.conftest import pnma_4c, rock_salt, wurtzite


def small_network(n_types: int, seed: int = 0) -> ScoreNetwork:
    return ScoreNetwork(DenoiserConfig(n_types=n_types, layers=2, hidden=16, fourier=8, time_dim=8), seed=seed)


def test_encode_requires_annotation():
    with pytest.raises(DomainError, match="annotation"):
        encode_crystal(rock_salt().without_annotation())


def test_encode_decode_round_trip():
    crystal = pnma_4c()
    encoded = encode_crystal(crystal)
    assert encoded.layout.n_sites == 2
    assert np.allclose(encoded.basic_coords, [[0.11, 0.0, 0.37], [0.0, 0.0, 0.0]])
    decoded = decode_state(state_from_encoded(encoded), encoded.layout, basic_species=encoded.basic_species)
    assert np.allclose(decoded.frac_coords, crystal.frac_coords, atol=1e-12)
    assert np.allclose(decoded.lattice.T @ decoded.lattice, crystal.lattice.T @ crystal.lattice, atol=1e-10)


def test_decode_needs_species_source():
    encoded = encode_crystal(rock_salt())
    with pytest.raises(DomainError):
        decode_state(state_from_encoded(encoded), encoded.layout)


def test_forward_k_keeps_constrained_dimensions(schedule, rng):
    encoded = encode_crystal(rock_salt())
    for t in (1, 50, 200):
        k_t = forward_k(encoded.k, encoded.layout.mask, t, rng.standard_normal(6), schedule)
        assert np.array_equal(k_t[:5], encoded.k[:5]), f"constrained k moved at t={t}"
    k_T = forward_k(encoded.k, encoded.layout.mask, 200, np.ones(6), schedule)
    assert k_T[5] != encoded.k[5]


def test_forward_F_stays_on_subspace(schedule, rng):
    encoded = encode_crystal(wurtzite())
    F_t, eps = forward_F(encoded.basic_coords, encoded.layout, 150, rng.standard_normal((2, 3)), schedule)
    assert np.allclose(eps[:, :2], 0.0, atol=1e-12)
    assert np.allclose(wrapped_delta(F_t[:, :2], 0.0), 0.0, atol=1e-12)
    assert np.all((F_t >= 0.0) & (F_t < 1.0))
    assert np.any(np.abs(eps[:, 2]) > 0.0)


def test_wn_score_is_gradient_of_log_density():
    """Analytic score matches a central finite difference of the truncated image sum."""
    crystal = pnma_4c()
    encoded = encode_crystal(crystal)
    layout = encoded.layout
    position = layout.positions[0]
    sigma = 0.2
    F_0 = encoded.basic_coords
    F_t = F_0.copy()
    F_t[0] = [0.43, 0.0, 0.91]
    score = wn_score(F_t, F_0, sigma, layout)
    assert np.all(score[1] == 0.0), "a fixed site has no score"
    assert score[0, 1] == 0.0

    precision = position.metric / sigma**2
    delta = wrapped_delta(F_t[0, [0, 2]], F_0[0, [0, 2]])
    h = 1e-6
    numeric = []
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = h
        numeric.append(
            (wn_log_density(delta + step, precision) - wn_log_density(delta - step, precision)) / (2 * h)
        )
    assert np.allclose(score[0, [0, 2]], numeric, rtol=1e-5, atol=1e-6)


def test_isotropic_score_matches_finite_difference():
    sigma = 0.3
    x = np.array([-0.4, -0.1, 0.0, 0.2, 0.45])
    h = 1e-6

    def log_p(v):
        shifted = v + np.arange(-3, 4)
        return np.log(np.sum(np.exp(-0.5 * shifted**2 / sigma**2)))

    numeric = [(log_p(v + h) - log_p(v - h)) / (2 * h) for v in x]
    assert np.allclose(isotropic_wn_score(x, sigma), numeric, rtol=1e-5, atol=1e-6)
    assert isotropic_wn_score(np.array([0.0]), sigma)[0] == pytest.approx(0.0, abs=1e-12)


def test_lambda_table_small_sigma_limit():
    """For sigma << 1 the wrapped normal is a plain normal, so lambda ~ sigma^2 / 3."""
    schedule = NoiseSchedule(T=20)
    table = lambda_table(schedule, samples=4000, seed=1)
    assert table[0] == 0.0
    assert table[1] == pytest.approx(schedule.sigma_1**2 / 3.0, rel=0.1)
    assert np.all(table[1:] > 0)


def test_lambda_table_cache(tmp_path):
    schedule = NoiseSchedule(T=10)
    first = lambda_table(schedule, samples=500, seed=3, cache_dir=tmp_path)
    key = {"kind": "lambda_table", "samples": 500, "seed": 3, **schedule.params()}
    assert blob_path(compute_digest(canonical_json(key)), tmp_path).exists()
    second = lambda_table(schedule, samples=500, seed=3, cache_dir=tmp_path)
    assert np.array_equal(first, second)


def test_oracle_loss_is_zero(schedule):
    """The oracle predicts the exact noise, so every loss term vanishes."""
    crystal = pnma_4c()
    vocabulary = TypeVocabulary.from_crystals([crystal])
    encoded = encode_crystal(crystal, vocabulary)
    oracle = OracleDenoiser(encoded, schedule)
    rng = np.random.default_rng(0)
    for _ in range(10):
        terms = diffusion_loss(encoded, oracle, schedule, rng)
        assert float(terms.total) < 1e-12, f"oracle loss {terms.as_dict()}"


def test_type_loss_needs_vocabulary(schedule, rng):
    encoded = encode_crystal(rock_salt())
    with pytest.raises(DomainError, match="one-hot"):
        diffusion_loss(encoded, OracleDenoiser(encoded, schedule), schedule, rng)
    with pytest.raises(DomainError, match="f_loss"):
        diffusion_loss(encoded, OracleDenoiser(encoded, schedule), schedule, rng, f_loss="mid", fixed_types=True)


def test_pre_and_post_loss_agree_without_symmetry(schedule):
    """With multiplicity 1 everywhere, averaging before or after the residual is the same."""
    crystal = relax_to_p1(rock_salt())
    vocabulary = TypeVocabulary.from_crystals([crystal])
    encoded = encode_crystal(crystal, vocabulary)
    network = small_network(vocabulary.size).eval()
    with torch.no_grad():
        post = diffusion_loss(encoded, network, schedule, np.random.default_rng(5), t=40, fixed_types=True)
        pre = diffusion_loss(
            encoded, network, schedule, np.random.default_rng(5), t=40, f_loss="pre", fixed_types=True
        )
    assert post.F == pytest.approx(pre.F, rel=1e-10)
    assert post.k == pytest.approx(pre.k, rel=1e-10)


def test_post_loss_exceeds_pre_loss_on_orbits(schedule):
    """Per-atom residuals averaged over an orbit bound the residual of the averaged output."""
    crystal = pnma_4c()
    vocabulary = TypeVocabulary.from_crystals([crystal])
    encoded = encode_crystal(crystal, vocabulary)
    network = small_network(vocabulary.size, seed=3).eval()
    with torch.no_grad():
        post = diffusion_loss(encoded, network, schedule, np.random.default_rng(9), t=60, fixed_types=True)
        pre = diffusion_loss(
            encoded, network, schedule, np.random.default_rng(9), t=60, f_loss="pre", fixed_types=True
        )
    assert post.F > pre.F


def test_noised_state_respects_constraints(schedule, rng):
    encoded = encode_crystal(wurtzite())
    state = noised_state(encoded, schedule, 120, rng)
    assert state.t == 120
    assert state.k[0] == pytest.approx(encoded.k[0])
    assert np.allclose(state.k[1:4], 0.0)
    assert np.all(state.basic_coords[:, :2] == 0.0)


def test_forward_A_interpolates_toward_noise(schedule):
    types = np.eye(2)
    noise = np.random.default_rng(0).normal(size=(2, 2))
    assert np.array_equal(forward_A(types, 0, noise, schedule), types)
    ab = schedule.alpha_bars[100]
    assert np.allclose(forward_A(types, 100, noise, schedule), np.sqrt(ab) * types + np.sqrt(1 - ab) * noise)
    assert np.allclose(forward_A(types, schedule.T, noise, schedule), noise, atol=0.05)


@pytest.mark.parametrize("sigma", [0.01, 0.1, 0.5])
def test_scores_match_finite_differences_across_noise_levels(sigma):
    """Isotropic and per-site scores against central differences of the log density at 100 points."""
    rng = np.random.default_rng(int(sigma * 1000))
    h = 1e-4 * sigma
    precision = np.array([[1.0 / sigma**2]])
    x = rng.uniform(-0.5, 0.5, size=100)
    numeric = [
        (wn_log_density(np.array([v + h]), precision) - wn_log_density(np.array([v - h]), precision)) / (2 * h)
        for v in x
    ]
    assert np.allclose(isotropic_wn_score(x, sigma), numeric, rtol=1e-4, atol=1e-4)

    encoded = encode_crystal(pnma_4c())
    layout = encoded.layout
    axes = layout.positions[0].free_axes
    site_precision = layout.positions[0].metric / sigma**2
    F_0 = encoded.basic_coords
    for point in rng.uniform(size=(100, 2)):
        F_t = F_0.copy()
        F_t[0, axes] = point
        score = wn_score(F_t, F_0, sigma, layout)[0, axes]
        delta = wrapped_delta(F_t[0, axes], F_0[0, axes])
        numeric = [
            (wn_log_density(delta + h * e, site_precision) - wn_log_density(delta - h * e, site_precision)) / (2 * h)
            for e in np.eye(2)
        ]
        assert np.allclose(score, numeric, rtol=1e-4, atol=1e-4), f"site score at {point}"


def test_forward_k_and_A_moments(schedule):
    rng = np.random.default_rng(11)
    t = 60
    ab = schedule.alpha_bars[t]
    k0 = np.array([0.1, -0.2, 0.3, 0.05, -0.1, 1.5])
    k_t = forward_k(k0, mask_for_family("triclinic"), t, rng.standard_normal((20000, 6)), schedule)
    assert np.allclose(k_t.mean(axis=0), np.sqrt(ab) * k0, atol=0.03)
    assert np.allclose(k_t.var(axis=0), 1.0 - ab, rtol=0.05)

    types = np.eye(3)[[0, 2]]
    A_t = forward_A(types, t, rng.standard_normal((20000, 2, 3)), schedule)
    assert np.allclose(A_t.mean(axis=0), np.sqrt(ab) * types, atol=0.03)
    assert np.allclose(A_t.var(axis=0), 1.0 - ab, rtol=0.05)


def test_two_step_lattice_marginal_matches_one_step(schedule):
    """q(k_t | k_0) equals q(k_t | k_s) composed with q(k_s | k_0)."""
    rng = np.random.default_rng(12)
    s, t = 40, 120
    mask = mask_for_family("triclinic")
    k0 = np.array([0.2, 0.0, -0.1, 0.3, 0.0, 1.2])
    ratio = schedule.alpha_bars[t] / schedule.alpha_bars[s]
    k_s = forward_k(k0, mask, s, rng.standard_normal((20000, 6)), schedule)
    two_step = np.sqrt(ratio) * k_s + np.sqrt(1.0 - ratio) * rng.standard_normal((20000, 6))
    one_step = forward_k(k0, mask, t, rng.standard_normal((20000, 6)), schedule)
    assert np.allclose(two_step.mean(axis=0), one_step.mean(axis=0), atol=0.04)
    assert np.allclose(two_step.var(axis=0), one_step.var(axis=0), rtol=0.06)
    assert np.allclose(two_step.var(axis=0), 1.0 - schedule.alpha_bars[t], rtol=0.05)


def test_two_step_coordinate_marginal_matches_one_step(schedule):
    """Wrapped normals compose: sigma_s then sqrt(sigma_t^2 - sigma_s^2) gives the sigma_t marginal."""
    rng = np.random.default_rng(13)
    s, t = 100, 148
    encoded = encode_crystal(relax_to_p1(rock_salt()))
    layout, F_0 = encoded.layout, encoded.basic_coords
    extra = np.sqrt(schedule.sigmas[t] ** 2 - schedule.sigmas[s] ** 2)
    one_step, two_step = [], []
    for _ in range(2500):
        F_s, _ = forward_F(F_0, layout, s, rng.standard_normal(F_0.shape), schedule)
        two_step.append(wrapped_delta(wrap_frac(F_s + extra * rng.standard_normal(F_0.shape)), F_0))
        F_t, _ = forward_F(F_0, layout, t, rng.standard_normal(F_0.shape), schedule)
        one_step.append(wrapped_delta(F_t, F_0))
    expected = np.exp(-2.0 * np.pi**2 * schedule.sigmas[t] ** 2)
    for deltas in (np.array(one_step), np.array(two_step)):
        assert np.mean(np.cos(2 * np.pi * deltas)) == pytest.approx(expected, abs=0.015)
        assert np.mean(np.sin(2 * np.pi * deltas)) == pytest.approx(0.0, abs=0.015)
