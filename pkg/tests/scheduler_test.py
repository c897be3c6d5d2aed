import math

import numpy as np
import pytest

from sgdiff.core.diffusion import OracleDenoiser, encode_crystal
from sgdiff.core.sampler import ChainTask, run_chain
from sgdiff.core.scheduler import chain_seeds, run_chains
from sgdiff.core.utils import DomainError

from tests.conftest import wurtzite


def test_chain_seeds_are_reproducible_and_distinct():
    first = [s.generate_state(2).tolist() for s in chain_seeds(3, 4)]
    second = [s.generate_state(2).tolist() for s in chain_seeds(3, 4)]
    assert first == second
    assert len({tuple(state) for state in first}) == 4
    assert chain_seeds(3, 2)[1].generate_state(2).tolist() == first[1]


def test_run_chains_keeps_task_order():
    tasks = [7, 3, 5, 1, 6]
    expected = [math.factorial(n) for n in tasks]
    assert run_chains(math.factorial, tasks) == expected
    assert run_chains(math.factorial, tasks, jobs=2) == expected
    assert run_chains(math.factorial, []) == []
    with pytest.raises(DomainError, match="jobs"):
        run_chains(math.factorial, tasks, jobs=0)


def test_parallel_chains_match_inline_chains(schedule):
    """Each chain owns its seed, so the worker count never changes the samples."""
    target = wurtzite()
    encoded = encode_crystal(target)
    oracle = OracleDenoiser(encoded, schedule)
    tasks = [
        ChainTask(oracle, schedule, seed, layout=encoded.layout, fixed_species=("Zn", "O"), record_every=50)
        for seed in chain_seeds(0, 3)
    ]
    inline = run_chains(run_chain, tasks, jobs=1)
    parallel = run_chains(run_chain, tasks, jobs=2)
    for a, b in zip(inline, parallel):
        assert np.array_equal(a.crystal.frac_coords, b.crystal.frac_coords)
        assert np.array_equal(a.crystal.lattice, b.crystal.lattice)
        assert len(a.trajectory) == len(b.trajectory)
        assert np.array_equal(a.trajectory[0].lattice, b.trajectory[0].lattice)
