"""
Module: sgdiff.core.scheduler

Fans independent sampling chains out over worker processes.

1) Seeding
   - `chain_seeds(seed, n)` spawns one child SeedSequence per chain from the run seed, so
     chain i draws the same numbers whatever the worker count.

2) Dispatch (`run_chains`)
   - At most `jobs` futures are in flight; as each completes (`wait(FIRST_COMPLETED)`) the
     next task is submitted. Results are returned in task order.
   - `jobs == 1` runs the tasks inline in this process.

Exports:
- `chain_seeds(seed: int, n: int)`
- `run_chains(task_fn, tasks, jobs=1, progress=False)`
"""

import logging
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from typing import Callable, List, Sequence, TypeVar

import numpy as np
from tqdm import tqdm

from sgdiff.core.utils import DomainError

logger = logging.getLogger(__name__)

Task = TypeVar("Task")
Result = TypeVar("Result")


def chain_seeds(seed: int, n: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def run_chains(
    task_fn: Callable[[Task], Result],
    tasks: Sequence[Task],
    jobs: int = 1,
    progress: bool = False,
) -> List[Result]:
    """
    Run `task_fn` over `tasks` with at most `jobs` processes.

    Args:
        task_fn: Picklable top-level function taking one task.
        tasks (Sequence): Task descriptions, each carrying its own seed.
        jobs (int): Worker processes; 1 runs inline.
        progress (bool): Show a progress bar over completed tasks.

    Returns:
        List: `task_fn(task)` for every task, in task order.
    """
    if jobs < 1:
        raise DomainError(f"jobs must be >= 1, got {jobs}")
    results: List[Result] = [None] * len(tasks)
    bar = tqdm(total=len(tasks), disable=not progress, desc="chains")

    if jobs == 1 or len(tasks) <= 1:
        for i, task in enumerate(tasks):
            results[i] = task_fn(task)
            bar.update(1)
        bar.close()
        return results

    pending = iter(enumerate(tasks))
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        futures = {}
        for i, task in pending:
            futures[executor.submit(task_fn, task)] = i
            if len(futures) >= jobs:
                break

        while futures:
            done, _ = wait(futures.keys(), return_when=FIRST_COMPLETED)
            for fut in done:
                i = futures.pop(fut)
                results[i] = fut.result()
                bar.update(1)
                logger.debug("Chain %d finished", i)

            for i, task in pending:
                futures[executor.submit(task_fn, task)] = i
                if len(futures) >= jobs:
                    break
    bar.close()
    return results
