"""Counter-based random streams and block-parallel execution.

A stream is identified by a master seed and a path of integers
(experiment -> point -> block). Generators are Philox instances keyed by
``SeedSequence(master, spawn_key=path)``, so any stream can be rebuilt from
its path alone and no state is shared between blocks. Monte Carlo work is cut
into blocks of a fixed size, each with its own substream; results are merged
in block order, which makes outputs independent of the number of workers.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

BLOCK = 2000
WORKERS_ENV = "SPREADPERC_WORKERS"


def label_key(label: str) -> int:
    """Stable integer for a string label (used in stream paths)."""
    return zlib.crc32(label.encode())


@dataclass(frozen=True)
class RngStream:
    master: int
    path: tuple = ()

    def child(self, *idx) -> "RngStream":
        keys = tuple(label_key(i) if isinstance(i, str) else int(i) for i in idx)
        return RngStream(self.master, self.path + keys)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def as_stream(seed) -> RngStream:
    if isinstance(seed, RngStream):
        return seed
    return RngStream(int(seed))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def block_sizes(n: int, block: int = BLOCK) -> list[int]:
    full, rest = divmod(int(n), block)
    return [block] * full + ([rest] if rest else [])


def run_tasks(func, tasks, workers: int | None = None) -> list:
    """Map ``func`` over ``tasks`` preserving order, optionally in processes."""
    tasks = list(tasks)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(func, tasks))


def fold_tasks(func, tasks, fold, acc, workers: int | None = None):
    """Fold ``func`` results into ``acc`` in task order without keeping them all."""
    workers = default_workers() if workers is None else workers
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        for t in tasks:
            acc = fold(acc, func(t))
        return acc
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        for r in pool.map(func, tasks):
            acc = fold(acc, r)
    return acc
