"""Seed derivation and the worker pool shared by every ensemble."""
import logging
import os
from multiprocessing import Pool

import numpy as np

logger = logging.getLogger(__name__)

SEED_RULE = "path i: SeedSequence(entropy=master, spawn_key=(i,)); chunk c of stream k: spawn_key=(k, c)"

# stream ids for chunk-level generators; path ids never collide with them
# because path keys have length one
REFINE_STREAM = 1
SPHERE_STREAM = 2
LIMIT_STREAM = 3


def default_workers() -> int:
    return int(os.getenv("KFP_WORKERS") or os.cpu_count() or 1)


def default_chunk_size() -> int:
    return int(os.getenv("KFP_CHUNK_SIZE") or 64)


def path_generators(master: int, path_id: int):
    """(main, spare) generators of one path; the spare feeds auxiliary draws."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(int(path_id),))
    return tuple(np.random.Generator(np.random.PCG64(child)) for child in ss.spawn(2))


def chunk_generator(master: int, stream: int, chunk_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(int(stream), int(chunk_id)))
    return np.random.Generator(np.random.PCG64(ss))


def chunk_ranges(n: int, chunk_size: int):
    return [(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


def run_chunks(func, tasks, n_workers=None):
    """Apply func to every task; results come back in task order."""
    n_workers = default_workers() if n_workers is None else n_workers
    if n_workers <= 1 or len(tasks) <= 1:
        return [func(task) for task in tasks]
    logger.debug("dispatching %d chunks to %d workers", len(tasks), n_workers)
    with Pool(processes=min(n_workers, len(tasks))) as pool:
        return pool.map(func, tasks)
