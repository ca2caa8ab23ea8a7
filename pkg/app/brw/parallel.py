"""Counter-based random streams and the replica work pool.

Replica ``i`` of stage ``s`` always draws from the Philox stream keyed by
``(seed, crc32(s), i)``, so results do not depend on how replicas are split
across worker processes.
"""

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")

ReplicaWorker = Callable[[int, np.random.Generator], T]


def stage_tag(stage: str) -> int:
    """Stable 32-bit tag for a stage name."""
    return zlib.crc32(stage.encode("utf-8"))


def replica_rng(seed: int, stage: str, replica: int) -> np.random.Generator:
    """Return the Philox generator owned by one replica of one stage.

    Args:
        seed: Experiment seed (any nonnegative integer, 64-bit in practice).
        stage: Stage name, e.g. ``"engine"`` or ``"spine"``.
        replica: Replica index.

    Raises:
        ValueError: If seed or replica is negative.
    """
    if seed < 0:
        raise ValueError("Seed must be nonnegative")
    if replica < 0:
        raise ValueError("Replica index must be nonnegative")
    sequence = np.random.SeedSequence([int(seed), stage_tag(stage), int(replica)])
    return np.random.Generator(np.random.Philox(sequence))


def _run_chunk(
    worker: ReplicaWorker, seed: int, stage: str, start: int, stop: int
) -> List[T]:
    return [worker(i, replica_rng(seed, stage, i)) for i in range(start, stop)]


def run_replicas(
    worker: ReplicaWorker,
    replicas: int,
    seed: int,
    stage: str,
    workers: int = 1,
    chunk_size: int | None = None,
) -> List[T]:
    """Run ``worker(i, rng_i)`` for every replica and return results in index order.

    ``worker`` must be picklable (a module-level function or a
    ``functools.partial`` of one) when ``workers > 1``.
    """
    if replicas < 0:
        raise ValueError("Replica count cannot be negative")
    if workers < 1:
        raise ValueError("Worker count must be positive")
    if replicas == 0:
        return []

    if chunk_size is None:
        chunk_size = max(1, -(-replicas // (4 * workers)))
    bounds = [
        (start, min(start + chunk_size, replicas))
        for start in range(0, replicas, chunk_size)
    ]

    if workers == 1 or len(bounds) == 1:
        results: List[T] = []
        for start, stop in bounds:
            results.extend(_run_chunk(worker, seed, stage, start, stop))
        return results

    logger.info(
        f"Stage {stage}: {replicas} replicas over {workers} workers "
        f"in {len(bounds)} chunks"
    )
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_run_chunk, worker, seed, stage, start, stop)
            for start, stop in bounds
        ]
        # Futures are consumed in submission order, which is replica order.
        results = []
        for future in futures:
            results.extend(future.result())
    return results
