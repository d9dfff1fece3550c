# foliscope_app/shard_pool.py

from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, List, Optional, Sequence

import numpy as np

from .logger import AppLogger

logger = AppLogger.get_logger(__name__)


class ShardPool:
    """Runs independent shards over worker processes; results come back in task order."""

    def __init__(self, jobs: int = 1, progress_callback: Optional[Callable[[int, int], None]] = None):
        self.jobs = max(1, int(jobs))
        self.progress_callback = progress_callback

    def _update_progress(self, done: int, total: int):
        if self.progress_callback:
            self.progress_callback(done, total)

    def map(self, fn: Callable[..., Any], tasks: Sequence[Any]) -> List[Any]:
        tasks = list(tasks)
        results: List[Any] = [None] * len(tasks)
        if self.jobs == 1 or len(tasks) <= 1:
            for i, task in enumerate(tasks):
                results[i] = fn(task)
                self._update_progress(i + 1, len(tasks))
            return results

        with ProcessPoolExecutor(max_workers=min(self.jobs, len(tasks))) as executor:
            futures = {executor.submit(fn, task): i for i, task in enumerate(tasks)}
            done = 0
            for future in as_completed(futures):
                results[futures[future]] = future.result()
                done += 1
                self._update_progress(done, len(tasks))
        logger.debug(f"{len(tasks)} shards finished on {self.jobs} workers")
        return results

    @staticmethod
    def spawn_seeds(seed: int, count: int) -> List[np.random.SeedSequence]:
        return np.random.SeedSequence(seed).spawn(count)

    @staticmethod
    def tree_sum(values: Sequence[Any]) -> Any:
        """Pairwise reduction in a fixed order, independent of worker count."""
        values = list(values)
        if not values:
            return 0.0
        while len(values) > 1:
            merged = [values[i] + values[i + 1] for i in range(0, len(values) - 1, 2)]
            if len(values) % 2:
                merged.append(values[-1])
            values = merged
        return values[0]
