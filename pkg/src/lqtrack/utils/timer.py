"""Small stopwatch used to time pipeline stages."""
from __future__ import annotations

from contextlib import contextmanager
import time
from typing import Dict, Iterator


class Stopwatch:
    def __init__(self):
        self.laps: Dict[str, float] = {}

    @contextmanager
    def lap(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.laps[name] = self.laps.get(name, 0.0) + (time.perf_counter() - start)

    def total(self) -> float:
        return sum(self.laps.values())
