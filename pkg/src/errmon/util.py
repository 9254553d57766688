"""Small shared helpers: bounded FIFO queues, a seedable 64-bit mixer, percentiles."""

from __future__ import annotations

from collections import deque
from typing import Iterator

_MASK64 = (1 << 64) - 1


def mix64(value: int) -> int:
    """Finalizer-style 64-bit mixer (splitmix64 constants). Deterministic."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def percentile(values: list[float], pct: float) -> float:
    """Nearest-rank percentile over a non-empty list."""
    if not values:
        raise ValueError("percentile of empty list")
    ordered = sorted(values)
    rank = max(1, -(-len(ordered) * pct // 100))  # ceil(n*pct/100)
    return ordered[int(rank) - 1]


class BoundedQueue:
    """FIFO queue with a hard capacity.

    put() refuses items beyond capacity instead of evicting, so producers see
    backpressure explicitly. Tracks high watermark and dropped count.
    """

    __slots__ = ("capacity", "_items", "dropped", "high_watermark")

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque()
        self.dropped = 0
        self.high_watermark = 0

    def put(self, item) -> bool:
        if len(self._items) >= self.capacity:
            self.dropped += 1
            return False
        self._items.append(item)
        if len(self._items) > self.high_watermark:
            self.high_watermark = len(self._items)
        return True

    def get(self):
        return self._items.popleft()

    def put_back(self, items) -> None:
        """Return items to the head, preserving their original order."""
        self._items.extendleft(reversed(list(items)))
        if len(self._items) > self.high_watermark:
            self.high_watermark = len(self._items)

    def drain(self, limit: int | None = None) -> list:
        n = len(self._items) if limit is None else min(limit, len(self._items))
        return [self._items.popleft() for _ in range(n)]

    def peek(self):
        return self._items[0]

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)

    def __iter__(self) -> Iterator:
        return iter(self._items)
