"""Deterministic work counter shared across the package.

Scores that the method-selection heuristic computes divide objective
improvements by work performed.  Wall-clock time would make runs with
identical seeds diverge, so the denominator is this counter instead:
simplex pivots and network evaluations both add to it.
"""

_count = 0


def add(n: int) -> None:
    global _count
    _count += int(n)


def count() -> int:
    return _count


def reset() -> None:
    global _count
    _count = 0
