"""Work counters used to check the cost contracts of the relational layers.

Counters are only updated while a :func:`counting` block is active, so
training runs pay nothing for them.
"""

from __future__ import annotations

import contextlib
from collections import Counter

_stack: list[Counter] = []


@contextlib.contextmanager
def counting():
    counts = Counter()
    _stack.append(counts)
    try:
        yield counts
    finally:
        _stack.remove(counts)


def add(key: str, amount: int):
    for counts in _stack:
        counts[key] += int(amount)


def active() -> bool:
    return bool(_stack)


def matmul_macs(a_shape: tuple, b_shape: tuple) -> int:
    """Multiply-accumulates performed by ``a @ b`` with leading-batch broadcasting."""
    batch = a_shape[:-2] if len(a_shape) >= len(b_shape) else b_shape[:-2]
    lead = 1
    for d in batch:
        lead *= d
    return lead * a_shape[-2] * a_shape[-1] * b_shape[-1]
