"""Relational convolution with graphlet filters over discrete groups.

A graphlet filter bank ``f`` has shape ``(s, s, d_r, n_f)``. For a group
``g`` of ``s`` object indices the relational inner product is the Euclidean
inner product of the sub-tensor ``R[g][:, g]`` with each filter; applying it
to every group of a collection gives one ``n_f`` vector per group.

Group indices are 0-based throughout.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from . import instrument
from .nn import Module, parameter, uniform_init
from .tensor import ShapeError, Tensor, as_tensor, gather

MAX_SYMMETRIC_GROUP = 6

Group = tuple[int, ...]


class GraphletFilters(Module):
    def __init__(self, s: int, d_r: int, n_f: int, rng: np.random.Generator):
        if s < 2 or n_f < 1:
            raise ValueError("filter size must be >= 2 and n_f >= 1")
        self.s, self.d_r, self.n_f = s, d_r, n_f
        self.filters = parameter(uniform_init(rng, (s, s, d_r, n_f), s * s * d_r))

    def param_count(self) -> int:
        return self.s * self.s * self.d_r * self.n_f


def enumerate_groups(n: int, s: int) -> list[Group]:
    """All ``C(n, s)`` ascending index tuples, in lexicographic order."""
    if not 1 <= s <= n:
        raise ValueError(f"group size s={s} must satisfy 1 <= s <= n={n}")
    return list(itertools.combinations(range(n), s))


def rel_inner_product(r_sub: Tensor, filt: Tensor) -> Tensor:
    r_sub, filt = as_tensor(r_sub), as_tensor(filt)
    if r_sub.shape != filt.shape:
        raise ShapeError("rel_inner_product", r_sub.shape, filt.shape)
    return (r_sub * filt).sum()


def _bank_tensor(bank) -> Tensor:
    return bank.filters if isinstance(bank, GraphletFilters) else as_tensor(bank)


def rel_inner_product_bank(r_sub: Tensor, bank) -> Tensor:
    """``(..., s, s, d_r)`` sub-tensors against every filter: ``(..., n_f)``."""
    r_sub, f = as_tensor(r_sub), _bank_tensor(bank)
    s, _, d_r, n_f = f.shape
    if r_sub.shape[-3:] != f.shape[:3]:
        raise ShapeError("rel_inner_product_bank", r_sub.shape, f.shape)
    lead = r_sub.shape[:-3]
    flat = r_sub.reshape((-1, s * s * d_r))
    return (flat @ f.reshape(s * s * d_r, n_f)).reshape(lead + (n_f,))


def _orderings(s: int, symmetric: bool) -> np.ndarray:
    if not symmetric:
        return np.arange(s)[None, :]
    if s > MAX_SYMMETRIC_GROUP:
        raise ValueError(f"symmetric relational inner product enumerates s! orderings; s={s} > {MAX_SYMMETRIC_GROUP} unsupported")
    return np.array(list(itertools.permutations(range(s))), dtype=np.int64)


def _pool(values: Tensor, pool: str) -> Tensor:
    # values: (B, G, P, n_f) -> (B, G, n_f)
    if pool == "max":
        return values.max(axis=2)
    if pool == "mean":
        return values.mean(axis=2)
    raise ValueError(f"unknown pool {pool!r}")


def _as_batched(r: Tensor) -> tuple[Tensor, bool]:
    r = as_tensor(r)
    if r.ndim == 3:
        return r.reshape((1,) + r.shape), True
    if r.ndim != 4 or r.shape[1] != r.shape[2]:
        raise ShapeError("relconv", r.shape)
    return r, False


def _group_array(groups: Sequence[Group], n: int) -> np.ndarray:
    if len(groups) == 0:
        raise ValueError("group set is empty")
    arr = np.asarray(groups, dtype=np.int64)
    if arr.ndim != 2:
        raise ValueError("all groups must have the same size")
    if arr.min() < 0 or arr.max() >= n:
        raise IndexError(f"group index out of range for {n} objects")
    return arr


def relconv_discrete(
    r: Tensor,
    bank,
    groups: Sequence[Group],
    symmetric: bool = False,
    pool: str = "max",
) -> Tensor:
    """Relational convolution ``(B, n, n, d_r) -> (B, |groups|, n_f)``.

    Unbatched ``(n, n, d_r)`` input gives ``(|groups|, n_f)``. With
    ``symmetric`` the inner product is pooled over all ``s!`` orderings of
    each group, independently per filter.
    """
    r, squeeze = _as_batched(r)
    f = _bank_tensor(bank)
    b, n, _, d_r = r.shape
    s = f.shape[0]
    if f.shape[2] != d_r:
        raise ShapeError("relconv_discrete", r.shape, f.shape)
    garr = _group_array(groups, n)
    if garr.shape[1] != s:
        raise ShapeError("relconv_discrete(groups)", garr.shape, f.shape)
    perms = _orderings(s, symmetric)
    ordered = garr[:, perms]  # (G, P, s)
    flat_idx = ordered[:, :, :, None] * n + ordered[:, :, None, :]  # (G, P, s, s)
    sub = gather(r.reshape(b, n * n, d_r), flat_idx, axis=1)  # (B, G, P, s, s, d_r)
    vals = rel_inner_product_bank(sub, f)  # (B, G, P, n_f)
    out = _pool(vals, pool) if symmetric else vals.reshape(b, len(garr), f.shape[3])
    return out.reshape(out.shape[1:]) if squeeze else out


def symmetric_rel_inner_product(r: Tensor, group: Group, bank, pool: str = "max") -> Tensor:
    """Order-invariant relational inner product of one group: ``(n_f,)`` (or ``(B, n_f)``)."""
    r, squeeze = _as_batched(r)
    out = relconv_discrete(r, bank, [tuple(group)], symmetric=True, pool=pool)[:, 0]
    return out.reshape(out.shape[1:]) if squeeze else out


def co_occurring_pairs(groups: Sequence[Group]) -> tuple[np.ndarray, np.ndarray]:
    """Ordered pairs ``(i, j)`` that share a group, self-pairs included, sorted."""
    pairs = set()
    for g in groups:
        for i in g:
            for j in g:
                pairs.add((i, j))
    arr = np.array(sorted(pairs), dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def relconv_sparse(
    x: Tensor,
    mdipr,
    bank,
    groups: Sequence[Group],
    symmetric: bool = False,
    pool: str = "max",
) -> Tensor:
    """Same result as ``relconv_discrete(mdipr(x), ...)`` but only evaluates
    relations between objects that co-occur in some group."""
    x = as_tensor(x)
    b, n, _ = x.shape
    f = _bank_tensor(bank)
    s, _, d_r, n_f = f.shape
    garr = _group_array(groups, n)
    left, right = co_occurring_pairs([tuple(g) for g in garr])
    slot = np.full(n * n, -1, dtype=np.int64)
    slot[left * n + right] = np.arange(len(left))
    rel = mdipr.relation_pairs(x, left, right)  # (B, M, d_r)
    perms = _orderings(s, symmetric)
    ordered = garr[:, perms]
    idx = slot[ordered[:, :, :, None] * n + ordered[:, :, None, :]]
    sub = gather(rel, idx, axis=1)
    vals = rel_inner_product_bank(sub, f)
    return _pool(vals, pool) if symmetric else vals.reshape(b, len(garr), n_f)


class RelConv(Module):
    """Relational convolution layer over a fixed discrete group set."""

    def __init__(self, n: int, d_r: int, s: int, n_f: int, rng: np.random.Generator,
                 groups: Sequence[Group] | None = None, symmetric: bool = False, pool: str = "max"):
        self.bank = GraphletFilters(s, d_r, n_f, rng)
        self.groups = [tuple(g) for g in groups] if groups is not None else enumerate_groups(n, s)
        _group_array(self.groups, n)
        self.symmetric, self.pool = symmetric, pool

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def forward(self, r: Tensor) -> Tensor:
        return relconv_discrete(r, self.bank, self.groups, self.symmetric, self.pool)


def n_groups_for(n: int, s: int) -> int:
    return math.comb(n, s)
