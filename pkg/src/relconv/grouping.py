"""Learned groupings for relational convolution.

Two mechanisms are provided:

* group attention: ``n_g`` groups of ``s`` soft-retrieved objects, where
  slot ``i`` of group ``g`` is ``sum_j alpha[g, i, j] x_j`` and
  ``alpha[g, i] = softmax_j(beta * <q[g, i], key(x_j)>)``;
* soft groups: a learned membership matrix ``G`` (``n x n_g``) scores every
  discrete group by the product of its members' softplus memberships, and
  sparsemax turns each column of scores into a sparse convex combination of
  discrete relational inner products.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import instrument
from .convolution import (
    GraphletFilters,
    enumerate_groups,
    rel_inner_product_bank,
    relconv_discrete,
    relconv_sparse,
)
from .nn import Linear, Module, MultiHeadSelfAttention, parameter, uniform_init
from .relation import MDIPR
from .tensor import ShapeError, Tensor, as_tensor, gather, softmax, softplus, sparsemax, where

KEY_MODES = ("positional", "feature", "positional+feature", "contextual")


class GroupAttention(Module):
    """Retrieve ``n_g`` groups of ``s`` objects by query/key attention.

    ``beta`` is a learned temperature (initialised to ``1/sqrt(d_key)``).
    With ``input_queries`` the queries are a learned linear map of the
    mean-pooled input instead of free parameters.
    """

    def __init__(
        self,
        d_in: int,
        n_g: int,
        s: int,
        rng: np.random.Generator,
        d_key: int = 8,
        key_mode: str = "positional",
        n_max: int = 32,
        input_queries: bool = False,
    ):
        if n_g < 1 or s < 2:
            raise ValueError("need n_g >= 1 and s >= 2")
        if key_mode not in KEY_MODES:
            raise ValueError(f"key_mode must be one of {KEY_MODES}, got {key_mode!r}")
        self.d_in, self.n_g, self.s, self.d_key = d_in, n_g, s, d_key
        self.key_mode, self.n_max, self.input_queries = key_mode, n_max, input_queries
        if input_queries:
            self.query_map = Linear(d_in, n_g * s * d_key, rng)
        else:
            self.queries = parameter(uniform_init(rng, (n_g, s, d_key), d_key))
        if "positional" in key_mode:
            self.pos_embedding = parameter(uniform_init(rng, (n_max, d_key), d_key))
        if key_mode == "contextual":
            self.context = MultiHeadSelfAttention(d_in, 1, rng)
        if key_mode != "positional":
            self.key_proj = Linear(d_in, d_key, rng, bias=False)
        self.beta = parameter(np.array(1.0 / math.sqrt(d_key)))

    def compute_keys(self, x: Tensor) -> Tensor:
        """Keys ``(B, n, d_key)`` for ``(B, n, d_in)`` objects."""
        n = x.shape[1]
        if "positional" in self.key_mode and n > self.n_max:
            raise ValueError(f"{n} objects exceed the positional table size n_max={self.n_max}")
        if self.key_mode == "positional":
            return self.pos_embedding[:n]
        if self.key_mode == "feature":
            return self.key_proj(x)
        if self.key_mode == "positional+feature":
            return self.key_proj(x) + self.pos_embedding[:n]
        return self.key_proj(x + self.context(x))

    def _queries(self, x: Tensor) -> Tensor:
        if self.input_queries:
            pooled = x.mean(axis=1)  # (B, d_in)
            return self.query_map(pooled).reshape(x.shape[0], self.n_g * self.s, self.d_key)
        return self.queries.reshape(self.n_g * self.s, self.d_key)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(retrieved (B, n_g, s, d_in), alpha (B, n_g, s, n))``."""
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.d_in:
            raise ShapeError("group_attention", x.shape, (self.d_in,))
        b, n, d = x.shape
        keys = self.compute_keys(x)
        keys_t = keys.transpose(1, 0) if keys.ndim == 2 else keys.transpose(0, 2, 1)
        q = self._queries(x)
        instrument.add("score_macs", instrument.matmul_macs(_batched_shape(q.shape, b), _batched_shape(keys_t.shape, b)))
        logits = (q @ keys_t) * self.beta
        if logits.ndim == 2:
            # positional keys with free queries: identical scores for every instance
            logits = logits + np.zeros((b,) + logits.shape)
        alpha = softmax(logits, axis=-1)
        retrieved = alpha @ x  # (B, n_g*s, d)
        return retrieved.reshape(b, self.n_g, self.s, d), alpha.reshape(b, self.n_g, self.s, n)


def _batched_shape(shape: tuple, b: int) -> tuple:
    return shape if len(shape) == 3 else (b,) + shape


def entropy_regularizer(alpha: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the attention rows over the last axis.

    Leading axes are averaged over, so for ``(B, n_g, s, n)`` scores this is
    the batch mean of ``(n_g s)^-1 sum_{g,i} H(alpha[g, i, :])``. ``0 log 0``
    contributes 0.
    """
    alpha = as_tensor(alpha)
    positive = alpha.data > 0
    safe = where(positive, alpha, Tensor(np.ones(alpha.shape)))
    plogp = alpha * safe.log()
    rows = -plogp.sum(axis=-1)
    return rows.mean()


def entropy_scale(n_classes: int, n: int) -> float:
    """``log(n_classes) / log(n)``, the suggested entropy weight factor."""
    if n_classes < 2 or n < 2:
        raise ValueError("entropy_scale needs n_classes >= 2 and n >= 2")
    return math.log(n_classes) / math.log(n)


class RelConvGroupAttention(Module):
    """Group attention, a shared MD-IPR on each retrieved group, then graphlet filters."""

    def __init__(self, attention: GroupAttention, mdipr: MDIPR, bank: GraphletFilters,
                 symmetric: bool = False, pool: str = "max"):
        if bank.s != attention.s:
            raise ValueError(f"filter size {bank.s} differs from group size {attention.s}")
        if bank.d_r != mdipr.d_r:
            raise ValueError("filter bank d_r differs from MD-IPR d_r")
        self.attention, self.mdipr, self.bank = attention, mdipr, bank
        self.symmetric, self.pool = symmetric, pool

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        retrieved, alpha = self.attention(x)
        return relconv_group_attention_from(retrieved, self.mdipr, self.bank, self.symmetric, self.pool), alpha


def relconv_group_attention_from(retrieved: Tensor, mdipr: MDIPR, bank: GraphletFilters,
                                 symmetric: bool = False, pool: str = "max") -> Tensor:
    """``(B, n_g, s, d)`` retrieved objects to ``(B, n_g, n_f)`` group features."""
    b, n_g, s, _ = retrieved.shape
    r = mdipr(retrieved)  # (B, n_g, s, s, d_r)
    if not symmetric:
        return rel_inner_product_bank(r, bank)
    flat = r.reshape(b * n_g, s, s, mdipr.d_r)
    out = relconv_discrete(flat, bank, [tuple(range(s))], symmetric=True, pool=pool)
    return out.reshape(b, n_g, bank.n_f)


def relconv_group_attention(x: Tensor, attention: GroupAttention, mdipr: MDIPR, bank: GraphletFilters,
                            symmetric: bool = False, pool: str = "max") -> tuple[Tensor, Tensor]:
    return RelConvGroupAttention(attention, mdipr, bank, symmetric, pool)(x)


# ---------------------------------------------------------------------------
# soft groups
# ---------------------------------------------------------------------------


def group_match_scores(g_matrix: Tensor, groups: Sequence[tuple[int, ...]]) -> Tensor:
    """Sparse group-match scores ``alpha (|groups|, n_g)``; each column on the simplex.

    The raw score of group ``g`` for column ``k`` is the product of
    ``softplus(G[i, k])`` over members ``i``; sparsemax is applied to the
    log of that product, per column.
    """
    g_matrix = as_tensor(g_matrix)
    if len(groups) == 0:
        raise ValueError("group set is empty")
    garr = np.asarray(groups, dtype=np.int64)
    n, n_g = g_matrix.shape
    if garr.max() >= n or garr.min() < 0:
        raise IndexError(f"group index out of range for a {n}-row group matrix")
    log_member = softplus(g_matrix).log()  # (n, n_g)
    picked = gather(log_member, garr.ravel(), axis=0).reshape(len(garr), garr.shape[1], n_g)
    log_scores = picked.sum(axis=1)
    return sparsemax(log_scores, axis=0)


def _supported(alpha: np.ndarray) -> np.ndarray:
    return np.flatnonzero((alpha > 0).reshape(alpha.shape[0], -1).any(axis=1))


def soft_rel_inner_product(r: Tensor, bank, alpha_column: Tensor, groups: Sequence[tuple[int, ...]]) -> Tensor:
    """``sum_g alpha[g] <R[g], f>``, evaluating only groups with ``alpha[g] > 0``.

    ``r`` is ``(B, n, n, d_r)`` (or unbatched); returns ``(B, n_f)`` (or ``(n_f,)``).
    """
    alpha_column = as_tensor(alpha_column)
    col = alpha_column.reshape(len(groups), 1)
    out = _soft_combine(r, bank, col, groups)
    return out[..., 0, :]


def _soft_combine(r, bank, alpha: Tensor, groups) -> Tensor:
    support = _supported(alpha.data)
    vals = relconv_discrete(r, bank, [tuple(groups[i]) for i in support])  # (B, |S|, n_f)
    weights = alpha[support].transpose(1, 0)  # (n_g, |S|)
    return weights @ vals


def relconv_soft(r: Tensor, bank, g_matrix: Tensor, groups: Sequence[tuple[int, ...]]) -> Tensor:
    """Soft-group relational convolution: ``(B, n, n, d_r) -> (B, n_g, n_f)``."""
    alpha = group_match_scores(g_matrix, groups)
    return _soft_combine(r, bank, alpha, groups)


class SoftGroupRelConv(Module):
    """Soft-group relational convolution with a learned ``n x n_g`` group matrix.

    Relations are evaluated only for pairs that co-occur in a group with a
    nonzero match score for some column.
    """

    def __init__(self, n: int, n_g: int, mdipr: MDIPR, bank: GraphletFilters, rng: np.random.Generator,
                 groups: Sequence[tuple[int, ...]] | None = None):
        self.n, self.n_g = n, n_g
        self.mdipr, self.bank = mdipr, bank
        self.groups = [tuple(g) for g in groups] if groups is not None else enumerate_groups(n, bank.s)
        self.group_matrix = parameter(rng.normal(0.0, 1.0, size=(n, n_g)))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        if x.shape[1] != self.n:
            raise ShapeError("soft_group_relconv", x.shape, self.group_matrix.shape)
        alpha = group_match_scores(self.group_matrix, self.groups)
        support = _supported(alpha.data)
        vals = relconv_sparse(x, self.mdipr, self.bank, [self.groups[i] for i in support])
        weights = alpha[support].transpose(1, 0)
        return weights @ vals, alpha
