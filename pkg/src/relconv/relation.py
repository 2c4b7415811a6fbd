"""Multi-dimensional inner product relations (MD-IPR).

For objects ``x, y`` the layer returns a ``d_r``-vector of inner products
``<W1[k] phi(x), W2[k] phi(y)>``, one per relation channel ``k``, where
``phi`` is shared across channels. With ``symmetric=True`` the two
projections are the same tensor, so ``r(x, y) == r(y, x)`` bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import instrument
from .nn import MLP, Module, parameter, uniform_init
from .tensor import ShapeError, Tensor, as_tensor, gather


class MDIPR(Module):
    """Relation tensor ``R[..., i, j, k] = <W1[k] phi(x_i), W2[k] phi(x_j)>``.

    Parameters
    ----------
    d_in : int
        Object dimension.
    d_r : int
        Number of relation channels.
    d_proj : int
        Projection width of each channel.
    symmetric : bool
        Tie ``W2`` to ``W1``.
    phi : {"identity", "mlp"}
        Shared map applied before projection; ``"mlp"`` is one tanh hidden
        layer of width ``d_phi``.
    """

    def __init__(
        self,
        d_in: int,
        d_r: int,
        d_proj: int,
        rng: np.random.Generator,
        symmetric: bool = True,
        phi: str = "identity",
        d_phi: int | None = None,
    ):
        if d_r < 1 or d_proj < 1:
            raise ValueError("d_r and d_proj must be positive")
        self.d_in, self.d_r, self.d_proj, self.symmetric = d_in, d_r, d_proj, symmetric
        if phi == "identity":
            self.phi = None
            self.d_phi = d_in
        elif phi == "mlp":
            self.d_phi = d_phi or d_in
            self.phi = MLP([d_in, self.d_phi], rng, final_activation="tanh")
        else:
            raise ValueError(f"unknown phi {phi!r}")
        self.phi_kind = phi
        shape = (d_r, d_proj, self.d_phi)
        self.W1 = parameter(uniform_init(rng, shape, self.d_phi))
        self.W2 = self.W1 if symmetric else parameter(uniform_init(rng, shape, self.d_phi))

    def _project(self, x: Tensor, w: Tensor) -> Tensor:
        # (..., n, d_phi) -> (..., n, d_r, d_proj)
        flat = w.reshape(self.d_r * self.d_proj, self.d_phi).transpose(1, 0)
        p = x @ flat
        return p.reshape(x.shape[:-1] + (self.d_r, self.d_proj))

    def embed(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Per-object projections ``(P1, P2)`` of shape ``(..., n, d_r, d_proj)``."""
        x = as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError("mdipr", x.shape, (self.d_in,))
        h = self.phi(x) if self.phi is not None else x
        p1 = self._project(h, self.W1)
        p2 = p1 if self.symmetric else self._project(h, self.W2)
        return p1, p2

    def forward(self, x: Tensor) -> Tensor:
        """``(..., n, d_in)`` objects to an ``(..., n, n, d_r)`` relation tensor."""
        x = as_tensor(x)
        if x.ndim < 2:
            raise ShapeError("mdipr", x.shape, (self.d_in,))
        lead, n = x.shape[:-2], x.shape[-2]
        x3 = x.reshape((-1, n, self.d_in))
        b = x3.shape[0]
        p1, p2 = self.embed(x3)
        a = p1.transpose(0, 2, 1, 3)  # (b, d_r, n, d_proj)
        c = a if self.symmetric else p2.transpose(0, 2, 1, 3)
        r = (a @ c.transpose(0, 1, 3, 2)).transpose(0, 2, 3, 1)  # (b, n, n, d_r)
        instrument.add("relation_pairs", b * n * n)
        return r.reshape(lead + (n, n, self.d_r))

    def relation_pairs(self, x: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
        """Relations for selected pairs only: ``(B, n, d) -> (B, M, d_r)``."""
        x = as_tensor(x)
        if x.ndim != 3:
            raise ShapeError("mdipr.relation_pairs", x.shape)
        p1, p2 = self.embed(x)
        a = gather(p1, np.asarray(left), axis=1)
        c = gather(p2, np.asarray(right), axis=1)
        instrument.add("relation_pairs", x.shape[0] * len(left))
        return (a * c).sum(axis=-1)

    def param_count(self) -> int:
        return mdipr_param_count(self)


def mdipr_param_count(layer: MDIPR) -> int:
    """Stored learnable values: ``(1 if symmetric else 2) * d_r * d_proj * d_phi`` plus ``phi``."""
    own = (1 if layer.symmetric else 2) * layer.d_r * layer.d_proj * layer.d_phi
    return own + (layer.phi.num_parameters() if layer.phi is not None else 0)
