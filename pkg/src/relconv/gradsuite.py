"""Finite-difference checks for every differentiable component on toy inputs (n <= 5, d <= 8)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .convolution import GraphletFilters, enumerate_groups, relconv_discrete
from .gradcheck import GradCheckResult, check_gradients
from .grouping import GroupAttention, RelConvGroupAttention, SoftGroupRelConv, entropy_regularizer
from .models import ModelSpec, RelConvBlockConfig, build_model, set_block
from .relation import MDIPR
from .tensor import Tensor
from .training import cross_entropy, total_loss


@dataclass
class SuiteEntry:
    name: str
    result: GradCheckResult
    seconds: float


def _mdipr(rng, symmetric: bool):
    x = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    layer = MDIPR(6, 3, 2, rng, symmetric=symmetric, phi="mlp", d_phi=5)
    w = rng.normal(size=(2, 4, 4, 3))
    return (lambda *_: (layer(x) * w).sum()), [x, *layer.parameters()], False


def _relconv_discrete(rng, symmetric: bool):
    n, d_r = 5, 3
    r = Tensor(rng.normal(size=(2, n, n, d_r)), requires_grad=True)
    bank = GraphletFilters(3, d_r, 4, rng)
    groups = enumerate_groups(n, 3)
    w = rng.normal(size=(2, len(groups), 4))
    return (lambda *_: (relconv_discrete(r, bank, groups, symmetric=symmetric, pool="max") * w).sum()), \
        [r, bank.filters], symmetric


def _group_attention(rng):
    x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    att = GroupAttention(4, 3, 2, rng, d_key=4, key_mode="positional+feature")
    layer = RelConvGroupAttention(att, MDIPR(4, 3, 2, rng), GraphletFilters(2, 3, 4, rng))
    w = rng.normal(size=(2, 3, 4))

    def f(*_):
        out, alpha = layer(x)
        return (out * w).sum() + entropy_regularizer(alpha) * 0.7

    return f, [x, *layer.parameters()], False


def _soft_groups(rng):
    x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    layer = SoftGroupRelConv(5, 3, MDIPR(4, 3, 2, rng), GraphletFilters(3, 3, 4, rng), rng)
    w = rng.normal(size=(2, 3, 4))
    return (lambda *_: (layer(x)[0] * w).sum()), [x, *layer.parameters()], True


def _model(kind: str, **kw):
    def make(rng):
        n = 4
        spec = ModelSpec(kind, n, 6, hidden=[5], **kw)
        model = build_model(spec, rng)
        x = rng.normal(size=(3, n, 6))
        y = np.array([0, 1, 1])
        return (lambda *_: cross_entropy(model(x), y)), model.parameters(), True
    return make


def _relconvnet_attention(rng):
    spec = ModelSpec("relconvnet", 5, 6, hidden=[5], blocks=[
        RelConvBlockConfig(d_r=3, d_proj=2, s=3, n_f=4, grouping="attention", n_g=3, d_key=4),
        RelConvBlockConfig(d_r=2, d_proj=2, s=2, n_f=3),
    ])
    model = build_model(spec, rng)
    x = rng.normal(size=(2, 5, 6))
    y = np.array([1, 0])

    def f(*_):
        logits, scores = model.forward_with_scores(x)
        return total_loss(logits, y, scores, lam=0.5)

    return f, model.parameters(), True


COMPONENTS: dict[str, Callable] = {
    "mdipr": lambda rng: _mdipr(rng, True),
    "mdipr_asymmetric": lambda rng: _mdipr(rng, False),
    "relconv_discrete": lambda rng: _relconv_discrete(rng, False),
    "symmetric_rip": lambda rng: _relconv_discrete(rng, True),
    "group_attention_entropy": _group_attention,
    "soft_groups": _soft_groups,
    "corelnet": _model("corelnet"),
    "predinet": _model("predinet"),
    "transformer": _model("transformer", transformer={"d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 8}),
    "relconvnet": _model("relconvnet", blocks=[set_block(d_r=3, d_proj=3, n_f=4)]),
    "relconvnet_attention_loss": _relconvnet_attention,
}


def run_suite(components: list[str] | None = None, h: float = 1e-5, seed: int = 0) -> list[SuiteEntry]:
    names = components or list(COMPONENTS)
    unknown = [c for c in names if c not in COMPONENTS]
    if unknown:
        raise ValueError(f"unknown gradcheck components {unknown}; available: {list(COMPONENTS)}")
    entries = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        f, inputs, piecewise = COMPONENTS[name](rng)
        t0 = time.perf_counter()
        result = check_gradients(f, inputs, h=h, skip_kinks=piecewise)
        entries.append(SuiteEntry(name, result, time.perf_counter() - t0))
    return entries
