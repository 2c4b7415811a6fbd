"""RelConvNet and the relational baselines it is compared against.

Every model maps a batch of objects ``(B, n, d_in)`` to class logits
``(B, n_classes)``. ``forward_with_scores`` additionally returns the group
attention maps produced along the way (empty for models without them), which
the training loss uses for entropy regularisation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .convolution import GraphletFilters, RelConv, enumerate_groups
from .grouping import GroupAttention, RelConvGroupAttention, SoftGroupRelConv
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadSelfAttention, parameter, uniform_init
from .relation import MDIPR
from .tensor import ShapeError, Tensor, as_tensor, softmax

GROUPINGS = ("discrete_all", "discrete_given", "attention", "soft")


@dataclass
class RelConvBlockConfig:
    d_r: int = 16
    d_proj: int = 4
    symmetric_relations: bool = True
    s: int = 3
    n_f: int = 16
    grouping: str = "discrete_all"
    n_g: int | None = None
    groups: list[list[int]] | None = None
    symmetric_rip: bool = False
    pool: str = "max"
    residual: bool = False
    key_mode: str = "positional"
    d_key: int = 8
    input_queries: bool = False
    phi: str = "identity"
    d_phi: int | None = None

    def __post_init__(self):
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}, got {self.grouping!r}")
        if self.grouping in ("attention", "soft") and not self.n_g:
            raise ValueError(f"grouping={self.grouping!r} needs n_g")
        if self.grouping == "discrete_given" and not self.groups:
            raise ValueError("grouping='discrete_given' needs an explicit groups list")
        if self.pool not in ("max", "mean"):
            raise ValueError(f"pool must be 'max' or 'mean', got {self.pool!r}")


@dataclass
class CoRelNetConfig:
    d_z: int | None = None


@dataclass
class PrediNetConfig:
    key_dim: int = 4
    n_heads: int = 4
    n_relations: int = 16


@dataclass
class TransformerConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 8
    d_ff: int = 128


MODEL_KINDS = ("relconvnet", "corelnet", "predinet", "transformer")


@dataclass
class ModelSpec:
    kind: str
    n_objects: int
    d_in: int
    n_classes: int = 2
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    readout: str = "flatten"
    blocks: list[RelConvBlockConfig] = field(default_factory=list)
    corelnet: CoRelNetConfig = field(default_factory=CoRelNetConfig)
    predinet: PrediNetConfig = field(default_factory=PrediNetConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.readout not in ("flatten", "sum"):
            raise ValueError(f"readout must be 'flatten' or 'sum', got {self.readout!r}")
        if self.kind == "relconvnet" and not self.blocks:
            raise ValueError("relconvnet needs at least one block")
        self.blocks = [b if isinstance(b, RelConvBlockConfig) else RelConvBlockConfig(**b) for b in self.blocks]
        for name, cls in (("corelnet", CoRelNetConfig), ("predinet", PrediNetConfig), ("transformer", TransformerConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class RelConvBlock(Module):
    """MD-IPR followed by a relational convolution under the configured grouping.

    Maps ``(B, n_in, d_in)`` to ``(B, n_out, n_f)``, or back to
    ``(B, n_in, d_in)`` as ``LayerNorm(H + W block(H))`` when residual.
    """

    def __init__(self, d_in: int, n_in: int, cfg: RelConvBlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.mdipr = MDIPR(d_in, cfg.d_r, cfg.d_proj, rng, symmetric=cfg.symmetric_relations,
                           phi=cfg.phi, d_phi=cfg.d_phi)
        if cfg.grouping in ("discrete_all", "discrete_given"):
            groups = [tuple(g) for g in cfg.groups] if cfg.grouping == "discrete_given" else enumerate_groups(n_in, cfg.s)
            self.conv = RelConv(n_in, cfg.d_r, cfg.s, cfg.n_f, rng, groups=groups,
                                symmetric=cfg.symmetric_rip, pool=cfg.pool)
            n_out = len(groups)
        elif cfg.grouping == "attention":
            attention = GroupAttention(d_in, cfg.n_g, cfg.s, rng, d_key=cfg.d_key, key_mode=cfg.key_mode,
                                       n_max=max(32, n_in), input_queries=cfg.input_queries)
            bank = GraphletFilters(cfg.s, cfg.d_r, cfg.n_f, rng)
            self.conv = RelConvGroupAttention(attention, self.mdipr, bank, cfg.symmetric_rip, cfg.pool)
            n_out = cfg.n_g
        else:
            bank = GraphletFilters(cfg.s, cfg.d_r, cfg.n_f, rng)
            self.conv = SoftGroupRelConv(n_in, cfg.n_g, self.mdipr, bank, rng)
            n_out = cfg.n_g
        self.n_in, self.d_in = n_in, d_in
        if cfg.residual:
            if n_out != n_in:
                raise ShapeError("residual relconv block (objects in vs out)", (n_in, d_in), (n_out, cfg.n_f))
            self.write = Linear(cfg.n_f, d_in, rng, bias=False)
            self.norm = LayerNorm(d_in)
            self.n_out, self.d_out = n_in, d_in
        else:
            self.n_out, self.d_out = n_out, cfg.n_f

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor | None]:
        h = as_tensor(h)
        if h.shape[1:] != (self.n_in, self.d_in):
            raise ShapeError("relconv_block", h.shape, (self.n_in, self.d_in))
        if self.cfg.grouping in ("discrete_all", "discrete_given"):
            out, scores = self.conv(self.mdipr(h)), None
        else:
            out, scores = self.conv(h)
        if self.cfg.residual:
            out = self.norm(h + self.write(out))
        return out, scores


class _Classifier(Module):
    def forward(self, x) -> Tensor:
        return self.forward_with_scores(x)[0]

    @staticmethod
    def _batch(x) -> Tensor:
        x = as_tensor(x)
        return x.reshape((1,) + x.shape) if x.ndim == 2 else x


class RelConvNet(_Classifier):
    """Stacked relational convolution blocks, then a perceptron readout.

    With ``readout="sum"`` the block rows are summed before the perceptron,
    which makes the model invariant to reordering them.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        n, d = spec.n_objects, spec.d_in
        self.blocks = []
        for cfg in spec.blocks:
            block = RelConvBlock(d, n, cfg, rng)
            self.blocks.append(block)
            n, d = block.n_out, block.d_out
        width = n * d if spec.readout == "flatten" else d
        self.head = MLP([width, *spec.hidden, spec.n_classes], rng)

    def features(self, x) -> tuple[Tensor, list[Tensor]]:
        h = self._batch(x)
        scores = []
        for block in self.blocks:
            h, s = block(h)
            if s is not None:
                scores.append(s)
        return h, scores

    def forward_with_scores(self, x):
        h, scores = self.features(x)
        pooled = h.reshape(h.shape[0], -1) if self.spec.readout == "flatten" else h.sum(axis=1)
        return self.head(pooled), scores


class CoRelNet(_Classifier):
    """Row-softmaxed similarity matrix of linearly embedded objects, flattened."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        d_z = spec.corelnet.d_z or spec.d_in
        self.embed = Linear(spec.d_in, d_z, rng, bias=False)
        self.head = MLP([spec.n_objects ** 2, *spec.hidden, spec.n_classes], rng)

    def similarity(self, x) -> Tensor:
        z = self.embed(self._batch(x))
        return softmax(z @ z.transpose(0, 2, 1), axis=-1)

    def forward_with_scores(self, x):
        sim = self.similarity(x)
        return self.head(sim.reshape(sim.shape[0], -1)), []


class PrediNet(_Classifier):
    """Per head, two attention-selected objects and their projected difference.

    Each head owns two learned queries matched against keys ``W_k x_j``;
    the difference ``E1 W_s - E2 W_s`` of the retrieved objects gives
    ``n_relations`` features per head.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        cfg = spec.predinet
        if cfg.n_heads < 1 or cfg.n_relations < 1:
            raise ValueError("PrediNet needs at least one head and one relation")
        self.key_proj = Linear(spec.d_in, cfg.key_dim, rng, bias=False)
        self.query1 = parameter(uniform_init(rng, (cfg.key_dim, cfg.n_heads), cfg.key_dim))
        self.query2 = parameter(uniform_init(rng, (cfg.key_dim, cfg.n_heads), cfg.key_dim))
        self.rel_proj = Linear(spec.d_in, cfg.n_relations, rng, bias=False)
        self.head = MLP([cfg.n_heads * cfg.n_relations, *spec.hidden, spec.n_classes], rng)

    def differences(self, x) -> Tensor:
        x = self._batch(x)
        keys = self.key_proj(x)  # (B, n, key_dim)
        a1 = softmax(keys @ self.query1, axis=1).transpose(0, 2, 1)  # (B, heads, n)
        a2 = softmax(keys @ self.query2, axis=1).transpose(0, 2, 1)
        e1, e2 = a1 @ x, a2 @ x  # (B, heads, d_in)
        return self.rel_proj(e1) - self.rel_proj(e2)  # (B, heads, n_relations)

    def forward_with_scores(self, x):
        d = self.differences(x)
        return self.head(d.reshape(d.shape[0], -1)), []


class _EncoderLayer(Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = MLP([d, d_ff, d], rng)

    def forward(self, h: Tensor) -> Tensor:
        h = h + self.attn(self.norm1(h))
        return h + self.ff(self.norm2(h))


class TransformerEncoder(_Classifier):
    """Pre-norm Transformer encoder, average-pooled over objects."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        cfg = spec.transformer
        if cfg.d_model % cfg.n_heads:
            raise ValueError(f"d_model={cfg.d_model} is not divisible by n_heads={cfg.n_heads}")
        self.embed = Linear(spec.d_in, cfg.d_model, rng)
        self.layers = [_EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng) for _ in range(cfg.n_layers)]
        self.head = MLP([cfg.d_model, *spec.hidden, spec.n_classes], rng)

    def encode(self, x) -> Tensor:
        h = self.embed(self._batch(x))
        for layer in self.layers:
            h = layer(h)
        return h

    def forward_with_scores(self, x):
        return self.head(self.encode(x).mean(axis=1)), []


_BUILDERS = {
    "relconvnet": RelConvNet,
    "corelnet": CoRelNet,
    "predinet": PrediNet,
    "transformer": TransformerEncoder,
}


def build_model(spec: ModelSpec, rng: np.random.Generator | int) -> _Classifier:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return _BUILDERS[spec.kind](spec, rng)


def set_block(**overrides) -> RelConvBlockConfig:
    """The Set-task block: symmetric relations, triplet combinations, max-pooled symmetric RIP."""
    cfg = dict(d_r=16, d_proj=16, symmetric_relations=True, s=3, n_f=16, grouping="discrete_all",
               symmetric_rip=True, pool="max")
    cfg.update(overrides)
    return RelConvBlockConfig(**cfg)


def count_block_parameters(blocks: Sequence[RelConvBlock]) -> list[dict]:
    rows = []
    for block in blocks:
        bank = block.conv.bank
        rows.append({"mdipr": block.mdipr.param_count(), "filters": bank.param_count()})
    return rows
