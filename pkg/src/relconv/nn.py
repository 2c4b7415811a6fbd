"""Parameter containers and the small set of standard layers the models share."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, layer_norm, softmax

__all__ = ["Module", "parameter", "uniform_init", "Linear", "MLP", "LayerNorm", "MultiHeadSelfAttention"]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform on ``[-sqrt(1/fan_in), +sqrt(1/fan_in)]``."""
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Module:
    """Attribute-declared parameters, enumerated in declaration order.

    Tensors with ``requires_grad`` set, child modules and lists of child
    modules are discovered from ``vars(self)``. A tensor stored under two
    names (weight tying) is reported once, under its first name.
    """

    def named_parameters(self, prefix: str = "", _seen: set | None = None):
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = parameter(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError("linear", x.shape, self.weight.shape)
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


_ACTIVATIONS = {
    "relu": Tensor.relu,
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
    "identity": lambda t: t,
}


class MLP(Module):
    """Dense layers with a hidden activation and a linear final layer."""

    def __init__(self, sizes, rng: np.random.Generator, activation: str = "relu", final_activation: str = "identity"):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation
        self.final_activation = final_activation

    def forward(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return _ACTIVATIONS[self.final_activation](self.layers[-1](x))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.shift = parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over the object axis.

    Input ``(B, n, d)``; ``d`` must be divisible by ``n_heads``. The last
    attention map ``(B, heads, n, n)`` is kept on ``last_attention``.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"model width {d} is not divisible by {n_heads} heads")
        self.d, self.n_heads = d, n_heads
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False)
        self.last_attention = None

    def _split(self, t: Tensor, b: int, n: int) -> Tensor:
        return t.reshape(b, n, self.n_heads, self.d // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        dh = self.d // self.n_heads
        q = self._split(self.wq(x), b, n)
        k = self._split(self.wk(x), b, n)
        v = self._split(self.wv(x), b, n)
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        self.last_attention = att.data
        mixed = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, self.d)
        return self.wo(mixed)
