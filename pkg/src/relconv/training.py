"""Optimisation loop, losses and metrics."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grouping import entropy_regularizer, entropy_scale
from .models import ModelSpec, build_model
from .tasks import Dataset
from .tensor import Tensor, as_tensor, log_softmax, no_grad


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


class DataShapeError(ValueError):
    """Dataset does not fit the model it is used with."""


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 100
    schedule: str = "constant"
    entropy_coef: float = 0.0
    patience: int | None = None

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


class Adam:
    """Bias-corrected Adam with optional decoupled weight decay.

    Step ``t`` uses ``lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)`` and
    ``p -= lr_t * m / (sqrt(v) + eps)``; weight decay subtracts
    ``lr * wd * p`` before the moment update.
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7, weight_decay: float = 0.0):
        named_params = list(named_params)
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params],
                                    [np.zeros_like(p.data) for p in self.params])

    def check_grads(self) -> None:
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name!r}")

    def step(self, lr: float | None = None) -> None:
        self.check_grads()
        lr = self.lr if lr is None else lr
        st = self.state
        st.step += 1
        t = st.step
        lr_t = lr * math.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t)
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr_t * m / (np.sqrt(v) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def entropy_term(scores: Sequence[Tensor]) -> Tensor | None:
    if not scores:
        return None
    total = entropy_regularizer(scores[0])
    for s in scores[1:]:
        total = total + entropy_regularizer(s)
    return total * (1.0 / len(scores))


def total_loss(logits, labels, scores: Sequence[Tensor] | None = None, lam: float = 0.0) -> Tensor:
    """Cross-entropy plus ``lam`` times the mean attention entropy of ``scores``."""
    loss = cross_entropy(logits, labels)
    ent = entropy_term(scores or [])
    if lam and ent is not None:
        loss = loss + ent * lam
    return loss


def predictions(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits, axis=-1)


def evaluate(model, dataset: Dataset, batch_size: int = 512) -> tuple[float, float]:
    """``(accuracy, mean cross-entropy)`` over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct, loss_sum = 0, 0.0
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            xb, yb = dataset.X[lo:lo + batch_size], dataset.y[lo:lo + batch_size]
            logits = model(xb)
            correct += int(np.sum(predictions(logits.data) == yb))
            loss_sum += float(cross_entropy(logits, yb).data) * len(yb)
    return correct / len(dataset), loss_sum / len(dataset)


def mean_entropy(model, dataset: Dataset, batch_size: int = 512) -> float | None:
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            xb = dataset.X[lo:lo + batch_size]
            _, scores = model.forward_with_scores(xb)
            ent = entropy_term(scores)
            if ent is None:
                return None
            total += float(ent.data) * len(xb)
            count += len(xb)
    return total / count


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    test_acc: float | None = None
    test_loss: float | None = None
    best_epoch: int | None = None
    entropy_initial: float | None = None
    seed: int = 0
    config_hash: str = ""
    n_params: int = 0
    wall_clock: float = 0.0

    def to_dict(self, with_timing: bool = True) -> dict:
        d = asdict(self)
        if not with_timing:
            d.pop("wall_clock")
        return d


def _check_shapes(spec: ModelSpec, data: dict[str, Dataset]) -> None:
    for name, ds in data.items():
        check_dataset(spec, name, ds)


def check_dataset(spec: ModelSpec, name: str, ds: Dataset) -> None:
    """Raise unless ``ds`` has the object shape, label range and finiteness ``spec`` needs."""
    if ds.X.ndim != 3 or ds.X.shape[1:] != (spec.n_objects, spec.d_in):
        raise DataShapeError(f"{name} data has objects of shape {ds.X.shape[1:]}, "
                             f"model expects ({spec.n_objects}, {spec.d_in})")
    if not np.all(np.isfinite(ds.X)):
        raise NumericalError(f"{name} data contains non-finite values")
    if len(ds) and (ds.y.min() < 0 or ds.y.max() >= spec.n_classes):
        raise DataShapeError(f"{name} labels fall outside [0, {spec.n_classes})")


def _learning_rate(cfg: OptimConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "cosine" and total_steps > 0:
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return cfg.lr


def train(
    spec: ModelSpec,
    data: dict[str, Dataset],
    optim: OptimConfig,
    seed: int,
    on_epoch: Callable[[dict], None] | None = None,
    run_config: dict | None = None,
):
    """Train a freshly initialised model; returns ``(model, TrainReport)``.

    ``data`` needs ``"train"`` and ``"val"`` (``"test"`` optional). The
    parameters of the best validation epoch (earliest on ties) are restored
    before the test evaluation.
    """
    start = time.perf_counter()
    for key in ("train", "val"):
        if key not in data:
            raise ValueError(f"training data is missing the {key!r} partition")
    _check_shapes(spec, data)
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    model = build_model(spec, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    named = list(model.named_parameters())
    opt = Adam(named, optim.lr, optim.beta1, optim.beta2, optim.eps, optim.weight_decay)
    lam = optim.entropy_coef * entropy_scale(spec.n_classes, spec.n_objects) if optim.entropy_coef else 0.0

    report = TrainReport(seed=seed, config_hash=config_hash(run_config or {"model": spec.to_dict(), "optim": asdict(optim)}),
                         n_params=model.num_parameters())
    report.entropy_initial = mean_entropy(model, data["train"])
    train_ds = data["train"]
    n_batches = math.ceil(len(train_ds) / optim.batch_size)
    total_steps = n_batches * optim.epochs
    best_val, best_params, stale = -1.0, None, 0

    for epoch in range(optim.epochs):
        order = shuffle_rng.permutation(len(train_ds))
        loss_sum, ent_sum, correct = 0.0, 0.0, 0
        lr = optim.lr
        for bi in range(n_batches):
            idx = order[bi * optim.batch_size:(bi + 1) * optim.batch_size]
            xb, yb = train_ds.X[idx], train_ds.y[idx]
            logits, scores = model.forward_with_scores(xb)
            ce = cross_entropy(logits, yb)
            ent = entropy_term(scores)
            loss = ce + ent * lam if (lam and ent is not None) else ce
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            loss.backward()
            lr = _learning_rate(optim, opt.state.step, total_steps)
            opt.step(lr)
            loss_sum += float(ce.data) * len(idx)
            ent_sum += float(ent.data) * len(idx) if ent is not None else 0.0
            correct += int(np.sum(predictions(logits.data) == yb))
        val_acc, val_loss = evaluate(model, data["val"])
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / len(train_ds),
            "train_acc": correct / len(train_ds),
            "val_loss": val_loss,
            "val_acc": val_acc,
            "entropy": ent_sum / len(train_ds) if report.entropy_initial is not None else None,
            "lr": lr,
        }
        report.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val_acc > best_val:
            best_val, stale = val_acc, 0
            best_params = [p.data.copy() for _, p in named]
            report.best_epoch = epoch
        else:
            stale += 1
            if optim.patience is not None and stale >= optim.patience:
                break

    if best_params is not None:
        for (_, p), saved in zip(named, best_params):
            p.data[...] = saved
    if "test" in data and len(data["test"]):
        report.test_acc, report.test_loss = evaluate(model, data["test"])
    report.wall_clock = time.perf_counter() - start
    return model, report
