"""Representation diagnostics: context normalisation, PCA and export helpers.

Context normalisation lives here as an ablation/diagnostic only; no model
in the package applies it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .convolution import relconv_discrete
from .models import RelConvNet
from .tasks import CARD_DIM, N_CARDS, SetSplit, TaskInstance, all_sets, completing_card, encode_card, set_deck
from .tensor import no_grad

CN_EPS = 1e-8


def context_normalize(
    x: np.ndarray,
    windows: Sequence[Sequence[int]],
    gain: np.ndarray | float = 1.0,
    shift: np.ndarray | float = 0.0,
    eps: float = CN_EPS,
) -> np.ndarray:
    """Standardise each dimension within each window: ``gain * (x - mu) / sqrt(var + eps) + shift``.

    ``windows`` must partition the row indices of ``x`` (``m x d``); the
    variance is the population variance of the window.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    m = x.shape[0]
    flat = [int(i) for w in windows for i in w]
    if any(len(w) == 0 for w in windows):
        raise ValueError("context window is empty")
    if sorted(flat) != list(range(m)):
        raise ValueError(f"windows must partition the {m} rows exactly once each")
    out = np.empty_like(x)
    for w in windows:
        idx = np.asarray(w, dtype=np.int64)
        block = x[idx]
        mu = block.mean(axis=0)
        var = ((block - mu) ** 2).mean(axis=0)
        scale = np.sqrt(var + eps)
        # a constant window standardises to 0 even when eps is 0
        out[idx] = np.divide(block - mu, scale, out=np.zeros_like(block), where=scale > 0)
    return out * gain + shift


def context_norm_closed_forms(x: float, y: float) -> dict[str, list[float]]:
    """Closed forms for one- and two-valued windows of scalars (``x != y`` for the last two)."""
    s = math.copysign(1.0, x - y)
    return {
        "CN(x,x)": [0.0, 0.0],
        "CN(x,y)": [s, -s],
        "CN(x,x,y)": [s / math.sqrt(2), s / math.sqrt(2), -math.sqrt(2) * s],
    }


@dataclass
class PcaProjection:
    mean: np.ndarray  # (d,)
    axes: np.ndarray  # (k, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.axes.shape[0]


def pca_fit(data: np.ndarray, k: int) -> PcaProjection:
    """Top-``k`` eigenvectors of the sample covariance; each axis's first nonzero entry is positive."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("pca_fit expects an N x d matrix")
    n, d = data.shape
    if k > d:
        raise ValueError(f"k={k} exceeds data dimension d={d}")
    if not 1 <= k <= n:
        raise ValueError(f"need N >= k >= 1, got N={n}, k={k}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    axes = evecs[:, order].T[:k].copy()
    for a in axes:
        nz = np.flatnonzero(np.abs(a) > 1e-12)
        if nz.size and a[nz[0]] < 0:
            a *= -1
    total = evals.sum()
    ratios = evals[:k] / total if total > 0 else np.zeros(k)
    return PcaProjection(mean, axes, ratios)


def pca_apply(proj: PcaProjection, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.shape[-1] != proj.mean.shape[0]:
        raise ValueError(f"data dimension {data.shape[-1]} differs from fitted {proj.mean.shape[0]}")
    return (data - proj.mean) @ proj.axes.T


# ---------------------------------------------------------------------------
# Set geometry
# ---------------------------------------------------------------------------


def balanced_triplets(n_samples: int, rng: np.random.Generator,
                      sets: Sequence[tuple[int, int, int]] | None = None) -> tuple[list[tuple[int, int, int]], np.ndarray]:
    """``n_samples // 2`` sets and as many non-set triplets of distinct cards, shuffled."""
    sets = list(sets) if sets is not None else all_sets()
    n_pos = n_samples // 2
    pos_idx = rng.choice(len(sets), n_pos, replace=n_pos > len(sets))
    triplets = [tuple(sets[i]) for i in pos_idx]
    labels = [1] * n_pos
    while len(triplets) < n_samples:
        a, b, c = (int(v) for v in rng.choice(N_CARDS, 3, replace=False))
        if completing_card(a, b) != c:
            triplets.append(tuple(sorted((a, b, c))))
            labels.append(0)
    order = rng.permutation(n_samples)
    return [triplets[i] for i in order], np.asarray(labels, dtype=np.int64)[order]


def set_triplet_features(model: RelConvNet, triplets: Sequence[tuple[int, int, int]], block: int = 0) -> np.ndarray:
    """``<R[g], f>`` of the first block's MD-IPR and filters on each 3-card group: ``(N, n_f)``."""
    deck = set_deck()
    blk = model.blocks[block]
    bank = getattr(blk.conv, "bank", None)
    if bank is None or blk.cfg.s != 3:
        raise ValueError("set geometry needs a relconv block with triplet filters")
    if blk.d_in != CARD_DIM:
        raise ValueError(f"set geometry needs a block over {CARD_DIM}-dim cards, this one takes {blk.d_in}")
    x = np.stack([[encode_card(deck[c]) for c in t] for t in triplets])
    with no_grad():
        r = blk.mdipr(x)
        out = relconv_discrete(r, bank, [(0, 1, 2)], symmetric=blk.cfg.symmetric_rip, pool=blk.cfg.pool)
    return out.data[:, 0, :]


def linear_probe_accuracy(coords: np.ndarray, labels: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a logistic regression fit on a stratified half of the points."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split

    x_tr, x_te, y_tr, y_te = train_test_split(coords, labels, test_size=0.5, random_state=seed, stratify=labels)
    probe = LogisticRegression(max_iter=1000).fit(x_tr, y_tr)
    return float(probe.score(x_te, y_te))


def export_set_geometry(model: RelConvNet, n_samples: int = 2000, seed: int = 0,
                        out_path: str | Path | None = None, split: SetSplit | None = None,
                        partition: str | None = None) -> dict:
    """PCA-2 coordinates of triplet relconv features for a balanced set/non-set sample.

    Writes ``id,pc1,pc2,label`` rows to ``out_path`` when given. Returns the
    rows, the PCA fit and a linear-probe accuracy.
    """
    rng = np.random.default_rng(seed)
    sets = split.partition(partition) if (split is not None and partition) else None
    triplets, labels = balanced_triplets(n_samples, rng, sets)
    feats = set_triplet_features(model, triplets)
    proj = pca_fit(feats, 2)
    coords = pca_apply(proj, feats)
    rows = [{"id": "-".join(map(str, t)), "pc1": float(c[0]), "pc2": float(c[1]), "label": int(l)}
            for t, c, l in zip(triplets, coords, labels)]
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "pc1", "pc2", "label"], lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "pc1": repr(row["pc1"]), "pc2": repr(row["pc2"])})
    return {"rows": rows, "pca": proj, "probe_accuracy": linear_probe_accuracy(coords, labels, seed),
            "coords": coords, "labels": labels}


# ---------------------------------------------------------------------------
# group attention
# ---------------------------------------------------------------------------


def group_attention_scores(model, objects: np.ndarray) -> list[np.ndarray]:
    """Attention maps of every learned-grouping block for one instance, batch axis removed."""
    with no_grad():
        _, scores = model.forward_with_scores(np.asarray(objects)[None])
    return [s.data[0] if s.data.ndim == 4 else s.data for s in scores]


def export_group_attention(model, instance: TaskInstance, out_path: str | Path | None = None) -> dict:
    """JSON-ready record of ``alpha[g, i, j]`` (``n_g x s x n`` per attention block)."""
    maps = group_attention_scores(model, instance.objects)
    record = {
        "label": int(instance.label),
        "meta": instance.meta,
        "blocks": [{"shape": list(m.shape), "alpha": m.tolist()} for m in maps],
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(record, sort_keys=True, default=_json_default) + "\n")
    return record


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def mean_row_entropy(alpha: np.ndarray) -> float:
    a = np.asarray(alpha, dtype=np.float64)
    safe = np.where(a > 0, a, 1.0)
    return float(np.mean(-(a * np.log(safe)).sum(axis=-1)))


def context_norm_demo(x: float = 1.0, y: float = 3.0) -> dict:
    """Closed forms next to ``context_normalize`` outputs for scalars ``x, y``."""
    closed = context_norm_closed_forms(x, y)
    inputs = {"CN(x,x)": [x, x], "CN(x,y)": [x, y], "CN(x,x,y)": [x, x, y]}
    out = {}
    for key, vals in inputs.items():
        got = context_normalize(np.array(vals)[:, None], [list(range(len(vals)))])[:, 0]
        out[key] = {"input": vals, "numeric": got.tolist(), "closed_form": closed[key],
                    "max_abs_diff": float(np.max(np.abs(got - np.array(closed[key]))))}
    return out
