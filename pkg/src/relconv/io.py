"""On-disk formats.

Checkpoint and binary dataset files share one layout: an 8-byte magic, a
little-endian u64 header length, a UTF-8 JSON header, then packed
little-endian float64 arrays in the order the header lists them.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import ModelSpec, build_model
from .tasks import Dataset

CHECKPOINT_MAGIC = b"RCNCKPT1"
DATASET_MAGIC = b"RCNDATA1"
_F8 = np.dtype("<f8")


class FormatError(ValueError):
    """File does not match the expected layout."""


def _write_framed(path: str | Path, magic: bytes, header: dict, arrays: list[np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_F8).tobytes())


def _read_framed(path: str | Path, magic: bytes) -> tuple[dict, memoryview]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    return header, memoryview(raw)[16 + n:]


def _take(body: memoryview, offset: int, shape: tuple[int, ...], path) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + count * 8
    if end > len(body):
        raise FormatError(f"{path}: payload shorter than the header declares")
    return np.frombuffer(body[offset:end], dtype=_F8).reshape(shape).astype(np.float64), end


def save_checkpoint(path: str | Path, model, seed: int, meta: dict | None = None) -> None:
    named = list(model.named_parameters())
    header = {
        "format": 1,
        "spec": model.spec.to_dict(),
        "seed": seed,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "meta": meta or {},
    }
    _write_framed(path, CHECKPOINT_MAGIC, header, [p.data for _, p in named])


def load_checkpoint(path: str | Path):
    """Rebuild the model recorded in a checkpoint; returns ``(model, header)``."""
    header, body = _read_framed(path, CHECKPOINT_MAGIC)
    spec = ModelSpec.from_dict(header["spec"])
    model = build_model(spec, header.get("seed", 0))
    named = list(model.named_parameters())
    entries = header["params"]
    if [e["name"] for e in entries] != [n for n, _ in named]:
        raise FormatError(f"{path}: parameter list does not match the model built from its spec")
    offset = 0
    for e, (name, p) in zip(entries, named):
        if tuple(e["shape"]) != p.shape:
            raise FormatError(f"{path}: {name} has shape {tuple(e['shape'])}, model expects {p.shape}")
        values, offset = _take(body, offset, p.shape, path)
        p.data[...] = values
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes")
    return model, header


def save_dataset_binary(path: str | Path, ds: Dataset) -> None:
    n_inst, n, d = ds.X.shape
    header = {"N": n_inst, "n": n, "d": d, "meta": _jsonable(ds.meta)}
    _write_framed(path, DATASET_MAGIC, header, [ds.X, ds.y.astype(np.float64)])


def load_dataset_binary(path: str | Path) -> Dataset:
    header, body = _read_framed(path, DATASET_MAGIC)
    shape = (header["N"], header["n"], header["d"])
    X, offset = _take(body, 0, shape, path)
    y, offset = _take(body, offset, (header["N"],), path)
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes")
    return Dataset(X, y.astype(np.int64), header["meta"])


def save_dataset_jsonl(path: str | Path, ds: Dataset) -> None:
    """One ``{"objects", "label", "meta"}`` record per line."""
    base = {k: v for k, v in ds.meta.items() if k != "cards"}
    cards = ds.meta.get("cards")
    with open(path, "w") as fh:
        for i in range(len(ds)):
            meta = {**base, "index": i}
            if cards is not None:
                meta["cards"] = cards[i]
            rec = {"objects": ds.X[i].tolist(), "label": int(ds.y[i]), "meta": _jsonable(meta)}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset_jsonl(path: str | Path) -> Dataset:
    X, y, metas = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                X.append(np.asarray(rec["objects"], dtype=np.float64))
                y.append(int(rec["label"]))
                metas.append(rec.get("meta", {}))
            except (KeyError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed instance ({exc})") from exc
    if not X:
        raise FormatError(f"{path}: no instances")
    meta = {k: v for k, v in metas[0].items() if k not in ("index", "cards")}
    if "cards" in metas[0]:
        meta["cards"] = [m["cards"] for m in metas]
    return Dataset(np.stack(X), np.asarray(y, dtype=np.int64), meta)


def load_dataset(path: str | Path) -> Dataset:
    """Binary or JSON-lines dataset, chosen by content."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    return load_dataset_binary(path) if head == DATASET_MAGIC else load_dataset_jsonl(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
