"""Seeded generators for the Set task and symbolic relational-games tasks."""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

MAX_TRIES = 10_000


class GeneratorError(RuntimeError):
    """Rejection sampling gave up."""


class SetCard(NamedTuple):
    color: int
    number: int
    shape: int
    fill: int


@dataclass
class TaskInstance:
    objects: np.ndarray  # (n, d)
    label: int
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Stacked instances: ``X (N, n, d)`` float64, ``y (N,)`` int64."""

    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_instances(cls, instances: Sequence[TaskInstance], meta: dict | None = None) -> "Dataset":
        X = np.stack([inst.objects for inst in instances]).astype(np.float64)
        y = np.array([inst.label for inst in instances], dtype=np.int64)
        return cls(X, y, dict(meta or {}))

    def instances(self) -> list[TaskInstance]:
        return [TaskInstance(self.X[i], int(self.y[i]), dict(self.meta)) for i in range(len(self))]


# ---------------------------------------------------------------------------
# Set
# ---------------------------------------------------------------------------

N_CARDS = 81
CARD_DIM = 12


def set_deck() -> list[SetCard]:
    """All 81 cards; card index ``i`` has attributes given by the base-3 digits of ``i``."""
    return [SetCard(*v) for v in itertools.product(range(3), repeat=4)]


def is_set(a: Sequence[int], b: Sequence[int], c: Sequence[int]) -> bool:
    """Every attribute is all-equal or pairwise distinct across the three cards."""
    return all(len({x, y, z}) in (1, 3) for x, y, z in zip(a, b, c))


_DECK = np.array(set_deck(), dtype=np.int64)  # (81, 4)
_POW3 = np.array([27, 9, 3, 1], dtype=np.int64)


def card_index(card: Sequence[int]) -> int:
    return int(np.dot(card, _POW3))


def completing_card(i: int, j: int) -> int:
    """Index of the unique card forming a set with cards ``i`` and ``j``."""
    return int(np.dot((-_DECK[i] - _DECK[j]) % 3, _POW3))


def all_sets() -> list[tuple[int, int, int]]:
    """The sets as ascending card-index triplets, lexicographically ordered."""
    return [t for t in itertools.combinations(range(N_CARDS), 3) if is_set(_DECK[t[0]], _DECK[t[1]], _DECK[t[2]])]


def sets_in_hand(hand: Sequence[int]) -> list[tuple[int, int, int]]:
    """All set triplets (sorted card indices) contained in a hand of card indices."""
    found = []
    for a, b, c in itertools.combinations(hand, 3):
        if completing_card(a, b) == c:
            found.append(tuple(sorted((a, b, c))))
    return found


def encode_card(card: Sequence[int]) -> np.ndarray:
    """12-dim concatenation of four 3-way one-hot blocks."""
    v = np.zeros(CARD_DIM)
    v[np.arange(4) * 3 + np.asarray(card)] = 1.0
    return v


_ENCODED = np.stack([encode_card(c) for c in _DECK])


@dataclass
class SetSplit:
    train: list[tuple[int, int, int]]
    val: list[tuple[int, int, int]]
    test: list[tuple[int, int, int]]
    seed: int

    def partition(self, name: str) -> list[tuple[int, int, int]]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split partition {name!r}")
        return getattr(self, name)


def split_sizes(total: int, fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    # floor val/test, remainder to train
    n_val, n_test = math.floor(total * fractions[1]), math.floor(total * fractions[2])
    return total - n_val - n_test, n_val, n_test


def make_set_split(seed: int) -> SetSplit:
    sets = all_sets()
    order = np.random.default_rng(seed).permutation(len(sets))
    n_train, n_val, _ = split_sizes(len(sets))
    shuffled = [sets[i] for i in order]
    return SetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], seed)


def sample_set_instance(
    split: SetSplit,
    n: int = 5,
    rng: np.random.Generator | None = None,
    partition: str = "train",
    sigma: float = 0.0,
    label: int | None = None,
) -> TaskInstance:
    """One hand of ``n`` distinct cards, labelled by whether it holds a set.

    Positives plant a set from ``partition`` and are rejected unless every set
    in the hand belongs to that partition; negatives are rejected while any
    set is present. ``sigma`` adds Gaussian noise to the one-hot encoding.
    """
    if n <= 3:
        raise ValueError(f"hand size must exceed 3, got {n}")
    rng = rng if rng is not None else np.random.default_rng()
    sets = split.partition(partition)
    allowed = set(sets)
    label = int(rng.integers(2)) if label is None else int(label)
    for _ in range(MAX_TRIES):
        if label == 1:
            planted = sets[int(rng.integers(len(sets)))]
            rest = rng.choice(np.setdiff1d(np.arange(N_CARDS), planted), n - 3, replace=False)
            hand = np.concatenate([np.array(planted), rest])
            rng.shuffle(hand)
            found = sets_in_hand(hand.tolist())
            if found and all(s in allowed for s in found):
                break
        else:
            hand = rng.choice(N_CARDS, n, replace=False)
            if not sets_in_hand(hand.tolist()):
                break
    else:
        raise GeneratorError(f"no valid Set hand (label={label}) after {MAX_TRIES} tries")
    objects = _ENCODED[hand].copy()
    if sigma > 0:
        objects += rng.normal(0.0, sigma, size=objects.shape)
    return TaskInstance(objects, label, {"task": "set", "split": partition, "cards": hand.tolist()})


def make_set_dataset(split: SetSplit, size: int, seed: int, partition: str = "train",
                     n: int = 5, sigma: float = 0.0) -> Dataset:
    rng = np.random.default_rng(seed)
    insts = [sample_set_instance(split, n, rng, partition, sigma) for _ in range(size)]
    ds = Dataset.from_instances(insts, {"task": "set", "split": partition, "seed": seed,
                                        "split_seed": split.seed, "n": n, "sigma": sigma})
    ds.meta["cards"] = [inst.meta["cards"] for inst in insts]
    return ds


# ---------------------------------------------------------------------------
# relational games (symbolic)
# ---------------------------------------------------------------------------

RELGAMES = ("same", "between", "occurs", "xoccurs", "match_pattern")
PATTERNS = {
    "AAA": (0, 0, 0),
    "AAB": (0, 0, 1),
    "ABA": (0, 1, 0),
    "ABB": (0, 1, 1),
    "ABC": (0, 1, 2),
}
GRID = 9


@dataclass
class Vocabulary:
    name: str
    vectors: np.ndarray  # (size, dim), unit rows

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def vocab_seed(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_vocab(name: str, size: int = 32, dim: int = 16) -> Vocabulary:
    """Random unit vectors; the same name always yields the same vectors."""
    v = np.random.default_rng(vocab_seed(name)).normal(size=(size, dim))
    return Vocabulary(name, v / np.linalg.norm(v, axis=1, keepdims=True))


def equality_signature(row: Sequence) -> tuple[int, ...]:
    """Relabel items by first occurrence: ``(x, y, x) -> (0, 1, 0)``."""
    seen: dict = {}
    out = []
    for item in row:
        key = item if isinstance(item, (int, np.integer)) else tuple(np.asarray(item).round(12).tolist())
        out.append(seen.setdefault(key, len(seen)))
    return tuple(out)


_MIN_SYMBOLS = {"same": 2, "between": 3, "occurs": 4, "xoccurs": 4, "match_pattern": 6}


def _grid(vocab: Vocabulary, symbols: dict[int, int]) -> np.ndarray:
    grid = np.zeros((GRID, vocab.dim))
    for cell, sym in symbols.items():
        grid[cell] = vocab.vectors[sym]
    return grid


def _pattern_symbols(pattern: tuple[int, ...], pool: np.ndarray) -> list[int]:
    return [int(pool[p]) for p in pattern]


def gen_relgames(task: str, vocab: Vocabulary, rng: np.random.Generator, label: int | None = None) -> TaskInstance:
    """One 3x3 grid (row-major slots, empty cells zero) for a relational-games task.

    * same: two occupied cells; positive iff they hold the same object.
    * between: one full row; positive iff the outer objects match (the middle is
      always different from both).
    * occurs: one object in the top row, three in the bottom row; positive iff
      the top object appears in the bottom row.
    * xoccurs: as occurs, positive iff it appears exactly once.
    * match_pattern: full top and bottom rows over disjoint symbols; positive
      iff both rows have the same equality pattern.
    """
    if task not in RELGAMES:
        raise ValueError(f"unknown relational-games task {task!r}; expected one of {RELGAMES}")
    if vocab.size < _MIN_SYMBOLS[task]:
        raise ValueError(f"task {task!r} needs at least {_MIN_SYMBOLS[task]} distinct objects; "
                         f"vocabulary {vocab.name!r} has {vocab.size}")
    label = int(rng.integers(2)) if label is None else int(label)
    pool = rng.permutation(vocab.size)
    cells: dict[int, int] = {}
    meta: dict = {"task": task, "vocab": vocab.name}
    if task == "same":
        a, b = rng.choice(GRID, 2, replace=False)
        cells[int(a)] = int(pool[0])
        cells[int(b)] = int(pool[0] if label else pool[1])
    elif task == "between":
        row = int(rng.integers(3))
        if label:
            pattern = PATTERNS["ABA"]
        else:
            pattern = PATTERNS[("AAB", "ABB", "ABC")[int(rng.integers(3))]]
        for k, sym in enumerate(_pattern_symbols(pattern, pool)):
            cells[3 * row + k] = sym
        meta["pattern"] = pattern
    elif task in ("occurs", "xoccurs"):
        target = int(pool[0])
        cells[int(rng.integers(3))] = target
        if task == "occurs":
            matches = 1 + int(rng.integers(3)) if label else 0
        else:
            matches = 1 if label else (0, 2, 3)[int(rng.integers(3))]
        slots = rng.permutation(3)
        others = pool[1:4]
        for k in range(3):
            cells[6 + int(slots[k])] = target if k < matches else int(others[k])
        meta["matches"] = matches
    else:
        top = tuple(PATTERNS.values())[int(rng.integers(len(PATTERNS)))]
        if label:
            bottom = top
        else:
            choices = [p for p in PATTERNS.values() if p != top]
            bottom = choices[int(rng.integers(len(choices)))]
        for k, sym in enumerate(_pattern_symbols(top, pool[:3])):
            cells[k] = sym
        for k, sym in enumerate(_pattern_symbols(bottom, pool[3:6])):
            cells[6 + k] = sym
        meta["patterns"] = [top, bottom]
    meta["cells"] = {str(k): v for k, v in sorted(cells.items())}
    return TaskInstance(_grid(vocab, cells), label, meta)


def relgames_label(task: str, objects: np.ndarray) -> int:
    """Recompute a relational-games label directly from the grid contents."""
    occupied = [i for i in range(GRID) if np.any(objects[i] != 0)]
    rows = [objects[3 * r:3 * r + 3] for r in range(3)]
    if task == "same":
        a, b = occupied
        return int(np.array_equal(objects[a], objects[b]))
    if task == "between":
        row = next(r for r in rows if np.any(r != 0))
        return int(np.array_equal(row[0], row[2]))
    if task in ("occurs", "xoccurs"):
        top = next(v for v in rows[0] if np.any(v != 0))
        count = sum(np.array_equal(top, v) for v in rows[2])
        return int(count >= 1) if task == "occurs" else int(count == 1)
    if task == "match_pattern":
        return int(equality_signature(rows[0]) == equality_signature(rows[2]))
    raise ValueError(task)


def make_relgames_dataset(task: str, vocab: Vocabulary, size: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    insts = [gen_relgames(task, vocab, rng) for _ in range(size)]
    return Dataset.from_instances(insts, {"task": task, "vocab": vocab.name, "seed": seed})


def gen_match_to_sample(rng: np.random.Generator, vocab: Vocabulary | None = None,
                        source: str | None = None) -> TaskInstance:
    """Source triplet then two target triplets (9 objects); label = index of the matching target.

    All three triplets use disjoint symbols; exactly one target shares the
    source's equality pattern.
    """
    vocab = vocab or make_vocab("match_to_sample")
    if vocab.size < 9:
        raise ValueError("match-to-sample needs at least 9 distinct objects")
    names = list(PATTERNS)
    src = source or names[int(rng.integers(len(names)))]
    distractors = [p for p in names if p != src]
    other = distractors[int(rng.integers(len(distractors)))]
    label = int(rng.integers(2))
    targets = [other, other]
    targets[label] = src
    pool = rng.permutation(vocab.size)
    symbols = []
    for k, name in enumerate([src, *targets]):
        symbols += _pattern_symbols(PATTERNS[name], pool[3 * k:3 * k + 3])
    objects = vocab.vectors[symbols].copy()
    return TaskInstance(objects, label, {"task": "match_to_sample", "vocab": vocab.name,
                                         "patterns": [src, *targets]})


def match_to_sample_label(objects: np.ndarray) -> int | None:
    """Index of the unique target matching the source signature, or None."""
    sig = [equality_signature(objects[3 * k:3 * k + 3]) for k in range(3)]
    hits = [k for k in (0, 1) if sig[k + 1] == sig[0]]
    return hits[0] if len(hits) == 1 else None


def make_match_to_sample_dataset(vocab: Vocabulary, size: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    insts = [gen_match_to_sample(rng, vocab) for _ in range(size)]
    return Dataset.from_instances(insts, {"task": "match_to_sample", "vocab": vocab.name, "seed": seed})
