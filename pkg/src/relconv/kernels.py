"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The active backend is chosen once from the ``RELCONV_BACKEND`` environment
variable (``numba`` or ``numpy``; default ``numba`` when it imports) and can
be switched at runtime with :func:`use_backend`. Both implementations of a
kernel produce identical results up to floating-point summation order; the
test-suite checks them against each other.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_BACKENDS = ("numba", "numpy")


def _initial_backend() -> str:
    requested = os.environ.get("RELCONV_BACKEND", "").strip().lower()
    if requested and requested not in _BACKENDS:
        raise ValueError(f"RELCONV_BACKEND must be one of {_BACKENDS}, got {requested!r}")
    if requested == "numpy" or not HAVE_NUMBA:
        if requested == "numba":
            logger.warning("numba requested but not importable; using numpy kernels")
        return "numpy"
    return "numba"


_backend = _initial_backend()


def backend() -> str:
    return _backend


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch kernel backend (``"numba"`` or ``"numpy"``)."""
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    previous = _backend
    _backend = name
    try:
        yield
    finally:
        _backend = previous


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _sparsemax_rows_numpy(z):
    m, k = z.shape
    zs = -np.sort(-z, axis=1)
    cssv = np.cumsum(zs, axis=1) - 1.0
    ind = np.arange(1, k + 1, dtype=np.float64)
    cond = zs - cssv / ind > 0
    rho = k - np.argmax(cond[:, ::-1], axis=1)
    tau = cssv[np.arange(m), rho - 1] / rho
    return np.maximum(z - tau[:, None], 0.0)


def _sparsemax_backward_rows_numpy(p, g):
    supp = p > 0
    nnz = supp.sum(axis=1, keepdims=True)
    mean = np.where(supp, g, 0.0).sum(axis=1, keepdims=True) / nnz
    return np.where(supp, g - mean, 0.0)


def _scatter_add_numpy(g, index, n_rows):
    out = np.zeros((g.shape[0], n_rows, g.shape[2]))
    np.add.at(out, (slice(None), index), g)
    return out


_COMBO_CACHE: dict[int, np.ndarray] = {}


def _triplets(n):
    if n not in _COMBO_CACHE:
        _COMBO_CACHE[n] = np.array(list(itertools.combinations(range(n), 3)), dtype=np.int64).reshape(-1, 3)
    return _COMBO_CACHE[n]


def _count_sets_numpy(hands):
    trip = _triplets(hands.shape[1])
    a = hands[:, trip[:, 0]]
    b = hands[:, trip[:, 1]]
    c = hands[:, trip[:, 2]]
    # each attribute all-equal or all-distinct  <=>  (a + b + c) % 3 == 0
    ok = ((a + b + c) % 3 == 0).all(axis=2)
    return ok.sum(axis=1)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _sparsemax_rows_numba(z):
        m, k = z.shape
        out = np.empty_like(z)
        for r in range(m):
            zs = np.sort(z[r])[::-1]
            csum = 0.0
            tau = 0.0
            for j in range(k):
                csum += zs[j]
                t = (csum - 1.0) / (j + 1)
                if zs[j] - t > 0:
                    tau = t
            for j in range(k):
                v = z[r, j] - tau
                out[r, j] = v if v > 0 else 0.0
        return out

    @numba.njit(cache=True)
    def _sparsemax_backward_rows_numba(p, g):
        m, k = p.shape
        out = np.zeros_like(g)
        for r in range(m):
            s = 0.0
            nnz = 0
            for j in range(k):
                if p[r, j] > 0:
                    s += g[r, j]
                    nnz += 1
            mean = s / nnz
            for j in range(k):
                if p[r, j] > 0:
                    out[r, j] = g[r, j] - mean
        return out

    @numba.njit(cache=True)
    def _scatter_add_numba(g, index, n_rows):
        b, m, k = g.shape
        out = np.zeros((b, n_rows, k))
        for bi in range(b):
            for mi in range(m):
                row = index[mi]
                for ki in range(k):
                    out[bi, row, ki] += g[bi, mi, ki]
        return out

    @numba.njit(cache=True)
    def _count_sets_numba(hands):
        h, n, n_attr = hands.shape
        counts = np.zeros(h, dtype=np.int64)
        for t in range(h):
            c = 0
            for i in range(n):
                for j in range(i + 1, n):
                    for l in range(j + 1, n):
                        ok = True
                        for a in range(n_attr):
                            if (hands[t, i, a] + hands[t, j, a] + hands[t, l, a]) % 3 != 0:
                                ok = False
                                break
                        if ok:
                            c += 1
            counts[t] = c
        return counts


IMPLEMENTATIONS = {
    "numpy": {
        "sparsemax_rows": _sparsemax_rows_numpy,
        "sparsemax_backward_rows": _sparsemax_backward_rows_numpy,
        "scatter_add": _scatter_add_numpy,
        "count_sets": _count_sets_numpy,
    },
}
if HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "sparsemax_rows": _sparsemax_rows_numba,
        "sparsemax_backward_rows": _sparsemax_backward_rows_numba,
        "scatter_add": _scatter_add_numba,
        "count_sets": _count_sets_numba,
    }


def _impl(name):
    return IMPLEMENTATIONS[_backend][name]


# ---------------------------------------------------------------------------
# dispatching entry points
# ---------------------------------------------------------------------------


def sparsemax_rows(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``z`` onto the probability simplex."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError(f"sparsemax_rows expects a non-empty 2-D array, got shape {z.shape}")
    return _impl("sparsemax_rows")(z)


def sparsemax_backward_rows(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of sparsemax given its output ``p``."""
    return _impl("sparsemax_backward_rows")(
        np.ascontiguousarray(p, dtype=np.float64), np.ascontiguousarray(g, dtype=np.float64)
    )


def scatter_add(g: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[b, index[m], k] += g[b, m, k]`` into a zero ``(B, n_rows, K)`` array."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    return _impl("scatter_add")(g, index, int(n_rows))


def count_sets(hands: np.ndarray) -> np.ndarray:
    """Number of Set triplets in each hand of an ``(H, n, 4)`` integer array."""
    hands = np.ascontiguousarray(hands, dtype=np.int64)
    if hands.ndim != 3:
        raise ValueError(f"count_sets expects (H, n, attrs), got shape {hands.shape}")
    return _impl("count_sets")(hands)
