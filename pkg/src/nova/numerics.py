"""Dense float64 primitives: matmul with FLOP instrumentation, softmax,
align-corners bilinear resampling and a seeded counter-based RNG.

Matrices are 2-D ``float64`` arrays; grids are ``(height, width, channels)``
``float64`` arrays.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

__all__ = [
    "FlopCounter",
    "Rng",
    "bilinear_resize",
    "count_flops",
    "matmul",
    "seeded_gaussian",
    "softmax_rows",
]


@dataclass
class FlopCounter:
    flops: int = 0
    calls: int = 0


_COUNTER: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "nova_flop_counter", default=None
)


@contextlib.contextmanager
def count_flops():
    """Count ``2*m*k*n`` for every :func:`matmul` executed inside the block."""
    counter = FlopCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InputError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise InputError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    counter = _COUNTER.get()
    if counter is not None:
        counter.flops += 2 * a.shape[0] * a.shape[1] * b.shape[1]
        counter.calls += 1
    return a @ b


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # align-corners: output index 0 -> input 0, last -> last
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resampling of an ``(h, w, c)`` grid.

    Interpolation is written in lerp form ``a + t*(b - a)`` so that constant
    fields are reproduced exactly.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 3:
        raise InputError(f"grid must be (h, w, c), got shape {src.shape}")
    if out_h < 1 or out_w < 1:
        raise InputError(f"target size must be >= 1, got {out_h}x{out_w}")
    h, w, _ = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()

    ys = _source_coords(h, out_h)
    xs = _source_coords(w, out_w)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    tl = src[y0][:, x0]
    tr = src[y0][:, x1]
    bl = src[y1][:, x0]
    br = src[y1][:, x1]
    top = tl + wx * (tr - tl)
    bottom = bl + wx * (br - bl)
    return top + wy * (bottom - top)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass
class Rng:
    """SplitMix64 generator (Steele, Lea & Flood 2014), vectorised.

    The i-th output is ``mix(seed + i * 0x9E3779B97F4A7C15)``, so a block of
    ``n`` draws is a pure function of ``(state, n)``. Integers are identical on
    every platform; one instance per thread.
    """

    seed: int
    state: int = field(init=False)

    def __post_init__(self):
        self.state = int(self.seed) & 0xFFFFFFFFFFFFFFFF

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in ``[0, 1)`` from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller; each pair of uniforms yields a cosine and a sine draw."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]


def seeded_gaussian(rng: Rng, rows: int, cols: int, stddev: float) -> np.ndarray:
    if not stddev > 0:
        raise InputError(f"stddev must be > 0, got {stddev}")
    return (rng.normal(rows * cols) * stddev).reshape(rows, cols)
