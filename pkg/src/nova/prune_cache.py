"""Entropy-ranked keep masks and the layer-wise residual cache used to
stand in for pruned tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, InternalStateError
from .numerics import bilinear_resize


@dataclass
class KeepMask:
    t: int
    j: int
    kept: np.ndarray
    n: int

    @property
    def pruned(self) -> np.ndarray:
        keep = np.zeros(self.n, dtype=bool)
        keep[self.kept] = True
        return np.flatnonzero(~keep)


def select_kept(importance, kept_count: int, t: int = 0, j: int = 0) -> KeepMask:
    """Indices of the ``kept_count`` highest scores, ascending.

    Ties go to the lower index. ``importance`` is an :class:`EntropyMap` or any
    1-D score array.
    """
    values = np.asarray(getattr(importance, "values", importance), dtype=np.float64).reshape(-1)
    n = values.size
    if not 1 <= kept_count <= n:
        raise InputError(f"kept_count {kept_count} outside 1..{n}")
    if kept_count == n:
        return KeepMask(t, j, np.arange(n), n)
    order = np.lexsort((np.arange(n), -values))
    return KeepMask(t, j, np.sort(order[:kept_count]), n)


@dataclass
class ResidualCache:
    """Per-layer ``(h, w, d)`` residual grids captured at scale ``t``."""

    t: int
    grids: list[np.ndarray]

    @property
    def shape(self) -> tuple[int, int]:
        h, w, _ = self.grids[0].shape
        return h, w

    def is_dense(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grids)


def compute_cache(hidden_in: np.ndarray, hidden_out: np.ndarray, grid: tuple[int, int],
                  pruned: np.ndarray | None = None, reused: np.ndarray | None = None) -> np.ndarray:
    """Residual ``out - in`` as an ``(h, w, d)`` grid.

    At ``pruned`` rows the residual that was actually reused there (``reused``,
    an ``(N, d)`` array) is stored instead, so the cache stays dense.
    """
    if hidden_in.shape != hidden_out.shape:
        raise InputError(f"shape mismatch {hidden_in.shape} vs {hidden_out.shape}")
    h, w = grid
    if hidden_in.shape[0] != h * w:
        raise InputError(f"{hidden_in.shape[0]} rows for a {h}x{w} grid")
    res = hidden_out - hidden_in
    if pruned is not None and len(pruned):
        if reused is None:
            raise InputError("pruned rows given without the reused residuals")
        res[pruned] = reused[pruned]
    return res.reshape(h, w, -1)


def interpolate_cache(cache: ResidualCache, target: tuple[int, int]) -> ResidualCache:
    h, w = target
    return ResidualCache(cache.t, [bilinear_resize(g, h, w) for g in cache.grids])


def reconstruct_pruned(hidden: np.ndarray, interp: np.ndarray | None, mask: KeepMask) -> np.ndarray:
    """Fill the rows outside ``mask`` with ``hidden[row] + interp[row]``.

    ``hidden`` is the layer result in which pruned rows still hold their
    inputs; ``interp`` is the residual grid already resized to this scale.
    """
    pruned = mask.pruned
    if pruned.size == 0:
        return hidden
    if interp is None:
        raise InternalStateError(f"no residual cache available at scale {mask.t}, layer {mask.j}")
    flat = interp.reshape(-1, interp.shape[-1])
    if flat.shape[0] != hidden.shape[0]:
        raise InternalStateError(
            f"cache has {flat.shape[0]} sites, scale {mask.t} has {hidden.shape[0]} tokens"
        )
    out = hidden.copy()
    out[pruned] = hidden[pruned] + flat[pruned]
    return out
