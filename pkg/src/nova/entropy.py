"""Predictive entropy of token maps and online detection of the scale where
entropy growth flattens out.

All entropies are in nats.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, UsageError

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class ActivationParams:
    t_est: int = 5
    alpha: float = 0.5

    def __post_init__(self):
        if self.t_est < 2:
            raise ConfigError("t_est", f"must be >= 2, got {self.t_est}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha", f"must lie in (0, 1), got {self.alpha}")

    def check_schedule(self, T: int) -> None:
        if self.t_est > T - 2:
            raise ConfigError("t_est", f"must be <= T - 2 = {T - 2}, got {self.t_est}")


@dataclass
class EntropyMap:
    t: int
    h: int
    w: int
    values: np.ndarray
    j: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.h * self.w:
            raise InputError(f"entropy map {self.h}x{self.w} got {self.values.size} values")

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.h, self.w)


def _check_distributions(probs: np.ndarray) -> None:
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise InputError("probabilities must be finite and non-negative")
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise InputError(f"distribution not normalised (off by {worst:.3g})")


def _row_entropies(probs: np.ndarray) -> np.ndarray:
    safe = np.where(probs > 0, probs, 1.0)
    return -np.sum(probs * np.log(safe), axis=-1)


def token_entropy(dist) -> float:
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1:
        raise InputError("token_entropy expects a single distribution")
    _check_distributions(p)
    return float(_row_entropies(p))


def entropy_map(probs: np.ndarray, t: int, grid: tuple[int, int], j: int | None = None) -> EntropyMap:
    probs = np.asarray(probs, dtype=np.float64)
    _check_distributions(probs)
    h, w = grid
    if probs.shape[0] != h * w:
        raise InputError(f"{probs.shape[0]} distributions for a {h}x{w} grid")
    return EntropyMap(t, h, w, _row_entropies(probs), j)


def scale_mean_entropy(emap: EntropyMap) -> float:
    if emap.values.size == 0:
        raise InputError("empty entropy map")
    return float(np.mean(emap.values))


@dataclass
class EntropyTrace:
    """Per-scale mean entropy with growth, smoothed growth, baseline and t*.

    Lists are indexed by ``t - 1``; entries that are undefined for a scale
    (growth at t=1, smoothed before ``t_est + 1``) are ``None``.
    """

    params: ActivationParams = field(default_factory=ActivationParams)
    means: list[float] = field(default_factory=list)
    growth: list[float | None] = field(default_factory=list)
    smoothed: list[float | None] = field(default_factory=list)
    eta: float | None = None
    t_star: int | None = None

    @property
    def t(self) -> int:
        return len(self.means)

    @property
    def detection_enabled(self) -> bool:
        return self.eta is None or self.eta > 0

    def update(self, mean: float, t: int | None = None) -> "EntropyTrace":
        t_next = self.t + 1
        if t is not None and t != t_next:
            raise UsageError(f"expected scale {t_next}, got {t}")
        mean = float(mean)
        self.means.append(mean)
        t = t_next
        g = mean - self.means[-2] if t >= 2 else None
        self.growth.append(g)

        t_est = self.params.t_est
        if t == t_est:
            self.eta = sum(self.growth[1:t_est]) / (t_est - 1)
        if t >= t_est + 1:
            s = (g + self.growth[t - 2]) / 2
            self.smoothed.append(s)
            if self.t_star is None and self.eta > 0 and s <= self.params.alpha * self.eta:
                self.t_star = t
        else:
            self.smoothed.append(None)
        return self

    # -- serialization -----------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "mean", "growth", "smoothed"])
        for i, m in enumerate(self.means):
            g, s = self.growth[i], self.smoothed[i]
            writer.writerow([i + 1, repr(m), "" if g is None else repr(g), "" if s is None else repr(s)])
        return buf.getvalue()

    def to_dict(self, T: int | None = None) -> dict:
        return {
            "params": {"t_est": self.params.t_est, "alpha": self.params.alpha},
            "means": list(self.means),
            "growth": list(self.growth),
            "smoothed": list(self.smoothed),
            "eta": self.eta,
            "t_star": self.t_star,
            "activation_scale": activation_scale(self, T) if T is not None else None,
        }


def update_trace(trace: EntropyTrace, mean: float, params: ActivationParams | None = None) -> EntropyTrace:
    if params is not None and params != trace.params:
        raise UsageError("trace was created with different activation parameters")
    return trace.update(mean)


def activation_scale(trace: EntropyTrace, T: int) -> int | None:
    """First scale that may be pruned, or ``None`` if acceleration never starts."""
    if trace.t_star is None or trace.t_star + 1 > T:
        return None
    return trace.t_star + 1
