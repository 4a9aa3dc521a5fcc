"""Token-reduction ratios per scale (sigmoid schedule nudged by entropy
growth) and per layer (relative deviation from the preceding layers' mean
entropy), plus the fixed-table ablation modes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError, DegenerateEntropyError, UsageError


class SchedulerMode(str, enum.Enum):
    NOVA = "nova"
    SCALE_ONLY = "scale_only"
    LAYER_ONLY = "layer_only"
    FIXED = "fixed"
    OFF = "off"

    @classmethod
    def parse(cls, value: "str | SchedulerMode") -> "SchedulerMode":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ConfigError("mode", f"unknown mode {value!r} (expected one of {names})") from None

    @property
    def adaptive(self) -> bool:
        """Modes whose scale ratio comes from the sigmoid schedule (gated on t*)."""
        return self in (SchedulerMode.NOVA, SchedulerMode.SCALE_ONLY)

    @property
    def layer_linked(self) -> bool:
        return self in (SchedulerMode.NOVA, SchedulerMode.LAYER_ONLY)


@dataclass(frozen=True)
class LinkageParams:
    tau: float = 0.8
    lam: float = 0.1
    r_max: float = 0.95

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau", f"must be > 0, got {self.tau}")
        if not 0 <= self.lam < 1:
            raise ConfigError("lambda", f"must lie in [0, 1), got {self.lam}")
        if not 0 < self.r_max <= 1:
            raise ConfigError("r_max", f"must lie in (0, 1], got {self.r_max}")

    def clamp(self, ratio: float) -> float:
        return min(max(ratio, 0.0), self.r_max)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def scale_ratio(t: int, t_star: int, g_t: float, params: LinkageParams) -> float:
    if t < t_star + 1:
        raise UsageError(f"scale ratio undefined before activation (t={t}, t*={t_star})")
    raw = sigmoid((t - (t_star + 1)) / params.tau) - params.lam * math.tanh(g_t)
    return params.clamp(raw)


def layer_mean(entropies: Sequence[float]) -> float:
    if len(entropies) == 0:
        raise UsageError("layer_mean needs at least one preceding layer")
    return math.fsum(entropies) / len(entropies)


def layer_ratio(base: float, layer_entropy: float, mu: float,
                params: LinkageParams | None = None, j: int = 2) -> float:
    """Shrink ``base`` for layers more uncertain than their predecessors.

    Layer 1 keeps ``base``. Results are clamped to ``[0, r_max]``; without the
    clamp a deviation above 1 would go negative and a strongly negative one
    would exceed 1.
    """
    if j == 1:
        return base
    if not mu > 0:
        raise DegenerateEntropyError(f"preceding-layer mean entropy {mu} is not positive")
    delta = (layer_entropy - mu) / mu
    ratio = base - delta * base
    r_max = 1.0 if params is None else params.r_max
    return min(max(ratio, 0.0), r_max)


# ratio * n landing a hair under an integer (0.5 * 0.9 * 100) is float noise
FLOOR_EPS = 1e-9


def kept_count(ratio: float, n: int) -> int:
    return n - math.floor(ratio * n + FLOOR_EPS)


@dataclass
class ReductionPlan:
    """Per-(scale, layer) ratios and kept counts, filled scale by scale."""

    T: int
    L: int
    activation_scale: int | None = None
    base: list[float] = field(default_factory=list)
    ratios: list[list[float]] = field(default_factory=list)
    kept: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.base:
            self.base = [0.0] * self.T
            self.ratios = [[0.0] * self.L for _ in range(self.T)]
            self.kept = [[0] * self.L for _ in range(self.T)]

    def record(self, t: int, j: int, ratio: float, kept: int) -> None:
        self.ratios[t - 1][j - 1] = ratio
        self.kept[t - 1][j - 1] = kept

    def mean_ratio(self) -> float:
        flat = [r for row in self.ratios for r in row]
        return math.fsum(flat) / len(flat)

    def to_dict(self) -> dict:
        return {
            "activation_scale": self.activation_scale,
            "base": list(self.base),
            "ratios": [list(r) for r in self.ratios],
            "kept": [list(k) for k in self.kept],
        }


def base_ratio(t: int, mode: SchedulerMode, *, activation: int | None, t_star: int | None,
               g_t: float | None, params: LinkageParams,
               fixed_ratios: Sequence[float] | None = None) -> float:
    """Scale-level ratio before any layer adjustment."""
    if mode is SchedulerMode.OFF:
        return 0.0
    if mode.adaptive:
        if activation is None or t < activation:
            return 0.0
        return scale_ratio(t, t_star, 0.0 if g_t is None else g_t, params)
    if fixed_ratios is None or len(fixed_ratios) < t:
        raise ConfigError("fixed_ratios", f"{mode.value} mode needs a ratio for scale {t}")
    return params.clamp(float(fixed_ratios[t - 1]))


def plan_layer(j: int, n: int, base: float, mode: SchedulerMode,
               layer_entropies: Sequence[float], params: LinkageParams) -> tuple[float, int]:
    """Ratio and kept count at layer ``j`` given this scale's base ratio.

    ``layer_entropies`` holds the mean layer-input entropy of layers
    ``1..j`` of the current scale (only read by layer-linked modes).
    """
    ratio = base
    if mode.layer_linked and j >= 2 and base > 0:
        try:
            ratio = layer_ratio(base, layer_entropies[j - 1], layer_mean(layer_entropies[: j - 1]),
                                params, j)
        except DegenerateEntropyError:
            ratio = base
    return ratio, kept_count(ratio, n)
