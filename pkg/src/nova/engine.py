"""End-to-end generation with entropy-guided pruning, FLOP accounting and
run-to-run comparison."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import defaults
from .entropy import ActivationParams, EntropyMap, EntropyTrace, activation_scale, entropy_map
from .errors import ConfigError, InternalStateError, UsageError
from .model import KvStore, Model, ModelConfig, ScaleSchedule, TokenMap, build_model, sample_tokens
from .numerics import Rng, bilinear_resize, count_flops, softmax_rows
from .prune_cache import (
    KeepMask,
    ResidualCache,
    compute_cache,
    reconstruct_pruned,
    select_kept,
)
from .scheduler import LinkageParams, ReductionPlan, SchedulerMode, base_ratio, plan_layer

log = logging.getLogger(__name__)

SELECTORS = ("entropy", "attention", "mse")
SAMPLING_MODES = ("argmax", "categorical")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(ScaleSchedule.square(defaults.SCALE_SIDES))
    )
    activation: ActivationParams = field(default_factory=ActivationParams)
    linkage: LinkageParams = field(default_factory=LinkageParams)
    mode: SchedulerMode = SchedulerMode.NOVA
    selector: str = "entropy"
    sampling: str = "argmax"
    sample_seed: int = 0
    shared_mask: bool = False
    fixed_ratios: tuple[float, ...] | None = None
    # test seam: replaces each scale's measured mean entropy in the trace
    entropy_override: tuple[float, ...] | None = None
    # probe every layer of every scale (heatmaps); adds readout work to the ledger
    record_layers: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", SchedulerMode.parse(self.mode))
        T = self.model.schedule.T
        self.activation.check_schedule(T)
        if self.selector not in SELECTORS:
            raise ConfigError("selector", f"unknown selector {self.selector!r}")
        if self.selector != "entropy" and self.mode is SchedulerMode.OFF:
            raise ConfigError("selector", f"{self.selector} selector needs a pruning mode")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError("sampling", f"unknown sampling mode {self.sampling!r}")
        if self.fixed_ratios is None:
            object.__setattr__(self, "fixed_ratios", defaults.fixed_ratios(T))
        ratios = tuple(float(r) for r in self.fixed_ratios)
        object.__setattr__(self, "fixed_ratios", ratios)
        if len(ratios) != T:
            raise ConfigError("fixed_ratios", f"need {T} entries, got {len(ratios)}")
        if any(not 0 <= r <= self.linkage.r_max for r in ratios):
            raise ConfigError("fixed_ratios", f"entries must lie in [0, r_max={self.linkage.r_max}]")
        if self.entropy_override is not None:
            override = tuple(float(m) for m in self.entropy_override)
            if len(override) != T:
                raise ConfigError("entropy_override", f"need {T} entries, got {len(override)}")
            object.__setattr__(self, "entropy_override", override)

    def to_dict(self) -> dict:
        m = self.model
        return {
            "defaults_version": defaults.DEFAULTS_VERSION,
            "scales": [list(g) for g in m.schedule.grids],
            "vocab": m.vocab_size,
            "dim": m.dim,
            "layers": m.layers,
            "heads": m.heads,
            "seed": m.seed,
            "t_est": self.activation.t_est,
            "alpha": self.activation.alpha,
            "tau": self.linkage.tau,
            "lambda": self.linkage.lam,
            "r_max": self.linkage.r_max,
            "mode": self.mode.value,
            "selector": self.selector,
            "sampling": self.sampling,
            "sample_seed": self.sample_seed,
            "shared_mask": self.shared_mask,
            "fixed_ratios": list(self.fixed_ratios),
            "entropy_override": None if self.entropy_override is None else list(self.entropy_override),
        }


# -- FLOP ledger ---------------------------------------------------------------
#
# Only matrix products are counted, at 2*m*k*n per product (one multiply and
# one add per term). Norms, softmax and activations are not counted.

def attention_flops(kept_queries: int, total_keys: int, d: int, heads: int) -> int:
    """Scores + weighted values (2*q*K*d each, summed over heads) + Q/K/V/O projections."""
    q, k = int(kept_queries), int(total_keys)
    return 2 * q * k * d + 2 * q * k * d + 8 * q * d * d


def mlp_flops(kept: int, d: int, hidden: int) -> int:
    return 4 * int(kept) * d * hidden


def kv_fill_flops(rows: int, d: int) -> int:
    """Key and value projections for rows that skipped the layer."""
    return 4 * int(rows) * d * d


def readout_flops(rows: int, d: int, vocab: int) -> int:
    return 2 * int(rows) * d * vocab


@dataclass
class LedgerRow:
    attention: int = 0
    mlp: int = 0
    kv_fill: int = 0
    readout: int = 0

    @property
    def total(self) -> int:
        return self.attention + self.mlp + self.kv_fill + self.readout


@dataclass
class FlopLedger:
    """Rows keyed by ``(t, j)``: ``t = 0`` is start-embedding setup, ``j = 0``
    is the scale's final readout head."""

    rows: dict[tuple[int, int], LedgerRow] = field(default_factory=dict)

    def row(self, t: int, j: int) -> LedgerRow:
        return self.rows.setdefault((t, j), LedgerRow())

    def totals(self) -> dict[str, int]:
        out = {"attention": 0, "mlp": 0, "kv_fill": 0, "readout": 0}
        for r in self.rows.values():
            out["attention"] += r.attention
            out["mlp"] += r.mlp
            out["kv_fill"] += r.kv_fill
            out["readout"] += r.readout
        out["total"] = sum(out.values())
        return out

    @property
    def total(self) -> int:
        return sum(r.total for r in self.rows.values())

    def per_scale(self) -> list[int]:
        T = max(t for t, _ in self.rows)
        out = [0] * (T + 1)
        for (t, _), r in self.rows.items():
            out[t] += r.total
        return out



def intra_scale_attention_flops(kept: int, d: int) -> int:
    """Quadratic part of the score/value terms: kept queries against kept current-scale keys."""
    return 4 * int(kept) * int(kept) * d


def predict_ledger(cfg: ModelConfig, kept: Sequence[Sequence[int]],
                   probes: Sequence[Sequence[bool]]) -> FlopLedger:
    """Closed-form ledger for a kept-count table ``kept[t-1][j-1]``."""
    d, V, L = cfg.dim, cfg.vocab_size, cfg.layers
    sched = cfg.schedule
    ledger = FlopLedger()
    for j in range(1, L + 1):
        ledger.row(0, j).kv_fill += kv_fill_flops(1, d)
    for t in range(1, sched.T + 1):
        n, prefix = sched.size(t), sched.prefix_rows(t)
        for j in range(1, L + 1):
            k = kept[t - 1][j - 1]
            row = ledger.row(t, j)
            if probes[t - 1][j - 1]:
                row.readout += readout_flops(n, d, V)
            row.attention += attention_flops(k, prefix + k, d, cfg.heads)
            row.mlp += mlp_flops(k, d, cfg.mlp_dim)
            row.kv_fill += kv_fill_flops(n - k, d)
        ledger.row(t, 0).readout += readout_flops(n, d, V)
    return ledger


# -- selectors -----------------------------------------------------------------

def mse_importance(hidden: np.ndarray, prior_grid: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Mean squared gap between each token and the upsampled previous-scale state at its site."""
    h, w = grid
    up = bilinear_resize(prior_grid, h, w).reshape(h * w, -1)
    return np.mean((hidden - up) ** 2, axis=1)


def ablation_selector(selector: str, *, emap: EntropyMap | None = None,
                      attn_mass: np.ndarray | None = None, hidden: np.ndarray | None = None,
                      prior_grid: np.ndarray | None = None,
                      grid: tuple[int, int] | None = None) -> np.ndarray:
    """Per-token importance used to rank tokens for keeping.

    The attention selector falls back to entropy when no scores were recorded
    by a previous layer of the same scale.
    """
    if selector == "entropy":
        return emap.values
    if selector == "attention":
        if attn_mass is None:
            log.info("attention selector: no recorded scores, falling back to entropy")
            if emap is None:
                raise InternalStateError("attention fallback needs an entropy map")
            return emap.values
        return attn_mass
    if selector == "mse":
        if prior_grid is None:
            raise InternalStateError("mse selector needs the previous scale's states")
        return mse_importance(hidden, prior_grid, grid)
    raise ConfigError("selector", f"unknown selector {selector!r}")


# -- runs ----------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    tokens: list[TokenMap]
    feature: np.ndarray
    trace: EntropyTrace
    plan: ReductionPlan
    ledger: FlopLedger
    measured: dict[tuple[int, int], int]
    wall_ms: float
    scale_logits: list[np.ndarray]
    scale_maps: list[EntropyMap]
    layer_maps: dict[tuple[int, int], EntropyMap]
    masks: dict[tuple[int, int], KeepMask]
    query_rows: dict[tuple[int, int], np.ndarray]
    cache_dense: dict[int, bool]
    # residual cache captured at the end of each scale (empty for mode off)
    caches: dict[int, ResidualCache]

    @property
    def cache(self) -> ResidualCache | None:
        return self.caches[max(self.caches)] if self.caches else None

    @property
    def t_star(self) -> int | None:
        return self.trace.t_star

    @property
    def activation(self) -> int | None:
        return self.plan.activation_scale

    def digest(self) -> str:
        return token_digest(self.tokens)

    def report(self) -> dict:
        return run_report(self)


def token_digest(tokens: Sequence[TokenMap]) -> str:
    h = hashlib.sha256()
    for tm in tokens:
        h.update(f"{tm.t}:{tm.h}x{tm.w};".encode())
        h.update(np.asarray(tm.ids, dtype="<i8").tobytes())
    return h.hexdigest()


def _layer_needs_probe(config: RunConfig, base: float, j: int) -> bool:
    if config.record_layers:
        return True
    if base <= 0:
        return False
    if config.selector == "entropy" or config.mode.layer_linked:
        return True
    return config.selector == "attention" and j == 1


def run_generation(config: RunConfig, model: Model | None = None) -> RunResult:
    """Generate the full token pyramid under ``config``.

    Per scale: build the input from the accumulated feature, then per layer
    probe layer-input entropies, plan the kept count, run the layer on kept
    rows, rebuild pruned rows from the previous scale's residual cache and
    refresh the cache. The scale ends with readout, trace update, sampling,
    feature accumulation and a dense KV append.
    """
    model = model if model is not None else build_model(config.model)
    if model.config != config.model:
        raise ConfigError("model", "model weights were built for a different config")
    mcfg = config.model
    sched = mcfg.schedule
    T, L, d = sched.T, mcfg.layers, mcfg.dim
    mode = config.mode

    trace = EntropyTrace(config.activation)
    plan = ReductionPlan(T, L)
    ledger = FlopLedger()
    measured: dict[tuple[int, int], int] = {}
    rng = Rng(config.sample_seed) if config.sampling == "categorical" else None

    tokens: list[TokenMap] = []
    scale_logits, scale_maps = [], []
    layer_maps: dict[tuple[int, int], EntropyMap] = {}
    masks: dict[tuple[int, int], KeepMask] = {}
    query_rows: dict[tuple[int, int], np.ndarray] = {}
    cache_dense: dict[int, bool] = {}
    cache: ResidualCache | None = None
    caches: dict[int, ResidualCache] = {}
    prev_inputs: list[np.ndarray] | None = None
    activation: int | None = None

    start = time.perf_counter()
    with count_flops() as counter:

        def charge(key: tuple[int, int], before: int) -> None:
            measured[key] = measured.get(key, 0) + counter.flops - before

        kv = KvStore(L)
        for j in range(1, L + 1):
            before = counter.flops
            kv.append(j, *model.start_kv(j))
            ledger.row(0, j).kv_fill += kv_fill_flops(1, d)
            charge((0, j), before)

        acc = model.empty_feature()
        for t in range(1, T + 1):
            h, w = sched.grid(t)
            n = h * w
            prefix = sched.prefix_rows(t)
            x = model.first_scale_input() if t == 1 else model.next_scale_input(acc, t)

            g_latest = trace.growth[-1] if trace.t >= 2 else None
            base = base_ratio(t, mode, activation=activation, t_star=trace.t_star, g_t=g_latest,
                              params=config.linkage, fixed_ratios=config.fixed_ratios)
            plan.base[t - 1] = base

            layer_means: list[float] = []
            new_grids: list[np.ndarray] = []
            inputs: list[np.ndarray] = []
            shared_rank: np.ndarray | None = None
            attn_prev: np.ndarray | None = None
            scale_k: list[np.ndarray] = []
            scale_v: list[np.ndarray] = []

            for j in range(1, L + 1):
                before = counter.flops
                row = ledger.row(t, j)
                emap = None
                if _layer_needs_probe(config, base, j):
                    probs = softmax_rows(model.readout_logits(x))
                    emap = entropy_map(probs, t, (h, w), j)
                    layer_means.append(float(np.mean(emap.values)))
                    layer_maps[(t, j)] = emap
                    row.readout += readout_flops(n, d, mcfg.vocab_size)

                if base > 0:
                    ratio, kept = plan_layer(j, n, base, mode, layer_means, config.linkage)
                else:
                    ratio, kept = 0.0, n
                plan.record(t, j, ratio, kept)

                if kept < n:
                    if mode.adaptive and (activation is None or t < activation):
                        raise InternalStateError(f"pruning at scale {t} before activation")
                    if config.shared_mask and shared_rank is not None:
                        importance = shared_rank
                    else:
                        importance = ablation_selector(
                            config.selector, emap=emap, attn_mass=attn_prev, hidden=x,
                            prior_grid=None if prev_inputs is None else prev_inputs[j - 1],
                            grid=(h, w))
                        shared_rank = importance
                    mask = select_kept(importance, kept, t, j)
                    out = model.forward_layer(j, x, kv, keep=mask.kept)
                else:
                    mask = KeepMask(t, j, np.arange(n), n)
                    out = model.forward_layer(j, x, kv)
                masks[(t, j)] = mask
                query_rows[(t, j)] = out.kept
                row.attention += attention_flops(kept, prefix + kept, d, mcfg.heads)
                row.mlp += mlp_flops(kept, d, mcfg.mlp_dim)

                # attention mass each current-scale token received, by position
                attn_prev = np.zeros(n)
                attn_prev[out.kept] = out.attn_mass[prefix:]

                pruned = mask.pruned
                if pruned.size:
                    if cache is None:
                        raise InternalStateError(f"scale {t} pruned without a residual cache")
                    interp = bilinear_resize(cache.grids[j - 1], h, w)
                    y = reconstruct_pruned(out.hidden, interp, mask)
                    kf, vf = model.project_kv(j, x[pruned])
                    row.kv_fill += kv_fill_flops(pruned.size, d)
                    k_all = np.empty((n, d))
                    v_all = np.empty((n, d))
                    k_all[mask.kept], v_all[mask.kept] = out.keys, out.values
                    k_all[pruned], v_all[pruned] = kf, vf
                    reused = interp.reshape(n, d)
                else:
                    y, k_all, v_all, reused = out.hidden, out.keys, out.values, None
                scale_k.append(k_all)
                scale_v.append(v_all)

                if mode is not SchedulerMode.OFF:
                    new_grids.append(compute_cache(x, y, (h, w), pruned, reused))
                    inputs.append(x.reshape(h, w, d))
                x = y
                charge((t, j), before)

            before = counter.flops
            logits = model.readout_logits(x)
            ledger.row(t, 0).readout += readout_flops(n, d, mcfg.vocab_size)
            charge((t, 0), before)
            probs = softmax_rows(logits)
            smap = entropy_map(probs, t, (h, w))
            mean = float(np.mean(smap.values))
            if config.entropy_override is not None:
                mean = config.entropy_override[t - 1]
            trace.update(mean, t)
            if activation is None and trace.t_star is not None:
                activation = activation_scale(trace, T)
                plan.activation_scale = activation

            tm = sample_tokens(logits, t, (h, w), config.sampling, rng)
            tokens.append(tm)
            scale_logits.append(logits)
            scale_maps.append(smap)
            acc = model.accumulate_feature(acc, tm)

            for j in range(1, L + 1):
                kv.append(j, scale_k[j - 1], scale_v[j - 1])
            kv.check_rows(prefix + n)

            if mode is not SchedulerMode.OFF:
                cache = ResidualCache(t, new_grids)
                caches[t] = cache
                prev_inputs = inputs
                if any(k < n for k in plan.kept[t - 1]):
                    cache_dense[t] = cache.is_dense()
    wall_ms = (time.perf_counter() - start) * 1000.0

    return RunResult(
        config=config, tokens=tokens, feature=acc, trace=trace, plan=plan, ledger=ledger,
        measured=measured, wall_ms=wall_ms, scale_logits=scale_logits, scale_maps=scale_maps,
        layer_maps=layer_maps, masks=masks, query_rows=query_rows, cache_dense=cache_dense,
        caches=caches,
    )


def run_report(result: RunResult, fidelity: dict | None = None) -> dict:
    T = result.config.model.schedule.T
    totals = result.ledger.totals()
    report = {
        "config": result.config.to_dict(),
        "mode": result.config.mode.value,
        "selector": result.config.selector,
        "token_digest": result.digest(),
    }
    # a dense run has no activation logic, so its report carries no t*
    if result.config.mode is not SchedulerMode.OFF:
        report["t_star"] = result.trace.t_star
        report["eta"] = result.trace.eta
        report["activation_scale"] = result.plan.activation_scale
    report.update({
        "base_ratios": list(result.plan.base),
        "ratios": [list(r) for r in result.plan.ratios],
        "kept": [list(k) for k in result.plan.kept],
        "mean_ratio": result.plan.mean_ratio(),
        "ledger": {"totals": totals, "per_scale": result.ledger.per_scale()},
        "fidelity": fidelity,
        "trace": result.trace.to_dict(T),
    })
    return report


# -- comparison ----------------------------------------------------------------

def feature_mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def psnr(reference: np.ndarray, other: np.ndarray) -> float:
    """PSNR over the reference's dynamic range; ``inf`` for identical maps."""
    mse = feature_mse(reference, other)
    if mse == 0:
        return math.inf
    peak = float(reference.max() - reference.min())
    return 20.0 * math.log10(peak) - 10.0 * math.log10(mse)


def token_agreement(a: Sequence[TokenMap], b: Sequence[TokenMap]) -> list[float]:
    return [float(np.mean(x.ids == y.ids)) for x, y in zip(a, b)]


@dataclass
class ComparisonReport:
    speedup: float
    wall_ratio: float
    mse: float
    psnr: float
    agreement: list[float]

    def fidelity(self) -> dict:
        return {
            "mse": self.mse,
            "psnr": None if math.isinf(self.psnr) else self.psnr,
            "token_agreement": list(self.agreement),
        }


def compare_runs(a: RunResult, b: RunResult) -> ComparisonReport:
    """Speedup and fidelity of ``b`` relative to ``a`` (usually the dense run)."""
    if a.config.model != b.config.model:
        raise UsageError("compare_runs needs runs of the same model config")
    return ComparisonReport(
        speedup=a.ledger.total / b.ledger.total,
        wall_ratio=a.wall_ms / b.wall_ms if b.wall_ms > 0 else math.nan,
        mse=feature_mse(a.feature, b.feature),
        psnr=psnr(a.feature, b.feature),
        agreement=token_agreement(a.tokens, b.tokens),
    )
