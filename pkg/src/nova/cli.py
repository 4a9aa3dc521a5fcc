"""Command-line entry point: generate | bench | trace | heatmap | compare.

Exit codes: 0 success, 2 configuration, 3 I/O, 4 internal state.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from pathlib import Path
from typing import Sequence

from . import defaults
from .engine import (
    RunConfig,
    RunResult,
    compare_runs,
    run_generation,
    run_report,
)
from .entropy import ActivationParams
from .errors import ConfigError, InputError, InternalStateError, UsageError
from .formats import dump_json, tokens_json, write_pgm, write_ppm
from .model import ModelConfig, ScaleSchedule
from .scheduler import LinkageParams, SchedulerMode

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("nova")

# run-config file keys, also the echo format in every report
CONFIG_KEYS = {
    "scales", "vocab", "dim", "layers", "heads", "seed", "t_est", "alpha", "tau", "lambda",
    "r_max", "mode", "selector", "sampling", "sample_seed", "shared_mask", "fixed_ratios",
    "entropy_override", "defaults_version",
}


def _parse_scales(value) -> tuple[tuple[int, int], ...]:
    """Accept ``[4, [2, 3], ...]`` or ``"1,2,3x4,..."``; a bare side means a square grid."""
    items = value.split(",") if isinstance(value, str) else list(value)
    grids = []
    for item in items:
        if isinstance(item, str):
            item = item.strip().lower()
            if "x" in item:
                h, w = item.split("x")
                grids.append((int(h), int(w)))
            else:
                grids.append((int(item), int(item)))
        elif isinstance(item, (list, tuple)):
            h, w = item
            grids.append((int(h), int(w)))
        else:
            grids.append((int(item), int(item)))
    return tuple(grids)


def _float_list(value) -> tuple[float, ...] | None:
    if value is None:
        return None
    if isinstance(value, str):
        return tuple(float(x) for x in value.split(","))
    return tuple(float(x) for x in value)


def config_from_dict(values: dict) -> RunConfig:
    unknown = set(values) - CONFIG_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config key")
    v = dict(values)
    try:
        schedule = ScaleSchedule(_parse_scales(v.get("scales", defaults.SCALE_SIDES)))
        model = ModelConfig(
            schedule=schedule,
            vocab_size=int(v.get("vocab", defaults.VOCAB_SIZE)),
            dim=int(v.get("dim", defaults.DIM)),
            layers=int(v.get("layers", defaults.LAYERS)),
            heads=int(v.get("heads", defaults.HEADS)),
            seed=int(v.get("seed", defaults.SEED)),
        )
        return RunConfig(
            model=model,
            activation=ActivationParams(int(v.get("t_est", defaults.T_EST)),
                                        float(v.get("alpha", defaults.ALPHA))),
            linkage=LinkageParams(float(v.get("tau", defaults.TAU)),
                                  float(v.get("lambda", defaults.LAMBDA)),
                                  float(v.get("r_max", defaults.R_MAX))),
            mode=SchedulerMode.parse(v.get("mode", defaults.MODE)),
            selector=v.get("selector", defaults.SELECTOR),
            sampling=v.get("sampling", defaults.SAMPLING),
            sample_seed=int(v.get("sample_seed", defaults.SAMPLE_SEED)),
            shared_mask=bool(v.get("shared_mask", defaults.SHARED_MASK)),
            fixed_ratios=_float_list(v.get("fixed_ratios")),
            entropy_override=_float_list(v.get("entropy_override")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("config", str(exc)) from exc


# flag dest -> config key
_OVERRIDES = {
    "alpha": "alpha", "tau": "tau", "lam": "lambda", "t_est": "t_est", "r_max": "r_max",
    "mode": "mode", "selector": "selector", "seed": "seed", "scales": "scales",
    "layers": "layers", "dim": "dim", "vocab": "vocab", "heads": "heads",
    "sampling": "sampling", "sample_seed": "sample_seed", "fixed_ratios": "fixed_ratios",
    "entropy_override": "entropy_override",
}


def load_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config", "run-config file must hold a JSON object")
    for dest, key in _OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is not None:
            values[key] = val
    if args.shared_mask:
        values["shared_mask"] = True
    return config_from_dict(values)


def out_dir(args: argparse.Namespace) -> Path:
    path = Path(args.out_dir or os.environ.get("NOVA_OUT_DIR") or "out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dense(config: RunConfig) -> RunConfig:
    return RunConfig(model=config.model, activation=config.activation, linkage=config.linkage,
                     mode=SchedulerMode.OFF, sampling=config.sampling,
                     sample_seed=config.sample_seed, entropy_override=config.entropy_override)


def _with_mode(config: RunConfig, mode: SchedulerMode) -> RunConfig:
    selector = "entropy" if mode is SchedulerMode.OFF else config.selector
    return RunConfig(model=config.model, activation=config.activation, linkage=config.linkage,
                     mode=mode, selector=selector, sampling=config.sampling,
                     sample_seed=config.sample_seed, shared_mask=config.shared_mask,
                     fixed_ratios=config.fixed_ratios, entropy_override=config.entropy_override)


def _fidelity(base: RunResult, run: RunResult) -> dict:
    cmp = compare_runs(base, run)
    out = cmp.fidelity()
    out["speedup"] = cmp.speedup
    return out


# -- commands ------------------------------------------------------------------

def cmd_generate(config: RunConfig, dest: Path) -> list[Path]:
    result = run_generation(config)
    base = result if config.mode is SchedulerMode.OFF else run_generation(_dense(config))
    report = run_report(result, _fidelity(base, result))
    T = config.model.schedule.T
    report["feature_mapping"] = write_ppm(result.feature, dest / "feature.ppm")
    dump_json(report, dest / "report.json")
    dump_json(tokens_json(result.tokens, result.digest()), dest / "tokens.json")
    (dest / "trace.csv").write_text(result.trace.to_csv())
    dump_json(result.trace.to_dict(T), dest / "trace.json")
    return [dest / n for n in ("report.json", "tokens.json", "feature.ppm", "trace.csv", "trace.json")]


def cmd_bench(config: RunConfig, dest: Path, repeats: int = 3) -> Path:
    if repeats < 1:
        raise ConfigError("repeats", f"must be >= 1, got {repeats}")
    base_runs = [run_generation(_dense(config)) for _ in range(repeats)]
    runs = [run_generation(config) for _ in range(repeats)]
    base, run = base_runs[0], runs[0]
    cmp = compare_runs(base, run)
    base_ms = statistics.median(r.wall_ms for r in base_runs)
    run_ms = statistics.median(r.wall_ms for r in runs)
    bench = {
        "config": config.to_dict(),
        "repeats": repeats,
        "ledger": {"baseline": base.ledger.total, "accelerated": run.ledger.total,
                   "speedup": cmp.speedup},
        "wall_ms": {"baseline_median": base_ms, "accelerated_median": run_ms,
                    "speedup": base_ms / run_ms if run_ms > 0 else None,
                    "baseline_runs": [r.wall_ms for r in base_runs],
                    "accelerated_runs": [r.wall_ms for r in runs]},
        "t_star": run.t_star,
        "activation_scale": run.activation,
        "fidelity": cmp.fidelity(),
    }
    path = dest / "bench.json"
    dump_json(bench, path)
    return path


def cmd_trace(config: RunConfig, dest: Path) -> list[Path]:
    result = run_generation(config)
    T = config.model.schedule.T
    (dest / "trace.csv").write_text(result.trace.to_csv())
    dump_json(result.trace.to_dict(T), dest / "trace.json")
    return [dest / "trace.csv", dest / "trace.json"]


def _parse_selection(value: str, upper: int, name: str) -> list[int]:
    if value == "all":
        return list(range(1, upper + 1))
    try:
        picks = [int(x) for x in value.split(",")]
    except ValueError:
        raise ConfigError(name, f"expected 'all' or comma-separated integers, got {value!r}") from None
    bad = [p for p in picks if not 1 <= p <= upper]
    if bad:
        raise ConfigError(name, f"{bad[0]} outside 1..{upper}")
    return picks


def cmd_heatmap(config: RunConfig, dest: Path, scales: str = "all", layers: str = "scale",
                normalization: str = "fixed") -> list[Path]:
    if normalization not in ("fixed", "per-map"):
        raise ConfigError("norm", f"unknown normalization {normalization!r}")
    T, L, V = config.model.schedule.T, config.model.layers, config.model.vocab_size
    ts = _parse_selection(scales, T, "heatmap-scales")
    js = None if layers == "scale" else _parse_selection(layers, L, "heatmap-layers")
    cfg = RunConfig(**{**config.__dict__, "record_layers": js is not None})
    result = run_generation(cfg)
    written, entries = [], []
    for t in ts:
        if js is None:
            path = dest / f"heatmap_t{t:02d}_scale.pgm"
            entries.append(write_pgm(result.scale_maps[t - 1], path, V, normalization))
            written.append(path)
        else:
            for j in js:
                path = dest / f"heatmap_t{t:02d}_j{j:02d}.pgm"
                entries.append(write_pgm(result.layer_maps[(t, j)], path, V, normalization))
                written.append(path)
    dump_json({"config": config.to_dict(), "maps": entries}, dest / "heatmaps.json")
    return written + [dest / "heatmaps.json"]


def cmd_compare(config: RunConfig, dest: Path, modes: Sequence[str]) -> Path:
    parsed = [SchedulerMode.parse(m) for m in modes]
    if len(parsed) < 2:
        raise ConfigError("modes", "compare needs at least two modes")
    dense = run_generation(_dense(config))
    rows = []
    for mode in parsed:
        run = dense if mode is SchedulerMode.OFF else run_generation(_with_mode(config, mode))
        cmp = compare_runs(dense, run)
        dense_row = mode is SchedulerMode.OFF
        rows.append({
            "mode": mode.value,
            "speedup": cmp.speedup,
            "ledger_total": run.ledger.total,
            "t_star": None if dense_row else run.t_star,
            "activation_scale": None if dense_row else run.activation,
            "mean_ratio": run.plan.mean_ratio(),
            "fidelity": cmp.fidelity(),
        })
    path = dest / "compare.json"
    dump_json({"config": config.to_dict(), "dense_ledger_total": dense.ledger.total, "rows": rows}, path)
    return path


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument("--out-dir", help="output directory (default $NOVA_OUT_DIR or ./out)")
    common.add_argument("--alpha", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--t-est", type=int)
    common.add_argument("--r-max", type=float)
    common.add_argument("--mode", choices=[m.value for m in SchedulerMode])
    common.add_argument("--selector", choices=["entropy", "attention", "mse"])
    common.add_argument("--seed", type=int)
    common.add_argument("--scales", help="comma-separated sides or HxW grids, e.g. 1,2,3,4x6")
    common.add_argument("--layers", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--vocab", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--sampling", choices=["argmax", "categorical"])
    common.add_argument("--sample-seed", type=int)
    common.add_argument("--shared-mask", action="store_true")
    common.add_argument("--fixed-ratios", help="one ratio per scale, comma-separated")
    common.add_argument("--entropy-override",
                        help="per-scale mean entropies fed to the trace instead of measured ones")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nova", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="run once and write report, tokens, feature, trace")
    bench = sub.add_parser("bench", parents=[common], help="ledger speedup and timing vs dense")
    bench.add_argument("--repeats", type=int, default=3)
    sub.add_parser("trace", parents=[common], help="write the entropy trace")
    heat = sub.add_parser("heatmap", parents=[common], help="write entropy heatmaps as PGM")
    heat.add_argument("--heatmap-scales", default="all")
    heat.add_argument("--heatmap-layers", default="scale", help="'scale', 'all' or comma list")
    heat.add_argument("--norm", default="fixed", choices=["fixed", "per-map"])
    comp = sub.add_parser("compare", parents=[common], help="ablation table across modes")
    comp.add_argument("--modes", default="off,fixed,scale_only,layer_only,nova")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        dest = out_dir(args)
        if args.command == "generate":
            cmd_generate(config, dest)
        elif args.command == "bench":
            cmd_bench(config, dest, args.repeats)
        elif args.command == "trace":
            cmd_trace(config, dest)
        elif args.command == "heatmap":
            cmd_heatmap(config, dest, args.heatmap_scales, args.heatmap_layers, args.norm)
        elif args.command == "compare":
            cmd_compare(config, dest, [m.strip() for m in args.modes.split(",")])
    except (ConfigError, InputError, UsageError) as exc:
        print(f"nova: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InternalStateError as exc:
        print(f"nova: internal state error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as exc:
        print(f"nova: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
