"""Seed sweep: where the inflection lands, and what pruning costs in fidelity.

For each seed, runs dense and nova on the default schedule (measured entropy,
and optionally the two-phase override) and prints one row per run.

    python scripts/seed_sweep.py --seeds 20 --two-phase
"""

import argparse
import json
import math

from nova import defaults
from nova.engine import RunConfig, compare_runs, run_generation
from nova.model import ModelConfig, ScaleSchedule, build_model

TWO_PHASE = (1.0, 2.0, 3.0, 4.0, 5.0, 5.4, 5.5, 5.55, 5.58, 5.6)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--two-phase", action="store_true", help="also run with the forced trace")
    ap.add_argument("--json", help="write rows to this file")
    args = ap.parse_args()

    rows = []
    print(f"{'seed':>4} {'trace':>9} {'t*':>3} {'act':>3} {'speedup':>7} {'min agr':>7} {'psnr':>6}")
    for seed in range(args.seeds):
        cfg = ModelConfig(ScaleSchedule.square(defaults.SCALE_SIDES), seed=seed)
        model = build_model(cfg)
        dense = run_generation(RunConfig(model=cfg, mode="off"), model)
        variants = [("measured", None)] + ([("two-phase", TWO_PHASE)] if args.two_phase else [])
        for label, override in variants:
            run = run_generation(RunConfig(model=cfg, entropy_override=override), model)
            c = compare_runs(dense, run)
            row = {"seed": seed, "trace": label, "t_star": run.t_star, "activation": run.activation,
                   "speedup": c.speedup, "min_agreement": min(c.agreement),
                   "psnr": None if math.isinf(c.psnr) else c.psnr}
            rows.append(row)
            psnr = "inf" if row["psnr"] is None else f"{row['psnr']:.1f}"
            print(f"{seed:>4} {label:>9} {str(run.t_star or '-'):>3} {str(run.activation or '-'):>3} "
                  f"{c.speedup:>7.3f} {row['min_agreement']:>7.3f} {psnr:>6}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
