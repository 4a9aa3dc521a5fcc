"""Mode x selector table under the two-phase trace on the default config.

    python scripts/ablation.py [--seed 0] [--shared-mask]
"""

import argparse

from nova import defaults
from nova.engine import RunConfig, compare_runs, run_generation
from nova.model import ModelConfig, ScaleSchedule, build_model

TWO_PHASE = (1.0, 2.0, 3.0, 4.0, 5.0, 5.4, 5.5, 5.55, 5.58, 5.6)
MODES = ("fixed", "scale_only", "layer_only", "nova")
SELECTORS = ("entropy", "attention", "mse")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=defaults.SEED)
    ap.add_argument("--shared-mask", action="store_true")
    args = ap.parse_args()

    cfg = ModelConfig(ScaleSchedule.square(defaults.SCALE_SIDES), seed=args.seed)
    model = build_model(cfg)
    dense = run_generation(RunConfig(model=cfg, mode="off"), model)
    print(f"{'mode':<11} {'selector':<9} {'speedup':>7} {'mean r':>6} {'min agr':>7} {'psnr':>6}")
    for mode in MODES:
        for sel in SELECTORS:
            run = run_generation(RunConfig(model=cfg, mode=mode, selector=sel,
                                           shared_mask=args.shared_mask,
                                           entropy_override=TWO_PHASE), model)
            c = compare_runs(dense, run)
            print(f"{mode:<11} {sel:<9} {c.speedup:>7.3f} {run.plan.mean_ratio():>6.3f} "
                  f"{min(c.agreement):>7.3f} {c.psnr:>6.1f}")


if __name__ == "__main__":
    main()
