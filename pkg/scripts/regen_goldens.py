"""Rewrite tests/golden/ from the current build.

Run only after an intended output change; review the diff before committing.

    python scripts/regen_goldens.py
"""

import shutil
import sys
from pathlib import Path

from nova.cli import main

ROOT = Path(__file__).resolve().parents[1] / "tests" / "golden"

# name -> argv; every case runs the pinned default config
TWO_PHASE = "1,2,3,4,5,5.4,5.5,5.55,5.58,5.6"
CASES = {
    "generate": ["generate"],
    "generate_two_phase": ["generate", "--entropy-override", TWO_PHASE],
    "trace": ["trace"],
    "heatmap": ["heatmap"],
    "heatmap_layers": ["heatmap", "--heatmap-scales", "8,10", "--heatmap-layers", "1,8",
                       "--norm", "per-map", "--entropy-override", TWO_PHASE],
    "compare": ["compare", "--entropy-override", TWO_PHASE],
}


def main_() -> int:
    for name, argv in CASES.items():
        dest = ROOT / name
        if dest.exists():
            shutil.rmtree(dest)
        code = main(argv + ["--out-dir", str(dest)])
        if code:
            print(f"{name}: exit {code}", file=sys.stderr)
            return code
        print(f"{name}: {sorted(p.name for p in dest.iterdir())}")
    return 0


if __name__ == "__main__":
    sys.exit(main_())
