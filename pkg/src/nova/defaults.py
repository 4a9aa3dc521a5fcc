"""Pinned default configuration. Bump DEFAULTS_VERSION whenever a value
changes; CLI golden files depend on these."""

DEFAULTS_VERSION = 1

SCALE_SIDES = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16)
VOCAB_SIZE = 64
DIM = 64
LAYERS = 8
HEADS = 4
SEED = 0

T_EST = 5
ALPHA = 0.5
TAU = 0.8
LAMBDA = 0.1
R_MAX = 0.95

MODE = "nova"
SELECTOR = "entropy"
SAMPLING = "argmax"
SAMPLE_SEED = 0
SHARED_MASK = False

# late-stage constant pruning for the fixed / layer_only ablations
FIXED_LATE_RATIO = 0.5
FIXED_LATE_SCALES = 2


def fixed_ratios(T: int) -> tuple[float, ...]:
    late = min(FIXED_LATE_SCALES, T)
    return (0.0,) * (T - late) + (FIXED_LATE_RATIO,) * late
