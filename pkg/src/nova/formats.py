"""Byte-stable writers for the files the CLI emits."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .entropy import EntropyMap
from .errors import InputError
from .model import TokenMap

MID_GRAY = 128


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def tokens_json(tokens: Sequence[TokenMap], digest: str) -> dict:
    return {
        "digest": digest,
        "scales": [{"t": tm.t, "h": tm.h, "w": tm.w, "ids": [int(i) for i in tm.ids]} for tm in tokens],
    }


def _to_bytes(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        return np.full(values.shape, MID_GRAY, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_ppm(feature: np.ndarray, path: Path, channels: Sequence[int] = (0, 1, 2)) -> dict:
    """Binary P6 of three feature channels, affinely mapped from their joint
    min/max to 0..255. Returns the mapping for the report."""
    h, w, _ = feature.shape
    rgb = feature[:, :, list(channels)]
    lo, hi = float(rgb.min()), float(rgb.max())
    data = _to_bytes(rgb, lo, hi)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    return {"channels": list(channels), "min": lo, "max": hi}


def write_pgm(emap: EntropyMap, path: Path, vocab_size: int, normalization: str = "fixed") -> dict:
    """Binary P5 heatmap of shape ``(h_t, w_t)``.

    ``fixed`` maps ``[0, ln V]`` to ``[0, 255]``; ``per-map`` uses the map's own
    range and writes mid-gray 128 when the map is constant.
    """
    grid = emap.grid()
    if normalization == "fixed":
        lo, hi = 0.0, math.log(vocab_size)
    elif normalization == "per-map":
        lo, hi = float(grid.min()), float(grid.max())
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    data = _to_bytes(grid, lo, hi)
    path.write_bytes(f"P5\n{emap.w} {emap.h}\n255\n".encode("ascii") + data.tobytes())
    return {"t": emap.t, "j": emap.j, "h": emap.h, "w": emap.w, "min": lo, "max": hi,
            "normalization": normalization, "file": path.name}


def read_pnm(path: Path) -> tuple[str, int, int, np.ndarray]:
    """Parse the P5/P6 files written above (single-space headers, maxval 255)."""
    raw = path.read_bytes()
    try:
        magic, dims, maxval, body = raw.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise InputError(f"{path}: not a P5/P6 file") from None
    if magic not in (b"P5", b"P6") or maxval != b"255":
        raise InputError(f"{path}: unsupported header {magic!r} maxval {maxval!r}")
    return magic.decode(), w, h, np.frombuffer(body, dtype=np.uint8)
