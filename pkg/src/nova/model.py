"""Deterministic toy next-scale autoregressive transformer.

Scales and layers are 1-based in every public signature: scale ``t`` runs
``1..T`` and layer ``j`` runs ``1..L``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, InternalStateError
from .numerics import Rng, bilinear_resize, matmul, seeded_gaussian, softmax_rows

LN_EPS = 1e-5


@dataclass(frozen=True)
class ScaleSchedule:
    grids: tuple[tuple[int, int], ...]

    def __post_init__(self):
        grids = tuple((int(h), int(w)) for h, w in self.grids)
        object.__setattr__(self, "grids", grids)
        if len(grids) < 4:
            raise ConfigError("scales", f"need at least 4 scales, got {len(grids)}")
        if grids[0] != (1, 1):
            raise ConfigError("scales", f"first grid must be 1x1, got {grids[0]}")
        sizes = [h * w for h, w in grids]
        if any(h < 1 or w < 1 for h, w in grids):
            raise ConfigError("scales", "grid sides must be >= 1")
        if any(b < a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("scales", f"token counts must be non-decreasing, got {sizes}")

    @classmethod
    def square(cls, sides: Sequence[int]) -> "ScaleSchedule":
        return cls(tuple((s, s) for s in sides))

    @property
    def T(self) -> int:
        return len(self.grids)

    def grid(self, t: int) -> tuple[int, int]:
        if not 1 <= t <= self.T:
            raise InputError(f"scale index {t} outside 1..{self.T}")
        return self.grids[t - 1]

    def size(self, t: int) -> int:
        h, w = self.grid(t)
        return h * w

    def prefix_rows(self, t: int) -> int:
        """KV rows visible when scale ``t`` begins (start embedding included)."""
        return 1 + sum(h * w for h, w in self.grids[: t - 1])

    @property
    def final_grid(self) -> tuple[int, int]:
        return self.grids[-1]


@dataclass(frozen=True)
class ModelConfig:
    schedule: ScaleSchedule
    vocab_size: int = 64
    dim: int = 64
    layers: int = 8
    heads: int = 4
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab", f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.dim < 1 or self.heads < 1:
            raise ConfigError("dim", "dim and heads must be positive")
        if self.dim % self.heads:
            raise ConfigError("heads", f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 2:
            raise ConfigError("layers", f"need at least 2 layers, got {self.layers}")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio", "must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.dim


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class TokenMap:
    t: int
    h: int
    w: int
    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.ids.size != self.h * self.w:
            raise InputError(f"token map of {self.h}x{self.w} got {self.ids.size} ids")


@dataclass
class LayerOutput:
    """Result of one layer over the kept rows of a scale.

    ``keys``/``values`` hold the projections of the kept rows only (ordered as
    ``kept``). ``attn_mass`` is the head-averaged attention mass received by
    every key row (prefix rows first, then kept rows), so it sums to
    ``len(kept)``.
    """

    hidden: np.ndarray
    kept: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    attn_mass: np.ndarray


class KvStore:
    """Per-layer key/value rows for the start embedding and all completed scales."""

    def __init__(self, layers: int):
        self.keys: list[np.ndarray | None] = [None] * layers
        self.values: list[np.ndarray | None] = [None] * layers

    def rows(self, j: int) -> int:
        k = self.keys[j - 1]
        return 0 if k is None else k.shape[0]

    def get(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        k, v = self.keys[j - 1], self.values[j - 1]
        if k is None or v is None:
            raise InternalStateError(f"KV store empty at layer {j}")
        if k.shape[0] != v.shape[0]:
            raise InternalStateError(f"layer {j}: {k.shape[0]} keys vs {v.shape[0]} values")
        return k, v

    def append(self, j: int, keys: np.ndarray, values: np.ndarray) -> None:
        i = j - 1
        if self.keys[i] is None:
            self.keys[i], self.values[i] = keys.copy(), values.copy()
        else:
            self.keys[i] = np.vstack([self.keys[i], keys])
            self.values[i] = np.vstack([self.values[i], values])

    def check_rows(self, expected: int) -> None:
        for j in range(1, len(self.keys) + 1):
            if self.rows(j) != expected:
                raise InternalStateError(
                    f"KV store layer {j} has {self.rows(j)} rows, expected {expected}"
                )


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + LN_EPS) * g
    return y if b is None else y + b


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


class Model:
    """Weights plus the per-scale operations of the toy generator."""

    def __init__(self, config: ModelConfig, layers: list[LayerWeights], codebook: np.ndarray,
                 scale_emb: np.ndarray, pos_emb: np.ndarray, sos: np.ndarray,
                 lnf_g: np.ndarray, w_out: np.ndarray, b_out: np.ndarray):
        self.config = config
        self.layers = layers
        self.codebook = codebook
        self.scale_emb = scale_emb
        self.pos_emb = pos_emb
        self.sos = sos
        self.lnf_g = lnf_g
        self.w_out = w_out
        self.b_out = b_out

    @property
    def schedule(self) -> ScaleSchedule:
        return self.config.schedule

    # -- inputs ------------------------------------------------------------

    def scale_embedding(self, t: int) -> np.ndarray:
        """Additive ``(N_t, d)`` embedding: scale vector plus the positional field at scale ``t``."""
        h, w = self.schedule.grid(t)
        pos = bilinear_resize(self.pos_emb, h, w).reshape(h * w, self.config.dim)
        return pos + self.scale_emb[t - 1]

    def first_scale_input(self) -> np.ndarray:
        return self.sos[None, :] + self.scale_embedding(1)

    def next_scale_input(self, prev_feature: np.ndarray, t: int) -> np.ndarray:
        if not 2 <= t <= self.schedule.T:
            raise InputError(f"next_scale_input needs 2 <= t <= {self.schedule.T}, got {t}")
        h, w = self.schedule.grid(t)
        up = bilinear_resize(prev_feature, h, w).reshape(h * w, self.config.dim)
        return up + self.scale_embedding(t)

    def start_kv(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        lw = self.layers[j - 1]
        a = layer_norm(self.sos[None, :], lw.ln1_g, lw.ln1_b)
        return matmul(a, lw.wk), matmul(a, lw.wv)

    def new_kv_store(self) -> KvStore:
        kv = KvStore(self.config.layers)
        for j in range(1, self.config.layers + 1):
            kv.append(j, *self.start_kv(j))
        return kv

    # -- layers ------------------------------------------------------------

    def project_kv(self, j: int, hidden_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Key/value projections of layer-``j`` inputs (used to fill pruned rows)."""
        lw = self.layers[j - 1]
        a = layer_norm(hidden_rows, lw.ln1_g, lw.ln1_b)
        return matmul(a, lw.wk), matmul(a, lw.wv)

    def forward_layer(self, j: int, hidden: np.ndarray, kv: KvStore,
                      keep: np.ndarray | None = None) -> LayerOutput:
        """Pre-norm attention + MLP over the kept rows of ``hidden``.

        Queries are the kept rows; keys/values are the KV prefix followed by
        the kept rows. Rows outside ``keep`` are returned unchanged.
        """
        cfg = self.config
        lw = self.layers[j - 1]
        n = hidden.shape[0]
        if hidden.ndim != 2 or hidden.shape[1] != cfg.dim:
            raise InputError(f"hidden must be (N, {cfg.dim}), got {hidden.shape}")
        kept = np.arange(n) if keep is None else np.asarray(keep, dtype=np.intp)
        if kept.size == 0 or kept.min() < 0 or kept.max() >= n:
            raise InputError(f"keep indices out of range for {n} rows")
        k_pre, v_pre = kv.get(j)

        x = hidden[kept] if keep is not None else hidden
        a = layer_norm(x, lw.ln1_g, lw.ln1_b)
        q = matmul(a, lw.wq)
        k_new = matmul(a, lw.wk)
        v_new = matmul(a, lw.wv)
        keys = np.vstack([k_pre, k_new])
        values = np.vstack([v_pre, v_new])

        dh = cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        heads_out = []
        mass = np.zeros(keys.shape[0])
        for h in range(cfg.heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = matmul(q[:, sl], keys[:, sl].T) * scale
            probs = softmax_rows(scores)
            mass += probs.sum(axis=0)
            heads_out.append(matmul(probs, values[:, sl]))
        attn = matmul(np.concatenate(heads_out, axis=1), lw.wo)
        x = x + attn

        b = layer_norm(x, lw.ln2_g, lw.ln2_b)
        m = matmul(gelu(matmul(b, lw.w1) + lw.b1), lw.w2) + lw.b2
        x = x + m

        out = hidden.copy()
        out[kept] = x
        return LayerOutput(out, kept, k_new, v_new, mass / cfg.heads)

    # -- head --------------------------------------------------------------

    def readout_logits(self, hidden: np.ndarray) -> np.ndarray:
        hidden = np.asarray(hidden, dtype=np.float64)
        if hidden.ndim != 2 or hidden.shape[1] != self.config.dim:
            raise InputError(f"hidden must have {self.config.dim} columns, got {hidden.shape}")
        return matmul(layer_norm(hidden, self.lnf_g), self.w_out) + self.b_out

    def lookup(self, tokens: TokenMap) -> np.ndarray:
        if tokens.ids.size and (tokens.ids.min() < 0 or tokens.ids.max() >= self.config.vocab_size):
            raise InputError("token id outside vocabulary")
        return self.codebook[tokens.ids].reshape(tokens.h, tokens.w, self.config.dim)

    def accumulate_feature(self, acc: np.ndarray, tokens: TokenMap) -> np.ndarray:
        return accumulate_feature(acc, tokens, self.codebook)

    def empty_feature(self) -> np.ndarray:
        h, w = self.schedule.final_grid
        return np.zeros((h, w, self.config.dim))


def accumulate_feature(acc: np.ndarray, tokens: TokenMap, codebook: np.ndarray) -> np.ndarray:
    """Upsample the codebook lookup of ``tokens`` to ``acc``'s grid and add it."""
    v, d = codebook.shape
    if tokens.ids.size and (tokens.ids.min() < 0 or tokens.ids.max() >= v):
        raise InputError("token id outside vocabulary")
    if acc.shape[2] != d:
        raise InputError(f"feature has {acc.shape[2]} channels, codebook {d}")
    residual = codebook[tokens.ids].reshape(tokens.h, tokens.w, d)
    return acc + bilinear_resize(residual, acc.shape[0], acc.shape[1])


def sample_tokens(logits: np.ndarray, t: int, grid: tuple[int, int],
                  mode: str = "argmax", rng: Rng | None = None) -> TokenMap:
    """Argmax (ties go to the lowest id) or inverse-CDF categorical sampling."""
    h, w = grid
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "argmax":
        ids = np.argmax(logits, axis=1)
    elif mode == "categorical":
        if rng is None:
            raise InputError("categorical sampling needs an Rng")
        cdf = np.cumsum(softmax_rows(logits), axis=1)
        u = rng.uniform(logits.shape[0])[:, None] * cdf[:, -1:]
        ids = np.minimum((cdf <= u).sum(axis=1), logits.shape[1] - 1)
    else:
        raise InputError(f"unknown sampling mode {mode!r}")
    return TokenMap(t, h, w, ids)


def sincos_2d(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sine/cosine positional field: first half of the channels
    encode the row, second half the column."""
    half = d // 2
    pos_y = _sincos_1d(np.arange(h, dtype=np.float64), half)
    pos_x = _sincos_1d(np.arange(w, dtype=np.float64), d - half)
    return np.concatenate([
        np.broadcast_to(pos_y[:, None, :], (h, w, half)),
        np.broadcast_to(pos_x[None, :, :], (h, w, d - half)),
    ], axis=2)


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    n_freq = (dim + 1) // 2
    freqs = 1.0 / 10000.0 ** (np.arange(n_freq, dtype=np.float64) / max(n_freq, 1))
    angles = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :dim]


def build_model(config: ModelConfig) -> Model:
    """Draw every tensor from one SplitMix64 stream in a fixed order.

    Output projections (``wo``, ``w2``, ``b2``) use a 1/sqrt(2L) smaller
    stddev; the positional field is a fixed sine/cosine table.
    """
    d, V, T = config.dim, config.vocab_size, config.schedule.T
    std = 1.0 / math.sqrt(d)
    # GPT-2 style: projections that write into the residual stream get 1/sqrt(2L)
    out_std = std / math.sqrt(2 * config.layers)
    rng = Rng(config.seed)

    def g(rows, cols, s=std):
        return seeded_gaussian(rng, rows, cols, s)

    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            ln1_g=1.0 + g(1, d)[0], ln1_b=g(1, d)[0],
            wq=g(d, d), wk=g(d, d), wv=g(d, d), wo=g(d, d, out_std),
            ln2_g=1.0 + g(1, d)[0], ln2_b=g(1, d)[0],
            w1=g(d, config.mlp_dim), b1=g(1, config.mlp_dim)[0],
            w2=g(config.mlp_dim, d, out_std), b2=g(1, d, out_std)[0],
        ))
    codebook = g(V, d)
    sos = g(1, d)[0]
    lnf_g = 1.0 + g(1, d)[0]
    w_out = g(d, V)
    b_out = g(1, V)[0]
    # drawn last: schedules sharing a prefix (and final grid) share all weights they use
    scale_emb = g(T, d)
    pos_emb = sincos_2d(*config.schedule.final_grid, d)
    return Model(config, layers, codebook, scale_emb, pos_emb, sos, lnf_g, w_out, b_out)


# -- weight export ------------------------------------------------------------

def _named_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    out = []
    for j, lw in enumerate(model.layers, start=1):
        for f in fields(LayerWeights):
            out.append((f"layers.{j}.{f.name}", getattr(lw, f.name)))
    for name in ("codebook", "scale_emb", "pos_emb", "sos", "lnf_g", "w_out", "b_out"):
        out.append((name, getattr(model, name)))
    return out


def save_weights(model: Model, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64, concatenated) and ``<path>.json``."""
    path = Path(path)
    bin_path, meta_path = path.with_suffix(".bin"), path.with_suffix(".json")
    tensors, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, arr in _named_tensors(model):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    meta = {"dtype": "<f8", "count": offset, "tensors": tensors}
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return bin_path, meta_path


def load_weights(config: ModelConfig, path: str | Path) -> Model:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if flat.size != meta["count"]:
        raise InputError(f"weight file has {flat.size} values, sidecar says {meta['count']}")
    model = build_model(config)
    expected = dict(_named_tensors(model))
    for entry in meta["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected or expected[name].shape != shape:
            raise InputError(f"tensor {name} with shape {shape} does not fit config")
        arr = flat[entry["offset"]: entry["offset"] + math.prod(shape)].reshape(shape).astype(np.float64)
        if name.startswith("layers."):
            _, j, attr = name.split(".")
            setattr(model.layers[int(j) - 1], attr, arr)
        else:
            setattr(model, name, arr)
    return model
