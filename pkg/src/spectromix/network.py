"""Hash-encoded coordinate network mapping Omega coordinates to volume fractions.

Forward and backward passes are written out by hand; every ``forward`` returns
a cache that the matching ``backward`` consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import ParamVector
from .spectra import softmax

HASH_PRIMES = (1, 2654435761)


@dataclass(frozen=True)
class HashEncodingConfig:
    levels: int = 16
    table_size: int = 2**18
    features_per_level: int = 8
    base_resolution: int = 2
    growth: float = 2.0

    def __post_init__(self):
        if min(self.levels, self.table_size, self.features_per_level, self.base_resolution) <= 0:
            raise ValueError("hash encoding sizes must be positive")
        if self.growth <= 1:
            raise ValueError("growth factor must exceed 1")

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth**level))

    def rows(self, level: int) -> int:
        n = self.resolution(level) + 1
        return min(self.table_size, n * n)

    def is_dense(self, level: int) -> bool:
        n = self.resolution(level) + 1
        return n * n <= self.table_size

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


def corner_indices(cfg: HashEncodingConfig, level: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Table row of integer vertex (ix, iy) at ``level``."""
    n = cfg.resolution(level) + 1
    if cfg.is_dense(level):
        return iy * n + ix
    h = (ix.astype(np.uint64) * np.uint64(HASH_PRIMES[0])) ^ (iy.astype(np.uint64) * np.uint64(HASH_PRIMES[1]))
    return (h % np.uint64(cfg.table_size)).astype(np.int64)


def level_corners(cfg: HashEncodingConfig, level: int, x: np.ndarray):
    """Rows (S, 4) and bilinear weights (S, 4) of the cell containing each point."""
    res = cfg.resolution(level)
    pos = (np.clip(x, -1.0, 1.0) + 1.0) * (0.5 * res)
    cell = np.minimum(np.floor(pos).astype(np.int64), res - 1)
    frac = pos - cell
    cx, cy = cell[:, 0], cell[:, 1]
    fx, fy = frac[:, 0], frac[:, 1]
    rows = np.stack(
        [
            corner_indices(cfg, level, cx, cy),
            corner_indices(cfg, level, cx + 1, cy),
            corner_indices(cfg, level, cx, cy + 1),
            corner_indices(cfg, level, cx + 1, cy + 1),
        ],
        axis=1,
    )
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return rows, weights


@numba.njit(cache=True)
def _cell(xv, res):
    pos = (min(max(xv, -1.0), 1.0) + 1.0) * (0.5 * res)
    c = np.int64(np.floor(pos))
    if c > res - 1:
        c = res - 1
    return c, pos - c


@numba.njit(cache=True)
def _row(ix, iy, res, dense, table_size):
    if dense:
        return iy * (res + 1) + ix
    h = (np.uint64(ix) * np.uint64(1)) ^ (np.uint64(iy) * np.uint64(2654435761))
    return np.int64(h % np.uint64(table_size))


@numba.njit(cache=True)
def _encode_kernel(x, tables, resolutions, offsets, dense, table_size, out):
    n_levels = resolutions.size
    f = tables.shape[1]
    for s in range(x.shape[0]):
        for l in range(n_levels):
            res = resolutions[l]
            cx, fx = _cell(x[s, 0], res)
            cy, fy = _cell(x[s, 1], res)
            base = l * f
            for k in range(f):
                out[s, base + k] = 0.0
            for corner in range(4):
                dx = corner & 1
                dy = corner >> 1
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                r = offsets[l] + _row(cx + dx, cy + dy, res, dense[l], table_size)
                for k in range(f):
                    out[s, base + k] += w * tables[r, k]


@numba.njit(cache=True)
def _encode_backward_kernel(x, d_feats, resolutions, offsets, dense, table_size, grad):
    n_levels = resolutions.size
    f = grad.shape[1]
    for s in range(x.shape[0]):
        for l in range(n_levels):
            res = resolutions[l]
            cx, fx = _cell(x[s, 0], res)
            cy, fy = _cell(x[s, 1], res)
            base = l * f
            for corner in range(4):
                dx = corner & 1
                dy = corner >> 1
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                r = offsets[l] + _row(cx + dx, cy + dy, res, dense[l], table_size)
                for k in range(f):
                    grad[r, k] += w * d_feats[s, base + k]


@dataclass(frozen=True)
class NetworkConfig:
    n_materials: int
    encoding: HashEncodingConfig = HashEncodingConfig()
    hidden: int = 64


class CoordinateNetwork:
    """Hash encoding, one hidden ReLU layer and a SoftMax output head.

    Parameters live in a ParamVector with segments ``tables`` (all levels
    stacked row-wise), ``w1``, ``b1``, ``w2`` and ``b2``.
    """

    def __init__(self, config: NetworkConfig, params: ParamVector | None = None):
        self.config = config
        self.params = params if params is not None else ParamVector(self.param_shapes(config))
        enc = config.encoding
        self.level_offsets = np.concatenate([[0], np.cumsum([enc.rows(l) for l in range(enc.levels)])])

    @staticmethod
    def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
        enc = config.encoding
        total_rows = sum(enc.rows(l) for l in range(enc.levels))
        return {
            "tables": (total_rows, enc.features_per_level),
            "w1": (enc.output_dim, config.hidden),
            "b1": (config.hidden,),
            "w2": (config.hidden, config.n_materials),
            "b2": (config.n_materials,),
        }

    def initialize(self, rng: np.random.Generator, hash_scale: float = 1e-4) -> "CoordinateNetwork":
        self.params["tables"] = rng.uniform(-hash_scale, hash_scale, self.params["tables"].shape)
        for w, b in (("w1", "b1"), ("w2", "b2")):
            bound = 1.0 / np.sqrt(self.params[w].shape[0])
            self.params[w] = rng.uniform(-bound, bound, self.params[w].shape)
            self.params[b] = rng.uniform(-bound, bound, self.params[b].shape)
        return self

    def level_table(self, level: int) -> np.ndarray:
        lo, hi = self.level_offsets[level], self.level_offsets[level + 1]
        return self.params["tables"][lo:hi]

    # -- encoding ----------------------------------------------------------------

    def corners(self, x: np.ndarray):
        """Global table rows (S, levels, 4) and bilinear weights (S, levels, 4)."""
        enc = self.config.encoding
        rows, weights = [], []
        for l in range(enc.levels):
            r, w = level_corners(enc, l, x)
            rows.append(r + self.level_offsets[l])
            weights.append(w)
        return np.stack(rows, axis=1), np.stack(weights, axis=1)

    def _level_arrays(self):
        enc = self.config.encoding
        levels = range(enc.levels)
        return (
            np.array([enc.resolution(l) for l in levels], dtype=np.int64),
            self.level_offsets[:-1].astype(np.int64),
            np.array([enc.is_dense(l) for l in levels]),
            np.int64(enc.table_size),
        )

    def encode(self, x: np.ndarray, return_cache: bool = False):
        """Concatenated per-level features (S, levels * F)."""
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
        feats = np.empty((x.shape[0], self.config.encoding.output_dim))
        _encode_kernel(x, self.params["tables"], *self._level_arrays(), feats)
        return (feats, x) if return_cache else feats

    def encode_backward(self, d_feats: np.ndarray, cache, grads: ParamVector) -> None:
        """Scatter-add dL/d features into the table rows they were read from."""
        _encode_backward_kernel(cache, np.ascontiguousarray(d_feats), *self._level_arrays(), grads["tables"])

    # -- full network --------------------------------------------------------------

    def forward(self, x: np.ndarray, return_cache: bool = False):
        p = self.params
        feats, enc_cache = self.encode(x, return_cache=True)
        pre = feats @ p["w1"] + p["b1"]
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ p["w2"] + p["b2"]
        alpha = softmax(logits)
        if return_cache:
            return alpha, (enc_cache, feats, pre, hidden, alpha)
        return alpha

    __call__ = forward

    def infer_fraction(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def backward(self, d_alpha: np.ndarray, cache, grads: ParamVector) -> None:
        """Accumulate parameter gradients into ``grads`` given dL/d alpha (S, M)."""
        enc_cache, feats, pre, hidden, alpha = cache
        p = self.params
        d_logits = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        grads["w2"] += hidden.T @ d_logits
        grads["b2"] += d_logits.sum(axis=0)
        d_hidden = d_logits @ p["w2"].T
        d_pre = d_hidden * (pre > 0)
        grads["w1"] += feats.T @ d_pre
        grads["b1"] += d_pre.sum(axis=0)
        self.encode_backward(d_pre @ p["w1"].T, enc_cache, grads)
