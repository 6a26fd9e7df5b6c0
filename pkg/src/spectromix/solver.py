"""Joint recovery of volume-fraction maps and spectrum weights from one sinogram.

Two parameterizations of the fraction field share the same loop:

* ``tv``  - per-pixel logits mapped through SoftMax, with a TV penalty on
  consecutive ray samples;
* ``inr`` - the hash-encoded coordinate network of :mod:`spectromix.network`.

The spectrum is always SoftMax(gamma) applied to the library, with gamma
starting at all ones. Both constraint sets therefore hold by construction.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import AdamState, NonFiniteGradientError, ParamVector, adam_step, eta_to_gamma, forward_project_grad
from .materials import MaterialSet
from .network import CoordinateNetwork, HashEncodingConfig, NetworkConfig
from .phantom import FractionGrid
from .projector import Sinogram, pixel_index, sample_rays, segment_sum, system_matrix
from .spectra import Spectrum, SpectrumLibrary, compose_spectrum, softmax, softmax_jacobian_apply

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ConstraintViolation(AssertionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "inr"  # "tv" | "inr"
    epochs: int = 4000  # inr: passes over the ray set
    iterations: int = 7000  # tv: optimizer steps
    rays_per_step: int = 40
    lr: float = 1e-3
    tv_weight: float = 3e-4
    spectrum_warmup: int = 0  # steps with gamma held at its initial value
    seed: int = 0
    width: int = 64  # fraction-grid size of the tv variant
    encoding: HashEncodingConfig = field(default_factory=HashEncodingConfig)
    hidden: int = 64
    debug_checks: bool = False
    log_every: int = 0

    def __post_init__(self):
        if self.variant not in ("tv", "inr"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.epochs, self.iterations, self.rays_per_step, self.width) <= 0:
            raise ValueError("counts must be positive")
        if self.spectrum_warmup < 0:
            raise ValueError("spectrum_warmup must be nonnegative")
        if self.tv_weight < 0 or self.lr <= 0:
            raise ValueError("lr must be positive and tv_weight nonnegative")

    @classmethod
    def reference_tv(cls, **kw) -> "TrainConfig":
        return cls(variant="tv", iterations=7000, lr=1e-2, tv_weight=3e-4, **kw)

    @classmethod
    def reference_inr(cls, **kw) -> "TrainConfig":
        return cls(variant="inr", epochs=4000, lr=1e-3, rays_per_step=40, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = _coerce_numbers(cls, d)
        if isinstance(d.get("encoding"), dict):
            d["encoding"] = HashEncodingConfig(**_coerce_numbers(HashEncodingConfig, d["encoding"]))
        return cls(**d)


def _coerce_numbers(cls, d: dict) -> dict:
    # YAML 1.1 reads "1e-4" as a string
    d = dict(d)
    for f in fields(cls):
        if f.name in d and f.type in ("int", "float"):
            d[f.name] = int(d[f.name]) if f.type == "int" else float(d[f.name])
    return d


# -- losses ---------------------------------------------------------------------------


def loss_dc(predicted, measured) -> float:
    """Mean absolute projection residual over the ray batch."""
    predicted, measured = np.asarray(predicted), np.asarray(measured)
    if predicted.size == 0:
        raise ValueError("empty ray batch")
    return float(np.mean(np.abs(predicted - measured)))


def loss_dc_grad(predicted, measured) -> np.ndarray:
    r = np.asarray(predicted) - np.asarray(measured)
    return np.sign(r) / r.size


def loss_tv(alpha_samples: np.ndarray, ray_index: np.ndarray) -> float:
    """(1/|R|) sum over rays of the l1 jumps between consecutive samples."""
    n_rays = int(ray_index.max()) + 1 if ray_index.size else 1
    same = ray_index[1:] == ray_index[:-1]
    jumps = np.abs(alpha_samples[1:] - alpha_samples[:-1])[same]
    return float(jumps.sum() / n_rays)


def loss_tv_grad(alpha_samples: np.ndarray, ray_index: np.ndarray) -> np.ndarray:
    n_rays = int(ray_index.max()) + 1 if ray_index.size else 1
    same = (ray_index[1:] == ray_index[:-1])[:, None]
    sgn = np.sign(alpha_samples[1:] - alpha_samples[:-1]) * same / n_rays
    grad = np.zeros_like(alpha_samples)
    grad[1:] += sgn
    grad[:-1] -= sgn
    return grad


# -- models ------------------------------------------------------------------------------


class GridModel:
    """Explicit per-pixel logits; fractions are their SoftMax."""

    def __init__(self, width: int, height: int, n_materials: int, params: ParamVector):
        self.width, self.height, self.n_materials = width, height, n_materials
        self.params = params

    def fractions(self) -> np.ndarray:
        return softmax(self.params["grid_logits"])  # (P, M)

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        return self.fractions()[pixel_index(coords, self.width, self.height)]


@dataclass
class TrainResult:
    variant: str
    params: ParamVector
    config: TrainConfig
    library: SpectrumLibrary
    materials: tuple[str, ...]
    loss_history: np.ndarray
    gamma_history: np.ndarray
    runtime: float
    model: object = None

    @property
    def gamma(self) -> np.ndarray:
        return self.params["gamma"].copy()

    @property
    def spectrum(self) -> Spectrum:
        return compose_spectrum(self.library, self.params["gamma"])


class Problem:
    """Sinogram, materials and library bound together with the trainable parameters."""

    def __init__(self, sinogram: Sinogram, library: SpectrumLibrary, mset: MaterialSet, config: TrainConfig):
        if library.grid != mset.grid:
            raise ValueError("library and material set use different energy grids")
        self.sinogram, self.library, self.mset, self.config = sinogram, library, mset, config
        self.geometry = sinogram.geometry
        self.measured = sinogram.values.ravel()
        self.lib_matrix = library.matrix
        m = len(mset)
        counts = sample_rays(self.geometry, np.arange(self.geometry.n_rays)).counts
        # rays that miss Omega carry no information about the unknowns
        self.ray_ids = np.nonzero(counts > 0)[0]
        if config.variant == "tv":
            w = config.width
            shapes = {"gamma": (len(library),), "grid_logits": (w * w, m)}
            self.params = ParamVector(shapes)
            self.model = GridModel(w, w, m, self.params)
            self.matrix = system_matrix(self.geometry, w, w)
        else:
            net_cfg = NetworkConfig(m, config.encoding, config.hidden)
            shapes = {"gamma": (len(library),), **CoordinateNetwork.param_shapes(net_cfg)}
            self.params = ParamVector(shapes)
            self.model = CoordinateNetwork(net_cfg, self.params)
        self.params["gamma"] = 1.0

    def initialize(self, rng: np.random.Generator) -> None:
        if isinstance(self.model, CoordinateNetwork):
            self.model.initialize(rng)

    # one step: returns loss and fills grads
    def loss_and_grad(self, ray_ids: np.ndarray, grads: ParamVector, check: bool = False):
        cfg = self.config
        gamma = self.params["gamma"]
        eta = softmax(gamma) @ self.lib_matrix
        if check:
            _check_simplex(eta[None, :], "spectrum")
        if cfg.variant == "tv":
            alpha = self.model.fractions()
            if check:
                _check_simplex(alpha, "fractions")
            a_r = self.matrix[ray_ids]
            paths = a_r @ alpha
        else:
            samples = sample_rays(self.geometry, ray_ids)
            alpha, cache = self.model.forward(samples.coords, return_cache=True)
            if check:
                _check_simplex(alpha, "fractions")
            paths = samples.step_cm * segment_sum(alpha, samples)
        pg = forward_project_grad(self.mset, eta, paths)
        measured = self.measured[ray_ids]
        loss = loss_dc(pg.rho, measured)
        upstream = loss_dc_grad(pg.rho, measured)
        grads["gamma"] += eta_to_gamma(self.library, gamma, upstream @ pg.d_eta)
        d_paths = upstream[:, None] * pg.d_paths
        if cfg.variant == "tv":
            d_alpha = a_r.T @ d_paths
            if cfg.tv_weight > 0:
                samples = sample_rays(self.geometry, ray_ids)
                pix = pixel_index(samples.coords, self.model.width, self.model.height)
                a_s = alpha[pix]
                loss += cfg.tv_weight * loss_tv(a_s, samples.ray_index)
                d_s = cfg.tv_weight * loss_tv_grad(a_s, samples.ray_index)
                for j in range(alpha.shape[1]):
                    d_alpha[:, j] += np.bincount(pix, weights=d_s[:, j], minlength=alpha.shape[0])
            grads["grid_logits"] += softmax_jacobian_apply(self.params["grid_logits"], d_alpha)
        else:
            d_alpha = samples.step_cm * d_paths[samples.ray_index]
            self.model.backward(d_alpha, cache, grads)
        return loss

    def full_loss(self) -> float:
        """Data-consistency loss over every informative ray."""
        eta = softmax(self.params["gamma"]) @ self.lib_matrix
        total = 0.0
        for chunk in np.array_split(self.ray_ids, max(1, self.ray_ids.size // 2048)):
            if self.config.variant == "tv":
                paths = self.matrix[chunk] @ self.model.fractions()
            else:
                samples = sample_rays(self.geometry, chunk)
                paths = samples.step_cm * segment_sum(self.model(samples.coords), samples)
            rho = forward_project_grad(self.mset, eta, paths).rho
            total += np.abs(rho - self.measured[chunk]).sum()
        return float(total / self.ray_ids.size)


def _check_simplex(values: np.ndarray, what: str, tol: float = 1e-9) -> None:
    dev = max(float(np.abs(values.sum(axis=-1) - 1.0).max()), float(-min(values.min(), 0.0)))
    if dev > tol:
        raise ConstraintViolation(f"{what} left the simplex by {dev:.3e}")


def batches(rng: np.random.Generator, ray_ids: np.ndarray, per_step: int):
    """One epoch of without-replacement batches (remainder dropped)."""
    order = rng.permutation(ray_ids)
    n = max(1, order.size // per_step)
    for k in range(n):
        yield order[k * per_step:(k + 1) * per_step]


def train(sinogram: Sinogram, library: SpectrumLibrary, mset: MaterialSet, config: TrainConfig,
          callback=None) -> TrainResult:
    """Run the joint optimization; deterministic for a fixed config and seed."""
    problem = Problem(sinogram, library, mset, config)
    rng = np.random.default_rng(config.seed)
    problem.initialize(rng)
    params = problem.params
    state = AdamState.zeros(len(params))
    grads = params.zeros_like()
    history, gammas = [], []
    last_good = params.copy()
    t0 = time.perf_counter()

    if config.variant == "tv":
        per_epoch = max(1, problem.ray_ids.size // config.rays_per_step)
        n_epochs = -(-config.iterations // per_epoch)
        total_steps = config.iterations
    else:
        n_epochs = config.epochs
        total_steps = None

    step = 0
    for _ in range(n_epochs):
        for batch in batches(rng, problem.ray_ids, config.rays_per_step):
            if total_steps is not None and step >= total_steps:
                break
            grads.data[:] = 0.0
            loss = problem.loss_and_grad(batch, grads, check=config.debug_checks)
            if step < config.spectrum_warmup:
                grads["gamma"] = 0.0
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
            try:
                adam_step(params, grads.data, state, config.lr)
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
            if not np.all(np.isfinite(params.data)):
                raise TrainingDiverged(f"non-finite parameters after step {step}", last_good)
            history.append(loss)
            gammas.append(params["gamma"].copy())
            step += 1
            if config.log_every and step % config.log_every == 0:
                log.info("step %d loss %.6f", step, loss)
            if callback is not None:
                callback(step, loss, problem)
            if step % 1000 == 0:
                last_good = params.copy()

    return TrainResult(
        variant=config.variant,
        params=params,
        config=config,
        library=library,
        materials=tuple(mset.names),
        loss_history=np.array(history),
        gamma_history=np.array(gammas),
        runtime=time.perf_counter() - t0,
        model=problem.model,
    )


def pixel_center_coords(out_size: int) -> np.ndarray:
    """(out_size^2, 2) Omega coordinates of pixel centers, row-major."""
    c = -1.0 + (2.0 * np.arange(out_size) + 1.0) / out_size
    xx, yy = np.meshgrid(c, c)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def evaluate_grid(result_or_model, out_size: int, pixel_size: float, materials) -> FractionGrid:
    """Materialize the fraction field at pixel centers of an out_size^2 grid."""
    model = result_or_model.model if isinstance(result_or_model, TrainResult) else result_or_model
    if isinstance(model, GridModel):
        if out_size != model.width:
            raise ValueError(f"tv grid is {model.width} pixels wide; cannot resample to {out_size}")
        alpha = model.fractions()
    else:
        alpha = model(pixel_center_coords(out_size))
    return FractionGrid(alpha.reshape(out_size, out_size, -1), pixel_size, tuple(materials))


# -- checkpoints ------------------------------------------------------------------------


def save_checkpoint(result: TrainResult, path) -> None:
    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "variant": result.variant,
        "config": result.config.to_dict(),
        "materials": list(result.materials),
        "segments": {k: list(v) for k, v in result.params.shapes.items()},
    }
    with open(path, "wb") as fh:
        np.savez(fh, params=result.params.data, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))


def load_checkpoint(path, library: SpectrumLibrary) -> TrainResult:
    with np.load(path) as z:
        data = z["params"].copy()
        meta = json.loads(z["meta"].tobytes().decode())
    if meta["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
    config = TrainConfig.from_dict(meta["config"])
    params = ParamVector({k: tuple(v) for k, v in meta["segments"].items()})
    params.data[:] = data
    m = len(meta["materials"])
    if config.variant == "tv":
        model = GridModel(config.width, config.width, m, params)
    else:
        model = CoordinateNetwork(NetworkConfig(m, config.encoding, config.hidden), params)
    return TrainResult(config.variant, params, config, library, tuple(meta["materials"]),
                       np.array([]), np.empty((0, len(library))), 0.0, model)


def write_loss_history(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(history, start=1):
            fh.write(f"{i},{float(v)!r}\n")
