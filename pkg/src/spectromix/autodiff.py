"""Closed-form adjoints of the polychromatic forward model, parameter storage and Adam.

The forward model for one ray with material path lengths p (cm) and spectrum
eta is ``rho = -ln I`` with ``T_k = exp(-sum_j mu_j(E_k) p_j)`` and
``I = sum_k eta_k T_k``. Its partial derivatives are

    d rho / d p_j   = sum_k eta_k T_k mu_j(E_k) / I
    d rho / d eta_k = -T_k / I

and both are set to zero for rays whose transmission hit the floor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .materials import MaterialSet
from .projector import TRANSMISSION_FLOOR
from .spectra import SpectrumLibrary, softmax, softmax_jacobian_apply


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class ProjectionGrad:
    rho: np.ndarray  # (R,)
    d_paths: np.ndarray  # (R, M)
    d_eta: np.ndarray  # (R, L)
    saturated: np.ndarray  # (R,) bool


def forward_project_grad(mset: MaterialSet, eta: np.ndarray, paths: np.ndarray,
                         floor: float = TRANSMISSION_FLOOR) -> ProjectionGrad:
    """Projection values and per-ray partials w.r.t. path lengths and spectrum bins."""
    paths = np.atleast_2d(paths)
    mu = mset.lac_matrix  # (M, L)
    t = np.exp(-paths @ mu)  # (R, L)
    i = t @ eta
    saturated = i < floor
    safe_i = np.where(saturated, 1.0, i)
    weighted = t * eta  # eta_k T_k
    d_paths = (weighted @ mu.T) / safe_i[:, None]
    d_eta = -t / safe_i[:, None]
    d_paths[saturated] = 0.0
    d_eta[saturated] = 0.0
    rho = -np.log(np.maximum(i, floor))
    return ProjectionGrad(rho, d_paths, d_eta, saturated)


def eta_to_gamma(library: SpectrumLibrary, gamma: np.ndarray, d_eta: np.ndarray) -> np.ndarray:
    """Chain gradients w.r.t. spectrum bins (..., L) through the library and SoftMax to gamma."""
    d_weights = d_eta @ library.matrix.T  # (..., N)
    return softmax_jacobian_apply(np.broadcast_to(gamma, d_weights.shape), d_weights)


def grad_forward_project(mset: MaterialSet, library: SpectrumLibrary, gamma: np.ndarray, paths: np.ndarray):
    """Per-ray (rho, d rho/d gamma (R, N), d rho/d p (R, M), saturated)."""
    eta = softmax(gamma) @ library.matrix
    g = forward_project_grad(mset, eta, paths)
    return g.rho, eta_to_gamma(library, gamma, g.d_eta), g.d_paths, g.saturated


# -- parameters --------------------------------------------------------------------


class ParamVector:
    """Flat float64 buffer with named segments exposed as reshaped views."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = dict(shapes)
        self.offsets = {}
        pos = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.data = np.zeros(pos)

    def __len__(self) -> int:
        return self.data.size

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.data[lo:hi].reshape(self.shapes[name])

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def names(self) -> list[str]:
        return list(self.shapes)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.shapes)

    def copy(self) -> "ParamVector":
        out = ParamVector(self.shapes)
        out.data[:] = self.data
        return out

    def segment_of(self, flat_index: int) -> str:
        for name, (lo, hi) in self.offsets.items():
            if lo <= flat_index < hi:
                return name
        raise IndexError(flat_index)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(params: ParamVector, grads: np.ndarray, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    g = np.asarray(grads)
    if g.shape != params.data.shape or state.m.shape != g.shape:
        raise ValueError("parameter, gradient and moment sizes differ")
    bad = ~np.isfinite(g)
    if bad.any():
        first = int(np.argmax(bad))
        raise NonFiniteGradientError(
            f"non-finite gradient in segment {params.segment_of(first)!r} ({int(bad.sum())} entries)"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * g * g
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    params.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
