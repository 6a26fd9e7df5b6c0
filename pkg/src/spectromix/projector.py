"""2D parallel-beam geometry, ray sampling and the polychromatic forward model.

All ray geometry lives in the normalized square Omega = [-1, 1]^2. A ray with
view angle theta and detector offset s is the line ``s * n + t * d`` with
``d = (cos theta, sin theta)`` and ``n = (-sin theta, cos theta)``. Samples
start at the entry point into Omega and are spaced by the sample step.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .materials import MaterialSet
from .phantom import FractionGrid
from .spectra import Spectrum

TRANSMISSION_FLOOR = 1e-12


@dataclass(frozen=True)
class Geometry:
    n_views: int
    n_bins: int
    bin_spacing: float  # cm
    sample_step: float  # cm
    scale: float  # cm per Omega unit (half the field of view)

    def __post_init__(self):
        if self.n_views < 1 or self.n_bins < 1:
            raise ValueError("need at least one view and one detector bin")
        if self.sample_step <= 0 or self.bin_spacing <= 0 or self.scale <= 0:
            raise ValueError("bin spacing, sample step and scale must be positive")

    @classmethod
    def for_image(cls, width: int, pixel_size: float, n_views: int, n_bins: int | None = None) -> "Geometry":
        """Detector pitch of one pixel, half-pixel sampling, bins ~ sqrt(2) * width by default."""
        if n_bins is None:
            n_bins = int(math.ceil(math.sqrt(2) * width)) | 1
        return cls(n_views, n_bins, pixel_size, pixel_size / 2.0, width * pixel_size / 2.0)

    @property
    def angles(self) -> np.ndarray:
        return np.pi * np.arange(self.n_views) / self.n_views

    @property
    def offsets(self) -> np.ndarray:
        """Detector bin centers in Omega units."""
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0) * (self.bin_spacing / self.scale)

    @property
    def step(self) -> float:
        """Sample step in Omega units."""
        return self.sample_step / self.scale

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_bins

    def undersample(self, factor: int) -> "Geometry":
        if factor < 1 or self.n_views % factor:
            raise ValueError(f"cannot undersample {self.n_views} views by {factor}")
        return replace(self, n_views=self.n_views // factor)

    def to_dict(self) -> dict:
        return {
            "n_views": self.n_views,
            "n_bins": self.n_bins,
            "bin_spacing": self.bin_spacing,
            "sample_step": self.sample_step,
            "scale": self.scale,
        }


def _direction(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # rounding makes axis-aligned views exact (cos(pi/2) -> 0)
    return np.round(np.cos(theta), 15), np.round(np.sin(theta), 15)


def _chords(geometry: Geometry, views: np.ndarray, bins: np.ndarray):
    """Entry parameter, chord length and sample count for each ray."""
    c, s = _direction(geometry.angles[views])
    off = geometry.offsets[bins]
    px, py = -off * s, off * c  # foot point s * n
    t_lo = np.full(views.shape, -np.inf)
    t_hi = np.full(views.shape, np.inf)
    miss = np.zeros(views.shape, dtype=bool)
    for p, d in ((px, c), (py, s)):
        par = d == 0.0
        miss |= par & (np.abs(p) >= 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (-1.0 - p) / d
            b = (1.0 - p) / d
        lo = np.where(par, -np.inf, np.minimum(a, b))
        hi = np.where(par, np.inf, np.maximum(a, b))
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)
    chord = t_hi - t_lo
    hit = ~miss & (chord > 0)
    chord = np.where(hit, chord, 0.0)
    count = np.where(hit, np.floor(chord / geometry.step + 1e-9).astype(int) + 1, 0)
    return px, py, c, s, np.where(hit, t_lo, 0.0), chord, count


@dataclass
class RaySamples:
    """Flattened sample coordinates for a batch of rays."""

    coords: np.ndarray  # (S, 2) in Omega
    ray_index: np.ndarray  # (S,) position of the owning ray within the batch
    counts: np.ndarray  # (R,)
    step_cm: float

    @property
    def n_rays(self) -> int:
        return self.counts.size

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    def adjacent_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Indices (a, b) of consecutive samples on the same ray."""
        s = self.ray_index
        same = s[1:] == s[:-1]
        a = np.nonzero(same)[0]
        return a, a + 1


def sample_rays(geometry: Geometry, ray_ids) -> RaySamples:
    """Sample points for rays given as flat ids ``view * n_bins + bin``."""
    ray_ids = np.asarray(ray_ids, dtype=int).ravel()
    views, bins = np.divmod(ray_ids, geometry.n_bins)
    px, py, c, s, t0, _, count = _chords(geometry, views, bins)
    total = int(count.sum())
    owner = np.repeat(np.arange(ray_ids.size), count)
    starts = np.concatenate([[0], np.cumsum(count)[:-1]])
    k = np.arange(total) - np.repeat(starts, count)
    t = t0[owner] + k * geometry.step
    coords = np.empty((total, 2))
    coords[:, 0] = px[owner] + t * c[owner]
    coords[:, 1] = py[owner] + t * s[owner]
    np.clip(coords, -1.0, 1.0, out=coords)
    return RaySamples(coords, owner, count, geometry.sample_step)


def trace_ray(geometry: Geometry, view: int, bin: int) -> np.ndarray:
    """Ordered sample coordinates (K, 2) in Omega of one ray; empty if it misses."""
    if not (0 <= view < geometry.n_views and 0 <= bin < geometry.n_bins):
        raise IndexError(f"ray ({view}, {bin}) outside geometry")
    return sample_rays(geometry, [view * geometry.n_bins + bin]).coords


def chord_length(geometry: Geometry, view: int, bin: int) -> float:
    """Length (Omega units) of the ray's intersection with Omega."""
    return float(_chords(geometry, np.array([view]), np.array([bin]))[5][0])


def pixel_index(coords: np.ndarray, width: int, height: int) -> np.ndarray:
    """Flat nearest-pixel index (row-major) of Omega coordinates."""
    ix = np.clip(np.floor((coords[:, 0] + 1.0) * (width / 2.0)).astype(int), 0, width - 1)
    iy = np.clip(np.floor((coords[:, 1] + 1.0) * (height / 2.0)).astype(int), 0, height - 1)
    return iy * width + ix


def segment_sum(values: np.ndarray, samples: RaySamples) -> np.ndarray:
    """Per-ray sums of per-sample values (1-D or (S, M)); empty rays give zeros."""
    n = samples.n_rays
    if values.ndim == 1:
        return np.bincount(samples.ray_index, weights=values, minlength=n)
    return np.stack(
        [np.bincount(samples.ray_index, weights=values[:, j], minlength=n) for j in range(values.shape[1])],
        axis=1,
    ).reshape(n, values.shape[1])


def path_lengths(source, samples: RaySamples) -> np.ndarray:
    """Per-ray material path lengths p_j = step * sum alpha_j(x), in cm.

    ``source`` is a FractionGrid (nearest-pixel lookup) or a callable mapping
    (S, 2) Omega coordinates to (S, M) fractions.
    """
    if isinstance(source, FractionGrid):
        m = source.n_materials
        if samples.coords.shape[0] == 0:
            return np.zeros((samples.n_rays, m))
        idx = pixel_index(samples.coords, source.width, source.height)
        alpha = source.data.reshape(-1, m)[idx]
    else:
        alpha = np.asarray(source(samples.coords))
    return samples.step_cm * segment_sum(alpha, samples)


def system_matrix(geometry: Geometry, width: int, height: int, ray_ids=None) -> sp.csr_matrix:
    """Sparse (rays x pixels) matrix with p = A @ alpha under nearest-pixel lookup."""
    if ray_ids is None:
        ray_ids = np.arange(geometry.n_rays)
    samples = sample_rays(geometry, ray_ids)
    cols = pixel_index(samples.coords, width, height)
    data = np.full(cols.size, geometry.sample_step)
    a = sp.coo_matrix((data, (samples.ray_index, cols)), shape=(len(ray_ids), width * height))
    return a.tocsr()  # duplicates summed


# -- forward model -----------------------------------------------------------------


def transmission(mset: MaterialSet, spectrum_weights: np.ndarray, paths: np.ndarray):
    """Energy-resolved factors T (..., L) and spectrum-weighted transmission I (...)."""
    t = np.exp(-np.asarray(paths) @ mset.lac_matrix)
    return t, t @ spectrum_weights


def forward_project(mset: MaterialSet, spectrum: Spectrum, paths, floor: float = TRANSMISSION_FLOOR,
                    return_saturation: bool = False):
    """rho = -ln sum_k eta(E_k) exp(-sum_j mu_j(E_k) p_j), for paths of shape (..., M)."""
    weights = spectrum.weights if isinstance(spectrum, Spectrum) else np.asarray(spectrum)
    _, i = transmission(mset, weights, paths)
    saturated = i < floor
    rho = -np.log(np.maximum(i, floor))
    if return_saturation:
        return rho, saturated
    return rho


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = True
    i0: float = 1e5  # photons per ray

    def __post_init__(self):
        if self.i0 <= 0:
            raise ValueError("I0 must be positive")


@dataclass
class Sinogram:
    geometry: Geometry
    values: np.ndarray  # (n_views, n_bins)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        g = self.geometry
        if self.values.shape != (g.n_views, g.n_bins):
            raise ValueError(f"sinogram shape {self.values.shape} != ({g.n_views}, {g.n_bins})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram values must be finite")

    def undersample(self, factor: int) -> "Sinogram":
        """Keep every ``factor``-th view; still uniform over [0, pi)."""
        return Sinogram(self.geometry.undersample(factor), self.values[::factor].copy(),
                        {**self.meta, "undersample": factor})

    def write(self, path) -> None:
        header = {**self.geometry.to_dict(), **self.meta}
        with open(path, "w") as fh:
            for k in sorted(header):
                fh.write(f"# {k}: {header[k]}\n")
            for row in self.values:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def read(cls, path) -> "Sinogram":
        import yaml

        header, rows = {}, []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].partition(":")
                    header[k.strip()] = yaml.safe_load(v.strip())
                elif line.strip():
                    rows.append([float(x) for x in line.split(",")])
        gkeys = ("n_views", "n_bins", "bin_spacing", "sample_step", "scale")
        geometry = Geometry(**{k: header.pop(k) for k in gkeys})
        return cls(geometry, np.array(rows), header)


def worker_count() -> int:
    return max(1, int(os.environ.get("SPECTROMIX_THREADS", "1")))


def acquire(grid: FractionGrid, mset: MaterialSet, spectrum: Spectrum, geometry: Geometry,
            noise: NoiseConfig | None = None, seed: int = 0, floor: float = TRANSMISSION_FLOOR) -> Sinogram:
    """Simulate a polychromatic scan with optional Poisson counting noise.

    ``floor`` clamps the noiseless transmitted fraction before the log (0 turns
    the clamp off). Each ray draws from its own generator seeded by (seed, view, bin), so the
    result does not depend on how rays are split across workers.
    """
    if tuple(grid.materials) != tuple(mset.names):
        raise ValueError(f"grid materials {grid.materials} != material set {mset.names}")
    a = system_matrix(geometry, grid.width, grid.height)
    paths = a @ grid.data.reshape(-1, grid.n_materials)
    _, i_frac = transmission(mset, spectrum.weights, paths)
    meta = {"seed": int(seed)}
    if noise is None or not noise.enabled:
        rho = -np.log(np.maximum(i_frac, floor))
        meta.update(noise=False)
    else:
        expected = noise.i0 * i_frac
        n_bins = geometry.n_bins

        def draw(views):
            return [
                np.random.default_rng([int(seed), v, b]).poisson(expected[v * n_bins + b])
                for v in views
                for b in range(n_bins)
            ]

        workers = min(worker_count(), geometry.n_views)
        blocks = np.array_split(np.arange(geometry.n_views), workers)
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                parts = list(ex.map(draw, blocks))
        else:
            parts = [draw(blocks[0])]
        counts = np.concatenate([np.asarray(p, dtype=float) for p in parts])
        rho = -np.log(np.maximum(counts, 1.0) / noise.i0)
        meta.update(noise=True, i0=float(noise.i0))
    return Sinogram(geometry, rho.reshape(geometry.n_views, geometry.n_bins), meta)


def linear_projection(image: np.ndarray, geometry: Geometry) -> Sinogram:
    """Line integrals of a scalar image (1/cm) under the same sampling."""
    h, w = image.shape
    a = system_matrix(geometry, w, h)
    return Sinogram(geometry, (a @ image.ravel()).reshape(geometry.n_views, geometry.n_bins))


# -- filtered backprojection ------------------------------------------------------


def ramp_filter(sinogram: np.ndarray, spacing: float) -> np.ndarray:
    """Ram-Lak filtering along detector bins by zero-padded FFT convolution."""
    n_bins = sinogram.shape[1]
    size = int(2 ** math.ceil(math.log2(2 * n_bins)))
    k = np.arange(-(size // 2), size // 2)
    kernel = np.zeros(size)
    kernel[k == 0] = 1.0 / (4.0 * spacing**2)
    odd = k % 2 == 1
    kernel[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    kernel = np.fft.ifftshift(kernel)
    padded = np.zeros((sinogram.shape[0], size))
    padded[:, :n_bins] = sinogram
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * np.fft.fft(kernel)[None, :], axis=1))
    return filtered[:, :n_bins] * spacing


def fbp_reconstruct(sinogram: Sinogram, out_size: int) -> np.ndarray:
    """Ramp-filtered backprojection to an (out_size, out_size) image in 1/cm."""
    g = sinogram.geometry
    q = ramp_filter(sinogram.values, g.bin_spacing)
    centers = -1.0 + (2.0 * np.arange(out_size) + 1.0) / out_size
    xx, yy = np.meshgrid(centers, centers)
    offsets = g.offsets
    image = np.zeros((out_size, out_size))
    for v, theta in enumerate(g.angles):
        c, s = _direction(np.array(theta))
        proj = -xx * s + yy * c
        image += np.interp(proj, offsets, q[v], left=0.0, right=0.0)
    return image * np.pi / g.n_views
