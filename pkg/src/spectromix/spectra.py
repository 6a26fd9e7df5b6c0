"""Candidate spectrum library and the SoftMax-weighted spectrum model."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .materials import EnergyGrid, Material

NORM_TOL = 1e-9


@dataclass(frozen=True)
class Spectrum:
    """Normalized photon-fraction per energy bin."""

    grid: EnergyGrid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.grid),):
            raise ValueError(f"spectrum length {w.shape} does not match grid length {len(self.grid)}")
        if np.any(w < 0):
            raise ValueError("spectrum weights must be nonnegative")
        if abs(w.sum() - 1.0) > NORM_TOL:
            raise ValueError(f"spectrum must sum to one (got {w.sum():.12g})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def monochromatic(cls, grid: EnergyGrid, e_index: int) -> "Spectrum":
        w = np.zeros(len(grid))
        w[e_index] = 1.0
        return cls(grid, w)

    def mean_energy(self) -> float:
        return float(self.weights @ self.grid.energies)


@dataclass(frozen=True)
class SpectrumLibrary:
    grid: EnergyGrid
    spectra: tuple[Spectrum, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        spectra = tuple(self.spectra)
        if len(spectra) < 1:
            raise ValueError("library is empty")
        for s in spectra:
            if s.grid != self.grid:
                raise ValueError("library spectra must share the library grid")
        labels = tuple(self.labels) or tuple(str(i) for i in range(len(spectra)))
        if len(labels) != len(spectra):
            raise ValueError("one label per spectrum")
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.spectra)

    @property
    def matrix(self) -> np.ndarray:
        """(N, L) array of member spectra."""
        return np.stack([s.weights for s in self.spectra])

    def average(self) -> Spectrum:
        """Uniform-weight mixture; the solver's starting spectrum."""
        return Spectrum(self.grid, _renormalize(self.matrix.mean(axis=0)))


def _renormalize(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, 0.0, None)
    return w / w.sum()


def kramers(kvp: float, grid: EnergyGrid) -> np.ndarray:
    """Unnormalized Kramers bremsstrahlung shape (kVp - E)/E, zero above kVp."""
    e = grid.energies
    return np.where(e < kvp, (kvp - e) / e, 0.0)


def generate_library(
    kvp: float, filter_thicknesses: Sequence[float], grid: EnergyGrid, filter_material: Material
) -> SpectrumLibrary:
    """Kramers spectra hardened by aluminum filters of the given thicknesses (mm)."""
    if kvp <= grid.energies[0]:
        raise ValueError(f"kVp {kvp} must exceed the grid minimum {grid.energies[0]}")
    if kvp > grid.energies[-1] + grid.bin_width:
        raise ValueError(f"kVp {kvp} beyond the grid span")
    t = np.asarray(filter_thicknesses, dtype=float)
    if np.any(t < 0):
        raise ValueError("filter thicknesses must be nonnegative")
    if len(np.unique(t)) != t.size:
        raise ValueError("filter thicknesses must be distinct")
    base = kramers(kvp, grid)
    spectra = []
    for mm in t:
        w = base * np.exp(-filter_material.lac * mm * 0.1)
        spectra.append(Spectrum(grid, w / w.sum()))
    labels = tuple(f"{mm:g}mm" for mm in t)
    return SpectrumLibrary(grid, tuple(spectra), labels)


def softmax(gamma: np.ndarray) -> np.ndarray:
    g = np.asarray(gamma, dtype=float)
    z = np.exp(g - g.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_jacobian_apply(gamma: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of SoftMax: s_i (u_i - sum_j s_j u_j)."""
    s = softmax(gamma)
    u = np.asarray(upstream, dtype=float)
    return s * (u - np.sum(s * u, axis=-1, keepdims=True))


def mixture_weights(library: SpectrumLibrary, gamma) -> np.ndarray:
    g = np.asarray(gamma, dtype=float)
    if g.shape != (len(library),):
        raise ValueError(f"gamma has shape {g.shape}, library has {len(library)} members")
    return softmax(g)


def compose_spectrum(library: SpectrumLibrary, gamma) -> Spectrum:
    """eta(E) = sum_i SoftMax(gamma)_i eta_i(E)."""
    w = mixture_weights(library, gamma) @ library.matrix
    # convex combination of normalized members; only rounding separates it from 1
    return Spectrum(library.grid, w / w.sum())


def spectrum_error(estimate: Spectrum, reference: Spectrum) -> float:
    """Sum of absolute differences between two spectra on the same grid."""
    if estimate.grid != reference.grid:
        raise ValueError("spectra live on different grids")
    return float(np.abs(estimate.weights - reference.weights).sum())


def write_spectrum_csv(spectrum: Spectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["energy_keV", "weight"])
        for e, v in zip(spectrum.grid.energies, spectrum.weights):
            w.writerow([f"{e:.10g}", repr(float(v))])


def read_spectrum_csv(path, grid: EnergyGrid | None = None) -> Spectrum:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    file_grid = EnergyGrid(rows[:, 0])
    if grid is not None and file_grid != grid:
        raise ValueError(f"{path}: energy grid does not match the configured grid")
    return Spectrum(grid or file_grid, rows[:, 1])


def write_library(library: SpectrumLibrary, out_dir, **manifest_extra) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    members = []
    for i, (label, s) in enumerate(zip(library.labels, library.spectra)):
        fname = f"spectrum_{i:02d}.csv"
        write_spectrum_csv(s, out_dir / fname)
        members.append({"index": i, "label": label, "file": fname})
    manifest = {"members": members, **manifest_extra}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_library(out_dir) -> SpectrumLibrary:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    spectra = [read_spectrum_csv(out_dir / m["file"]) for m in manifest["members"]]
    grid = spectra[0].grid
    return SpectrumLibrary(grid, tuple(spectra), tuple(m["label"] for m in manifest["members"]))
