"""Basis materials: energy grid, attenuation table ingestion and mixture LAC.

Tables are CSV files with two header lines (``# material: <name>`` and
``# density_g_cm3: <float>``) followed by ``energy_keV,mac_cm2_g`` rows in
ascending energy. Other ``#`` lines and a column-name row are tolerated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

SIMPLEX_TOL = 1e-6


class TableParseError(ValueError):
    """Malformed attenuation table."""


class TableRangeError(ValueError):
    """Requested energies fall outside the table span."""


class SimplexError(ValueError):
    """Fraction vector is not on the probability simplex."""


@dataclass(frozen=True)
class EnergyGrid:
    """Uniformly spaced photon energies in keV."""

    energies: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        if e.ndim != 1 or e.size < 2:
            raise ValueError("energy grid needs at least two energies")
        if np.any(e <= 0):
            raise ValueError("energies must be positive")
        steps = np.diff(e)
        if np.any(steps <= 0):
            raise ValueError("energies must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("energy grid must be uniformly spaced")
        e.setflags(write=False)
        object.__setattr__(self, "energies", e)

    @classmethod
    def uniform(cls, start: float = 10.0, stop: float = 120.0, step: float = 1.0) -> "EnergyGrid":
        n = int(round((stop - start) / step)) + 1
        return cls(start + step * np.arange(n))

    @property
    def bin_width(self) -> float:
        return float(self.energies[1] - self.energies[0])

    def __len__(self) -> int:
        return self.energies.size

    def __eq__(self, other):
        if not isinstance(other, EnergyGrid):
            return NotImplemented
        return self.energies.shape == other.energies.shape and bool(np.all(self.energies == other.energies))

    def __hash__(self):
        return hash(self.energies.tobytes())


@dataclass(frozen=True)
class Material:
    name: str
    density: float
    lac: np.ndarray  # 1/cm on the owning grid

    def __post_init__(self):
        lac = np.asarray(self.lac, dtype=float)
        if self.density <= 0:
            raise ValueError(f"{self.name}: density must be positive")
        if np.any(lac < 0) or not np.all(np.isfinite(lac)):
            raise ValueError(f"{self.name}: LAC values must be finite and nonnegative")
        lac.setflags(write=False)
        object.__setattr__(self, "lac", lac)


@dataclass(frozen=True)
class MaterialSet:
    grid: EnergyGrid
    materials: tuple[Material, ...]
    lac_matrix: np.ndarray = field(init=False, repr=False)  # (M, L)

    def __post_init__(self):
        mats = tuple(self.materials)
        if len(mats) < 2:
            raise ValueError("a material set needs at least two materials")
        names = [m.name for m in mats]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate material names: {names}")
        for m in mats:
            if m.lac.shape != (len(self.grid),):
                raise ValueError(f"{m.name}: LAC length {m.lac.size} != grid length {len(self.grid)}")
        mat = np.stack([m.lac for m in mats])
        mat.setflags(write=False)
        object.__setattr__(self, "materials", mats)
        object.__setattr__(self, "lac_matrix", mat)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.materials]

    def __len__(self) -> int:
        return len(self.materials)

    def index(self, name: str) -> int:
        return self.names.index(name)


def _parse_table(path: Path) -> tuple[str, float, np.ndarray, np.ndarray]:
    name = None
    density = None
    energies, macs = [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition(":")
                key = key.strip()
                if not sep:
                    continue
                if key == "material":
                    name = value.strip()
                elif key == "density_g_cm3":
                    try:
                        density = float(value)
                    except ValueError:
                        raise TableParseError(f"{path}:{lineno}: bad density {value.strip()!r}") from None
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TableParseError(f"{path}:{lineno}: expected 'energy_keV,mac_cm2_g', got {line!r}")
            try:
                e, mac = float(parts[0]), float(parts[1])
            except ValueError:
                if not energies and not parts[0].strip()[:1].isdigit():
                    continue  # column-name row
                raise TableParseError(f"{path}:{lineno}: non-numeric row {line!r}") from None
            if energies and e <= energies[-1]:
                raise TableParseError(f"{path}:{lineno}: energies must ascend")
            if mac < 0:
                raise TableParseError(f"{path}:{lineno}: negative attenuation")
            energies.append(e)
            macs.append(mac)
    if name is None:
        raise TableParseError(f"{path}: missing '# material:' header")
    if density is None:
        raise TableParseError(f"{path}: missing '# density_g_cm3:' header")
    if len(energies) < 2:
        raise TableParseError(f"{path}: need at least two data rows")
    return name, density, np.array(energies), np.array(macs)


def ingest_attenuation_table(path, grid: EnergyGrid) -> Material:
    """Read a mass-attenuation CSV and return LAC (1/cm) on ``grid``.

    MAC is linearly interpolated in energy, then scaled by density.
    """
    name, density, e_tab, mac_tab = _parse_table(Path(path))
    lo, hi = grid.energies[0], grid.energies[-1]
    if lo < e_tab[0] or hi > e_tab[-1]:
        raise TableRangeError(
            f"{path}: grid [{lo:g}, {hi:g}] keV outside table span [{e_tab[0]:g}, {e_tab[-1]:g}] keV"
        )
    mac = np.interp(grid.energies, e_tab, mac_tab)
    return Material(name=name, density=density, lac=density * mac)


def data_dir() -> Path:
    return Path(str(resources.files("spectromix") / "data" / "attenuation"))


def load_material_set(names: Sequence[str], grid: EnergyGrid, table_dir=None) -> MaterialSet:
    """Build a MaterialSet from ``<table_dir>/<name>.csv`` (shipped tables by default)."""
    table_dir = Path(table_dir) if table_dir is not None else data_dir()
    return MaterialSet(grid, tuple(ingest_attenuation_table(table_dir / f"{n}.csv", grid) for n in names))


def check_simplex(alpha, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate fraction vectors along the last axis; returns them as an array."""
    a = np.asarray(alpha, dtype=float)
    if np.any(a < -tol) or np.any(a > 1 + tol):
        raise SimplexError("fractions must lie in [0, 1]")
    if np.any(np.abs(a.sum(axis=-1) - 1.0) > tol):
        raise SimplexError("fractions must sum to one")
    return a


def mixture_lac(mset: MaterialSet, alpha, e_index: int) -> float:
    """LAC of a volume-fraction mixture at one grid energy: sum_i alpha_i mu_i(E)."""
    a = check_simplex(alpha)
    if a.shape != (len(mset),):
        raise SimplexError(f"expected {len(mset)} fractions, got shape {a.shape}")
    return float(a @ mset.lac_matrix[:, e_index])


def mixture_lac_image(mset: MaterialSet, fractions: np.ndarray, e_index: int) -> np.ndarray:
    """Per-pixel mixture LAC for an (..., M) fraction array."""
    return np.asarray(fractions) @ mset.lac_matrix[:, e_index]
