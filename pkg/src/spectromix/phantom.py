"""Procedural 2D phantoms built from labeled ellipses and rectangles.

Coordinates of shapes are in cm with the origin at the image center; x grows
with the column index and y with the row index. Pixel membership is decided
at pixel centers and later shapes overwrite earlier ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .materials import SIMPLEX_TOL, SimplexError


class PhantomConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Shape:
    kind: str  # "ellipse" | "rectangle"
    center: tuple[float, float]  # cm
    axes: tuple[float, float]  # semi-axes (ellipse) or half-extents (rectangle), cm
    alpha: tuple[float, ...]
    roi_label: str
    rotation: float = 0.0  # radians

    def __post_init__(self):
        if self.kind not in ("ellipse", "rectangle"):
            raise PhantomConfigError(f"unknown shape kind {self.kind!r}")
        if min(self.axes) <= 0:
            raise PhantomConfigError(f"shape {self.roi_label!r}: axes must be positive")
        a = np.asarray(self.alpha, dtype=float)
        if np.any(a < 0) or np.any(a > 1) or abs(a.sum() - 1) > SIMPLEX_TOL:
            raise SimplexError(f"shape {self.roi_label!r}: alpha {self.alpha} is not on the simplex")
        object.__setattr__(self, "alpha", tuple(float(v) for v in a))

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.center[0], y - self.center[1]
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        u = (c * dx + s * dy) / self.axes[0]
        v = (-s * dx + c * dy) / self.axes[1]
        if self.kind == "ellipse":
            return u * u + v * v <= 1.0
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)


@dataclass(frozen=True)
class PhantomSpec:
    width: int
    height: int
    pixel_size: float  # cm
    materials: tuple[str, ...]
    shapes: tuple[Shape, ...] = ()
    background: str = "air"
    name: str = "phantom"

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise PhantomConfigError("phantom must be at least 8x8 pixels")
        if self.pixel_size <= 0:
            raise PhantomConfigError("pixel_size must be positive")
        if self.background not in self.materials:
            raise PhantomConfigError(f"background material {self.background!r} not in {self.materials}")
        object.__setattr__(self, "materials", tuple(self.materials))
        object.__setattr__(self, "shapes", tuple(self.shapes))

    @property
    def labels(self) -> list[str]:
        return list(dict.fromkeys(s.roi_label for s in self.shapes))

    def with_resolution(self, width: int, height: int | None = None) -> "PhantomSpec":
        """Same physical object sampled on a different pixel grid."""
        height = width if height is None else height
        return PhantomSpec(
            width, height, self.pixel_size * self.width / width, self.materials, self.shapes,
            self.background, self.name,
        )


@dataclass(frozen=True)
class FractionGrid:
    """Per-pixel volume fractions, ``data[row, col, material]``."""

    data: np.ndarray
    pixel_size: float
    materials: tuple[str, ...]

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 3 or d.shape[2] != len(self.materials):
            raise ValueError(f"fraction data shape {d.shape} inconsistent with {len(self.materials)} materials")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "materials", tuple(self.materials))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_materials(self) -> int:
        return self.data.shape[2]

    def simplex_violation(self) -> float:
        d = self.data
        return float(max(np.abs(d.sum(axis=2) - 1).max(), max(0.0, -d.min()), max(0.0, d.max() - 1)))

    def material(self, name: str) -> np.ndarray:
        return self.data[:, :, self.materials.index(name)]


def pixel_centers_cm(width: int, height: int, pixel_size: float) -> tuple[np.ndarray, np.ndarray]:
    x = (np.arange(width) - (width - 1) / 2.0) * pixel_size
    y = (np.arange(height) - (height - 1) / 2.0) * pixel_size
    return np.meshgrid(x, y)  # (H, W) each


def ownership(spec: PhantomSpec) -> np.ndarray:
    """Index of the shape owning each pixel (painter's order), -1 for background."""
    xx, yy = pixel_centers_cm(spec.width, spec.height, spec.pixel_size)
    owner = np.full((spec.height, spec.width), -1, dtype=int)
    for i, shape in enumerate(spec.shapes):
        owner[shape.contains(xx, yy)] = i
    return owner


def rasterize(spec: PhantomSpec) -> FractionGrid:
    m = len(spec.materials)
    for shape in spec.shapes:
        if len(shape.alpha) != m:
            raise PhantomConfigError(
                f"shape {shape.roi_label!r} has {len(shape.alpha)} fractions, phantom has {m} materials"
            )
    data = np.zeros((spec.height, spec.width, m))
    data[:, :, spec.materials.index(spec.background)] = 1.0
    owner = ownership(spec)
    for i, shape in enumerate(spec.shapes):
        data[owner == i] = shape.alpha
    return FractionGrid(data, spec.pixel_size, spec.materials)


def roi_mask(spec: PhantomSpec, label: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    if label not in spec.labels:
        raise KeyError(f"unknown ROI label {label!r}; have {spec.labels}")
    if shape is not None and shape != (spec.height, spec.width):
        spec = spec.with_resolution(shape[1], shape[0])
    owner = ownership(spec)
    ids = [i for i, s in enumerate(spec.shapes) if s.roi_label == label]
    return np.isin(owner, ids)


def roi_stats(grid: FractionGrid, label: str, reference: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-material mean and population STD over the pixels owned by ``label``."""
    mask = roi_mask(reference, label, (grid.height, grid.width))
    vals = grid.data[mask]
    return vals.mean(axis=0), vals.std(axis=0)


def roi_truth(spec: PhantomSpec, label: str) -> np.ndarray:
    for s in spec.shapes:
        if s.roi_label == label:
            return np.asarray(s.alpha)
    raise KeyError(f"unknown ROI label {label!r}")


# -- files ---------------------------------------------------------------------


def spec_from_dict(d: dict) -> PhantomSpec:
    materials = tuple(d["materials"])
    shapes = []
    for s in d.get("shapes", []):
        alpha = s["alpha"]
        if isinstance(alpha, dict):
            unknown = set(alpha) - set(materials)
            if unknown:
                raise PhantomConfigError(f"shape {s.get('roi')!r}: unknown materials {sorted(unknown)}")
            alpha = [float(alpha.get(m, 0.0)) for m in materials]
        shapes.append(
            Shape(
                kind=s["kind"],
                center=tuple(s.get("center", (0.0, 0.0))),
                axes=tuple(s["axes"]),
                alpha=tuple(alpha),
                roi_label=str(s["roi"]),
                rotation=float(s.get("rotation", 0.0)),
            )
        )
    return PhantomSpec(
        width=int(d["width"]),
        height=int(d.get("height", d["width"])),
        pixel_size=float(d["pixel_size"]),
        materials=materials,
        shapes=tuple(shapes),
        background=d.get("background", "air"),
        name=d.get("name", "phantom"),
    )


def spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "name": spec.name,
        "width": spec.width,
        "height": spec.height,
        "pixel_size": spec.pixel_size,
        "materials": list(spec.materials),
        "background": spec.background,
        "shapes": [
            {
                "kind": s.kind,
                "roi": s.roi_label,
                "center": list(s.center),
                "axes": list(s.axes),
                "rotation": s.rotation,
                "alpha": list(s.alpha),
            }
            for s in spec.shapes
        ],
    }


def load_phantom_spec(path) -> PhantomSpec:
    with open(path) as fh:
        return spec_from_dict(yaml.safe_load(fh))


def to_uint8(image: np.ndarray, vmax: float = 1.0) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) / vmax * 255.0), 0, 255).astype(np.uint8)


def save_gray_png(image: np.ndarray, path, vmax: float = 1.0) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image, vmax)[::-1]).save(path)  # row 0 is the bottom edge


def export_grid(grid: FractionGrid, out_dir, prefix: str = "alpha") -> list[Path]:
    """One CSV and one 8-bit PNG per material."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for j, name in enumerate(grid.materials):
        csv_path = out_dir / f"{prefix}_{name}.csv"
        np.savetxt(csv_path, grid.data[:, :, j], delimiter=",", fmt="%.17g")
        png_path = out_dir / f"{prefix}_{name}.png"
        save_gray_png(grid.data[:, :, j], png_path)
        written += [csv_path, png_path]
    return written


def import_grid(out_dir, materials: Sequence[str], pixel_size: float, prefix: str = "alpha") -> FractionGrid:
    out_dir = Path(out_dir)
    layers = [np.loadtxt(out_dir / f"{prefix}_{m}.csv", delimiter=",", ndmin=2) for m in materials]
    return FractionGrid(np.stack(layers, axis=2), pixel_size, tuple(materials))


# -- stock phantoms --------------------------------------------------------------

XCAT_MATERIALS = ("adipose", "muscle", "bone", "air")


def _alpha(**kw) -> dict:
    return kw


def phantom_a(width: int = 64, fov_cm: float = 32.0) -> PhantomSpec:
    """Torso-like analogue of phantom A: fat body, soft-tissue core, bones, lungs."""
    shapes = [
        {"kind": "ellipse", "roi": "1", "axes": [14.0, 10.0], "alpha": _alpha(adipose=1.0)},
        {"kind": "ellipse", "roi": "2", "axes": [11.0, 7.5], "alpha": _alpha(adipose=0.5, muscle=0.5)},
        {"kind": "ellipse", "roi": "4", "center": [-5.0, 1.0], "axes": [3.5, 4.5], "alpha": _alpha(air=1.0)},
        {"kind": "ellipse", "roi": "4", "center": [5.0, 1.0], "axes": [3.5, 4.5], "alpha": _alpha(air=1.0)},
        {"kind": "ellipse", "roi": "3", "center": [0.0, -5.0], "axes": [2.0, 1.8], "alpha": _alpha(bone=1.0)},
        {"kind": "rectangle", "roi": "3", "center": [0.0, 5.5], "axes": [2.5, 0.8], "alpha": _alpha(bone=1.0)},
    ]
    d = {"name": "A", "width": width, "pixel_size": fov_cm / width, "materials": list(XCAT_MATERIALS), "shapes": shapes}
    return spec_from_dict(d)


def phantom_b(width: int = 64, fov_cm: float = 32.0) -> PhantomSpec:
    """Abdomen-like analogue of phantom B: adds a 0.3/0.7 organ region."""
    shapes = [
        {"kind": "ellipse", "roi": "1", "axes": [14.0, 10.5], "alpha": _alpha(adipose=1.0)},
        {"kind": "ellipse", "roi": "2", "axes": [11.5, 8.0], "alpha": _alpha(adipose=0.5, muscle=0.5)},
        {"kind": "ellipse", "roi": "4", "center": [-4.0, 2.0], "axes": [5.0, 3.5], "rotation": 0.3,
         "alpha": _alpha(adipose=0.3, muscle=0.7)},
        {"kind": "ellipse", "roi": "5", "center": [5.5, 2.5], "axes": [2.2, 2.0], "alpha": _alpha(air=1.0)},
        {"kind": "ellipse", "roi": "3", "center": [0.0, -5.5], "axes": [2.0, 1.8], "alpha": _alpha(bone=1.0)},
        {"kind": "ellipse", "roi": "3", "center": [-7.5, -4.0], "axes": [1.2, 1.2], "alpha": _alpha(bone=1.0)},
        {"kind": "ellipse", "roi": "3", "center": [7.5, -4.0], "axes": [1.2, 1.2], "alpha": _alpha(bone=1.0)},
    ]
    d = {"name": "B", "width": width, "pixel_size": fov_cm / width, "materials": list(XCAT_MATERIALS), "shapes": shapes}
    return spec_from_dict(d)
