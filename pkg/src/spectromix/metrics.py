"""Decomposition RMSE, ROI tables and report export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import FractionGrid, PhantomSpec, roi_stats, roi_truth
from .spectra import Spectrum, spectrum_error


def rmse_components(truth: FractionGrid, estimate: FractionGrid) -> np.ndarray:
    """Per-material root-mean-square pixel error."""
    if truth.data.shape != estimate.data.shape:
        raise ValueError(f"grid shapes differ: {truth.data.shape} vs {estimate.data.shape}")
    diff = truth.data - estimate.data
    return np.sqrt(np.mean(diff * diff, axis=(0, 1)))


def rmse(truth: FractionGrid, estimate: FractionGrid) -> float:
    """Mean over materials of the per-material RMSE."""
    return float(np.mean(rmse_components(truth, estimate)))


@dataclass
class RoiRow:
    label: str
    material: str
    truth: float
    mean: float
    std: float


@dataclass
class EvalReport:
    name: str
    materials: tuple[str, ...]
    rmse_components: np.ndarray
    rmse: float
    rois: list[RoiRow] = field(default_factory=list)
    spectrum_error: float | None = None
    initial_spectrum_error: float | None = None
    runtime: float | None = None

    def rows(self):
        for r in self.rois:
            yield [self.name, r.label, r.material, r.truth, r.mean, r.std]


def report(truth: FractionGrid, estimate: FractionGrid, spec: PhantomSpec,
           spectra: tuple[Spectrum, Spectrum] | None = None, runtime: float | None = None,
           name: str = "estimate", initial: Spectrum | None = None) -> EvalReport:
    """Assemble RMSE, ROI mean/STD rows and the spectrum error.

    ``spectra`` is (estimate, reference). ROI rows list every material whose
    true fraction in that ROI is nonzero, as the comparison tables do.
    """
    comps = rmse_components(truth, estimate)
    rows = []
    for label in spec.labels:
        target = roi_truth(spec, label)
        mean, std = roi_stats(estimate, label, spec)
        for j, mat in enumerate(estimate.materials):
            if target[j] > 0:
                rows.append(RoiRow(label, mat, float(target[j]), float(mean[j]), float(std[j])))
    se = init_se = None
    if spectra is not None:
        se = spectrum_error(*spectra)
        if initial is not None:
            init_se = spectrum_error(initial, spectra[1])
    return EvalReport(name, tuple(estimate.materials), comps, float(comps.mean()), rows, se, init_se, runtime)


def write_report_csv(reports: list[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "roi", "material", "truth", "mean", "std"])
        for rep in reports:
            for row in rep.rows():
                w.writerow(row[:3] + [f"{row[3]:g}", f"{row[4]:.4f}", f"{row[5]:.4f}"])
        w.writerow([])
        w.writerow(["method", "rmse", "spectrum_error", "initial_spectrum_error", "runtime_s"])
        for rep in reports:
            w.writerow([rep.name, f"{rep.rmse:.4f}", _fmt(rep.spectrum_error), _fmt(rep.initial_spectrum_error),
                        _fmt(rep.runtime, "{:.1f}")])


def _fmt(v, pattern="{:.4f}"):
    return "" if v is None else pattern.format(v)


def format_table(reports: list[EvalReport]) -> str:
    """Text table: ROI, Material, Truth, then Mean±STD for each method, then RMSE."""
    if not reports:
        return ""
    names = [r.name for r in reports]
    head = f"{'ROI':<6}{'Material':<10}{'Truth':>7}" + "".join(f"{n:>20}" for n in names)
    lines = [head, "-" * len(head)]
    for i, row in enumerate(reports[0].rois):
        cells = "".join(f"{rep.rois[i].mean:>11.4f}±{rep.rois[i].std:<8.4f}" for rep in reports)
        lines.append(f"{'#' + row.label:<6}{row.material:<10}{row.truth:>7g}{cells}")
    lines.append("-" * len(head))
    lines.append(f"{'RMSE':<23}" + "".join(f"{rep.rmse:>20.4f}" for rep in reports))
    if any(rep.spectrum_error is not None for rep in reports):
        lines.append(f"{'Spectrum l1':<23}" + "".join(f"{_fmt(rep.spectrum_error):>20}" for rep in reports))
    if any(rep.runtime is not None for rep in reports):
        lines.append(f"{'Time (s)':<23}" + "".join(f"{_fmt(rep.runtime, '{:.1f}'):>20}" for rep in reports))
    return "\n".join(lines)


def write_report_text(reports: list[EvalReport], path) -> None:
    Path(path).write_text(format_table(reports) + "\n")


def sweep_table(rows: list[tuple[str, float, float | None, float | None]]) -> str:
    """Undersampling table: projections, RMSE, spectrum error, time."""
    lines = [f"{'# Projections':<22}{'RMSE':>10}{'Spectrum':>12}{'Time (s)':>10}"]
    for label, r, se, t in rows:
        lines.append(f"{label:<22}{r:>10.4f}{_fmt(se):>12}{_fmt(t, '{:.1f}'):>10}")
    return "\n".join(lines)
