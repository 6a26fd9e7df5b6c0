"""Command-line experiment runner.

    spectromix simulate    --config exp.yaml [--out DIR] [--seed N]
    spectromix reconstruct --config exp.yaml --variant tv|inr|fbp [--views N]
    spectromix evaluate    --config exp.yaml
    spectromix sweep       --config exp.yaml
    spectromix gen-library --config exp.yaml

All commands share one run directory (``out`` in the config, or ``--out``).
``simulate`` writes the ground truth, spectra and sinogram there; the other
commands read them back. Every command leaves a ``manifest.json`` with the
resolved config, seed, tool version and SHA-256 of its inputs and outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .materials import EnergyGrid, MaterialSet, data_dir, ingest_attenuation_table, load_material_set
from .metrics import EvalReport, format_table, report, rmse, sweep_table, write_report_csv
from .phantom import (
    XCAT_MATERIALS,
    FractionGrid,
    PhantomSpec,
    export_grid,
    import_grid,
    load_phantom_spec,
    phantom_a,
    phantom_b,
    rasterize,
    save_gray_png,
    spec_to_dict,
)
from .projector import Geometry, NoiseConfig, Sinogram, acquire, fbp_reconstruct
from .solver import (
    Problem,
    TrainConfig,
    TrainingDiverged,
    evaluate_grid,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_history,
)
from .spectra import (
    Spectrum,
    SpectrumLibrary,
    generate_library,
    read_spectrum_csv,
    spectrum_error,
    write_library,
    write_spectrum_csv,
)

log = logging.getLogger("spectromix")

TOOL = "spectromix"


class CliError(Exception):
    """User-facing failure: reported on stderr with a nonzero exit code."""


# -- configuration ------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    phantom: str = "A"  # "A", "B" or a phantom YAML path
    width: int = 64  # stock phantoms only
    fov_cm: float = 32.0  # stock phantoms only
    materials: list = field(default_factory=lambda: list(XCAT_MATERIALS))
    material_dir: str | None = None  # defaults to the packaged tables
    energy: dict = field(default_factory=lambda: {"start": 10.0, "stop": 120.0, "step": 1.0})
    library: dict = field(
        default_factory=lambda: {"kvp": 120.0, "thicknesses_mm": list(range(10)), "filter": "aluminum"}
    )
    true_spectrum: dict = field(default_factory=lambda: {"index": 3})  # or {"file": path}
    geometry: dict = field(default_factory=lambda: {"n_views": 90, "n_bins": None})
    noise: dict = field(default_factory=lambda: {"enabled": True, "i0": 1e5})
    tv: dict = field(default_factory=dict)  # TrainConfig overrides
    inr: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=lambda: {"factors": [1, 2, 3, 4], "variant": "tv"})
    out: str = "runs/experiment"
    base_dir: str = "."  # directory relative paths are resolved against

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise CliError(f"{path}: invalid YAML: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise CliError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.base_dir = str(path.resolve().parent)
        return cfg

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


@dataclass
class Setup:
    """Everything derived from a config before any data is produced."""

    config: ExperimentConfig
    grid: EnergyGrid
    mset: MaterialSet
    library: SpectrumLibrary
    spec: PhantomSpec
    geometry: Geometry
    inputs: dict  # path -> sha256


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_setup(cfg: ExperimentConfig) -> Setup:
    e = cfg.energy
    grid = EnergyGrid.uniform(e.get("start", 10.0), e.get("stop", 120.0), e.get("step", 1.0))
    table_dir = cfg.resolve(cfg.material_dir) if cfg.material_dir else data_dir()
    inputs = {}
    for name in list(cfg.materials) + [cfg.library.get("filter", "aluminum")]:
        p = table_dir / f"{name}.csv"
        if not p.is_file():
            raise CliError(f"attenuation table not found: {p}")
        inputs[f"tables/{name}.csv"] = sha256(p)
    mset = load_material_set(cfg.materials, grid, table_dir)
    filt = ingest_attenuation_table(table_dir / f"{cfg.library.get('filter', 'aluminum')}.csv", grid)
    library = generate_library(cfg.library.get("kvp", 120.0), cfg.library.get("thicknesses_mm", range(10)), grid, filt)

    if cfg.phantom in ("A", "B"):
        make = phantom_a if cfg.phantom == "A" else phantom_b
        spec = make(width=cfg.width, fov_cm=cfg.fov_cm)
    else:
        p = cfg.resolve(cfg.phantom)
        if not p.is_file():
            raise CliError(f"phantom spec not found: {p}")
        spec = load_phantom_spec(p)
        inputs["phantom"] = sha256(p)
    if tuple(spec.materials) != tuple(cfg.materials):
        raise CliError(f"phantom materials {spec.materials} differ from config materials {tuple(cfg.materials)}")
    geometry = Geometry.for_image(spec.width, spec.pixel_size, int(cfg.geometry.get("n_views", 90)),
                                  cfg.geometry.get("n_bins"))
    return Setup(cfg, grid, mset, library, spec, geometry, inputs)


def true_spectrum(setup: Setup) -> Spectrum:
    ts = setup.config.true_spectrum
    if "file" in ts:
        p = setup.config.resolve(ts["file"])
        if not p.is_file():
            raise CliError(f"true spectrum file not found: {p}")
        setup.inputs["true_spectrum"] = sha256(p)
        return read_spectrum_csv(p, setup.grid)
    idx = int(ts.get("index", 0))
    if not 0 <= idx < len(setup.library):
        raise CliError(f"true_spectrum index {idx} outside library of {len(setup.library)}")
    return setup.library.spectra[idx]


def train_config(cfg: ExperimentConfig, variant: str, width: int) -> TrainConfig:
    overrides = dict(cfg.tv if variant == "tv" else cfg.inr)
    base = TrainConfig.reference_tv() if variant == "tv" else TrainConfig.reference_inr()
    d = {**base.to_dict(), "width": width, "seed": cfg.seed, **overrides, "variant": variant}
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {variant} solver settings: {exc}") from exc


# -- manifests -------------------------------------------------------------------------


def write_manifest(run_dir: Path, command: str, cfg: ExperimentConfig, inputs: dict, outputs: list[Path],
                   extra: dict | None = None) -> Path:
    missing = [p for p in outputs if not p.is_file() or p.stat().st_size == 0]
    if missing:
        raise CliError(f"expected outputs missing or empty: {[str(p) for p in missing]}")
    manifest = {
        "tool": TOOL,
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": dict(sorted(inputs.items())),
        "outputs": {str(p.relative_to(run_dir)): sha256(p) for p in sorted(outputs)},
        **(extra or {}),
    }
    path = run_dir / "manifest.json" if command == "simulate" else run_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return path


def _write_yaml(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


# -- commands ---------------------------------------------------------------------------


def cmd_gen_library(cfg: ExperimentConfig, run_dir: Path) -> list[Path]:
    setup = build_setup(cfg)
    out = run_dir / "library"
    write_library(setup.library, out, kvp=cfg.library.get("kvp", 120.0),
                  thicknesses_mm=list(cfg.library.get("thicknesses_mm", range(10))),
                  filter=cfg.library.get("filter", "aluminum"))
    outputs = sorted(out.iterdir())
    write_manifest(run_dir, "gen-library", cfg, setup.inputs, outputs)
    return outputs


def noise_config(cfg: ExperimentConfig) -> NoiseConfig:
    n = cfg.noise
    return NoiseConfig(bool(n.get("enabled", True)), float(n.get("i0", 1e5)))


def simulate(setup: Setup) -> tuple[FractionGrid, Spectrum, Sinogram]:
    """Ground truth, true spectrum and acquired sinogram, in memory."""
    spectrum = true_spectrum(setup)
    truth = rasterize(setup.spec)
    sino = acquire(truth, setup.mset, spectrum, setup.geometry, noise_config(setup.config), seed=setup.config.seed)
    return truth, spectrum, sino


def cmd_simulate(cfg: ExperimentConfig, run_dir: Path) -> list[Path]:
    setup = build_setup(cfg)
    truth, spectrum, sino = simulate(setup)
    noise = noise_config(cfg)
    sino.meta["spectrum"] = "true_spectrum.csv"

    run_dir.mkdir(parents=True, exist_ok=True)
    outputs = [
        _write_yaml(run_dir / "config.yaml", cfg.to_dict()),
        _write_yaml(run_dir / "phantom.yaml", spec_to_dict(setup.spec)),
    ]
    outputs += [p for p in export_grid(truth, run_dir / "truth")]
    write_spectrum_csv(spectrum, run_dir / "true_spectrum.csv")
    outputs.append(run_dir / "true_spectrum.csv")
    write_library(setup.library, run_dir / "library", kvp=cfg.library.get("kvp", 120.0))
    outputs += sorted((run_dir / "library").iterdir())
    sino.write(run_dir / "sinogram.csv")
    save_gray_png(sino.values, run_dir / "sinogram.png", vmax=max(float(sino.values.max()), 1e-12))
    outputs += [run_dir / "sinogram.csv", run_dir / "sinogram.png"]
    write_manifest(run_dir, "simulate", cfg, setup.inputs, outputs,
                   {"sinogram_shape": list(sino.values.shape), "noise": asdict(noise)})
    return outputs


def load_simulation(cfg: ExperimentConfig, run_dir: Path):
    """Setup, sinogram and (when present) ground truth of a simulated run."""
    sino_path = run_dir / "sinogram.csv"
    if not sino_path.is_file():
        raise CliError(f"no sinogram in {run_dir}; run 'simulate' first")
    setup = build_setup(cfg)
    sino = Sinogram.read(sino_path)
    setup.inputs["sinogram.csv"] = sha256(sino_path)
    g, want = sino.geometry, setup.geometry
    if (g.n_bins, g.bin_spacing, g.sample_step, g.scale) != (want.n_bins, want.bin_spacing, want.sample_step,
                                                              want.scale):
        raise CliError(f"sinogram geometry {g.to_dict()} does not match config geometry {want.to_dict()}")
    truth = None
    if (run_dir / "truth").is_dir():
        truth = import_grid(run_dir / "truth", setup.mset.names, setup.spec.pixel_size)
    return setup, sino, truth


def select_views(sino: Sinogram, views: int | None) -> Sinogram:
    if views is None or views == sino.geometry.n_views:
        return sino
    if views <= 0 or sino.geometry.n_views % views:
        raise CliError(f"--views {views} must divide the acquired {sino.geometry.n_views} views")
    return sino.undersample(sino.geometry.n_views // views)


def run_name(variant: str, sino: Sinogram, full_views: int) -> str:
    v = sino.geometry.n_views
    return variant if v == full_views else f"{variant}_v{v}"


def cmd_reconstruct(cfg: ExperimentConfig, run_dir: Path, variant: str, views: int | None = None,
                    subdir: str = "") -> Path:
    setup, full, truth = load_simulation(cfg, run_dir)
    sino = select_views(full, views)
    out = run_dir / subdir / run_name(variant, sino, full.geometry.n_views)
    out.mkdir(parents=True, exist_ok=True)
    width = setup.spec.width
    extra = {"variant": variant, "views": sino.geometry.n_views}

    if variant == "fbp":
        image = fbp_reconstruct(sino, width)
        np.savetxt(out / "image.csv", image, delimiter=",", fmt="%.17g")
        save_gray_png(image, out / "image.png", vmax=max(float(image.max()), 1e-12))
        outputs = [out / "image.csv", out / "image.png"]
    else:
        tc = train_config(cfg, variant, width)
        log.info("training %s: %s", variant, tc)
        result = train(sino, setup.library, setup.mset, tc)
        est = evaluate_grid(result, width, setup.spec.pixel_size, setup.mset.names)
        outputs = export_grid(est, out)
        write_spectrum_csv(result.spectrum, out / "spectrum.csv")
        write_loss_history(result.loss_history, out / "loss.csv")
        save_checkpoint(result, out / "checkpoint.npz")
        np.savetxt(out / "gamma.csv", result.gamma[None, :], delimiter=",", fmt="%.17g")
        outputs += [out / n for n in ("spectrum.csv", "loss.csv", "checkpoint.npz", "gamma.csv")]
        prob = Problem(sino, setup.library, setup.mset, tc)
        prob.params.data[:] = result.params.data
        extra.update(train_config=tc.to_dict(), runtime_s=result.runtime, final_loss=prob.full_loss())
        if truth is not None:
            extra["rmse"] = rmse(truth, est)
            extra["spectrum_error"] = spectrum_error(result.spectrum, read_spectrum_csv(run_dir / "true_spectrum.csv"))
    write_manifest(out, "reconstruct", cfg, setup.inputs, outputs, extra)
    return out


def _reconstruction_dirs(run_dir: Path) -> list[Path]:
    return sorted(p.parent for p in run_dir.glob("*/manifest_reconstruct.json"))


def evaluate_run(setup: Setup, run_dir: Path, rec_dir: Path, truth: FractionGrid | None) -> EvalReport | None:
    manifest = json.loads((rec_dir / "manifest_reconstruct.json").read_text())
    if manifest["variant"] == "fbp":
        return None
    ck = load_checkpoint(rec_dir / "checkpoint.npz", setup.library)
    est = evaluate_grid(ck, setup.spec.width, setup.spec.pixel_size, setup.mset.names)
    estimated = ck.spectrum
    initial = setup.library.average()
    ref_path = run_dir / "true_spectrum.csv"
    reference = read_spectrum_csv(ref_path, setup.grid) if ref_path.is_file() else None

    with open(rec_dir / "spectrum_plot.csv", "w") as fh:
        fh.write("energy_keV,true,initial,estimated\n")
        ref_w = reference.weights if reference is not None else np.full(len(setup.grid), np.nan)
        for e, t, i, s in zip(setup.grid.energies, ref_w, initial.weights, estimated.weights):
            fh.write(f"{e:.10g},{t!r},{i!r},{s!r}\n")

    name = rec_dir.name
    runtime = manifest.get("runtime_s")
    if truth is None:
        # no ground truth: only the spectrum against its starting point can be reported
        return EvalReport(name, tuple(setup.mset.names), np.full(len(setup.mset), np.nan), float("nan"), [],
                          None, spectrum_error(estimated, initial), runtime)
    spectra = (estimated, reference) if reference is not None else None
    return report(truth, est, setup.spec, spectra=spectra, runtime=runtime, name=name, initial=initial)


def cmd_evaluate(cfg: ExperimentConfig, run_dir: Path) -> list[Path]:
    setup, _, truth = load_simulation(cfg, run_dir)
    dirs = _reconstruction_dirs(run_dir)
    if not dirs:
        raise CliError(f"no reconstructions found in {run_dir}; run 'reconstruct' first")
    reports = [r for d in dirs if (r := evaluate_run(setup, run_dir, d, truth)) is not None]
    outputs = [d / "spectrum_plot.csv" for d in dirs if (d / "spectrum_plot.csv").is_file()]
    if reports:
        write_report_csv(reports, run_dir / "report.csv")
        text = format_table(reports) if truth is not None else "ground truth unavailable; spectrum-vs-initial only\n"
        (run_dir / "report.txt").write_text(text + "\n")
        outputs += [run_dir / "report.csv", run_dir / "report.txt"]
        print(text)
    summary = {r.name: {"rmse": r.rmse, "spectrum_error": r.spectrum_error,
                        "initial_spectrum_error": r.initial_spectrum_error} for r in reports}
    write_manifest(run_dir, "evaluate", cfg, setup.inputs, outputs,
                   {"ground_truth": truth is not None, "summary": summary})
    return outputs


def cmd_sweep(cfg: ExperimentConfig, run_dir: Path) -> list[Path]:
    setup, full, truth = load_simulation(cfg, run_dir)
    if truth is None:
        raise CliError("sweep needs the ground truth written by 'simulate'")
    variant = cfg.sweep.get("variant", "tv")
    factors = [int(f) for f in cfg.sweep.get("factors", [1, 2, 3, 4])]
    rows, table = [], []
    for f in factors:
        views = full.geometry.n_views // f
        if views * f != full.geometry.n_views:
            raise CliError(f"undersampling factor {f} does not divide {full.geometry.n_views} views")
        rec = cmd_reconstruct(cfg, run_dir, variant, views, subdir="sweep")
        m = json.loads((rec / "manifest_reconstruct.json").read_text())
        rows.append((f, views, m["rmse"], m["spectrum_error"], m["runtime_s"]))
        table.append((f"{views} ({f}x)", m["rmse"], m["spectrum_error"], m["runtime_s"]))
    with open(run_dir / "sweep.csv", "w") as fh:
        fh.write("factor,views,rmse,spectrum_error,runtime_s\n")
        for f, v, r, s, t in rows:
            fh.write(f"{f},{v},{r!r},{s!r},{t:.3f}\n")
    text = sweep_table(table)
    (run_dir / "sweep.txt").write_text(text + "\n")
    print(text)
    outputs = [run_dir / "sweep.csv", run_dir / "sweep.txt"]
    outputs += [run_dir / "sweep" / run_name(variant, full.undersample(f), full.geometry.n_views) / "checkpoint.npz"
                for f in factors]
    write_manifest(run_dir, "sweep", cfg, setup.inputs, outputs, {"variant": variant, "factors": factors})
    return outputs


# -- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL, description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "rasterize the phantom and acquire a sinogram"),
        ("reconstruct", "run one reconstruction on a simulated sinogram"),
        ("evaluate", "score every reconstruction in the run directory"),
        ("sweep", "reconstruct at each undersampling factor and tabulate"),
        ("gen-library", "write the spectrum library"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--out", help="run directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "reconstruct":
            p.add_argument("--variant", choices=("tv", "inr", "fbp"), required=True)
            p.add_argument("--views", type=int, help="keep this many of the acquired views")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        run_dir = Path(args.out) if args.out else cfg.resolve(cfg.out)
        if args.command == "simulate":
            cmd_simulate(cfg, run_dir)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, run_dir, args.variant, args.views)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, run_dir)
        elif args.command == "sweep":
            cmd_sweep(cfg, run_dir)
        else:
            run_dir.mkdir(parents=True, exist_ok=True)
            cmd_gen_library(cfg, run_dir)
    except TrainingDiverged as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return 3
    except (CliError, ValueError, OSError) as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
