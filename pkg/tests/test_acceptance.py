"""Acceptance gate: the eight criteria at their stated tolerances.

Each test prints one PASS/FAIL line; conftest repeats them in the terminal
summary. Desk-scale runs come from configs/ through the same code path the
CLI uses and are cached per session, so criteria 3, 4 and 8 share them.
"""
import time
from dataclasses import dataclass
from functools import cache
from pathlib import Path

import numpy as np
import pytest

import oracles
from oracles import brute_line_integral
from spectromix.cli import ExperimentConfig, build_setup, simulate, train_config
from spectromix.metrics import rmse
from spectromix.phantom import XCAT_MATERIALS, FractionGrid
from spectromix.projector import TRANSMISSION_FLOOR, Geometry, acquire, fbp_reconstruct
from spectromix.solver import TrainConfig, evaluate_grid, train
from spectromix.spectra import Spectrum, spectrum_error

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
VERDICTS = []  # read by conftest.pytest_terminal_summary

BUDGET_S = 15 * 60


def verdict(n, ok, text):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


@dataclass
class DeskRun:
    rmse: float
    spectrum_error: float
    initial_error: float
    seconds: float
    loss_history: np.ndarray
    grid: np.ndarray


def desk_run(config: str, variant: str, views: int | None = None) -> DeskRun:
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load(CONFIGS / config)
    setup = build_setup(cfg)
    truth, spectrum, sino = simulate(setup)
    if views is not None:
        sino = sino.undersample(sino.geometry.n_views // views)
    res = train(sino, setup.library, setup.mset, train_config(cfg, variant, setup.spec.width))
    est = evaluate_grid(res, setup.spec.width, setup.spec.pixel_size, setup.mset.names)
    return DeskRun(rmse(truth, est), spectrum_error(res.spectrum, spectrum),
                   spectrum_error(setup.library.average(), spectrum), time.perf_counter() - t0,
                   res.loss_history, est.data)


cached_run = cache(desk_run)

DESK = [("desk_a.yaml", "inr", 0.05), ("desk_a.yaml", "tv", 0.07), ("desk_b.yaml", "inr", 0.05),
        ("desk_b.yaml", "tv", 0.07)]


def test_criterion_1_monochromatic_oracle(mset, grid):
    # the default transmission floor caps rho at -ln(1e-12) ~ 27.6; below ~30 keV a 16 cm
    # field exceeds that, so low energies are checked with the clamp switched off
    rng = np.random.default_rng(20240601)
    g = Geometry.for_image(32, 0.5, 45)
    worst, seconds = 0.0, 0.0
    for k, floor in ((0, 0.0), (20, TRANSMISSION_FLOOR), (50, TRANSMISSION_FLOOR), (110, TRANSMISSION_FLOOR)):
        data = rng.dirichlet(np.ones(4), size=(32, 32))
        t0 = time.perf_counter()
        sino = acquire(FractionGrid(data, 0.5, XCAT_MATERIALS), mset, Spectrum.monochromatic(grid, k), g, None,
                       floor=floor)
        seconds = max(seconds, time.perf_counter() - t0)
        lac = data @ mset.lac_matrix[:, k]
        ref = np.array([[brute_line_integral(lac, g, v, b) for b in range(g.n_bins)] for v in range(g.n_views)])
        if floor > 0:
            assert ref.max() < -np.log(floor), "clamp would be active"
        hit = ref != 0
        assert np.all(sino.values[~hit] == 0.0)
        worst = max(worst, float(np.max(np.abs(sino.values[hit] - ref[hit]) / np.abs(ref[hit]))))
    verdict(1, worst <= 1e-10 and seconds < 5,
            f"10/30/60/120 keV, max rel err {worst:.2e} (<= 1e-10), {seconds:.2f} s per projection (< 5 s)")


def test_criterion_2_gradient_suite(mset, library):
    t0 = time.perf_counter()
    errors = oracles.gradient_suite(mset, library, np.random.default_rng(11), trials=100)
    seconds = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    verdict(2, worst <= 1e-4 and seconds < 60, f"worst {worst:.2e} (<= 1e-4), {seconds:.1f} s (< 60 s); {detail}")


@pytest.mark.parametrize("config, variant, target", DESK)
def test_criterion_3_desk_decomposition(config, variant, target):
    run = cached_run(config, variant)
    ok = run.rmse <= target and run.seconds < BUDGET_S
    verdict(3, ok, f"{config} {variant}: RMSE {run.rmse:.4f} (<= {target}), {run.seconds:.0f} s (< {BUDGET_S} s)")


@pytest.mark.parametrize("config, variant, target", DESK)
def test_criterion_4_spectrum_recovery(config, variant, target):
    run = cached_run(config, variant)
    ok = run.spectrum_error <= 0.05 and run.spectrum_error <= 0.5 * run.initial_error
    verdict(4, ok, f"{config} {variant}: spectrum l1 {run.spectrum_error:.4f} (<= 0.05, "
                   f"<= 0.5 x initial {run.initial_error:.4f})")


def test_criterion_5_undersampling_sweep():
    cfg = ExperimentConfig.load(CONFIGS / "sweep_a.yaml")
    full = cfg.geometry["n_views"]
    factors = cfg.sweep["factors"]
    assert factors == [1, 2, 3, 4]
    errors = [desk_run("sweep_a.yaml", cfg.sweep["variant"], full // f).rmse for f in factors]
    monotone = all(b >= a for a, b in zip(errors, errors[1:]))
    ok = monotone and errors[-1] <= 3 * errors[0]
    table = ", ".join(f"{full // f} views {e:.4f}" for f, e in zip(factors, errors))
    verdict(5, ok, f"{table}; monotone {monotone}, 4x/1x = {errors[-1] / errors[0]:.2f} (<= 3)")


def test_criterion_6_beam_hardening():
    cfg = ExperimentConfig.load(CONFIGS / "water_disk.yaml")
    setup = build_setup(cfg)
    _, _, sino = simulate(setup)
    w = setup.spec.width
    c = (np.arange(w) - (w - 1) / 2) * setup.spec.pixel_size
    r = np.hypot(*np.meshgrid(c, c))  # cm
    radius = setup.spec.shapes[0].axes[0]
    center, rim = r < 0.25 * radius, (r > 0.75 * radius) & (r < 0.875 * radius)

    image = fbp_reconstruct(sino, w)
    cupping = 1 - image[center].mean() / image[rim].mean()
    res = train(sino, setup.library, setup.mset, train_config(cfg, "tv", w))
    water = evaluate_grid(res, w, setup.spec.pixel_size, setup.mset.names).material("water")
    gap = abs(water[center].mean() - water[rim].mean())
    verdict(6, cupping >= 0.03 and gap <= 0.01,
            f"FBP cupping {100 * cupping:.1f}% (>= 3%), solver water center/rim gap {100 * gap:.2f}% (<= 1%)")


@pytest.mark.parametrize("variant", ["tv", "inr"])
def test_criterion_7_constraint_invariants(variant):
    cfg = ExperimentConfig.load(CONFIGS / "desk_a.yaml")
    setup = build_setup(cfg)
    _, _, sino = simulate(setup)
    base = train_config(cfg, variant, setup.spec.width).to_dict()
    tc = TrainConfig.from_dict({**base, "iterations": 500, "epochs": 3, "spectrum_warmup": 0, "debug_checks": True})
    res = train(sino, setup.library, setup.mset, tc)  # raises ConstraintViolation on any breach
    steps = res.loss_history.size
    verdict(7, steps >= 500, f"{variant}: {steps} debug-checked steps, simplex within 1e-9 throughout")


@pytest.mark.parametrize("config, variant, target", DESK)
def test_criterion_8_determinism(config, variant, target):
    first = cached_run(config, variant)
    again = desk_run(config, variant)
    same = (first.loss_history.tobytes() == again.loss_history.tobytes()
            and first.grid.tobytes() == again.grid.tobytes())
    verdict(8, same, f"{config} {variant}: loss history and grids bit-identical on rerun")
