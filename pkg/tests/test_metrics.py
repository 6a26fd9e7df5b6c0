import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectromix.metrics import format_table, report, rmse, rmse_components, sweep_table, write_report_csv
from spectromix.phantom import FractionGrid, phantom_a, rasterize


def grid(data, materials=("a", "b")):
    return FractionGrid(np.asarray(data, dtype=float), 1.0, materials)


def brute_rmse(t, e):
    h, w, m = t.shape
    total = 0.0
    for j in range(m):
        s = 0.0
        for y in range(h):
            for x in range(w):
                s += (t[y, x, j] - e[y, x, j]) ** 2
        total += math.sqrt(s / (h * w))
    return total / m


def test_identity_is_zero():
    t = rasterize(phantom_a(width=16))
    assert rmse(t, t) == 0.0


def test_constant_error_closed_form():
    t = np.full((5, 7, 2), 0.5)
    e = t + np.array([0.1, -0.1])
    assert rmse(grid(t), grid(e)) == pytest.approx(0.1, rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))
def test_matches_brute_force(seed, h, w, m):
    rng = np.random.default_rng(seed)
    t = rng.dirichlet(np.ones(m), size=(h, w))
    e = rng.dirichlet(np.ones(m), size=(h, w))
    mats = tuple(str(i) for i in range(m))
    assert rmse(grid(t, mats), grid(e, mats)) == pytest.approx(brute_rmse(t, e), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    t = rng.dirichlet(np.ones(3), size=(4, 5))
    e = rng.dirichlet(np.ones(3), size=(4, 5))
    mats = ("a", "b", "c")
    assert rmse(grid(t, mats), grid(e, mats)) == pytest.approx(rmse(grid(e, mats), grid(t, mats)), rel=1e-15)
    perm = rng.permutation(20)
    tp = t.reshape(20, 3)[perm].reshape(4, 5, 3)
    ep = e.reshape(20, 3)[perm].reshape(4, 5, 3)
    assert rmse(grid(tp, mats), grid(ep, mats)) == pytest.approx(rmse(grid(t, mats), grid(e, mats)), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        rmse_components(grid(np.zeros((2, 2, 2))), grid(np.zeros((2, 3, 2))))


def test_perfect_report(library):
    spec = phantom_a(width=32)
    t = rasterize(spec)
    rep = report(t, t, spec, spectra=(library.spectra[3], library.spectra[3]), runtime=1.5,
                 initial=library.average())
    assert rep.rmse == 0.0 and rep.spectrum_error == 0.0
    assert rep.initial_spectrum_error > 0
    for row in rep.rois:
        assert row.mean == pytest.approx(row.truth, abs=1e-12) and row.std == pytest.approx(0.0, abs=1e-12)
    # the mixed ROI reports both of its materials
    assert sum(r.label == "2" for r in rep.rois) == 2


def test_report_csv_and_table(tmp_path, library):
    spec = phantom_a(width=32)
    t = rasterize(spec)
    noisy = FractionGrid(np.clip(t.data + 0.01, 0, 1), t.pixel_size, t.materials)
    reps = [report(t, noisy, spec, name="tv"), report(t, t, spec, name="inr", runtime=3.0)]
    write_report_csv(reps, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["method", "roi", "material", "truth", "mean", "std"]
    assert {r[0] for r in rows[1:] if r and r[0] != "method"} == {"tv", "inr"}
    text = format_table(reps)
    assert "tv" in text.splitlines()[0] and "inr" in text.splitlines()[0]
    assert text.count("±") == 2 * len(reps[0].rois)
    assert "RMSE" in text


def test_sweep_table_layout():
    out = sweep_table([("360 (1x)", 0.02, 0.01, 12.0), ("90 (4x)", 0.04, None, None)])
    lines = out.splitlines()
    assert lines[0].split()[:2] == ["#", "Projections"]
    assert "0.0200" in lines[1] and "0.0400" in lines[2]
