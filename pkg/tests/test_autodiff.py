import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from spectromix.autodiff import (
    AdamState,
    NonFiniteGradientError,
    ParamVector,
    adam_step,
    forward_project_grad,
    grad_forward_project,
)
from spectromix.spectra import Spectrum

TOL = 1e-4


def test_one_hot_spectrum_path_gradient_is_lac(mset, grid, rng):
    for k in (0, 25, 110):
        eta = Spectrum.monochromatic(grid, k).weights
        p = rng.uniform(0, 0.1, (3, 4))  # below the clamp even at 10 keV
        np.testing.assert_allclose(forward_project_grad(mset, eta, p).d_paths, np.tile(mset.lac_matrix[:, k], (3, 1)),
                                   rtol=1e-13)


def test_zero_paths_give_spectrum_averaged_lac(mset, library):
    eta = library.spectra[2].weights
    g = forward_project_grad(mset, eta, np.zeros((1, 4)))
    np.testing.assert_allclose(g.d_paths[0], mset.lac_matrix @ eta, rtol=1e-13)
    np.testing.assert_allclose(g.d_eta[0], -1.0)


def test_saturated_rays_have_zero_gradient(mset, grid):
    eta = Spectrum.monochromatic(grid, 0).weights
    g = forward_project_grad(mset, eta, np.array([[0, 0, 100.0, 0], [0, 0, 0.01, 0]]))
    assert g.saturated.tolist() == [True, False]
    assert np.all(g.d_paths[0] == 0) and np.all(g.d_eta[0] == 0)
    assert np.all(g.d_paths[1] > 0)


def test_gamma_gradient_sums_to_zero(mset, library, rng):
    # SoftMax is shift invariant, so the gamma gradient is orthogonal to ones
    _, d_gamma, _, _ = grad_forward_project(mset, library, rng.normal(size=10), rng.uniform(0, 2, (5, 4)))
    np.testing.assert_allclose(d_gamma.sum(axis=1), 0.0, atol=1e-14)


def test_fd_paths(mset, library, rng):
    assert oracles.check_paths(mset, library, rng, 100) <= TOL


def test_fd_eta(mset, library, rng):
    assert oracles.check_eta(mset, library, rng, 100) <= TOL


def test_fd_gamma(mset, library, rng):
    assert oracles.check_gamma(mset, library, rng, 100) <= TOL


def test_fd_softmax(rng):
    assert oracles.check_softmax(rng, 100) <= TOL


@pytest.mark.parametrize("variant", ["tv", "inr"])
def test_fd_full_loss(mset, library, rng, variant):
    assert oracles.check_full_loss(mset, library, variant, rng, 100) <= TOL


# -- parameter vector ----------------------------------------------------------------


def test_param_vector_segments_are_views():
    pv = ParamVector({"a": (2, 3), "b": (4,)})
    assert len(pv) == 10
    pv["a"] = 1.0
    pv["b"][2] = 5.0
    assert pv.data.tolist() == [1.0] * 6 + [0, 0, 5.0, 0]
    assert pv.segment_of(7) == "b"
    c = pv.copy()
    c["a"] = 0.0
    assert pv["a"].sum() == 6


# -- Adam ---------------------------------------------------------------------------


def fresh(n=3, value=1.0):
    pv = ParamVector({"w": (n,)})
    pv.data[:] = value
    return pv, AdamState.zeros(n)


def test_zero_gradient_leaves_params():
    pv, st_ = fresh()
    adam_step(pv, np.zeros(3), st_, 0.1)
    assert pv.data.tolist() == [1.0, 1.0, 1.0] and st_.step == 1


def test_first_step_formula():
    pv, st_ = fresh()
    g = np.array([0.5, -2.0, 1e-3])
    adam_step(pv, g, st_, 0.01)
    np.testing.assert_allclose(pv.data, 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_constant_gradient_limit():
    pv, st_ = fresh(2, 0.0)
    g = np.array([3.0, -0.2])
    prev = pv.data.copy()
    for _ in range(5000):
        prev = pv.data.copy()
        adam_step(pv, g, st_, 1e-3)
    np.testing.assert_allclose(pv.data - prev, -1e-3 * np.sign(g), rtol=1e-6)


@given(st.floats(1e-3, 1e3), st.lists(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), min_size=4, max_size=4))
def test_first_step_scale_equivariant(c, g):
    g = np.array(g)
    a, sa = fresh(4, 0.0)
    b, sb = fresh(4, 0.0)
    adam_step(a, g, sa, 1e-2)
    adam_step(b, c * g, sb, 1e-2)
    assert np.argmax(np.abs(a.data)) == np.argmax(np.abs(b.data))
    np.testing.assert_array_equal(np.sign(a.data), np.sign(b.data))


def test_non_finite_gradient_names_segment():
    pv = ParamVector({"gamma": (2,), "tables": (3,)})
    st_ = AdamState.zeros(5)
    with pytest.raises(NonFiniteGradientError, match="tables"):
        adam_step(pv, np.array([0, 0, 0, np.nan, 0]), st_, 1e-3)
    assert st_.step == 0


def test_adam_is_deterministic(rng):
    g = rng.normal(size=(20, 6))
    runs = []
    for _ in range(2):
        pv, st_ = fresh(6)
        for row in g:
            adam_step(pv, row, st_, 1e-2)
        runs.append(pv.data.tobytes())
    assert runs[0] == runs[1]
