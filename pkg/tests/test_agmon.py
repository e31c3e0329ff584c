import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from witten_lab import _kernels_py
from witten_lab.agmon import (BACKEND, AgmonError, agmon_distance, decay_fit, gradient_growth_check,
                              lipschitz_defect, triangle_spot_check, weighted_norm_growth)
from witten_lab.dsl import ScalarField
from witten_lab.geometry import CompactCore, box, find_critical_points, hull_core
from witten_lab.spectra import spectral_window

OSC = ScalarField("x1^2/2", 1)
CUBIC = ScalarField("x1^3/3 - x1", 1)


def interval_core(xk):
    return CompactCore("sublevel-box", np.array([-xk]), np.array([xk]), [], 0.0)


def test_closed_form_oscillator():
    T, b, xk = 10.0, 0.9, 0.5
    model = box(1, 4, 0.01)
    rho = agmon_distance(model, OSC, T, b, interval_core(xk))
    x = model.axes()[0]
    exact = b * T * (x * x - xk * xk) / 2
    far = np.abs(x) >= 1
    assert np.max(np.abs(rho.rho[far] / exact[far] - 1)) < 0.02
    assert np.all(rho.rho[np.abs(x) <= xk] == 0)


def test_rho_linear_in_T():
    model = box(2, 2, 0.05)
    f = ScalarField("x1^3/3 - x1 + x2^2", 2)
    core = hull_core(find_critical_points(model, f), 0.1)
    r1 = agmon_distance(model, f, 10.0, 0.9, core).rho
    r2 = agmon_distance(model, f, 20.0, 0.9, core).rho
    np.testing.assert_allclose(r2, 2 * r1, rtol=1e-12, atol=1e-12)


def _csgraph_oracle(field_):
    n = len(field_.rho)
    rows, cols, data = [], [], []
    for p, q, w in field_.edge_weights():
        rows += [p, q]
        cols += [q, p]
        data += [np.broadcast_to(w, p.shape)] * 2
    G = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    src = np.flatnonzero(field_.rho == 0)
    return dijkstra(G, directed=False, indices=src, min_only=True)


@pytest.mark.parametrize("dim", [1, 2])
def test_backends_agree_with_csgraph(dim):
    if dim == 1:
        model, f = box(1, 3, 0.01), CUBIC
    else:
        model, f = box(2, 2, 0.05), ScalarField("x1^3/3 - x1 + x2^2 + x1*x2/3", 2)
    core = hull_core(find_critical_points(model, f), 0.1)
    a = agmon_distance(model, f, 7.0, 0.8, core)
    p = agmon_distance(model, f, 7.0, 0.8, core, backend=_kernels_py)
    np.testing.assert_allclose(a.rho, p.rho, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.rho, _csgraph_oracle(a), rtol=1e-10, atol=1e-10)


def test_backend_name():
    assert BACKEND in ("compiled", "python")


def test_lipschitz_and_triangle():
    model = box(2, 2, 0.05)
    f = ScalarField("x1^3/3 - x1 + x2^2", 2)
    rho = agmon_distance(model, f, 10.0, 0.9, hull_core(find_critical_points(model, f), 0.1))
    assert lipschitz_defect(rho) <= 1e-9 * rho.rho.max()
    tri = triangle_spot_check(model, f, rho, pairs=100, seed=3)
    assert tri["pass"]


def test_b_range():
    with pytest.raises(AgmonError):
        agmon_distance(box(1, 3, 0.01), OSC, 10.0, 1.0, interval_core(0.5))


def _window_state(model, f, T, k):
    w = spectral_window(model, f, T, k)
    rho = agmon_distance(model, f, T, 0.9, hull_core(find_critical_points(model, f), 0.1))
    return w, rho


def test_hermite_slope_is_one_over_b():
    w, rho = _window_state(box(1, 4, 0.01), OSC, 20.0, 0)
    fit = decay_fit(w.pairs[0], rho)
    assert fit.confirmed
    assert fit.a_obs == pytest.approx(1 / 0.9, rel=0.05)
    assert fit.envelope_excess <= 0


def test_cubic_degree1_decay():
    w, rho = _window_state(box(1, 3.5, 0.005), CUBIC, 20.0, 1)
    assert decay_fit(w.pairs[0], rho, a_min=0.9).confirmed


def test_constant_vector_not_confirmed():
    w, rho = _window_state(box(1, 4, 0.01), OSC, 20.0, 0)
    fit = decay_fit(None, rho, values=np.ones(w.layout.size), positions=w.layout.positions)
    assert fit.verdict == "not confirmed"


def test_too_few_points():
    w, rho = _window_state(box(1, 4, 0.01), OSC, 20.0, 0)
    with pytest.raises(AgmonError, match="grid too coarse"):
        decay_fit(w.pairs[0], rho, min_points=10**6)


@pytest.mark.parametrize("f,k", [(OSC, 0), (CUBIC, 0)])
def test_weighted_norm_growth(f, k):
    model = box(1, 4, 0.005)
    us, rs = [], []
    for T in (10.0, 20.0, 40.0):
        w, rho = _window_state(model, f, T, k)
        us.append(w.pairs[0])
        rs.append(rho)
    g = weighted_norm_growth(us, rs)
    assert g["pass"] and g["exponent"] <= 2.5


def test_weighted_norm_growth_needs_three_T():
    w, rho = _window_state(box(1, 4, 0.01), OSC, 20.0, 0)
    with pytest.raises(AgmonError, match=">= 3 T"):
        weighted_norm_growth([w.pairs[0]], [rho])


def test_gradient_growth_linear():
    model = box(1, 4, 0.01)
    f = ScalarField("2*x1", 1)
    rho = agmon_distance(model, f, 10.0, 0.9, interval_core(0.5))
    rep = gradient_growth_check(f, rho, 10.0, 0.9, c_f=0.0)
    assert rep["status"] == "pass"
    assert rep["C"] == pytest.approx(4.0)
    assert rep["max_violation"] <= 0


def test_gradient_growth_skipped_when_not_tame():
    model = box(1, 4, 0.01)
    rho = agmon_distance(model, OSC, 10.0, 0.9, interval_core(0.5))
    assert gradient_growth_check(OSC, rho, 10.0, 0.9, 1.0, tameness="not_tame")["status"] == "skipped"


def test_pure_python_fallback_selected_by_env():
    import os
    import subprocess
    import sys

    env = dict(os.environ, WITTEN_LAB_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from witten_lab.agmon import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
