import numpy as np
import pytest
import scipy.sparse as sp

from witten_lab.dsl import ScalarField
from witten_lab.geometry import box, find_critical_points
from witten_lab.spectra import (SpectrumError, betti_numbers, eigencount_vs_morse, hermite_levels, instanton_spaces,
                                lowest_eigenpairs, morse_counts, spectral_window, strong_morse_inequalities,
                                window_betti)
from witten_lab.witten import assemble_witten_laplacian, deformed_complex

CUBIC = ScalarField("x1^3/3 - x1", 1)
CUBIC2 = ScalarField("x1^3/3 - x1 + x2^2", 2)


def test_oscillator_count3():
    A = assemble_witten_laplacian(box(1, 3, 0.01), ScalarField("x1^2/2", 1), 10.0, 0)
    pairs = lowest_eigenpairs(A, 3)
    np.testing.assert_allclose([p.eigenvalue for p in pairs], hermite_levels(10.0, 3), atol=0.4)
    for p in pairs:
        assert p.residual < 1e-8
        assert A.layout.norm(p.vector) == pytest.approx(1)


def test_dirichlet_mode():
    R, N = 2.0, 400
    h = 2 * R / N
    L = sp.diags([-np.ones(N - 2), 2 * np.ones(N - 1), -np.ones(N - 2)], [-1, 0, 1]) / h**2
    lam = lowest_eigenpairs(L, 1)[0].eigenvalue
    assert lam == pytest.approx((np.pi / (2 * R)) ** 2, rel=1e-4)


def test_large_sparse_path_matches_dense():
    # above the dense limit the shift-invert path is used
    A = assemble_witten_laplacian(box(2, 2, 0.08), CUBIC2, 5.0, 1)
    assert A.shape[0] > 2500
    vals = [p.eigenvalue for p in lowest_eigenpairs(A, 3)]
    ref = np.linalg.eigvalsh(A.matrix.toarray())[:3]
    np.testing.assert_allclose(vals, ref, rtol=1e-9, atol=1e-9)


def test_count_cap():
    A = assemble_witten_laplacian(box(1, 3, 0.01), ScalarField("x1^2/2", 1), 10.0, 0)
    with pytest.raises(SpectrumError, match="count exceeds cap"):
        lowest_eigenpairs(A, 40)


def test_cubic_window_counts_and_gap_growth():
    model = box(1, 3.5, 0.005)
    gaps = []
    for T in (10.0, 20.0, 40.0):
        w0 = spectral_window(model, CUBIC, T, 0)
        w1 = spectral_window(model, CUBIC, T, 1)
        assert w0.dimension == 1 and w1.dimension == 1
        assert w0.gram_defect() < 1e-10
        gaps.append(w0.gap_next)
    slope = np.polyfit(np.log([10, 20, 40]), np.log(gaps), 1)[0]
    assert slope == pytest.approx(1, abs=0.1)


def test_paraboloid_no_degree1_window():
    w = spectral_window(box(2, 2, 0.05), ScalarField("x1^2 + x2^2", 2), 10.0, 1)
    assert w.dimension == 0
    assert w.basis().shape[1] == 0


def test_window_overcrowded():
    with pytest.raises(SpectrumError, match="overcrowded"):
        spectral_window(box(1, 80, 1.0), ScalarField("x1^2/2", 1), 0.001, 0, scheme="local")


def test_eigencount_cubic_1d():
    model = box(1, 3.5, 0.005)
    crit = find_critical_points(model, CUBIC)
    table = eigencount_vs_morse(instanton_spaces(model, CUBIC, 20.0), crit)
    assert [(r["eigen_count"], r["m_k"], r["match"]) for r in table["rows"]] == [(1, 1, True), (1, 1, True)]
    assert table["banner"] == ""


def test_eigencount_cubic_product():
    model = box(2, 3.5, 0.05)
    crit = find_critical_points(model, CUBIC2)
    table = eigencount_vs_morse(instanton_spaces(model, CUBIC2, 20.0), crit)
    assert [(r["eigen_count"], r["m_k"]) for r in table["rows"]] == [(1, 1), (1, 1), (0, 0)]
    assert table["all_match"]


def test_eigencount_below_gate():
    model = box(1, 3.5, 0.005)
    crit = find_critical_points(model, CUBIC)
    table = eigencount_vs_morse(instanton_spaces(model, CUBIC, 1.0), crit, T_gate=10.0)
    assert table["banner"] == "threshold not met"


def test_betti_cubic_tunneling():
    model = box(1, 3.5, 0.005)
    rep = window_betti(model, CUBIC, 20.0)
    assert rep.dims == [1, 1]
    assert rep.ranks == [1]
    assert rep.betti == [0, 0]
    # the tunneling eigenvalue sits below rounding; the projected differential still resolves it
    assert abs(spectral_window(model, CUBIC, 20.0, 0).eigenvalues[0]) < 1e-8
    assert 0 < rep.singular_values[0][0] < 1e-6


def test_betti_gaussian_2d():
    model = box(2, 3, 0.05)
    f = ScalarField("(x1^2 + x2^2)/2", 2)
    rep = betti_numbers(instanton_spaces(model, f, 10.0), deformed_complex(model, f, 10.0).d)
    assert rep.betti == [1, 0, 0]


def test_strong_morse_inequalities():
    rows = strong_morse_inequalities([1, 0, 1], [1, 2, 4])
    assert [r["holds"] for r in rows] == [True, True, False]  # equality fails at k = n
    assert all(r["holds"] for r in strong_morse_inequalities([1, 0, 1], [1, 2, 3]))
    assert morse_counts(find_critical_points(box(2, 3.5, 0.05), CUBIC2), 2) == [1, 1, 0]
