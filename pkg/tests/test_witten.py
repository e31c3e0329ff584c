import numpy as np
import pytest
import scipy.sparse as sp

from witten_lab.dsl import ScalarField
from witten_lab.geometry import box, tame_core
from witten_lab.spectra import lowest_eigenpairs
from witten_lab.witten import (AssemblyError, assemble_witten_differential, assemble_witten_laplacian,
                               build_exterior_tables, deformed_complex, export_matrix_market,
                               quadratic_form_bound_check, read_matrix_market, symmetry_defect)

OSC = ScalarField("x1^2/2", 1)


def test_exterior_tables_n1():
    t = build_exterior_tables(1)
    assert t.basis == ((), (0,))
    # [e^1 wedge, contraction] is -1 on functions and +1 on top forms
    assert t.A[0][0, 0].tolist() == [[-1.0]]
    assert t.A[1][0, 0].tolist() == [[1.0]]


def test_exterior_tables_n2():
    t = build_exterior_tables(2)
    assert t.multi_indices(1) == [(0,), (1,)]
    np.testing.assert_array_equal(t.A[0][:, :, 0, 0], -np.eye(2))
    np.testing.assert_array_equal(t.A[2][:, :, 0, 0], np.eye(2))
    np.testing.assert_array_equal(t.A[1][0, 0], np.diag([1.0, -1.0]))
    np.testing.assert_array_equal(t.A[1][1, 1], np.diag([-1.0, 1.0]))
    # anticommutation e^i i_j + i_j e^i = delta_ij
    for i in range(2):
        for j in range(2):
            ac = t.E[i] @ t.I[j] + t.I[j] @ t.E[i]
            np.testing.assert_array_equal(ac, np.eye(4) * (i == j))


def test_exterior_tables_dimension_guard():
    with pytest.raises(ValueError):
        build_exterior_tables(3)


@pytest.mark.parametrize("k,targets", [(0, [0, 20, 40]), (1, [20])])
def test_oscillator_ladder(k, targets):
    T = 10.0
    A = assemble_witten_laplacian(box(1, 3, 0.01), OSC, T, k)
    vals = [p.eigenvalue for p in lowest_eigenpairs(A, len(targets))]
    np.testing.assert_allclose(vals, targets, atol=0.02 * 2 * T)


def test_symmetric():
    f = ScalarField("x1^3/3 - x1 + x2^2", 2)
    for k in range(3):
        for scheme in ("local", "complex"):
            A = assemble_witten_laplacian(box(2, 2, 0.1), f, 5.0, k, scheme)
            assert symmetry_defect(A) == 0


def test_T0_is_dirichlet_laplacian():
    R = 2.0
    A = assemble_witten_laplacian(box(1, R, 0.005), OSC, 0.0, 0)
    lam = lowest_eigenpairs(A, 1)[0].eigenvalue
    assert lam == pytest.approx((np.pi / (2 * R)) ** 2, rel=1e-4)


def test_differential_annihilates_ground_state():
    T = 10.0
    ratios = []
    for h in (0.02, 0.01):
        model = box(1, 4, h)
        d = assemble_witten_differential(model, OSC, T, 0)
        x = model.axes()[0][1:-1]
        u = np.exp(-T * x * x / 2)
        ratios.append(np.linalg.norm(d @ u) / np.linalg.norm(u))
    # first order in h
    assert ratios[1] < ratios[0]
    assert np.log2(ratios[0] / ratios[1]) == pytest.approx(1, abs=0.1)


def test_differential_on_constants_is_T_df():
    model = box(1, 1, 0.05)
    d = assemble_witten_differential(model, ScalarField("x1", 1), 3.0, 0)
    u = np.ones(model.cells - 1)
    out = d @ u
    np.testing.assert_allclose(out[:-1], 3.0)  # last row sees the Dirichlet boundary


def test_top_degree_has_no_differential():
    with pytest.raises(AssemblyError, match="top degree"):
        assemble_witten_differential(box(1, 1, 0.05), OSC, 1.0, 1)


def test_cochain_complex_squares_to_zero():
    cd = deformed_complex(box(2, 1.6, 0.1), ScalarField("x1^3/3 - x1 + x2^2", 2), 4.0)
    dd = (cd.d[1] @ cd.d[0]).tocsr()
    # exact up to rounding in the exponential weights
    assert abs(dd).max() <= 1e-12 * abs(cd.d[1]).max() * abs(cd.d[0]).max()


def test_nonfinite_reports_node():
    with pytest.raises(AssemblyError, match="non-finite .* at node"):
        assemble_witten_laplacian(box(1, 1, 0.05), ScalarField("exp(1000*x1)", 1), 1.0, 0)


def test_quadratic_form_bound_off_core():
    T, b = 20.0, 0.9
    model = box(1, 3, 0.01)
    A = assemble_witten_laplacian(model, OSC, T, 0)
    rep = quadratic_form_bound_check(A, tame_core(model, OSC, T, b), OSC, T, b, trials=100)
    assert rep.status == "pass"
    assert rep.min_slack >= -rep.tolerance


def test_quadratic_form_preconditions():
    model = box(1, 3, 0.01)
    core = tame_core(model, OSC, 20.0, 0.9)
    A0 = assemble_witten_laplacian(model, OSC, 0.0, 0)
    assert quadratic_form_bound_check(A0, core, OSC, 0.0, 0.9).status == "threshold not met"
    A = assemble_witten_laplacian(model, OSC, 20.0, 0)
    assert quadratic_form_bound_check(A, core, OSC, 20.0, 0.9, support="inside").status == "skipped"


def test_matrix_market_roundtrip(tmp_path):
    A = assemble_witten_laplacian(box(2, 1, 0.0625), ScalarField("x1^2 + x2", 2), 2.0, 1)
    p = tmp_path / "A.mtx"
    export_matrix_market(A, p)
    B = read_matrix_market(p)
    assert (abs(A.matrix - B)).max() == 0
    assert isinstance(B, sp.csr_matrix)
