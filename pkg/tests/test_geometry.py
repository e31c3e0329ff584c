import numpy as np
import pytest

from witten_lab.dsl import ScalarField
from witten_lab.geometry import (CoreTooLarge, GeometryError, box, check_tameness, core_D, find_critical_points,
                                 hull_core, select_core, unit_sphere)
from witten_lab.scenarios import load_scenario

CUBIC = ScalarField("x1^3/3 - x1", 1)


def test_cubic_critical_points():
    crit = find_critical_points(box(1, 3.5, 0.01), CUBIC)
    assert [c.index for c in crit] == [1, 0]
    np.testing.assert_allclose([c.position[0] for c in crit], [-1, 1], atol=1e-10)
    np.testing.assert_allclose([c.f_value for c in crit], [2 / 3, -2 / 3], atol=1e-12)


def test_paraboloid_single_minimum():
    crit = find_critical_points(box(2, 2, 0.1), ScalarField("x1^2 + x2^2", 2))
    assert len(crit) == 1
    assert crit[0].index == 0
    np.testing.assert_allclose(crit[0].position, 0, atol=1e-12)


def test_sphere_critical_points():
    # Lagrange: 2x = 2 lam x, 0 = 2 lam y, 1 = 2 lam z on the unit sphere
    crit = find_critical_points(unit_sphere(0.05), ScalarField("x1^2 + x3", 3))
    by_index = {}
    for c in crit:
        by_index.setdefault(c.index, []).append(c)
    assert sorted(by_index) == [0, 1, 2]
    (mn,), (sd,) = by_index[0], by_index[1]
    np.testing.assert_allclose(mn.position, [0, 0, -1], atol=1e-9)
    np.testing.assert_allclose(sd.position, [0, 0, 1], atol=1e-9)
    assert mn.f_value == pytest.approx(-1) and sd.f_value == pytest.approx(1)
    maxima = sorted(by_index[2], key=lambda c: c.position[0])
    np.testing.assert_allclose([m.position for m in maxima], [[-np.sqrt(3) / 2, 0, 0.5], [np.sqrt(3) / 2, 0, 0.5]],
                               atol=1e-9)
    np.testing.assert_allclose([m.f_value for m in maxima], 1.25, atol=1e-12)


def test_degenerate_hessian_is_not_morse():
    with pytest.raises(GeometryError, match="not Morse"):
        find_critical_points(box(1, 1, 0.01), ScalarField("x1^3", 1))


def test_missed_critical_point_warning():
    with pytest.warns(RuntimeWarning, match="possible missed critical point"):
        find_critical_points(box(1, 1, 0.01), ScalarField("sin(5*x1)", 1), seeds=[[0.0]])


def test_cubic_strongly_tame():
    rep = check_tameness(box(1, 16, 0.01), CUBIC, [4, 8, 16])
    ratio = [s[1] for s in rep.shell_samples]
    grad = [s[2] for s in rep.shell_samples]
    assert np.all(np.diff(ratio) < 0) and np.all(np.diff(grad) > 0)
    # closed forms on the shells: ratio 2r/(r^2-1)^2, |f'| = r^2 - 1
    np.testing.assert_allclose(grad, [15, 63, 255], rtol=1e-12)
    np.testing.assert_allclose(ratio, [2 * r / (r * r - 1) ** 2 for r in (4, 8, 16)], rtol=1e-10)
    assert rep.verdict == "strongly_tame"


def test_linear_well_tame():
    rep = check_tameness(box(1, 8, 0.01), ScalarField("x1", 1), [4, 8])
    assert rep.c_f_estimate == 0
    assert rep.epsilon_f_estimate == pytest.approx(1)
    assert rep.verdict == "well_tame"


def test_punctured_sphere_chart_not_tame():
    s = load_scenario("sphere_heart_punctured")
    ch = s.chart
    model = box(2, float(ch["R"]), float(ch["h"]), conformal=ch["conformal"])
    rep = check_tameness(model, ScalarField(ch["f"], 2), ch["shells"])
    grad = [g for _, _, g in rep.shell_samples]
    assert grad[-1] < grad[0]
    assert rep.verdict == "not_tame"


def test_compact_model_vacuous():
    assert check_tameness(unit_sphere(0.05), ScalarField("x3", 3), [0.5]).verdict == "strongly_tame"


def test_shell_outside_box():
    with pytest.raises(GeometryError, match="outside box"):
        check_tameness(box(1, 4, 0.01), CUBIC, [2, 8])


def test_core_single_minimum():
    f = ScalarField("x1^2/2", 1)
    model = box(1, 4, 0.01)
    crit = find_critical_points(model, f)
    assert core_D(crit, 10, 0.9) == 0
    core = select_core(model, f, 10, 0.9, crit)
    assert core.lower[0] < 0 < core.upper[0]
    assert core.upper[0] < 1


def test_core_D_cubic():
    crit = find_critical_points(box(1, 3.5, 0.01), CUBIC)
    # b T (max |f(p) - f(p0)| + max |f(p) - f(q)|) with f-values +-2/3
    assert core_D(crit, 10, 0.9) == pytest.approx(9 * (4 / 3 + 4 / 3))


def test_core_contains_critical_points_with_margin():
    model = box(1, 3.5, 0.005)
    crit = find_critical_points(model, CUBIC)
    core = select_core(model, CUBIC, 15, 0.9, crit)
    assert np.all(core.mask(np.array([c.position for c in crit])))
    assert core.D_margin == pytest.approx(core_D(crit, 15, 0.9))


def test_core_too_large():
    model = box(1, 2, 0.01)
    crit = find_critical_points(model, CUBIC)
    with pytest.raises(CoreTooLarge, match="enlarge R"):
        select_core(model, CUBIC, 50, 0.9, crit)


def test_hull_core_pads_bounding_box():
    crit = find_critical_points(box(2, 3, 0.1), ScalarField("x1^3/3 - x1 + x2^2", 2))
    core = hull_core(crit, 0.1)
    np.testing.assert_allclose(core.lower, [-1.1, -0.1], atol=1e-9)
    np.testing.assert_allclose(core.upper, [1.1, 0.1], atol=1e-9)
    assert core.mask([[0.0, 0.0]])[0] and not core.mask([[0.0, 0.2]])[0]
