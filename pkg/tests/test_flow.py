import numpy as np
import pytest

from witten_lab.agmon import agmon_distance
from witten_lab.dsl import ScalarField
from witten_lab.flow import (FlowError, FlowField, FlowLine, Puncture, branch_with_frame, build_thom_smale,
                             chain_map_J, flow_distance_check, integrate_flow, jacobian_growth_check)
from witten_lab.geometry import box, find_critical_points, select_core
from witten_lab.scenarios import load_scenario
from witten_lab.spectra import EigenPair, InstantonSpace, instanton_spaces

CUBIC = ScalarField("x1^3/3 - x1", 1)
HEART = ScalarField("x1^2 + x3", 3)


@pytest.fixture(scope="module")
def cubic():
    model = box(1, 3.5, 0.005)
    crit = find_critical_points(model, CUBIC)
    core = select_core(model, CUBIC, 15.0, 0.9, crit)
    return model, crit, core, FlowField(model, CUBIC, 15.0, core=core)


@pytest.fixture(scope="module")
def sphere():
    s = load_scenario("sphere_heart_punctured")
    return s.model, find_critical_points(s.model, HEART), s.puncture


def test_cubic_capture(cubic):
    model, crit, _, fl = cubic
    line = integrate_flow(fl, [0.5], 1e6, crit)
    assert line.end == "critical"
    assert crit[line.target].position[0] == pytest.approx(1.0)
    assert line.max_f_increase(CUBIC) <= 0


def test_cubic_escape(cubic):
    model, crit, _, fl = cubic
    line = integrate_flow(fl, [-1.5], 1e6, crit)
    assert line.end == "escaped"
    assert line.polyline[-1, 0] < -1.5


def test_start_on_critical_point(cubic):
    _, crit, _, fl = cubic
    with pytest.raises(FlowError):
        integrate_flow(fl, [1.0], 10.0, crit)


def _meridian_start(theta=0.4):
    return np.array([0.0, np.sin(theta), np.cos(theta)])


def test_meridian_reaches_minimum_without_mask(sphere):
    model, crit, _ = sphere
    line = integrate_flow(FlowField(model, HEART, 1.0), _meridian_start(), 1e4, crit)
    assert line.end == "critical" and crit[line.target].index == 0
    # the y > 0 meridian passes through (0, 1, 0)
    assert np.min(np.linalg.norm(line.polyline - [0, 1, 0], axis=1)) < 0.02


def test_meridian_stuck_at_puncture(sphere):
    model, crit, pun = sphere
    field_ = FlowField(model, HEART, 1.0, puncture=Puncture(np.asarray(pun["center"], float), pun["radius"]))
    line = integrate_flow(field_, _meridian_start(), 1e4, crit)
    assert line.end == "stuck"


def test_cubic_thom_smale(cubic):
    model, crit, _, fl = cubic
    ts = build_thom_smale(model, CUBIC, 15.0, crit, field_=fl)
    saddle, minimum = [i for i, c in enumerate(crit) if c.index == 1][0], [i for i, c in enumerate(crit) if c.index == 0][0]
    assert abs(ts.m(saddle, minimum)) == 1
    assert ts.diagnostics["escaped"] == 1
    assert ts.squares_to_zero()
    assert ts.homology_ranks() == [0, 0]


def test_sphere_complexes(run):
    # shared full-pipeline runs: the only configuration difference is the puncture mask
    plain = run("sphere_heart").report["stages"]["complex"]
    cut = run("sphere_heart_punctured").report["stages"]["complex"]
    assert plain["homology"] == [1, 0, 1]
    assert plain["thom_smale"]["dropped"] == []
    assert all(not np.any(M) for M in plain["thom_smale"]["square"].values())
    assert len(cut["thom_smale"]["dropped"]) == 1
    assert cut["homology"] == "undefined"
    assert np.all(np.abs(cut["thom_smale"]["square"]["2"]) == 1)
    assert any("stuck" in w for w in cut["warnings"])


def test_chain_map_linear(cubic):
    model, crit, core, fl = cubic
    T = 15.0
    ts = build_thom_smale(model, CUBIC, T, crit, field_=fl)
    spaces = instanton_spaces(model, CUBIC, T)
    zero = [InstantonSpace(s.degree, [EigenPair(0.0, np.zeros(s.layout.size), 0.0, s.layout) for _ in s.pairs],
                           s.gap_next, T, s.layout) for s in spaces]
    Jz = chain_map_J(zero, ts, model, CUBIC, T, field_=fl, n_fan=16)
    assert all(not np.any(M) for M in Jz.J.values())
    J = chain_map_J(spaces, ts, model, CUBIC, T, field_=fl, n_fan=16)
    assert J.invertible(1e-3)
    assert max(J.defect.values()) < 0.05


def test_flow_distance_inside_core_skipped(cubic):
    model, crit, core, fl = cubic
    rho = agmon_distance(model, CUBIC, 15.0, 0.9, core)
    P = np.linspace(0.5, 0.9, 20)[:, None]
    line = FlowLine(P[0], "critical", P, np.linspace(0, 1, 20), T=15.0)
    rep = flow_distance_check(fl, rho, [line], 15.0)
    assert rep["lines"][0]["status"] == "skipped"


def test_escaping_branch_checks(cubic):
    model, crit, core, fl = cubic
    saddle = [c for c in crit if c.index == 1][0]
    rho = agmon_distance(model, CUBIC, 15.0, 0.9, core)
    esc = [branch_with_frame(fl, saddle, crit, sign=s) for s in (1, -1)]
    esc = [ln for ln in esc if ln.end == "escaped"]
    assert len(esc) == 1
    assert flow_distance_check(fl, rho, esc, 15.0)["pass"]
    assert jacobian_growth_check(fl, esc[0], rho, 0.1, 1)["status"] == "pass"


def test_jacobian_stationary_skipped(cubic):
    _, crit, _, fl = cubic
    p = crit[0].position
    line = FlowLine(p, "critical", p[None, :], np.zeros(1), target=0)
    assert jacobian_growth_check(fl, line, None, 0.1, 1)["status"] == "skipped"


def test_jacobian_sphere_meridian(sphere):
    model, crit, _ = sphere
    saddle = [c for c in crit if c.index == 1][0]
    fl = FlowField(model, HEART, 1.0)
    line = branch_with_frame(fl, saddle, crit, sign=1)
    assert line.end == "critical"
    assert jacobian_growth_check(fl, line, None, 0.1, 1)["status"] == "pass"
