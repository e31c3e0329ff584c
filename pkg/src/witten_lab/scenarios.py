"""Scenario catalog, boundary collar extension and the boundary inequality table."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .dsl import Expr, ScalarField, eval_many, parse
from .geometry import CriticalPoint, ManifoldModel, box, find_critical_points, project_to_surface

CATALOG_DIR = Path(__file__).with_name("scenarios")

STAGES = ("analyze", "spectrum", "agmon", "complex", "verify")

# every numeric threshold a verdict depends on; scenario files may override any of them
DEFAULT_THRESHOLDS = {
    "b": 0.9,
    "a_min": 0.9,
    "T_gate": 0.0,
    "decay_floor": 1e-12,
    "decay_rho_min": 1.0,
    "decay_min_points": 50,
    "decay_bin_width": 0.5,
    "decay_core_pad": 0.1,
    "decay_slope_tol": 0.05,
    "growth_limit": 2.5,
    "betti_rel_tol": 1e-6,
    "gap_band": 0.25,
    "residual_tol": 1e-8,
    "shoot_count": 64,
    "n_fan": 256,
    "angle_tol": 1e-6,
    "J_singular_ratio": 1e-3,
    "J_defect": 0.05,
    "flow_distance_tol": 1e-3,
    "jacobian_tol": 1e-6,
    "boundary_value_tol": 1e-10,
    "boundary_slope_tol": 1e-8,
    "boundary_capture": 0.05,
}


class ScenarioError(ValueError):
    pass


class BoundaryError(ScenarioError):
    pass


@dataclass
class BoundaryComponent:
    name: str
    locus: float  # value of the collar coordinate's ambient axis on the component
    r: Expr  # collar coordinate, r = 1 on the component and r < 1 inside
    f_at_boundary: Expr
    df_dr: Expr
    cls: str  # "N1" (quadratic escape) or "N2" (linear escape)
    sign: str = ""  # "+" where f decreases outward, "-" otherwise; filled by check_boundary_data


@dataclass
class BoundaryScenario:
    geometry: str  # "interval" or "cylinder"
    f: Expr
    components: list
    eta_center: float = 0.6
    eta_steepness: float = 10.0
    expected: dict = field(default_factory=dict)
    shells: Optional[list] = None


@dataclass
class Scenario:
    name: str
    description: str
    model: ManifoldModel
    f: Expr
    tameness_class: str
    reference_betti: list
    betti_note: str
    T_schedule: list
    thresholds: dict
    stages: dict = field(default_factory=dict)
    puncture: Optional[dict] = None
    chart: Optional[dict] = None
    boundary: Optional[BoundaryScenario] = None
    expected_failures: list = field(default_factory=list)
    shells: Optional[list] = None
    source: str = ""
    provenance: dict = field(default_factory=dict)  # parameter -> "default" | "file" | "flag"

    @property
    def n(self) -> int:
        return self.model.dimension

    def scalar_field(self) -> ScalarField:
        """The function the pipeline runs on: f itself, or the collar extension for boundary scenarios."""
        if self.boundary is None:
            return ScalarField(self.f, name=self.name)
        return ScalarField(extend_boundary_function(self.boundary)[1], name=self.name)

    def tameness_shells(self) -> list:
        if self.shells:
            return list(self.shells)
        if self.boundary is not None and self.boundary.shells:
            return list(self.boundary.shells)
        R = self.model.R
        return [R / 8, R / 4, R / 2, R]

    def with_overrides(self, T=None, h=None, R=None, **thresholds) -> "Scenario":
        s = copy.deepcopy(self)
        if T:
            s.T_schedule = sorted(float(t) for t in T)
            s.provenance["T_schedule"] = "flag"
        if h is not None or R is not None:
            if s.model.kind != "euclidean_box":
                raise ScenarioError("h and R overrides apply to box models only")
            s.model = box(s.n, float(R if R is not None else s.model.R), float(h if h is not None else s.model.h),
                          center=s.model.center, conformal=str(s.model.conformal) if s.model.conformal else None,
                          name=s.name)
            s.shells = None
            s.provenance.update({k: "flag" for k, v in (("h", h), ("R", R)) if v is not None})
        for k, v in thresholds.items():
            if v is None:
                continue
            if k not in s.thresholds:
                raise ScenarioError(f"unknown threshold {k!r}")
            s.thresholds[k] = type(s.thresholds[k])(v)
            s.provenance[k] = "flag"
        return s

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "description": self.description,
            "model": self.model.fingerprint(),
            "f": str(self.f),
            "tameness_class": self.tameness_class,
            "reference_betti": list(self.reference_betti),
            "betti_note": self.betti_note,
            "T_schedule": list(self.T_schedule),
            "thresholds": dict(self.thresholds),
            "stages": dict(self.stages),
            "puncture": self.puncture,
            "expected_failures": list(self.expected_failures),
            "shells": self.tameness_shells(),
            "provenance": dict(sorted(self.provenance.items())),
        }
        if self.boundary is not None:
            out["boundary"] = {
                "geometry": self.boundary.geometry,
                "eta_center": self.boundary.eta_center,
                "eta_steepness": self.boundary.eta_steepness,
                "components": [
                    {"name": c.name, "locus": c.locus, "r": str(c.r), "f_at_boundary": str(c.f_at_boundary),
                     "df_dr": str(c.df_dr), "class": c.cls}
                    for c in self.boundary.components
                ],
                "expected": self.boundary.expected,
            }
        return out


# --------------------------------------------------------------------------
# Loading


def _cylinder_seeds(axis: int, lo: float, hi: float, n_theta: int = 48, n_s: int = 81) -> np.ndarray:
    th = 2 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
    s = np.linspace(lo, hi, n_s)
    T, S = np.meshgrid(th, s, indexing="ij")
    P = np.zeros((T.size, 3))
    other = [a for a in range(3) if a != axis]
    P[:, other[0]] = np.cos(T).ravel()
    P[:, other[1]] = np.sin(T).ravel()
    P[:, axis] = S.ravel()
    return P


def _build_model(d: dict, name: str) -> ManifoldModel:
    kind = d.get("kind", "euclidean_box")
    if kind == "euclidean_box":
        return box(int(d["dimension"]), float(d["R"]), float(d["h"]), center=d.get("center"),
                   conformal=d.get("conformal"), name=name)
    if kind == "embedded_surface":
        cons = parse(d["constraint"], 3)
        axis = d.get("axis")
        seeds = None
        center = tuple(float(v) for v in d.get("center", (0.0, 0.0, 0.0)))
        if axis is not None:
            c = center[axis]
            seeds = tuple(map(tuple, _cylinder_seeds(axis, c - 2.0, c + 2.0)))
        return ManifoldModel("embedded_surface", 2, R=float(d.get("R", 1.0)), h=float(d["h"]), center=center,
                             constraint=cons, seeds=seeds, name=name, axis=axis)
    raise ScenarioError(f"unknown model kind {kind!r}")


def _build_boundary(d: dict, f: Expr, amb: int) -> BoundaryScenario:
    comps = []
    for c in d["components"]:
        cls = c["class"]
        if cls not in ("N1", "N2"):
            raise ScenarioError(f"boundary class must be N1 or N2, got {cls!r}")
        comps.append(BoundaryComponent(c["name"], float(c["locus"]), parse(c["r"], amb),
                                       parse(c["f_at_boundary"], amb), parse(c["df_dr"], amb), cls))
    return BoundaryScenario(d["geometry"], f, comps, float(d.get("eta_center", 0.6)),
                            float(d.get("eta_steepness", 10.0)), dict(d.get("expected", {})), d.get("shells"))


def scenario_from_dict(d: dict, source: str = "") -> Scenario:
    try:
        name = d["name"]
        model = _build_model(d["model"], name)
        f = parse(d["f"], model.ambient_dimension)
        ref = [int(v) for v in d["reference_betti"]]
    except KeyError as exc:
        raise ScenarioError(f"scenario file missing key {exc}") from exc
    if len(ref) != model.dimension + 1:
        raise ScenarioError(f"reference_betti has length {len(ref)}, expected {model.dimension + 1}")
    thr = dict(DEFAULT_THRESHOLDS)
    prov = {k: "default" for k in thr}
    prov.update({"T_schedule": "file", "h": "file", "R": "file"})
    for k, v in d.get("thresholds", {}).items():
        if k not in thr:
            raise ScenarioError(f"unknown threshold {k!r}")
        thr[k] = type(thr[k])(v)
        prov[k] = "file"
    bnd = _build_boundary(d["boundary"], f, model.ambient_dimension) if "boundary" in d else None
    return Scenario(
        name=name,
        description=d.get("description", ""),
        model=model,
        f=f,
        tameness_class=d.get("tameness_class", "strongly_tame"),
        reference_betti=ref,
        betti_note=d.get("betti_note", ""),
        T_schedule=sorted(float(t) for t in d.get("T_schedule", [10.0])),
        thresholds=thr,
        stages=dict(d.get("stages", {})),
        puncture=d.get("puncture"),
        chart=d.get("chart"),
        boundary=bnd,
        expected_failures=list(d.get("expected_failures", [])),
        shells=d.get("shells"),
        source=source,
        provenance=prov,
    )


def load_scenario(name_or_path) -> Scenario:
    """Load a bundled scenario by name, or any scenario file by path."""
    p = Path(str(name_or_path))
    if not p.suffix and not p.exists():
        p = CATALOG_DIR / f"{name_or_path}.toml"
    if not p.is_file():
        raise ScenarioError(f"unknown scenario {name_or_path!r}")
    with open(p, "rb") as fh:
        try:
            d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"{p}: {exc}") from exc
    return scenario_from_dict(d, source=p.name)


def scenario_names() -> list[str]:
    return sorted(p.stem for p in CATALOG_DIR.glob("*.toml"))


def catalog() -> list[Scenario]:
    return [load_scenario(n) for n in scenario_names()]


# --------------------------------------------------------------------------
# Boundary collar extension


def _boundary_samples(bs: BoundaryScenario, comp: BoundaryComponent, count: int = 256) -> np.ndarray:
    if bs.geometry == "interval":
        return np.array([[comp.locus]])
    if bs.geometry == "cylinder":
        t = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(t), np.sin(t), np.full(count, comp.locus)], axis=1)
    raise BoundaryError(f"unsupported boundary geometry {bs.geometry!r}")


def _radial_derivative(f: ScalarField, r: Expr, P) -> np.ndarray:
    # collar coordinates are affine in the ambient axis, so d/dr = grad r / |grad r|^2
    _, gr, _ = eval_many(r, P, order=1)
    return np.sum(f.grad(P) * gr, axis=1) / np.sum(gr * gr, axis=1)


def check_boundary_data(bs: BoundaryScenario, value_tol: float = 1e-10, slope_tol: float = 1e-8) -> list[dict]:
    """Check the closed-form boundary data against f and classify each component by the sign of -df/dr."""
    f = ScalarField(bs.f)
    rows = []
    for comp in bs.components:
        P = _boundary_samples(bs, comp)
        r = eval_many(comp.r, P, order=0)[0]
        if np.max(np.abs(r - 1)) > 1e-12:
            raise BoundaryError(f"{comp.name}: r != 1 on the boundary component")
        fv = f.value(P)
        dv = np.max(np.abs(fv - eval_many(comp.f_at_boundary, P, order=0)[0]))
        slope = _radial_derivative(f, comp.r, P)
        ds = np.max(np.abs(slope - eval_many(comp.df_dr, P, order=0)[0]))
        if dv > value_tol or ds > slope_tol:
            raise BoundaryError(f"{comp.name}: boundary data disagrees with f (value {dv:.3g}, slope {ds:.3g})")
        s = -slope
        if np.any(s == 0) or (np.any(s > 0) and np.any(s < 0)):
            raise BoundaryError(f"{comp.name}: non-transversal, -df/dr changes sign or vanishes on the component")
        comp.sign = "+" if s[0] > 0 else "-"
        rows.append({"component": comp.name, "class": comp.cls + comp.sign, "value_error": float(dv),
                     "slope_error": float(ds), "min_abs_slope": float(np.min(np.abs(s)))})
    return rows


def _eta(r: str, rc: float, k: float) -> str:
    return f"(1 + tanh({k!r}*(({r}) - {rc!r})))/2"


def extend_boundary_function(bs: BoundaryScenario) -> tuple[ManifoldModel, Expr]:
    """Collar extension f~ = f + sum_i eta(r_i) (Q_i - f) on the doubly infinite model.

    Q_i = f(x', 1) + df/dr(x', 1) E(r_i) with E = (r - 1)^2 on N1 collars and
    (r - 1)/2 on N2 collars; eta is a tanh step centred at eta_center.
    """
    check_boundary_data(bs)
    amb = 1 if bs.geometry == "interval" else 3
    src = f"({bs.f})"
    for c in bs.components:
        E = f"(({c.r}) - 1)^2" if c.cls == "N1" else f"((({c.r}) - 1)/2)"
        Q = f"({c.f_at_boundary}) + ({c.df_dr})*{E}"
        src += f" + {_eta(str(c.r), bs.eta_center, bs.eta_steepness)}*(({Q}) - ({bs.f}))"
    expr = parse(src, amb)
    if bs.geometry == "interval":
        model = box(1, 2.5, 0.0025, center=(0.5,), name="interval_extended")
    else:
        axis = 2
        model = ManifoldModel("embedded_surface", 2, R=2.0, h=0.02, center=(0.0, 0.0, 0.5),
                              constraint=parse("x1^2 + x2^2 - 1", 3),
                              seeds=tuple(map(tuple, _cylinder_seeds(axis, -1.5, 2.5))), name="cylinder_extended",
                              axis=axis)
    return model, expr


def boundary_critical_counts(bs: BoundaryScenario, comp: BoundaryComponent) -> list[int]:
    """Morse counts of f restricted to a boundary component (a point, or a circle)."""
    if bs.geometry == "interval":
        return [1]
    m = 4096
    t = 2 * np.pi * np.arange(m) / m
    P = np.stack([np.cos(t), np.sin(t), np.full(m, comp.locus)], axis=1)
    v = eval_many(comp.f_at_boundary, P, order=0)[0]
    prev, nxt = np.roll(v, 1), np.roll(v, -1)
    mins = int(np.count_nonzero((v < prev) & (v < nxt)))
    maxs = int(np.count_nonzero((v > prev) & (v > nxt)))
    return [mins, maxs]


def _pad(v, n):
    return list(v) + [0] * (n + 1 - len(v))


def boundary_tables(bs: BoundaryScenario, n: int, interior: list[int]) -> dict:
    """Counts n_{k,N1+}, l_{k,N2-}, and the predicted designated / induced critical points of f~."""
    nN1p = [0] * (n + 1)
    nN1m = [0] * (n + 1)
    lN2m = [0] * (n + 1)
    for c in bs.components:
        cnt = _pad(boundary_critical_counts(bs, c), n)
        if c.cls == "N1" and c.sign == "+":
            nN1p = [a + b for a, b in zip(nN1p, cnt)]
        elif c.cls == "N1":
            nN1m = [a + b for a, b in zip(nN1m, cnt)]
        elif c.sign == "-":
            # a boundary critical point of index k-1 on N2- contributes in degree k
            lN2m = [a + b for a, b in zip(lN2m, [0] + cnt[:n])]
    shift = lambda v: [0] + v[:n]  # noqa: E731
    designated = [m + a + b for m, a, b in zip(interior, shift(nN1p), nN1m)]
    induced = [a + b for a, b in zip(nN1p, shift(nN1m))]
    return {"interior": list(interior), "n_N1_plus": nN1p, "n_N1_minus": nN1m, "l_N2_minus": lN2m,
            "designated": designated, "induced": induced}


def boundary_inequality_table(betti, m, nN1p, lN2m) -> list[dict]:
    """(-1)^k sum_{i<=k} (-1)^i b_i <= (-1)^k sum_{i<=k} (-1)^i (m_i + n_{i-1,N1+} + l_{i,N2-})."""
    n = len(betti) - 1
    rhs_terms = [m[i] + (nN1p[i - 1] if i > 0 else 0) + lN2m[i] for i in range(n + 1)]
    rows = []
    for k in range(n + 1):
        lhs = (-1) ** k * sum((-1) ** i * betti[i] for i in range(k + 1))
        rhs = (-1) ** k * sum((-1) ** i * rhs_terms[i] for i in range(k + 1))
        rows.append({"k": k, "lhs": int(lhs), "rhs": int(rhs), "holds": bool(lhs <= rhs)})
    return rows


def _inside_M(bs: BoundaryScenario, P) -> np.ndarray:
    r = np.stack([eval_many(c.r, P, order=0)[0] for c in bs.components], axis=1)
    return np.all(r <= 1 + 1e-9, axis=1)


def verify_boundary_scenario(bs: BoundaryScenario, n: int, capture: float = 0.05) -> dict:
    """Locate the critical points of f~ and compare designated / induced counts with the prediction."""
    data = check_boundary_data(bs)
    model, expr = extend_boundary_function(bs)
    F = ScalarField(expr)
    crit = find_critical_points(model, F)
    f = ScalarField(bs.f)
    # interior critical points of f on M itself
    f_crit = [c for c in find_critical_points(model, f) if _inside_M(bs, c.position[None, :])[0]]
    interior = _pad([0] * (n + 1), n)
    for c in f_crit:
        interior[c.index] += 1
    pred = boundary_tables(bs, n, interior)
    found_d = [0] * (n + 1)
    found_i = [0] * (n + 1)
    located = []
    for c in crit:
        p = c.position[None, :]
        r = np.array([eval_many(comp.r, p, order=0)[0][0] for comp in bs.components])
        near_bd = bool(np.any(np.abs(r - 1) <= capture))
        genuine = any(np.linalg.norm(c.position - g.position) <= 2 * model.h for g in f_crit)
        kind = "designated" if near_bd or genuine else "induced"
        (found_d if kind == "designated" else found_i)[c.index] += 1
        located.append({**c.to_dict(), "kind": kind})
    totals = [a + b for a, b in zip(found_d, found_i)]
    out = {
        "boundary_data": data,
        "predicted": pred,
        "found": {"designated": found_d, "induced": found_i, "total": totals},
        "critical_points": located,
        "counts_match": found_d == pred["designated"] and found_i == pred["induced"],
    }
    exp = {k: list(v) for k, v in bs.expected.items()}
    if exp:
        mismatch = {k: (v, pred.get(k)) for k, v in exp.items() if pred.get(k) != v}
        out["expected_match"] = not mismatch
        out["expected_mismatch"] = mismatch
    return out


def verify_scenario(s: Scenario, **kw):
    """Run the full pipeline for ``s``; see :func:`witten_lab.pipeline.run_scenario`."""
    from .pipeline import run_scenario

    return run_scenario(s, stage="verify", **kw)
