"""Rescaled gradient flow, Thom-Smale complexes and the integration chain map.

Trajectories are integrated in the time ``tau = t / T^2`` of the field
``dx/dtau = -grad f / G`` with ``G = |grad f|^2`` outside the core and a smooth
blend to a constant inside, so ``Y = -grad f / (T^2 G)`` in the original time.
Outside the core f drops at unit rate in tau.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .dsl import ScalarField, eval_many
from .geometry import CompactCore, CriticalPoint, ManifoldModel, project_to_surface, surface_gradient

log = logging.getLogger(__name__)


class FlowError(RuntimeError):
    pass


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


@dataclass
class Puncture:
    center: np.ndarray
    radius: float


class FlowField:
    """Y = -F grad f with F = 1/(T^2 |grad f|^2) outside the core."""

    def __init__(self, model: ManifoldModel, f: ScalarField, T: float, core: CompactCore | None = None,
                 puncture: Puncture | None = None, blend: float | None = None):
        self.model, self.f, self.T, self.core, self.puncture = model, f, float(T), core, puncture
        self.surface = model.kind == "embedded_surface"
        self.G_K = 1.0
        self.blend = blend
        if core is not None and not self.surface:
            half = 0.5 * (core.upper - core.lower)
            self.blend = blend or 0.25 * float(np.min(half)) if np.min(half) > 0 else model.h
            self.G_K = float(np.median(np.sum(f.grad(self._core_boundary_samples()) ** 2, axis=1)))

    def _core_boundary_samples(self, m: int = 256):
        lo, hi = self.core.lower, self.core.upper
        if self.model.dimension == 1:
            return np.array([[lo[0]], [hi[0]]])
        t = np.linspace(0, 1, m // 4, endpoint=False)
        sides = [
            np.stack([lo[0] + t * (hi[0] - lo[0]), np.full_like(t, lo[1])], 1),
            np.stack([np.full_like(t, hi[0]), lo[1] + t * (hi[1] - lo[1])], 1),
            np.stack([hi[0] - t * (hi[0] - lo[0]), np.full_like(t, hi[1])], 1),
            np.stack([np.full_like(t, lo[0]), hi[1] - t * (hi[1] - lo[1])], 1),
        ]
        return np.vstack(sides)

    def chi(self, X) -> np.ndarray:
        """Smooth core indicator: 1 deep inside, 0 on and outside the core boundary."""
        if self.core is None:
            return np.ones(len(X)) if self.surface else np.zeros(len(X))
        c = 0.5 * (self.core.upper + self.core.lower)
        half = 0.5 * (self.core.upper - self.core.lower)
        s = np.max(np.abs(X - c) - half, axis=1)
        return _smoothstep(-s / self.blend)

    def gradient(self, X) -> np.ndarray:
        if self.surface:
            return surface_gradient(self.f, self.model.constraint, X)
        return self.f.grad(X)

    def G(self, X, grad=None) -> np.ndarray:
        g = self.gradient(X) if grad is None else grad
        g2 = np.sum(g * g, axis=1)
        if self.surface:
            return np.full(len(X), self.G_K)
        chi = self.chi(X)
        return (1 - chi) * g2 + chi * self.G_K

    def velocity(self, X) -> np.ndarray:
        """dx/dtau = -grad f / G (plus a restoring term keeping surface states on the constraint)."""
        g = self.gradient(X)
        v = -g / self.G(X, g)[:, None]
        if self.surface:
            c, dc, _ = eval_many(self.model.constraint, X, order=1)
            v = v - (10.0 * c / np.sum(dc * dc, axis=1))[:, None] * dc
        return v

    def Y(self, X) -> np.ndarray:
        """The rescaled field in the original time."""
        return self.velocity(X) / self.T**2

    def F(self, X) -> np.ndarray:
        return 1.0 / (self.T**2 * self.G(X))

    def jvp(self, X, W) -> np.ndarray:
        """Directional derivative of the velocity (central differences)."""
        nrm = np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-300)
        eps = 1e-6 / nrm
        return (self.velocity(X + eps * W) - self.velocity(X - eps * W)) / (2 * eps)


# --------------------------------------------------------------------------
# Flow lines


@dataclass
class FlowLine:
    start: np.ndarray
    end: str  # "critical" | "escaped" | "stuck" | "unresolved"
    polyline: np.ndarray = field(repr=False)
    tau: np.ndarray = field(repr=False)
    target: Optional[int] = None  # index into the critical point list when end == "critical"
    sign: Optional[int] = None
    frames: Optional[np.ndarray] = field(default=None, repr=False)  # variational vectors per state
    reason: str = ""
    T: float = 1.0

    @property
    def t(self) -> np.ndarray:
        return self.tau * self.T**2

    def f_values(self, f: ScalarField) -> np.ndarray:
        return f.value(self.polyline)

    def max_f_increase(self, f: ScalarField) -> float:
        fv = self.f_values(f)
        return float(np.max(np.diff(fv))) if len(fv) > 1 else 0.0

    def label(self, crit: Sequence[CriticalPoint]):
        """Discrete outcome used to bracket separatrices.

        Captures record the side of arrival along the slowest stable direction,
        so trajectories reaching the same sink from opposite sides differ.
        """
        if self.end == "critical":
            y = crit[self.target]
            slow = y.stable[:, 0] if y.stable is not None and y.stable.shape[1] else np.ones(len(y.position))
            d = self.polyline[-1] - y.position
            return ("critical", self.target, int(np.sign(d @ slow)))
        if self.end == "escaped":
            last = self.polyline[-1]
            return ("escaped", int(np.argmax(np.abs(last))), int(np.sign(last[np.argmax(np.abs(last))])))
        return (self.end,)


def _batch_integrate(field_: FlowField, X0: np.ndarray, crit: Sequence[CriticalPoint], W0=None, tau_max: float = 1e4,
                     max_steps: int = 200000, rtol: float = 1e-9, atol: float = 1e-9, spacing: float | None = None,
                     r_cap: float | None = None, confirm: int = 3) -> list[FlowLine]:
    """Integrate many trajectories at once, each with its own adaptive step and events."""
    model = field_.model
    m, d = X0.shape
    spacing = spacing or model.h / 4
    r_cap = r_cap or 2 * model.h
    has_w = W0 is not None
    sinks = [i for i, c in enumerate(crit) if c.index == 0]
    sink_pos = np.array([crit[i].position for i in sinks]) if sinks else np.zeros((0, d))

    def rhs(Y):
        X = Y[:, :d]
        v = field_.velocity(X)
        if not has_w:
            return v
        return np.concatenate([v, field_.jvp(X, Y[:, d:])], axis=1)

    Y = np.concatenate([X0, W0], axis=1) if has_w else X0.copy()
    tau = np.zeros(m)
    hstep = np.full(m, 1e-3)
    active = np.ones(m, dtype=bool)
    paths = [[Y[i].copy()] for i in range(m)]
    taus = [[0.0] for _ in range(m)]
    end = ["unresolved"] * m
    reason = [""] * m
    target = [None] * m
    confirm_count = np.zeros(m, dtype=int)
    confirm_target = np.full(m, -1)
    steps = np.zeros(m, dtype=int)
    fprev = field_.f.value(X0)
    K1 = rhs(Y)
    while active.any():
        idx = np.flatnonzero(active)
        y = Y[idx]
        k = [K1[idx]]
        vmax = np.linalg.norm(k[0][:, :d], axis=1)
        h = np.minimum(hstep[idx], spacing / np.maximum(vmax, 1e-300))
        h = np.minimum(h, tau_max - tau[idx] + 1e-12)
        for s in range(1, 7):
            ys = y + h[:, None] * sum(a * kk for a, kk in zip(_A[s], k))
            k.append(rhs(ys))
        ynew = y + h[:, None] * sum(b * kk for b, kk in zip(_B5, k) if b != 0)
        err = h[:, None] * sum(e * kk for e, kk in zip(_E, k) if e != 0)
        scale = atol + rtol * np.maximum(np.abs(y[:, :d]), np.abs(ynew[:, :d]))
        en = np.max(np.abs(err[:, :d]) / scale, axis=1)
        if has_w:
            # the frame comes from differenced velocities; control it relative to its norm
            wn = np.linalg.norm(y[:, d:], axis=1)
            en = np.maximum(en, np.linalg.norm(err[:, d:], axis=1) / (1e-6 * wn + 1e-300))
        ok = en <= 1.0
        fac = 0.9 * np.maximum(en, 1e-10) ** (-0.2)
        hstep[idx] = h * np.clip(fac, 0.2, 5.0)
        acc = idx[ok]
        Y[acc] = ynew[ok]
        K1[acc] = k[6][ok]
        tau[acc] += h[ok]
        steps[idx] += 1
        if acc.size == 0:
            collapse = idx[hstep[idx] < 1e-12]
            for i in collapse:
                end[i], reason[i], active[i] = "stuck", "step collapse", False
            continue
        X = Y[acc, :d]
        if field_.surface:
            X = project_to_surface(model.constraint, X, iters=2)
        fnow = field_.f.value(X)
        for j, i in enumerate(acc):
            paths[i].append(np.concatenate([X[j], Y[i, d:]]) if has_w else X[j].copy())
            taus[i].append(tau[i])
        # events
        for j, i in enumerate(acc):
            x = X[j]
            if field_.puncture is not None and np.linalg.norm(x - field_.puncture.center) < field_.puncture.radius:
                end[i], reason[i], active[i] = "stuck", "puncture", False
                continue
            if not field_.surface and not model.inside(x[None, :])[0]:
                end[i], active[i] = "escaped", False
                continue
            if sinks:
                dist = np.linalg.norm(sink_pos - x, axis=1)
                near = int(np.argmin(dist))
                if dist[near] < r_cap:
                    if confirm_target[i] == near and fnow[j] < fprev[i]:
                        confirm_count[i] += 1
                    elif confirm_target[i] != near:
                        confirm_target[i], confirm_count[i] = near, 0
                    if confirm_count[i] >= confirm:
                        end[i], target[i], active[i] = "critical", sinks[near], False
                        continue
                else:
                    confirm_target[i], confirm_count[i] = -1, 0
            if tau[i] >= tau_max or steps[i] >= max_steps:
                end[i], reason[i], active[i] = "unresolved", "t_max reached", False
        fprev[acc] = fnow
        collapse = idx[(hstep[idx] < 1e-12) & active[idx]]
        for i in collapse:
            end[i], reason[i], active[i] = "stuck", "step collapse", False
    lines = []
    for i in range(m):
        P = np.array(paths[i])
        lines.append(FlowLine(X0[i].copy(), end[i], P[:, :d], np.array(taus[i]), target[i],
                              frames=P[:, d:] if has_w else None, reason=reason[i], T=field_.T))
    return lines


def integrate_flow(field_: FlowField, start, t_max: float, crit: Sequence[CriticalPoint] = (), frame=None,
                   **kw) -> FlowLine:
    """Integrate one trajectory until capture, escape, a stuck state or t_max (original time units)."""
    x0 = np.asarray(start, dtype=float)[None, :]
    r_cap = kw.get("r_cap") or 2 * field_.model.h
    for c in crit:
        if np.linalg.norm(x0[0] - c.position) <= r_cap:
            raise FlowError("start point lies within the capture radius of a critical point")
    W0 = None if frame is None else np.asarray(frame, dtype=float)[None, :]
    return _batch_integrate(field_, x0, crit, W0=W0, tau_max=t_max / field_.T**2, **kw)[0]


# --------------------------------------------------------------------------
# Thom-Smale complex


@dataclass
class Orbit:
    source: int
    target: int
    sign: int
    angle: Optional[float] = None
    line: Optional[FlowLine] = field(default=None, repr=False)


@dataclass
class ThomSmaleComplex:
    crit: list
    boundary: dict  # k -> integer matrix (m_{k-1} x m_k), rows/cols follow `basis`
    basis: dict  # k -> list of indices into crit
    orbits: list
    dropped: list
    diagnostics: dict

    def square(self) -> dict:
        """Products boundary_{k-1} boundary_k for each k >= 2."""
        out = {}
        for k in sorted(self.boundary):
            if k - 1 in self.boundary:
                out[k] = self.boundary[k - 1] @ self.boundary[k]
        return out

    def squares_to_zero(self) -> bool:
        return all(not np.any(M) for M in self.square().values())

    def homology_ranks(self) -> list[int]:
        n = max(self.basis) if self.basis else 0
        rank = {k: int(np.linalg.matrix_rank(M)) if M.size else 0 for k, M in self.boundary.items()}
        return [len(self.basis.get(k, [])) - rank.get(k, 0) - rank.get(k + 1, 0) for k in range(n + 1)]

    def m(self, x: int, y: int) -> int:
        k = self.crit[x].index
        return int(self.boundary[k][self.basis[k - 1].index(y), self.basis[k].index(x)])

    def to_dict(self):
        return {
            "basis": {str(k): [self.crit[i].to_dict() for i in v] for k, v in self.basis.items()},
            "boundary": {str(k): M.astype(int).tolist() for k, M in self.boundary.items()},
            "square": {str(k): M.astype(int).tolist() for k, M in self.square().items()},
            "orbits": [{"source": o.source, "target": o.target, "sign": o.sign} for o in self.orbits],
            "dropped": self.dropped,
            "homology_ranks": self.homology_ranks(),
            "diagnostics": self.diagnostics,
        }


def _shoot_points(field_, x: CriticalPoint, angles, r):
    u = x.unstable
    dirs = np.cos(angles)[:, None] * u[:, 0] + np.sin(angles)[:, None] * u[:, 1]
    dphi = -np.sin(angles)[:, None] * u[:, 0] + np.cos(angles)[:, None] * u[:, 1]
    P = x.position + r * dirs
    if field_.surface:
        P = project_to_surface(field_.model.constraint, P)
    return P, r * dphi


def _closest(line: FlowLine, crit, candidates):
    best = (np.inf, None, None)
    for c in candidates:
        d = np.linalg.norm(line.polyline - crit[c].position, axis=1)
        j = int(np.argmin(d))
        if d[j] < best[0]:
            best = (float(d[j]), c, j)
    return best


def build_thom_smale(model: ManifoldModel, f: ScalarField, T: float, crit: Sequence[CriticalPoint], shoot_count: int = 64,
                     field_: FlowField | None = None, r_shoot: float | None = None, r_cap: float | None = None,
                     tau_max: float = 1e4, bisect_rounds: int = 8, angle_tol: float = 1e-6) -> ThomSmaleComplex:
    """Signed flow-line counts m(x, y) between critical points of adjacent index."""
    field_ = field_ or FlowField(model, f, T)
    h = model.h
    r_shoot = r_shoot or 10 * h
    r_cap = r_cap or 2 * h
    crit = list(crit)
    n = model.dimension
    basis = {k: [i for i, c in enumerate(crit) if c.index == k] for k in range(n + 1)}
    orbits, dropped = [], []
    diag = {"r_cap": r_cap, "r_shoot": r_shoot, "shoot_count": shoot_count, "stuck": 0, "escaped": 0, "unresolved": 0}
    kw = dict(tau_max=tau_max, r_cap=r_cap, spacing=h)
    for xi, x in enumerate(crit):
        if x.index == 1:
            v = x.unstable[:, 0]
            starts = np.stack([x.position + r_shoot * v, x.position - r_shoot * v])
            if field_.surface:
                starts = project_to_surface(model.constraint, starts)
            lines = _batch_integrate(field_, starts, crit, **kw)
            for sgn, line in zip((1, -1), lines):
                if line.end == "critical" and crit[line.target].index == 0:
                    orbits.append(Orbit(xi, line.target, sgn, line=line))
                elif line.end == "stuck":
                    dropped.append({"source": xi, "branch": sgn, "reason": line.reason})
                    diag["stuck"] += 1
                    warnings.warn(f"orbit from critical point {xi} (branch {sgn:+d}) ended stuck: {line.reason}",
                                  RuntimeWarning)
                elif line.end == "unresolved":
                    diag["unresolved"] += 1
                else:
                    diag["escaped"] += 1
        elif x.index == 2:
            _index2_orbits(field_, crit, xi, shoot_count, r_shoot, r_cap, bisect_rounds, angle_tol, kw, orbits,
                           dropped, diag)
    boundary = {}
    for k in range(1, n + 1):
        M = np.zeros((len(basis[k - 1]), len(basis[k])), dtype=np.int64)
        for o in orbits:
            if crit[o.source].index == k and crit[o.target].index == k - 1:
                M[basis[k - 1].index(o.target), basis[k].index(o.source)] += o.sign
        boundary[k] = M
    return ThomSmaleComplex(crit, boundary, basis, orbits, dropped, diag)


def _index2_orbits(field_, crit, xi, shoot_count, r_shoot, r_cap, rounds, angle_tol, kw, orbits, dropped, diag):
    """Bracket separatrices between fan angles with different outcomes, refine, keep saddle connections."""
    x = crit[xi]
    saddles = [i for i, c in enumerate(crit) if c.index == 1]
    angles = 2 * np.pi * (np.arange(shoot_count) + 0.5) / shoot_count
    P, W = _shoot_points(field_, x, angles, r_shoot)
    lines = _batch_integrate(field_, P, crit, W0=W, **kw)
    labels = [ln.label(crit) for ln in lines]
    for ln in lines:
        if ln.end == "stuck":
            diag["stuck"] += 1
    brackets = [(angles[j], angles[j] + 2 * np.pi / shoot_count, labels[j], labels[(j + 1) % shoot_count])
                for j in range(shoot_count) if labels[j] != labels[(j + 1) % shoot_count]]
    found = []
    sub = 16
    for _ in range(rounds):
        if not brackets:
            break
        cand = np.concatenate([np.linspace(a, b, sub + 2)[1:-1] for a, b, _, _ in brackets])
        P, W = _shoot_points(field_, x, cand, r_shoot)
        res = _batch_integrate(field_, P, crit, W0=W, **kw)
        new = []
        for bi, (a, b, la, lb) in enumerate(brackets):
            grid = np.linspace(a, b, sub + 2)
            labs = [la] + [res[bi * sub + j].label(crit) for j in range(sub)] + [lb]
            for j in range(sub + 1):
                if labs[j] != labs[j + 1]:
                    new.append((grid[j], grid[j + 1], labs[j], labs[j + 1]))
        brackets = new
        if brackets and max(b - a for a, b, _, _ in brackets) < angle_tol:
            break
    # resolve each bracket at its midpoint
    if brackets:
        mids = np.array([0.5 * (a + b) for a, b, _, _ in brackets])
        P, W = _shoot_points(field_, x, mids, r_shoot)
        res = _batch_integrate(field_, P, crit, W0=W, **kw)
        for (a, b, la, lb), mid, line in zip(brackets, mids, res):
            dist, s, j = _closest(line, crit, saddles) if saddles else (np.inf, None, None)
            if s is None or dist >= r_cap:
                continue  # node-type or mask-boundary discontinuity, not a saddle connection
            w = line.frames[j]
            sgn = int(np.sign(w @ crit[s].unstable[:, 0]))
            found.append((float(mid % (2 * np.pi)), s, sgn, line))
    found.sort(key=lambda t: t[0])
    merged = []
    for ang, s, sgn, line in found:
        if merged and abs(ang - merged[-1][0]) < 10 * angle_tol:
            if merged[-1][1] != s:
                raise FlowError("transversality suspect: distinct saddle connections merge within angular tolerance")
            continue
        merged.append((ang, s, sgn, line))
    for ang, s, sgn, line in merged:
        orbits.append(Orbit(xi, s, sgn, angle=ang, line=line))


# --------------------------------------------------------------------------
# Chain map


def cochain_interpolant(model: ManifoldModel, cd, k: int, vec: np.ndarray, f: ScalarField, T: float):
    """Callable P -> per-component values of e^{Tf} omega, interpolated from cell centres.

    The untwisted cochain e^{Tf} omega is smooth where omega itself varies on
    the scale exp(-T f), so it is the quantity to interpolate.
    """
    cx = cd.cx
    n = model.dimension
    full = np.zeros(len(cx.positions[k]))
    keep = cd.keep[k]
    with np.errstate(divide="ignore"):
        logs = T * cd.fvals[k] + np.log(np.abs(vec))
    full[keep] = np.sign(vec) * np.exp(np.minimum(logs, 700))
    N, h = model.cells, model.h
    ax = model.axes()
    mids = [a[:-1] + h / 2 for a in ax]
    comps = []
    if n == 1:
        grids = [(ax[0],)] if k == 0 else [(mids[0],)]
        comps = [full]
    elif k == 0:
        grids, comps = [(ax[0], ax[1])], [full.reshape(N + 1, N + 1)]
    elif k == 1:
        nx = N * (N + 1)
        grids = [(mids[0], ax[1]), (ax[0], mids[1])]
        comps = [full[:nx].reshape(N, N + 1), full[nx:].reshape(N + 1, N)]
    else:
        grids, comps = [(mids[0], mids[1])], [full.reshape(N, N)]
    interps = [RegularGridInterpolator(g, c.reshape([len(a) for a in g]), bounds_error=False, fill_value=0.0)
               for g, c in zip(grids, comps)]

    def evaluate(P):
        return np.stack([it(np.atleast_2d(P)) for it in interps], axis=1)

    return evaluate


def _resample(P: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return P
    m = max(2, int(np.ceil(s[-1] / spacing)) + 1)
    t = np.linspace(0, s[-1], m)
    return np.stack([np.interp(t, s, P[:, i]) for i in range(P.shape[1])], axis=1)


@dataclass
class UnstableManifold:
    """Sampled parametrization of W^u(x) used by the chain map."""

    kind: int
    point: np.ndarray
    branches: list = field(default_factory=list)  # index 1: [(sign, polyline)]
    fan: list = field(default_factory=list)  # index 2: FlowLines with frames
    fan_angles: Optional[np.ndarray] = None
    r_shoot: float = 0.0
    orientation: float = 1.0
    basis: Optional[np.ndarray] = None
    complete: bool = True


def unstable_manifolds(field_: FlowField, crit: Sequence[CriticalPoint], r_shoot: float | None = None,
                       n_fan: int = 256, tau_max: float = 1e4) -> list[UnstableManifold]:
    model = field_.model
    h = model.h
    r_shoot = r_shoot or 10 * h
    out = []
    for x in crit:
        if x.index == 0:
            out.append(UnstableManifold(0, x.position))
        elif x.index == 1:
            v = x.unstable[:, 0]
            starts = np.stack([x.position + r_shoot * v, x.position - r_shoot * v])
            lines = _batch_integrate(field_, starts, crit, tau_max=tau_max, spacing=h / 4)
            um = UnstableManifold(1, x.position, r_shoot=r_shoot)
            for sgn, line in zip((1, -1), lines):
                P = line.polyline
                if line.end == "critical":
                    P = np.vstack([P, crit[line.target].position])
                elif line.end in ("unresolved", "stuck"):
                    um.complete = False
                um.branches.append((sgn, np.vstack([x.position, P])))
            out.append(um)
        else:
            angles = 2 * np.pi * (np.arange(n_fan) + 0.5) / n_fan
            P, W = _shoot_points(field_, x, angles, r_shoot)
            lines = _batch_integrate(field_, P, crit, W0=W, tau_max=tau_max, spacing=h / 4)
            u = x.unstable
            orient = float(np.sign(np.linalg.det(u[:2, :2]))) if u.shape[0] == 2 else 1.0
            out.append(UnstableManifold(2, x.position, fan=lines, fan_angles=angles, r_shoot=r_shoot,
                                        orientation=orient, basis=u,
                                        complete=all(ln.end in ("critical", "escaped") for ln in lines)))
    return out


def _segments(interp, P: np.ndarray) -> np.ndarray:
    """Per-segment trapezoid contributions of the 1-form along a polyline."""
    if len(P) < 2:
        return np.zeros(0)
    V = interp(P)
    return np.sum(0.5 * (V[:-1] + V[1:]) * np.diff(P, axis=0), axis=1)


def _check_tail(tail: float, scale: float, tol: float) -> None:
    if scale > 0 and tail > tol * scale:
        raise FlowError(f"integral not converged (tail {tail:.3g} vs accumulated {scale:.3g}); extend t_max")


def integrate_over(um: UnstableManifold, interp, h: float, tail_tol: float = 1e-8) -> float:
    """Integral of the untwisted form over one unstable manifold."""
    if um.kind == 0:
        return float(interp(um.point[None, :])[0, 0])
    if not um.complete:
        raise FlowError("integral not converged; extend t_max")
    if um.kind == 1:
        total, scale, tail = 0.0, 0.0, 0.0
        for sgn, P in um.branches:
            seg = _segments(interp, _resample(P, h / 4))
            # branches run away from x; W^u(x) is oriented by +v, so the -v branch counts negatively
            total += sgn * float(np.sum(seg))
            scale += float(np.sum(np.abs(seg)))
            tail = max(tail, abs(float(seg[-1])) if len(seg) else 0.0)
        _check_tail(tail, scale, tail_tol)
        return total
    # index 2: fan of trajectories, signed area element det(dp/dtau, dp/dphi)
    dphi = 2 * np.pi / len(um.fan)
    total, scale, tail = 0.0, 0.0, 0.0
    for line in um.fan:
        P, W = line.polyline, line.frames
        if len(P) < 3:
            continue
        c = interp(P)[:, 0]
        V = np.gradient(P, line.tau, axis=0)
        dens = c * (V[:, 0] * W[:, 1] - V[:, 1] * W[:, 0])
        seg = dphi * 0.5 * (dens[:-1] + dens[1:]) * np.diff(line.tau)
        total += float(np.sum(seg))
        scale += float(np.sum(np.abs(seg)))
        if line.end == "escaped":
            tail = max(tail, abs(float(seg[-1])))
    _check_tail(tail, scale, tail_tol)
    # inside the shooting disk W^u(x) is the disk itself: polar trapezoid rule
    radii = np.linspace(0.0, um.r_shoot, max(3, int(np.ceil(um.r_shoot / (h / 4))) + 1))
    phis = um.fan_angles
    dirs = np.cos(phis)[:, None] * um.basis[:, 0] + np.sin(phis)[:, None] * um.basis[:, 1]
    X = um.point + radii[:, None, None] * dirs[None, :, :]
    U = interp(X.reshape(-1, X.shape[-1]))[:, 0].reshape(len(radii), len(phis))
    disk = dphi * float(np.trapezoid(U.sum(axis=1) * radii, radii))
    # the fan term is already signed by det(dp/dtau, dp/dphi); on the disk det(e_r, e_phi) = det(u1, u2)
    return total + um.orientation * disk


@dataclass
class ChainMapMatrix:
    J: dict  # k -> (m_k x dim F^k)
    defect: dict  # k -> relative commutation defect (normalized by the larger side)
    defect_global: dict  # k -> defect normalized by max |J| over all degrees
    singular_ratio: dict  # k -> s_min / s_max

    def invertible(self, tol: float = 1e-3) -> bool:
        return all(r > tol for r in self.singular_ratio.values())

    def to_dict(self):
        return {
            "J": {str(k): np.asarray(v).tolist() for k, v in self.J.items()},
            "defect": {str(k): v for k, v in self.defect.items()},
            "defect_global": {str(k): v for k, v in self.defect_global.items()},
            "singular_ratio": {str(k): v for k, v in self.singular_ratio.items()},
        }


def chain_map_J(spaces, complex_: ThomSmaleComplex, model: ManifoldModel, f: ScalarField, T: float,
                field_: FlowField | None = None, n_fan: int = 256) -> ChainMapMatrix:
    """Integrate window eigenforms (times e^{Tf}) over unstable manifolds; check J d = del' J."""
    from .witten import deformed_complex

    if model.dimension > 2 or model.kind != "euclidean_box":
        raise FlowError("chain map supported on box models with n <= 2")
    cd = deformed_complex(model, f, T)
    field_ = field_ or FlowField(model, f, T)
    crit = complex_.crit
    ums = unstable_manifolds(field_, crit, n_fan=n_fan)
    n = model.dimension
    h = model.h

    def J_of(k, vec):
        interp = cochain_interpolant(model, cd, k, vec, f, T)
        return np.array([integrate_over(ums[i], interp, h) for i in complex_.basis[k]])

    J = {}
    for k in range(n + 1):
        B = spaces[k].basis()
        J[k] = np.stack([J_of(k, B[:, j]) for j in range(B.shape[1])], axis=1) if B.shape[1] else np.zeros((len(complex_.basis[k]), 0))
        if J[k].shape[0] != J[k].shape[1]:
            raise FlowError(f"J_{k} is not square ({J[k].shape}); eigenvalue count and Morse count differ")
    gmax = max((float(np.max(np.abs(M))) for M in J.values() if M.size), default=0.0) or 1.0
    defect, defect_g, ratio = {}, {}, {}
    for k in range(n):
        B = spaces[k].basis()
        if B.shape[1] == 0 or len(complex_.basis[k + 1]) == 0:
            defect[k] = 0.0
            defect_g[k] = 0.0
            continue
        lhs = np.stack([J_of(k + 1, cd.d[k] @ B[:, j]) for j in range(B.shape[1])], axis=1)
        rhs = complex_.boundary[k + 1].T @ J[k]
        diff = np.linalg.norm(lhs - rhs)
        scale = max(np.linalg.norm(lhs), np.linalg.norm(rhs), 1e-300)
        defect[k] = float(diff / scale)
        defect_g[k] = float(diff / gmax)
    for k, M in J.items():
        if M.size:
            s = np.linalg.svd(M, compute_uv=False)
            ratio[k] = float(s.min() / s.max()) if s.max() > 0 else 0.0
    return ChainMapMatrix(J, defect, defect_g, ratio)


# --------------------------------------------------------------------------
# Flow checks


def flow_distance_check(field_: FlowField, rho, lines: Sequence[FlowLine], T: float) -> dict:
    """|rho_T(x(t)) - rho_T(x(t0)) -/+ b (t - t0) / T| along the part of each line outside the core.

    Outside the core the rescaled flow moves at speed b/T in the Agmon metric,
    so along an outgoing line rho grows at that rate (incoming lines: shrinks).
    The deviation must stay bounded, with non-increasing drift.
    """
    b = rho.b
    rows = []
    for line in lines:
        P = line.polyline
        outside = ~rho.core.mask(P)
        if not outside.any():
            rows.append({"status": "skipped", "reason": "line inside core"})
            continue
        first = int(np.argmax(outside))
        stop = first + (int(np.argmin(outside[first:])) if not outside[first:].all() else len(P) - first)
        if stop - first < 8:
            rows.append({"status": "skipped", "reason": "too few points outside core"})
            continue
        t = line.t[first:stop] - line.t[first]
        r = rho.at(P[first:stop])
        s = 1.0 if r[-1] >= r[0] else -1.0
        dev = np.abs(r - r[0] - s * b * t / T)
        half = len(dev) // 2
        drift = float(np.polyfit(t[half:], dev[half:], 1)[0])
        tol = 1e-3 * b / T
        rows.append({"status": "pass" if drift <= tol else "fail", "direction": "out" if s > 0 else "in",
                     "max_deviation": float(dev.max()), "drift": drift, "drift_tolerance": tol,
                     "t_span": float(t[-1])})
    ok = all(r["status"] in ("pass", "skipped") for r in rows) and any(r["status"] == "pass" for r in rows)
    return {"lines": rows, "pass": ok}


def jacobian_growth_check(field_: FlowField, line: FlowLine, rho, epsilon: float, k: int) -> dict:
    """|det dPhi^t| on W^u against C exp(k eps rho_T), C fitted on the first half of the line."""
    if line.frames is None or len(line.polyline) < 4:
        return {"status": "skipped", "reason": "no variational frame"}
    W = line.frames
    if k == 1:
        det = np.linalg.norm(W, axis=1) / np.linalg.norm(W[0])
    else:
        raise FlowError("jacobian check implemented for one-dimensional unstable manifolds")
    if not np.all(np.isfinite(det)):
        raise FlowError("linearized integration overflow")
    r = rho.at(line.polyline) if rho is not None else np.zeros(len(det))
    logC = np.log(np.maximum(det, 1e-300)) - k * epsilon * r
    half = len(logC) // 2
    C = float(np.exp(np.max(logC[:half])))
    excess = float(np.max(logC[half:]) - np.log(C))
    return {"status": "pass" if excess <= 1e-6 else "fail", "C": C, "max_log_excess": excess, "epsilon": epsilon, "k": k}


def branch_with_frame(field_: FlowField, x: CriticalPoint, crit, sign: int = 1, r_shoot: float | None = None,
                      tau_max: float = 1e4) -> FlowLine:
    """Index-1 shooting branch with its tangent variational vector transported along."""
    r_shoot = r_shoot or 10 * field_.model.h
    v = x.unstable[:, 0] * sign
    start = x.position + r_shoot * v
    if field_.surface:
        start = project_to_surface(field_.model.constraint, start[None, :])[0]
    return _batch_integrate(field_, start[None, :], crit, W0=v[None, :], tau_max=tau_max)[0]
