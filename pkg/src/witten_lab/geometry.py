"""Manifold models, critical points, tameness audits and compact cores."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dsl import Expr, ScalarField, eval_many, parse

log = logging.getLogger(__name__)

MORSE_TOL = 1e-8
GRAD_TOL = 1e-9


class GeometryError(RuntimeError):
    pass


class CoreTooLarge(GeometryError):
    pass


@dataclass(frozen=True)
class ManifoldModel:
    """Flat box ``center + [-R, R]^n`` or an implicit surface in R^3.

    ``conformal`` multiplies the flat metric (g = phi * g_flat) and is only
    supported on 2D boxes.  A surface with ``axis`` set is unbounded along that
    ambient axis (cylinders); otherwise surfaces are compact.
    """

    kind: str
    dimension: int
    R: float = 1.0
    h: float = 0.0625
    center: tuple = ()
    constraint: Optional[Expr] = None
    seeds: Optional[tuple] = None
    conformal: Optional[Expr] = None
    name: str = ""
    axis: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("euclidean_box", "embedded_surface"):
            raise GeometryError(f"unknown model kind {self.kind!r}")
        if self.dimension not in (1, 2):
            raise GeometryError("only dimensions 1 and 2 are supported")
        if not self.center:
            object.__setattr__(self, "center", (0.0,) * self.ambient_dimension)
        if self.kind == "euclidean_box":
            if self.R <= 0 or self.h <= 0:
                raise GeometryError("R and h must be positive")
            ratio = self.R / self.h
            if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 16:
                raise GeometryError(f"R/h = {ratio:g} must be an integer >= 16")
            if self.conformal is not None and self.dimension != 2:
                raise GeometryError("conformal factors are supported in 2D only")
        else:
            if self.dimension != 2 or self.constraint is None:
                raise GeometryError("embedded surfaces need dimension 2 and a constraint")

    @property
    def ambient_dimension(self) -> int:
        return 3 if self.kind == "embedded_surface" else self.dimension

    @property
    def is_compact(self) -> bool:
        return self.kind == "embedded_surface" and self.axis is None

    @property
    def cells(self) -> int:
        """Number of grid cells per axis."""
        return int(round(2 * self.R / self.h))

    def axes(self) -> list[np.ndarray]:
        N = self.cells
        return [c - self.R + self.h * np.arange(N + 1) for c in self.center]

    def nodes(self) -> np.ndarray:
        """All grid nodes, shape ((N+1)^n, n), C-ordered (last axis fastest)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def inside(self, points) -> np.ndarray:
        P = np.atleast_2d(points)
        c = np.asarray(self.center)
        return np.all(np.abs(P - c) <= self.R + 1e-12, axis=1)

    def fingerprint(self) -> dict:
        return {
            "kind": self.kind,
            "dimension": self.dimension,
            "R": self.R,
            "h": self.h,
            "center": list(self.center),
            "constraint": str(self.constraint) if self.constraint is not None else None,
            "conformal": str(self.conformal) if self.conformal is not None else None,
            "axis": self.axis,
        }


def box(dimension: int, R: float, h: float, center=None, conformal: str | None = None, name="") -> ManifoldModel:
    conf = parse(conformal, dimension) if conformal else None
    return ManifoldModel("euclidean_box", dimension, R=R, h=h, center=tuple(center or ()), conformal=conf, name=name)


def unit_sphere(h: float = 0.02, name="sphere") -> ManifoldModel:
    return ManifoldModel(
        "embedded_surface", 2, R=1.0, h=h, constraint=parse("x1^2 + x2^2 + x3^2 - 1", 3), name=name
    )


@dataclass(frozen=True)
class CriticalPoint:
    position: np.ndarray
    index: int
    f_value: float
    hessian_eigs: np.ndarray
    unstable: np.ndarray = field(default=None, repr=False)  # columns: unstable directions (ambient coords)
    stable: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "index": int(self.index),
            "f_value": float(self.f_value),
            "hessian_eigs": [float(v) for v in self.hessian_eigs],
        }


# --------------------------------------------------------------------------
# Surface helpers


def project_to_surface(constraint: Expr, points, iters: int = 30) -> np.ndarray:
    """Gauss-Newton projection of ambient points onto the level set {g = 0}."""
    P = np.array(points, dtype=float, ndmin=2)
    for _ in range(iters):
        g, dg, _ = eval_many(constraint, P, order=1)
        nrm2 = np.sum(dg * dg, axis=1)
        if np.any(nrm2 < 1e-24):
            raise GeometryError("surface constraint gradient vanishes; level set not regular")
        P = P - (g / nrm2)[:, None] * dg
        if np.max(np.abs(g)) < 1e-15:
            break
    return P


def tangent_basis(normal: np.ndarray) -> np.ndarray:
    """Orthonormal 3x2 basis of the plane orthogonal to ``normal``."""
    n = normal / np.linalg.norm(normal)
    a = np.eye(3)[np.argmin(np.abs(n))]
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2], axis=1)


def surface_gradient(f: ScalarField, constraint: Expr, P) -> np.ndarray:
    """Tangential projection of the ambient gradient (the induced-metric gradient)."""
    _, gf, _ = eval_many(f.expr, P, order=1)
    _, gn, _ = eval_many(constraint, P, order=1)
    n = gn / np.linalg.norm(gn, axis=1, keepdims=True)
    return gf - np.sum(gf * n, axis=1, keepdims=True) * n


def intrinsic_hessian(f: ScalarField, constraint: Expr, p) -> tuple[np.ndarray, np.ndarray]:
    """Tangent-space Hessian of f on {g=0} at p and the tangent basis used.

    Hess = P (H_f - lam H_g) P with lam the Lagrange multiplier, which is the
    ambient Hessian corrected by the second fundamental form.
    """
    p = np.asarray(p, dtype=float)[None, :]
    _, gf, Hf = eval_many(f.expr, p)
    _, gg, Hg = eval_many(constraint, p)
    gf, gg, Hf, Hg = gf[0], gg[0], Hf[0], Hg[0]
    lam = gf @ gg / (gg @ gg)
    B = tangent_basis(gg)
    return B.T @ (Hf - lam * Hg) @ B, B


def fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


# --------------------------------------------------------------------------
# Critical points


def _newton_flat(f: ScalarField, X: np.ndarray, step_cap: float, iters: int = 60):
    X = X.copy()
    for _ in range(iters):
        _, g, H = f.jet(X)
        try:
            dx = np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            dx = np.zeros_like(g)
            for i in range(len(X)):
                dx[i] = np.linalg.lstsq(H[i], g[i], rcond=None)[0]
        nrm = np.linalg.norm(dx, axis=1, keepdims=True)
        dx = np.where(nrm > step_cap, dx * step_cap / np.maximum(nrm, 1e-300), dx)
        X = X - dx
        if np.all(np.linalg.norm(dx, axis=1) < 1e-14):
            break
    return X


def _newton_surface(f: ScalarField, constraint: Expr, X: np.ndarray, step_cap: float, iters: int = 60):
    """Newton on the Lagrange system grad f = lam grad g, g = 0."""
    X = project_to_surface(constraint, X)
    m = len(X)
    _, gf, _ = eval_many(f.expr, X, order=1)
    _, gg, _ = eval_many(constraint, X, order=1)
    lam = np.sum(gf * gg, axis=1) / np.sum(gg * gg, axis=1)
    for _ in range(iters):
        _, gf, Hf = eval_many(f.expr, X)
        gv, gg, Hg = eval_many(constraint, X)
        J = np.zeros((m, 4, 4))
        J[:, :3, :3] = Hf - lam[:, None, None] * Hg
        J[:, :3, 3] = -gg
        J[:, 3, :3] = gg
        r = np.concatenate([gf - lam[:, None] * gg, gv[:, None]], axis=1)
        step = np.zeros((m, 4))
        for i in range(m):
            try:
                step[i] = np.linalg.solve(J[i], r[i])
            except np.linalg.LinAlgError:
                step[i] = np.linalg.lstsq(J[i], r[i], rcond=None)[0]
        nrm = np.linalg.norm(step[:, :3], axis=1, keepdims=True)
        scale = np.where(nrm > step_cap, step_cap / np.maximum(nrm, 1e-300), 1.0)
        X = X - scale * step[:, :3]
        lam = lam - scale[:, 0] * step[:, 3]
        X = project_to_surface(constraint, X, iters=3)
        if np.max(np.abs(step)) < 1e-14:
            break
    return X


def classify(f: ScalarField, p, model: ManifoldModel) -> CriticalPoint:
    p = np.asarray(p, dtype=float)
    if model.kind == "embedded_surface":
        H, B = intrinsic_hessian(f, model.constraint, p)
    else:
        _, _, H = f.jet(p[None, :])
        H, B = H[0], np.eye(model.dimension)
    w, V = np.linalg.eigh(H)
    if np.min(np.abs(w)) < MORSE_TOL:
        raise GeometryError(f"not Morse at resolution: Hessian eigenvalues {w} at {p}")
    amb = B @ V  # ambient eigenvectors, ascending eigenvalue
    amb = amb * np.where(amb[np.argmax(np.abs(amb), axis=0), np.arange(amb.shape[1])] < 0, -1.0, 1.0)
    neg = w < 0
    return CriticalPoint(
        position=p,
        index=int(np.count_nonzero(neg)),
        f_value=float(f.value(p[None, :])[0]),
        hessian_eigs=w,
        unstable=amb[:, neg],
        stable=amb[:, ~neg],
    )


def _gradient_at(model, f, P):
    if model.kind == "embedded_surface":
        return surface_gradient(f, model.constraint, P)
    return f.grad(P)


def find_critical_points(model: ManifoldModel, f: ScalarField, seeds=None) -> list[CriticalPoint]:
    """Newton from every grid seed, deduplicate within 2h, classify by Hessian."""
    h = model.h
    if model.kind == "embedded_surface":
        S = np.asarray(seeds if seeds is not None else (model.seeds or fibonacci_sphere(max(200, int(4 * np.pi / h**2) // 4))))
        X = _newton_surface(f, model.constraint, S, step_cap=0.25)
    else:
        S = np.asarray(seeds) if seeds is not None else model.nodes()
        X = _newton_flat(f, S, step_cap=max(4 * h, model.R / 8))
    ok = np.all(np.isfinite(X), axis=1)
    X = X[ok]
    if model.kind == "euclidean_box":
        X = X[model.inside(X)]
    g = _gradient_at(model, f, X) if len(X) else np.zeros((0, model.ambient_dimension))
    X = X[np.linalg.norm(g, axis=1) < GRAD_TOL]
    roots: list[np.ndarray] = []
    for x in X[np.lexsort(X.T[::-1])]:
        if all(np.linalg.norm(x - r) > 2 * h for r in roots):
            roots.append(x)
    crit = [classify(f, r, model) for r in roots]
    crit.sort(key=lambda c: tuple(np.round(c.position, 12)))
    if model.kind == "euclidean_box":
        _warn_missed(model, f, crit)
    return crit


def _warn_missed(model, f, crit):
    """Flag grid cells whose gradient components all change sign without a nearby root."""
    n = model.dimension
    N = model.cells
    G = f.grad(model.nodes()).reshape((N + 1,) * n + (n,))
    sign = np.sign(G)
    if n == 1:
        flag = sign[:-1, 0] * sign[1:, 0] <= 0
        centers = model.axes()[0][:-1][flag] + model.h / 2
        cand = centers[:, None]
    else:
        changes = []
        for c in range(2):
            s = sign[..., c]
            corners = np.stack([s[:-1, :-1], s[1:, :-1], s[:-1, 1:], s[1:, 1:]])
            changes.append((corners.max(axis=0) > 0) & (corners.min(axis=0) < 0) | np.any(corners == 0, axis=0))
        flag = changes[0] & changes[1]
        ii, jj = np.nonzero(flag)
        ax = model.axes()
        cand = np.stack([ax[0][ii] + model.h / 2, ax[1][jj] + model.h / 2], axis=1)
    for c in cand:
        if not any(np.linalg.norm(c - p.position) < 2 * model.h for p in crit):
            warnings.warn(f"possible missed critical point near {np.round(c, 6).tolist()}", RuntimeWarning)


# --------------------------------------------------------------------------
# Tameness


@dataclass
class TamenessReport:
    c_f_estimate: float
    epsilon_f_estimate: float
    verdict: str
    shell_samples: list
    note: str = "verdict at sample resolution"

    def to_dict(self):
        return {
            "c_f_estimate": self.c_f_estimate,
            "epsilon_f_estimate": self.epsilon_f_estimate,
            "verdict": self.verdict,
            "shell_samples": [list(map(float, s)) for s in self.shell_samples],
            "note": self.note,
        }


def metric_norms(model: ManifoldModel, f: ScalarField, P):
    """|grad f|_g and the operator norm of Hess f in the model metric at points P."""
    if model.kind == "embedded_surface":
        grad = np.linalg.norm(surface_gradient(f, model.constraint, P), axis=1)
        hess = np.array([np.max(np.abs(np.linalg.eigvalsh(intrinsic_hessian(f, model.constraint, p)[0]))) for p in P])
        return grad, hess
    _, g, H = f.jet(P)
    if model.conformal is None:
        return np.linalg.norm(g, axis=1), np.max(np.abs(np.linalg.eigvalsh(H)), axis=1)
    phi, dphi, _ = eval_many(model.conformal, P, order=1)
    if np.any(phi <= 0):
        raise GeometryError("conformal factor must be positive")
    # g = phi * flat = e^{2 sigma} flat; Levi-Civita correction of the Hessian
    ds = 0.5 * dphi / phi[:, None]
    corr = ds[:, :, None] * g[:, None, :] + g[:, :, None] * ds[:, None, :]
    Ht = H - corr + np.sum(ds * g, axis=1)[:, None, None] * np.eye(2)
    grad_g = np.linalg.norm(g, axis=1) / np.sqrt(phi)
    hess_g = np.max(np.abs(np.linalg.eigvalsh(Ht)), axis=1) / phi
    return grad_g, hess_g


def shell_points(model: ManifoldModel, r: float, density: int = 1) -> np.ndarray:
    c = np.asarray(model.center, dtype=float)
    if model.kind == "embedded_surface":
        # non-compact surface: rings at axial distance r on both ends
        m = 64 * model.dimension * density
        t = 2 * np.pi * np.arange(m) / m
        rings = []
        for sgn in (-1.0, 1.0):
            P = np.tile(c, (m, 1))
            other = [a for a in range(3) if a != model.axis]
            P[:, other[0]] += np.cos(t)
            P[:, other[1]] += np.sin(t)
            P[:, model.axis] += sgn * r
            rings.append(P)
        return project_to_surface(model.constraint, np.vstack(rings))
    if model.dimension == 1:
        return c + np.array([[-r], [r]])
    m = 64 * model.dimension * density
    t = 2 * np.pi * np.arange(m) / m
    return c + r * np.stack([np.cos(t), np.sin(t)], axis=1)


def check_tameness(model: ManifoldModel, f: ScalarField, shells: Sequence[float], density: int = 1) -> TamenessReport:
    """Sample sup |Hess f|/|grad f|^2 and inf |grad f| on outer shells and classify the trend."""
    if model.is_compact:
        return TamenessReport(0.0, float("inf"), "strongly_tame", [], note="compact model; conditions at infinity are vacuous")
    shells = list(map(float, shells))
    if any(b <= a for a, b in zip(shells, shells[1:])):
        raise GeometryError("shells must be strictly increasing")
    if shells[0] <= 0 or (model.kind == "euclidean_box" and shells[-1] > model.R + 1e-12):
        raise GeometryError(f"shell radius {shells[-1]} outside box R={model.R}")
    samples = []
    for r in shells:
        P = shell_points(model, r, density)
        grad, hess = metric_norms(model, f, P)
        with np.errstate(divide="ignore"):
            ratio = np.where(grad > 0, hess / grad**2, np.inf)
        samples.append((r, float(np.max(ratio)), float(np.min(grad))))
    ratio = np.array([s[1] for s in samples])
    grad = np.array([s[2] for s in samples])
    c_f = float(np.max(ratio))
    eps = float(np.min(grad))
    outer_r, outer_g = ratio[-3:], grad[-3:]
    if eps == 0 or not np.isfinite(c_f) or outer_g[-1] < 0.5 * outer_g[0] or outer_r[-1] > 2 * outer_r[0] + 1e-12:
        verdict = "not_tame"
    elif np.all(np.diff(outer_r) <= 1e-12 * max(1.0, outer_r[0])) and np.all(np.diff(outer_g) > 0) and outer_g[-1] >= 2 * outer_g[0]:
        verdict = "strongly_tame"
    else:
        verdict = "well_tame"
    return TamenessReport(c_f, eps, verdict, samples)


# --------------------------------------------------------------------------
# Compact core


@dataclass
class CompactCore:
    description: str
    lower: np.ndarray
    upper: np.ndarray
    contains: list
    D_margin: float
    T: float = 0.0
    b: float = 0.9
    radius: float = 0.0  # for ball unions
    centers: Optional[np.ndarray] = None

    def mask(self, points) -> np.ndarray:
        P = np.atleast_2d(points)
        if self.description == "ball":
            d = np.min(np.linalg.norm(P[:, None, :] - self.centers[None, :, :], axis=2), axis=1)
            return d <= self.radius + 1e-12
        return np.all((P >= self.lower - 1e-12) & (P <= self.upper + 1e-12), axis=1)

    def to_dict(self):
        out = {
            "description": self.description,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "D_margin": self.D_margin,
            "T": self.T,
            "b": self.b,
            "contains": [c.to_dict() for c in self.contains],
        }
        if self.description == "ball":
            out["radius"] = self.radius
        return out


def base_point(crit: Sequence[CriticalPoint]) -> CriticalPoint:
    """Critical point with minimal |f|, ties broken by sorted position."""
    order = sorted(crit, key=lambda c: (round(abs(c.f_value), 12), tuple(c.position)))
    return order[0]


def core_D(crit: Sequence[CriticalPoint], T: float, b: float, p0: CriticalPoint | None = None) -> float:
    p0 = p0 or base_point(crit)
    fv = np.array([c.f_value for c in crit])
    return float(b * T * (np.max(np.abs(fv - p0.f_value)) + np.max(np.abs(fv[:, None] - fv[None, :]))))


def select_core(model: ManifoldModel, f: ScalarField, T: float, b: float, critical_points, T_ref: float | None = None) -> CompactCore:
    """Smallest grid-aligned box whose boundary is g~_T-farther than D+1 from every critical point.

    ``T_ref`` (usually the smallest T of a schedule) fixes the core across a
    T sweep: the required Euclidean size shrinks with T, so the core chosen
    at T_ref is valid for every larger T.
    """
    from .agmon import grid_distance

    if not critical_points:
        raise GeometryError("select_core needs at least one critical point")
    if not 0 < b < 1:
        raise GeometryError("b must lie in (0, 1)")
    Tc = T_ref if T_ref is not None else T
    D = core_D(critical_points, Tc, b)
    nodes = model.nodes()
    N = model.cells
    shape = (N + 1,) * model.dimension
    src = np.zeros(len(nodes), dtype=bool)
    for c in critical_points:
        src[np.argmin(np.linalg.norm(nodes - c.position, axis=1))] = True
    dist = grid_distance(model, f, Tc, b, src)
    inside = (dist <= D + 1).reshape(shape)
    lo_idx, hi_idx = [], []
    for ax in range(model.dimension):
        other = tuple(a for a in range(model.dimension) if a != ax)
        hit = np.nonzero(inside.any(axis=other) if other else inside)[0]
        lo_idx.append(hit.min() - 1)
        hi_idx.append(hit.max() + 1)
    if min(lo_idx) < 0 or max(hi_idx) > N:
        raise CoreTooLarge(f"required core exceeds the truncation box (D={D:.3g}); enlarge R")
    axes = model.axes()
    lower = np.array([axes[a][lo_idx[a]] for a in range(model.dimension)])
    upper = np.array([axes[a][hi_idx[a]] for a in range(model.dimension)])
    core = CompactCore("sublevel-box", lower, upper, list(critical_points), D, T=Tc, b=b)
    # verification: distance from the core boundary to each critical point exceeds D+1
    idx = np.stack(np.unravel_index(np.arange(len(nodes)), shape), axis=1)
    on_bd = np.any((idx == np.array(lo_idx)) | (idx == np.array(hi_idx)), axis=1) & np.all(
        (idx >= np.array(lo_idx)) & (idx <= np.array(hi_idx)), axis=1
    )
    back = grid_distance(model, f, Tc, b, on_bd)
    margin = min(back[np.argmin(np.linalg.norm(nodes - c.position, axis=1))] for c in critical_points)
    if margin <= D + 1:
        raise GeometryError(f"core verification failed: boundary distance {margin:.4g} <= D+1 = {D + 1:.4g}")
    return core


def ball_core(critical_points, radius: float, T: float = 0.0, b: float = 0.9) -> CompactCore:
    """Union of Euclidean balls around the critical points (used as the decay-fit source set)."""
    C = np.array([c.position for c in critical_points])
    return CompactCore("ball", C.min(axis=0) - radius, C.max(axis=0) + radius, list(critical_points), 0.0,
                       T=T, b=b, radius=radius, centers=C)


def hull_core(critical_points, pad: float, T: float = 0.0, b: float = 0.9) -> CompactCore:
    """Axis-aligned box around all critical points, padded by ``pad`` (the decay-fit source set).

    A connected core keeps rho_T from restarting at intermediate critical points
    that an eigenform has to tunnel through.
    """
    C = np.array([c.position for c in critical_points])
    return CompactCore("sublevel-box", C.min(axis=0) - pad, C.max(axis=0) + pad, list(critical_points), 0.0, T=T, b=b)


def tame_core(model: ManifoldModel, f: ScalarField, T: float, b: float) -> CompactCore:
    """Smallest centered box outside which T|Hess f| <= (1-b^2) T^2 |grad f|^2 on the grid.

    Outside such a core the zeroth-order Hessian term is absorbed by the
    potential, which is the regime of the quadratic-form lower bound.
    """
    P = model.nodes()
    _, g, H = f.jet(P)
    hess = np.max(np.abs(np.linalg.eigvalsh(H)), axis=1) * model.dimension
    bad = T * hess > (1 - b * b) * T * T * np.sum(g * g, axis=1)
    if not bad.any():
        c = np.asarray(model.center, dtype=float)
        return CompactCore("sublevel-box", c, c, [], 0.0, T=T, b=b)
    lower = P[bad].min(axis=0) - model.h
    upper = P[bad].max(axis=0) + model.h
    return CompactCore("sublevel-box", lower, upper, [], 0.0, T=T, b=b)
