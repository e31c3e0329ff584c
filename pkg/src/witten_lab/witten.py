"""Discrete Witten Laplacians and deformed differentials on box grids.

Two discretizations are provided.

``scheme="local"``
    Node-collocated: positive central-difference Laplacian on every component,
    plus the pointwise block ``T sum_ij H_ij [e^i^, i_j] + T^2 |grad f|^2`` with
    Dirichlet values on the box boundary.  Unknowns are C(n,k) copies of the
    interior nodes.

``scheme="complex"``
    Cubical cochains (nodes, edges, faces) with ``d_T = e^{-Tf} d e^{Tf}``
    applied cell-wise, so ``d_T d_T = 0`` exactly and ``A = d_T^t d_T + d_T d_T^t``
    is positive semidefinite.  Boundary facets on which f decreases outward are
    relative (cochains vanish there), the others absolute, so the discrete
    cohomology is that of the pair (box, far sublevel set).
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dsl import ExprDomainError, ScalarField, eval_many
from .geometry import CompactCore, ManifoldModel


class AssemblyError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Exterior algebra


@dataclass(frozen=True)
class ExteriorAlgebraTables:
    n: int
    basis: tuple  # multi-indices ordered by degree, then lexicographically
    E: tuple  # E[i]: wedge with e^i, 2^n x 2^n
    I: tuple  # I[j]: contraction with e_j
    A: dict = field(repr=False)  # A[k][i, j] = (E_i I_j - I_j E_i) restricted to degree k

    def degree_slice(self, k: int) -> slice:
        start = sum(comb(self.n, d) for d in range(k))
        return slice(start, start + comb(self.n, k))

    def multi_indices(self, k: int):
        return list(self.basis[self.degree_slice(k)])

    def wedge_block(self, i: int, k: int) -> np.ndarray:
        """Matrix of e^i wedge from degree k to degree k+1."""
        return self.E[i][self.degree_slice(k + 1), self.degree_slice(k)]


def build_exterior_tables(n: int) -> ExteriorAlgebraTables:
    if n not in (1, 2):
        raise ValueError("exterior tables are provided for n in {1, 2}")
    basis = tuple(c for k in range(n + 1) for c in itertools.combinations(range(n), k))
    pos = {b: i for i, b in enumerate(basis)}
    dim = len(basis)
    E, I = [], []
    for i in range(n):
        Ei = np.zeros((dim, dim))
        Ii = np.zeros((dim, dim))
        for b in basis:
            if i not in b:
                sign = (-1) ** sum(1 for a in b if a < i)
                Ei[pos[tuple(sorted(b + (i,)))], pos[b]] = sign
            else:
                sign = (-1) ** b.index(i)
                Ii[pos[tuple(a for a in b if a != i)], pos[b]] = sign
        E.append(Ei)
        I.append(Ii)
    A = {}
    for k in range(n + 1):
        s = slice(sum(comb(n, d) for d in range(k)), sum(comb(n, d) for d in range(k + 1)))
        A[k] = np.array([[(E[i] @ I[j] - I[j] @ E[i])[s, s] for j in range(n)] for i in range(n)])
    return ExteriorAlgebraTables(n, basis, tuple(E), tuple(I), A)


# --------------------------------------------------------------------------
# Layouts


@dataclass(frozen=True)
class FormGrid:
    """Unknown layout for k-forms: one row per unknown with its position and component."""

    degree: int
    scheme: str
    positions: np.ndarray
    component: np.ndarray
    cell_volume: float
    n: int
    cell_index: Optional[np.ndarray] = None  # complex scheme: index into the full cell list

    @property
    def size(self) -> int:
        return len(self.positions)

    def inner(self, u, v) -> float:
        return float(self.cell_volume * np.dot(u, v))

    def norm(self, u) -> float:
        return float(np.sqrt(self.cell_volume * np.dot(u, u)))


@dataclass
class WittenOperator:
    matrix: sp.csr_matrix
    degree: int
    T: float
    f_id: str
    grid_hash: str
    scheme: str
    layout: FormGrid
    model: ManifoldModel = field(repr=False, default=None)

    @property
    def shape(self):
        return self.matrix.shape


def grid_hash(model: ManifoldModel) -> str:
    return hashlib.sha256(repr(sorted(model.fingerprint().items())).encode()).hexdigest()[:16]


def _check_finite(model, values, where, label):
    bad = ~np.all(np.isfinite(values.reshape(len(values), -1)), axis=1)
    if bad.any():
        raise AssemblyError(f"non-finite {label} at node {where[np.argmax(bad)].tolist()}")


def _diff1d(N: int, h: float) -> sp.csr_matrix:
    """Forward difference from N+1 nodes to N edges, scaled by 1/h."""
    return sp.diags([-np.ones(N), np.ones(N)], [0, 1], shape=(N, N + 1), format="csr") / h


def _interior_nodes(model):
    N = model.cells
    ax = [a[1:N] for a in model.axes()]
    mesh = np.meshgrid(*ax, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _dirichlet_laplacian(model) -> sp.csr_matrix:
    N, h, n = model.cells, model.h, model.dimension
    m = N - 1
    L1 = sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1], format="csr") / h**2
    if n == 1:
        return L1
    Id = sp.identity(m, format="csr")
    return (sp.kron(L1, Id) + sp.kron(Id, L1)).tocsr()


# ---- cubical complex ------------------------------------------------------


@dataclass(frozen=True)
class CubicalComplex:
    model: ManifoldModel
    positions: tuple  # per degree: (count, n) cell centres
    component: tuple  # per degree: component index per cell
    d: tuple  # unscaled-by-T differentials on the full complex, d[k]: C^k -> C^{k+1}
    facets: np.ndarray  # boundary facet ids (indices into degree n-1 cells)
    facet_normals: np.ndarray


def cubical_complex(model: ManifoldModel) -> CubicalComplex:
    N, h, n = model.cells, model.h, model.dimension
    ax = model.axes()
    D = _diff1d(N, h)
    if n == 1:
        x = ax[0]
        pos = (x[:, None], (x[:-1] + h / 2)[:, None])
        comp = (np.zeros(N + 1, int), np.zeros(N, int))
        facets = np.array([0, N])
        normals = np.array([[-1.0], [1.0]])
        return CubicalComplex(model, pos, comp, (D,), facets, normals)
    x, y = ax
    I1, IN = sp.identity(N + 1, format="csr"), sp.identity(N, format="csr")
    d0 = sp.vstack([sp.kron(D, I1), sp.kron(I1, D)]).tocsr()
    d1 = sp.hstack([sp.kron(IN, -D), sp.kron(D, IN)]).tocsr()
    X, Y = np.meshgrid(x, y, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    Xe, Ye = np.meshgrid(x[:-1] + h / 2, y, indexing="ij")
    xedges = np.stack([Xe.ravel(), Ye.ravel()], axis=1)
    Xe, Ye = np.meshgrid(x, y[:-1] + h / 2, indexing="ij")
    yedges = np.stack([Xe.ravel(), Ye.ravel()], axis=1)
    Xf, Yf = np.meshgrid(x[:-1] + h / 2, y[:-1] + h / 2, indexing="ij")
    faces = np.stack([Xf.ravel(), Yf.ravel()], axis=1)
    edges = np.vstack([xedges, yedges])
    comp1 = np.concatenate([np.zeros(len(xedges), int), np.ones(len(yedges), int)])
    nx = N * (N + 1)
    j = np.arange(N)
    # boundary edges: bottom/top are x-edges (i, 0)/(i, N); left/right are y-edges (0, j)/(N, j)
    bottom = j * (N + 1)
    top = j * (N + 1) + N
    left = nx + j
    right = nx + N * N + j
    facets = np.concatenate([bottom, right, top, left])
    normals = np.concatenate(
        [np.tile([0.0, -1.0], (N, 1)), np.tile([1.0, 0.0], (N, 1)), np.tile([0.0, 1.0], (N, 1)), np.tile([-1.0, 0.0], (N, 1))]
    )
    return CubicalComplex(model, (nodes, edges, faces), (np.zeros(len(nodes), int), comp1, np.zeros(len(faces), int)),
                          (d0, d1), facets, normals)


def relative_cells(cx: CubicalComplex, f: ScalarField, T: float) -> list[np.ndarray]:
    """Boolean masks (per degree) of cells in the relative subcomplex.

    A boundary facet is relative when f decreases in the outward direction
    there; at T = 0 every facet is relative (plain Dirichlet complex).
    """
    n = cx.model.dimension
    pos = cx.positions[n - 1][cx.facets]
    outward = np.sum(f.grad(pos) * cx.facet_normals, axis=1)
    rel_facets = cx.facets[(outward < 0) | (T == 0)]
    masks = [np.zeros(len(p), dtype=bool) for p in cx.positions]
    masks[n - 1][rel_facets] = True
    # close downwards: faces of relative cells are relative
    for k in range(n - 1, 0, -1):
        touched = abs(cx.d[k - 1][masks[k], :]).sum(axis=0).A1 > 0
        masks[k - 1] |= touched
    return masks


def _conjugated(dk: sp.csr_matrix, f_src: np.ndarray, f_dst: np.ndarray, T: float) -> sp.csr_matrix:
    """Entries d[c', c] * exp(T (f(c) - f(c'))), i.e. e^{-Tf} d e^{Tf}."""
    C = dk.tocoo()
    w = C.data * np.exp(T * (f_src[C.col] - f_dst[C.row]))
    return sp.csr_matrix((w, (C.row, C.col)), shape=dk.shape)


@dataclass
class ComplexData:
    cx: CubicalComplex
    keep: list  # per degree: indices of retained cells
    fvals: list  # per degree: f at retained cells
    d: list  # per degree: conjugated differential between retained cells
    layouts: list


_COMPLEX_CACHE: dict = {}


def deformed_complex(model: ManifoldModel, f: ScalarField, T: float) -> ComplexData:
    key = (grid_hash(model), str(f.expr), float(T))
    if key in _COMPLEX_CACHE:
        return _COMPLEX_CACHE[key]
    cx = cubical_complex(model)
    n = model.dimension
    rel = relative_cells(cx, f, T)
    keep = [np.flatnonzero(~m) for m in rel]
    fvals = []
    for k in range(n + 1):
        P = cx.positions[k][keep[k]]
        v = f.value(P)
        _check_finite(model, v, P, "f")
        fvals.append(v)
    d = [_conjugated(cx.d[k][keep[k + 1]][:, keep[k]], fvals[k], fvals[k + 1], T) for k in range(n)]
    layouts = [
        FormGrid(k, "complex", cx.positions[k][keep[k]], cx.component[k][keep[k]], model.h**n, n, keep[k])
        for k in range(n + 1)
    ]
    out = ComplexData(cx, keep, fvals, d, layouts)
    if len(_COMPLEX_CACHE) > 32:
        _COMPLEX_CACHE.clear()
    _COMPLEX_CACHE[key] = out
    return out


# --------------------------------------------------------------------------
# Public assembly


def _local_layout(model, k):
    P = _interior_nodes(model)
    m = comb(model.dimension, k)
    return FormGrid(k, "local", np.tile(P, (m, 1)), np.repeat(np.arange(m), len(P)), model.h**model.dimension,
                    model.dimension)


def _local_operator(model, f, T, k):
    n = model.dimension
    P = _interior_nodes(model)
    _, g, H = f.jet(P)
    _check_finite(model, g, P, "gradient")
    _check_finite(model, H, P, "Hessian")
    tables = build_exterior_tables(n)
    Ak = tables.A[k]
    m = comb(n, k)
    L = _dirichlet_laplacian(model)
    npts = len(P)
    blocks = [[None] * m for _ in range(m)]
    grad2 = np.sum(g * g, axis=1)
    for a in range(m):
        for c in range(m):
            coeff = T * np.einsum("pij,ij->p", H, Ak[:, :, a, c])
            if a == c:
                coeff = coeff + T * T * grad2
                blocks[a][c] = (L + sp.diags(coeff)).tocsr()
            elif np.any(coeff):
                blocks[a][c] = sp.diags(coeff, format="csr")
            else:
                blocks[a][c] = sp.csr_matrix((npts, npts))
    A = sp.bmat(blocks, format="csr")
    if model.conformal is not None:
        if k == 1:
            raise AssemblyError("conformal factors are supported for degrees 0 and 2 only")
        phi = eval_many(model.conformal, P, order=1)[0]
        if np.any(phi <= 0):
            raise AssemblyError("conformal factor must be positive")
        if k == 2:
            # Hodge star: top degree with f equals degree 0 with -f
            A = _local_operator(ManifoldModel("euclidean_box", n, R=model.R, h=model.h, center=model.center),
                                ScalarField(_negate(f.expr), None), T, 0)
        S = sp.diags(1.0 / np.sqrt(phi))
        A = (S @ A @ S).tocsr()
    return A


def _negate(expr):
    from .dsl import Expr, Neg

    return Expr(Neg(expr.root, expr.root.span), expr.dimension, "-(" + (expr.source or str(expr)) + ")")


def assemble_witten_laplacian(model: ManifoldModel, f: ScalarField, T: float, k: int, scheme: str = "local") -> WittenOperator:
    """Sparse symmetric matrix of the Witten Laplacian on k-forms."""
    if T < 0:
        raise AssemblyError("T must be non-negative")
    if not 0 <= k <= model.dimension:
        raise AssemblyError(f"degree {k} out of range for n={model.dimension}")
    if model.kind != "euclidean_box":
        raise AssemblyError("operators are assembled on box models only")
    if scheme == "local":
        try:
            A = _local_operator(model, f, T, k)
        except ExprDomainError as exc:
            raise AssemblyError(f"non-finite f or derivatives at node: {exc}") from exc
        layout = _local_layout(model, k)
    elif scheme == "complex":
        if model.conformal is not None:
            raise AssemblyError("the cochain scheme is flat only")
        try:
            cd = deformed_complex(model, f, T)
        except ExprDomainError as exc:
            raise AssemblyError(f"non-finite f at node: {exc}") from exc
        size = cd.layouts[k].size
        A = sp.csr_matrix((size, size))
        if k < model.dimension:
            A = A + cd.d[k].T @ cd.d[k]
        if k > 0:
            A = A + cd.d[k - 1] @ cd.d[k - 1].T
        A = A.tocsr()
        layout = cd.layouts[k]
    else:
        raise AssemblyError(f"unknown scheme {scheme!r}")
    A = ((A + A.T) * 0.5).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return WittenOperator(A, k, float(T), str(f.expr), grid_hash(model), scheme, layout, model)


def assemble_witten_differential(model: ManifoldModel, f: ScalarField, T: float, k: int, scheme: str = "local") -> sp.csr_matrix:
    """d + T df^ from k-forms to (k+1)-forms on the chosen layout."""
    n = model.dimension
    if k >= n:
        raise AssemblyError("top degree has no differential")
    if scheme == "complex":
        return deformed_complex(model, f, T).d[k]
    if scheme != "local":
        raise AssemblyError(f"unknown scheme {scheme!r}")
    P = _interior_nodes(model)
    g = f.grad(P)
    tables = build_exterior_tables(n)
    m = model.cells - 1
    Df = sp.diags([-np.ones(m), np.ones(m - 1)], [0, 1], shape=(m, m), format="csr") / model.h
    Id = sp.identity(m, format="csr")
    parts = [Df] if n == 1 else [sp.kron(Df, Id).tocsr(), sp.kron(Id, Df).tocsr()]
    out = None
    for i in range(n):
        W = sp.csr_matrix(tables.wedge_block(i, k))
        term = sp.kron(W, parts[i]) + T * sp.kron(W, sp.diags(g[:, i]))
        out = term if out is None else out + term
    return out.tocsr()


def differential_layouts(model, f, T, scheme="local"):
    if scheme == "complex":
        return deformed_complex(model, f, T).layouts
    return [_local_layout(model, k) for k in range(model.dimension + 1)]


# --------------------------------------------------------------------------
# Diagnostics


def symmetry_defect(A: WittenOperator) -> float:
    M = A.matrix
    scale = abs(M).max() or 1.0
    D = M - M.T
    return float(abs(D).max() / scale) if D.nnz else 0.0


def gershgorin_lower_bound(A: WittenOperator) -> float:
    M = A.matrix.tocsr()
    diag = M.diagonal()
    off = np.asarray(abs(M).sum(axis=1)).ravel() - np.abs(diag)
    return float(np.min(diag - off))


@dataclass
class QuadraticFormReport:
    status: str  # "pass" | "fail" | "threshold not met" | "skipped"
    min_slack: Optional[float]
    trials: int
    tolerance: float
    note: str = ""

    def to_dict(self):
        return self.__dict__.copy()


def quadratic_form_bound_check(A: WittenOperator, core: CompactCore, f: ScalarField, T: float, b: float,
                               trials: int = 100, T_threshold: float = 1.0, seed: int = 0,
                               support: str = "outside") -> QuadraticFormReport:
    """Random-trial check of <A phi, phi> >= b^2 T^2 |grad f|^2 |phi|^2 + |grad phi|^2 off the core."""
    tol = 1e-9
    if T < T_threshold or T == 0:
        return QuadraticFormReport("threshold not met", None, 0, tol, f"T={T} below threshold {T_threshold}")
    if support != "outside":
        return QuadraticFormReport("skipped", None, 0, tol, "bound only claimed for test functions vanishing on the core")
    if A.scheme != "local":
        raise AssemblyError("quadratic form check uses the node-collocated scheme")
    lay = A.layout
    model = A.model
    outside = ~core.mask(lay.positions)
    if not outside.any():
        return QuadraticFormReport("skipped", None, 0, tol, "no grid nodes outside the core")
    g = f.grad(lay.positions)
    weight = b * b * T * T * np.sum(g * g, axis=1)
    m = comb(model.dimension, A.degree)
    L = sp.kron(sp.identity(m), _dirichlet_laplacian(model)).tocsr()
    rng = np.random.default_rng(seed)
    slack = np.inf
    vol = lay.cell_volume
    for _ in range(trials):
        phi = np.where(outside, rng.normal(size=lay.size), 0.0)
        lhs = vol * phi @ (A.matrix @ phi)
        rhs = vol * (np.sum(weight * phi * phi) + phi @ (L @ phi))
        slack = min(slack, (lhs - rhs) / max(abs(lhs), 1.0))
    status = "pass" if slack >= -tol else "fail"
    return QuadraticFormReport(status, float(slack), trials, tol)


def export_matrix_market(A, path) -> None:
    """Write a header line then 1-indexed ``row col value`` triplets."""
    M = (A.matrix if isinstance(A, WittenOperator) else A).tocoo()
    order = np.lexsort((M.col, M.row))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{M.shape[0]} {M.shape[1]} {M.nnz}\n")
        for r, c, v in zip(M.row[order], M.col[order], M.data[order]):
            fh.write(f"{r + 1} {c + 1} {v:.17g}\n")


def read_matrix_market(path) -> sp.csr_matrix:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("%")]
    m, n, nnz = map(int, lines[0].split())
    data = np.loadtxt(lines[1:], ndmin=2) if nnz else np.zeros((0, 3))
    return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int) - 1, data[:, 1].astype(int) - 1)), shape=(m, n))
