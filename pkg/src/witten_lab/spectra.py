"""Low spectrum of Witten operators, instanton windows and Betti numbers."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dsl import ScalarField
from .geometry import CriticalPoint, ManifoldModel
from .witten import FormGrid, WittenOperator, assemble_witten_laplacian, deformed_complex

log = logging.getLogger(__name__)

COUNT_CAP = 32
DENSE_LIMIT = 2500
RESIDUAL_TOL = 1e-8
WINDOW_EDGE = 1.0


class SpectrumError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class EigenPair:
    eigenvalue: float
    vector: np.ndarray = field(repr=False)  # unit norm in the cell-volume weighted inner product
    residual: float
    layout: FormGrid = field(repr=False, default=None)

    def values_at_positions(self):
        return self.layout.positions, self.vector


def _normalize(v, vol):
    v = v / np.sqrt(vol * (v @ v))
    i = np.argmax(np.abs(v))
    return v if v[i] >= 0 else -v


def lowest_eigenpairs(A: WittenOperator | sp.spmatrix, count: int, tol: float = 0.0, maxiter: int | None = None,
                      layout: FormGrid | None = None) -> list[EigenPair]:
    """The ``count`` smallest eigenpairs of a sparse symmetric matrix, with residual certificates."""
    if count > COUNT_CAP:
        raise SpectrumError(f"count exceeds cap ({count} > {COUNT_CAP})")
    if isinstance(A, WittenOperator):
        M, layout = A.matrix, A.layout
    else:
        M = sp.csr_matrix(A)
    vol = layout.cell_volume if layout is not None else 1.0
    size = M.shape[0]
    count = min(count, size)
    if count == 0:
        return []
    if size <= DENSE_LIMIT:
        w, V = sla.eigh(M.toarray(), subset_by_index=(0, count - 1))
    else:
        # shift-invert below the spectrum: the operators are bounded below by a small negative number
        shift = -1.0
        try:
            w, V = spla.eigsh(M, k=count, sigma=shift, which="LM", tol=tol, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            res = [float(np.linalg.norm(M @ v - l * v)) for l, v in zip(exc.eigenvalues, exc.eigenvectors.T)]
            raise SpectrumError("eigensolver did not converge", residuals=res) from exc
        order = np.argsort(w)
        w, V = w[order], V[:, order]
    pairs = []
    for lam, v in zip(w, V.T):
        v = _normalize(v, vol)
        r = np.linalg.norm(M @ v - lam * v) / np.linalg.norm(v)
        if r >= RESIDUAL_TOL:
            lam, v, r = _refine(M, lam, v, vol)
        pairs.append(EigenPair(float(lam), v, float(r), layout))
    bad = [p.residual for p in pairs if p.residual >= RESIDUAL_TOL]
    if bad:
        raise SpectrumError(f"residuals above {RESIDUAL_TOL:g}: {bad}", residuals=[p.residual for p in pairs])
    return pairs


def _refine(M, lam, v, vol, steps: int = 3):
    """A few shifted inverse-iteration steps to tighten a loose eigenvector."""
    shift = lam - 1e-10 * max(1.0, abs(lam))
    lu = spla.splu((M - shift * sp.identity(M.shape[0])).tocsc())
    for _ in range(steps):
        v = lu.solve(v)
        v = _normalize(v, vol)
        lam = float(v @ (M @ v) / (v @ v))
    r = np.linalg.norm(M @ v - lam * v) / np.linalg.norm(v)
    return lam, v, r


@dataclass
class InstantonSpace:
    degree: int
    pairs: list
    gap_next: float
    T: float
    layout: FormGrid = field(repr=False, default=None)
    warnings: list = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return len(self.pairs)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([p.eigenvalue for p in self.pairs])

    def basis(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((self.layout.size, 0))
        return np.stack([p.vector for p in self.pairs], axis=1)

    def gram_defect(self) -> float:
        B = self.basis()
        if B.shape[1] == 0:
            return 0.0
        G = self.layout.cell_volume * B.T @ B
        return float(np.max(np.abs(G - np.eye(B.shape[1]))))

    def to_dict(self):
        return {
            "degree": self.degree,
            "T": self.T,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "gap_next": self.gap_next,
            "residuals": [p.residual for p in self.pairs],
            "warnings": list(self.warnings),
        }


def spectral_window(model: ManifoldModel, f: ScalarField, T: float, degree: int, scheme: str = "complex",
                    operator: WittenOperator | None = None) -> InstantonSpace:
    """All eigenpairs with eigenvalue <= 1 plus the first eigenvalue above 1."""
    A = operator or assemble_witten_laplacian(model, f, T, degree, scheme=scheme)
    size = A.shape[0]
    count = 4
    while True:
        pairs = lowest_eigenpairs(A, min(count, size))
        if pairs[-1].eigenvalue > WINDOW_EDGE or len(pairs) == size:
            break
        if count >= COUNT_CAP:
            raise SpectrumError("window overcrowded; raise T")
        count = min(2 * count, COUNT_CAP)
    inside = [p for p in pairs if p.eigenvalue <= WINDOW_EDGE]
    above = [p.eigenvalue for p in pairs if p.eigenvalue > WINDOW_EDGE]
    notes = []
    for p in pairs:
        if abs(p.eigenvalue - WINDOW_EDGE) < 1e-6:
            notes.append(f"eigenvalue {p.eigenvalue:.9g} within 1e-6 of the window edge")
            warnings.warn(notes[-1], RuntimeWarning)
    if inside and len(inside) > 1:
        # re-orthonormalize nearly degenerate window states
        B = np.stack([p.vector for p in inside], axis=1)
        G = A.layout.cell_volume * B.T @ B
        if np.max(np.abs(G - np.eye(len(inside)))) > 1e-10:
            Q, _ = np.linalg.qr(B)
            for p, q in zip(inside, Q.T):
                p.vector = _normalize(q, A.layout.cell_volume)
    return InstantonSpace(degree, inside, float(above[0]) if above else float("inf"), float(T), A.layout, notes)


def instanton_spaces(model, f, T, scheme="complex") -> list[InstantonSpace]:
    return [spectral_window(model, f, T, k, scheme=scheme) for k in range(model.dimension + 1)]


def morse_counts(crit: Sequence[CriticalPoint], n: int) -> list[int]:
    m = [0] * (n + 1)
    for c in crit:
        m[c.index] += 1
    return m


def eigencount_vs_morse(spaces: Sequence[InstantonSpace], crit: Sequence[CriticalPoint], T_gate: float = 0.0) -> dict:
    n = len(spaces) - 1
    m = morse_counts(crit, n)
    rows = [
        {"degree": s.degree, "eigen_count": s.dimension, "m_k": m[s.degree], "match": s.dimension == m[s.degree]}
        for s in spaces
    ]
    T = spaces[0].T if spaces else 0.0
    banner = "threshold not met" if T < T_gate else ""
    return {"T": T, "rows": rows, "all_match": all(r["match"] for r in rows), "banner": banner}


@dataclass
class BettiReport:
    dims: list
    ranks: list  # rank of D_k for k = 0..n-1
    betti: list
    thresholds: list
    singular_values: list
    warnings: list

    def to_dict(self):
        return {
            "dims": self.dims,
            "ranks": self.ranks,
            "betti": self.betti,
            "thresholds": self.thresholds,
            "singular_values": [[float(s) for s in sv] for sv in self.singular_values],
            "warnings": self.warnings,
        }


def projected_differentials(spaces: Sequence[InstantonSpace], differentials) -> list[np.ndarray]:
    """D_k = P_{k+1} d_T B_k in the orthonormal window bases."""
    out = []
    for k in range(len(spaces) - 1):
        Bk, Bk1 = spaces[k].basis(), spaces[k + 1].basis()
        vol = spaces[k + 1].layout.cell_volume
        out.append(vol * Bk1.T @ (differentials[k] @ Bk) if Bk.shape[1] and Bk1.shape[1] else np.zeros((Bk1.shape[1], Bk.shape[1])))
    return out


def betti_numbers(spaces: Sequence[InstantonSpace], differentials, rel_tol: float = 1e-6) -> BettiReport:
    """Betti numbers of the window subcomplex via singular values of the projected differentials."""
    n = len(spaces) - 1
    Ds = projected_differentials(spaces, differentials)
    ranks, taus, svs, notes = [], [], [], []
    for k, D in enumerate(Ds):
        s = np.linalg.svd(D, compute_uv=False) if D.size else np.zeros(0)
        smax = float(s.max()) if s.size and s.max() > 0 else 0.0
        tau = rel_tol * (smax if smax > 0 else 1.0)
        r = int(np.count_nonzero(s > tau))
        near = [float(x) for x in s if tau / 10 < x < tau * 10]
        if near:
            notes.append(f"D_{k}: rank ill-determined; adjust T or h (singular values {near} near tau={tau:.3g})")
        ranks.append(r)
        taus.append(tau)
        svs.append(s.tolist())
    for msg in notes:
        warnings.warn(msg, RuntimeWarning)
    dims = [s.dimension for s in spaces]
    betti = [dims[k] - (ranks[k] if k < n else 0) - (ranks[k - 1] if k > 0 else 0) for k in range(n + 1)]
    return BettiReport(dims, ranks, betti, taus, svs, notes)


def window_betti(model, f, T, spaces=None) -> BettiReport:
    spaces = spaces or instanton_spaces(model, f, T)
    cd = deformed_complex(model, f, T)
    return betti_numbers(spaces, cd.d)


def strong_morse_inequalities(b: Sequence[int], m: Sequence[int]) -> list[dict]:
    """(-1)^k sum_{i<=k} (-1)^i b_i <= (-1)^k sum_{i<=k} (-1)^i m_i, equality at k = n."""
    n = len(b) - 1
    rows = []
    for k in range(n + 1):
        lhs = (-1) ** k * sum((-1) ** i * b[i] for i in range(k + 1))
        rhs = (-1) ** k * sum((-1) ** i * m[i] for i in range(k + 1))
        ok = lhs <= rhs and (k < n or lhs == rhs)
        rows.append({"k": k, "lhs": int(lhs), "rhs": int(rhs), "holds": bool(ok)})
    return rows


def hermite_levels(T: float, count: int, degree: int = 0) -> np.ndarray:
    """Exact levels of -d^2 + T^2 x^2 -/+ T (oscillator with f = x^2/2)."""
    base = 2 * T * np.arange(count)
    return base + (2 * T if degree == 1 else 0.0)
