"""On-disk cache for assembled operators and window eigenpairs."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from filelock import FileLock

log = logging.getLogger(__name__)


class CacheWarning(UserWarning):
    """A cache entry was unusable and has been recomputed."""


def default_root() -> Path:
    env = os.environ.get("WITTEN_LAB_CACHE")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "witten_lab"


def cache_key(**inputs) -> str:
    """sha256 of the canonical JSON of the stage inputs."""
    blob = json.dumps(inputs, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class Cache:
    """npz store keyed by content hash; entries are guarded by an advisory file lock."""

    def __init__(self, root=None, enabled: bool = True, residual_tol: float = 1e-8):
        self.root = Path(root) if root is not None else default_root()
        self.enabled = enabled
        self.residual_tol = residual_tol
        self.stats = {"hits": {"assembly": 0, "eigensolve": 0}, "misses": {"assembly": 0, "eigensolve": 0},
                      "invalidated": 0}

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.npz"

    def _lock(self, path: Path) -> FileLock:
        return FileLock(str(path) + ".lock", timeout=600)

    def _miss(self):
        self.stats["misses"]["assembly"] += 1
        self.stats["misses"]["eigensolve"] += 1

    def load_window(self, key: str):
        """(matrix, eigenvalues, vectors, gap_next) or None on a miss / invalid entry."""
        if not self.enabled:
            return None
        path = self._path(key)
        if not path.exists():
            self._miss()
            return None
        try:
            with self._lock(path), np.load(path) as z:
                M = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=tuple(z["shape"]))
                vals, vecs, gap = z["values"], z["vectors"], float(z["gap_next"])
        except Exception as exc:  # corrupt or truncated entry
            warnings.warn(f"corrupt cache entry {path.name} ({exc}); recomputing", CacheWarning)
            self.stats["invalidated"] += 1
            self._miss()
            return None
        for lam, v in zip(vals, vecs.T):
            r = np.linalg.norm(M @ v - lam * v) / np.linalg.norm(v)
            if not r < self.residual_tol:
                warnings.warn(f"cached eigenpair residual {r:.3g} above {self.residual_tol:g}; recomputing",
                              CacheWarning)
                self.stats["invalidated"] += 1
                self._miss()
                return None
        self.stats["hits"]["assembly"] += 1
        self.stats["hits"]["eigensolve"] += 1
        return M, vals, vecs, gap

    def store_window(self, key: str, M: sp.spmatrix, values, vectors, gap_next: float) -> None:
        if not self.enabled:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        M = sp.csr_matrix(M)
        with self._lock(path):
            tmp = path.with_suffix(".tmp.npz")
            np.savez(tmp, data=M.data, indices=M.indices, indptr=M.indptr, shape=np.array(M.shape),
                     values=np.asarray(values, dtype=float), vectors=np.asarray(vectors, dtype=float),
                     gap_next=np.array(gap_next))
            os.replace(tmp, path)
