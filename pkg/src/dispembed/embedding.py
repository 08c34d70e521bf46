"""Linear (PCA) embedding of displacement cost maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .volume_io import DimensionError, read_raw_meta, write_raw_meta


@dataclass(frozen=True)
class Embedding:
    """Mean vector plus ``k x D`` orthonormal basis (rows)."""

    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def dim_in(self) -> int:
        return int(self.basis.shape[1])

    @property
    def dim_out(self) -> int:
        return int(self.basis.shape[0])

    @property
    def compression_ratio(self) -> float:
        return compression_ratio(self.dim_out, self.dim_in)

    def save(self, path) -> None:
        """raw+meta with rows: mean, ``k`` basis rows, variances (zero padded)."""
        k, d = self.basis.shape
        var_row = np.zeros(d)
        var_row[:k] = self.explained_variance
        rows = np.vstack([self.mean[None], self.basis, var_row[None]])
        write_raw_meta(path, rows.T.reshape(d, k + 2, 1), (1.0, 1.0, 1.0), "float64", {
            "kind": "embedding",
            "dim_in": d,
            "dim_out": k,
            "rank_deficient": int(self.rank_deficient),
        })

    @classmethod
    def load(cls, path) -> "Embedding":
        arr, _, meta = read_raw_meta(path)
        if meta.get("kind") != "embedding":
            raise DimensionError(f"{path}: not an embedding file")
        d, k = int(meta["dim_in"]), int(meta["dim_out"])
        rows = np.asarray(arr, dtype=np.float64)[:, :, 0].T
        if rows.shape != (k + 2, d):
            raise DimensionError(f"{path}: payload shape {rows.shape} does not match dim_in/dim_out")
        return cls(rows[0].copy(), rows[1:k + 1].copy(), rows[k + 1, :k].copy(),
                   bool(int(meta.get("rank_deficient", "0"))))


def compression_ratio(k: int, d: int) -> float:
    """Fraction of the displacement space removed by a ``k``-dim code."""
    return 1.0 - k / d


def _orthonormal_complement(basis: np.ndarray, count: int) -> np.ndarray:
    """``count`` unit rows orthogonal to the rows of ``basis`` (deterministic)."""
    d = basis.shape[1]
    ncand = min(d, basis.shape[0] + count)
    cand = np.eye(d, ncand)
    for _ in range(2):
        cand -= basis.T @ (basis @ cand)
    q, _, _ = scipy.linalg.qr(cand, mode="economic", pivoting=True)
    return q[:, :count].T


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(len(basis)), idx])
    signs[signs == 0] = 1.0
    return basis * signs[:, None]


def fit_pca(costs: np.ndarray, k: int, rank_tol: float = 1e-10) -> Embedding:
    """Top-``k`` principal directions of the rows of ``costs``.

    With ``N < D`` the right singular vectors come from the ``N x N`` Gram
    matrix; otherwise from the ``D x D`` scatter matrix. Components whose
    eigenvalue falls below ``rank_tol`` times the largest are treated as
    missing and replaced by an orthonormal complement with zero variance
    (``rank_deficient`` is then set). Each basis row is signed so that its
    largest-magnitude entry is positive.
    """
    x = np.asarray(costs, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("costs must be a 2D matrix")
    n, d = x.shape
    if n < 2:
        raise DimensionError("need at least 2 rows to fit an embedding")
    if not 1 <= k <= min(n, d):
        raise DimensionError(f"k={k} outside [1, min(N, D) = {min(n, d)}]")

    mean = x.mean(axis=0)
    xc = x - mean
    if n < d:
        gram = xc @ xc.T
        evals, evecs = np.linalg.eigh(gram)
        evals, evecs = evals[::-1], evecs[:, ::-1]
    else:
        scatter = xc.T @ xc
        evals, evecs = np.linalg.eigh(scatter)
        evals, evecs = evals[::-1], evecs[:, ::-1]

    top = max(evals[0], 0.0)
    good = int(np.sum(evals[:k] > rank_tol * top)) if top > 0 else 0
    if n < d:
        sv = np.sqrt(evals[:good])
        basis = (xc.T @ evecs[:, :good] / sv).T
    else:
        basis = evecs[:, :good].T
    if good:
        # re-orthonormalise; the Gram route loses orthogonality for small singular values
        q, rr = np.linalg.qr(basis.T)
        basis = (q * np.sign(np.diag(rr))).T
    variance = np.zeros(k)
    variance[:good] = np.maximum(evals[:good], 0.0) / (n - 1)

    deficient = good < k
    if deficient:
        basis = np.vstack([basis.reshape(good, d), _orthonormal_complement(basis.reshape(good, d), k - good)])
    return Embedding(mean, _fix_signs(basis), variance, deficient)


def _check_cols(a: np.ndarray, expected: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != expected:
        raise DimensionError(f"{what} has {a.shape[-1]} columns, expected {expected}")
    return a


def encode(e: Embedding, costs: np.ndarray) -> np.ndarray:
    return (_check_cols(costs, e.dim_in, "costs") - e.mean) @ e.basis.T


def decode(e: Embedding, codes: np.ndarray) -> np.ndarray:
    return _check_cols(codes, e.dim_out, "codes") @ e.basis + e.mean
