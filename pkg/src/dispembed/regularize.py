"""Keypoint-graph diffusion, dense extrapolation and backward warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.spatial import cKDTree

from .correspondence import CostMapSet, normalize_costs, soft_argmin_batch
from .embedding import Embedding, decode, encode
from .keypoints import KeypointSet
from .volume_io import DenseField, Volume3


@dataclass(frozen=True)
class SparseDisplacements:
    """Per-keypoint displacement (voxel units of the fixed grid), shape ``(N, 3)``."""

    keypoints: KeypointSet
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if len(v) != len(self.keypoints):
            raise ValueError("one vector per keypoint required")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return len(self.vectors)

    def save(self, path) -> None:
        """Six columns per line: ``i j k ui uj uk``."""
        with open(path, "w") as fh:
            for c, v in zip(self.keypoints.coords, self.vectors):
                fh.write("%d %d %d %r %r %r\n" % (*c, *map(float, v)))


@dataclass(frozen=True)
class KeypointGraph:
    """Symmetric kNN graph; ``weights`` is an ``n x n`` CSR matrix with zero diagonal."""

    weights: sp.csr_matrix
    bandwidth_mm: float

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()

    @property
    def laplacian(self) -> sp.csr_matrix:
        return (sp.diags(self.degree) - self.weights).tocsr()

    def random_walk(self) -> sp.csr_matrix:
        return (sp.diags(1.0 / self.degree) @ self.weights).tocsr()


def build_graph(kps: KeypointSet, spacing=(1.0, 1.0, 1.0), k_neighbors: int = 10,
                bandwidth_factor: float = 1.0) -> KeypointGraph:
    """kNN graph in mm with Gaussian weights, symmetrised by union.

    The Gaussian bandwidth is ``bandwidth_factor`` times the mean distance
    over all kNN edges.
    """
    n = len(kps)
    if n < 2:
        raise ValueError("need at least 2 keypoints to build a graph")
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    pts = kps.coords * np.asarray(spacing, dtype=np.float64)
    if len(np.unique(kps.coords, axis=0)) != n:
        raise ValueError("duplicate keypoint coordinates")
    k = min(k_neighbors, n - 1)
    dist, nbr = cKDTree(pts).query(pts, k=k + 1)
    dist, nbr = dist[:, 1:], nbr[:, 1:]
    h = bandwidth_factor * float(dist.mean())
    w = np.exp(-(dist ** 2) / (2.0 * h * h))
    rows = np.repeat(np.arange(n), k)
    knn = sp.csr_matrix((w.ravel(), (rows, nbr.ravel())), shape=(n, n))
    weights = knn.maximum(knn.T).tocsr()
    weights.setdiag(0)
    weights.eliminate_zeros()
    weights.sort_indices()
    if np.any(np.diff(weights.indptr) == 0):
        raise ValueError("graph has an isolated node")
    return KeypointGraph(weights, h)


def diffuse(graph: KeypointGraph, signal: np.ndarray, alpha: float = 0.5,
            iters: int = 5) -> np.ndarray:
    """Anchored diffusion ``x <- (1 - alpha) x0 + alpha D^-1 W x``, columns independent.

    Neighbour averages are formed from differences ``x_j - x_i`` so that
    constant columns are exact fixed points.
    """
    x0 = np.asarray(signal, dtype=np.float64)
    squeeze = x0.ndim == 1
    if squeeze:
        x0 = x0[:, None]
    if x0.shape[0] != graph.n:
        raise ValueError(f"signal has {x0.shape[0]} rows, graph has {graph.n} nodes")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    coo = graph.weights.tocoo()
    rows, cols = coo.row, coo.col
    wn = coo.data / graph.degree[rows]
    gather = sp.csr_matrix((wn, (rows, np.arange(len(rows)))), shape=(graph.n, len(rows)))
    x = x0.copy()
    for _ in range(iters):
        avg = x + gather @ (x[cols] - x[rows])
        x = x0 + alpha * (avg - x0)
    return x[:, 0] if squeeze else x


def regularize_displacements(
    costs: CostMapSet,
    e: Embedding,
    graph: KeypointGraph,
    alpha: float = 0.5,
    iters: int = 5,
    temperature: float = 1.0,
    vector_stage: bool = False,
    alpha_vec: float = 0.5,
    iters_vec: int = 5,
    renormalize: bool = False,
) -> SparseDisplacements:
    """Encode, diffuse codes over the graph, decode, soft-argmin per keypoint.

    With ``renormalize`` the decoded maps are rescaled per keypoint (zero
    minimum, unit mean) before the soft-argmin, which keeps the temperature
    on the same scale as for normalised input costs.
    """
    if graph.n != len(costs.keypoints):
        raise ValueError("graph and cost maps differ in keypoint count")
    codes = encode(e, costs.costs)
    codes = diffuse(graph, codes, alpha, iters)
    recon = decode(e, codes)
    if renormalize:
        recon = normalize_costs(recon)
    vectors = soft_argmin_batch(recon, costs.lattice, temperature)
    if vector_stage:
        vectors = diffuse(graph, vectors, alpha_vec, iters_vec)
    return SparseDisplacements(costs.keypoints, vectors)


def _axis_kernels(pts: np.ndarray, dims, spacing, bandwidth_mm: float) -> list[np.ndarray]:
    out = []
    for axis in range(3):
        grid = np.arange(dims[axis], dtype=np.float64)
        d = (grid[:, None] - pts[None, :, axis]) * spacing[axis]
        out.append(np.exp(-(d * d) / (2.0 * bandwidth_mm ** 2)))
    return out


def extrapolate_dense(sparse: SparseDisplacements, dims, spacing=(1.0, 1.0, 1.0),
                      bandwidth_mm: float = 8.0) -> DenseField:
    """Nadaraya-Watson (Gaussian kernel, mm) interpolation of sparse vectors to every voxel.

    The kernel is separable, so each x-slice is one matrix product. Voxels
    where all kernel weights underflow take the nearest keypoint's vector.
    """
    if len(sparse) < 1:
        raise ValueError("need at least one keypoint")
    if bandwidth_mm <= 0:
        raise ValueError("bandwidth_mm must be > 0")
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    pts = sparse.keypoints.coords.astype(np.float64)
    v = sparse.vectors
    ax, ay, az = _axis_kernels(pts, dims, spacing, bandwidth_mm)
    # stacked right factor: three weighted components plus the normaliser
    z = np.concatenate([az * v[:, c] for c in range(3)] + [az], axis=0)  # (4*nz, N)
    nx, ny, nz = dims
    out = np.empty(dims + (3,), dtype=np.float64)
    tiny = np.finfo(np.float64).tiny * 1e10
    need_nn = np.zeros(dims, dtype=bool)
    for i in range(nx):
        s = (ay * ax[i]) @ z.T  # (ny, 4*nz)
        num = s[:, :3 * nz].reshape(ny, 3, nz)
        den = s[:, 3 * nz:]
        ok = den > tiny
        out[i] = np.where(ok[:, :, None], (num / np.where(ok, den, 1.0)[:, None, :]).transpose(0, 2, 1), 0.0)
        need_nn[i] = ~ok
    if need_nn.any():
        where = np.argwhere(need_nn)
        _, nearest = cKDTree(pts * spacing).query(where * np.asarray(spacing))
        out[need_nn] = v[nearest]
    return DenseField(out, spacing)


def keypoint_residual(sparse: SparseDisplacements, spacing, bandwidth_mm: float) -> np.ndarray:
    """``|u(x_n) - v_n|`` of the kernel estimate at each keypoint (diagnostic)."""
    pts = sparse.keypoints.coords * np.asarray(spacing, dtype=np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    k = np.exp(-d2 / (2.0 * bandwidth_mm ** 2))
    u = (k @ sparse.vectors) / k.sum(axis=1, keepdims=True)
    return np.linalg.norm(u - sparse.vectors, axis=1)


def sample_field(fld: DenseField, points: np.ndarray) -> np.ndarray:
    """Trilinear field lookup at continuous voxel coordinates, edge-clamped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.stack(
        [ndimage.map_coordinates(fld.vectors[..., c].astype(np.float64), pts.T, order=1,
                                 mode="nearest") for c in range(3)],
        axis=1,
    )


def warp(moving: Volume3, fld: DenseField) -> Volume3:
    """Backward warp: ``out(x) = moving(x + u(x))``, trilinear, edge-clamped."""
    grid = np.indices(fld.dims, dtype=np.float64)
    coords = grid + np.moveaxis(fld.vectors.astype(np.float64), -1, 0)
    out = ndimage.map_coordinates(moving.voxels, coords, order=1, mode="nearest")
    return Volume3(out, fld.spacing, moving.intensity_unit)
