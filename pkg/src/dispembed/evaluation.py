"""Target registration error and synthetic deformation cases."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .keypoints import select_keypoints
from .regularize import sample_field, warp
from .volume_io import DenseField, DimensionError, LandmarkSet, Volume3


@dataclass(frozen=True)
class TREReport:
    per_landmark_mm: np.ndarray
    mean_mm: float
    std_mm: float
    count: int
    std_convention: str = "sample (n-1)"

    @classmethod
    def from_errors(cls, errors) -> "TREReport":
        e = np.asarray(errors, dtype=np.float64).ravel()
        n = len(e)
        mean = float(e.mean()) if n else 0.0
        std = float(e.std(ddof=1)) if n > 1 else 0.0
        return cls(e, mean, std, n)

    def to_text(self, case: str = "case") -> str:
        return (f"{case}: TRE {self.mean_mm:.2f} ({self.std_mm:.2f}) mm over "
                f"{self.count} landmarks [std: {self.std_convention}]")

    def to_lines(self, case: str = "case", verbose: bool = False) -> list[str]:
        """Machine-readable rows: ``case, n, mean_mm, std_mm`` then optional per-landmark rows."""
        lines = [f"{case}, {self.count}, {self.mean_mm:.6f}, {self.std_mm:.6f}"]
        if verbose:
            lines += [f"{case}, {i}, {err:.6f}" for i, err in enumerate(self.per_landmark_mm)]
        return lines


def aggregate_reports(reports: Sequence[TREReport]) -> dict[str, float]:
    """Both cross-case conventions: mean of per-case means and pooled landmarks."""
    pooled = TREReport.from_errors(np.concatenate([r.per_landmark_mm for r in reports]))
    means = np.array([r.mean_mm for r in reports])
    return {
        "cases": len(reports),
        "mean_of_case_means": float(means.mean()),
        "std_of_case_means": float(means.std(ddof=1)) if len(means) > 1 else 0.0,
        "pooled_mean": pooled.mean_mm,
        "pooled_std": pooled.std_mm,
        "pooled_count": pooled.count,
    }


def tre(fixed_lms: LandmarkSet, moving_lms: LandmarkSet, field: Optional[DenseField] = None,
        spacing=None) -> TREReport:
    """Per-pair ``|(p + u(p) - q) * spacing|`` in mm, ``u`` sampled trilinearly (0 without a field)."""
    if fixed_lms.count != moving_lms.count:
        raise DimensionError(
            f"landmark count mismatch: {fixed_lms.count} fixed vs {moving_lms.count} moving"
        )
    if spacing is None:
        spacing = field.spacing if field is not None else (1.0, 1.0, 1.0)
    p = fixed_lms.points
    q = moving_lms.points
    if field is not None:
        upper = np.asarray(field.dims) - 1
        bad = np.flatnonzero(np.any((p < 0) | (p > upper), axis=1))
        if len(bad):
            raise ValueError(
                f"fixed landmark {int(bad[0])} at {tuple(p[bad[0]])} outside field bounds {field.dims}"
            )
        p = p + sample_field(field, p)
    err = np.linalg.norm((p - q) * np.asarray(spacing, dtype=np.float64), axis=1)
    return TREReport.from_errors(err)


# ---------------------------------------------------------------------------
# synthetic data


def make_lung_phantom(dims=(128, 128, 128), spacing=(1.0, 1.0, 1.0), seed: int = 0,
                      with_texture: bool = True) -> tuple[Volume3, Volume3]:
    """Torso-like CT phantom in HU and its ground-truth lung mask.

    Air outside an ellipsoidal body (0 HU), two ellipsoidal lungs (-850 HU)
    filled with blob-like vessel texture when ``with_texture``.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(n) for n in dims)
    c = [np.linspace(-1.0, 1.0, n) for n in dims]
    x, y, z = np.meshgrid(*c, indexing="ij")
    body = (x / 0.92) ** 2 + (y / 0.75) ** 2 + (z / 0.95) ** 2 <= 1.0
    left = ((x + 0.42) / 0.34) ** 2 + (y / 0.5) ** 2 + (z / 0.7) ** 2 <= 1.0
    right = ((x - 0.42) / 0.34) ** 2 + (y / 0.5) ** 2 + (z / 0.7) ** 2 <= 1.0
    lungs = left | right

    hu = np.full(dims, -1000.0)
    hu[body] = 0.0
    if with_texture:
        tissue = ndimage.gaussian_filter(rng.standard_normal(dims), 1.0)
        hu[body] += 40.0 * tissue[body] / tissue.std()
    hu[lungs] = -850.0
    if with_texture:
        blobs = ndimage.gaussian_filter(rng.standard_normal(dims), 1.6)
        blobs /= blobs.std()
        vessels = 1.0 / (1.0 + np.exp(-(blobs - 1.2) / 0.15))
        fine = ndimage.gaussian_filter(rng.standard_normal(dims), 0.7)
        hu[lungs] += 750.0 * vessels[lungs] + 25.0 * fine[lungs] / fine.std()
    return Volume3(hu, spacing, "HU"), Volume3(lungs.astype(np.float32), spacing, "arbitrary")


def _smooth_noise_field(dims, spacing, smoothness_mm: float, rng, cells: float = 4.0) -> np.ndarray:
    """Gaussian-smoothed white noise, shape ``(3, nx, ny, nz)``, in arbitrary units.

    The noise lives on a padded coarse grid (``cells`` nodes per kernel
    sigma) so no periodic or reflective boundary shapes the spectrum; the
    smooth result is cubic-interpolated onto the voxel grid.
    """
    h = smoothness_mm / cells
    sp = np.asarray(spacing, dtype=np.float64)
    pad = 4.0 * smoothness_mm
    extent = (np.asarray(dims) - 1) * sp
    n = tuple(int(v) for v in np.ceil((extent + 2 * pad) / h) + 1)
    coords = (np.indices(tuple(dims), dtype=np.float64) * sp[:, None, None, None] + pad) / h
    out = []
    for _ in range(3):
        coarse = ndimage.gaussian_filter(rng.standard_normal(n), cells, mode="constant")
        out.append(ndimage.map_coordinates(coarse, coords, order=3, mode="nearest"))
    return np.stack(out)


def invert_field(vectors: np.ndarray, iters: int = 60) -> np.ndarray:
    """Fixed-point inverse ``w(y) = -v(y + w(y))`` of a ``(nx, ny, nz, 3)`` voxel field."""
    v = np.moveaxis(np.asarray(vectors, dtype=np.float64), -1, 0)
    grid = np.indices(v.shape[1:], dtype=np.float64)
    w = -v.copy()
    for _ in range(iters):
        coords = grid + w
        w = -np.stack([ndimage.map_coordinates(v[c], coords, order=1, mode="nearest")
                       for c in range(3)])
    return np.moveaxis(w, 0, -1)


def gen_synthetic_case(
    base: Volume3,
    max_disp_mm: float = 20.0,
    smoothness_mm: float = 30.0,
    seed: int = 0,
    n_landmarks: int = 300,
    landmark_mask: Optional[Volume3] = None,
    landmark_nms: int = 4,
):
    """Random smooth deformation of ``base``.

    Returns ``(moving, truth, (fixed_lms, moving_lms))``. ``truth`` maps
    fixed (= ``base``) voxels to moving voxels, so ``tre(..., field=truth)``
    is zero up to float rounding. Fixed landmarks sit on gradient-magnitude
    maxima of ``base`` (Chebyshev spacing > ``landmark_nms``); their moving
    partners are ``p + truth(p)``. Pairs whose partner leaves the volume
    are dropped.
    """
    if max_disp_mm < 0:
        raise ValueError("max_disp_mm must be >= 0")
    if smoothness_mm <= 0:
        raise ValueError("smoothness_mm must be > 0")
    rng = np.random.default_rng(seed)
    dims = base.dims
    sp = np.asarray(base.spacing)

    raw = _smooth_noise_field(dims, base.spacing, smoothness_mm, rng)
    mm = np.moveaxis(raw, 0, -1) * sp
    peak = np.linalg.norm(mm, axis=-1).max()
    if max_disp_mm == 0 or peak == 0:
        truth_vox = np.zeros(dims + (3,))
    else:
        truth_vox = mm * (max_disp_mm / peak) / sp
    truth = DenseField(truth_vox, base.spacing)

    if max_disp_mm == 0:
        moving = base
    else:
        backward = DenseField(invert_field(truth.vectors), base.spacing)
        moving = warp(base, backward)

    gmag = ndimage.gaussian_gradient_magnitude(base.voxels.astype(np.float64), 1.0)
    margin = np.zeros(dims, dtype=bool)
    m = 3
    margin[m:-m, m:-m, m:-m] = True
    if landmark_mask is not None:
        margin &= landmark_mask.voxels > 0
    # oversample, then keep pairs whose partner stays inside the volume
    kps = select_keypoints(Volume3(gmag * margin, base.spacing), None, 3 * n_landmarks, landmark_nms)
    p = kps.coords.astype(np.float64)
    q = p + truth.vectors[tuple(kps.coords.T)].astype(np.float64)
    inside = np.all((q >= 0) & (q <= np.asarray(dims) - 1), axis=1)
    keep = np.flatnonzero(inside)[:n_landmarks]
    return moving, truth, (LandmarkSet(p[keep]), LandmarkSet(q[keep]))
