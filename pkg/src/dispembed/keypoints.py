"""Foerstner interest operator and greedy non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume_io import Volume3

TENSOR_REG = 1e-9


class NoKeypointsError(ValueError):
    pass


@dataclass(frozen=True)
class KeypointSet:
    """Integer voxel coordinates ``(N, 3)`` with scores sorted non-increasing."""

    coords: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(c) != len(s):
            raise ValueError("coords and scores differ in length")
        c.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return len(self.coords)

    def subset(self, index) -> "KeypointSet":
        return KeypointSet(self.coords[index], self.scores[index])


def structure_tensor(vol: Volume3, sigma: float, grad_sigma: float) -> np.ndarray:
    """Smoothed gradient outer products, shape ``(nx, ny, nz, 6)``.

    Components are ordered xx, yy, zz, xy, xz, yz. Gradients are Gaussian
    derivatives in intensity per mm; both widths are given in mm.
    """
    img = vol.voxels.astype(np.float64)
    sp = np.asarray(vol.spacing)
    gsig = grad_sigma / sp
    grads = []
    for axis in range(3):
        order = [0, 0, 0]
        order[axis] = 1
        grads.append(ndimage.gaussian_filter(img, gsig, order=order, mode="nearest") / sp[axis])
    gx, gy, gz = grads
    products = (gx * gx, gy * gy, gz * gz, gx * gy, gx * gz, gy * gz)
    ssig = sigma / sp
    return np.stack(
        [ndimage.gaussian_filter(p, ssig, mode="nearest") for p in products], axis=-1
    )


def foerstner_from_tensor(t: np.ndarray, delta: float = TENSOR_REG) -> np.ndarray:
    """``1 / trace((S + delta I)^-1)``, zero where S is (numerically) rank deficient."""
    a, b, c = t[..., 0] + delta, t[..., 1] + delta, t[..., 2] + delta
    d, e, f = t[..., 3], t[..., 4], t[..., 5]
    # trace of the inverse = sum of principal 2x2 minors / det
    minors = (a * b - d * d) + (a * c - e * e) + (b * c - f * f)
    det = a * (b * c - f * f) - d * (d * c - f * e) + e * (d * f - b * e)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(minors > 0, det / minors, 0.0)
    # score <= delta means the smallest eigenvalue sits at the regularisation floor
    score[~(score > delta)] = 0.0
    return score


def foerstner_scores(vol: Volume3, sigma: float = 2.0, grad_sigma: float = 1.0) -> Volume3:
    if sigma <= 0 or grad_sigma <= 0:
        raise ValueError("sigma and grad_sigma must be > 0")
    score = foerstner_from_tensor(structure_tensor(vol, sigma, grad_sigma))
    return vol.with_voxels(score, "arbitrary")


def select_keypoints(
    scores: Volume3,
    mask: Optional[Volume3] = None,
    target_count: int = 1500,
    nms_radius: int = 3,
) -> KeypointSet:
    """Greedy selection in descending score order with Chebyshev suppression.

    A candidate (score > 0, inside the mask) is skipped when an accepted
    keypoint lies within Chebyshev distance ``nms_radius``. Equal scores are
    visited in lexicographic ``(i, j, k)`` order.
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    if nms_radius < 1:
        raise ValueError("nms_radius must be >= 1")
    s = scores.voxels
    valid = s > 0
    if mask is not None:
        if mask.dims != scores.dims:
            raise ValueError(f"mask dims {mask.dims} differ from score dims {scores.dims}")
        valid &= mask.voxels > 0
    cand = np.argwhere(valid)
    if len(cand) == 0:
        raise NoKeypointsError("no keypoint candidates (empty mask or all-zero scores)")
    cs = s[valid]
    order = np.lexsort((cand[:, 2], cand[:, 1], cand[:, 0], -cs))

    r = nms_radius
    blocked = np.zeros(tuple(n + 2 * r for n in s.shape), dtype=bool)
    chosen = []
    for idx in order:
        i, j, k = cand[idx]
        if blocked[i + r, j + r, k + r]:
            continue
        chosen.append(idx)
        blocked[i:i + 2 * r + 1, j:j + 2 * r + 1, k:k + 2 * r + 1] = True
        if len(chosen) == target_count:
            break
    chosen = np.asarray(chosen, dtype=np.int64)
    return KeypointSet(cand[chosen], cs[chosen])
