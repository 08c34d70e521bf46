"""MIND-style self-similarity descriptors on a strided lattice."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import Volume3, write_raw_meta

EPS_VARIANCE = 1e-6

SIX_NN = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=int
)


def _ssc12_pairs() -> np.ndarray:
    # pairs of six-neighbourhood offsets at squared distance 2 (12 edges of an octahedron)
    pairs = [
        (a, b)
        for a, b in itertools.combinations(SIX_NN.tolist(), 2)
        if sum((x - y) ** 2 for x, y in zip(a, b)) == 2
    ]
    return np.array(pairs, dtype=int)


SSC12_PAIRS = _ssc12_pairs()


def neighborhood_pairs(neighborhood: str) -> np.ndarray:
    """Offset pairs ``(a, b)`` per channel; the channel compares patches at x+a and x+b."""
    if neighborhood == "six_nn":
        return np.stack([np.zeros_like(SIX_NN), SIX_NN], axis=1)
    if neighborhood == "ssc12":
        return SSC12_PAIRS.copy()
    raise ValueError(f"unknown neighborhood {neighborhood!r} (expected six_nn or ssc12)")


class VolumeTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptorField:
    """Descriptors sampled at voxels ``origin + stride * (a, b, c)``.

    ``values`` has shape ``(mx, my, mz, C)``.
    """

    values: np.ndarray
    stride: int = 1
    origin_offset: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"descriptor values must be 4D, got {self.values.shape}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    def lattice_index(self, coords) -> np.ndarray:
        """Nearest lattice index for voxel coordinates (rows of ``coords``)."""
        c = (np.asarray(coords, dtype=np.float64) - np.asarray(self.origin_offset)) / self.stride
        return np.floor(c + 0.5).astype(np.int64)

    def save(self, path) -> None:
        write_raw_meta(path, self.values, (float(self.stride),) * 3, "float32",
                       {"stride": self.stride,
                        "origin_offset": " ".join(str(o) for o in self.origin_offset)})


def preprocess_ct(vol: Volume3, clamp_lo: float = -1000.0, clamp_hi: float = 500.0) -> Volume3:
    """Clamp to ``[clamp_lo, clamp_hi]`` and map affinely onto ``[0, 1]``."""
    if not clamp_lo < clamp_hi:
        raise ValueError(f"clamp_lo must be < clamp_hi, got {clamp_lo}, {clamp_hi}")
    v = np.clip(vol.voxels.astype(np.float64), clamp_lo, clamp_hi)
    return vol.with_voxels((v - clamp_lo) / (clamp_hi - clamp_lo), "normalized")


def _shift(img: np.ndarray, offset) -> np.ndarray:
    """``out[x] = img[clamp(x + offset)]``."""
    pad = int(np.max(np.abs(offset)))
    if pad == 0:
        return img
    padded = np.pad(img, pad, mode="edge")
    sl = tuple(slice(pad + o, pad + o + n) for o, n in zip(offset, img.shape))
    return padded[sl]


def _patch_mean(img: np.ndarray, patch_radius: int, weighting: str) -> np.ndarray:
    if patch_radius == 0:
        return img
    if weighting == "box":
        return ndimage.uniform_filter(img, size=2 * patch_radius + 1, mode="nearest")
    if weighting == "gaussian":
        return ndimage.gaussian_filter(img, sigma=patch_radius / 2.0, mode="nearest",
                                       truncate=2.0)
    raise ValueError(f"unknown patch weighting {weighting!r}")


def compute_mind(
    vol: Volume3,
    stride: int = 2,
    patch_radius: int = 1,
    neighborhood: str = "ssc12",
    weighting: str = "box",
    origin_offset: int = 0,
    dilation: int = 1,
) -> DescriptorField:
    """Compute MIND / MIND-SSC descriptors and sample them every ``stride`` voxels.

    For each channel the patch distance is the box- (or Gaussian-) weighted
    mean of squared intensity differences between the patches at ``x + a``
    and ``x + b``. Channels are ``exp(-Dp / V)`` with ``V`` the per-voxel mean
    patch distance (floored at ``EPS_VARIANCE``), then divided by their
    per-voxel maximum. Borders replicate edge voxels.

    ``dilation`` scales the neighbourhood offsets. The lattice output is
    the stride-1 result sampled at ``origin_offset + stride * a`` with
    ``floor((n - origin_offset) / stride)`` points per axis, so strides are
    exactly consistent.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch_radius < 0:
        raise ValueError("patch_radius must be >= 0")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    pairs = neighborhood_pairs(neighborhood) * dilation
    reach = 2 * patch_radius + 1 + int(np.abs(pairs).max())
    if min(vol.dims) < reach:
        raise VolumeTooSmallError(
            f"volume {vol.dims} too small for patch_radius {patch_radius} "
            f"(need >= {reach} voxels per axis)"
        )
    if not 0 <= origin_offset < stride:
        raise ValueError("origin_offset must lie in [0, stride)")

    img = vol.voxels.astype(np.float64)
    # floor((n - origin_offset) / stride) lattice points per axis
    sub = tuple(slice(origin_offset, origin_offset + stride * ((n - origin_offset) // stride), stride)
                for n in vol.dims)
    dist = []
    for a, b in pairs:
        d2 = (_shift(img, a) - _shift(img, b)) ** 2
        dist.append(_patch_mean(d2, patch_radius, weighting)[sub])
    dist = np.stack(dist, axis=-1)

    variance = np.maximum(dist.mean(axis=-1, keepdims=True), EPS_VARIANCE)
    desc = np.exp(-dist / variance)
    desc /= desc.max(axis=-1, keepdims=True)
    return DescriptorField(desc.astype(np.float32), stride, (origin_offset,) * 3)
