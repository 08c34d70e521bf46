"""Displacement cost maps over a discrete offset lattice and their decoding."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import DescriptorField
from .keypoints import KeypointSet
from .volume_io import write_raw_meta


@dataclass(frozen=True)
class DisplacementLattice:
    """``(2L+1)^3`` integer offsets with components in ``{-Lq, ..., 0, ..., Lq}``.

    Offsets are ordered x-fastest / z-slowest: index
    ``a + n * (b + n * c)`` with ``n = 2L+1`` holds
    ``q * (a - L, b - L, c - L)``. Index 0 is ``(-Lq, -Lq, -Lq)``.
    """

    radius_steps: int = 10
    step_voxels: int = 2

    def __post_init__(self):
        if self.radius_steps < 0 or self.step_voxels < 1:
            raise ValueError("need radius_steps >= 0 and step_voxels >= 1")

    @property
    def side(self) -> int:
        return 2 * self.radius_steps + 1

    @property
    def size(self) -> int:
        return self.side ** 3

    @property
    def center_index(self) -> int:
        return (self.size - 1) // 2

    @property
    def extent(self) -> int:
        return self.radius_steps * self.step_voxels

    @cached_property
    def offsets(self) -> np.ndarray:
        steps = np.arange(-self.radius_steps, self.radius_steps + 1)
        c, b, a = np.meshgrid(steps, steps, steps, indexing="ij")
        off = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1) * self.step_voxels
        off.setflags(write=False)
        return off


@dataclass(frozen=True)
class CostMapSet:
    """``costs[n, d]``: dissimilarity of keypoint ``n`` under offset ``d``."""

    keypoints: KeypointSet
    lattice: DisplacementLattice
    costs: np.ndarray
    excluded: int = 0
    excluded_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        if self.costs.shape != (len(self.keypoints), self.lattice.size):
            raise ValueError(
                f"costs shape {self.costs.shape} != ({len(self.keypoints)}, {self.lattice.size})"
            )

    def save(self, path) -> None:
        """Dump as raw+meta: an ``N x D`` float32 matrix plus lattice and keypoints."""
        n, d = self.costs.shape
        write_raw_meta(
            path, self.costs.T.reshape(d, max(n, 1), 1), (1.0, 1.0, 1.0), "float32",
            {
                "kind": "cost_maps",
                "layout": "dims = D N 1, offset index fastest",
                "radius_steps": self.lattice.radius_steps,
                "step_voxels": self.lattice.step_voxels,
                "excluded": self.excluded,
                "keypoints": " ".join(str(int(v)) for v in self.keypoints.coords.ravel()),
            },
        )


def _window_costs(fixed_patch: np.ndarray, window: np.ndarray, patch: int) -> np.ndarray:
    """Mean squared difference of ``fixed_patch`` against every placement in ``window``."""
    views = sliding_window_view(window, (patch, patch, patch), axis=(0, 1, 2))
    # views: (s, s, s, C, p, p, p); fixed_patch: (p, p, p, C)
    diff = views - fixed_patch.transpose(3, 0, 1, 2)
    diff *= diff
    return diff.mean(axis=(3, 4, 5, 6))


def build_cost_maps(
    fixed: DescriptorField,
    moving: DescriptorField,
    kps: KeypointSet,
    lattice: DisplacementLattice,
    patch_radius_f: int = 1,
    threads: Optional[int] = None,
) -> CostMapSet:
    """Patch SSD between fixed descriptors at each keypoint and displaced moving descriptors.

    Keypoints are snapped to the nearest descriptor-lattice point. The
    offset step must be a multiple of the descriptor stride so that every
    candidate lands on a lattice point. Moving samples outside the lattice
    are edge-replicated; keypoints whose fixed patch leaves the lattice are
    dropped and counted in ``excluded``.

    Rows are computed independently and written to disjoint slots, so the
    result does not depend on ``threads``.
    """
    if fixed.stride != moving.stride or fixed.channels != moving.channels:
        raise ValueError("fixed and moving descriptors differ in stride or channel count")
    if fixed.origin_offset != moving.origin_offset:
        raise ValueError("fixed and moving descriptors differ in lattice origin")
    if lattice.step_voxels % fixed.stride:
        raise ValueError(
            f"grid step {lattice.step_voxels} must be a multiple of descriptor stride {fixed.stride}"
        )
    if patch_radius_f < 0:
        raise ValueError("patch_radius_f must be >= 0")

    r = patch_radius_f
    p = 2 * r + 1
    step = lattice.step_voxels // fixed.stride
    L = lattice.radius_steps
    gdims = np.asarray(fixed.grid_dims)

    idx = fixed.lattice_index(kps.coords)
    inside = np.all((idx - r >= 0) & (idx + r < gdims), axis=1)
    kept = kps.subset(np.flatnonzero(inside))
    idx = idx[inside]

    fvals = fixed.values
    mvals = moving.values
    mdims = np.asarray(moving.grid_dims)
    # moving samples needed: centre + step * (-L..L) + (-r..r)
    rel = (np.arange(-L, L + 1)[:, None] * step + np.arange(-r, r + 1)[None, :])
    span = np.arange(rel.min(), rel.max() + 1)
    side = lattice.side
    costs = np.empty((len(kept), lattice.size), dtype=np.float32)

    def one(n: int) -> None:
        ci, cj, ck = idx[n]
        fpatch = fvals[ci - r:ci + r + 1, cj - r:cj + r + 1, ck - r:ck + r + 1]
        ax = [np.clip(c + span, 0, m - 1) for c, m in zip((ci, cj, ck), mdims)]
        window = mvals[np.ix_(ax[0], ax[1], ax[2])]
        if step > 1:
            # strided placements: sample each axis at step, keep patch contiguity
            sel = np.arange(side)[:, None] * step + np.arange(p)[None, :]
            window = window[np.ix_(sel.ravel(), sel.ravel(), sel.ravel())]
            window = window.reshape(side, p, side, p, side, p, -1)
            diff = window - fpatch[None, :, None, :, None, :, :]
            diff *= diff
            c = diff.mean(axis=(1, 3, 5, 6))
        else:
            c = _window_costs(fpatch, window, p)
        # c is indexed [a, b, c]; lattice order is x-fastest
        costs[n] = c.transpose(2, 1, 0).ravel()

    n_kp = len(kept)
    if threads and threads > 1 and n_kp > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(n_kp)))
    else:
        for n in range(n_kp):
            one(n)

    excluded_coords = kps.coords[~inside]
    return CostMapSet(kept, lattice, costs, int((~inside).sum()), excluded_coords)


def normalize_costs(costs: np.ndarray) -> np.ndarray:
    """Per-row rescale of cost maps to zero minimum and unit mean.

    Makes the soft-argmin temperature dimensionless.
    """
    c = np.asarray(costs, dtype=np.float64)
    lo = c.min(axis=-1, keepdims=True)
    scale = c.mean(axis=-1, keepdims=True) - lo
    scale[scale <= 0] = 1.0
    return (c - lo) / scale


def _softmin_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    z = -np.asarray(costs, dtype=np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=-1, keepdims=True)
    return w


def soft_argmin(cost_map, lattice: DisplacementLattice, temperature: float = 1.0) -> np.ndarray:
    """Expected offset under ``softmax(-cost / temperature)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    w = _softmin_weights(cost_map, temperature)
    return w @ lattice.offsets.astype(np.float64)


def soft_argmin_batch(costs: np.ndarray, lattice: DisplacementLattice,
                      temperature: float = 1.0) -> np.ndarray:
    """Row-wise ``soft_argmin`` for an ``N x D`` matrix."""
    return soft_argmin(np.atleast_2d(costs), lattice, temperature)


def hard_argmin(cost_map, lattice: DisplacementLattice) -> np.ndarray:
    """Offset of the minimum cost; ties go to the lowest offset index."""
    c = np.asarray(cost_map)
    return lattice.offsets[np.argmin(c, axis=-1)].astype(np.float64)
