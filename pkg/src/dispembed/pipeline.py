"""End-to-end registration: configuration, lung-mask fallback and stage orchestration."""

from __future__ import annotations

import dataclasses
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from threadpoolctl import threadpool_limits

from .correspondence import CostMapSet, DisplacementLattice, build_cost_maps, normalize_costs
from .embedding import Embedding, fit_pca
from .features import compute_mind, preprocess_ct
from .keypoints import KeypointSet, foerstner_scores, select_keypoints
from .regularize import (
    SparseDisplacements,
    build_graph,
    extrapolate_dense,
    keypoint_residual,
    regularize_displacements,
)
from .volume_io import DenseField, Volume3

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class MaskError(ValueError):
    pass


@dataclass
class PipelineConfig:
    clamp_lo: float = -1000.0
    clamp_hi: float = 500.0
    resample_spacing_mm: Optional[float] = None
    stride: int = 2
    neighborhood: str = "ssc12"
    patch_radius: int = 1
    patch_weighting: str = "box"
    n_keypoints: int = 1500
    nms_radius: int = 3
    foerstner_sigma_mm: float = 2.0
    foerstner_grad_sigma_mm: float = 1.0
    mask_mode: str = "auto"
    mask_threshold_hu: float = -400.0
    grid_radius: int = 10
    grid_step: int = 2
    patch_radius_f: int = 1
    embed_dim: Union[int, str] = 512
    knn: int = 10
    bandwidth_factor: float = 1.0
    alpha: float = 0.5
    iters: int = 5
    vector_stage: bool = False
    alpha_vec: float = 0.5
    iters_vec: int = 5
    temperature: float = 0.03
    cost_normalization: str = "keypoint"
    extrapolation_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError("clamp_lo must be < clamp_hi")
        if self.resample_spacing_mm is not None and self.resample_spacing_mm <= 0:
            raise ValueError("resample_spacing_mm must be > 0")
        if self.stride < 1 or self.patch_radius < 0 or self.patch_radius_f < 0:
            raise ValueError("stride >= 1 and patch radii >= 0 required")
        if self.neighborhood not in ("six_nn", "ssc12"):
            raise ValueError(f"unknown neighborhood {self.neighborhood!r}")
        if self.patch_weighting not in ("box", "gaussian"):
            raise ValueError(f"unknown patch weighting {self.patch_weighting!r}")
        if self.n_keypoints < 1 or self.nms_radius < 1:
            raise ValueError("n_keypoints and nms_radius must be >= 1")
        if self.foerstner_sigma_mm <= 0 or self.foerstner_grad_sigma_mm <= 0:
            raise ValueError("Foerstner sigmas must be > 0")
        if self.mask_mode not in ("auto", "fallback", "none"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.grid_radius < 0 or self.grid_step < 1:
            raise ValueError("grid_radius >= 0 and grid_step >= 1 required")
        if self.grid_step % self.stride:
            raise ValueError("grid_step must be a multiple of stride")
        if self.embed_dim != "full" and (not isinstance(self.embed_dim, int) or self.embed_dim < 1):
            raise ValueError("embed_dim must be a positive integer or 'full'")
        if self.knn < 1 or self.bandwidth_factor <= 0 or self.extrapolation_factor <= 0:
            raise ValueError("knn >= 1 and positive bandwidth factors required")
        if not (0 <= self.alpha < 1 and 0 <= self.alpha_vec < 1):
            raise ValueError("alpha values must lie in [0, 1)")
        if self.iters < 0 or self.iters_vec < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.cost_normalization not in ("keypoint", "none"):
            raise ValueError(f"unknown cost_normalization {self.cost_normalization!r}")

    @property
    def lattice(self) -> DisplacementLattice:
        return DisplacementLattice(self.grid_radius, self.grid_step)

    # flat key = value text format

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else (repr(v) if isinstance(v, float) else v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        values = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in names:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, raw, cls.__dataclass_fields__[key].default)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _parse_value(key: str, raw: str, default):
    if key == "embed_dim":
        return "full" if raw == "full" else int(raw)
    if key == "resample_spacing_mm":
        return None if raw.lower() == "none" else float(raw)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclass
class RunLog:
    stage_seconds: dict = field(default_factory=dict)
    keypoints_selected: int = 0
    keypoints_used: int = 0
    keypoints_excluded: int = 0
    embed_dim: int = 0
    explained_variance_sum: float = 0.0
    explained_variance_ratio: float = 0.0
    rank_deficient: bool = False
    mask_source: str = "none"
    extrapolation_bandwidth_mm: float = 0.0
    keypoint_residual_mean: float = 0.0
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "stage_seconds":
                out += [f"time.{k} = {s:.3f}" for k, s in v.items()]
            elif f.name == "notes":
                out += [f"note = {n}" for n in v]
            else:
                out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


@dataclass
class RegistrationResult:
    sparse: SparseDisplacements
    field: DenseField
    log: RunLog
    costs: Optional[CostMapSet] = None
    embedding: Optional[Embedding] = None


def lung_mask_fallback(vol: Volume3, threshold_hu: float = -400.0,
                       border_fraction: float = 0.01, min_fraction: float = 0.01,
                       closing_radius: int = 2) -> Volume3:
    """Low-density components not attached to the volume border, closed morphologically."""
    if vol.intensity_unit != "HU":
        raise MaskError(f"lung mask fallback needs HU intensities, got {vol.intensity_unit}")
    low = vol.voxels < threshold_hu
    labels, n = ndimage.label(low, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        raise MaskError("no voxels below the lung threshold; supply a mask")
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    border = np.zeros(vol.dims, dtype=bool)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    on_border = np.bincount(labels[border], minlength=n + 1)
    keep = (on_border <= border_fraction * sizes) & (sizes >= min_fraction * low.size)
    keep[0] = False
    if not keep.any():
        raise MaskError("no lung-like component survived; supply a mask")
    mask = keep[labels]
    r = closing_radius
    if r > 0:
        g = np.indices((2 * r + 1,) * 3) - r
        ball = (g ** 2).sum(axis=0) <= r * r
        padded = np.pad(mask, r)
        mask = ndimage.binary_closing(padded, structure=ball)[r:-r, r:-r, r:-r]
    return Volume3(mask.astype(np.float32), vol.spacing, "arbitrary")


def resample_isotropic(vol: Volume3, spacing_mm: float, order: int = 1) -> Volume3:
    """Resample onto an isotropic grid with the same physical origin."""
    sp = np.asarray(vol.spacing)
    dims = np.maximum(np.floor((np.asarray(vol.dims) - 1) * sp / spacing_mm).astype(int) + 1, 1)
    coords = np.indices(tuple(dims), dtype=np.float64) * (spacing_mm / sp)[:, None, None, None]
    out = ndimage.map_coordinates(vol.voxels, coords, order=order, mode="nearest")
    return Volume3(out, (spacing_mm,) * 3, vol.intensity_unit)


@contextmanager
def _stage(name: str, runlog: RunLog):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        runlog.stage_seconds[name] = time.perf_counter() - t0
        log.info("%s: %.2f s", name, runlog.stage_seconds[name])


def register(
    fixed: Volume3,
    moving: Volume3,
    mask: Optional[Volume3] = None,
    cfg: Optional[PipelineConfig] = None,
    threads: Optional[int] = None,
    embedding: Optional[Embedding] = None,
) -> RegistrationResult:
    """Register ``moving`` to ``fixed``.

    Stage order: preprocess, descriptors, keypoints, cost maps, embedding,
    graph regularisation, dense extrapolation. The returned field is on the
    original fixed grid in fixed voxel units and maps fixed points to moving
    points. ``threads`` only affects cost-map parallelism; BLAS is pinned to
    one thread so results are bitwise independent of it.
    """
    cfg = cfg or PipelineConfig()
    cfg.validate()
    runlog = RunLog()
    with threadpool_limits(limits=1):
        return _register(fixed, moving, mask, cfg, threads, embedding, runlog)


def _register(fixed, moving, mask, cfg, threads, embedding, runlog) -> RegistrationResult:
    orig_dims, orig_spacing = fixed.dims, fixed.spacing

    with _stage("preprocess", runlog):
        if mask is None and cfg.mask_mode != "none":
            try:
                mask = lung_mask_fallback(fixed, cfg.mask_threshold_hu)
                runlog.mask_source = "fallback"
            except MaskError as exc:
                if cfg.mask_mode == "fallback":
                    raise
                runlog.notes.append(f"no mask: {exc}")
        elif mask is not None:
            runlog.mask_source = "user"
            if mask.dims != fixed.dims:
                raise ValueError(f"mask dims {mask.dims} differ from fixed {fixed.dims}")
        if cfg.resample_spacing_mm is not None:
            fixed = resample_isotropic(fixed, cfg.resample_spacing_mm)
            moving = resample_isotropic(moving, cfg.resample_spacing_mm)
            if mask is not None:
                mask = resample_isotropic(mask, cfg.resample_spacing_mm, order=0)
            runlog.notes.append(f"resampled to {cfg.resample_spacing_mm} mm isotropic")
        if not np.allclose(fixed.spacing, moving.spacing):
            raise ValueError(f"spacing mismatch: fixed {fixed.spacing}, moving {moving.spacing}")
        if fixed.intensity_unit == "HU":
            fixed_n = preprocess_ct(fixed, cfg.clamp_lo, cfg.clamp_hi)
            moving_n = preprocess_ct(moving, cfg.clamp_lo, cfg.clamp_hi)
            runlog.notes.append(f"clamped to [{cfg.clamp_lo}, {cfg.clamp_hi}] HU")
        else:
            fixed_n, moving_n = fixed, moving
            runlog.notes.append(f"intensities used as given ({fixed.intensity_unit})")

    with _stage("descriptors", runlog):
        fdesc = compute_mind(fixed_n, cfg.stride, cfg.patch_radius, cfg.neighborhood,
                             cfg.patch_weighting)
        mdesc = compute_mind(moving_n, cfg.stride, cfg.patch_radius, cfg.neighborhood,
                             cfg.patch_weighting)

    with _stage("keypoints", runlog):
        scores = foerstner_scores(fixed_n, cfg.foerstner_sigma_mm, cfg.foerstner_grad_sigma_mm)
        # candidates restricted to descriptor-lattice voxels
        on_lattice = np.zeros(fixed.dims, dtype=np.float32)
        on_lattice[::cfg.stride, ::cfg.stride, ::cfg.stride] = 1.0
        if mask is not None:
            on_lattice *= (mask.voxels > 0)
        kps = select_keypoints(scores, fixed.with_voxels(on_lattice), cfg.n_keypoints,
                               cfg.nms_radius)
        runlog.keypoints_selected = len(kps)

    with _stage("cost_maps", runlog):
        costs = build_cost_maps(fdesc, mdesc, kps, cfg.lattice, cfg.patch_radius_f, threads)
        runlog.keypoints_used = len(costs.keypoints)
        runlog.keypoints_excluded = costs.excluded
        if len(costs.keypoints) < 2:
            raise ValueError("fewer than 2 usable keypoints")

    with _stage("embedding", runlog):
        signal = normalize_costs(costs.costs) if cfg.cost_normalization == "keypoint" else costs.costs
        signal_costs = CostMapSet(costs.keypoints, costs.lattice, signal.astype(np.float64),
                                  costs.excluded, costs.excluded_coords)
        if embedding is None:
            n, d = signal.shape
            k = min(n, d) if cfg.embed_dim == "full" else int(cfg.embed_dim)
            if k > min(n, d):
                runlog.notes.append(f"embed_dim {k} clamped to min(N, D) = {min(n, d)}")
                k = min(n, d)
            embedding = fit_pca(signal, k)
        runlog.embed_dim = embedding.dim_out
        runlog.explained_variance_sum = float(embedding.explained_variance.sum())
        total = float(signal.var(axis=0, ddof=1).sum())
        runlog.explained_variance_ratio = runlog.explained_variance_sum / total if total > 0 else 1.0
        runlog.rank_deficient = embedding.rank_deficient

    with _stage("regularize", runlog):
        graph = build_graph(costs.keypoints, fixed.spacing, cfg.knn, cfg.bandwidth_factor)
        sparse = regularize_displacements(
            signal_costs, embedding, graph, cfg.alpha, cfg.iters, cfg.temperature,
            cfg.vector_stage, cfg.alpha_vec, cfg.iters_vec,
            renormalize=cfg.cost_normalization == "keypoint",
        )

    with _stage("extrapolate", runlog):
        sparse_out = _to_original_grid(sparse, fixed.spacing, orig_spacing)
        spacing = np.asarray(orig_spacing)
        pts = sparse_out.keypoints.coords * spacing
        nn, _ = cKDTree(pts).query(pts, k=2)
        bandwidth = cfg.extrapolation_factor * float(nn[:, 1].mean())
        runlog.extrapolation_bandwidth_mm = bandwidth
        dense = extrapolate_dense(sparse_out, orig_dims, orig_spacing, bandwidth)
        if len(sparse_out) <= 4000:
            runlog.keypoint_residual_mean = float(
                keypoint_residual(sparse_out, orig_spacing, bandwidth).mean())

    return RegistrationResult(sparse_out, dense, runlog, costs, embedding)


def _to_original_grid(sparse: SparseDisplacements, work_spacing, orig_spacing) -> SparseDisplacements:
    if np.allclose(work_spacing, orig_spacing):
        return sparse
    scale = np.asarray(work_spacing) / np.asarray(orig_spacing)
    coords = np.rint(sparse.keypoints.coords * scale).astype(np.int64)
    return SparseDisplacements(KeypointSet(coords, sparse.keypoints.scores), sparse.vectors * scale)
