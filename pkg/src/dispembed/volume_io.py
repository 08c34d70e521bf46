"""Volume, landmark and displacement-field I/O.

Two volume formats are supported: a single-file NIfTI-1 subset (optionally
gzipped) and a raw+meta pair (``<name>.raw`` little-endian scalars plus a
``<name>.meta`` text sidecar). Arrays are held as ``(nx, ny, nz)`` numpy
arrays indexed ``[i, j, k]``; on disk voxels are x-fastest, i.e. voxel
``(i, j, k)`` sits at flat index ``i + nx * (j + ny * k)``.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

INTENSITY_UNITS = ("HU", "normalized", "arbitrary")

# NIfTI datatype code -> little-endian numpy dtype
NIFTI_DTYPES = {4: np.dtype("<i2"), 512: np.dtype("<u2"), 16: np.dtype("<f4")}
NIFTI_CODES = {v.name: k for k, v in NIFTI_DTYPES.items()}

RAW_DTYPES = {
    "int16": np.dtype("<i2"),
    "uint16": np.dtype("<u2"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}


class VolumeFormatError(ValueError):
    """Unsupported or malformed file content."""


class DimensionError(ValueError):
    """Wrong number of dimensions or inconsistent shapes."""


class TruncatedDataError(OSError):
    """Payload shorter than the header promises."""

    def __init__(self, path, expected: int, actual: int):
        super().__init__(
            f"{path}: truncated payload, expected {expected} bytes, got {actual}"
        )
        self.expected = expected
        self.actual = actual


class LandmarkParseError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise DimensionError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing components must be > 0, got {sp}")
    return sp


@dataclass(frozen=True)
class Volume3:
    """3D scalar volume. ``voxels`` has shape ``(nx, ny, nz)``, float32."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_unit: str = "arbitrary"

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise DimensionError(f"volume must be 3D, got {v.ndim} dims")
        if min(v.shape) < 1:
            raise DimensionError(f"volume dims must be >= 1, got {v.shape}")
        v = v.astype(np.float32, copy=False)
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite voxels")
        if self.intensity_unit not in INTENSITY_UNITS:
            raise ValueError(f"unknown intensity unit {self.intensity_unit!r}")
        object.__setattr__(self, "voxels", _frozen(v))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def flat_voxels(self) -> np.ndarray:
        """Voxels in x-fastest order."""
        return self.voxels.ravel(order="F")

    def with_voxels(self, voxels, intensity_unit: Optional[str] = None) -> "Volume3":
        return Volume3(voxels, self.spacing, intensity_unit or self.intensity_unit)

    def __eq__(self, other):
        if not isinstance(other, Volume3):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.intensity_unit == other.intensity_unit
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None


@dataclass(frozen=True)
class LandmarkSet:
    """Continuous voxel coordinates, one ``(i, j, k)`` row per point."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("landmarks contain non-finite coordinates")
        object.__setattr__(self, "points", _frozen(p))

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self):
        return self.count


@dataclass(frozen=True)
class DenseField:
    """Displacement field in voxel units of the fixed grid, shape ``(nx, ny, nz, 3)``."""

    vectors: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 4 or v.shape[-1] != 3:
            raise DimensionError(f"field must have shape (nx, ny, nz, 3), got {v.shape}")
        if min(v.shape[:3]) < 1:
            raise DimensionError(f"field dims must be >= 1, got {v.shape[:3]}")
        v = v.astype(np.float32, copy=False)
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite vectors")
        object.__setattr__(self, "vectors", _frozen(v))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.vectors.shape[:3])

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "DenseField":
        return cls(np.zeros(tuple(dims) + (3,), np.float32), spacing)

    def __eq__(self, other):
        if not isinstance(other, DenseField):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.vectors, other.vectors)

    __hash__ = None


# ---------------------------------------------------------------------------
# raw+meta


def _raw_meta_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".raw", ".meta"):
        p = p.with_suffix("")
    return p.with_suffix(".raw"), p.with_suffix(".meta")


def read_meta(path) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def write_raw_meta(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype="float32",
                   extra: Optional[dict] = None) -> tuple[Path, Path]:
    """Write a ``(nx, ny, nz[, C])`` array as raw+meta, channels interleaved per voxel."""
    raw_path, meta_path = _raw_meta_paths(path)
    a = np.asarray(array)
    if a.ndim == 3:
        channels = 1
        payload = a.transpose(2, 1, 0)
    elif a.ndim == 4:
        channels = a.shape[3]
        payload = a.transpose(2, 1, 0, 3)
    else:
        raise DimensionError(f"expected 3D or 4D array, got {a.ndim}D")
    if dtype not in RAW_DTYPES:
        raise VolumeFormatError(f"unsupported raw dtype {dtype!r}")
    if min(a.shape[:3]) < 1:
        raise DimensionError(f"refusing to write zero-sized array {a.shape}")
    lines = [
        "dims = " + " ".join(str(n) for n in a.shape[:3]),
        "spacing = " + " ".join(repr(float(s)) for s in spacing),
        f"dtype = {dtype}",
        "order = xyz",
    ]
    if channels != 1:
        lines.append(f"channels = {channels}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    try:
        raw_path.parent.mkdir(parents=True, exist_ok=True)
        raw_path.write_bytes(np.ascontiguousarray(payload, RAW_DTYPES[dtype]).tobytes())
        meta_path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {raw_path}: {exc}") from exc
    return raw_path, meta_path


def read_raw_meta(path) -> tuple[np.ndarray, tuple[float, float, float], dict[str, str]]:
    """Read raw+meta into a ``(nx, ny, nz)`` or ``(nx, ny, nz, C)`` array."""
    raw_path, meta_path = _raw_meta_paths(path)
    meta = read_meta(meta_path)
    try:
        dims = tuple(int(t) for t in meta["dims"].split())
        dtype_name = meta.get("dtype", "float32")
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{meta_path}: bad or missing 'dims'") from exc
    if len(dims) != 3:
        raise DimensionError(f"{meta_path}: expected 3 dims, got {len(dims)}")
    if dtype_name not in RAW_DTYPES:
        raise VolumeFormatError(f"{meta_path}: unsupported dtype {dtype_name!r}")
    if meta.get("order", "xyz") != "xyz":
        raise VolumeFormatError(f"{meta_path}: unsupported order {meta['order']!r}")
    spacing = tuple(float(t) for t in meta.get("spacing", "1 1 1").split())
    channels = int(meta.get("channels", "1"))
    dt = RAW_DTYPES[dtype_name]
    data = raw_path.read_bytes()
    count = int(np.prod(dims)) * channels
    expected = count * dt.itemsize
    if len(data) < expected:
        raise TruncatedDataError(raw_path, expected, len(data))
    flat = np.frombuffer(data, dtype=dt, count=count)
    nx, ny, nz = dims
    if channels == 1:
        arr = flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    else:
        arr = flat.reshape(nz, ny, nx, channels).transpose(2, 1, 0, 3)
    return arr, _check_spacing(spacing), meta


# ---------------------------------------------------------------------------
# NIfTI-1

_NIFTI_HEADER_SIZE = 348
_NIFTI_VOX_OFFSET = 352


def _is_gz(path: Path) -> bool:
    return path.suffix == ".gz"


def _read_nifti(path: Path) -> Volume3:
    opener = gzip.open if _is_gz(path) else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < _NIFTI_HEADER_SIZE:
        raise TruncatedDataError(path, _NIFTI_HEADER_SIZE, len(data))
    (sizeof_hdr,) = struct.unpack_from("<i", data, 0)
    if sizeof_hdr != _NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: not a little-endian NIfTI-1 file")
    magic = data[344:348]
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: unsupported NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", data, 40)
    datatype, _bitpix = struct.unpack_from("<hh", data, 70)
    pixdim = struct.unpack_from("<8f", data, 76)
    (vox_offset,) = struct.unpack_from("<f", data, 108)
    scl_slope, scl_inter = struct.unpack_from("<ff", data, 112)
    if dim[0] != 3:
        raise DimensionError(f"{path}: expected 3 dimensions, header says {dim[0]}")
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dims = tuple(int(d) for d in dim[1:4])
    dt = NIFTI_DTYPES[datatype]
    offset = int(vox_offset)
    expected = int(np.prod(dims)) * dt.itemsize
    actual = max(len(data) - offset, 0)
    if actual < expected:
        raise TruncatedDataError(path, expected, actual)
    flat = np.frombuffer(data, dtype=dt, count=int(np.prod(dims)), offset=offset)
    arr = flat.reshape(dims[::-1]).transpose(2, 1, 0)
    if scl_slope != 0 and np.isfinite(scl_slope):
        arr = arr.astype(np.float64) * scl_slope + scl_inter
    spacing = _exact_spacing(data[148:228], pixdim[1:4])
    return Volume3(arr.astype(np.float32), spacing, "arbitrary")


def _exact_spacing(descrip: bytes, pixdim) -> tuple[float, float, float]:
    # pixdim is float32; our writer also stores the float64 spacing as text
    # in descrip and it wins when it agrees with pixdim
    spacing = tuple(abs(float(p)) for p in pixdim)
    text = descrip.split(b"\x00", 1)[0].decode("ascii", "replace")
    if not text.startswith("spacing="):
        return spacing
    try:
        exact = tuple(float(v) for v in text[len("spacing="):].split())
    except ValueError:
        return spacing
    if len(exact) == 3 and all(np.float32(e) == np.float32(p) for e, p in zip(exact, spacing)):
        return exact
    return spacing


def _write_nifti(vol: Volume3, path: Path) -> None:
    dt = np.dtype("<f4")
    hdr = bytearray(_NIFTI_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, _NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, NIFTI_CODES[dt.name], 8 * dt.itemsize)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_NIFTI_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 0.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    descrip = ("spacing=" + " ".join(repr(float(v)) for v in vol.spacing)).encode("ascii")
    if len(descrip) < 80:
        hdr[148:148 + len(descrip)] = descrip
    hdr[344:348] = b"n+1\x00"
    payload = np.ascontiguousarray(vol.voxels.transpose(2, 1, 0), dt).tobytes()
    data = bytes(hdr) + payload
    if _is_gz(path):
        data = gzip.compress(data, mtime=0)  # no timestamp, so reruns are byte-identical
    with open(path, "wb") as fh:
        fh.write(data)


def _infer_format(path: Path, format_hint: Optional[str]) -> str:
    if format_hint:
        if format_hint not in ("nifti", "raw"):
            raise VolumeFormatError(f"unknown format hint {format_hint!r}")
        return format_hint
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if path.suffix in (".raw", ".meta", ""):
        return "raw"
    raise VolumeFormatError(f"{path}: cannot infer volume format from extension")


def load_volume(path, format_hint: Optional[str] = None, intensity_unit: str = "arbitrary") -> Volume3:
    """Load a NIfTI-1 or raw+meta scalar volume.

    NIfTI ``scl_slope``/``scl_inter`` are applied when the slope is non-zero.
    A raw+meta sidecar may carry ``intensity_unit = HU``; otherwise
    ``intensity_unit`` is used.
    """
    path = Path(path)
    fmt = _infer_format(path, format_hint)
    if fmt == "nifti":
        vol = _read_nifti(path)
        return vol.with_voxels(vol.voxels, intensity_unit)
    arr, spacing, meta = read_raw_meta(path)
    if arr.ndim != 3:
        raise DimensionError(f"{path}: expected scalar volume, got {arr.shape[3]} channels")
    return Volume3(arr, spacing, meta.get("intensity_unit", intensity_unit))


def save_volume(vol: Volume3, path, dtype: str = "float32") -> None:
    """Save ``vol`` as NIfTI-1 (``.nii``/``.nii.gz``) or raw+meta (anything else)."""
    path = Path(path)
    if min(vol.dims) < 1:
        raise DimensionError("refusing to write an empty volume")
    fmt = _infer_format(path, None) if path.suffix else "raw"
    try:
        if fmt == "nifti":
            path.parent.mkdir(parents=True, exist_ok=True)
            _write_nifti(vol, path)
        else:
            write_raw_meta(path, vol.voxels, vol.spacing, dtype,
                           {"intensity_unit": vol.intensity_unit})
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc}") from exc


def save_field(fld: DenseField, path) -> None:
    write_raw_meta(path, fld.vectors, fld.spacing, "float32", {"units": "voxel"})


def load_field(path) -> DenseField:
    arr, spacing, meta = read_raw_meta(path)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise DimensionError(f"{path}: expected a 3-channel field")
    return DenseField(arr, spacing)


# ---------------------------------------------------------------------------
# landmarks


def load_landmarks(path, one_based: bool = False) -> LandmarkSet:
    """Parse a whitespace-separated ``i j k`` text file, one point per non-empty line.

    With ``one_based`` (DIR-Lab convention) 1 is subtracted from every coordinate.
    """
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 3:
            raise LandmarkParseError(
                f"{path}:{lineno}: expected 3 numeric values, got {len(tokens)}"
            )
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise LandmarkParseError(f"{path}:{lineno}: non-numeric token in {line!r}") from exc
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if one_based:
        pts = pts - 1.0
    return LandmarkSet(pts)


def save_landmarks(lms: LandmarkSet, path, one_based: bool = False) -> None:
    pts = lms.points + (1.0 if one_based else 0.0)
    with open(path, "w") as fh:
        for p in pts:
            fh.write(" ".join(_fmt_coord(c) for c in p) + "\n")


def _fmt_coord(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(float(c))
