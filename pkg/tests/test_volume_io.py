import gzip
import struct

import numpy as np
import pytest

from dispembed.volume_io import (
    DenseField,
    DimensionError,
    LandmarkParseError,
    LandmarkSet,
    TruncatedDataError,
    Volume3,
    VolumeFormatError,
    load_field,
    load_landmarks,
    load_volume,
    read_raw_meta,
    save_field,
    save_landmarks,
    save_volume,
    write_raw_meta,
)


def _write_nifti(path, data, datatype, spacing=(1.0, 1.0, 1.0), slope=0.0, inter=0.0, ndim=3,
                 dtype="<i2", truncate=0, gz=False):
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    dims = data.shape
    struct.pack_into("<8h", hdr, 40, ndim, *dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\x00"
    payload = np.ascontiguousarray(data.transpose(2, 1, 0), dtype).tobytes()
    if truncate:
        payload = payload[:-truncate]
    opener = gzip.open if gz else open
    with opener(path, "wb") as fh:
        fh.write(bytes(hdr) + payload)


def test_raw_meta_zero_volume(tmp_path):
    (tmp_path / "z.meta").write_text("dims = 4 4 4\nspacing = 1 1 1\ndtype = float32\norder = xyz\n")
    (tmp_path / "z.raw").write_bytes(np.zeros(64, "<f4").tobytes())
    vol = load_volume(tmp_path / "z.raw")
    assert vol.dims == (4, 4, 4)
    assert vol.spacing == (1.0, 1.0, 1.0)
    assert np.count_nonzero(vol.voxels) == 0 and vol.voxels.size == 64


def test_nifti_scaling_applied(tmp_path):
    data = np.full((2, 2, 2), 5, dtype=np.int16)
    _write_nifti(tmp_path / "s.nii", data, 4, slope=2.0, inter=10.0)
    vol = load_volume(tmp_path / "s.nii")
    assert np.all(vol.voxels == 20.0)


def test_nifti_zero_slope_means_unscaled(tmp_path):
    data = np.arange(8, dtype=np.uint16).reshape(2, 2, 2)
    _write_nifti(tmp_path / "u.nii", data, 512, dtype="<u2", slope=0.0, inter=99.0)
    assert np.array_equal(load_volume(tmp_path / "u.nii").voxels, data.astype(np.float32))


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz", ".raw"])
def test_round_trip_random_float32(tmp_path, suffix):
    rng = np.random.default_rng(0)
    vol = Volume3(rng.standard_normal((8, 8, 8)).astype(np.float32), (0.7, 0.8, 2.5))
    save_volume(vol, tmp_path / f"v{suffix}")
    back = load_volume(tmp_path / f"v{suffix}")
    assert back.dims == vol.dims and back.spacing == vol.spacing
    assert back.voxels.tobytes() == vol.voxels.tobytes()


def test_nifti_header_fields_preserved(tmp_path):
    # DIR-Lab-like geometry: anisotropic in-plane/slice spacing
    vol = Volume3(np.zeros((256, 256, 4), np.float32), (0.97, 0.97, 2.5))
    save_volume(vol, tmp_path / "d.nii")
    raw = (tmp_path / "d.nii").read_bytes()
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 256, 256, 4)
    pix = struct.unpack_from("<8f", raw, 76)[1:4]
    assert np.allclose(pix, (0.97, 0.97, 2.5))
    back = load_volume(tmp_path / "d.nii")
    assert back.dims == (256, 256, 4)
    assert back.spacing == (0.97, 0.97, 2.5)


def test_foreign_nifti_spacing_is_float32_pixdim(tmp_path):
    _write_nifti(tmp_path / "f.nii", np.zeros((2, 2, 2), np.int16), 4, spacing=(0.97, 0.97, 2.5))
    back = load_volume(tmp_path / "f.nii")
    assert back.spacing == tuple(float(np.float32(s)) for s in (0.97, 0.97, 2.5))


def test_gzip_nifti_accepted(tmp_path):
    data = np.arange(27, dtype=np.int16).reshape(3, 3, 3)
    _write_nifti(tmp_path / "g.nii.gz", data, 4, gz=True)
    assert np.array_equal(load_volume(tmp_path / "g.nii.gz").voxels, data)


def test_unsupported_datatype_named(tmp_path):
    _write_nifti(tmp_path / "b.nii", np.zeros((2, 2, 2), np.uint8), 2, dtype="u1")
    with pytest.raises(VolumeFormatError, match="datatype code 2"):
        load_volume(tmp_path / "b.nii")


def test_wrong_dim_count(tmp_path):
    _write_nifti(tmp_path / "b.nii", np.zeros((2, 2, 2), np.int16), 4, ndim=4)
    with pytest.raises(DimensionError):
        load_volume(tmp_path / "b.nii")


def test_truncated_payload_reports_counts(tmp_path):
    _write_nifti(tmp_path / "t.nii", np.zeros((4, 4, 4), np.int16), 4, truncate=10)
    with pytest.raises(TruncatedDataError) as info:
        load_volume(tmp_path / "t.nii")
    assert info.value.expected == 128 and info.value.actual == 118


def test_truncated_raw(tmp_path):
    write_raw_meta(tmp_path / "r", np.zeros((4, 4, 4), np.float32))
    (tmp_path / "r.raw").write_bytes(b"\0" * 100)
    with pytest.raises(TruncatedDataError, match="expected 256"):
        load_volume(tmp_path / "r.raw")


def test_zero_dim_volume_rejected():
    with pytest.raises(DimensionError):
        Volume3(np.zeros((0, 4, 4)))


def test_invalid_spacing_and_nonfinite():
    with pytest.raises(ValueError):
        Volume3(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Volume3(np.full((2, 2, 2), np.nan))


def test_volume_is_immutable():
    vol = Volume3(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.voxels[0, 0, 0] = 1.0


def test_coordinate_order_x_fastest(tmp_path):
    arr = np.zeros((2, 2, 2), np.float32)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                arr[i, j, k] = i + 2 * (j + 2 * k)
    vol = Volume3(arr)
    assert np.array_equal(vol.flat_voxels(), np.arange(8))
    save_volume(vol, tmp_path / "o.raw")
    assert np.array_equal(np.frombuffer((tmp_path / "o.raw").read_bytes(), "<f4"), np.arange(8))
    save_volume(vol, tmp_path / "o.nii")
    assert np.array_equal(np.frombuffer((tmp_path / "o.nii").read_bytes()[352:], "<f4"), np.arange(8))


def test_int16_raw_meta(tmp_path):
    data = np.arange(-4, 4, dtype=np.int16).reshape(2, 2, 2)
    write_raw_meta(tmp_path / "i", data, (1, 2, 3), "int16")
    vol = load_volume(tmp_path / "i.meta")
    assert np.array_equal(vol.voxels, data) and vol.spacing == (1.0, 2.0, 3.0)


def test_dense_field_three_channels_interleaved(tmp_path):
    rng = np.random.default_rng(1)
    fld = DenseField(rng.standard_normal((3, 4, 5, 3)), (1.0, 1.0, 2.0))
    save_field(fld, tmp_path / "f.raw")
    meta = (tmp_path / "f.meta").read_text()
    assert "channels = 3" in meta
    flat = np.frombuffer((tmp_path / "f.raw").read_bytes(), "<f4")
    # voxel (1, 0, 0) component 2 lives at 3 * 1 + 2
    assert flat[5] == fld.vectors[1, 0, 0, 2]
    assert load_field(tmp_path / "f.raw") == fld


def test_landmarks_parse(tmp_path):
    (tmp_path / "l.txt").write_text("10 20 30\n1 2 3\n")
    lms = load_landmarks(tmp_path / "l.txt")
    assert lms.count == 2
    assert np.array_equal(lms.points, [[10, 20, 30], [1, 2, 3]])


def test_landmarks_empty(tmp_path):
    (tmp_path / "e.txt").write_text("")
    assert load_landmarks(tmp_path / "e.txt").count == 0


def test_landmarks_fractional_and_blank_lines(tmp_path):
    (tmp_path / "l.txt").write_text("1.5 2 3\n\n  \n4 5 6.25\n")
    assert np.array_equal(load_landmarks(tmp_path / "l.txt").points, [[1.5, 2, 3], [4, 5, 6.25]])


def test_landmarks_one_based(tmp_path):
    (tmp_path / "l.txt").write_text("1 1 1\n")
    assert np.array_equal(load_landmarks(tmp_path / "l.txt", one_based=True).points, [[0, 0, 0]])


def test_landmarks_300_lines(tmp_path):
    rng = np.random.default_rng(3)
    pts = rng.integers(1, 256, size=(300, 3))
    (tmp_path / "c.txt").write_text("\n".join("\t".join(map(str, p)) for p in pts) + "\n")
    assert load_landmarks(tmp_path / "c.txt").count == 300


@pytest.mark.parametrize("text,match", [("1 2 3\n4 5\n", ":2:"), ("1 2 x\n", "non-numeric")])
def test_landmark_errors(tmp_path, text, match):
    (tmp_path / "bad.txt").write_text(text)
    with pytest.raises(LandmarkParseError, match=match):
        load_landmarks(tmp_path / "bad.txt")


def test_landmarks_round_trip(tmp_path):
    lms = LandmarkSet([[1, 2, 3], [4.5, 5, 6]])
    save_landmarks(lms, tmp_path / "x.txt")
    assert np.array_equal(load_landmarks(tmp_path / "x.txt").points, lms.points)


def test_read_raw_meta_float64(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 2, 1))
    write_raw_meta(tmp_path / "d", a, dtype="float64")
    back, _, _ = read_raw_meta(tmp_path / "d")
    assert np.array_equal(back, a)
