import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dispembed.features import (
    EPS_VARIANCE,
    VolumeTooSmallError,
    compute_mind,
    neighborhood_pairs,
    preprocess_ct,
)
from dispembed.volume_io import Volume3, read_raw_meta


def _textured(shape=(12, 12, 12), seed=0):
    rng = np.random.default_rng(seed)
    return Volume3(rng.random(shape), (1.0, 1.0, 1.0), "normalized")


@pytest.mark.parametrize("hu,expected", [(-2000.0, 0.0), (500.0, 1.0), (-250.0, 0.5)])
def test_preprocess_ct_examples(hu, expected):
    vol = Volume3(np.full((2, 2, 2), hu), intensity_unit="HU")
    out = preprocess_ct(vol, -1000.0, 500.0)
    assert out.intensity_unit == "normalized"
    assert np.allclose(out.voxels, expected)


def test_preprocess_ct_rejects_bad_bounds():
    with pytest.raises(ValueError):
        preprocess_ct(Volume3(np.zeros((2, 2, 2))), 10.0, 10.0)


def test_neighborhoods():
    assert neighborhood_pairs("six_nn").shape == (6, 2, 3)
    pairs = neighborhood_pairs("ssc12")
    assert pairs.shape == (12, 2, 3)
    # each ssc12 channel compares two six-neighbours at squared distance 2
    assert np.all(((pairs[:, 0] - pairs[:, 1]) ** 2).sum(axis=1) == 2)
    with pytest.raises(ValueError):
        neighborhood_pairs("26nn")


def test_constant_volume_gives_identical_descriptors():
    vol = Volume3(np.full((10, 10, 10), 0.3), intensity_unit="normalized")
    d = compute_mind(vol, stride=1)
    assert np.all(d.values == d.values[0, 0, 0])


def test_affine_intensity_invariance():
    vol = _textured()
    scaled = vol.with_voxels(2.0 * vol.voxels.astype(np.float64) + 0.7)
    for nb in ("six_nn", "ssc12"):
        a = compute_mind(vol, 1, 1, nb).values
        b = compute_mind(scaled, 1, 1, nb).values
        assert np.max(np.abs(a - b)) < 1e-5


def _brute_mind_six_nn(img, r):
    # direct loops: patch SSD with edge replication, exp(-D/V), divide by max
    n = img.shape
    offs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]

    def at(p):
        return img[tuple(min(max(c, 0), m - 1) for c, m in zip(p, n))]

    out = np.zeros(n + (6,))
    for x in np.ndindex(*n):
        dist = []
        for o in offs:
            s = 0.0
            for d in np.ndindex(2 * r + 1, 2 * r + 1, 2 * r + 1):
                # patch voxels are clamped first, then shifted by the offset
                p = tuple(min(max(x[a] + d[a] - r, 0), n[a] - 1) for a in range(3))
                s += (at(p) - at(tuple(p[a] + o[a] for a in range(3)))) ** 2
            dist.append(s / (2 * r + 1) ** 3)
        dist = np.array(dist)
        v = max(dist.mean(), EPS_VARIANCE)
        ch = np.exp(-dist / v)
        out[x] = ch / ch.max()
    return out


def test_single_bright_voxel_matches_brute_force():
    img = np.zeros((7, 7, 7))
    img[3, 3, 3] = 1.0
    d = compute_mind(Volume3(img, intensity_unit="normalized"), 1, 1, "six_nn")
    assert np.max(np.abs(d.values - _brute_mind_six_nn(img, 1))) < 1e-6


def test_textured_volume_matches_brute_force():
    vol = _textured((6, 7, 5), seed=3)
    d = compute_mind(vol, 1, 1, "six_nn")
    assert np.max(np.abs(d.values - _brute_mind_six_nn(vol.voxels.astype(np.float64), 1))) < 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (7, 6, 8), elements=st.floats(0, 1)),
       st.sampled_from(["six_nn", "ssc12"]), st.integers(0, 1))
def test_range_and_unit_maximum(img, nb, r):
    d = compute_mind(Volume3(img, intensity_unit="normalized"), 1, r, nb).values
    assert np.all(d > 0) and np.all(d <= 1)
    assert np.all(d.max(axis=-1) == 1)


@pytest.mark.parametrize("shape", [(12, 12, 12), (9, 11, 10)])
def test_stride_consistency_exact(shape):
    vol = _textured(shape, seed=1)
    full = compute_mind(vol, 1).values
    two = compute_mind(vol, 2)
    m = two.grid_dims
    assert np.array_equal(two.values, full[0:2 * m[0]:2, 0:2 * m[1]:2, 0:2 * m[2]:2])


def test_grid_dims_floor_rule():
    vol = _textured((9, 10, 11))
    assert compute_mind(vol, 2).grid_dims == (4, 5, 5)
    assert compute_mind(vol, 2, origin_offset=1).grid_dims == (4, 4, 5)
    assert compute_mind(vol, 3, origin_offset=2).grid_dims == (2, 2, 3)


def test_lattice_index_rounds_to_nearest():
    d = compute_mind(_textured(), 2)
    assert np.array_equal(d.lattice_index([[0, 0, 0], [3, 4, 5], [1.2, 6.9, 2.0]]),
                          [[0, 0, 0], [2, 2, 3], [1, 3, 1]])


def test_deterministic():
    vol = _textured(seed=4)
    a = compute_mind(vol, 2)
    b = compute_mind(vol, 2)
    assert a.values.tobytes() == b.values.tobytes()


def test_gaussian_weighting_option_in_range():
    d = compute_mind(_textured(), 1, 2, "ssc12", weighting="gaussian").values
    assert np.all((d > 0) & (d <= 1))


def test_too_small_volume():
    with pytest.raises(VolumeTooSmallError):
        compute_mind(Volume3(np.zeros((3, 8, 8))), 1, 1)


def test_bad_arguments():
    vol = _textured()
    with pytest.raises(ValueError):
        compute_mind(vol, 0)
    with pytest.raises(ValueError):
        compute_mind(vol, 2, origin_offset=2)
    with pytest.raises(ValueError):
        compute_mind(vol, 1, -1)


def test_descriptor_field_serialisation(tmp_path):
    d = compute_mind(_textured(), 2)
    d.save(tmp_path / "desc")
    arr, _, meta = read_raw_meta(tmp_path / "desc")
    assert meta["channels"] == "12"
    assert np.array_equal(arr, d.values)
