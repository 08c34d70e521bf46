import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispembed.keypoints import (
    TENSOR_REG,
    KeypointSet,
    NoKeypointsError,
    foerstner_scores,
    select_keypoints,
    structure_tensor,
)
from dispembed.volume_io import Volume3


def _gauss_kernels(sigma, truncate=4.0):
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * x * x / sigma ** 2)
    g /= g.sum()
    return x, g, -x / sigma ** 2 * g


def _correlate3(img, kx, ky, kz):
    # brute-force separable-kernel convolution with edge replication
    r = len(kx) // 2
    pad = np.pad(img, r, mode="edge")
    kern = kx[::-1, None, None] * ky[None, ::-1, None] * kz[None, None, ::-1]
    out = np.empty_like(img)
    for idx in np.ndindex(*img.shape):
        i, j, k = idx
        out[idx] = np.sum(pad[i:i + 2 * r + 1, j:j + 2 * r + 1, k:k + 2 * r + 1] * kern)
    return out


def _brute_foerstner(img, sigma, grad_sigma):
    _, g, dg = _gauss_kernels(grad_sigma)
    grads = [_correlate3(img, dg, g, g), _correlate3(img, g, dg, g), _correlate3(img, g, g, dg)]
    _, s, _ = _gauss_kernels(sigma)
    n = img.shape
    S = np.empty(n + (3, 3))
    for a in range(3):
        for b in range(3):
            S[..., a, b] = _correlate3(grads[a] * grads[b], s, s, s)
    S += TENSOR_REG * np.eye(3)
    score = 1.0 / np.trace(np.linalg.inv(S), axis1=-2, axis2=-1)
    score[score <= TENSOR_REG] = 0.0
    return score


def _cube16():
    img = np.zeros((16, 16, 16))
    img[5:11, 5:11, 5:11] = 1.0
    return Volume3(img, intensity_unit="normalized")


def test_constant_volume_scores_zero():
    sc = foerstner_scores(Volume3(np.full((10, 10, 10), 0.5)))
    assert np.all(sc.voxels == 0)


def test_ramp_scores_near_zero():
    x = np.linspace(0, 1, 12)[:, None, None] * np.ones((12, 12, 12))
    sc = foerstner_scores(Volume3(x))
    assert sc.voxels.max() < 1e-8


def test_cube_matches_brute_force_tensor():
    vol = _cube16()
    fast = foerstner_scores(vol, 1.5, 0.8).voxels.astype(np.float64)
    ref = _brute_foerstner(vol.voxels.astype(np.float64), 1.5, 0.8)
    assert np.allclose(fast, ref, rtol=1e-4, atol=1e-9)


def test_cube_scores_peak_at_corners():
    sc = foerstner_scores(_cube16(), 1.5, 0.8)
    kps = select_keypoints(sc, None, 8, 3)
    corners = np.array([[a, b, c] for a in (5, 10) for b in (5, 10) for c in (5, 10)])
    d = np.abs(kps.coords[:, None, :] - corners[None]).max(axis=2).min(axis=1)
    assert len(kps) == 8 and np.all(d <= 2)


def test_structure_tensor_component_order():
    x = np.arange(8.0)[:, None, None] * np.ones((8, 8, 8))
    t = structure_tensor(Volume3(x), 1.0, 1.0)
    centre = t[4, 4, 4]
    assert centre[0] > 0.5 and np.allclose(centre[1:], 0, atol=1e-12)


def test_anisotropic_spacing_uses_mm():
    x = np.arange(40.0)[:, None, None] * np.ones((40, 8, 8))
    t = structure_tensor(Volume3(x, (2.0, 1.0, 1.0)), 2.0, 2.0)
    # intensity per mm halves with 2 mm voxels, so gxx drops fourfold
    t1 = structure_tensor(Volume3(x), 2.0, 2.0)
    assert np.isclose(t[20, 4, 4, 0], t1[20, 4, 4, 0] / 4.0, rtol=1e-3)


def test_single_positive_voxel_gives_one_keypoint():
    s = np.zeros((10, 10, 10))
    s[2, 7, 4] = 3.0
    kps = select_keypoints(Volume3(s), None, 1500, 3)
    assert len(kps) == 1 and tuple(kps.coords[0]) == (2, 7, 4)


def test_tie_break_lexicographic():
    s = np.zeros((6, 6, 6))
    s[3, 2, 2] = 1.0
    s[3, 2, 3] = 1.0
    kps = select_keypoints(Volume3(s), None, 10, 2)
    assert len(kps) == 1 and tuple(kps.coords[0]) == (3, 2, 2)


def _brute_greedy(scores, target, r):
    flat = [(-scores[idx], idx) for idx in np.ndindex(*scores.shape) if scores[idx] > 0]
    flat.sort()
    accepted = []
    acc = np.zeros((0, 3), dtype=np.int64)
    for _, idx in flat:
        if len(acc) and np.abs(acc - np.array(idx)).max(axis=1).min() <= r:
            continue
        accepted.append(idx)
        acc = np.array(accepted)
        if len(accepted) == target:
            break
    return acc


def test_greedy_matches_brute_force_64():
    rng = np.random.default_rng(11)
    s = rng.random((64, 64, 64))
    kps = select_keypoints(Volume3(s), None, 1500, 4)
    assert np.array_equal(kps.coords, _brute_greedy(s, 1500, 4))


def _check_invariants(kps: KeypointSet, r, dims, mask=None):
    c = kps.coords
    assert len(np.unique(c, axis=0)) == len(c)
    assert np.all(c >= 0) and np.all(c < np.asarray(dims))
    assert np.all(np.diff(kps.scores) <= 0)
    if len(c) > 1:
        cheb = np.abs(c[:, None] - c[None]).max(axis=2)
        np.fill_diagonal(cheb, 10 ** 6)
        assert cheb.min() > r
    if mask is not None:
        assert np.all(mask[tuple(c.T)] > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(1, 60), st.booleans())
def test_suppression_mask_and_prefix(seed, r, target, use_mask):
    rng = np.random.default_rng(seed)
    s = rng.random((14, 12, 10))
    s[rng.random(s.shape) < 0.3] = 0.0
    mask = (rng.random(s.shape) < 0.6).astype(float) if use_mask else None
    mvol = Volume3(mask) if use_mask else None
    try:
        small = select_keypoints(Volume3(s), mvol, target, r)
    except NoKeypointsError:
        return
    big = select_keypoints(Volume3(s), mvol, target + 7, r)
    _check_invariants(small, r, s.shape, mask)
    _check_invariants(big, r, s.shape, mask)
    assert np.array_equal(big.coords[:len(small)], small.coords)


def test_empty_candidates_error():
    with pytest.raises(NoKeypointsError):
        select_keypoints(Volume3(np.zeros((5, 5, 5))))
    s = Volume3(np.ones((5, 5, 5)))
    with pytest.raises(NoKeypointsError):
        select_keypoints(s, Volume3(np.zeros((5, 5, 5))))


def test_bad_parameters():
    s = Volume3(np.ones((5, 5, 5)))
    with pytest.raises(ValueError):
        select_keypoints(s, None, 0)
    with pytest.raises(ValueError):
        select_keypoints(s, None, 5, 0)
    with pytest.raises(ValueError):
        foerstner_scores(s, 0.0)
