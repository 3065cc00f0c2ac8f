import numpy as np
import pytest

from isoinr.errors import ThicknessError
from isoinr.phantom import PhantomSpec, generate
from isoinr.thickness import distance_transform, extract_skeleton, ridge_mask, thickness_map
from isoinr.volume import LabelVolume


def brute_force_edt(mask, spacing):
    """All-pairs distance from each foreground centre to the nearest background centre."""
    idx = np.argwhere(np.ones(mask.shape, bool)) * np.asarray(spacing)
    flat = mask.reshape(-1)
    fg, bg = idx[flat], idx[~flat]
    out = np.zeros(mask.size)
    best = np.full(len(fg), np.inf)
    for s in range(0, len(bg), 512):
        d2 = ((fg[:, None, :] - bg[None, s:s + 512, :]) ** 2).sum(axis=2)
        best = np.minimum(best, d2.min(axis=1))
    out[flat] = np.sqrt(best)
    return out.reshape(mask.shape)


def ball_mask(n, radius, centre=None):
    c = np.full(3, (n - 1) / 2) if centre is None else np.asarray(centre)
    idx = np.indices((n, n, n)).transpose(1, 2, 3, 0)
    return np.linalg.norm(idx - c, axis=-1) <= radius


def test_single_voxel_distance():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    assert distance_transform(m, (0.4, 0.4, 0.4))[1, 1, 1] == pytest.approx(0.4, abs=1e-12)


def test_slab_mid_plane_distance():
    m = np.zeros((4, 4, 14), bool)
    m[:, :, 2:12] = True
    d = distance_transform(m, (0.4, 0.4, 0.4))
    assert np.allclose(d[:, :, 6], 2.0) and np.allclose(d[:, :, 7], 2.0)
    assert np.all(d[~m] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_edt_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((16, 16, 16)) < rng.uniform(0.3, 0.9)
    spacing = tuple(rng.uniform(0.3, 2.0, 3))
    assert np.max(np.abs(distance_transform(mask, spacing) - brute_force_edt(mask, spacing))) <= 1e-9


def test_ball_skeleton_collapses_to_centre():
    m = ball_mask(21, 8.0)
    sk = extract_skeleton(m, spacing=(1.0, 1.0, 1.0))
    assert len(sk.points) > 0
    assert np.max(np.abs(sk.points - 10)) <= 1
    assert abs(sk.radius.max() - 8.0) <= 0.5


def test_slab_skeleton_on_mid_plane():
    m = np.zeros((12, 12, 14), bool)
    m[:, :, 2:12] = True
    sk = extract_skeleton(m, spacing=(0.4, 0.4, 0.4))
    mid = 6.5  # mid-plane between slices 6 and 7
    assert np.all(np.abs(sk.points[:, 2] - mid) <= 0.5)


def test_prune_zero_is_superset():
    rng = np.random.default_rng(7)
    m = ball_mask(15, 5.5) | (rng.random((15, 15, 15)) < 0.05)
    full = extract_skeleton(m, prune_ratio=0.0).mask
    for r in (0.1, 0.25, 0.6):
        assert np.all(full | ~extract_skeleton(m, prune_ratio=r).mask)


def test_skeleton_symmetry_ball_and_slab():
    sk = extract_skeleton(ball_mask(19, 7.0)).mask
    for axis in range(3):
        assert np.array_equal(sk, np.flip(sk, axis))
    assert np.array_equal(sk, sk.transpose(1, 0, 2)) and np.array_equal(sk, sk.transpose(0, 2, 1))
    slab = np.zeros((8, 8, 12), bool)
    slab[:, :, 1:11] = True
    sk = extract_skeleton(slab).mask
    assert np.array_equal(sk, np.flip(sk, 2))


def test_skeleton_errors():
    with pytest.raises(ThicknessError):
        extract_skeleton(np.zeros((3, 3, 3), bool))
    with pytest.raises(ThicknessError):
        extract_skeleton(np.ones((3, 3, 3), bool), prune_ratio=1.0)


def test_ridge_needs_a_kink():
    # a linear ramp has no interior ridge, a tent does
    d = np.tile(np.arange(7, dtype=float), (3, 3, 1))
    assert not ridge_mask(d, np.ones(d.shape, bool), (1, 1, 1))[:, :, 1:6].any()
    tent = np.tile(3 - np.abs(np.arange(7) - 3.0), (3, 3, 1))
    r = ridge_mask(tent, np.ones(tent.shape, bool), (1, 1, 1))
    assert r[:, :, 3].all() and not r[:, :, 1:3].any()


def _labels(arr, spacing=(0.4, 0.4, 0.4), names=None):
    ids = sorted(set(np.unique(arr).tolist()) | {0})
    table = tuple((i, (names or {}).get(i, f"l{i}")) for i in ids)
    return LabelVolume(arr, spacing, (0, 0, 0), np.eye(3), table)


def test_slab_phantom_thickness():
    ph = generate(PhantomSpec(preset="slab", slab_thickness=4.0))
    res = thickness_map(ph.truth_at(0.4))
    assert abs(res.median(1) - 4.0) <= 0.4


def test_shell_phantom_thickness():
    ph = generate(PhantomSpec(preset="shell", wall=1.2))
    res = thickness_map(ph.truth_at(0.4), target_labels=[1])
    assert abs(res.median(1) - 1.2) <= 0.4


def test_spacing_scaling_covariance():
    arr = np.zeros((20, 20, 20), np.int64)
    arr[ball_mask(20, 6.5, (9.5, 9.5, 9.5))] = 1
    arr[2:18, 2:18, 1:4] = 2
    base = thickness_map(_labels(arr, (0.4, 0.5, 0.7)), with_map=True)
    for s in (2.0, 0.5, 1.7):
        scaled = thickness_map(_labels(arr, (0.4 * s, 0.5 * s, 0.7 * s)), with_map=True)
        for k in (1, 2):
            if s in (2.0, 0.5):  # powers of two scale floats exactly
                assert scaled.median(k) == s * base.median(k)
            else:
                assert scaled.median(k) == pytest.approx(s * base.median(k), rel=1e-12)
        ratio = np.asarray(scaled.thickness_map.data, np.float64) - s * np.asarray(base.thickness_map.data, np.float64)
        assert np.max(np.abs(ratio)) <= 1e-5 * s


def test_label_isolation():
    arr = np.zeros((16, 16, 16), np.int64)
    arr[2:6, 2:14, 2:14] = 1
    alone = thickness_map(_labels(arr)).median(1)
    arr2 = arr.copy()
    arr2[8:15, 1:15, 1:15] = 2
    both = thickness_map(_labels(arr2))
    assert both.median(1) == alone
    # label 2 even touching label 1 does not change label 1
    arr3 = arr.copy()
    arr3[6:12, 2:14, 2:14] = 2
    assert thickness_map(_labels(arr3)).median(1) == alone


def test_jobs_give_identical_results():
    ph = generate(PhantomSpec(preset="shell", t2_dims=(48, 48, 8)))
    t = ph.truth_at(0.4)
    a, b = thickness_map(t, jobs=1, with_map=True), thickness_map(t, jobs=3, with_map=True)
    assert {k: v.median_mm for k, v in a.labels.items()} == {k: v.median_mm for k, v in b.labels.items()}
    assert np.array_equal(a.thickness_map.data, b.thickness_map.data)


def test_bounds_and_missing_labels():
    arr = np.zeros((10, 10, 10), np.int64)
    arr[2:8, 2:8, 3:6] = 1
    lv = LabelVolume(arr, (0.4, 0.4, 0.4), (0, 0, 0), np.eye(3), ((0, "bg"), (1, "a"), (2, "empty")))
    res = thickness_map(lv, with_map=True)
    assert res.labels[2].median_mm is None and res.labels[2].n_voxels == 0
    tm = np.asarray(res.thickness_map.data)
    assert np.all(tm >= 0)
    diag = np.linalg.norm(np.array([6, 6, 3]) * 0.4)
    assert tm.max() <= diag
    with pytest.raises(ThicknessError):
        thickness_map(lv, target_labels=[5])
