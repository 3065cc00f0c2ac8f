import numpy as np
import pytest

from isoinr.errors import GeometryError
from isoinr.model import init_model
from isoinr.resample import (
    IsoGridSpec,
    assemble_atlas,
    downsample_labels,
    iso_grid,
    sample_inr,
    upsample_nearest,
)
from isoinr.train import geometry_dict
from isoinr.volume import LabelVolume, Volume, edge_bbox, grid_points, make_grid, voxel_to_physical


def t2_like(dims=(12, 10, 4)):
    return make_grid(dims, (0.4, 0.4, 2.6), origin=(1.0, -2.0, 0.5))


def model_for(ref, seed=0, zero=False):
    m = init_model({0: "bg", 1: "a", 2: "b"}, n_fourier=8, width=16, seed=seed,
                   intensity_norm={"t1": (0.0, 2.0), "t2": (-1.0, 1.0)},
                   frame={"t2": geometry_dict(ref), "t1": geometry_dict(ref)})
    if zero:
        for p in m.params.values():
            p[...] = 0
    return m


def test_iso_grid_ceil_rule_and_coverage():
    ref = t2_like((48, 48, 8))
    g = iso_grid(ref, 0.4)
    assert g.dims == (48, 48, 52)  # 8 slices x 2.6 / 0.4
    g = iso_grid(ref, 0.7)
    assert g.dims == tuple(int(np.ceil(d * s / 0.7)) for d, s in zip(ref.dims, ref.spacing))
    lo, hi = edge_bbox(ref)
    pts = grid_points(g)
    assert np.all(pts >= lo - 1e-9) and np.all(pts <= hi + 0.35 + 1e-9)
    assert np.allclose(edge_bbox(g)[0], lo)


def test_iso_grid_spec_validation():
    with pytest.raises(ValueError):
        IsoGridSpec(0.0)
    with pytest.raises(ValueError):
        IsoGridSpec(0.4).grid()


def test_zero_model_gives_lowest_label():
    ref = t2_like()
    seg = sample_inr(model_for(ref, zero=True), IsoGridSpec(0.4))["seg"]
    assert np.all(seg.data == 0)


def test_sample_inr_deterministic_and_denormalized():
    ref = t2_like()
    m = model_for(ref, zero=True)
    m.params["t1_out.b"][...] = 0.25
    out = sample_inr(m, IsoGridSpec(0.4), outputs=("seg", "t1", "t2"))
    assert np.allclose(out["t1"].data, 0.5) and np.allclose(out["t2"].data, -1.0)
    m2 = model_for(ref, seed=4)
    a = sample_inr(m2, IsoGridSpec(0.4), outputs=("seg", "t2"))
    b = sample_inr(m2, IsoGridSpec(0.4), outputs=("seg", "t2"))
    c = sample_inr(m2, IsoGridSpec(0.4), outputs=("seg", "t2"), chunk=37)
    assert np.array_equal(a["seg"].data, b["seg"].data) and np.array_equal(a["t2"].data, b["t2"].data)
    # chunking only changes BLAS blocking, so values agree to rounding
    assert np.allclose(a["t2"].data, c["t2"].data, rtol=1e-5, atol=1e-6)


def test_sample_outside_training_box():
    ref = t2_like()
    far = make_grid((4, 4, 4), (0.4, 0.4, 0.4), origin=(500.0, 0.0, 0.0))
    with pytest.raises(GeometryError):
        sample_inr(model_for(ref), far)


def test_assemble_atlas_uses_linear_images(rng):
    ref = Volume(rng.normal(size=(12, 10, 4)).astype(np.float32), (0.4, 0.4, 2.6), (1.0, -2.0, 0.5))
    t1 = Volume(rng.normal(size=(10, 8, 11)).astype(np.float32), (0.5, 0.5, 1.0), (1.05, -1.95, -0.3))
    m = model_for(ref)
    seg, t1i, t2i = assemble_atlas(m, t1, ref, IsoGridSpec(0.4))
    assert seg.same_grid(t1i) and seg.same_grid(t2i)
    # x and y centres coincide; along z the value is a linear blend of two slices
    g = iso_grid(ref, 0.4)
    for i in range(g.dims[2]):
        z = voxel_to_physical(g, (3, 4, i))[2]
        k = (z - ref.origin[2]) / 2.6
        if 0 <= k <= ref.dims[2] - 1:
            k0 = min(int(np.floor(k)), ref.dims[2] - 2)
            w = k - k0
            want = (1 - w) * ref.data[3, 4, k0] + w * ref.data[3, 4, k0 + 1]
            assert t2i.data[3, 4, i] == pytest.approx(want, abs=1e-5)
    other = Volume(np.zeros((5, 5, 5), np.float32))
    with pytest.raises(GeometryError):
        assemble_atlas(m, t1, other, IsoGridSpec(0.4))


def _lab(arr, spacing, origin=(0, 0, 0), table=((0, "bg"), (1, "a"), (2, "b"), (3, "c"))):
    return LabelVolume(np.asarray(arr), spacing, origin, np.eye(3), table)


def test_downsample_to_self_is_identity(small_labels):
    out = downsample_labels(small_labels, small_labels)
    assert np.array_equal(out.data, small_labels.data) and out.label_table == small_labels.label_table


def test_downsample_block_majority(rng):
    coarse = rng.integers(0, 4, (4, 3, 2))
    fine = np.repeat(np.repeat(np.repeat(coarse, 3, 0), 3, 1), 3, 2)
    # perturb one fine voxel per cell: majority must survive
    fine[::3, ::3, ::3] = (fine[::3, ::3, ::3] + 1) % 4
    fv = _lab(fine, (1, 1, 1), origin=(-1, -1, -1))
    ref = _lab(coarse, (3, 3, 3))
    assert np.array_equal(downsample_labels(fv, ref).data, coarse)


def test_downsample_tie_goes_to_lowest_id():
    fine = np.zeros((2, 1, 1), int)
    fine[0], fine[1] = 3, 1
    ref = _lab(np.zeros((1, 1, 1), int), (2, 1, 1))
    out = downsample_labels(_lab(fine, (1, 1, 1), origin=(-0.5, 0, 0)), ref)
    assert out.data.item() == 1


def test_downsample_never_invents_labels_and_fills_empty_cells(rng):
    fine = _lab(rng.integers(1, 3, (6, 6, 6)), (0.5, 0.5, 0.5))
    ref = make_grid((8, 8, 8), (0.4, 0.4, 0.4), origin=(0.1, 0.1, 0.1))
    out = downsample_labels(fine, ref)
    assert set(np.unique(out.data)) <= {1, 2}
    with pytest.raises(GeometryError):
        downsample_labels(fine, make_grid((2, 2, 2), (1, 1, 1), origin=(100, 0, 0)))


def test_upsample_nearest_replicates_slices():
    ref = t2_like((4, 4, 3))
    data = np.zeros((4, 4, 3), int)
    data[:, :, 1] = 1
    seg = LabelVolume(data, ref.spacing, ref.origin, ref.direction)
    up = upsample_nearest(seg, iso_grid(ref, 0.4))
    assert up.dims == (4, 4, 20)
    zs = np.nonzero(up.data[0, 0])[0]
    assert zs.min() >= 6 and zs.max() <= 13 and len(zs) in (6, 7)
