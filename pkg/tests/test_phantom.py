import numpy as np
import pytest

from isoinr.errors import GeometryError
from isoinr.phantom import PhantomSpec, _voxel_label_samples, generate, scene_labels
from isoinr.resample import iso_grid


def test_constant_preset():
    ph = generate(PhantomSpec(preset="constant", t2_dims=(8, 8, 3)))
    assert np.unique(ph.seg_aniso.data).tolist() == [1]
    for img, mean in ((ph.t1, 0.6), (ph.t2, 0.5)):
        assert abs(float(np.mean(img.data)) - mean) < 0.01
        assert np.std(img.data) < 0.02


def test_slab_analytic_thickness():
    ph = generate(PhantomSpec(preset="slab", slab_thickness=4.0))
    assert ph.analytic_thickness == {1: 4.0}
    assert generate(PhantomSpec(preset="ball", ball_radius=5.0)).analytic_thickness == {1: 10.0}
    assert generate(PhantomSpec(preset="shell", wall=1.5)).analytic_thickness == {1: 1.5}


def test_same_seed_same_output():
    a, b = generate(PhantomSpec(seed=3)), generate(PhantomSpec(seed=3))
    c = generate(PhantomSpec(seed=4))
    assert np.array_equal(a.t1.data, b.t1.data) and np.array_equal(a.t2.data, b.t2.data)
    assert np.array_equal(a.seg_aniso.data, b.seg_aniso.data)
    assert not np.array_equal(a.t2.data, c.t2.data)


def test_default_grids():
    ph = generate(PhantomSpec())
    assert ph.t2.spacing == (0.4, 0.4, 2.6) and ph.t1.spacing == (0.5, 0.5, 1.0)
    assert ph.seg_aniso.same_grid(ph.t2)
    assert ph.label_table == ((0, "background"), (1, "shell"), (2, "core"))


def test_noise_free_images_are_piecewise_constant():
    spec = PhantomSpec(noise_sigma=0.0)
    ph = generate(spec)
    samples = _voxel_label_samples(spec, ph.t2)
    pure = np.all(samples == samples[:, :1], axis=1)
    vals = np.asarray(ph.t2.data).ravel()
    lut = np.array([spec.t2_means[k] for k in sorted(spec.t2_means)], dtype=np.float32)
    assert pure.mean() > 0.5
    assert np.array_equal(vals[pure], lut[samples[pure, 0]])
    # partial-volume voxels stay between the extreme label intensities
    assert vals.min() >= lut.min() - 1e-6 and vals.max() <= lut.max() + 1e-6


def test_truth_converges_with_spacing():
    ph = generate(PhantomSpec())
    fracs = []
    for s in (0.8, 0.4, 0.2):
        g = iso_grid(ph.t2, s / 2)
        fine = ph.truth_on(g).data
        # coarse labels broadcast onto the fine grid by nearest centre
        coarse = ph.truth_on(iso_grid(ph.t2, s)).data
        rep = np.repeat(np.repeat(np.repeat(coarse, 2, 0), 2, 1), 2, 2)[tuple(slice(0, d) for d in fine.shape)]
        fracs.append(float(np.mean(rep != fine)))
    assert fracs[0] > fracs[1] > fracs[2]


def test_geometry_must_fit():
    with pytest.raises(GeometryError):
        generate(PhantomSpec(preset="ball", ball_radius=20.0))
    with pytest.raises(GeometryError):
        generate(PhantomSpec(preset="shell", wall=9.0))


def test_intensity_separation_rule():
    with pytest.raises(ValueError, match="5 noise sigma"):
        PhantomSpec(noise_sigma=0.05, t2_means={0: 1.0, 1: 0.9, 2: 0.1})
    with pytest.raises(ValueError):
        PhantomSpec(preset="cube")


def test_shell_scene_labels():
    spec = PhantomSpec()
    c = np.array([0.0, -spec.outer_radius / 2, 0.0])
    pts = np.array([c + [0, 1.0, 0], c + [0, spec.outer_radius - 0.5, 0], c + [0, -1.0, 0], c + [0, 20, 0]])
    assert scene_labels(spec, pts).tolist() == [2, 1, 0, 0]
