"""Synthetic anisotropic T1/T2 patch pairs with analytic labels.

Scenes live in continuous physical space centred on the origin. Images are
partial-volume averages over a 4x4x4 supersampling of each voxel plus
Gaussian noise; the anisotropic segmentation is the per-voxel majority label.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GeometryError
from .resample import iso_grid
from .volume import LabelVolume, Volume, edge_bbox, grid_points, make_grid

PRESETS = ("shell", "slab", "ball", "constant")

_LABELS = {
    "shell": {0: "background", 1: "shell", 2: "core"},
    "slab": {0: "background", 1: "slab"},
    "ball": {0: "background", 1: "ball"},
    "constant": {0: "background", 1: "tissue"},
}
_T1_MEANS = {0: 0.2, 1: 0.6, 2: 1.0}
_T2_MEANS = {0: 1.0, 1: 0.5, 2: 0.15}


@dataclass
class PhantomSpec:
    preset: str = "shell"
    t2_dims: tuple = (48, 48, 8)
    t2_spacing: tuple = (0.4, 0.4, 2.6)
    t1_spacing: tuple = (0.5, 0.5, 1.0)
    # extra T1 coverage beyond the T2 box on every side, in T1 voxels
    t1_margin: int = 2
    outer_radius: float = 8.0
    wall: float = 1.2
    slab_thickness: float = 4.0
    ball_radius: float = 6.0
    t1_means: dict = field(default_factory=lambda: dict(_T1_MEANS))
    t2_means: dict = field(default_factory=lambda: dict(_T2_MEANS))
    noise_sigma: float = 0.01
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        self.t1_means = {int(k): float(v) for k, v in self.t1_means.items()}
        self.t2_means = {int(k): float(v) for k, v in self.t2_means.items()}
        labels = list(self.label_table)
        for means, name in ((self.t1_means, "t1"), (self.t2_means, "t2")):
            missing = set(labels) - set(means)
            if missing:
                raise ValueError(f"{name}_means lacks labels {sorted(missing)}")
            vals = sorted(means[k] for k in labels)
            gaps = np.diff(vals)
            if self.noise_sigma > 0 and gaps.size and gaps.min() < 5 * self.noise_sigma:
                raise ValueError(f"{name} label intensities must differ by >= 5 noise sigma")

    @property
    def label_table(self) -> dict:
        return dict(_LABELS[self.preset])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t1_means"] = {str(k): v for k, v in self.t1_means.items()}
        d["t2_means"] = {str(k): v for k, v in self.t2_means.items()}
        return d


def _shell_center(spec: PhantomSpec) -> np.ndarray:
    return np.array([0.0, -spec.outer_radius / 2.0, 0.0])


def scene_labels(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Analytic label at each physical point (shape ``(n, 3)``)."""
    pts = np.asarray(pts, dtype=np.float64)
    lab = np.zeros(len(pts), dtype=np.int64)
    if spec.preset == "shell":
        c = _shell_center(spec)
        r = np.linalg.norm(pts - c, axis=1)
        upper = pts[:, 1] >= c[1]
        lab[upper & (r <= spec.outer_radius)] = 1
        lab[upper & (r < spec.outer_radius - spec.wall)] = 2
    elif spec.preset == "slab":
        lab[np.abs(pts[:, 2]) <= spec.slab_thickness / 2.0] = 1
    elif spec.preset == "ball":
        lab[np.linalg.norm(pts, axis=1) <= spec.ball_radius] = 1
    else:
        lab[:] = 1
    return lab


def _scene_extent(spec: PhantomSpec):
    """Lower/upper corners of the foreground's bounding box (None if unbounded)."""
    if spec.preset == "shell":
        c, r = _shell_center(spec), spec.outer_radius
        return c + np.array([-r, 0.0, -r]), c + r
    if spec.preset == "ball":
        return np.full(3, -spec.ball_radius), np.full(3, spec.ball_radius)
    if spec.preset == "slab":
        h = spec.slab_thickness / 2.0
        return np.array([-np.inf, -np.inf, -h]), np.array([np.inf, np.inf, h])
    return None


def t2_grid(spec: PhantomSpec) -> Volume:
    dims = np.asarray(spec.t2_dims)
    spacing = np.asarray(spec.t2_spacing, dtype=np.float64)
    origin = -(dims - 1) / 2.0 * spacing
    return make_grid(dims, spacing, origin)


def t1_grid(spec: PhantomSpec) -> Volume:
    """T1 lattice anchored on the T2 box's lower corner, padded by ``t1_margin`` voxels."""
    ref = t2_grid(spec)
    lo, hi = edge_bbox(ref)
    spacing = np.asarray(spec.t1_spacing, dtype=np.float64)
    dims = np.ceil((hi - lo) / spacing - 1e-9).astype(np.int64) + 2 * spec.t1_margin
    origin = lo + spacing * (0.5 - spec.t1_margin)
    return make_grid(dims, spacing, origin)


def _supersample_offsets(k: int) -> np.ndarray:
    f = (np.arange(k) + 0.5) / k - 0.5
    return np.stack(np.meshgrid(f, f, f, indexing="ij"), axis=-1).reshape(-1, 3)


def _voxel_label_samples(spec: PhantomSpec, grid: Volume, chunk: int = 4096) -> np.ndarray:
    """Labels at ``supersample^3`` points inside every voxel; shape ``(n_vox, k^3)``."""
    offs = _supersample_offsets(spec.supersample) * np.asarray(grid.spacing)
    offs = offs @ np.asarray(grid.direction).T
    centres = grid_points(grid)
    out = np.empty((len(centres), len(offs)), dtype=np.int64)
    for s in range(0, len(centres), chunk):
        c = centres[s:s + chunk]
        out[s:s + chunk] = scene_labels(spec, (c[:, None, :] + offs[None]).reshape(-1, 3)).reshape(len(c), -1)
    return out


def _image(spec: PhantomSpec, grid: Volume, samples: np.ndarray, means: dict, rng) -> Volume:
    lut = np.zeros(max(means) + 1)
    for k, v in means.items():
        lut[k] = v
    vals = lut[samples].mean(axis=1)
    if spec.noise_sigma > 0:
        vals = vals + rng.normal(0.0, spec.noise_sigma, size=vals.shape)
    return Volume(vals.reshape(grid.dims).astype(np.float32), grid.spacing, grid.origin, grid.direction)


def _majority(samples: np.ndarray, n_labels: int) -> np.ndarray:
    counts = np.stack([(samples == k).sum(axis=1) for k in range(n_labels)], axis=1)
    return np.argmax(counts, axis=1)


@dataclass
class Phantom:
    spec: PhantomSpec
    t1: Volume
    t2: Volume
    seg_aniso: LabelVolume
    analytic_thickness: dict

    @property
    def label_table(self) -> tuple:
        return self.seg_aniso.label_table

    def truth_at(self, spacing: float) -> LabelVolume:
        """Analytic labels at voxel centres of an isotropic grid over the T2 box."""
        g = iso_grid(self.t2, spacing)
        lab = scene_labels(self.spec, grid_points(g)).reshape(g.dims)
        return LabelVolume(lab, g.spacing, g.origin, g.direction, self.label_table)

    def truth_on(self, grid: Volume) -> LabelVolume:
        lab = scene_labels(self.spec, grid_points(grid)).reshape(grid.dims)
        return LabelVolume(lab, grid.spacing, grid.origin, grid.direction, self.label_table)


def analytic_thickness(spec: PhantomSpec) -> dict:
    if spec.preset == "shell":
        return {1: spec.wall}
    if spec.preset == "slab":
        return {1: spec.slab_thickness}
    if spec.preset == "ball":
        return {1: 2.0 * spec.ball_radius}
    return {}


def generate(spec: PhantomSpec | None = None) -> Phantom:
    spec = spec or PhantomSpec()
    g2, g1 = t2_grid(spec), t1_grid(spec)
    ext = _scene_extent(spec)
    if ext is not None:
        lo, hi = edge_bbox(g2)
        finite = np.isfinite(ext[0]) & np.isfinite(ext[1])
        if np.any((ext[0] < lo - 1e-9) & finite) or np.any((ext[1] > hi + 1e-9) & finite):
            raise GeometryError(f"{spec.preset} geometry exceeds the patch box {lo.tolist()}..{hi.tolist()}")
    if spec.preset == "shell" and not 0 < spec.wall < spec.outer_radius:
        raise GeometryError("shell wall must be positive and thinner than the outer radius")

    rng1, rng2 = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    s2 = _voxel_label_samples(spec, g2)
    s1 = _voxel_label_samples(spec, g1)
    table = spec.label_table
    t1 = _image(spec, g1, s1, spec.t1_means, rng1)
    t2 = _image(spec, g2, s2, spec.t2_means, rng2)
    seg = LabelVolume(_majority(s2, max(table) + 1).reshape(g2.dims), g2.spacing, g2.origin, g2.direction, tuple(table.items()))
    return Phantom(spec, t1, t2, seg, analytic_thickness(spec))
