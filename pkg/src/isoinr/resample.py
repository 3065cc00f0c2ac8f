"""Isotropic sampling of fitted INRs and label-safe grid changes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .model import InrModel, forward
from .train import geometry_volume, physical_to_normalized
from .volume import (
    LabelVolume,
    Volume,
    argmax_labels,
    edge_bbox,
    grid_points,
    interpolate_index,
    make_grid,
    physical_to_voxel,
    resample_to_grid,
)


@dataclass(frozen=True)
class IsoGridSpec:
    """Uniform grid with ``spacing`` mm voxels covering a reference's outer box.

    ``reference`` defaults to the model's T2 patch when sampling an INR.
    """

    spacing: float = 0.4
    reference: Volume | None = None

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")

    def grid(self, default_reference: Volume | None = None) -> Volume:
        ref = self.reference if self.reference is not None else default_reference
        if ref is None:
            raise ValueError("no reference volume to define the grid box")
        return iso_grid(ref, self.spacing)


def iso_grid(reference: Volume, spacing: float) -> Volume:
    """Isotropic grid over ``reference``'s outer box; ``ceil(extent / spacing)`` voxels per axis.

    The first voxel's outer face sits on the box's lower corner.
    """
    extent = np.asarray(reference.dims) * np.asarray(reference.spacing)
    ratio = extent / spacing
    # relative slack absorbs float32 geometry read back from files
    dims = np.maximum(np.ceil(ratio - 1e-6 * np.maximum(ratio, 1.0)).astype(np.int64), 1)
    lo, _ = edge_bbox(reference)
    origin = lo + reference.direction @ np.full(3, spacing / 2.0)
    return make_grid(dims, (spacing,) * 3, origin, reference.direction, dtype=np.uint8)


def model_frame(m: InrModel) -> Volume:
    if "t2" not in m.frame:
        raise GeometryError("model carries no T2 frame geometry")
    return geometry_volume(m.frame["t2"])


def _boxes_intersect(a: Volume, b: Volume) -> bool:
    lo_a, hi_a = (np.minimum(*edge_bbox(a)), np.maximum(*edge_bbox(a)))
    lo_b, hi_b = (np.minimum(*edge_bbox(b)), np.maximum(*edge_bbox(b)))
    return bool(np.all(lo_a < hi_b) and np.all(lo_b < hi_a))


def sample_inr(m: InrModel, grid: IsoGridSpec | Volume, outputs=("seg",), chunk: int = 20000) -> dict:
    """Evaluate the INR at every voxel centre of ``grid`` (inference mode).

    Returns a dict with any of ``"seg"`` (LabelVolume, argmax over channels),
    ``"t1"`` and ``"t2"`` (Volumes in original intensity units).
    """
    frame = model_frame(m)
    g = grid.grid(frame) if isinstance(grid, IsoGridSpec) else grid
    if not _boxes_intersect(g, frame):
        raise GeometryError("sampling grid does not overlap the model's training box")
    pts = grid_points(g)
    heads = tuple(k for k in ("t1", "t2", "seg") if k in outputs)
    out = {k: [] for k in heads}
    for start in range(0, len(pts), chunk):
        x = physical_to_normalized(frame, pts[start:start + chunk])
        t1, t2, seg = forward(m, x, training=False, heads=heads)
        for k, val in (("t1", t1), ("t2", t2), ("seg", seg)):
            if k in out:
                out[k].append(val)
    result = {}
    if "seg" in out:
        probs = np.concatenate(out["seg"])
        result["seg"] = argmax_labels(probs, m.label_ids, g, m.label_table)
    for k in ("t1", "t2"):
        if k in out:
            lo, hi = m.intensity_norm[k]
            vals = lo + np.concatenate(out[k]).astype(np.float64) * (hi - lo)
            result[k] = Volume(vals.reshape(g.dims).astype(np.float32), g.spacing, g.origin, g.direction)
    return result


def assemble_atlas(m: InrModel, t1: Volume, t2: Volume, grid: IsoGridSpec | Volume):
    """INR segmentation plus trilinearly resampled source images on one grid."""
    frame = model_frame(m)
    if not t2.same_grid(frame, atol=1e-4):
        raise GeometryError("T2 volume does not match the grid the model was trained on")
    g = grid.grid(frame) if isinstance(grid, IsoGridSpec) else grid
    seg = sample_inr(m, g, outputs=("seg",))["seg"]
    return seg, resample_to_grid(t1, g), resample_to_grid(t2, g)


def upsample_nearest(seg: LabelVolume, grid: Volume) -> LabelVolume:
    idx = physical_to_voxel(seg, grid_points(grid))
    vals = interpolate_index(np.asarray(seg.data), idx, mode="nearest").reshape(grid.dims)
    return LabelVolume(vals, grid.spacing, grid.origin, grid.direction, seg.label_table)


def downsample_labels(seg_iso: LabelVolume, reference: Volume) -> LabelVolume:
    """Majority label of the fine voxels whose centres fall in each reference cell.

    Cells that receive no fine voxel centre take the label of the fine voxel
    nearest to the cell centre. Majority ties go to the lowest label id.
    """
    if not _boxes_intersect(seg_iso, reference):
        raise GeometryError("label volume and reference grid are disjoint")
    ids = np.asarray(seg_iso.label_ids)
    # label ids are sorted, so searchsorted gives each voxel's channel index
    codes = np.searchsorted(ids, np.asarray(seg_iso.data).reshape(-1))

    cell = np.floor(physical_to_voxel(reference, grid_points(seg_iso)) + 0.5).astype(np.int64)
    rdims = np.asarray(reference.dims)
    inside = np.all((cell >= 0) & (cell < rdims), axis=1)
    flat = np.ravel_multi_index(tuple(cell[inside].T), tuple(rdims))
    n_cells = int(np.prod(rdims))
    counts = np.zeros((n_cells, len(ids)), dtype=np.int64)
    np.add.at(counts, (flat, codes[inside]), 1)

    winner = np.argmax(counts, axis=1)
    empty = counts.sum(axis=1) == 0
    if np.any(empty):
        centres = grid_points(reference)[empty]
        near = interpolate_index(codes.reshape(seg_iso.dims), physical_to_voxel(seg_iso, centres), mode="nearest")
        winner[empty] = near
    data = ids[winner].reshape(tuple(rdims))
    return LabelVolume(data, reference.spacing, reference.origin, reference.direction, seg_iso.label_table)
