"""Volumetric grids in physical millimetre space.

Arrays are indexed ``data[i, j, k]`` with ``i`` the fastest-varying axis on
disk. Physical position of a (possibly fractional) index is
``origin + direction @ (spacing * index)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import GeometryError

_SNAP = 1e-9


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr).view()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """3-D scalar grid with spacing, origin and axis directions in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GeometryError(f"volume data must be 3-D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise GeometryError(f"spacing must be three positive numbers, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise GeometryError(f"origin must have three components, got {self.origin}")
        direction = np.asarray(self.direction, dtype=np.float64)
        if direction.shape != (3, 3) or not np.allclose(direction.T @ direction, np.eye(3), atol=1e-6):
            raise GeometryError("direction must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", _freeze(direction))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    @property
    def affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :3] = self.direction * np.asarray(self.spacing)
        aff[:3, 3] = self.origin
        return aff

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxel values (shape must match)."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError(f"shape {data.shape} does not match grid {self.data.shape}")
        return Volume(data, self.spacing, self.origin, self.direction)

    def same_grid(self, other: "Volume", atol: float = 1e-5) -> bool:
        """Equal dims and geometry within ``atol`` (files store geometry as float32)."""
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
            and np.allclose(self.direction, other.direction, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume):
    """Integer label grid with an id->name table; id 0 is background."""

    label_table: tuple = ()

    def __post_init__(self):
        super().__post_init__()
        data = self.data
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.mod(data, 1) == 0):
                raise GeometryError("label volume contains non-integer values")
            data = data.astype(np.int64)
            object.__setattr__(self, "data", _freeze(data))
        present = np.unique(data)
        if present.size and present[0] < 0:
            raise GeometryError("label ids must be non-negative")
        table = dict(self.label_table) if self.label_table else {}
        if not table:
            table = {int(v): ("background" if v == 0 else f"label_{int(v)}") for v in present}
        table.setdefault(0, "background")
        missing = set(int(v) for v in present) - set(table)
        if missing:
            raise GeometryError(f"voxel labels {sorted(missing)} missing from label table")
        object.__setattr__(
            self, "label_table", tuple(sorted((int(k), str(v)) for k, v in table.items()))
        )

    @property
    def label_ids(self) -> tuple:
        return tuple(k for k, _ in self.label_table)

    @property
    def label_names(self) -> dict:
        return dict(self.label_table)

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError(f"shape {data.shape} does not match grid {self.data.shape}")
        return LabelVolume(data, self.spacing, self.origin, self.direction, self.label_table)


@dataclass(frozen=True, eq=False)
class OneHotStack:
    """N binary channels on a common grid, one per label id (ascending)."""

    channels: np.ndarray
    label_ids: tuple
    geometry: Volume

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 4 or ch.shape[0] != len(self.label_ids):
            raise GeometryError("channels must have shape (N, nx, ny, nz) with N = len(label_ids)")
        if ch.shape[1:] != self.geometry.dims:
            raise GeometryError("channel grid does not match geometry")
        object.__setattr__(self, "channels", _freeze(ch))
        object.__setattr__(self, "label_ids", tuple(int(i) for i in self.label_ids))


def make_grid(
    dims: Sequence[int], spacing, origin=(0.0, 0.0, 0.0), direction=None, fill=0.0, dtype=np.float32
) -> Volume:
    direction = np.eye(3) if direction is None else direction
    return Volume(np.full(tuple(int(d) for d in dims), fill, dtype=dtype), spacing, origin, direction)


def voxel_to_physical(v: Volume, index) -> np.ndarray:
    """Physical mm position of fractional voxel indices (shape ``(..., 3)``)."""
    index = np.asarray(index, dtype=np.float64)
    scaled = index * np.asarray(v.spacing)
    return scaled @ v.direction.T + np.asarray(v.origin)


def physical_to_voxel(v: Volume, point) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    # direction is orthonormal, so its inverse is its transpose
    rel = (point - np.asarray(v.origin)) @ v.direction
    return rel / np.asarray(v.spacing)


def edge_bbox(v: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Physical corners of the grid's outer voxel faces (index -0.5 and dims-0.5)."""
    lo = voxel_to_physical(v, np.full(3, -0.5))
    hi = voxel_to_physical(v, np.asarray(v.dims) - 0.5)
    return lo, hi


def center_bbox(v: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Physical positions of the first and last voxel centres."""
    return voxel_to_physical(v, np.zeros(3)), voxel_to_physical(v, np.asarray(v.dims) - 1.0)


def grid_points(v: Volume) -> np.ndarray:
    """Physical centres of every voxel, C order over ``(i, j, k)``; shape ``(n, 3)``."""
    idx = np.indices(v.dims, dtype=np.float64).reshape(3, -1).T
    return voxel_to_physical(v, idx)


def _snap(idx: np.ndarray) -> np.ndarray:
    near = np.rint(idx)
    return np.where(np.abs(idx - near) < _SNAP, near, idx)


def interpolate_index(data: np.ndarray, idx: np.ndarray, mode: str = "trilinear") -> np.ndarray:
    """Sample ``data`` at continuous voxel indices ``idx`` (shape ``(n, 3)``).

    Indices outside the voxel-centre hull are clamped onto it.
    """
    dims = np.asarray(data.shape)
    idx = np.clip(_snap(np.asarray(idx, dtype=np.float64)), 0.0, dims - 1.0)
    if mode == "nearest":
        # round half toward the lower index
        near = np.ceil(idx - 0.5).astype(np.int64)
        return data[near[:, 0], near[:, 1], near[:, 2]]
    if mode != "trilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    base = np.minimum(np.floor(idx).astype(np.int64), np.maximum(dims - 2, 0))
    frac = idx - base
    out = np.zeros(len(idx), dtype=np.float64)
    for corner in range(8):
        offs = np.array([(corner >> a) & 1 for a in range(3)])
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        pos = np.minimum(base + offs, dims - 1)
        out += w * data[pos[:, 0], pos[:, 1], pos[:, 2]]
    return out


def interpolate(v: Volume, points, mode: str = "trilinear"):
    """Value of ``v`` at physical points; a single triple gives a scalar."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    idx = physical_to_voxel(v, np.atleast_2d(pts))
    vals = interpolate_index(v.data, idx, mode)
    return vals[0] if single else vals


def resample_to_grid(src: Volume, grid: Volume, mode: str = "trilinear", dtype=np.float32) -> Volume:
    idx = physical_to_voxel(src, grid_points(grid))
    vals = interpolate_index(src.data, idx, mode).reshape(grid.dims)
    return Volume(vals.astype(dtype), grid.spacing, grid.origin, grid.direction)


def harmonize_bbox(moving: Volume, reference: Volume, fill: float = 0.0) -> Volume:
    """Crop/pad ``moving`` so its physical box matches ``reference``'s.

    The output keeps ``moving``'s spacing. Its lower outer corner coincides
    with the reference's and it has ``round(extent / spacing)`` voxels per
    axis. Voxels outside the moving volume's outer faces take ``fill``; all
    others are trilinearly resampled from ``moving``.
    """
    if not np.allclose(moving.direction, reference.direction, atol=1e-6):
        raise GeometryError("moving and reference volumes have different axis directions")
    extent = np.asarray(reference.dims) * np.asarray(reference.spacing)
    spacing = np.asarray(moving.spacing)
    dims = np.maximum(np.rint(extent / spacing - 1e-9).astype(np.int64), 1)
    lo, _ = edge_bbox(reference)
    origin = lo + reference.direction @ (spacing / 2.0)
    grid = make_grid(dims, moving.spacing, origin, reference.direction)

    idx = _snap(physical_to_voxel(moving, grid_points(grid)))
    mdims = np.asarray(moving.dims)
    inside = np.all((idx >= -0.5 - _SNAP) & (idx <= mdims - 0.5 + _SNAP), axis=1)
    vals = np.full(len(idx), fill, dtype=np.float64)
    vals[inside] = interpolate_index(moving.data, idx[inside])
    return Volume(vals.reshape(grid.dims).astype(moving.data.dtype, copy=False), grid.spacing, grid.origin, grid.direction)


def one_hot(seg: LabelVolume) -> OneHotStack:
    ids = np.asarray(seg.label_ids)
    channels = (seg.data[None, ...] == ids[:, None, None, None]).astype(np.uint8)
    return OneHotStack(channels, tuple(ids), Volume(np.zeros(seg.dims, np.uint8), seg.spacing, seg.origin, seg.direction))


def argmax_labels(probs, label_ids, geometry: Volume, label_table=None) -> LabelVolume:
    """Per-voxel label of the maximal channel; ties go to the lowest label id.

    ``probs`` has shape ``(N, *dims)`` (or ``(n_voxels, N)`` flattened in C order).
    """
    ids = np.asarray(label_ids)
    order = np.argsort(ids, kind="stable")
    probs = np.asarray(probs)
    if probs.ndim == 2 and probs.shape[1] == len(ids):
        probs = probs.T.reshape((len(ids),) + geometry.dims)
    winners = np.argmax(probs[order], axis=0)
    if label_table is None:
        label_table = [(int(i), "background" if i == 0 else f"label_{int(i)}") for i in ids]
    return LabelVolume(ids[order][winners], geometry.spacing, geometry.origin, geometry.direction, tuple(label_table))


def read_label_table(path) -> tuple:
    with open(path) as fh:
        raw = json.load(fh)
    return tuple(sorted((int(k), str(v)) for k, v in raw.items()))


def write_label_table(table: Mapping[int, str] | Sequence, path) -> None:
    table = dict(table)
    Path(path).write_text(json.dumps({str(k): table[k] for k in sorted(table)}, indent=2) + "\n")
