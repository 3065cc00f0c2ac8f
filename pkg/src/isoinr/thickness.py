"""Per-label thickness from a pruned distance-ridge skeleton.

Thickness at a foreground voxel is twice the radius stored at its nearest
skeleton voxel. Radii are Euclidean distances (mm) from a voxel centre to
the nearest background voxel centre.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ThicknessError
from .volume import LabelVolume, Volume

# 13 representatives of the 26-neighbourhood, one per +/- direction pair
DIRECTIONS = tuple(
    d for d in itertools.product((-1, 0, 1), repeat=3) if d > (0, 0, 0)
)
_CONN26 = np.ones((3, 3, 3), dtype=bool)


def _as_mask(mask) -> tuple[np.ndarray, tuple]:
    if isinstance(mask, Volume):
        return np.asarray(mask.data).astype(bool), mask.spacing
    return np.asarray(mask).astype(bool), (1.0, 1.0, 1.0)


def distance_transform(mask, spacing=None) -> np.ndarray:
    """Exact Euclidean distance (mm) from foreground centres to the nearest background centre.

    Background voxels get 0. A mask without any background gives ``inf``.
    """
    arr, default_spacing = _as_mask(mask)
    spacing = tuple(spacing or default_spacing)
    if arr.all():
        return np.full(arr.shape, np.inf)
    return ndimage.distance_transform_edt(arr, sampling=spacing)


def _shifted(padded: np.ndarray, d, shape) -> np.ndarray:
    sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(d, shape))
    return padded[sl]


def ridge_mask(dist: np.ndarray, mask: np.ndarray, spacing, min_kink: float = 0.5) -> np.ndarray:
    """Voxels that are a kinked local maximum of ``dist`` along some direction pair.

    Along direction ``d`` (step length ``h`` mm) a voxel qualifies when its
    value is >= both neighbours and exceeds their mean by ``min_kink * h``.
    The kink condition rejects the smooth tangential maxima of cone-like
    distance fields (e.g. every plane through a ball's centre).
    """
    padded = np.pad(dist, 1, mode="edge")
    ridge = np.zeros(dist.shape, dtype=bool)
    spacing = np.asarray(spacing, dtype=np.float64)
    for d in DIRECTIONS:
        step = float(np.sqrt(np.sum((np.asarray(d) * spacing) ** 2)))
        fwd = _shifted(padded, d, dist.shape)
        bwd = _shifted(padded, tuple(-o for o in d), dist.shape)
        kink = dist - 0.5 * (fwd + bwd)
        ridge |= (dist >= fwd) & (dist >= bwd) & (kink >= min_kink * step * (1 - 1e-9))
    return ridge & mask


@dataclass
class Skeleton:
    points: np.ndarray  # (n, 3) voxel indices
    radius: np.ndarray  # (n,) mm
    mask: np.ndarray  # bool grid
    radius_field: np.ndarray  # R on skeleton voxels, 0 elsewhere


def extract_skeleton(mask, prune_ratio: float = 0.25, spacing=None, min_kink: float = 0.5) -> Skeleton:
    """Pruned ridge skeleton with its radius field.

    Ridge voxels whose radius is below ``prune_ratio`` times the largest
    radius of their 26-connected mask component are dropped.
    """
    arr, default_spacing = _as_mask(mask)
    spacing = tuple(spacing or default_spacing)
    if not arr.any():
        raise ThicknessError("cannot extract a skeleton from an empty mask")
    if not 0.0 <= prune_ratio < 1.0:
        raise ThicknessError(f"prune_ratio must be in [0, 1), got {prune_ratio}")
    dist = distance_transform(arr, spacing)
    ridge = ridge_mask(dist, arr, spacing, min_kink)
    comps, n = ndimage.label(arr, structure=_CONN26)
    if prune_ratio > 0 and n:
        top = ndimage.maximum(np.where(ridge, dist, 0.0), labels=comps, index=np.arange(1, n + 1))
        limit = prune_ratio * np.concatenate([[0.0], np.asarray(top)])[comps]
        ridge &= dist >= limit
    pts = np.argwhere(ridge)
    rf = np.where(ridge, dist, 0.0)
    return Skeleton(pts, dist[ridge], ridge, rf)


@dataclass
class LabelThickness:
    label: int
    name: str
    n_voxels: int
    n_skeleton: int
    median_mm: float | None


@dataclass
class ThicknessResult:
    labels: dict = field(default_factory=dict)  # label id -> LabelThickness
    thickness_map: Volume | None = None

    def median(self, label: int) -> float | None:
        return self.labels[label].median_mm


def _label_thickness(arr: np.ndarray, spacing, prune_ratio: float, min_kink: float):
    """Per-voxel thickness (mm) of one binary mask; zeros outside it."""
    out = np.zeros(arr.shape, dtype=np.float64)
    if not arr.any():
        return out, 0
    skel = extract_skeleton(arr, prune_ratio, spacing, min_kink)
    comps, n = ndimage.label(arr, structure=_CONN26)
    n_skel = 0
    for ci, sl in enumerate(ndimage.find_objects(comps), start=1):
        comp = comps[sl] == ci
        sk = skel.mask[sl] & comp
        if not sk.any():
            continue
        n_skel += int(sk.sum())
        # nearest skeleton voxel of this component for every voxel
        _, nearest = ndimage.distance_transform_edt(~sk, sampling=spacing, return_indices=True)
        radius = skel.radius_field[sl][tuple(nearest)]
        region = out[sl]
        region[comp] = 2.0 * radius[comp]
    return out, n_skel


def thickness_map(
    labels: LabelVolume,
    target_labels=None,
    prune_ratio: float = 0.25,
    min_kink: float = 0.5,
    jobs: int = 1,
    with_map: bool = False,
) -> ThicknessResult:
    """Median thickness per target label (labels without voxels report ``None``)."""
    table = labels.label_names
    targets = [k for k in table if k != 0] if target_labels is None else list(target_labels)
    for k in targets:
        if k not in table:
            raise ThicknessError(f"label {k} is not in the label table")
    data = np.asarray(labels.data)

    def one(k):
        arr = data == k
        tmap, n_skel = _label_thickness(arr, labels.spacing, prune_ratio, min_kink)
        n_vox = int(arr.sum())
        med = float(np.median(tmap[arr])) if n_vox and n_skel else None
        return k, LabelThickness(k, table[k], n_vox, n_skel, med), tmap, arr

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, targets))
    else:
        results = [one(k) for k in targets]

    res = ThicknessResult()
    full = np.zeros(data.shape, dtype=np.float32) if with_map else None
    for k, lt, tmap, arr in results:
        res.labels[k] = lt
        if full is not None:
            full[arr] = tmap[arr]
    if full is not None:
        res.thickness_map = Volume(full, labels.spacing, labels.origin, labels.direction)
    return res
