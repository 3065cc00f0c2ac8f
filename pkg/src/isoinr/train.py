"""Training domains and the per-ROI fitting loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GeometryError, TrainingError
from .model import DEFAULT_LR, DEFAULT_SIGMA_B, DEFAULT_WIDTH, Batch, InrModel, _streams, adam_init, adam_step, backward, forward_batch, init_model, loss_terms
from .volume import LabelVolume, Volume, grid_points, one_hot, physical_to_voxel

log = logging.getLogger(__name__)


def geometry_dict(v: Volume) -> dict:
    return {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "direction": np.asarray(v.direction).tolist(),
    }


def geometry_volume(g: dict) -> Volume:
    """Zero-valued volume carrying the geometry described by ``g``."""
    return Volume(np.zeros(tuple(g["dims"]), np.uint8), tuple(g["spacing"]), tuple(g["origin"]), np.asarray(g["direction"]))


def physical_to_normalized(frame: Volume, points) -> np.ndarray:
    """Map physical mm points into the frame's ``[-1, 1]^3`` cube (clamped).

    The cube spans the frame's voxel centres: its first centre maps to -1 and
    its last to +1 on every axis.
    """
    dims = np.asarray(frame.dims, dtype=np.float64)
    if np.any(dims < 2):
        raise GeometryError(f"reference patch needs >= 2 voxels per axis, got {frame.dims}")
    idx = physical_to_voxel(frame, points)
    return np.clip(2.0 * idx / (dims - 1.0) - 1.0, -1.0, 1.0)


def _minmax(data) -> tuple[float, float]:
    lo, hi = float(np.min(data)), float(np.max(data))
    if not hi > lo:
        # constant patch: centre it at 0.5 after normalization
        lo, hi = lo - 0.5, lo + 0.5
    return lo, hi


@dataclass
class TrainingDomain:
    """Coordinate/value samples for both contrasts in one normalized frame.

    ``x1, i1`` cover every T1 voxel, ``x2, i2, y2`` every T2 voxel; all
    intensities are min-max normalized per contrast.
    """

    x1: np.ndarray
    i1: np.ndarray
    x2: np.ndarray
    i2: np.ndarray
    y2: np.ndarray
    label_table: tuple
    intensity_norm: dict
    frame: dict

    @property
    def n1(self) -> int:
        return len(self.x1)

    @property
    def n2(self) -> int:
        return len(self.x2)


def build_domain(t1: Volume, t2: Volume, seg: LabelVolume) -> TrainingDomain:
    if not seg.same_grid(t2):
        raise GeometryError("segmentation grid differs from the T2 grid")
    if t1.data.size == 0 or t2.data.size == 0:
        raise GeometryError("empty patch")
    if not np.allclose(t1.direction, t2.direction, atol=1e-6):
        raise GeometryError("T1 and T2 patches have different axis directions; harmonize first")
    norm = {"t1": _minmax(t1.data), "t2": _minmax(t2.data)}
    x1 = physical_to_normalized(t2, grid_points(t1))
    x2 = physical_to_normalized(t2, grid_points(t2))

    def scale(data, key):
        lo, hi = norm[key]
        return ((np.asarray(data, dtype=np.float64).reshape(-1) - lo) / (hi - lo)).astype(np.float32)

    onehot = one_hot(seg).channels.reshape(len(seg.label_ids), -1).T.copy()
    return TrainingDomain(
        x1=x1,
        i1=scale(t1.data, "t1"),
        x2=x2,
        i2=scale(t2.data, "t2"),
        y2=onehot,
        label_table=seg.label_table,
        intensity_norm=norm,
        frame={"t2": geometry_dict(t2), "t1": geometry_dict(t1)},
    )


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 10000
    lr: float = DEFAULT_LR
    dropout_p: float = 0.1
    sigma_b: float = DEFAULT_SIGMA_B
    seed: int = 0
    log_every: int = 1
    n_fourier: int = 256
    width: int = DEFAULT_WIDTH

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLoss:
    epoch: int
    sse_t1: float
    sse_t2: float
    bce_sum: float
    n1: int
    n2: int

    @property
    def mse_t1(self) -> float:
        return self.sse_t1 / self.n1 if self.n1 else 0.0

    @property
    def mse_t2(self) -> float:
        return self.sse_t2 / self.n2 if self.n2 else 0.0

    @property
    def bce(self) -> float:
        return self.bce_sum / self.n2 if self.n2 else 0.0

    @property
    def total(self) -> float:
        return self.mse_t1 + self.mse_t2 + self.bce

    @property
    def summed(self) -> float:
        return self.sse_t1 + self.sse_t2 + self.bce_sum


@dataclass
class FitResult:
    model: InrModel
    trace: list = field(default_factory=list)
    batches_per_epoch: int = 0


def iter_batches(n_total: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n_total)
    for start in range(0, n_total, batch_size):
        yield perm[start:start + batch_size]


def fit(domain: TrainingDomain, cfg: TrainConfig | None = None, callback=None) -> FitResult:
    """Fit an INR to ``domain``.

    One epoch is a single shuffled pass over the union of both sample sets.
    Each minibatch uses the joint loss with every term averaged over the
    samples of its own domain present in the batch.
    """
    cfg = cfg or TrainConfig()
    model = init_model(
        domain.label_table,
        n_fourier=cfg.n_fourier,
        width=cfg.width,
        sigma_b=cfg.sigma_b,
        dropout_p=cfg.dropout_p,
        seed=cfg.seed,
        intensity_norm=domain.intensity_norm,
        frame=domain.frame,
    )
    shuffle = _streams(cfg.seed)["shuffle"]
    state = adam_init(model)
    n1, n2 = domain.n1, domain.n2
    n_batches = math.ceil((n1 + n2) / cfg.batch_size)
    result = FitResult(model, [], n_batches)
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for b, idx in enumerate(iter_batches(n1 + n2, cfg.batch_size, shuffle)):
            s1 = idx[idx < n1]
            s2 = idx[idx >= n1] - n1
            batch = Batch(domain.x1[s1], domain.i1[s1], domain.x2[s2], domain.i2[s2], domain.y2[s2])
            try:
                preds, cache = forward_batch(model, batch, training=True)
                terms = loss_terms(preds, batch)
                if not all(math.isfinite(t) for t in terms):
                    raise TrainingError(f"non-finite loss {terms}")
                grads = backward(model, preds, cache, batch)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch + 1} batch {b + 1}: {exc}") from exc
            del cache
            adam_step(model, grads, state, lr=cfg.lr)
            sums += terms
        rec = EpochLoss(epoch + 1, *sums, n1, n2)
        result.trace.append(rec)
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            log.info(
                "epoch %d/%d mse_t1=%.5f mse_t2=%.5f bce=%.5f total=%.5f",
                rec.epoch, cfg.epochs, rec.mse_t1, rec.mse_t2, rec.bce, rec.total,
            )
        if callback is not None:
            callback(rec, model)
    return result


def write_loss_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mse_t1", "mse_t2", "bce", "total"])
        for r in trace:
            w.writerow([r.epoch] + [repr(float(v)) for v in (r.mse_t1, r.mse_t2, r.bce, r.total)])
