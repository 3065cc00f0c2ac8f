"""scikit-learn style wrapper around the per-ROI INR fit.

``X`` for :meth:`InrSegmenter.fit` is a ``(t1, t2)`` pair of volumes and
``y`` the T2-grid segmentation; prediction methods take physical points in
mm, shape ``(n, 3)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import forward
from .resample import IsoGridSpec, model_frame, sample_inr
from .train import TrainConfig, build_domain, fit, physical_to_normalized
from .volume import LabelVolume, Volume, harmonize_bbox


def check_patch_pair(X, y=None):
    """Validate a ``(t1, t2)`` volume pair and an optional segmentation on the T2 grid."""
    try:
        t1, t2 = X
    except (TypeError, ValueError):
        raise ValueError("X must be a (t1, t2) pair of Volume objects") from None
    if not isinstance(t1, Volume) or not isinstance(t2, Volume):
        raise TypeError("X must hold Volume objects")
    if y is not None:
        if not isinstance(y, LabelVolume):
            raise TypeError("y must be a LabelVolume")
        if not y.same_grid(t2):
            raise ValueError("y must lie on the T2 grid")
    return t1, t2, y


def check_points(points) -> np.ndarray:
    """2-D float64 array of physical points with three columns."""
    pts = check_array(points, dtype=np.float64, ensure_2d=True)
    if pts.shape[1] != 3:
        raise ValueError(f"points need 3 columns (x, y, z in mm), got {pts.shape[1]}")
    return pts


_D = TrainConfig()


class InrSegmenter(ClassifierMixin, BaseEstimator):
    """Joint T1/T2/segmentation INR fitted to one anisotropic patch pair."""

    def __init__(
        self,
        epochs=_D.epochs,
        batch_size=_D.batch_size,
        lr=_D.lr,
        sigma_b=_D.sigma_b,
        dropout=_D.dropout_p,
        n_fourier=_D.n_fourier,
        width=_D.width,
        seed=_D.seed,
        harmonize=True,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.sigma_b = sigma_b
        self.dropout = dropout
        self.n_fourier = n_fourier
        self.width = width
        self.seed = seed
        self.harmonize = harmonize

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            dropout_p=self.dropout,
            sigma_b=self.sigma_b,
            seed=self.seed,
            n_fourier=self.n_fourier,
            width=self.width,
        )

    def fit(self, X, y, callback=None):
        t1, t2, seg = check_patch_pair(X, y)
        if self.harmonize:
            t1 = harmonize_bbox(t1, t2)
        result = fit(build_domain(t1, t2, seg), self._config(), callback)
        self.model_ = result.model
        self.loss_trace_ = result.trace
        self.classes_ = np.asarray(result.model.label_ids)
        self.frame_ = model_frame(result.model)
        return self

    def _heads(self, points, heads):
        check_is_fitted(self, "model_")
        x = physical_to_normalized(self.frame_, check_points(points))
        return forward(self.model_, x, training=False, heads=heads)

    def predict_proba(self, points) -> np.ndarray:
        """Per-channel sigmoid outputs, shape ``(n, n_labels)``.

        Channels are independent, so rows need not sum to one.
        """
        return self._heads(points, ("seg",))[2].astype(np.float64)

    def predict(self, points) -> np.ndarray:
        probs = self.predict_proba(points)
        # argmax returns the first maximum, i.e. the lowest label id
        return self.classes_[np.argmax(probs, axis=1)]

    def predict_intensity(self, points, contrast="t2") -> np.ndarray:
        """Intensity head output in the original image units."""
        if contrast not in ("t1", "t2"):
            raise ValueError(f"contrast must be 't1' or 't2', got {contrast!r}")
        out = self._heads(points, (contrast,))[0 if contrast == "t1" else 1]
        lo, hi = self.model_.intensity_norm[contrast]
        return lo + out.astype(np.float64) * (hi - lo)

    def transform(self, grid=None, outputs=("seg",)) -> dict:
        """Sample the fitted INR on ``grid`` (default 0.4 mm over the T2 box)."""
        check_is_fitted(self, "model_")
        return sample_inr(self.model_, grid if grid is not None else IsoGridSpec(0.4), outputs=outputs)
