"""Multi-contrast implicit neural representation with a segmentation head.

Network layout (defaults)::

    x (3) -> Fourier features (2 * 256)
          -> shared0 .. shared4   [FC -> ReLU -> dropout], width 256
    shared4 -> t1_hidden -> ReLU -> t1_out (1)
    shared4 -> t2_hidden -> ReLU -> t2_out (1)
    shared0 -> seg_hidden -> ReLU -> seg_out (N) -> sigmoid

Everything here is plain numpy with hand-written reverse mode. Weight
matrices are stored ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, TrainingError

MAGIC = b"INRM"
FORMAT_VERSION = 1
BCE_EPS = 1e-7

# training defaults, picked on a development phantom distinct from the acceptance one
DEFAULT_WIDTH = 256
DEFAULT_SIGMA_B = 0.25
DEFAULT_LR = 1e-3

TWO_PI = 2.0 * np.pi


@dataclass
class FourierEncoder:
    """Frozen Gaussian Fourier feature map ``[cos(2 pi B x), sin(2 pi B x)]``."""

    B: np.ndarray

    @property
    def feature_count(self) -> int:
        return 2 * self.B.shape[0]

    def encode(self, x, dtype=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        proj = TWO_PI * (np.atleast_2d(x) @ self.B.astype(np.float64).T)
        v = np.concatenate([np.cos(proj), np.sin(proj)], axis=1)
        v = v.astype(dtype or self.B.dtype, copy=False)
        return v[0] if x.ndim == 1 else v


def encode(enc: FourierEncoder, x) -> np.ndarray:
    return enc.encode(x)


def normalize_coords(index, dims) -> np.ndarray:
    """Map voxel indices to ``[-1, 1]``: index 0 -> -1, index ``d - 1`` -> +1."""
    dims = np.asarray(dims, dtype=np.float64)
    if np.any(dims < 2):
        raise ValueError(f"every dimension must be >= 2 to normalize coordinates, got {dims.tolist()}")
    index = np.asarray(index, dtype=np.float64)
    return 2.0 * index / (dims - 1.0) - 1.0


def layer_names(n_shared: int = 5) -> list[str]:
    names = [f"shared{i}" for i in range(n_shared)]
    for head in ("t1", "t2", "seg"):
        names += [f"{head}_hidden", f"{head}_out"]
    return names


@dataclass
class InrModel:
    encoder: FourierEncoder
    params: dict
    label_table: tuple
    intensity_norm: dict = field(default_factory=lambda: {"t1": (0.0, 1.0), "t2": (0.0, 1.0)})
    seed: int = 0
    dropout_p: float = 0.1
    sigma_b: float = DEFAULT_SIGMA_B
    n_shared: int = 5
    seg_attach: int = 1
    frame: dict = field(default_factory=dict)
    rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        for key, (lo, hi) in self.intensity_norm.items():
            if not hi > lo:
                raise ValueError(f"intensity_norm[{key!r}] needs max > min, got ({lo}, {hi})")
        n_out = self.params["seg_out.W"].shape[1]
        if n_out != len(self.label_table):
            raise ModelFormatError(
                f"label table has {len(self.label_table)} entries but seg head outputs {n_out} channels"
            )
        if self.rng is None:
            self.rng = _streams(self.seed)["dropout"]

    @property
    def dtype(self):
        return self.params["shared0.W"].dtype

    @property
    def width(self) -> int:
        return self.params["shared0.W"].shape[1]

    @property
    def n_labels(self) -> int:
        return len(self.label_table)

    @property
    def label_ids(self) -> tuple:
        return tuple(k for k, _ in self.label_table)

    def parameter_names(self) -> list[str]:
        return [f"{n}.{p}" for n in layer_names(self.n_shared) for p in ("W", "b")]


def _streams(seed: int) -> dict:
    names = ("fourier", "weights", "dropout", "shuffle")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(s)) for n, s in zip(names, children)}


def init_model(
    label_table,
    n_fourier: int = 256,
    width: int = DEFAULT_WIDTH,
    sigma_b: float = DEFAULT_SIGMA_B,
    dropout_p: float = 0.1,
    seed: int = 0,
    n_shared: int = 5,
    dtype=np.float32,
    intensity_norm=None,
    frame=None,
) -> InrModel:
    """Glorot-uniform weights, zero biases, B ~ N(0, sigma_b^2), all from ``seed``."""
    label_table = tuple(sorted((int(k), str(v)) for k, v in dict(label_table).items()))
    rngs = _streams(seed)
    B = (rngs["fourier"].standard_normal((n_fourier, 3)) * sigma_b).astype(dtype)
    n_labels = len(label_table)
    shapes = {}
    fan_in = 2 * n_fourier
    for i in range(n_shared):
        shapes[f"shared{i}"] = (fan_in, width)
        fan_in = width
    for head, n_out in (("t1", 1), ("t2", 1), ("seg", n_labels)):
        shapes[f"{head}_hidden"] = (width, width)
        shapes[f"{head}_out"] = (width, n_out)
    params = {}
    for name in layer_names(n_shared):
        fi, fo = shapes[name]
        bound = np.sqrt(6.0 / (fi + fo))
        params[f"{name}.W"] = rngs["weights"].uniform(-bound, bound, size=(fi, fo)).astype(dtype)
        params[f"{name}.b"] = np.zeros(fo, dtype=dtype)
    return InrModel(
        FourierEncoder(B),
        params,
        label_table,
        intensity_norm=dict(intensity_norm or {"t1": (0.0, 1.0), "t2": (0.0, 1.0)}),
        seed=int(seed),
        dropout_p=float(dropout_p),
        sigma_b=float(sigma_b),
        n_shared=n_shared,
        frame=dict(frame or {}),
        rng=rngs["dropout"],
    )


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _affine(m: InrModel, name: str, a):
    return a @ m.params[f"{name}.W"] + m.params[f"{name}.b"]


def _draw_mask(m: InrModel, n: int) -> np.ndarray:
    keep = 1.0 - m.dropout_p
    mask = m.rng.random((n, m.width), dtype=np.float32) < keep
    return mask.astype(m.dtype) * m.dtype.type(1.0 / keep)


def draw_masks(m: InrModel, n: int) -> list:
    """Inverted-dropout masks (values 0 or 1/(1-p)) for each shared layer."""
    return [_draw_mask(m, n) for _ in range(m.n_shared)]


def _trunk(m: InrModel, v, training: bool, masks=None, depth=None):
    """Shared layers; returns ``[input, out0, ..., out{n-1}]`` (post-dropout)."""
    acts = [v]
    use_dropout = training and m.dropout_p > 0
    n = len(v)
    a = v
    for i in range(m.n_shared if depth is None else depth):
        z = a @ m.params[f"shared{i}.W"]
        z += m.params[f"shared{i}.b"]
        np.maximum(z, 0, out=z)
        if use_dropout:
            z *= masks[i] if masks is not None else _draw_mask(m, n)
        acts.append(z)
        a = z
    return acts


def _dropout_scale(m: InrModel, training: bool) -> float:
    return 1.0 / (1.0 - m.dropout_p) if training else 1.0


def _head(m: InrModel, head: str, a):
    h = np.maximum(_affine(m, f"{head}_hidden", a), 0)
    return h, _affine(m, f"{head}_out", h)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise TrainingError(f"non-finite values in {what}")


def forward(m: InrModel, x, training: bool = False, masks=None, heads=("t1", "t2", "seg")):
    """Predict (t1, t2, seg probabilities) at normalized coordinates ``x``.

    Seg probabilities are clamped into ``[eps, 1 - eps]``. Heads left out of
    ``heads`` come back as ``None`` and their layers are not evaluated.
    """
    v = m.encoder.encode(np.atleast_2d(x), m.dtype)
    depth = m.n_shared if ("t1" in heads or "t2" in heads) else m.seg_attach
    acts = _trunk(m, v, training, masks, depth)
    t1 = t2 = seg = None
    if "t1" in heads:
        t1 = _head(m, "t1", acts[-1])[1][:, 0]
        _check_finite(t1, "t1 head")
    if "t2" in heads:
        t2 = _head(m, "t2", acts[-1])[1][:, 0]
        _check_finite(t2, "t2 head")
    if "seg" in heads:
        seg = np.clip(_sigmoid(_head(m, "seg", acts[m.seg_attach])[1]), BCE_EPS, 1.0 - BCE_EPS)
        _check_finite(seg, "seg head")
    return t1, t2, seg


@dataclass
class Batch:
    """Training samples: ``x1/i1`` from the T1 grid, ``x2/i2/y2`` from the T2 grid."""

    x1: np.ndarray
    i1: np.ndarray
    x2: np.ndarray
    i2: np.ndarray
    y2: np.ndarray

    @property
    def n1(self) -> int:
        return len(self.x1)

    @property
    def n2(self) -> int:
        return len(self.x2)


def forward_batch(m: InrModel, batch: Batch, training: bool = True, masks=None):
    """Forward pass evaluating only the heads each sample is supervised by.

    Returns ``(preds, cache)``; ``preds = (t1 over x1, t2 over x2, seg over x2)``.
    """
    n1 = batch.n1
    x = np.concatenate([np.reshape(batch.x1, (-1, 3)), np.reshape(batch.x2, (-1, 3))])
    v = m.encoder.encode(x, m.dtype)
    acts = _trunk(m, v, training, masks)
    last = acts[-1]
    h1, t1 = _head(m, "t1", last[:n1])
    h2, t2 = _head(m, "t2", last[n1:])
    hs, logits = _head(m, "seg", acts[m.seg_attach][n1:])
    sig = _sigmoid(logits)
    seg = np.clip(sig, BCE_EPS, 1.0 - BCE_EPS)
    for arr, what in ((t1, "t1 head"), (t2, "t2 head"), (seg, "seg head")):
        _check_finite(arr, what)
    cache = {"acts": acts, "scale": _dropout_scale(m, training), "h": {"t1": h1, "t2": h2, "seg": hs}, "seg_inside": sig == seg}
    return (t1[:, 0], t2[:, 0], seg), cache


def loss_terms(preds, batch: Batch) -> tuple[float, float, float]:
    """Summed squared errors for T1 and T2 and summed BCE over all channels."""
    t1, t2, seg = preds
    if t1.shape != np.shape(batch.i1) or t2.shape != np.shape(batch.i2) or seg.shape != np.shape(batch.y2):
        raise ValueError(
            f"prediction/truth shape mismatch: {t1.shape}/{np.shape(batch.i1)}, "
            f"{t2.shape}/{np.shape(batch.i2)}, {seg.shape}/{np.shape(batch.y2)}"
        )
    e1 = t1.astype(np.float64) - batch.i1
    e2 = t2.astype(np.float64) - batch.i2
    p = np.clip(seg.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(batch.y2, dtype=np.float64)
    bce = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(e1 @ e1), float(e2 @ e2), float(bce)


def loss_final(preds, batch: Batch, reduction: str = "sum") -> float:
    """Joint loss. ``"sum"`` is the plain summed form; ``"mean"`` divides each
    term by the number of samples of its own domain."""
    s1, s2, sb = loss_terms(preds, batch)
    if reduction == "sum":
        return s1 + s2 + sb
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    n1, n2 = batch.n1, batch.n2
    return (s1 / n1 if n1 else 0.0) + (s2 / n2 if n2 else 0.0) + (sb / n2 if n2 else 0.0)


def _head_backward(m, head, a_in, h, g_out, grads):
    W2 = m.params[f"{head}_out.W"]
    grads[f"{head}_out.W"] = h.T @ g_out
    grads[f"{head}_out.b"] = g_out.sum(axis=0)
    dh = (g_out @ W2.T) * (h > 0)
    grads[f"{head}_hidden.W"] = a_in.T @ dh
    grads[f"{head}_hidden.b"] = dh.sum(axis=0)
    return dh @ m.params[f"{head}_hidden.W"].T


def backward(m: InrModel, preds, cache, batch: Batch, reduction: str = "mean") -> dict:
    """Exact gradients of :func:`loss_final` for every trainable parameter (B excluded)."""
    t1, t2, seg = preds
    n1, n2 = batch.n1, batch.n2
    dt = m.dtype
    c1 = 2.0 / n1 if (reduction == "mean" and n1) else 2.0
    c2 = 2.0 / n2 if (reduction == "mean" and n2) else 2.0
    cb = 1.0 / n2 if (reduction == "mean" and n2) else 1.0

    acts = cache["acts"]
    scale = dt.type(cache["scale"])
    grads: dict = {}
    g1 = (c1 * (t1 - batch.i1.astype(dt))).astype(dt)[:, None]
    g2 = (c2 * (t2 - batch.i2.astype(dt))).astype(dt)[:, None]
    gs = (cb * (seg - batch.y2.astype(dt)) * cache["seg_inside"]).astype(dt)

    last = acts[-1]
    da1 = _head_backward(m, "t1", last[:n1], cache["h"]["t1"], g1, grads)
    da2 = _head_backward(m, "t2", last[n1:], cache["h"]["t2"], g2, grads)
    da_seg = _head_backward(m, "seg", acts[m.seg_attach][n1:], cache["h"]["seg"], gs, grads)

    da = np.concatenate([da1, da2])
    for i in range(m.n_shared - 1, -1, -1):
        if i + 1 == m.seg_attach:
            da[n1:] += da_seg
        # a = relu(z) * mask, so dz is da * scale wherever the unit survived
        dz = np.where(acts[i + 1] > 0, da * scale, dt.type(0))
        grads[f"shared{i}.W"] = acts[i].T @ dz
        grads[f"shared{i}.b"] = dz.sum(axis=0)
        if i > 0:
            da = dz @ m.params[f"shared{i}.W"].T
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
    return grads


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(model: InrModel) -> AdamState:
    return AdamState(
        {k: np.zeros_like(p) for k, p in model.params.items()},
        {k: np.zeros_like(p) for k, p in model.params.items()},
    )


def adam_step(model: InrModel, grads: dict, state: AdamState, lr=DEFAULT_LR, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place. Returns ``(model, state)``."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    step = lr / bc1
    for k, g in grads.items():
        mk, vk = state.m[k], state.v[k]
        mk *= beta1
        mk += (1.0 - beta1) * g
        vk *= beta2
        vk += (1.0 - beta2) * (g * g)
        denom = np.sqrt(vk / bc2)
        denom += eps
        model.params[k] -= (step * mk / denom).astype(model.params[k].dtype, copy=False)
    return model, state


def _metadata(m: InrModel) -> dict:
    tensors = [["B", list(m.encoder.B.shape)]]
    tensors += [[k, list(m.params[k].shape)] for k in m.parameter_names()]
    return {
        "label_table": [[k, v] for k, v in m.label_table],
        "intensity_norm": {k: [float(a), float(b)] for k, (a, b) in sorted(m.intensity_norm.items())},
        "sigma_b": m.sigma_b,
        "dropout_p": m.dropout_p,
        "seed": m.seed,
        "n_shared": m.n_shared,
        "seg_attach": m.seg_attach,
        "frame": m.frame,
        "tensors": tensors,
    }


def model_bytes(m: InrModel) -> bytes:
    meta = json.dumps(_metadata(m), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(m.encoder.B.astype("<f4").tobytes())
    for k in m.parameter_names():
        buf.write(np.ascontiguousarray(m.params[k]).astype("<f4").tobytes())
    return buf.getvalue()


def save_model(m: InrModel, path) -> None:
    Path(path).write_bytes(model_bytes(m))


def load_model(path) -> InrModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise ModelFormatError(f"{path}: truncated header")
    version, meta_len = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable metadata block ({exc})") from exc
    offset = 16 + meta_len
    tensors = {}
    for name, shape in meta["tensors"]:
        n = int(np.prod(shape)) * 4
        if offset + n > len(raw):
            raise ModelFormatError(f"{path}: tensor section truncated at {name!r}")
        tensors[name] = np.frombuffer(raw, "<f4", int(np.prod(shape)), offset).reshape(shape).astype(np.float32)
        offset += n
    if offset != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    B = tensors.pop("B")
    return InrModel(
        FourierEncoder(B),
        tensors,
        tuple((int(k), str(v)) for k, v in meta["label_table"]),
        intensity_norm={k: tuple(v) for k, v in meta["intensity_norm"].items()},
        seed=int(meta["seed"]),
        dropout_p=float(meta["dropout_p"]),
        sigma_b=float(meta["sigma_b"]),
        n_shared=int(meta["n_shared"]),
        seg_attach=int(meta["seg_attach"]),
        frame=meta["frame"],
    )
