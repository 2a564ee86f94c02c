"""The four layer types: folding, max-pooling, convolutional GMM, classifier.

Each layer has a deterministic forward transform on NHWC activity tensors
and a backwards transform on control signals of the same layout.  Folding
is a pure gather (im2col-style patch extraction into channels), pooling is
channel-wise window max, the cGMM layer emits posteriors forward and
mixture samples backwards, and the classifier is softmax regression with
an approximate log-domain inversion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import mixture as mx
from .tensor import ConfigError, Shape3

log = logging.getLogger(__name__)

# classifier inversion constants: floor inside the log, and the offset that
# makes the smallest output entry exactly positive
EPS_LOG = 1e-3
EPS_POS = 1e-6


@dataclass(frozen=True)
class FoldSpec:
    f: int
    delta: int

    def __post_init__(self):
        if self.f < 1 or self.delta < 1:
            raise ConfigError(f"folding needs f >= 1 and stride >= 1, got {self}")

    def token(self) -> str:
        return f"F({self.f},{self.delta})"


@dataclass(frozen=True)
class PoolSpec:
    f: int
    delta: int

    def __post_init__(self):
        if self.f < 1 or self.delta < 1:
            raise ConfigError(f"pooling needs f >= 1 and stride >= 1, got {self}")

    def token(self) -> str:
        return f"P({self.f},{self.delta})"


@dataclass(frozen=True)
class GmmSpec:
    k: int
    independent: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"cGMM needs K >= 1, got {self.k}")

    def token(self) -> str:
        return f"G({self.k})i" if self.independent else f"G({self.k})"


@dataclass(frozen=True)
class ClassifierSpec:
    s: int

    def __post_init__(self):
        if self.s < 2:
            raise ConfigError(f"classifier needs S >= 2, got {self.s}")

    def token(self) -> str:
        return f"C({self.s})"


LayerSpec = FoldSpec | PoolSpec | GmmSpec | ClassifierSpec


@dataclass
class ClassifierParams:
    """Softmax regression weights; w maps flattened input to S class logits."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ConfigError("classifier weights must be (D_in, S) with bias (S,)")

    @property
    def s(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.w.copy(), self.b.copy())


def output_shape(spec: LayerSpec, in_shape: Shape3, layer_index: int = -1) -> Shape3:
    """Activity shape a layer produces for the given input shape."""
    h, w, c = in_shape
    where = f"layer {layer_index} ({spec.token()})" if layer_index >= 0 else spec.token()
    if isinstance(spec, (FoldSpec, PoolSpec)):
        if spec.f > h or spec.f > w:
            raise ConfigError(f"{where}: kernel {spec.f} exceeds input {h}x{w}")
        if (h - spec.f) % spec.delta or (w - spec.f) % spec.delta:
            log.warning("%s: stride %d does not divide %dx%d evenly; trailing "
                        "rows/cols are dropped", where, spec.delta, h, w)
        oh = 1 + (h - spec.f) // spec.delta
        ow = 1 + (w - spec.f) // spec.delta
        oc = spec.f * spec.f * c if isinstance(spec, FoldSpec) else c
        return Shape3(oh, ow, oc)
    if isinstance(spec, GmmSpec):
        return Shape3(h, w, spec.k)
    if isinstance(spec, ClassifierSpec):
        return Shape3(1, 1, spec.s)
    raise ConfigError(f"unknown layer spec {spec!r}")


# ------------------------------------------------------------------ folding

def folding_source_index(f: int, delta: int, c_in: int,
                         m: tuple[int, int, int]) -> tuple[int, int, int]:
    """Source position (h', w', c') feeding folded output entry m = (h, w, c)."""
    h, w, c = m
    if c >= f * f * c_in:
        raise IndexError(f"channel {c} out of range for f={f}, C'={c_in}")
    return (h * delta + c // (f * c_in), w * delta + (c // c_in) % f, c % c_in)


def folding_forward(spec: FoldSpec, x: np.ndarray) -> np.ndarray:
    """Gather f x f patches (stride delta) into the channel axis; no arithmetic."""
    n, h, w, c = x.shape
    oh, ow, oc = output_shape(spec, Shape3(h, w, c))
    f, d = spec.f, spec.delta
    out = np.empty((n, oh, ow, oc), dtype=x.dtype)
    for i in range(f):
        for j in range(f):
            blk = (i * f + j) * c
            out[:, :, :, blk:blk + c] = x[:, i:i + oh * d:d, j:j + ow * d:d, :]
    return out


def folding_backward(spec: FoldSpec, t: np.ndarray, in_shape: Shape3) -> np.ndarray:
    """Average the control entries of every output position fed by a source.

    Sources outside any patch (possible with non-dividing strides) get 0.
    """
    n, oh, ow, oc = t.shape
    h, w, c = in_shape
    f, d = spec.f, spec.delta
    if oc != f * f * c:
        raise ConfigError(f"control channels {oc} != f^2*C' = {f * f * c}")
    acc = np.zeros((n, h, w, c), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    for i in range(f):
        for j in range(f):
            blk = (i * f + j) * c
            acc[:, i:i + oh * d:d, j:j + ow * d:d, :] += t[:, :, :, blk:blk + c]
            count[i:i + oh * d:d, j:j + ow * d:d] += 1.0
    safe = np.maximum(count, 1.0)
    out = acc / safe[None, :, :, None]
    out[:, count == 0, :] = 0.0
    return out.astype(np.float32)


def folding_input_gradient(spec: FoldSpec, g_out: np.ndarray,
                           in_shape: Shape3) -> np.ndarray:
    """Transpose of the forward gather: scatter-add output gradients to sources."""
    n, oh, ow, oc = g_out.shape
    h, w, c = in_shape
    f, d = spec.f, spec.delta
    acc = np.zeros((n, h, w, c), dtype=np.float64)
    for i in range(f):
        for j in range(f):
            blk = (i * f + j) * c
            acc[:, i:i + oh * d:d, j:j + ow * d:d, :] += g_out[:, :, :, blk:blk + c]
    return acc


def overlap_counts(spec: FoldSpec, in_shape: Shape3) -> np.ndarray:
    """J per source position: how many folded outputs read it."""
    h, w, _ = in_shape
    oh = 1 + (h - spec.f) // spec.delta
    ow = 1 + (w - spec.f) // spec.delta
    count = np.zeros((h, w), dtype=np.int64)
    for i in range(spec.f):
        for j in range(spec.f):
            count[i:i + oh * spec.delta:spec.delta,
                  j:j + ow * spec.delta:spec.delta] += 1
    return count


# ------------------------------------------------------------------ pooling

def pooling_forward(spec: PoolSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise window max plus argmax window-cell indices.

    Ties break toward the lowest flat source index (row-major window scan).
    Returns (pooled (N, Ho, Wo, C) float32, argmax (N, Ho, Wo, C) int32 with
    values i*f + j identifying the winning window cell).
    """
    n, h, w, c = x.shape
    oh, ow, _ = output_shape(spec, Shape3(h, w, c))
    f, d = spec.f, spec.delta
    stack = np.empty((f * f, n, oh, ow, c), dtype=x.dtype)
    for i in range(f):
        for j in range(f):
            stack[i * f + j] = x[:, i:i + oh * d:d, j:j + ow * d:d, :]
    arg = np.argmax(stack, axis=0).astype(np.int32)
    return np.max(stack, axis=0), arg


def pooling_backward(spec: PoolSpec, t: np.ndarray, in_shape: Shape3) -> np.ndarray:
    """Nearest-neighbor upsampling of the control signal over each window."""
    if spec.f != spec.delta:
        raise ConfigError("backwards mode requires non-overlapping pooling (f == stride)")
    n, oh, ow, c = t.shape
    h, w, _ = in_shape
    f = spec.f
    out = np.zeros((n, h, w, c), dtype=np.float32)
    out[:, :oh * f, :ow * f, :] = np.repeat(np.repeat(t, f, axis=1), f, axis=2)
    return out


def pooling_input_gradient(spec: PoolSpec, g_out: np.ndarray, argmax: np.ndarray,
                           in_shape: Shape3) -> np.ndarray:
    """Subgradient of window max: route each output gradient to its argmax cell."""
    n, oh, ow, c = g_out.shape
    h, w, _ = in_shape
    f, d = spec.f, spec.delta
    acc = np.zeros((n, h, w, c), dtype=np.float64)
    for cell in range(f * f):
        i, j = divmod(cell, f)
        mask = argmax == cell
        view = acc[:, i:i + oh * d:d, j:j + ow * d:d, :]
        view += np.where(mask, g_out, 0.0)
    return acc


# --------------------------------------------------------------------- cGMM

_uniform_fallbacks = 0


def uniform_fallback_count() -> int:
    """Positions whose backward control was entirely <= 0 since the last reset."""
    return _uniform_fallbacks


def reset_uniform_fallback_count() -> None:
    global _uniform_fallbacks
    _uniform_fallbacks = 0


def cgmm_forward(params: mx.CGMMParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior activities and per-position max-component log-likelihood.

    ``x`` is (N, H, W, D); returns (activities (N, H, W, K) float32,
    log-likelihood (N, H, W, 1)).  The likelihood channel stays float64 so
    the layer loss reduction keeps full accumulator precision.
    """
    if x.ndim != 4:
        raise ConfigError(f"cGMM input must be 4-D NHWC, got {x.shape}")
    if x.shape[-1] != params.d:
        raise ConfigError(f"cGMM input channels {x.shape[-1]} != parameter dim {params.d}")
    joint = mx._log_joint(params, x)
    act = mx._posteriors_from_joint(joint).astype(np.float32)
    ll = np.max(joint, axis=-1)[..., None]
    return act, ll


def cgmm_backward(params: mx.CGMMParams, control: np.ndarray | None,
                  rng: np.random.Generator, batch: int | None = None,
                  positions: tuple[int, int] | None = None,
                  variance_scale: float = 1.0) -> np.ndarray:
    """Sample a control signal for the layer below.

    Per position, negative control entries are clipped to zero and the
    vector renormalized before the multinomial draw; positions with no
    positive entry fall back to a uniform draw (counted, warned).  Absent
    control means uniform everywhere (topmost layer).
    """
    global _uniform_fallbacks
    k, d = params.k, params.d
    if control is not None:
        if control.ndim != 4 or control.shape[-1] != k:
            raise ConfigError(f"control must be (N, H, W, {k}), got "
                              f"{getattr(control, 'shape', None)}")
        n, hh, ww, _ = control.shape
        if params.independent and (hh, ww) != params.positions:
            raise ConfigError(f"control positions {(hh, ww)} != parameter grid "
                              f"{params.positions}")
        c = np.maximum(np.asarray(control, dtype=np.float64), 0.0)
        cf = c.reshape(-1, k)
        sums = cf.sum(axis=1)
        dead = sums <= 0.0
        n_dead = int(np.count_nonzero(dead))
        if n_dead:
            _uniform_fallbacks += n_dead
            log.warning("cGMM backward: %d positions had no positive control; "
                        "using uniform draws there", n_dead)
            cf[dead] = 1.0
            sums[dead] = float(k)
        probs = cf / sums[:, None]
    else:
        if params.independent:
            hh, ww = params.positions
        elif positions is not None:
            hh, ww = positions
        else:
            raise ConfigError("cgmm_backward without control needs target positions")
        if batch is None:
            raise ConfigError("cgmm_backward without control needs a batch size")
        n = batch
        probs = np.full((n * hh * ww, k), 1.0 / k, dtype=np.float64)

    m = probs.shape[0]
    z = mx._categorical_draw(probs, rng)
    mu = params.mu.astype(np.float64)
    prec = mx.softplus(params.prec_raw)
    if params.independent:
        pos = np.tile(np.arange(hh * ww), n)
        mu_rows = mu.reshape(-1, k, d)[pos, z]
        prec_rows = prec.reshape(-1, k, d)[pos, z]
    else:
        mu_rows = mu[z]
        prec_rows = prec[z]
    draws = mx._gaussian_rows(mu_rows, prec_rows, rng, variance_scale)
    return draws.reshape(n, hh, ww, d)


def cgmm_input_gradient(params: mx.CGMMParams, x: np.ndarray) -> np.ndarray:
    """Gradient of the per-position max-component log-likelihood w.r.t. x."""
    return mx.input_gradient(params, x)


# --------------------------------------------------------------- classifier

def init_classifier_params(d_in: int, s: int) -> ClassifierParams:
    return ClassifierParams(np.zeros((d_in, s), dtype=np.float32),
                            np.zeros(s, dtype=np.float32))


def classifier_forward(params: ClassifierParams, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities from flattened input activities."""
    n = x.shape[0]
    flat = x.reshape(n, -1).astype(np.float64)
    if flat.shape[1] != params.w.shape[0]:
        raise ConfigError(f"classifier input size {flat.shape[1]} != weight rows "
                          f"{params.w.shape[0]}")
    logits = flat @ params.w.astype(np.float64) + params.b.astype(np.float64)
    return np.exp(mx.log_softmax(logits)).astype(np.float32)


def classifier_backward(params: ClassifierParams, t: np.ndarray,
                        in_shape: Shape3) -> np.ndarray:
    """Approximate inversion of the classifier for backwards sampling.

    ``t`` holds one probability vector over S per sample (one-hot, possibly
    label-smoothed).  Entries are floored at EPS_LOG inside the log; a
    per-sample constant shifts the projected vector so its minimum entry is
    exactly EPS_POS, keeping the control signal strictly positive.
    """
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if t.shape[1] != params.s:
        raise ConfigError(f"control length {t.shape[1]} != class count {params.s}")
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-3):
        raise ValueError("classifier control rows must sum to 1 within 1e-3")
    y = (np.log(np.maximum(t, EPS_LOG)) - params.b.astype(np.float64)) \
        @ params.w.astype(np.float64).T
    c = -np.min(y, axis=1, keepdims=True) + EPS_POS
    out = y + c
    n = t.shape[0]
    return out.reshape(n, *in_shape).astype(np.float32)


def classifier_gradients(params: ClassifierParams, x: np.ndarray,
                         labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean cross-entropy gradients (descent direction) for (w, b)."""
    n = x.shape[0]
    flat = x.reshape(n, -1).astype(np.float64)
    probs = classifier_forward(params, x).astype(np.float64)
    probs[np.arange(n), labels] -= 1.0
    return flat.T @ probs / n, probs.mean(axis=0)
