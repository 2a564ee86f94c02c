"""Gaussian mixture math shared by every convolutional GMM layer.

Parameters use unconstrained storage: mixture weights live as softmax
logits and diagonal precisions as softplus pre-images, so plain SGD keeps
the simplex and positivity invariants for free.  All evaluation kernels
accept a trailing feature axis and vectorize over any leading axes; the
convolutional layers call them on (N, H, W, D) stacks and flat usage calls
them on (D,) vectors or (N, D) matrices, sharing one code path.

Arithmetic runs in float64 internally; parameters and activities are
stored float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

# Precision clamp applied by training updates and by the EM reference fit.
# Directly constructed parameters may exceed it (deterministic limits).
PREC_MIN = 1e-4
PREC_MAX = 1e6
RAW_PREC_MIN = float(np.log(np.expm1(PREC_MIN)))  # softplus pre-image of PREC_MIN
RAW_PREC_MAX = PREC_MAX  # softplus(x) ~ x for large x
RAW_UNIT_PRECISION = float(np.log(np.expm1(1.0)))  # pre-image of precision 1


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def inv_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inv_softplus requires strictly positive input")
    return y + np.log(-np.expm1(-y))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-x))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


@dataclass
class CGMMParams:
    """One convolutional GMM layer's parameters.

    Shared mode: ``logits`` (K,), ``mu`` and ``prec_raw`` (K, D).
    Independent mode: one triple per position, ``logits`` (H, W, K),
    ``mu`` and ``prec_raw`` (H, W, K, D).
    """

    logits: np.ndarray
    mu: np.ndarray
    prec_raw: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        self.mu = np.asarray(self.mu, dtype=np.float32)
        self.prec_raw = np.asarray(self.prec_raw, dtype=np.float32)
        if self.mu.shape != self.prec_raw.shape:
            raise ValueError("mu and prec_raw must have identical shapes")
        if self.logits.shape != self.mu.shape[:-1]:
            raise ValueError("logits shape must equal mu shape minus the feature axis")
        if self.logits.ndim not in (1, 3):
            raise ValueError("logits must be (K,) shared or (H, W, K) independent")

    @property
    def independent(self) -> bool:
        return self.logits.ndim == 3

    @property
    def k(self) -> int:
        return self.logits.shape[-1]

    @property
    def d(self) -> int:
        return self.mu.shape[-1]

    @property
    def positions(self) -> tuple[int, int] | None:
        return tuple(self.logits.shape[:2]) if self.independent else None

    @property
    def weights(self) -> np.ndarray:
        """Simplex mixture weights (softmax of the logits)."""
        return np.exp(log_softmax(self.logits))

    @property
    def precision(self) -> np.ndarray:
        """Strictly positive diagonal precisions (softplus of the pre-images)."""
        return softplus(self.prec_raw)

    def copy(self) -> "CGMMParams":
        return CGMMParams(self.logits.copy(), self.mu.copy(), self.prec_raw.copy())


@dataclass
class CGMMGradients:
    """Ascent gradients, aligned with the CGMMParams arrays."""

    logits: np.ndarray
    mu: np.ndarray
    prec_raw: np.ndarray


def init_cgmm_params(k: int, d: int, rng: np.random.Generator,
                     positions: tuple[int, int] | None = None) -> CGMMParams:
    """Random initial parameters: tiny centroids, flat weights, unit precision."""
    shape = (k, d) if positions is None else (*positions, k, d)
    mu = rng.uniform(-0.01, 0.01, size=shape).astype(np.float32)
    logits = np.zeros(shape[:-1], dtype=np.float32)
    prec_raw = np.full(shape, RAW_UNIT_PRECISION, dtype=np.float32)
    return CGMMParams(logits, mu, prec_raw)


def clip_prec_raw(raw: np.ndarray) -> np.ndarray:
    """Clamp precision pre-images so that precisions stay in [PREC_MIN, PREC_MAX]."""
    return np.clip(raw, RAW_PREC_MIN, RAW_PREC_MAX)


def _check_dim(params: CGMMParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError(f"input dimension {x.shape[-1]} != parameter dimension {params.d}")
    if params.independent:
        if x.ndim != 4 or x.shape[1:3] != params.positions:
            raise ValueError(
                f"independent-mode input must be (N, {params.positions[0]}, "
                f"{params.positions[1]}, D), got {x.shape}")
    return x


def component_log_density(params: CGMMParams, x: np.ndarray) -> np.ndarray:
    """Per-component diagonal Gaussian log densities.

    ``x`` has shape (..., D); the result appends a component axis, (..., K).
    """
    x = _check_dim(params, x)
    p = softplus(params.prec_raw)
    mu = params.mu.astype(np.float64)
    logdet = np.sum(np.log(p), axis=-1)  # sum_d log p_{k,d}
    if params.independent:
        quad = (np.einsum('nhwd,hwkd->nhwk', x * x, p)
                - 2.0 * np.einsum('nhwd,hwkd->nhwk', x, p * mu)
                + np.sum(p * mu * mu, axis=-1)[None])
        return -0.5 * (quad - logdet[None] + params.d * LOG_2PI)
    lead = x.shape[:-1]
    xf = x.reshape(-1, params.d)
    quad = (xf * xf) @ p.T - 2.0 * (xf @ (p * mu).T) + np.sum(p * mu * mu, axis=-1)
    out = -0.5 * (quad - logdet + params.d * LOG_2PI)
    return out.reshape(*lead, params.k)


def _log_joint(params: CGMMParams, x: np.ndarray) -> np.ndarray:
    """log pi_k + log N_k(x), shape (..., K)."""
    logw = log_softmax(params.logits)
    logn = component_log_density(params, x)
    if params.independent:
        return logn + logw[None]
    return logn + logw


def _posteriors_from_joint(joint: np.ndarray) -> np.ndarray:
    shifted = joint - np.max(joint, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def responsibilities(params: CGMMParams, x: np.ndarray) -> np.ndarray:
    """Component posteriors gamma_k(x), normalized in the log domain."""
    return _posteriors_from_joint(_log_joint(params, x))


def max_component_log_likelihood(params: CGMMParams, x: np.ndarray) -> np.ndarray | float:
    """log max_k pi_k N_k(x); a lower bound on the full log-likelihood."""
    out = np.max(_log_joint(params, x), axis=-1)
    return float(out) if out.ndim == 0 else out


def full_log_likelihood(params: CGMMParams, x: np.ndarray) -> np.ndarray | float:
    """log sum_k pi_k N_k(x) via max-shift."""
    joint = _log_joint(params, x)
    m = np.max(joint, axis=-1, keepdims=True)
    out = np.squeeze(m, -1) + np.log(np.sum(np.exp(joint - m), axis=-1))
    return float(out) if out.ndim == 0 else out


def loss_gradients(params: CGMMParams, x: np.ndarray) -> CGMMGradients:
    """Ascent gradients of the mean max-component log-likelihood.

    For a single (D,) vector this is the per-sample gradient; for batched
    input the gradients are averaged over all leading axes (over the batch
    only, per position, in independent mode).  Only the winning component
    of each input receives centroid/precision gradient; the logit gradient
    is one-hot(k*) minus the current softmax.
    """
    x = _check_dim(params, x)
    if params.independent:
        return _loss_gradients_independent(params, x)

    k, d = params.k, params.d
    xf = x.reshape(-1, d)
    m = xf.shape[0]
    joint = _log_joint(params, xf)
    kstar = np.argmax(joint, axis=-1)

    counts = np.bincount(kstar, minlength=k).astype(np.float64)
    g_logits = counts / m - np.exp(log_softmax(params.logits))

    p = softplus(params.prec_raw)
    mu = params.mu.astype(np.float64)
    diff = xf - mu[kstar]
    onehot = np.zeros((m, k))
    onehot[np.arange(m), kstar] = 1.0
    g_mu = p * (onehot.T @ diff) / m
    g_p = (-0.5 * (onehot.T @ (diff * diff)) + counts[:, None] * (0.5 / p)) / m
    g_raw = g_p * sigmoid(params.prec_raw)
    return CGMMGradients(g_logits, g_mu, g_raw)


def _loss_gradients_independent(params: CGMMParams, x: np.ndarray) -> CGMMGradients:
    hh, ww = params.positions
    k, d = params.k, params.d
    n = x.shape[0]
    pcount = hh * ww

    joint = _log_joint(params, x)  # (N, H, W, K)
    kstar = np.argmax(joint, axis=-1)  # (N, H, W)

    xf = x.reshape(n, pcount, d)
    pos = np.tile(np.arange(pcount), n)
    flat_idx = pos * k + kstar.reshape(-1)

    counts = np.bincount(flat_idx, minlength=pcount * k).astype(np.float64)
    counts = counts.reshape(hh, ww, k)
    g_logits = counts / n - np.exp(log_softmax(params.logits))

    p = softplus(params.prec_raw)
    mu = params.mu.astype(np.float64)
    rows = xf.reshape(-1, d)
    sx = np.zeros((pcount * k, d))
    np.add.at(sx, flat_idx, rows)
    sx2 = np.zeros((pcount * k, d))
    np.add.at(sx2, flat_idx, rows * rows)
    sx = sx.reshape(hh, ww, k, d)
    sx2 = sx2.reshape(hh, ww, k, d)
    cnt = counts[..., None]

    g_mu = p * (sx - cnt * mu) / n
    g_p = (-0.5 * (sx2 - 2.0 * mu * sx + cnt * mu * mu) + cnt * (0.5 / p)) / n
    g_raw = g_p * sigmoid(params.prec_raw)
    return CGMMGradients(g_logits, g_mu, g_raw)


def input_gradient(params: CGMMParams, x: np.ndarray) -> np.ndarray:
    """Gradient of log max_k pi_k N_k(x) with respect to x itself.

    Equals p_{k*} * (mu_{k*} - x) for the winning component; shape matches x.
    """
    x = _check_dim(params, x)
    joint = _log_joint(params, x)
    kstar = np.argmax(joint, axis=-1)
    p = softplus(params.prec_raw)
    mu = params.mu.astype(np.float64)
    if params.independent:
        hh, ww = params.positions
        hi, wi = np.meshgrid(np.arange(hh), np.arange(ww), indexing='ij')
        pw = p[hi, wi, kstar]  # (N, H, W, D) via broadcast of position grids
        muw = mu[hi, wi, kstar]
    else:
        pw = p[kstar]
        muw = mu[kstar]
    return pw * (muw - x)


def _categorical_draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One component index per row of ``probs`` (rows sum to 1), via inverse CDF.

    Zero-probability components are never selected.
    """
    m, k = probs.shape
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((m, 1))
    return np.minimum(np.sum(cdf <= u, axis=1), k - 1)


def _gaussian_rows(mu_rows: np.ndarray, prec_rows: np.ndarray,
                   rng: np.random.Generator, variance_scale: float = 1.0) -> np.ndarray:
    """Diagonal Gaussian draws, one per row of already-gathered (M, D) params."""
    sigma = np.sqrt(variance_scale / prec_rows)
    noise = rng.standard_normal(size=sigma.shape)
    return (mu_rows + sigma * noise).astype(np.float32)


def sample_component(params: CGMMParams, control: np.ndarray, rng: np.random.Generator,
                     variance_scale: float = 1.0) -> np.ndarray:
    """Draw from the mixture under a non-negative control vector.

    The control is normalized to a simplex, a component index is drawn from
    the resulting multinomial, then a diagonal Gaussian sample of dimension
    D is returned.  Shared-mode params only; control shape (..., K) maps to
    output shape (..., D).  All-zero or negative control is a hard error.
    """
    if params.independent:
        raise ValueError("sample_component expects shared-mode parameters")
    c = np.asarray(control, dtype=np.float64)
    if c.shape[-1] != params.k:
        raise ValueError(f"control length {c.shape[-1]} != component count {params.k}")
    if np.any(c < 0):
        raise ValueError("control entries must be non-negative")
    lead = c.shape[:-1]
    cf = c.reshape(-1, params.k)
    sums = cf.sum(axis=1)
    if np.any(sums <= 0):
        raise ValueError("control must contain at least one positive entry")
    probs = cf / sums[:, None]
    mu = params.mu.astype(np.float64)
    p = softplus(params.prec_raw)
    z = _categorical_draw(probs, rng)
    draws = _gaussian_rows(mu[z], p[z], rng, variance_scale)
    return draws.reshape(*lead, params.d) if lead else draws[0]
