"""Outlier detection curves, an EM reference fit, and centroid export.

Outliers are detected by thresholding a cGMM layer's per-sample loss:
inliers score high under the trained model.  Sweeping the threshold over
all observed scores yields a curve of kept-inlier fraction against
rejected-outlier fraction whose area quantifies separability.

The EM fit is an independent reference implementation (classic
expectation-maximization with diagonal covariances) used to cross-check
SGD training; it deliberately shares no code with the SGD path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import mixture as mx
from . import layers as ly
from . import model as mg
from .tensor import ConfigError, DataError
from .training import per_sample_losses

log = logging.getLogger(__name__)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    kept_inlier: np.ndarray
    rejected_outlier: np.ndarray
    auc: float

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("threshold,kept_inlier,rejected_outlier\n")
            for t, k, r in zip(self.thresholds, self.kept_inlier, self.rejected_outlier):
                fh.write(f"{t!r},{k!r},{r!r}\n")


@dataclass
class AlphabetSheet:
    """Centroids of a cGMM layer, un-folded to their source patch geometry."""

    patches: np.ndarray  # (K, f, f, C)
    f: int
    channels: int


def roc_from_scores(inlier_scores: np.ndarray, outlier_scores: np.ndarray) -> RocCurve:
    """Threshold sweep over all distinct scores plus open endpoints.

    A sample is kept when its score >= threshold, so inliers should score
    higher than outliers.  The AUC integrates kept-inlier over
    rejected-outlier by the trapezoid rule.
    """
    s_in = np.asarray(inlier_scores, dtype=np.float64)
    s_out = np.asarray(outlier_scores, dtype=np.float64)
    if s_in.size == 0 or s_out.size == 0:
        raise DataError("both inlier and outlier score sets must be non-empty")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([s_in, s_out])),
                                 [np.inf]])
    kept = np.array([np.mean(s_in >= t) for t in thresholds])
    rejected = np.array([np.mean(s_out < t) for t in thresholds])
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    auc = float(trapezoid(kept, rejected))
    return RocCurve(thresholds, kept, rejected, auc)


def outlier_roc(model: mg.DcgmmModel, layer_ordinal: int | None,
                inlier_images: np.ndarray, outlier_images: np.ndarray) -> RocCurve:
    """ROC-like curve from one cGMM layer's loss (default: the topmost)."""
    idx = (model.topmost_cgmm_index if layer_ordinal is None
           else model.cgmm_indices[layer_ordinal - 1])
    s_in = per_sample_losses(model, inlier_images)[idx]
    s_out = per_sample_losses(model, outlier_images)[idx]
    return roc_from_scores(s_in, s_out)


# ------------------------------------------------------------------- EM fit

def _log_densities(x, pi, mu, var):
    """(N, K) log pi_k + log N_k with diagonal covariances."""
    quad = np.sum((x[:, None, :] - mu[None]) ** 2 / var[None], axis=2)
    logdet = np.sum(np.log(var), axis=1)
    d = x.shape[1]
    return np.log(pi)[None] - 0.5 * (quad + logdet + d * np.log(2 * np.pi))


def _kmeans_pp_centers(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[np.searchsorted(np.cumsum(d2 / total), rng.random())])
    return np.array(centers)


def em_oracle(data: np.ndarray, k: int, iterations: int = 200,
              rng: np.random.Generator | None = None, tol: float = 1e-7) -> mx.CGMMParams:
    """Classic diagonal-covariance EM, k-means++ seeded, as a reference fit.

    Empty clusters are re-seeded from a random datum.  Variances are floored
    at 1/PREC_MAX, so degenerate fits surface as precisions at the clamp
    ceiling.  Returns shared-mode CGMMParams.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"EM expects (N, D) data, got {x.shape}")
    n, d = x.shape
    if n < k:
        raise ValueError(f"need at least {k} samples, got {n}")

    var_floor = 1.0 / mx.PREC_MAX
    mu = _kmeans_pp_centers(x, k, rng)
    var = np.tile(np.maximum(x.var(axis=0), var_floor), (k, 1))
    pi = np.full(k, 1.0 / k)
    prev_ll = -np.inf
    for _ in range(iterations):
        logp = _log_densities(x, pi, mu, var)
        m = logp.max(axis=1, keepdims=True)
        ll = float(np.sum(m.squeeze(1) + np.log(np.sum(np.exp(logp - m), axis=1))))
        resp = np.exp(logp - m)
        resp /= resp.sum(axis=1, keepdims=True)

        nk = resp.sum(axis=0)
        for j in np.flatnonzero(nk < 1e-10):
            seed = rng.integers(n)
            mu[j] = x[seed]
            var[j] = np.maximum(x.var(axis=0), var_floor)
            resp[:, j] = 1.0 / n
            nk = resp.sum(axis=0)
        pi = nk / nk.sum()
        mu = (resp.T @ x) / nk[:, None]
        var = (resp.T @ (x * x)) / nk[:, None] - mu ** 2
        var = np.maximum(var, var_floor)

        if abs(ll - prev_ll) < tol * (abs(prev_ll) + 1.0):
            break
        prev_ll = ll

    return mx.CGMMParams(np.log(np.maximum(pi, 1e-300)), mu,
                         mx.clip_prec_raw(mx.inv_softplus(1.0 / var)))


def match_centroids(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest max-row L2 distance between centroid sets over permutations."""
    from itertools import permutations

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    best = np.inf
    for perm in permutations(range(len(b))):
        d = np.linalg.norm(a - b[list(perm)], axis=1).max()
        best = min(best, d)
    return float(best)


# ---------------------------------------------------------------- alphabet

def export_alphabet(model: mg.DcgmmModel, layer_ordinal: int = 1) -> AlphabetSheet:
    """Un-fold one cGMM layer's centroids into their source image patches."""
    idx = model.cgmm_indices[layer_ordinal - 1]
    if idx == 0 or not isinstance(model.config.layers[idx - 1], ly.FoldSpec):
        raise ConfigError(f"cGMM layer {layer_ordinal} is not fed by a folding layer")
    fold = model.config.layers[idx - 1]
    c_in = model.in_shapes[idx - 1].c
    params = model.params[idx]
    if params.independent:
        raise ConfigError("alphabet export expects a shared-mode cGMM layer")
    k = params.k
    patches = np.zeros((k, fold.f, fold.f, c_in), dtype=np.float32)
    for c in range(params.d):
        hs, ws, cs = ly.folding_source_index(fold.f, fold.delta, c_in, (0, 0, c))
        patches[:, hs, ws, cs] = params.mu[:, c]
    return AlphabetSheet(patches, fold.f, c_in)
