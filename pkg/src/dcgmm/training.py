"""Mini-batch SGD over all trainable layers in parallel.

Every cGMM layer ascends its own max-component log-likelihood from the
shared forward pass; no gradient crosses layer boundaries.  Layer L
(counting cGMM layers from the bottom, 1-based) stays frozen until a
fraction delta(L) = 0.1*L of the total optimizer steps has elapsed, so
lower layers see stable inputs first.  A classifier, when present,
descends its own cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as ly
from . import mixture as mx
from . import model as mg
from .tensor import ConfigError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    """Optimization constants; the learning rates are package defaults, not
    externally prescribed values, and are deliberately exposed here."""

    epochs: int = 10
    batch_size: int = 100
    lr_mu: float = 0.011
    lr_logits: float = 0.0011
    lr_prec: float = 0.0011
    lr_classifier: float = 0.01
    delays: dict[int, float] = field(default_factory=dict)  # cGMM ordinal -> fraction
    classifier_delay: float | None = None
    train_weights: bool = True
    train_precisions: bool = True
    data_init: bool = True
    seed: int = 0
    eval_every: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for L, d in self.delays.items():
            if not 0.0 <= d < 1.0:
                raise ConfigError(f"delay for cGMM layer {L} must be in [0, 1), got {d}")

    def delay(self, ordinal: int) -> float:
        return self.delays.get(ordinal, 0.1 * ordinal)


@dataclass
class TrainLog:
    """Per-step losses plus where each layer started adapting."""

    train_records: list[tuple[int, int, float]] = field(default_factory=list)
    holdout_records: list[tuple[int, int, float]] = field(default_factory=list)
    classifier_accuracy: list[tuple[int, float]] = field(default_factory=list)
    activation_steps: dict[int, int] = field(default_factory=dict)  # ordinal -> step
    total_steps: int = 0

    def holdout_loss_at(self, ordinal: int, step: int) -> float:
        for s, o, loss in self.holdout_records:
            if s == step and o == ordinal:
                return loss
        raise KeyError(f"no holdout record for layer {ordinal} at step {step}")

    def to_csv(self, path, split: str = "train") -> None:
        records = self.train_records if split == "train" else self.holdout_records
        with open(path, "w") as fh:
            fh.write("step,layer,loss\n")
            for step, ordinal, loss in records:
                fh.write(f"{step},{ordinal},{loss!r}\n")


def activation_step(delay: float, total_steps: int) -> int:
    """First optimizer step (0-based) at which a delayed layer updates."""
    return int(math.ceil(delay * total_steps - 1e-12))


def _weighted_rows(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k rows of x, the first uniform, the rest distance-weighted (k-means++)."""
    chosen = [x[rng.integers(len(x))]]
    for _ in range(k - 1):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in chosen], axis=0)
        total = d2.sum()
        if total <= 0:
            chosen.append(x[rng.integers(len(x))])
        else:
            chosen.append(x[np.searchsorted(np.cumsum(d2 / total), rng.random())])
    return np.array(chosen, dtype=np.float64)


# Ceiling on moment-seeded precisions.  Near-constant dimensions would
# otherwise seed precisions in the thousands, whose curvature destabilizes
# gradient sharpening at the canonical step size; SGD may still exceed this
# ceiling later through regular updates.
PREC_SEED_MAX = 100.0


def _moment_seed(mu0: np.ndarray, xf: np.ndarray, k: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded centroids and moment-matched precision pre-images for one grid cell."""
    seeds = _weighted_rows(xf, k, rng)
    mu = mu0 + seeds
    d2 = np.sum((xf[:, None, :] - mu[None]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    var_floor = 1.0 / PREC_SEED_MAX
    var = np.tile(np.maximum(xf.var(axis=0), var_floor), (k, 1))
    for j in range(k):
        rows = xf[assign == j]
        if len(rows) >= 2:
            var[j] = np.maximum(rows.var(axis=0), var_floor)
    raw = mx.clip_prec_raw(mx.inv_softplus(1.0 / var))
    return mu, raw


def seed_params_from_batch(params: mx.CGMMParams, x: np.ndarray,
                           rng: np.random.Generator) -> None:
    """Move centroids onto distance-weighted batch rows and moment-match the
    precisions to one hard assignment of that batch.

    Hard-assignment SGD from the near-zero start leaves components dead when
    the data sits in one initial Voronoi cell, and the argmax-gated precision
    gradient is far too slow to leave unit precision within a desk-scale step
    budget.  Seeding both from the layer's first adapted batch removes those
    failure modes; the original tiny jitter stays as the random component,
    and SGD optimizes freely afterwards.
    """
    if params.independent:
        hh, ww = params.positions
        xp = np.asarray(x, dtype=np.float64).reshape(x.shape[0], hh * ww, params.d)
        mu = params.mu.astype(np.float64).reshape(hh * ww, params.k, params.d)
        raw = np.empty_like(mu)
        for p in range(hh * ww):
            mu[p], raw[p] = _moment_seed(mu[p], xp[:, p, :], params.k, rng)
        params.mu = mu.reshape(params.mu.shape).astype(np.float32)
        params.prec_raw = raw.reshape(params.prec_raw.shape).astype(np.float32)
    else:
        xf = np.asarray(x, dtype=np.float64).reshape(-1, params.d)
        mu, raw = _moment_seed(params.mu.astype(np.float64), xf, params.k, rng)
        params.mu = mu.astype(np.float32)
        params.prec_raw = raw.astype(np.float32)


def _update_cgmm(params: mx.CGMMParams, grads: mx.CGMMGradients,
                 schedule: TrainSchedule) -> None:
    params.mu = (params.mu.astype(np.float64)
                 + schedule.lr_mu * grads.mu).astype(np.float32)
    if schedule.train_weights:
        params.logits = (params.logits.astype(np.float64)
                         + schedule.lr_logits * grads.logits).astype(np.float32)
    if schedule.train_precisions:
        raw = params.prec_raw.astype(np.float64) + schedule.lr_prec * grads.prec_raw
        params.prec_raw = mx.clip_prec_raw(raw).astype(np.float32)


def per_sample_losses(model: mg.DcgmmModel, images: np.ndarray,
                      batch_size: int = 500) -> dict[int, np.ndarray]:
    """Per-sample loss of every cGMM layer over a whole dataset, chunked."""
    n = images.shape[0]
    out = {i: np.empty(n, dtype=np.float64) for i in model.cgmm_indices}
    for start in range(0, n, batch_size):
        trace = mg.forward(model, images[start:start + batch_size])
        for i, loss in trace.losses.items():
            out[i][start:start + len(loss)] = loss
    return out


def evaluate_losses(model: mg.DcgmmModel, images: np.ndarray,
                    batch_size: int = 500) -> dict[int, float]:
    """Mean per-sample loss of every cGMM layer, keyed by layer index."""
    per = per_sample_losses(model, images, batch_size)
    return {i: float(v.mean()) for i, v in per.items()}


def train(model: mg.DcgmmModel, dataset, schedule: TrainSchedule,
          holdout=None, snapshot_path=None) -> tuple[mg.DcgmmModel, TrainLog]:
    """Optimize the model in place; returns it with the training log.

    ``dataset`` (and optional ``holdout``) expose ``.images`` (N, H, W, C)
    and ``.labels``; plain arrays work for unlabeled data.  On a non-finite
    loss the run aborts with a NumericalError after writing a diagnostic
    snapshot to ``snapshot_path`` when given.
    """
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    labels = getattr(dataset, "labels", None)
    if images.shape[1:] != tuple(model.config.input_shape):
        raise ConfigError(f"dataset sample shape {images.shape[1:]} != model input "
                          f"{tuple(model.config.input_shape)}")
    n = images.shape[0]
    steps_per_epoch = n // schedule.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(f"batch size {schedule.batch_size} exceeds dataset size {n}")
    total_steps = schedule.epochs * steps_per_epoch

    gmm_layers = model.cgmm_indices
    starts = {i: activation_step(schedule.delay(model.cgmm_ordinal(i)), total_steps)
              for i in gmm_layers}
    ci = model.classifier_index
    if ci is not None:
        cdelay = (schedule.classifier_delay if schedule.classifier_delay is not None
                  else 0.1 * (len(gmm_layers) + 1))
        cls_start = activation_step(cdelay, total_steps)

    lg = TrainLog(total_steps=total_steps)
    lg.activation_steps = {model.cgmm_ordinal(i): s for i, s in starts.items()}

    eval_points = {0, total_steps} | set(starts.values())
    if schedule.eval_every:
        eval_points |= set(range(0, total_steps, schedule.eval_every))

    hold_images = None
    if holdout is not None:
        hold_images = holdout.images if hasattr(holdout, "images") else np.asarray(holdout)
        hold_labels = getattr(holdout, "labels", None)

    def eval_holdout(step):
        if hold_images is None:
            return
        for i, loss in evaluate_losses(model, hold_images).items():
            lg.holdout_records.append((step, model.cgmm_ordinal(i), loss))

    rng = np.random.default_rng(schedule.seed)
    step = 0
    try:
        for epoch in range(schedule.epochs):
            perm = rng.permutation(n)
            for b in range(steps_per_epoch):
                if step in eval_points:
                    eval_holdout(step)
                idx = perm[b * schedule.batch_size:(b + 1) * schedule.batch_size]
                batch = images[idx]
                trace = mg.forward(model, batch)
                for i in gmm_layers:
                    loss = float(trace.losses[i].mean())
                    if not math.isfinite(loss):
                        raise NumericalError(f"non-finite loss in layer {i} at step {step}")
                    lg.train_records.append((step, model.cgmm_ordinal(i), loss))
                    if step >= starts[i]:
                        if schedule.data_init and model.steps_seen[i] == 0:
                            seed_params_from_batch(model.params[i],
                                                   trace.activities[i], rng)
                        grads = mx.loss_gradients(model.params[i], trace.activities[i])
                        _update_cgmm(model.params[i], grads, schedule)
                        model.steps_seen[i] += 1
                if ci is not None and labels is not None and step >= cls_start:
                    gw, gb = ly.classifier_gradients(model.params[ci],
                                                     trace.activities[ci], labels[idx])
                    p = model.params[ci]
                    p.w = (p.w.astype(np.float64)
                           - schedule.lr_classifier * gw).astype(np.float32)
                    p.b = (p.b.astype(np.float64)
                           - schedule.lr_classifier * gb).astype(np.float32)
                    model.steps_seen[ci] += 1
                step += 1
            if ci is not None and hold_images is not None and hold_labels is not None:
                probs = _predict(model, hold_images)
                acc = float(np.mean(np.argmax(probs, axis=1) == hold_labels))
                lg.classifier_accuracy.append((epoch, acc))
    except NumericalError:
        if snapshot_path is not None:
            mg.save(model, snapshot_path)
            log.error("numerical abort; diagnostic snapshot written to %s", snapshot_path)
        raise
    eval_holdout(total_steps)
    return model, lg


def _predict(model: mg.DcgmmModel, images: np.ndarray,
             batch_size: int = 500) -> np.ndarray:
    probs = []
    for start in range(0, images.shape[0], batch_size):
        trace = mg.forward(model, images[start:start + batch_size])
        probs.append(trace.class_probs)
    return np.concatenate(probs, axis=0)
