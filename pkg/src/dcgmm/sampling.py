"""Sampling orchestration: top-S control filtering, gradient sharpening of
folding-layer control signals, class-conditional sampling and in-painting.

Sharpening treats a folding layer's backwards control signal as free
variables and runs gradient ascent on the loss of a cGMM layer higher up
(by default the next one), forward-propagating through the intervening
deterministic layers only.  Because overlapping patches are redundant,
this recovers statistics destroyed by non-invertible transforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import layers as ly
from . import mixture as mx
from .tensor import ConfigError, Shape3

log = logging.getLogger(__name__)

# A boolean (H, W) grid; True marks known pixels that must be preserved.
InpaintMask = np.ndarray


@dataclass
class SharpenConfig:
    """Gradient-ascent settings for control-signal sharpening."""

    iterations: int = 300
    step_size: float = 1.0
    target_layer: int | None = None  # explicit layer index; default next cGMM above

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("sharpening iterations must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("sharpening step size must be > 0")


@dataclass
class SamplerConfig:
    top_s: int | None = None
    seed: int = 0
    variance_scale: float = 1.0

    def __post_init__(self):
        if self.top_s is not None and self.top_s < 1:
            raise ConfigError("top_s must be >= 1")
        if self.variance_scale <= 0:
            raise ConfigError("variance_scale must be > 0")


def top_s_filter(control: np.ndarray, s: int) -> np.ndarray:
    """Keep the S largest entries along the last axis, renormalized to sum 1.

    Ties break toward the lower index.  Rows without any positive entry are
    returned all-zero (the consuming cGMM layer falls back to uniform).
    """
    c = np.asarray(control, dtype=np.float64)
    k = c.shape[-1]
    if not 1 <= s <= k:
        raise ConfigError(f"top_s must be in [1, {k}], got {s}")
    order = np.argsort(-c, axis=-1, kind="stable")
    keep = np.zeros(c.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :s], True, axis=-1)
    filtered = np.where(keep, c, 0.0)
    sums = filtered.sum(axis=-1, keepdims=True)
    out = np.divide(filtered, sums, out=np.zeros_like(filtered), where=sums > 0)
    return out.astype(np.asarray(control).dtype)


def _sharpen_span(model, fold_index: int, cfg: SharpenConfig) -> int:
    """Target cGMM layer index for sharpening at ``fold_index``."""
    specs = model.config.layers
    if cfg.target_layer is not None:
        target = cfg.target_layer
        if not (fold_index < target < len(specs)) or not isinstance(specs[target], ly.GmmSpec):
            raise ConfigError(f"sharpening target {target} is not a cGMM layer above "
                              f"folding layer {fold_index}")
    else:
        above = [i for i in range(fold_index + 1, len(specs))
                 if isinstance(specs[i], ly.GmmSpec)]
        if not above:
            raise ConfigError(f"no cGMM layer above folding layer {fold_index}")
        target = above[0]
    for i in range(fold_index + 1, target):
        if not isinstance(specs[i], (ly.FoldSpec, ly.PoolSpec)):
            raise ConfigError(f"sharpening chain crosses layer {i} "
                              f"({specs[i].token()}); only folding/pooling allowed")
    return target


def sharpening_loss_and_gradient(model, fold_index: int, x: np.ndarray,
                                 cfg: SharpenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample target losses and the gradient of their batch mean.

    Forward-propagates ``x`` from the folding layer input through the
    deterministic sub-chain to the target cGMM, whose loss is the mean over
    batch and positions of the max-component log-likelihood; the gradient
    chains back through pooling argmax routing and the folding gather
    transpose.  Ascent therefore maximizes the same scalar the training
    loop logs for the target layer.
    """
    target = _sharpen_span(model, fold_index, cfg)
    specs = model.config.layers
    a = np.asarray(x, dtype=np.float64)
    argmaxes = {}
    for i in range(fold_index, target):
        spec = specs[i]
        if isinstance(spec, ly.FoldSpec):
            a = ly.folding_forward(spec, a)
        else:
            a, argmaxes[i] = ly.pooling_forward(spec, a)
    params = model.params[target]
    ht, wt, _ = model.in_shapes[target]
    n = a.shape[0]
    loss = mx.max_component_log_likelihood(params, a).mean(axis=(1, 2))
    g = mx.input_gradient(params, a) / (ht * wt * n)
    for i in range(target - 1, fold_index - 1, -1):
        spec = specs[i]
        if isinstance(spec, ly.FoldSpec):
            g = ly.folding_input_gradient(spec, g, model.in_shapes[i])
        else:
            g = ly.pooling_input_gradient(spec, g, argmaxes[i], model.in_shapes[i])
    return loss, g


def sharpening_loss(model, fold_index: int, x: np.ndarray,
                    cfg: SharpenConfig | None = None) -> np.ndarray:
    cfg = cfg or SharpenConfig(iterations=0)
    loss, _ = sharpening_loss_and_gradient(model, fold_index, x, cfg)
    return loss


def sharpen(model, fold_index: int, t0: np.ndarray, cfg: SharpenConfig) -> np.ndarray:
    """Gradient-ascent refinement of a folding layer's backwards control."""
    if not isinstance(model.config.layers[fold_index], ly.FoldSpec):
        raise ConfigError(f"layer {fold_index} is not a folding layer")
    _sharpen_span(model, fold_index, cfg)
    x = np.asarray(t0, dtype=np.float64)
    for i in range(cfg.iterations):
        _, g = sharpening_loss_and_gradient(model, fold_index, x, cfg)
        step = x + cfg.step_size * g
        if not np.all(np.isfinite(step)):
            log.warning("sharpening stopped early at iteration %d: non-finite "
                        "gradient step", i)
            break
        x = step
    return x.astype(np.float32)


def sample(model, class_label: int | None = None, sampler: SamplerConfig | None = None,
           sharpen_cfg: SharpenConfig | None = None, n: int = 1) -> np.ndarray:
    """Generate ``n`` images by a full backwards pass.

    With ``class_label`` the model must end in a classifier; the label is
    inverted into a control signal.  Otherwise the topmost cGMM layer draws
    components uniformly.
    """
    from . import model as mg  # local import; model.py lazily uses this module

    sampler = sampler or SamplerConfig()
    rng = np.random.default_rng(sampler.seed)
    control = None
    if class_label is not None:
        ci = model.classifier_index
        if ci is None:
            raise ConfigError("class-conditional sampling needs a classifier layer")
        s = model.config.layers[ci].s
        if not 0 <= class_label < s:
            raise ConfigError(f"class index {class_label} out of range [0, {s})")
        control = np.zeros((n, s), dtype=np.float32)
        control[:, class_label] = 1.0
    return mg.backward(model, control=control, rng=rng, batch=n,
                       sampler=sampler, sharpen_cfg=sharpen_cfg)


def inpaint(model, images: np.ndarray, mask: InpaintMask,
            sampler: SamplerConfig | None = None,
            sharpen_cfg: SharpenConfig | None = None) -> np.ndarray:
    """Complete the unknown region of partially occluded images.

    Unknown pixels (mask False) are zero-filled, the batch is propagated
    forward to the topmost cGMM layer, and its activities steer a backwards
    pass; known pixels are passed through untouched.
    """
    from . import model as mg

    sampler = sampler or SamplerConfig()
    rng = np.random.default_rng(sampler.seed)
    images = np.asarray(images, dtype=np.float32)
    h, w, _ = model.config.input_shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ConfigError(f"mask shape {mask.shape} != input grid {(h, w)}")
    m4 = mask[None, :, :, None]
    filled = np.where(m4, images, np.float32(0.0))
    top = model.topmost_cgmm_index
    trace = mg.forward(model, filled)
    control = trace.activities[top + 1]
    generated = mg.backward(model, control=control, rng=rng, start_layer=top,
                            sampler=sampler, sharpen_cfg=sharpen_cfg)
    return np.where(m4, images, generated)
