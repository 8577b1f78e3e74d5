"""Finite-difference verification of every analytic gradient in the pipeline:
the convolution kernels, the closed-form DCF backward, and the full
cross-input training objective end to end.
"""

from __future__ import annotations

import os

import numpy as np

from .dcf import cf_backward, dcf_forward, gaussian_label
from .features import ModelConfig, cosine_window
from .numkit import ConvKernel, conv2d_backward, conv2d_forward, finite_difference_grad
from .selfsup import (
    TrainingPair,
    _sample_loss_and_grads,
    build_params,
    compute_drop_masks,
    flat_params,
    normalize_weights,
    sample_difference,
    weighted_loss,
)

# Geometry seed chosen so the L1 objective stays away from |ra - rb| = 0
# ties, where central differences are meaningless.
DEFAULT_SEED = 29
TOLERANCE = 1e-4


def _maybe_negate(g: np.ndarray) -> np.ndarray:
    # test hook: corrupt the analytic gradients to prove the check can fail
    if os.environ.get("XIC_GRADCHECK_NEGATE"):
        return -g
    return g


def check_conv(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c_in, c_out, h, w in [(1, 2, 4, 4), (3, 2, 6, 5), (2, 4, 8, 8)]:
        x = rng.standard_normal((c_in, h, w))
        kern = ConvKernel(rng.standard_normal((c_out, c_in, 3, 3)),
                          rng.standard_normal(c_out))
        g_out = rng.standard_normal((c_out, h, w))
        g_in, g_kern = conv2d_backward(g_out, x, kern)
        g_in = _maybe_negate(g_in)

        def loss_x(v):
            return float((g_out * conv2d_forward(v.reshape(c_in, h, w), kern)).sum())

        def loss_w(v):
            k2 = ConvKernel(v.reshape(kern.weights.shape), kern.bias)
            return float((g_out * conv2d_forward(x, k2)).sum())

        fd_in = finite_difference_grad(loss_x, x.ravel().copy(), 1e-6)
        fd_w = finite_difference_grad(loss_w, kern.weights.ravel().copy(), 1e-6)
        worst = max(worst, _rel(g_in.ravel(), fd_in))
        worst = max(worst, _rel(_maybe_negate(g_kern.weights).ravel(), fd_w))
    return worst


def check_dcf(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c, h, w in [(1, 6, 6), (2, 4, 4), (4, 8, 8)]:
        tf = rng.standard_normal((c, h, w))
        sf = rng.standard_normal((c, h, w))
        lab = rng.random((h, w))
        g_r = rng.standard_normal((h, w))
        _, cache = dcf_forward(tf, lab, sf, 1.0)
        gt, gs, gl = cf_backward(g_r, cache)

        def make_loss(which):
            def loss(v):
                a = v.reshape(tf.shape) if which != "label" else v.reshape(lab.shape)
                args = {
                    "template": (a, lab, sf),
                    "search": (tf, lab, a),
                    "label": (tf, a, sf),
                }[which]
                r, _ = dcf_forward(*args, 1.0)
                return float((g_r * r).sum())
            return loss

        for which, g, p in [("template", gt, tf), ("search", gs, sf), ("label", gl, lab)]:
            fd = finite_difference_grad(make_loss(which), p.ravel().copy(), 1e-6)
            worst = max(worst, _rel(_maybe_negate(g).ravel(), fd))
    return worst


def check_end_to_end(size: int = 16, channels: int = 8, batch: int = 2,
                     seed: int = DEFAULT_SEED, coords_per_tensor: int | None = None,
                     variant: str = "xic2") -> float:
    """FD check of dL_final/dtheta for every conv parameter of every branch."""
    cfg = ModelConfig(patch_size=size, feature_channels=channels)
    rng = np.random.default_rng(seed)
    # unscaled weights keep the loss surface well conditioned for the
    # finite-difference step; gradient correctness is scale-independent
    params = build_params(cfg, seed + 100, init_scale=1.0)
    three = variant in ("xic3", "cycle3")
    pairs = []
    for _ in range(batch):
        kw = {}
        if three:
            kw = dict(extra_rgb=rng.random((3, size, size)),
                      extra_t=rng.random((1, size, size)))
        pairs.append(TrainingPair(rng.random((3, size, size)), rng.random((3, size, size)),
                                  rng.random((1, size, size)), rng.random((1, size, size)), **kw))
    n = len(pairs)
    d = np.array([sample_difference(p.template_rgb, p.search_rgb) for p in pairs])
    nm, bm = compute_drop_masks(d, 0.0, 0.25)
    d_norm = normalize_weights(nm, bm)
    window = cosine_window(size, size)
    label = gaussian_label(size, size, cfg.sigma, (size // 2, size // 2))
    fp = flat_params(params)
    grads = {k: np.zeros_like(v) for k, v in fp.items()}
    for i, pair in enumerate(pairs):
        _sample_loss_and_grads(pair, params, cfg, window, label, variant,
                               d_norm[i] / n, grads, np.float64)

    def total_loss() -> float:
        ls = [_sample_loss_and_grads(p, params, cfg, window, label, variant,
                                     0.0, None, np.float64)[0] for p in pairs]
        return weighted_loss(ls, d_norm)

    worst = 0.0
    step = 1e-6
    for name, arr in fp.items():
        flat = arr.ravel()
        gflat = _maybe_negate(grads[name]).ravel()
        if coords_per_tensor is None:
            idx = range(flat.size)
        else:
            idx = rng.choice(flat.size, size=min(coords_per_tensor, flat.size),
                             replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            hi = total_loss()
            flat[k] = orig - step
            lo = total_loss()
            flat[k] = orig
            fd = (hi - lo) / (2.0 * step)
            scale = max(abs(fd), abs(gflat[k]), 1e-8)
            worst = max(worst, abs(gflat[k] - fd) / scale)
    return worst


def _rel(g: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.abs(fd).max()), float(np.abs(g).max()), 1e-10)
    return float(np.abs(g - fd).max()) / scale


def run_all(size: int = 16, channels: int = 8, batch: int = 2,
            coords_per_tensor: int | None = None) -> dict[str, float]:
    return {
        "conv2d": check_conv(),
        "dcf": check_dcf(),
        "end_to_end": check_end_to_end(size, channels, batch,
                                       coords_per_tensor=coords_per_tensor),
    }
