"""Closed-form correlation filter learning and application in the Fourier
domain, plus the hand-derived backward pass through the closed form.

The filter is solved per frequency bin u and channel c as

    W[c,u] = X[c,u] * conj(Y[u]) / (sum_c' conj(X[c',u]) * X[c',u] + lambda)

with X the per-channel DFT of the template features and Y the DFT of the
Gaussian label. The response for search features z is

    R = idft2( sum_c conj(W[c]) * dft2(z[c]) ).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.fft as sfft

from .errors import InvalidInputError, InvalidStateError
from .numkit import dft2, idft2


class FusionMode(Enum):
    CONCAT = "concat"
    AVERAGE = "average"


@dataclass
class CorrelationFilter:
    spectrum: np.ndarray  # (C, H, W) complex
    lam: float


@dataclass
class DcfCache:
    """Intermediates of one solve+response pass, consumed by cf_backward."""

    x_hat: np.ndarray  # template feature spectra (C, H, W)
    y_hat: np.ndarray  # label spectrum (H, W)
    z_hat: np.ndarray  # search feature spectra (C, H, W)
    denom: np.ndarray  # real (H, W)
    w_hat: np.ndarray  # filter spectra (C, H, W)
    lam: float
    consumed: bool = field(default=False)


def gaussian_label(h: int, w: int, sigma: float, center: tuple[int, int]) -> np.ndarray:
    """Gaussian response map with periodic (wrapped) distances, peak 1 at center."""
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    cr, cc = center
    if not (0 <= cr < h and 0 <= cc < w):
        raise InvalidInputError("center outside the plane")
    rows = np.arange(h)[:, None] - cr
    cols = np.arange(w)[None, :] - cc
    dr = np.minimum(np.abs(rows), h - np.abs(rows))
    dc = np.minimum(np.abs(cols), w - np.abs(cols))
    return np.exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma))


def _fft_stack(feats: np.ndarray) -> np.ndarray:
    return sfft.fft2(feats, axes=(-2, -1))


def solve_filter(features: np.ndarray, label: np.ndarray, lam: float) -> CorrelationFilter:
    """Learn the Fourier-domain filter from (C, H, W) features and a label."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise InvalidInputError("features must be (C, H, W)")
    if not np.all(np.isfinite(features)):
        raise InvalidInputError("features contain non-finite values")
    if lam <= 0:
        raise InvalidInputError("lambda must be positive")
    if label.shape != features.shape[1:]:
        raise InvalidInputError("label shape must match feature spatial shape")
    x_hat = _fft_stack(features)
    y_hat = dft2(label)
    denom = np.sum(x_hat.real**2 + x_hat.imag**2, axis=0) + lam
    w_hat = x_hat * np.conj(y_hat)[None] / denom[None]
    return CorrelationFilter(w_hat, lam)


def response(filt: CorrelationFilter, search_features: np.ndarray) -> np.ndarray:
    """Localization map for search features scored by a solved filter."""
    search_features = np.asarray(search_features)
    if search_features.shape != filt.spectrum.shape:
        raise InvalidInputError("search features shape does not match filter")
    z_hat = _fft_stack(search_features)
    r_hat = np.sum(np.conj(filt.spectrum) * z_hat, axis=0)
    return idft2(r_hat)


def fuse(a: np.ndarray, b: np.ndarray, mode: FusionMode) -> np.ndarray:
    """Feature fusion: channel concatenation (RGB first) or element average."""
    if a.shape[1:] != b.shape[1:]:
        raise InvalidInputError("fusion requires equal spatial shapes")
    if mode is FusionMode.CONCAT:
        return np.concatenate([a, b], axis=0)
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError("average fusion requires equal channel counts")
    return (a + b) / 2.0


def fused_response(
    filt: CorrelationFilter,
    rgb_search: np.ndarray,
    t_search: np.ndarray,
    fusion: FusionMode,
) -> np.ndarray:
    fused = fuse(rgb_search, t_search, fusion)
    if fused.shape[0] != filt.spectrum.shape[0]:
        raise InvalidInputError(
            f"filter has {filt.spectrum.shape[0]} channels, fused features "
            f"have {fused.shape[0]}"
        )
    return response(filt, fused)


def update_filter(
    prev: CorrelationFilter, new: CorrelationFilter, alpha: float
) -> CorrelationFilter:
    """Running exponential update W_t = (1-a) W_{t-1} + a W_new."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must lie in [0, 1]")
    if prev.spectrum.shape != new.spectrum.shape:
        raise InvalidInputError("filter shapes differ")
    return CorrelationFilter((1.0 - alpha) * prev.spectrum + alpha * new.spectrum, new.lam)


def dcf_forward(
    template_features: np.ndarray,
    label: np.ndarray,
    search_features: np.ndarray,
    lam: float,
) -> tuple[np.ndarray, DcfCache]:
    """Solve + respond in one pass, keeping intermediates for the backward."""
    template_features = np.asarray(template_features)
    if template_features.ndim != 3:
        raise InvalidInputError("features must be (C, H, W)")
    if not np.all(np.isfinite(template_features)):
        raise InvalidInputError("features contain non-finite values")
    if lam <= 0:
        raise InvalidInputError("lambda must be positive")
    if label.shape != template_features.shape[1:]:
        raise InvalidInputError("label shape must match feature spatial shape")
    if search_features.shape != template_features.shape:
        raise InvalidInputError("template/search feature shapes differ")
    x_hat = _fft_stack(template_features)
    y_hat = dft2(label)
    denom = np.sum(x_hat.real**2 + x_hat.imag**2, axis=0) + lam
    w_hat = x_hat * np.conj(y_hat)[None] / denom[None]
    z_hat = _fft_stack(search_features)
    r_hat = np.sum(np.conj(w_hat) * z_hat, axis=0)
    resp = idft2(r_hat)
    cache = DcfCache(x_hat, y_hat, z_hat, denom, w_hat, lam)
    return resp, cache


def cf_backward(
    grad_response: np.ndarray, cache: DcfCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through solve_filter and response.

    Returns (grad_template_features, grad_search_features, grad_label); the
    label gradient is needed when a previous response is reused as a label.
    """
    if cache is None or cache.x_hat is None:
        raise InvalidStateError("cf_backward requires a forward cache")
    grad_response = np.asarray(grad_response)
    if grad_response.shape != cache.y_hat.shape:
        raise InvalidInputError("grad_response shape mismatch")

    # Wirtinger cotangents G(u) = dL/d(conj u); linear maps propagate by
    # their adjoints. The 1/(2HW) from idft2/Re cancels against the 2HW of
    # the real-input DFT adjoint.
    g_rhat = sfft.fft2(grad_response)
    g_z = cache.w_hat * g_rhat[None]
    grad_search = sfft.ifft2(g_z, axes=(-2, -1)).real

    g_w = np.conj(g_rhat)[None] * cache.z_hat
    s = np.sum(np.conj(g_w) * cache.x_hat, axis=0)
    bracket = 2.0 * (np.conj(cache.y_hat) * s).real
    g_x = g_w * (cache.y_hat / cache.denom)[None] \
        - cache.x_hat * (bracket / cache.denom**2)[None]
    grad_template = sfft.ifft2(g_x, axes=(-2, -1)).real

    g_y = s / cache.denom
    grad_label = sfft.ifft2(g_y).real
    return grad_template, grad_search, grad_label
