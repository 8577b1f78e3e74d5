"""Deterministic numerical kernels: 2D DFT, convolution, ReLU, SGD, and a
finite-difference gradient oracle.

All functions are pure over their inputs. Arrays are plain numpy ndarrays:
real planes are (H, W), spectra are complex (H, W), feature stacks are
(C, H, W). Convolution uses the cross-correlation convention (no kernel
flip) with zero padding, the standard CNN reading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, TrainingDivergedError


@dataclass
class ConvKernel:
    """3x3 convolution weights (C_out, C_in, k, k) plus per-output bias."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.bias.copy())

    def astype(self, dtype) -> "ConvKernel":
        return ConvKernel(self.weights.astype(dtype), self.bias.astype(dtype))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{what} contains non-finite values")


def dft2(plane: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT of a real plane."""
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.size == 0:
        raise InvalidInputError("dft2 expects a non-empty 2D plane")
    _check_finite(plane, "dft2 input")
    return sfft.fft2(plane)


def idft2(spec: np.ndarray) -> np.ndarray:
    """Inverse 2D DFT with 1/(H*W) normalization; returns the real part.

    The imaginary residue is the caller's concern: for spectra arising from
    real inputs it is at floating-noise level and is discarded here.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.size == 0:
        raise InvalidInputError("idft2 expects a non-empty 2D spectrum")
    return sfft.ifft2(spec).real


def idft2_residue(spec: np.ndarray) -> tuple[np.ndarray, float]:
    """Like idft2 but also reports the relative imaginary residue."""
    out = sfft.ifft2(np.asarray(spec))
    norm = float(np.linalg.norm(out.real))
    resid = float(np.linalg.norm(out.imag)) / max(norm, 1e-300)
    return out.real, resid


def _im2col(x: np.ndarray, k: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix (H'*W', C*k*k) of all k x k windows of a padded stack."""
    c = x.shape[0]
    pad = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(pad, (k, k), axis=(1, 2))  # (C, H', W', k, k)
    hh, ww = win.shape[1], win.shape[2]
    return win.transpose(1, 2, 0, 3, 4).reshape(hh * ww, c * k * k), hh, ww


def conv2d_forward(
    x: np.ndarray, kernel: ConvKernel, padding: int = 1, col_cache: dict | None = None
) -> np.ndarray:
    """Cross-correlation of a (C, H, W) stack with a 3x3 kernel bank.

    When col_cache is a dict the im2col patch matrix is stashed under "col"
    so conv2d_backward can reuse it instead of rebuilding it.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise InvalidInputError("conv2d_forward expects a (C, H, W) tensor")
    if kernel.c_in != x.shape[0]:
        raise InvalidInputError(
            f"kernel expects {kernel.c_in} input channels, got {x.shape[0]}"
        )
    k = kernel.weights.shape[2]
    c = x.shape[0]
    col, hh, ww = _im2col(x, k, padding)
    if col_cache is not None:
        col_cache["col"] = col
    wmat = kernel.weights.reshape(kernel.c_out, c * k * k)
    out = col @ wmat.T
    out = out.T.reshape(kernel.c_out, hh, ww)
    return out + kernel.bias[:, None, None]


def conv2d_backward(
    grad_out: np.ndarray,
    cached_input: np.ndarray,
    kernel: ConvKernel,
    padding: int = 1,
    col: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, ConvKernel]:
    """Exact gradients of conv2d_forward w.r.t. its input and kernel."""
    grad_out = np.asarray(grad_out)
    x = np.asarray(cached_input)
    k = kernel.weights.shape[2]
    if grad_out.shape[0] != kernel.c_out or x.shape[0] != kernel.c_in:
        raise InvalidInputError("conv2d_backward shape mismatch")
    c, h, w = x.shape
    o = kernel.c_out

    if col is None:
        col, hh, ww = _im2col(x, k, padding)
    else:
        hh, ww = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if grad_out.shape != (o, hh, ww):
        raise InvalidInputError("conv2d_backward grad_out shape mismatch")
    gmat = grad_out.reshape(o, hh * ww)
    grad_w = (gmat @ col).reshape(kernel.weights.shape)
    grad_b = grad_out.sum(axis=(1, 2))
    if not need_input_grad:
        return None, ConvKernel(grad_w, grad_b)

    # Input gradient: correlate grad_out with the flipped kernels.
    gpad = np.pad(grad_out, ((0, 0), (k - 1 - padding, k - 1 - padding),
                             (k - 1 - padding, k - 1 - padding)))
    gwin = sliding_window_view(gpad, (k, k), axis=(1, 2))
    gcol = gwin.transpose(1, 2, 0, 3, 4).reshape(h * w, o * k * k)
    wflip = kernel.weights[:, :, ::-1, ::-1]
    wmat = wflip.transpose(1, 0, 2, 3).reshape(c, o * k * k)
    grad_in = (gcol @ wmat.T).T.reshape(c, h, w)
    return grad_in, ConvKernel(grad_w, grad_b)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    return grad_out * (cached_input > 0)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """In-place SGD with momentum: v <- m*v + (g + wd*p); p <- p - lr*v."""
    if lr <= 0:
        raise InvalidInputError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise InvalidInputError("momentum must lie in [0, 1)")
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
        v = velocity.setdefault(name, np.zeros_like(p))
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


def finite_difference_grad(fn, point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(point)
        flat[i] = orig - step
        lo = fn(point)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad
