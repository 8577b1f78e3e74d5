"""Two-layer convolutional feature extractors (conv 3x3 -> ReLU -> conv 3x3),
feature fusion, the raised-cosine feature window, and the binary checkpoint
container for parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dcf import FusionMode, fuse
from .errors import FormatError, InvalidInputError
from .numkit import ConvKernel, conv2d_backward, conv2d_forward, relu_backward, relu_forward

CKPT_MAGIC = b"XICTRACKCKPT\x00\x00\x00\x01"  # 16 bytes: magic + version


@dataclass
class FeatureExtractorParams:
    conv1: ConvKernel
    conv2: ConvKernel
    modality: str = ""

    def copy(self) -> "FeatureExtractorParams":
        return FeatureExtractorParams(self.conv1.copy(), self.conv2.copy(), self.modality)

    def astype(self, dtype) -> "FeatureExtractorParams":
        return FeatureExtractorParams(
            self.conv1.astype(dtype), self.conv2.astype(dtype), self.modality
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "conv1.weight": self.conv1.weights,
            "conv1.bias": self.conv1.bias,
            "conv2.weight": self.conv2.weights,
            "conv2.bias": self.conv2.bias,
        }


@dataclass
class ModelConfig:
    share_weights: bool = False
    first_input: str = "rgb"  # rgb | thermal | rgbt4
    branches: int = 2
    fusion: FusionMode = FusionMode.CONCAT
    loss_norm: str = "l1"  # l1 | mse
    sequence_length: int = 2
    patch_size: int = 125
    feature_channels: int = 32
    window: bool = True
    lam: float = 1e-4
    sigma_divisor: float = 12.5

    @property
    def sigma(self) -> float:
        return self.patch_size / self.sigma_divisor

    def validate(self) -> None:
        if self.first_input not in ("rgb", "thermal", "rgbt4"):
            raise InvalidInputError(f"unknown first_input {self.first_input!r}")
        if self.branches not in (2, 3):
            raise InvalidInputError("branches must be 2 or 3")
        if self.loss_norm not in ("l1", "mse"):
            raise InvalidInputError(f"unknown loss_norm {self.loss_norm!r}")
        if self.sequence_length not in (2, 3):
            raise InvalidInputError("sequence_length must be 2 or 3")


def init_params(
    seed: int, modality: str, in_channels: int = 3, feature_channels: int = 32,
    dtype=np.float64, init_scale: float = 0.01,
) -> FeatureExtractorParams:
    """Scaled Glorot-uniform weights, zero biases; deterministic for a fixed
    seed. The small default scale keeps the correlation filter in the
    regularizer-sensitive regime where the consistency loss responds to
    SGD updates at the default learning-rate schedule."""
    if in_channels not in (3, 4):
        raise InvalidInputError("in_channels must be 3 or 4")
    if init_scale <= 0:
        raise InvalidInputError("init_scale must be positive")
    rng = np.random.default_rng(seed)

    def glorot(c_out, c_in, k=3):
        fan_in = c_in * k * k
        fan_out = c_out * k * k
        bound = init_scale * np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        return ConvKernel(w.astype(dtype), np.zeros(c_out, dtype=dtype))

    return FeatureExtractorParams(
        conv1=glorot(feature_channels, in_channels),
        conv2=glorot(feature_channels, feature_channels),
        modality=modality,
    )


def cosine_window(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Separable raised-cosine (Hann) window, used to taper feature maps."""
    wr = np.hanning(h) if h > 1 else np.ones(1)
    wc = np.hanning(w) if w > 1 else np.ones(1)
    return np.outer(wr, wc).astype(dtype)


def extract_features(
    patch: np.ndarray, params: FeatureExtractorParams, window: np.ndarray | None = None
) -> np.ndarray:
    feat, _ = extract_forward(patch, params, window)
    return feat


def extract_forward(
    patch: np.ndarray, params: FeatureExtractorParams, window: np.ndarray | None = None
) -> tuple[np.ndarray, dict]:
    """conv1 -> ReLU -> conv2 (-> window); keeps intermediates for backward."""
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[0] != params.conv1.c_in:
        raise InvalidInputError(
            f"patch must be ({params.conv1.c_in}, H, W), got {patch.shape}"
        )
    c1: dict = {}
    c2: dict = {}
    a1 = conv2d_forward(patch, params.conv1, padding=1, col_cache=c1)
    r1 = relu_forward(a1)
    a2 = conv2d_forward(r1, params.conv2, padding=1, col_cache=c2)
    feat = a2 * window[None] if window is not None else a2
    cache = {"patch": patch, "a1": a1, "r1": r1, "window": window,
             "col1": c1["col"], "col2": c2["col"]}
    return feat, cache


def extract_backward(
    grad_feat: np.ndarray, cache: dict, params: FeatureExtractorParams
) -> tuple[ConvKernel, ConvKernel]:
    """Gradients w.r.t. conv1/conv2 parameters for one forward pass."""
    window = cache["window"]
    g_a2 = grad_feat * window[None] if window is not None else grad_feat
    g_r1, g_conv2 = conv2d_backward(
        g_a2, cache["r1"], params.conv2, padding=1, col=cache.get("col2")
    )
    g_a1 = relu_backward(g_r1, cache["a1"])
    _, g_conv1 = conv2d_backward(
        g_a1, cache["patch"], params.conv1, padding=1,
        col=cache.get("col1"), need_input_grad=False,
    )
    return g_conv1, g_conv2


# ---------------------------------------------------------------------------
# Checkpoint container: 16-byte magic/version header, then named tensors as
# (u32 name length, name bytes, u32 dims count, u32 dims..., f64 LE payload).
# ---------------------------------------------------------------------------

def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name in sorted(tensors):
            # np.asarray keeps 0-d arrays 0-d; ascontiguousarray would not
            arr = np.asarray(tensors[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_tensors(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic/version")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError(f"{path}: truncated tensor header")
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(dims)) if ndim else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise FormatError(f"{path}: truncated payload for {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return tensors


def save_params(path, params: dict[str, FeatureExtractorParams], meta: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for key, p in params.items():
        for tname, arr in p.tensors().items():
            tensors[f"{key}.{tname}"] = arr
    if meta:
        for k, v in meta.items():
            tensors[f"meta.{k}"] = np.asarray(v, dtype=np.float64)
    save_tensors(path, tensors)


def load_params(path) -> tuple[dict[str, FeatureExtractorParams], dict[str, float]]:
    tensors = load_tensors(path)
    keys = sorted({n.split(".")[0] for n in tensors if not n.startswith("meta.")})
    params: dict[str, FeatureExtractorParams] = {}
    for key in keys:
        params[key] = FeatureExtractorParams(
            conv1=ConvKernel(tensors[f"{key}.conv1.weight"], tensors[f"{key}.conv1.bias"]),
            conv2=ConvKernel(tensors[f"{key}.conv2.weight"], tensors[f"{key}.conv2.bias"]),
            modality=key,
        )
    meta = {
        n[len("meta."):]: float(tensors[n]) for n in tensors if n.startswith("meta.")
    }
    return params, meta
