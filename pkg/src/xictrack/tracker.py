"""Online RGB-T tracking: initialize from a first-frame box, then per frame
crop a search window at three scales, score it with the fused correlation
filter, localize, and blend a freshly solved filter into the running one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import cv2
import numpy as np

from .dcf import CorrelationFilter, FusionMode, fuse, gaussian_label, response, solve_filter, update_filter
from .errors import InvalidInputError
from .features import FeatureExtractorParams, ModelConfig, cosine_window, extract_features
from .selfsup import preprocess_patch, resolve_key


@dataclass
class TrackerConfig:
    alpha: float = 0.01  # filter update rate
    scale_factor: float = 1.0275
    scale_penalty: float = 0.9925
    padding: float = 2.0  # window side = target size * padding
    subpixel: bool = True
    min_box_side: float = 4.0


@dataclass
class TrackerState:
    filter: CorrelationFilter
    center: tuple[float, float]  # (row, col) in frame coordinates
    target_size: tuple[float, float]  # (h, w)
    params: dict[str, FeatureExtractorParams]
    model_cfg: ModelConfig
    cfg: TrackerConfig
    window: np.ndarray | None
    label: np.ndarray
    frame_shape: tuple[int, int]
    scale_history: list[int] = field(default_factory=list)


def _crop_window(img: np.ndarray, center: tuple[float, float],
                 size: tuple[float, float], out: int) -> np.ndarray:
    """Crop a (possibly out-of-frame) window, edge-padding, resized to out."""
    c, h, w = img.shape
    cy, cx = center
    wh, ww = max(4.0, size[0]), max(4.0, size[1])
    y0 = int(round(cy - wh / 2.0))
    x0 = int(round(cx - ww / 2.0))
    y1 = y0 + int(round(wh))
    x1 = x0 + int(round(ww))
    pad_t, pad_l = max(0, -y0), max(0, -x0)
    pad_b, pad_r = max(0, y1 - h), max(0, x1 - w)
    yy0, xx0 = max(0, y0), max(0, x0)
    crop = img[:, yy0:min(h, y1), xx0:min(w, x1)]
    if pad_t or pad_b or pad_l or pad_r:
        crop = np.pad(crop, ((0, 0), (pad_t, pad_b), (pad_l, pad_r)), mode="edge")
    resized = cv2.resize(crop.transpose(1, 2, 0), (out, out),
                         interpolation=cv2.INTER_LINEAR)
    if resized.ndim == 2:
        resized = resized[:, :, None]
    return np.ascontiguousarray(resized.transpose(2, 0, 1))


def _fused_features(state: TrackerState, frame_rgb, frame_t, center, win_size) -> np.ndarray:
    p = state.model_cfg.patch_size
    rgb_patch = preprocess_patch(_crop_window(frame_rgb, center, win_size, p), np.float64)
    t_patch = preprocess_patch(_crop_window(frame_t, center, win_size, p), np.float64)
    t3 = np.repeat(t_patch, 3, axis=0)
    rgb_key = resolve_key(state.model_cfg, "rgb")
    t_key = resolve_key(state.model_cfg, "thermal")
    f_rgb = extract_features(rgb_patch, state.params[rgb_key], state.window)
    f_t = extract_features(t3, state.params[t_key], state.window)
    return fuse(f_rgb, f_t, state.model_cfg.fusion)


def _window_size(state_or_cfg, target_size) -> tuple[float, float]:
    pad = state_or_cfg.padding
    return (target_size[0] * pad, target_size[1] * pad)


def init(frame_rgb: np.ndarray, frame_t: np.ndarray, box,
         params: dict[str, FeatureExtractorParams], model_cfg: ModelConfig,
         cfg: TrackerConfig | None = None) -> TrackerState:
    """Build the tracker state from a first-frame bounding box."""
    cfg = cfg or TrackerConfig()
    c, h, w = frame_rgb.shape
    if box.w < cfg.min_box_side or box.h < cfg.min_box_side:
        raise InvalidInputError(f"box below minimum size {cfg.min_box_side} px")
    if box.x < 0 or box.y < 0 or box.x + box.w > w or box.y + box.h > h:
        raise InvalidInputError("box outside frame")
    p = model_cfg.patch_size
    window = cosine_window(p, p) if model_cfg.window else None
    label = gaussian_label(p, p, model_cfg.sigma, (p // 2, p // 2))
    center = (box.y + box.h / 2.0, box.x + box.w / 2.0)
    state = TrackerState(
        filter=None, center=center, target_size=(box.h, box.w),
        params=params, model_cfg=model_cfg, cfg=cfg,
        window=window, label=label, frame_shape=(h, w),
    )
    feats = _fused_features(state, frame_rgb, frame_t, center,
                            _window_size(cfg, state.target_size))
    state.filter = solve_filter(feats, label, model_cfg.lam)
    return state


def _wrap_displacement(idx: int, size: int) -> float:
    return idx - size if idx > size // 2 else idx


def _subpixel(resp: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """One-step parabolic refinement per axis with periodic neighbors."""
    h, w = resp.shape
    def refine(vm, v0, vp):
        denom = vm - 2 * v0 + vp
        if abs(denom) < 1e-12:
            return 0.0
        return float(np.clip(0.5 * (vm - vp) / denom, -0.5, 0.5))
    dr = refine(resp[(r - 1) % h, c], resp[r, c], resp[(r + 1) % h, c])
    dc = refine(resp[r, (c - 1) % w], resp[r, c], resp[r, (c + 1) % w])
    return dr, dc


def track_frame(state: TrackerState, frame_rgb: np.ndarray, frame_t: np.ndarray):
    """Advance one frame; returns (BoundingBox, state). State is mutated."""
    from .data import BoundingBox  # local import to avoid a cycle

    cfg = state.cfg
    p = state.model_cfg.patch_size
    scales = [1.0 / cfg.scale_factor, 1.0, cfg.scale_factor]
    best = None
    for si, s in enumerate(scales):
        win = _window_size(cfg, (state.target_size[0] * s, state.target_size[1] * s))
        feats = _fused_features(state, frame_rgb, frame_t, state.center, win)
        resp = response(state.filter, feats)
        penalty = 1.0 if si == 1 else cfg.scale_penalty
        score = float(resp.max()) * penalty
        if best is None or score > best["score"]:
            best = {"score": score, "resp": resp, "scale": s, "win": win, "si": si}

    resp = best["resp"]
    r, c = np.unravel_index(int(np.argmax(resp)), resp.shape)
    # the label peaks at the patch center, so that bin means zero motion
    dr = _wrap_displacement((int(r) - p // 2) % resp.shape[0], resp.shape[0])
    dc = _wrap_displacement((int(c) - p // 2) % resp.shape[1], resp.shape[1])
    if cfg.subpixel:
        sr, sc = _subpixel(resp, int(r), int(c))
        dr += sr
        dc += sc
    # map response displacement back to frame pixels
    fy = best["win"][0] / p
    fx = best["win"][1] / p
    h, w = state.frame_shape
    cy = float(np.clip(state.center[0] + dr * fy, 0, h - 1))
    cx = float(np.clip(state.center[1] + dc * fx, 0, w - 1))
    state.center = (cy, cx)
    s = best["scale"]
    state.target_size = (state.target_size[0] * s, state.target_size[1] * s)
    state.scale_history.append(best["si"])

    # refresh the filter on the newly located target and blend it in
    feats = _fused_features(state, frame_rgb, frame_t, state.center,
                            _window_size(cfg, state.target_size))
    new_filt = solve_filter(feats, state.label, state.model_cfg.lam)
    state.filter = update_filter(state.filter, new_filt, cfg.alpha)

    th, tw = state.target_size
    x = np.clip(cx - tw / 2.0, 0, w - 1)
    y = np.clip(cy - th / 2.0, 0, h - 1)
    return BoundingBox(float(x), float(y), float(min(tw, w - x)), float(min(th, h - y))), state


def run_sequence(seq, init_box, params, model_cfg: ModelConfig,
                 cfg: TrackerConfig | None = None):
    """Track a whole SequencePair; returns (boxes, stats dict)."""
    from .data import read_image

    if len(seq) == 0:
        raise InvalidInputError("empty sequence")
    if init_box is None:
        gt = seq.ground_truth.get("visible") or seq.ground_truth.get("infrared")
        if not gt:
            raise InvalidInputError(f"{seq.name}: no ground truth and no init box")
        init_box = gt[0]
    frames = [(read_image(rp), read_image(tp, grayscale=True))
              for rp, tp in zip(seq.rgb_frames, seq.t_frames)]

    t0 = time.perf_counter()
    state = init(frames[0][0], frames[0][1], init_box, params, model_cfg, cfg)
    boxes = [init_box]
    for rgb, tir in frames[1:]:
        box, state = track_frame(state, rgb, tir)
        boxes.append(box)
    elapsed = time.perf_counter() - t0
    stats = {
        "frames": len(frames),
        "seconds": elapsed,
        "fps": len(frames) / elapsed if elapsed > 0 else float("inf"),
    }
    return boxes, stats
