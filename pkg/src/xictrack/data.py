"""Dataset ingestion for aligned RGB-T video pairs, unsupervised center-crop
training-pair generation, ground-truth parsing, and a synthetic RGB-T
sequence generator for desk-scale verification.

Disk layout per sequence:

    <root>/<sequence>/visible/000001.png ...
    <root>/<sequence>/infrared/000001.png ...
    optional groundtruth_visible.txt / groundtruth_infrared.txt
    optional attributes.txt (comma-separated tags)
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import FormatError, InvalidConfigError, InvalidInputError
from .selfsup import TrainingPair


@dataclass
class BoundingBox:
    x: float  # top-left column
    y: float  # top-left row
    w: float
    h: float

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass
class SequencePair:
    name: str
    rgb_frames: list[str]
    t_frames: list[str]
    ground_truth: dict[str, list[BoundingBox]] = field(default_factory=dict)
    attributes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rgb_frames)


def _numeric_key(path: str):
    m = re.search(r"(\d+)\.\w+$", os.path.basename(path))
    return int(m.group(1)) if m else os.path.basename(path)


def _list_frames(directory: str) -> list[str]:
    names = [n for n in os.listdir(directory)
             if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))]
    return [os.path.join(directory, n) for n in sorted(names, key=_numeric_key)]


def read_image(path: str, grayscale: bool = False) -> np.ndarray:
    """8-bit image from disk as unit-range float64, channel-first."""
    flag = cv2.IMREAD_GRAYSCALE if grayscale else cv2.IMREAD_COLOR
    img = cv2.imread(path, flag)
    if img is None:
        raise FormatError(f"unreadable image: {path}")
    img = img.astype(np.float64) / 255.0
    if img.ndim == 2:
        return img[None]
    return img.transpose(2, 0, 1)  # BGR order; consistent everywhere


def parse_groundtruth(path: str) -> list[BoundingBox]:
    """Boxes from a text file; 4 numbers per line (x,y,w,h) or 8 (polygon)."""
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = re.split(r"[,\s]+", line)
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise FormatError(f"{path}: malformed line {lineno}: {line!r}")
            if len(vals) == 4:
                boxes.append(BoundingBox(*vals))
            elif len(vals) == 8:
                xs, ys = vals[0::2], vals[1::2]
                boxes.append(BoundingBox(min(xs), min(ys),
                                         max(xs) - min(xs), max(ys) - min(ys)))
            else:
                raise FormatError(
                    f"{path}: line {lineno} has {len(vals)} numbers, expected 4 or 8"
                )
    return boxes


def load_sequence(directory: str) -> SequencePair:
    vis_dir = os.path.join(directory, "visible")
    ir_dir = os.path.join(directory, "infrared")
    if not os.path.isdir(vis_dir) or not os.path.isdir(ir_dir):
        raise FormatError(f"{directory}: missing visible/ or infrared/ subdirectory")
    rgb = _list_frames(vis_dir)
    tir = _list_frames(ir_dir)
    if len(rgb) != len(tir):
        raise FormatError(
            f"{directory}: frame count mismatch ({len(rgb)} visible vs {len(tir)} infrared)"
        )
    if not rgb:
        raise FormatError(f"{directory}: no frames")
    seq = SequencePair(name=os.path.basename(os.path.normpath(directory)),
                       rgb_frames=rgb, t_frames=tir)
    for modality, fname in (("visible", "groundtruth_visible.txt"),
                            ("infrared", "groundtruth_infrared.txt")):
        gpath = os.path.join(directory, fname)
        if os.path.exists(gpath):
            seq.ground_truth[modality] = parse_groundtruth(gpath)
    apath = os.path.join(directory, "attributes.txt")
    if os.path.exists(apath):
        with open(apath) as fh:
            seq.attributes = [t.strip() for t in fh.read().split(",") if t.strip()]
    return seq


def list_sequences(root: str) -> list[str]:
    out = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if os.path.isdir(os.path.join(d, "visible")):
            out.append(d)
    return out


# ---------------------------------------------------------------------------
# Training-pair generation
# ---------------------------------------------------------------------------

def _center_crop(img: np.ndarray, side: int, out_size: int) -> np.ndarray:
    c, h, w = img.shape
    r0 = (h - side) // 2
    c0 = (w - side) // 2
    crop = img[:, r0:r0 + side, c0:c0 + side]
    resized = cv2.resize(crop.transpose(1, 2, 0), (out_size, out_size),
                         interpolation=cv2.INTER_LINEAR)
    if resized.ndim == 2:
        resized = resized[:, :, None]
    return np.ascontiguousarray(resized.transpose(2, 0, 1))


def center_crop_pairs(
    seq: SequencePair,
    crop_ratio: float = 0.5,
    out_size: int = 125,
    stride: int = 1,
    sequence_length: int = 2,
) -> list[TrainingPair]:
    """Centered square crops from consecutive frames of both modalities."""
    if not 0 < crop_ratio <= 1:
        raise InvalidConfigError("crop_ratio must lie in (0, 1]")
    if stride < 1:
        raise InvalidConfigError("stride must be >= 1")
    first_rgb = read_image(seq.rgb_frames[0])
    h, w = first_rgb.shape[1:]
    side = int(round(crop_ratio * min(h, w)))
    if side < 2 or side > min(h, w):
        raise InvalidConfigError(f"crop side {side} invalid for {h}x{w} frames")
    span = sequence_length - 1
    half = out_size // 4
    center = out_size // 2
    pseudo_box = (center - half, center - half, 2 * half, 2 * half)

    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def patches(i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in cache:
            rgb = _center_crop(read_image(seq.rgb_frames[i]), side, out_size)
            tir = _center_crop(read_image(seq.t_frames[i], grayscale=True), side, out_size)
            cache[i] = (rgb.astype(np.float32), tir.astype(np.float32))
        return cache[i]

    pairs = []
    for t in range(0, len(seq) - span, stride):
        rgb0, t0 = patches(t)
        rgb1, t1 = patches(t + 1)
        extra_rgb = extra_t = None
        if sequence_length == 3:
            extra_rgb, extra_t = patches(t + 2)
        pairs.append(TrainingPair(rgb0, rgb1, t0, t1, extra_rgb, extra_t, pseudo_box))
    return pairs


def load_training_pairs(root: str, crop_ratio=0.5, out_size=125, stride=1,
                        sequence_length=2) -> list[TrainingPair]:
    pairs = []
    for d in list_sequences(root):
        pairs.extend(center_crop_pairs(load_sequence(d), crop_ratio, out_size,
                                       stride, sequence_length))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic RGB-T sequence generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    frames: int = 26
    canvas: int = 200
    object_min_size: int = 28
    object_max_size: int = 44
    velocity: float = 2.0
    turn_prob: float = 0.15
    noise_level: float = 0.04
    illumination_swing: float = 0.35
    thermal_crossover: bool = True
    distractors: int = 3
    distractor_heat: float = 0.85
    rgb_contrast: float = 0.30
    occluder_density: float = 0.0
    seed: int = 0


def _smooth_noise(rng, h, w, scale=8):
    coarse = rng.random((max(2, h // scale), max(2, w // scale)))
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)


def _render_frame(state, t, cfg, rng_frame):
    n = cfg.canvas
    # RGB: textured background + camouflaged textured target + illumination.
    rgb = state["bg_rgb"].copy()
    gain = 1.0 + cfg.illumination_swing * np.sin(2 * np.pi * t / 17.0 + state["phase"])
    tir = state["bg_t"].copy()

    def paint_rgb(cx, cy, size, texture, color):
        half = size // 2
        y0, y1 = max(int(cy) - half, 0), min(int(cy) + half, n)
        x0, x1 = max(int(cx) - half, 0), min(int(cx) + half, n)
        if y1 <= y0 or x1 <= x0:
            return
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask = ((yy - cy) / half) ** 2 + ((xx - cx) / half) ** 2 <= 1.0
        ty, tx = y0 - (int(cy) - half), x0 - (int(cx) - half)
        tex = texture[ty:ty + (y1 - y0), tx:tx + (x1 - x0)]
        for ch in range(3):
            region = rgb[ch, y0:y1, x0:x1]
            region[mask] = np.clip(color[ch] + 0.25 * (tex[mask] - 0.5), 0, 1)

    def paint_blob(cx, cy, size, peak):
        sigma = size / 3.2
        yy, xx = np.mgrid[0:n, 0:n]
        blob = peak * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
        np.maximum(tir, blob, out=tir)

    for d in state["distractors"]:
        paint_rgb(d["x"], d["y"], d["size"], d["texture"], d["color"])
        if d["warm"]:
            paint_blob(d["x"], d["y"], d["size"], cfg.distractor_heat)

    obj = state["obj"]
    paint_rgb(obj["x"], obj["y"], obj["size"], obj["texture"], obj["color"])
    peak = 0.9
    if cfg.thermal_crossover:
        # target intensity periodically dips toward the background level
        peak = 0.9 - 0.55 * max(0.0, np.sin(2 * np.pi * t / 23.0 + state["phase2"]))
    paint_blob(obj["x"], obj["y"], obj["size"], peak)

    rgb = np.clip(rgb * gain, 0, 1)
    if cfg.occluder_density > 0:
        for occ in state["occluders"]:
            ox = int(occ["x"] + occ["vx"] * t) % n
            half = occ["size"] // 2
            y0, y1 = max(0, occ["y"] - half), min(n, occ["y"] + half)
            x0, x1 = max(0, ox - half), min(n, ox + half)
            rgb[:, y0:y1, x0:x1] = occ["color"][:, None, None]
            tir[y0:y1, x0:x1] = 0.25
    rgb = np.clip(rgb + rng_frame.normal(0, cfg.noise_level, rgb.shape), 0, 1)
    tir = np.clip(tir + rng_frame.normal(0, cfg.noise_level, tir.shape), 0, 1)
    return rgb, tir


def _step_motion(state, cfg, rng):
    for mover in [state["obj"]] + state["distractors"]:
        if rng.random() < cfg.turn_prob:
            angle = rng.uniform(0, 2 * np.pi)
            speed = np.hypot(mover["vx"], mover["vy"])
            mover["vx"], mover["vy"] = speed * np.cos(angle), speed * np.sin(angle)
        # soft pull toward the canvas center keeps targets inside center crops
        cx = cy = cfg.canvas / 2.0
        mover["vx"] += 0.004 * (cx - mover["x"])
        mover["vy"] += 0.004 * (cy - mover["y"])
        speed = np.hypot(mover["vx"], mover["vy"])
        if speed > 1e-9:
            scale = mover["speed"] / speed
            mover["vx"] *= scale
            mover["vy"] *= scale
        mover["x"] += mover["vx"]
        mover["y"] += mover["vy"]
        margin = mover["size"] // 2 + 2
        mover["x"] = float(np.clip(mover["x"], margin, cfg.canvas - margin))
        mover["y"] = float(np.clip(mover["y"], margin, cfg.canvas - margin))


def synth_sequence(cfg: SynthConfig, name: str, seq_seed: int) -> tuple[list, list, list[BoundingBox]]:
    """Render one sequence; returns (rgb uint8 frames, thermal uint8 frames, boxes)."""
    if cfg.canvas < 2 * int(0.5 * cfg.canvas):
        raise InvalidConfigError("canvas too small for the center crop")
    rng = np.random.default_rng(seq_seed)
    n = cfg.canvas
    bg_rgb = np.stack([
        0.35 + 0.3 * _smooth_noise(rng, n, n, 10) for _ in range(3)
    ])
    bg_t = 0.22 + 0.12 * _smooth_noise(rng, n, n, 24)
    size = int(rng.integers(cfg.object_min_size, cfg.object_max_size + 1))
    base_color = 0.35 + 0.3 * rng.random(3)  # close to background tones

    def mover(sz, speed, near_center, color_shift=0.0):
        spread = 0.12 if near_center else 0.4
        angle = rng.uniform(0, 2 * np.pi)
        color = base_color + rng.uniform(-0.08, 0.08, 3)
        if color_shift > 0:
            # push the color away from the background tones, per channel
            color = np.clip(color + rng.choice([-1.0, 1.0], 3) * color_shift,
                            0.02, 0.98)
        return {
            "x": n / 2 + rng.uniform(-spread * n, spread * n),
            "y": n / 2 + rng.uniform(-spread * n, spread * n),
            "vx": speed * np.cos(angle), "vy": speed * np.sin(angle),
            "speed": speed, "size": sz,
            "texture": rng.random((sz + 2, sz + 2)),
            "color": color,
        }

    state = {
        "bg_rgb": bg_rgb, "bg_t": bg_t,
        "phase": rng.uniform(0, 2 * np.pi), "phase2": rng.uniform(0, 2 * np.pi),
        "obj": mover(size, cfg.velocity, True, color_shift=cfg.rgb_contrast),
        "distractors": [],
        "occluders": [],
    }
    for _ in range(cfg.distractors):
        d = mover(int(rng.integers(16, 30)), cfg.velocity * rng.uniform(0.5, 1.5), False)
        d["warm"] = bool(rng.random() < 0.5)
        state["distractors"].append(d)
    if cfg.occluder_density > 0:
        count = max(1, int(round(cfg.occluder_density * 4)))
        for _ in range(count):
            state["occluders"].append({
                "x": int(rng.integers(0, n)), "y": int(rng.integers(0, n)),
                "vx": rng.uniform(-1.5, 1.5), "size": int(rng.integers(14, 26)),
                "color": rng.random(3),
            })

    rgb_frames, t_frames, boxes = [], [], []
    for t in range(cfg.frames):
        rng_frame = np.random.default_rng((seq_seed, t))
        rgb, tir = _render_frame(state, t, cfg, rng_frame)
        obj = state["obj"]
        half = obj["size"] / 2.0
        boxes.append(BoundingBox(obj["x"] - half, obj["y"] - half,
                                 obj["size"], obj["size"]))
        rgb_frames.append((rgb.transpose(1, 2, 0) * 255).round().astype(np.uint8))
        t_frames.append((tir * 255).round().astype(np.uint8))
        _step_motion(state, cfg, rng)
    return rgb_frames, t_frames, boxes


def _box_lines(boxes: list[BoundingBox]) -> str:
    return "".join(f"{b.x:.2f},{b.y:.2f},{b.w:.2f},{b.h:.2f}\n" for b in boxes)


def synth_generate(cfg: SynthConfig, out_root: str, count: int,
                   prefix: str = "seq") -> list[str]:
    """Render `count` sequences to out_root in the standard layout."""
    written = []
    for i in range(count):
        name = f"{prefix}{i:03d}"
        seq_seed = cfg.seed * 100003 + i
        rgb_frames, t_frames, boxes = synth_sequence(cfg, name, seq_seed)
        d = os.path.join(out_root, name)
        os.makedirs(os.path.join(d, "visible"), exist_ok=True)
        os.makedirs(os.path.join(d, "infrared"), exist_ok=True)
        for j, (rgb, tir) in enumerate(zip(rgb_frames, t_frames), start=1):
            cv2.imwrite(os.path.join(d, "visible", f"{j:06d}.png"), rgb)
            cv2.imwrite(os.path.join(d, "infrared", f"{j:06d}.png"), tir)
        gt = _box_lines(boxes)
        with open(os.path.join(d, "groundtruth_visible.txt"), "w") as fh:
            fh.write(gt)
        with open(os.path.join(d, "groundtruth_infrared.txt"), "w") as fh:
            fh.write(gt)
        tags = []
        if cfg.occluder_density > 0:
            tags.append("OCC")
        if cfg.thermal_crossover:
            tags.append("TC")
        if cfg.velocity >= 3.0:
            tags.append("FM")
        if cfg.illumination_swing >= 0.25:
            tags.append("LI")
        if tags:
            with open(os.path.join(d, "attributes.txt"), "w") as fh:
                fh.write(",".join(tags) + "\n")
        written.append(d)
    return written
