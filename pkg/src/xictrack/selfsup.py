"""Self-supervised trainer: cross-input consistency between an RGB branch and
an RGB-T branch (optionally a third thermal branch), sample-quality loss
re-weighting, the two-/three-frame variants, and the cycle-consistency
baseline trainer.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dcf import FusionMode, cf_backward, dcf_forward, gaussian_label
from .errors import (
    DegenerateBatchError,
    InvalidConfigError,
    InvalidInputError,
    TrainingDivergedError,
)
from .features import (
    FeatureExtractorParams,
    ModelConfig,
    cosine_window,
    extract_backward,
    extract_forward,
    init_params,
    save_params,
)
from .numkit import sgd_step

VARIANTS = ("xic2", "xic3", "three-branch", "cycle2", "cycle3")


@dataclass
class TrainingPair:
    """Aligned RGB/thermal patch crops for frames t and t+1 (and t+2)."""

    template_rgb: np.ndarray  # (3, H, W)
    search_rgb: np.ndarray
    template_t: np.ndarray  # (1, H, W)
    search_t: np.ndarray
    extra_rgb: np.ndarray | None = None  # frame t+2, for sequence_length 3
    extra_t: np.ndarray | None = None
    pseudo_box: tuple[int, int, int, int] | None = None  # (row, col, h, w)


@dataclass
class LossReport:
    per_sample_losses: list[float]
    final_loss: float
    branch_losses: dict[str, float]
    dropped_noisy: int = 0
    dropped_background: int = 0
    skipped: bool = False


@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 32
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 5e-5
    noisy_frac: float = 0.10
    bg_frac: float = 0.25
    seed: int = 0
    variant: str = "xic2"
    precision: str = "double"  # double | single

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def lr_at(self, epoch: int) -> float:
        """Geometric interpolation from lr_start (epoch 0) to lr_end (last)."""
        if self.epochs <= 1:
            return self.lr_start
        frac = epoch / (self.epochs - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------

def consistency_loss(
    ra: np.ndarray, rb: np.ndarray, norm: str = "l1"
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean L1 or MSE distance between two response maps, with gradients."""
    if ra.shape != rb.shape:
        raise InvalidInputError("response map shapes differ")
    n = ra.size
    diff = ra - rb
    if norm == "l1":
        loss = float(np.abs(diff).sum()) / n
        ga = np.sign(diff) / n
    elif norm == "mse":
        loss = float((diff * diff).sum()) / n
        ga = 2.0 * diff / n
    else:
        raise InvalidInputError(f"unknown norm {norm!r}")
    return loss, ga, -ga


def sample_difference(t_rgb: np.ndarray, s_rgb: np.ndarray) -> float:
    """Squared template/search difference, normalized by H*W only."""
    if t_rgb.shape != s_rgb.shape:
        raise InvalidInputError("patch shapes differ")
    h, w = t_rgb.shape[-2:]
    d = t_rgb.astype(np.float64) - s_rgb.astype(np.float64)
    return float((d * d).sum()) / (h * w)


def compute_drop_masks(
    d: np.ndarray, noisy_frac: float = 0.10, bg_frac: float = 0.25
) -> tuple[np.ndarray, np.ndarray]:
    """Zero out the largest-difference (noisy) and smallest-difference
    (background) fractions of a batch. One stable ascending sort; the two
    dropped sets are taken from opposite ends, so they never overlap."""
    d = np.asarray(d, dtype=np.float64)
    n = d.size
    if n < 1:
        raise InvalidInputError("empty difference vector")
    if noisy_frac < 0 or bg_frac < 0 or noisy_frac + bg_frac >= 1:
        raise InvalidConfigError("drop fractions must be >= 0 and sum below 1")
    k_noisy = math.floor(noisy_frac * n)
    k_bg = math.floor(bg_frac * n)
    order = np.argsort(d, kind="stable")
    noisy_mask = np.ones(n, dtype=np.int64)
    bg_mask = np.ones(n, dtype=np.int64)
    if k_bg:
        bg_mask[order[:k_bg]] = 0
    if k_noisy:
        noisy_mask[order[n - k_noisy:]] = 0
    return noisy_mask, bg_mask


def normalize_weights(noisy_mask: np.ndarray, bg_mask: np.ndarray) -> np.ndarray:
    """Survivor indicator normalized to sum 1 over the mini-batch."""
    survivors = np.asarray(noisy_mask, dtype=np.float64) * np.asarray(bg_mask, dtype=np.float64)
    total = survivors.sum()
    if total == 0:
        raise DegenerateBatchError("all samples dropped in this batch")
    return survivors / total


def weighted_loss(per_sample: np.ndarray, d_norm: np.ndarray) -> float:
    """Re-weighted final loss, including the leading 1/n factor."""
    per_sample = np.asarray(per_sample, dtype=np.float64)
    d_norm = np.asarray(d_norm, dtype=np.float64)
    if per_sample.shape != d_norm.shape:
        raise InvalidInputError("loss/weight length mismatch")
    n = per_sample.size
    return float((d_norm * per_sample).sum()) / n


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------

def build_params(cfg: ModelConfig, seed: int, dtype=np.float64,
                 init_scale: float = 0.01) -> dict[str, FeatureExtractorParams]:
    """Extractor parameters for every branch the config asks for."""
    params = {
        "rgb": init_params(seed, "rgb", 3, cfg.feature_channels, dtype,
                           init_scale),
    }
    if not cfg.share_weights:
        params["thermal"] = init_params(seed + 1, "thermal", 3,
                                        cfg.feature_channels, dtype, init_scale)
    if cfg.first_input == "rgbt4":
        params["rgbt4"] = init_params(seed + 2, "rgbt4", 4,
                                      cfg.feature_channels, dtype, init_scale)
    return params


def resolve_key(cfg: ModelConfig, key: str) -> str:
    if key == "thermal" and cfg.share_weights:
        return "rgb"
    return key


def flat_params(params: dict[str, FeatureExtractorParams]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for key, p in params.items():
        for tname, arr in p.tensors().items():
            out[f"{key}.{tname}"] = arr
    return out


def preprocess_patch(patch: np.ndarray, dtype) -> np.ndarray:
    """Per-patch, per-modality mean subtraction."""
    patch = np.asarray(patch, dtype=dtype)
    return patch - patch.mean()


def _pair_inputs(pair: TrainingPair, cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    """Named, preprocessed network inputs for one training pair."""
    inputs = {
        "t_rgb": preprocess_patch(pair.template_rgb, dtype),
        "s_rgb": preprocess_patch(pair.search_rgb, dtype),
    }
    t_t = preprocess_patch(pair.template_t, dtype)
    s_t = preprocess_patch(pair.search_t, dtype)
    inputs["t_t3"] = np.repeat(t_t, 3, axis=0)
    inputs["s_t3"] = np.repeat(s_t, 3, axis=0)
    if cfg.first_input == "rgbt4":
        inputs["t_rgbt4"] = np.concatenate([inputs["t_rgb"], t_t], axis=0)
        inputs["s_rgbt4"] = np.concatenate([inputs["s_rgb"], s_t], axis=0)
    if pair.extra_rgb is not None:
        inputs["e_rgb"] = preprocess_patch(pair.extra_rgb, dtype)
        e_t = preprocess_patch(pair.extra_t, dtype)
        inputs["e_t3"] = np.repeat(e_t, 3, axis=0)
        if cfg.first_input == "rgbt4":
            inputs["e_rgbt4"] = np.concatenate([inputs["e_rgb"], e_t], axis=0)
    return inputs


class _ExtStore:
    """Per-sample feature extraction cache with gradient accumulation, so an
    extractor applied to the same patch by several branches runs once."""

    def __init__(self, params, cfg, window, inputs):
        self.params = params
        self.cfg = cfg
        self.window = window
        self.inputs = inputs
        self.entries: dict[tuple[str, str], dict] = {}

    def feat(self, key: str, patch_name: str) -> np.ndarray:
        rkey = resolve_key(self.cfg, key)
        ek = (rkey, patch_name)
        if ek not in self.entries:
            f, cache = extract_forward(self.inputs[patch_name], self.params[rkey], self.window)
            self.entries[ek] = {"feat": f, "cache": cache, "grad": None}
        return self.entries[ek]["feat"]

    def add_grad(self, key: str, patch_name: str, g: np.ndarray) -> None:
        rkey = resolve_key(self.cfg, key)
        entry = self.entries[(rkey, patch_name)]
        if entry["grad"] is None:
            entry["grad"] = g.copy()
        else:
            entry["grad"] += g

    def backward_into(self, grads: dict[str, np.ndarray]) -> None:
        for (rkey, _), entry in self.entries.items():
            if entry["grad"] is None:
                continue
            g1, g2 = extract_backward(entry["grad"], entry["cache"], self.params[rkey])
            grads[f"{rkey}.conv1.weight"] += g1.weights
            grads[f"{rkey}.conv1.bias"] += g1.bias
            grads[f"{rkey}.conv2.weight"] += g2.weights
            grads[f"{rkey}.conv2.bias"] += g2.bias


# Branch descriptors: (name, kind, template refs, search refs). A ref is a
# (param key, patch name) pair; fused branches carry one ref per modality.
def _branch_defs(cfg: ModelConfig, frame: str = "s") -> list[dict]:
    singles = {
        "rgb": ("rgb", "rgb"),
        "thermal": ("thermal", "t3"),
        "rgbt4": ("rgbt4", "rgbt4"),
    }
    branches = []
    if cfg.branches == 3:
        firsts = ["rgb", "thermal"]
    else:
        firsts = [cfg.first_input]
    for name in firsts:
        key, suffix = singles[name]
        branches.append({
            "name": name,
            "kind": "single",
            "template": [(key, f"t_{suffix}")],
            "search": [(key, f"{frame}_{suffix}")],
        })
    branches.append({
        "name": "rgbt",
        "kind": "fused",
        "template": [("rgb", "t_rgb"), ("thermal", "t_t3")],
        "search": [("rgb", f"{frame}_rgb"), ("thermal", f"{frame}_t3")],
    })
    return branches


def _gather_feats(store: _ExtStore, refs: list[tuple[str, str]], fusion: FusionMode) -> np.ndarray:
    feats = [store.feat(k, p) for k, p in refs]
    if len(feats) == 1:
        return feats[0]
    return np.concatenate(feats, axis=0) if fusion is FusionMode.CONCAT else (feats[0] + feats[1]) / 2.0


def _scatter_feat_grad(
    store: _ExtStore, refs: list[tuple[str, str]], g: np.ndarray, fusion: FusionMode
) -> None:
    if len(refs) == 1:
        store.add_grad(*refs[0], g)
        return
    if fusion is FusionMode.CONCAT:
        c = g.shape[0] // 2
        store.add_grad(*refs[0], g[:c])
        store.add_grad(*refs[1], g[c:])
    else:
        store.add_grad(*refs[0], g / 2.0)
        store.add_grad(*refs[1], g / 2.0)


def _branch_track(store, branch, label, lam, fusion, extra_search=None):
    """One DCF hop for a branch: solve on its template, respond on its search."""
    tf = _gather_feats(store, branch["template"], fusion)
    sf = _gather_feats(store, extra_search or branch["search"], fusion)
    resp, cache = dcf_forward(tf, label, sf, lam)
    return resp, cache


def _pairwise_terms(branches: list[dict]) -> list[tuple[int, int, str]]:
    idx = range(len(branches))
    return [(i, j, f"{branches[i]['name']}-{branches[j]['name']}")
            for i in idx for j in idx if i < j]


# ---------------------------------------------------------------------------
# Per-sample forward/backward for each training variant
# ---------------------------------------------------------------------------

def _xic2_sample(store, cfg, label, coeff, grads):
    branches = _branch_defs(cfg)
    fusion = cfg.fusion
    hops = [_branch_track(store, b, label, cfg.lam, fusion) for b in branches]
    responses = [r for r, _ in hops]
    losses: dict[str, float] = {}
    g_resp = [np.zeros_like(r) for r in responses]
    total = 0.0
    for i, j, name in _pairwise_terms(branches):
        l, ga, gb = consistency_loss(responses[i], responses[j], cfg.loss_norm)
        losses[name] = l
        total += l
        g_resp[i] += ga
        g_resp[j] += gb
    if coeff != 0.0 and grads is not None:
        for b, (resp, cache), g in zip(branches, hops, g_resp):
            gt, gs, _ = cf_backward(coeff * g, cache)
            _scatter_feat_grad(store, b["template"], gt, fusion)
            _scatter_feat_grad(store, b["search"], gs, fusion)
    return total, losses


def _xic3_sample(store, cfg, label, coeff, grads):
    """Three-frame variant: each branch tracks t -> t+1, the (t+1) response
    (clamped to [0, 1]) becomes the label for the t+1 -> t+2 hop, and the
    consistency loss is computed at frame t+2 only."""
    branches = _branch_defs(cfg)
    fusion = cfg.fusion
    records = []
    for b in branches:
        r1, c1 = _branch_track(store, b, label, cfg.lam, fusion)
        label2 = np.clip(r1, 0.0, 1.0)
        mid = [(k, p.replace("t_", "s_", 1)) for k, p in b["template"]]
        end = [(k, p.replace("s_", "e_", 1)) for k, p in b["search"]]
        tf2 = _gather_feats(store, mid, fusion)
        sf2 = _gather_feats(store, end, fusion)
        r2, c2 = dcf_forward(tf2, label2, sf2, cfg.lam)
        records.append({"b": b, "r1": r1, "c1": c1, "r2": r2, "c2": c2,
                        "mid": mid, "end": end})
    responses = [rec["r2"] for rec in records]
    losses: dict[str, float] = {}
    g_resp = [np.zeros_like(r) for r in responses]
    total = 0.0
    for i, j, name in _pairwise_terms(branches):
        l, ga, gb = consistency_loss(responses[i], responses[j], cfg.loss_norm)
        losses[name] = l
        total += l
        g_resp[i] += ga
        g_resp[j] += gb
    if coeff != 0.0 and grads is not None:
        for rec, g in zip(records, g_resp):
            gt2, gs2, glabel2 = cf_backward(coeff * g, rec["c2"])
            _scatter_feat_grad(store, rec["mid"], gt2, fusion)
            _scatter_feat_grad(store, rec["end"], gs2, fusion)
            g_r1 = glabel2 * ((rec["r1"] > 0.0) & (rec["r1"] < 1.0))
            gt1, gs1, _ = cf_backward(g_r1, rec["c1"])
            _scatter_feat_grad(store, rec["b"]["template"], gt1, fusion)
            _scatter_feat_grad(store, rec["b"]["search"], gs1, fusion)
    return total, losses


def _cycle_sample(store, cfg, label, coeff, grads, frames: int):
    """Cycle-consistency baseline on the RGB-T branch only: track forward
    through the frames, then backward to frame t; the loss compares the final
    backward response with the initial Gaussian label."""
    fusion = cfg.fusion

    def fused(frame_prefix):
        return _gather_feats(
            store, [("rgb", f"{frame_prefix}_rgb"), ("thermal", f"{frame_prefix}_t3")], fusion
        )

    order = ["t", "s", "e", "s", "t"] if frames == 3 else ["t", "s", "t"]
    hops = []
    cur_label = label
    for a, b in zip(order[:-1], order[1:]):
        resp, cache = dcf_forward(fused(a), cur_label, fused(b), cfg.lam)
        hops.append({"from": a, "to": b, "resp": resp, "cache": cache, "label": cur_label})
        cur_label = np.clip(resp, 0.0, 1.0)
    final = hops[-1]["resp"]
    loss, g_final, _ = consistency_loss(final, label, cfg.loss_norm)
    if coeff != 0.0 and grads is not None:
        g = coeff * g_final
        for idx in range(len(hops) - 1, -1, -1):
            hop = hops[idx]
            gt, gs, glabel = cf_backward(g, hop["cache"])
            _scatter_feat_grad(store, [("rgb", f"{hop['from']}_rgb"),
                                       ("thermal", f"{hop['from']}_t3")], gt, fusion)
            _scatter_feat_grad(store, [("rgb", f"{hop['to']}_rgb"),
                                       ("thermal", f"{hop['to']}_t3")], gs, fusion)
            if idx > 0:
                # this hop's label was the clamped response of the hop before
                prev_resp = hops[idx - 1]["resp"]
                g = glabel * ((prev_resp > 0.0) & (prev_resp < 1.0))
    return loss, {"cycle": loss}


def _sample_loss_and_grads(pair, params, cfg, window, label, variant, coeff, grads, dtype):
    inputs = _pair_inputs(pair, cfg, dtype)
    store = _ExtStore(params, cfg, window, inputs)
    if variant in ("xic2", "three-branch"):
        total, losses = _xic2_sample(store, cfg, label, coeff, grads)
    elif variant == "xic3":
        total, losses = _xic3_sample(store, cfg, label, coeff, grads)
    elif variant == "cycle2":
        total, losses = _cycle_sample(store, cfg, label, coeff, grads, frames=2)
    elif variant == "cycle3":
        total, losses = _cycle_sample(store, cfg, label, coeff, grads, frames=3)
    else:
        raise InvalidConfigError(f"unknown training variant {variant!r}")
    if coeff != 0.0 and grads is not None:
        store.backward_into(grads)
    return total, losses


# ---------------------------------------------------------------------------
# Batch step and training loop
# ---------------------------------------------------------------------------

def train_step(
    batch: list[TrainingPair],
    params: dict[str, FeatureExtractorParams],
    cfg: ModelConfig,
    schedule: TrainSchedule,
    lr: float,
    velocity: dict[str, np.ndarray],
    variant: str | None = None,
) -> LossReport:
    """One optimization step over a mini-batch. Raises DegenerateBatchError
    when the drop masks leave no survivors (caller skips the batch)."""
    if not batch:
        raise InvalidInputError("empty batch")
    variant = variant or schedule.variant
    cfg.validate()
    dtype = schedule.dtype
    n = len(batch)

    d = np.array([sample_difference(p.template_rgb, p.search_rgb) for p in batch])
    noisy_mask, bg_mask = compute_drop_masks(d, schedule.noisy_frac, schedule.bg_frac)
    d_norm = normalize_weights(noisy_mask, bg_mask)

    window = cosine_window(cfg.patch_size, cfg.patch_size, dtype) if cfg.window else None
    p = cfg.patch_size
    label = gaussian_label(p, p, cfg.sigma, (p // 2, p // 2)).astype(dtype)

    fp = flat_params(params)
    grads = {name: np.zeros_like(arr) for name, arr in fp.items()}
    per_losses = []
    branch_totals: dict[str, float] = {}
    for i, pair in enumerate(batch):
        coeff = d_norm[i] / n
        loss_i, losses = _sample_loss_and_grads(
            pair, params, cfg, window, label, variant, coeff, grads, dtype
        )
        per_losses.append(loss_i)
        for name, v in losses.items():
            branch_totals[name] = branch_totals.get(name, 0.0) + v / n

    final = weighted_loss(per_losses, d_norm)
    if not np.isfinite(final):
        raise TrainingDivergedError("non-finite batch loss")
    # biases stay at their zero init: a bias gradient is a spatial sum over
    # the whole response, orders of magnitude larger than any weight
    # gradient, and letting it train floods the feature maps with constant
    # offsets that align the branch responses without localizing anything
    for name in grads:
        if name.endswith(".bias"):
            grads[name][:] = 0.0
    sgd_step(fp, grads, velocity, lr, schedule.momentum, schedule.weight_decay)
    return LossReport(
        per_sample_losses=per_losses,
        final_loss=final,
        branch_losses=branch_totals,
        dropped_noisy=int(n - noisy_mask.sum()),
        dropped_background=int(n - bg_mask.sum()),
    )


def train(
    dataset: list[TrainingPair],
    cfg: ModelConfig,
    schedule: TrainSchedule,
    out_dir: str | None = None,
    params: dict[str, FeatureExtractorParams] | None = None,
    start_epoch: int = 0,
    log_path: str | None = None,
) -> tuple[dict[str, FeatureExtractorParams], list[dict]]:
    """Full training loop: shuffled mini-batches, geometric LR decay, one
    checkpoint per epoch, and a newline-delimited structured log."""
    if not dataset:
        raise InvalidInputError("empty dataset")
    cfg.validate()
    dtype = schedule.dtype
    if params is None:
        params = build_params(cfg, schedule.seed, dtype)
    else:
        params = {k: p.astype(dtype) for k, p in params.items()}
    velocity: dict[str, np.ndarray] = {}
    rng = np.random.default_rng(schedule.seed + 1000)
    log: list[dict] = []
    if log_path and os.path.dirname(log_path):
        os.makedirs(os.path.dirname(log_path), exist_ok=True)
    log_fh = open(log_path, "a") if log_path else None
    last_ckpt = None
    try:
        for epoch in range(start_epoch, schedule.epochs):
            lr = schedule.lr_at(epoch)
            order = rng.permutation(len(dataset))
            epoch_losses = []
            step = 0
            for lo in range(0, len(dataset), schedule.batch_size):
                batch = [dataset[k] for k in order[lo:lo + schedule.batch_size]]
                try:
                    report = train_step(batch, params, cfg, schedule, lr, velocity)
                except DegenerateBatchError:
                    entry = {"epoch": epoch, "step": step, "lr": lr, "loss": None,
                             "dropped_noisy": len(batch), "dropped_background": len(batch),
                             "skipped": True}
                    log.append(entry)
                    if log_fh:
                        log_fh.write(json.dumps(entry) + "\n")
                    step += 1
                    continue
                epoch_losses.append(report.final_loss)
                entry = {
                    "epoch": epoch, "step": step, "lr": lr,
                    "loss": report.final_loss,
                    "dropped_noisy": report.dropped_noisy,
                    "dropped_background": report.dropped_background,
                }
                log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                step += 1
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            entry = {"epoch": epoch, "mean_loss": mean_loss, "lr": lr}
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if out_dir:
                os.makedirs(out_dir, exist_ok=True)
                ckpt = os.path.join(out_dir, f"checkpoint_epoch_{epoch:03d}.bin")
                save_params(ckpt, params, meta={"epoch": epoch,
                                                "feature_channels": cfg.feature_channels})
                last_ckpt = ckpt
                latest = os.path.join(out_dir, "checkpoint_latest.bin")
                save_params(latest, params, meta={"epoch": epoch,
                                                  "feature_channels": cfg.feature_channels})
            if not np.isfinite(mean_loss):
                raise TrainingDivergedError(
                    f"non-finite mean loss at epoch {epoch}; "
                    f"last good checkpoint: {last_ckpt}"
                )
    finally:
        if log_fh:
            log_fh.close()
    return params, log
