"""Encoder-decoder segmentation network with a multi-rate dilated block.

The encoder downsamples with stride-2 convolutions, a bank of parallel dilated
3x3 convolutions captures texture context at several scales, and the decoder
upsamples bilinearly with one skip connection from the quarter-resolution
encoder feature. Training uses softmax cross-entropy with per-class balancing
weights (applied with exponent 0.5), ignoring UNLABELED pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .imagecore import UNLABELED, LabelMask, Micrograph

_PARAM_BUDGET = 2e5


@dataclass
class SegNetConfig:
    input_size: int = 64
    downsample: int = 8
    aspp_rates: tuple = (1, 2, 4)
    base_channels: int = 16
    class_count: int = 2

    def __post_init__(self):
        if self.downsample not in (4, 8, 16):
            raise ValueError("downsample must be 4, 8, or 16")
        if self.input_size % self.downsample:
            raise ValueError("input_size must be divisible by the downsample factor")
        if len(set(self.aspp_rates)) != len(self.aspp_rates) or min(self.aspp_rates) < 1:
            raise ValueError("aspp_rates must be distinct and >= 1")
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class ClassWeights:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(~np.isfinite(self.w)) or np.any(self.w <= 0):
            raise ValueError("class weights must be finite and positive")

    @classmethod
    def from_masks(cls, masks, k: int) -> "ClassWeights":
        """w_j = m_total / (k * m_j) over the labeled pixels of the masks."""
        counts = np.zeros(k, dtype=np.int64)
        for mask in masks:
            labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
            valid = labels[labels != UNLABELED]
            if valid.size and valid.max() >= k:
                raise ValueError(f"mask label {valid.max()} >= class count {k}")
            counts += np.bincount(valid.astype(np.int64), minlength=k)
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise ValueError(f"classes absent from training data: {missing}")
        total = counts.sum()
        return cls(w=total / (k * counts))


def build_segnet(cfg: SegNetConfig, seed: int = 0) -> nn.Network:
    """(1, H, W) -> (k, H, W) per-pixel class scores."""
    size = cfg.input_size
    base = cfg.base_channels
    n_enc = int(math.log2(cfg.downsample))
    layers = []
    prev = "input"
    for i in range(n_enc):
        kwargs = {"init_scale": 1.0 / 64.0} if i == 0 else {}
        layers.append(nn.layer("conv2d", f"enc{i + 1}", inputs=[prev],
                               channels=base * 2 ** min(i, 2), kernel=3,
                               stride=2, padding=1, **kwargs))
        layers.append(nn.layer("relu", f"enc{i + 1}_relu"))
        prev = f"enc{i + 1}_relu"
    skip = "enc2_relu"
    branch_names = []
    for rate in cfg.aspp_rates:
        layers.append(nn.layer("conv2d", f"aspp_r{rate}", inputs=[prev],
                               channels=base * 2, kernel=3, stride=1,
                               dilation=rate, padding=rate))
        layers.append(nn.layer("relu", f"aspp_r{rate}_relu"))
        branch_names.append(f"aspp_r{rate}_relu")
    layers.append(nn.layer("concat", "aspp_cat", inputs=branch_names))
    layers.append(nn.layer("conv2d", "fuse", channels=base * 4, kernel=1))
    layers.append(nn.layer("relu", "fuse_relu"))
    quarter = size // 4
    prev = "fuse_relu"
    if cfg.downsample > 4:
        layers.append(nn.layer("upsample", "up_quarter", inputs=[prev],
                               size=(quarter, quarter)))
        prev = "up_quarter"
    layers.append(nn.layer("concat", "skip_cat", inputs=[prev, skip]))
    layers.append(nn.layer("conv2d", "dec", channels=base * 3, kernel=3, padding=1))
    layers.append(nn.layer("relu", "dec_relu"))
    layers.append(nn.layer("upsample", "up_full", size=(size, size)))
    layers.append(nn.layer("conv2d", "head", channels=cfg.class_count, kernel=1))
    net = nn.Network(layers, (1, size, size), seed=seed, dtype=np.float32,
                     class_count=cfg.class_count)
    if net.num_params() > _PARAM_BUDGET:
        raise ValueError(f"segnet exceeds parameter budget: {net.num_params()}")
    return net


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _balanced_ce(scores: np.ndarray, masks: np.ndarray, w: np.ndarray):
    """Mean over labeled pixels of -sqrt(w_y) log p_y; returns (loss, dscores)."""
    n, k = scores.shape[:2]
    if masks.shape != (n,) + scores.shape[2:]:
        raise ValueError(f"mask shape {masks.shape} does not match scores")
    labeled = masks != UNLABELED
    if not labeled.any():
        raise ValueError("no labeled pixels")
    if masks[labeled].max() >= k:
        raise ValueError(f"mask label {masks[labeled].max()} >= class count {k}")
    logp = _log_softmax(scores.astype(np.float64))
    sw = np.sqrt(w)
    safe = np.where(labeled, masks, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    weights = np.where(labeled, sw[safe], 0.0)
    count = int(labeled.sum())
    loss = -float((weights * picked).sum()) / count

    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (weights[:, None] / count) * (p - onehot)
    grad[~labeled[:, None].repeat(k, axis=1)] = 0.0
    return loss, grad.astype(scores.dtype)


def balanced_ce_loss(scores: np.ndarray, mask: LabelMask | np.ndarray,
                     w: ClassWeights) -> float:
    """Class-balanced cross-entropy for one (k, H, W) score map."""
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    loss, _ = _balanced_ce(np.asarray(scores)[None], labels[None], w.w)
    return loss


def balanced_ce_loss_fn(w: ClassWeights):
    def fn(scores, masks):
        return _balanced_ce(scores, masks, w.w)
    return fn


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class SegTrainConfig:
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    lr: float = 1e-3
    stop_at_val_acc: float | None = None    # early exit once reached


@dataclass
class SegDataset:
    images: np.ndarray              # (n, H, W) grayscale
    masks: np.ndarray               # (n, H, W) int labels

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.int32)
        if self.images.shape != self.masks.shape:
            raise ValueError("images and masks must align")

    def __len__(self):
        return len(self.images)


@dataclass
class SegCheckpoint:
    net: nn.Network
    class_ids: list
    train_mean: float
    config: SegNetConfig
    metrics: list = field(default_factory=list)

    def save(self, path) -> None:
        nn.save_network(self.net, path, extras={
            "kind": "segmenter",
            "class_ids": [int(c) for c in self.class_ids],
            "train_mean": self.train_mean,
            "config": {
                "input_size": self.config.input_size,
                "downsample": self.config.downsample,
                "aspp_rates": list(self.config.aspp_rates),
                "base_channels": self.config.base_channels,
                "class_count": self.config.class_count,
            },
            "metrics": self.metrics,
        })

    @classmethod
    def load(cls, path) -> "SegCheckpoint":
        net, extras = nn.load_network(path)
        if extras.get("kind") != "segmenter":
            raise ValueError(f"{path}: not a segmenter checkpoint")
        c = extras["config"]
        cfg = SegNetConfig(input_size=c["input_size"], downsample=c["downsample"],
                           aspp_rates=tuple(c["aspp_rates"]),
                           base_channels=c["base_channels"],
                           class_count=c["class_count"])
        return cls(net=net, class_ids=extras["class_ids"],
                   train_mean=extras["train_mean"], config=cfg,
                   metrics=extras.get("metrics", []))


def pixel_metrics(pred: np.ndarray, truth: np.ndarray, k: int):
    """Pixel accuracy and per-class true-positive rate over labeled pixels."""
    labeled = truth != UNLABELED
    acc = float((pred[labeled] == truth[labeled]).mean())
    tpr = {}
    for j in range(k):
        sel = labeled & (truth == j)
        tpr[j] = float((pred[sel] == j).mean()) if sel.any() else float("nan")
    return acc, tpr


def train_segnet(dataset: SegDataset, cfg: SegNetConfig, tcfg: SegTrainConfig,
                 val: SegDataset | None = None,
                 warm_start: SegCheckpoint | None = None,
                 class_ids: list | None = None) -> SegCheckpoint:
    """Train the segmentation network with the class-balanced loss."""
    k = cfg.class_count
    weights = ClassWeights.from_masks(dataset.masks, k)
    if warm_start is not None:
        net = warm_start.net
        train_mean = warm_start.train_mean
        cfg = warm_start.config
    else:
        net = build_segnet(cfg, seed=tcfg.seed)
        train_mean = float(dataset.images.mean())
    if dataset.images.shape[1] != cfg.input_size:
        raise ValueError(f"dataset tiles {dataset.images.shape[1:]} != "
                         f"network input {cfg.input_size}")
    x = (dataset.images.astype(np.float32) - np.float32(train_mean))[:, None]
    loss_fn = balanced_ce_loss_fn(weights)
    state = nn.init_adam(net.params, lr=tcfg.lr)
    rng = np.random.default_rng(tcfg.seed)
    metrics = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            out, cache = nn.forward(net, x[idx])
            loss, dout = loss_fn(out, dataset.masks[idx])
            grads, _ = nn.backward(net, cache, dout)
            nn.adam_step(net.params, grads, state)
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        out, _ = nn.forward(net, x)
        row["train_acc"], _ = pixel_metrics(out.argmax(axis=1), dataset.masks, k)
        if val is not None:
            vx = (val.images.astype(np.float32) - np.float32(train_mean))[:, None]
            vout, _ = nn.forward(net, vx)
            row["val_acc"], row["val_tpr"] = pixel_metrics(
                vout.argmax(axis=1), val.masks, k)
        metrics.append(row)
        if (tcfg.stop_at_val_acc is not None and val is not None
                and row["val_acc"] >= tcfg.stop_at_val_acc):
            break
    return SegCheckpoint(net=net, class_ids=list(class_ids or range(k)),
                         train_mean=train_mean, config=cfg, metrics=metrics)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _softmax_channels(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def segment(ckpt: SegCheckpoint, m: Micrograph):
    """Segment a full image by tiling with 50% overlap and averaging
    probabilities. Returns (LabelMask, per-pixel max probability map); every
    pixel gets a label (no border band, unlike the score-clustering route)."""
    ts = ckpt.config.input_size
    px = m.pixels
    pad_r = max(0, ts - m.height)
    pad_c = max(0, ts - m.width)
    if pad_r or pad_c:
        px = np.pad(px, ((0, pad_r), (0, pad_c)), mode="reflect")
    h, w = px.shape
    k = ckpt.config.class_count
    prob_sum = np.zeros((k, h, w), dtype=np.float64)
    cover = np.zeros((h, w), dtype=np.float64)

    def starts(extent):
        vals = list(range(0, extent - ts + 1, ts // 2))
        if vals[-1] != extent - ts:
            vals.append(extent - ts)
        return vals

    x = (px.astype(np.float32) - np.float32(ckpt.train_mean))
    for r in starts(h):
        for c in starts(w):
            tile = x[r:r + ts, c:c + ts][None, None]
            out, _ = nn.forward(ckpt.net, tile)
            prob_sum[:, r:r + ts, c:c + ts] += _softmax_channels(
                out[0].astype(np.float64))
            cover[r:r + ts, c:c + ts] += 1.0
    prob = prob_sum / cover[None]
    prob = prob[:, :m.height, :m.width]
    labels = prob.argmax(axis=0).astype(np.int32)
    return LabelMask(labels=labels), prob.max(axis=0)


def expand_classes(ckpt: SegCheckpoint, new_class_id: int, seed: int = 0,
                   zero_init: bool = False) -> SegCheckpoint:
    """Append one output channel for a new class; existing channels are copied
    bit-exactly. The new channel is He-initialized from `seed` (zero-init mode
    exists for the preservation test only)."""
    if int(new_class_id) in [int(c) for c in ckpt.class_ids]:
        raise ValueError(f"class id {new_class_id} already present")
    old = ckpt.net
    k_new = ckpt.config.class_count + 1
    cfg = SegNetConfig(input_size=ckpt.config.input_size,
                       downsample=ckpt.config.downsample,
                       aspp_rates=ckpt.config.aspp_rates,
                       base_channels=ckpt.config.base_channels,
                       class_count=k_new)
    grown = build_segnet(cfg, seed=seed)
    for name in old.param_order:
        if name == "head.w":
            grown.params[name][:ckpt.config.class_count] = old.params[name]
            if zero_init:
                grown.params[name][ckpt.config.class_count:] = 0.0
        elif name == "head.b":
            grown.params[name][:ckpt.config.class_count] = old.params[name]
            if zero_init:
                grown.params[name][ckpt.config.class_count:] = 0.0
        else:
            grown.params[name] = old.params[name].copy()
    return SegCheckpoint(net=grown, class_ids=list(ckpt.class_ids) + [int(new_class_id)],
                         train_mean=ckpt.train_mean, config=cfg, metrics=[])
