"""Evidential classification of homogeneous-region patches.

The network's exponential head emits non-negative evidence e per class;
alpha = e + 1 parameterizes a Dirichlet over the class pmf, giving estimated
probabilities p_hat = alpha / S and uncertainty u_hat = K / S with
S = sum(alpha). Training minimizes the Bayes-risk MSE of the pmf under that
Dirichlet plus an annealed KL penalty that shrinks misleading evidence.
High uncertainty flags a patch as a candidate new microstructure class.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from . import neuralnet as nn

_CLAMP = 10.0


@dataclass
class DirichletOutput:
    evidence: np.ndarray
    alpha: np.ndarray
    strength: float
    p_hat: np.ndarray
    uncertainty: float


def dirichlet_output(evidence: np.ndarray) -> DirichletOutput:
    evidence = np.asarray(evidence, dtype=np.float64)
    if np.any(evidence < 0):
        raise ValueError("evidence must be non-negative")
    alpha = evidence + 1.0
    strength = float(alpha.sum())
    return DirichletOutput(
        evidence=evidence,
        alpha=alpha,
        strength=strength,
        p_hat=alpha / strength,
        uncertainty=len(alpha) / strength,
    )


def evidence_head(logits: np.ndarray, clamp: float = _CLAMP) -> DirichletOutput:
    """Evidence via a clamped exponential activation over class logits."""
    logits = np.asarray(logits, dtype=np.float64)
    return dirichlet_output(np.exp(np.clip(logits, -clamp, clamp)))


@dataclass
class RankedPrediction:
    patch_id: str
    candidates: list              # [(class id, p_hat)], p_hat descending
    uncertainty: float
    novel: bool
    prior_subset: set | None = None

    def to_json(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "candidates": [{"class": int(c), "p": float(p)}
                           for c, p in self.candidates],
            "uncertainty": float(self.uncertainty),
            "novel": bool(self.novel),
        }


@dataclass
class Decision:
    kind: str                     # "existing" | "novel"
    class_id: int | None = None


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    anneal_epochs: int = 10       # KL coefficient ramps to 1 over this many epochs
    lr: float = 1e-3

    def __post_init__(self):
        if self.anneal_epochs < 1:
            raise ValueError("anneal_epochs must be >= 1")


@dataclass
class LabeledPatches:
    """Patches with integer labels indexing into `class_ids`."""
    images: np.ndarray            # (n, P, P) grayscale
    labels: np.ndarray            # (n,)
    class_ids: list

    def __len__(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _dirichlet_kl_to_uniform(alpha: np.ndarray):
    """KL(Dir(alpha) || Dir(1, ..., 1)) per row, with gradient wrt alpha."""
    s = alpha.sum(axis=1, keepdims=True)
    k = alpha.shape[1]
    kl = (gammaln(s[:, 0]) - gammaln(alpha).sum(axis=1) - gammaln(k)
          + ((alpha - 1.0) * (digamma(alpha) - digamma(s))).sum(axis=1))
    grad = (alpha - 1.0) * polygamma(1, alpha) \
        - polygamma(1, s) * (s - k)
    return kl, grad


def _edl_terms(alpha: np.ndarray, t: np.ndarray, lam: float):
    """Per-sample loss and gradient wrt alpha for batches (n, K)."""
    s = alpha.sum(axis=1, keepdims=True)
    p = alpha / s
    err = ((t - p) ** 2).sum(axis=1)
    psq = (p * p).sum(axis=1, keepdims=True)
    var = (1.0 - psq[:, 0]) / (s[:, 0] + 1.0)
    alpha_t = t + (1.0 - t) * alpha
    kl, kl_grad = _dirichlet_kl_to_uniform(alpha_t)
    loss = err + var + lam * kl

    d_err = (2.0 / s) * ((p - t) - ((p - t) * p).sum(axis=1, keepdims=True))
    d_var = (-2.0 * (p - psq) / (s * (s + 1.0))
             - (1.0 - psq) / (s + 1.0) ** 2)
    grad = d_err + d_var + lam * (1.0 - t) * kl_grad
    return loss, grad


def edl_loss(alpha, t, lam: float) -> float:
    """Bayes-risk MSE of the class pmf under Dir(alpha) plus lam * KL penalty.

    `t` must be one-hot. Accepts single vectors or batches; batches return the
    mean loss.
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if alpha.shape != t.shape:
        raise ValueError("alpha and t shapes differ")
    one_hot = np.all(np.isin(t, (0.0, 1.0))) and np.all(t.sum(axis=1) == 1.0)
    if not one_hot:
        raise ValueError("t must be one-hot")
    loss, _ = _edl_terms(alpha, t, lam)
    return float(loss.mean())


def edl_loss_fn(lam: float):
    """Loss closure over network evidence output, for training/grad checks."""
    def fn(evidence, t_onehot):
        alpha = np.asarray(evidence, dtype=np.float64) + 1.0
        loss, grad = _edl_terms(alpha, t_onehot, lam)
        n = len(loss)
        return float(loss.mean()), (grad / n).astype(evidence.dtype)
    return fn


# ---------------------------------------------------------------------------
# Classifier network and checkpoint
# ---------------------------------------------------------------------------

@dataclass
class ClassifierSpec:
    input_size: int = 64
    channels: tuple = (12, 24, 48)
    clamp: float = _CLAMP


def class_list_hash(class_ids) -> str:
    return hashlib.sha256(
        json.dumps([int(c) for c in class_ids]).encode()).hexdigest()[:16]


def build_classifier_net(spec: ClassifierSpec, k: int, seed: int) -> nn.Network:
    """Three stride-2 conv blocks, one dense layer, exponential evidence head.

    The first conv's init is scaled down because inputs are mean-subtracted
    raw grayscale (magnitude ~1e2), keeping early activations O(1).
    """
    layers = [
        nn.layer("conv2d", "conv1", channels=spec.channels[0], kernel=3,
                 stride=2, padding=1, init_scale=1.0 / 64.0),
        nn.layer("relu", "relu1"),
        nn.layer("conv2d", "conv2", channels=spec.channels[1], kernel=3,
                 stride=2, padding=1),
        nn.layer("relu", "relu2"),
        nn.layer("conv2d", "conv3", channels=spec.channels[2], kernel=3,
                 stride=2, padding=1),
        nn.layer("relu", "relu3"),
        nn.layer("avgpool2d", "pool", kernel=2, stride=2),
        nn.layer("flatten", "flat"),
        nn.layer("dense", "logits", units=k),
        nn.layer("exp_head", "evidence", clamp=spec.clamp),
    ]
    net = nn.Network(layers, (1, spec.input_size, spec.input_size),
                     seed=seed, dtype=np.float32, class_count=k)
    if net.num_params() > 5e4:
        raise ValueError(f"classifier exceeds parameter budget: {net.num_params()}")
    return net


@dataclass
class ClassifierCheckpoint:
    net: nn.Network
    class_ids: list
    train_mean: float
    input_size: int
    metrics: list = field(default_factory=list)

    @property
    def class_hash(self) -> str:
        return class_list_hash(self.class_ids)

    def save(self, path) -> None:
        nn.save_network(self.net, path, extras={
            "kind": "classifier",
            "class_ids": [int(c) for c in self.class_ids],
            "class_hash": self.class_hash,
            "train_mean": self.train_mean,
            "input_size": self.input_size,
            "metrics": self.metrics,
        })

    @classmethod
    def load(cls, path) -> "ClassifierCheckpoint":
        net, extras = nn.load_network(path)
        if extras.get("kind") != "classifier":
            raise ValueError(f"{path}: not a classifier checkpoint")
        return cls(net=net, class_ids=extras["class_ids"],
                   train_mean=extras["train_mean"],
                   input_size=extras["input_size"],
                   metrics=extras.get("metrics", []))


def _prep(images: np.ndarray, mean: float) -> np.ndarray:
    return (np.asarray(images, dtype=np.float32) - np.float32(mean))[:, None]


def _accuracy_and_top(evidence: np.ndarray, labels: np.ndarray, top_n: int):
    pred = evidence.argmax(axis=1)
    acc = float((pred == labels).mean())
    order = np.argsort(-evidence, axis=1)[:, :top_n]
    top = float(np.any(order == labels[:, None], axis=1).mean())
    return acc, top


def _expand_dense_columns(net: nn.Network, layer_name: str, new_k: int,
                          seed: int) -> nn.Network:
    """Rebuild with `new_k` output units, copying existing columns."""
    layers = []
    for spec in net.layers:
        spec = dict(spec)
        if spec["name"] == layer_name:
            spec["units"] = new_k
        layers.append(spec)
    grown = nn.Network(layers, net.input_shape, seed=seed, dtype=net.dtype,
                       class_count=new_k)
    for name in net.param_order:
        if name == layer_name + ".w":
            grown.params[name][:, :net.params[name].shape[1]] = net.params[name]
        elif name == layer_name + ".b":
            grown.params[name][:net.params[name].shape[0]] = net.params[name]
        else:
            grown.params[name] = net.params[name].copy()
    return grown


def train_classifier(train: LabeledPatches, cfg: TrainConfig,
                     spec: ClassifierSpec | None = None,
                     val: LabeledPatches | None = None,
                     warm_start: ClassifierCheckpoint | None = None,
                     ) -> ClassifierCheckpoint:
    """Train (or fine-tune) the evidential classifier.

    The KL coefficient follows lam(epoch) = min(1, epoch / anneal_epochs) with
    epochs counted from 0. Warm starting from a checkpoint with fewer classes
    expands the output layer, copying existing columns.
    """
    k = len(train.class_ids)
    if k < 2:
        raise ValueError("need at least 2 classes")
    if train.labels.max() >= k or train.labels.min() < 0:
        raise ValueError("label outside the class list")
    spec = spec or ClassifierSpec()
    if warm_start is not None:
        net = warm_start.net
        if warm_start.class_ids != list(train.class_ids)[:len(warm_start.class_ids)]:
            raise ValueError("warm-start class list is not a prefix of the dataset's")
        if len(warm_start.class_ids) < k:
            net = _expand_dense_columns(net, "logits", k, seed=cfg.seed)
        train_mean = warm_start.train_mean
        input_size = warm_start.input_size
    else:
        net = build_classifier_net(spec, k, seed=cfg.seed)
        train_mean = float(np.mean(train.images))
        input_size = spec.input_size

    x = _prep(train.images, train_mean)
    if x.shape[2] != input_size:
        raise ValueError(f"patch size {x.shape[2]} != network input {input_size}")
    onehot = np.eye(k, dtype=np.float32)[train.labels]
    state = nn.init_adam(net.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    top_n = min(5, k)
    metrics = []
    for epoch in range(cfg.epochs):
        lam = min(1.0, epoch / cfg.anneal_epochs)
        loss_fn = edl_loss_fn(lam)
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = nn.forward(net, x[idx])
            loss, dout = loss_fn(out, onehot[idx])
            grads, _ = nn.backward(net, cache, dout)
            nn.adam_step(net.params, grads, state)
            losses.append(loss)
        row = {"epoch": epoch, "lambda": lam,
               "train_loss": float(np.mean(losses))}
        ev, _ = nn.forward(net, x)
        row["train_acc"], _ = _accuracy_and_top(ev, train.labels, top_n)
        if val is not None:
            vx = _prep(val.images, train_mean)
            vev, _ = nn.forward(net, vx)
            row["val_loss"] = edl_loss(vev.astype(np.float64) + 1.0,
                                       np.eye(k)[val.labels], lam)
            row["val_acc"], row["val_top5"] = _accuracy_and_top(
                vev, val.labels, top_n)
        metrics.append(row)
    return ClassifierCheckpoint(net=net, class_ids=list(train.class_ids),
                                train_mean=train_mean, input_size=input_size,
                                metrics=metrics)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def classify_patch(ckpt: ClassifierCheckpoint, patch: np.ndarray,
                   k_prime: int = 10, prior_subset: set | None = None,
                   tau_u: float = 0.5, patch_id: str = "") -> RankedPrediction:
    """Rank candidate classes for one patch.

    With a prior subset, probabilities are renormalized over the subset while
    the uncertainty is always computed from the unrestricted output, so an
    incorrect prior cannot mask a novel class.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (ckpt.input_size, ckpt.input_size):
        raise ValueError(f"patch shape {patch.shape} != "
                         f"({ckpt.input_size}, {ckpt.input_size})")
    if prior_subset is not None:
        prior_subset = set(int(c) for c in prior_subset)
        if not prior_subset:
            raise ValueError("prior_subset must not be empty")
        unknown = prior_subset - set(int(c) for c in ckpt.class_ids)
        if unknown:
            raise ValueError(f"prior_subset contains unknown classes {unknown}")
    ev, _ = nn.forward(ckpt.net, _prep(patch[None], ckpt.train_mean))
    out = dirichlet_output(ev[0].astype(np.float64))
    p = out.p_hat
    if prior_subset is not None:
        mask = np.array([1.0 if int(c) in prior_subset else 0.0
                         for c in ckpt.class_ids])
        restricted = p * mask
        total = restricted.sum()
        p = restricted / total if total > 0 else mask / mask.sum()
        allowed = [(i, c) for i, c in enumerate(ckpt.class_ids)
                   if int(c) in prior_subset]
    else:
        allowed = list(enumerate(ckpt.class_ids))
    ranked = sorted(allowed, key=lambda ic: (-p[ic[0]], int(ic[1])))
    n_take = min(k_prime, len(allowed))
    candidates = [(int(c), float(p[i])) for i, c in ranked[:n_take]]
    return RankedPrediction(
        patch_id=patch_id,
        candidates=candidates,
        uncertainty=out.uncertainty,
        novel=out.uncertainty > tau_u,
        prior_subset=prior_subset,
    )


def novelty_decision(pred: RankedPrediction, tau_u: float) -> Decision:
    """Novel iff uncertainty strictly exceeds tau_u."""
    if not 0.0 < tau_u < 1.0:
        raise ValueError("tau_u must be in (0, 1)")
    if pred.uncertainty > tau_u:
        return Decision(kind="novel")
    return Decision(kind="existing", class_id=int(pred.candidates[0][0]))
