"""Per-pixel score vectors from a fitted pixel predictor, plus smoothing/PCA.

The predictor models a pixel value as Gaussian with mean g(x; theta) given its
neighborhood x and fixed variance sigma^2, so the per-pixel log-likelihood
gradient is ((y - g) / sigma^2) * dg/dtheta. For the linear predictor at its
least-squares fit the empirical mean of these vectors over the fitting pixels
is the zero vector, which downstream clustering relies on.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import convolve1d

from . import neuralnet as nn
from .imagecore import Micrograph, NeighborhoodSamples, extract_neighborhoods

_NOISE_FLOOR = 1e-12


@dataclass
class PredictorSpec:
    kind: str = "linear"            # "linear" | "mlp"
    hidden_units: int = 10
    epochs: int = 80
    batch_size: int = 256
    lr: float = 1e-3
    full_scores: bool = False       # mlp: score all parameters, not just final layer


@dataclass
class PixelPredictor:
    kind: str
    l_s: int
    noise_variance: float
    weights: dict                   # linear: w, b; mlp: w1, b1, w2, b2, mu, sd
    full_scores: bool = False

    @property
    def parameters(self) -> np.ndarray:
        """Flat parameter vector in score-component order."""
        if self.kind == "linear":
            return np.concatenate([self.weights["w"], [self.weights["b"]]])
        w = self.weights
        return np.concatenate([w["w1"].reshape(-1), w["b1"],
                               w["w2"].reshape(-1), w["b2"]])

    @property
    def score_dim(self) -> int:
        if self.kind == "linear":
            return self.weights["w"].shape[0] + 1
        if self.full_scores:
            return self.parameters.shape[0]
        return self.weights["w2"].shape[0] + 1

    def hash(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.weights):
            h.update(np.ascontiguousarray(self.weights[key], dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def predict(self, neighbors: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return neighbors @ self.weights["w"] + self.weights["b"]
        w = self.weights
        xs = (neighbors - w["mu"]) / w["sd"]
        hidden = np.maximum(xs @ w["w1"] + w["b1"], 0.0)
        return w["ymu"] + w["ysd"] * (hidden @ w["w2"] + w["b2"]).reshape(-1)


@dataclass
class PcaProjection:
    mean: np.ndarray                # (d,)
    components: np.ndarray          # (d, n_components)


@dataclass
class ScoreField:
    """Score vectors for the valid interior of one image.

    vectors[r, c] is the score at image pixel (r + border, c + border).
    """
    vectors: np.ndarray             # (h, w, d) float64
    image_shape: tuple[int, int]
    border: int
    smoothed: bool = False
    kernel_sigma: float | None = None
    predictor_hash: str = ""
    projection: PcaProjection | None = None

    @property
    def score_dim(self) -> int:
        return self.vectors.shape[2]

    def flat(self) -> np.ndarray:
        """Valid vectors in raster order, shape (h*w, d)."""
        h, w, d = self.vectors.shape
        return self.vectors.reshape(h * w, d)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _standardize(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mu) / sd, mu, sd


def _ols_refined(design, y):
    """Minimum-norm least squares with iterative refinement so the residual is
    orthogonal to the design columns to near machine precision."""
    theta = np.linalg.lstsq(design, y, rcond=None)[0]
    for _ in range(2):
        r = y - design @ theta
        theta = theta + np.linalg.lstsq(design, r, rcond=None)[0]
    return theta


def fit_predictor(samples: NeighborhoodSamples, spec: PredictorSpec,
                  seed: int = 0) -> PixelPredictor:
    """Fit the pixel predictor; linear in closed form, mlp with Adam."""
    x = samples.neighbors
    y = samples.targets
    n, f = x.shape
    if spec.kind == "linear":
        n_params = f + 1
    else:
        n_params = (f + 1) * spec.hidden_units + spec.hidden_units + 1
    if n < 2 * n_params:
        warnings.warn(f"only {n} samples for {n_params} parameters; "
                      "fit may be unstable", stacklevel=2)

    if spec.kind == "linear":
        xs, mu, sd = _standardize(x)
        design = np.concatenate([xs, np.ones((n, 1))], axis=1)
        theta = _ols_refined(design, y)
        w = theta[:-1] / sd
        b = theta[-1] - float(w @ mu)
        resid = y - (x @ w + b)
        return PixelPredictor(
            kind="linear", l_s=samples.l_s,
            noise_variance=max(float(np.mean(resid ** 2)), _NOISE_FLOOR),
            weights={"w": w, "b": b},
        )

    if spec.kind != "mlp":
        raise ValueError(f"unknown predictor kind {spec.kind!r}")

    xs, mu, sd = _standardize(x)
    ymu = float(y.mean())
    ysd = max(float(y.std()), 1e-9)
    net = nn.Network(
        [nn.layer("dense", "hidden", units=spec.hidden_units),
         nn.layer("relu", "act"),
         nn.layer("dense", "out", units=1)],
        input_shape=(f,), seed=seed, dtype=np.float32)
    state = nn.init_adam(net.params, lr=spec.lr)
    rng = np.random.default_rng(seed)
    xs32 = xs.astype(np.float32)
    y32 = ((y - ymu) / ysd).astype(np.float32).reshape(-1, 1)
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            out, cache = nn.forward(net, xs32[idx])
            diff = out - y32[idx]
            grads, _ = nn.backward(net, cache, diff / len(idx))
            nn.adam_step(net.params, grads, state)
    weights = {
        "w1": net.params["hidden.w"].astype(np.float64),
        "b1": net.params["hidden.b"].astype(np.float64),
        "w2": net.params["out.w"].astype(np.float64).reshape(-1),
        "b2": net.params["out.b"].astype(np.float64),
        "mu": mu, "sd": sd, "ymu": ymu, "ysd": ysd,
    }
    pred = PixelPredictor(kind="mlp", l_s=samples.l_s, noise_variance=1.0,
                          weights=weights, full_scores=spec.full_scores)
    resid = y - pred.predict(x)
    pred.noise_variance = max(float(np.mean(resid ** 2)), _NOISE_FLOOR)
    return pred


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def _mlp_param_grads(pred: PixelPredictor, neighbors: np.ndarray):
    """Per-sample gradient of g wrt the selected parameter subset."""
    w = pred.weights
    xs = (neighbors - w["mu"]) / w["sd"]
    a1 = xs @ w["w1"] + w["b1"]
    hidden = np.maximum(a1, 0.0)
    ysd = w["ysd"]
    if not pred.full_scores:
        # final dense layer only: d g / d w2 = ysd * hidden, d g / d b2 = ysd
        return ysd * np.concatenate([hidden, np.ones((len(xs), 1))], axis=1)
    act = (a1 > 0).astype(np.float64)
    db1 = act * w["w2"]                                   # (n, h)
    dw1 = np.einsum("nf,nh->nfh", xs, db1)                # (n, f, h)
    n = len(xs)
    return ysd * np.concatenate([dw1.reshape(n, -1), db1, hidden,
                                 np.ones((n, 1))], axis=1)


def compute_scores(m: Micrograph, pred: PixelPredictor) -> ScoreField:
    """Raw per-pixel score vectors, valid border l_s."""
    ns = extract_neighborhoods(m, pred.l_s)
    resid = (ns.targets - pred.predict(ns.neighbors)) / pred.noise_variance
    if pred.kind == "linear":
        grads = np.concatenate([ns.neighbors, np.ones((len(ns), 1))], axis=1)
    else:
        grads = _mlp_param_grads(pred, ns.neighbors)
    scores = resid[:, None] * grads
    h = m.height - 2 * pred.l_s
    w = m.width - 2 * pred.l_s
    return ScoreField(
        vectors=scores.reshape(h, w, -1),
        image_shape=(m.height, m.width),
        border=pred.l_s,
        predictor_hash=pred.hash(),
    )


def gaussian_kernel_2d(l_w: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian truncated to a (2*l_w+1)^2 window, normalized to sum 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    offs = np.arange(-l_w, l_w + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (offs / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def smooth_scores(f: ScoreField, l_w: int, kernel_sigma: float | None = None) -> ScoreField:
    """Gaussian weighted moving average over a (2*l_w+1)^2 window.

    Output valid border grows to l_s + l_w. The truncated kernel is separable,
    so smoothing runs as two 1-D convolutions; the 1-D factors are each
    normalized to sum 1, making the implied 2-D kernel sum to 1.
    """
    if f.smoothed:
        raise ValueError("field is already smoothed")
    if l_w < 0:
        raise ValueError("l_w must be >= 0")
    if l_w == 0:
        return replace(f, vectors=f.vectors.copy(), smoothed=True, kernel_sigma=None)
    if kernel_sigma is None:
        kernel_sigma = l_w / 2.0
    h, w, _ = f.vectors.shape
    if h <= 2 * l_w or w <= 2 * l_w:
        raise ValueError(f"window half-width {l_w} exceeds valid raw area {h}x{w}")
    offs = np.arange(-l_w, l_w + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (offs / kernel_sigma) ** 2)
    k1 /= k1.sum()
    out = convolve1d(f.vectors, k1, axis=0, mode="constant")
    out = convolve1d(out, k1, axis=1, mode="constant")
    return replace(
        f,
        vectors=np.ascontiguousarray(out[l_w:h - l_w, l_w:w - l_w]),
        border=f.border + l_w,
        smoothed=True,
        kernel_sigma=float(kernel_sigma),
    )


def reduce_scores(f: ScoreField, n_components: int) -> ScoreField:
    """Project vectors onto their leading principal components."""
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if n_components > f.score_dim:
        raise ValueError(f"n_components {n_components} exceeds score_dim {f.score_dim}")
    flat = f.flat()
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components]
    # sign convention: largest-magnitude loading positive, for reproducibility
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    projected = centered @ comps.T
    h, w, _ = f.vectors.shape
    return replace(
        f,
        vectors=projected.reshape(h, w, n_components),
        projection=PcaProjection(mean=mean, components=comps.T),
    )


# ---------------------------------------------------------------------------
# Serialization: JSON header + little-endian float64 blob, bit-exact
# ---------------------------------------------------------------------------

_MAGIC = b"MCSFIELD"


def save_field(f: ScoreField, path) -> None:
    header = {
        "image_shape": list(f.image_shape),
        "border": f.border,
        "smoothed": f.smoothed,
        "kernel_sigma": f.kernel_sigma,
        "predictor_hash": f.predictor_hash,
        "shape": list(f.vectors.shape),
        "has_projection": f.projection is not None,
    }
    if f.projection is not None:
        header["projection_shapes"] = {
            "mean": list(f.projection.mean.shape),
            "components": list(f.projection.components.shape),
        }
    head = json.dumps(header).encode()
    with open(str(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(f.vectors).astype("<f8").tobytes())
        if f.projection is not None:
            fh.write(np.ascontiguousarray(f.projection.mean).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(f.projection.components).astype("<f8").tobytes())


def load_field(path) -> ScoreField:
    with open(str(path), "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a score field file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    vectors = np.frombuffer(blob, dtype="<f8", count=n).reshape(shape).copy()
    projection = None
    if header["has_projection"]:
        off = n * 8
        pshapes = header["projection_shapes"]
        n_mean = int(np.prod(pshapes["mean"]))
        mean = np.frombuffer(blob, dtype="<f8", count=n_mean, offset=off).copy()
        off += n_mean * 8
        n_comp = int(np.prod(pshapes["components"]))
        comps = np.frombuffer(blob, dtype="<f8", count=n_comp, offset=off)
        projection = PcaProjection(mean=mean,
                                   components=comps.reshape(pshapes["components"]).copy())
    return ScoreField(
        vectors=vectors,
        image_shape=tuple(header["image_shape"]),
        border=header["border"],
        smoothed=header["smoothed"],
        kernel_sigma=header["kernel_sigma"],
        predictor_hash=header["predictor_hash"],
        projection=projection,
    )
