"""Variational Bayesian Gaussian mixture with Dirichlet weight prior and
Gaussian-Wishart component priors, fit by coordinate-ascent variational
inference.

The posterior mixing weights expose the effective number of clusters: with a
tiny Dirichlet concentration, components that capture no data starve to
near-zero weight. Model selection is additionally supported through AIC/BIC
curves evaluated at posterior point estimates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.special import digamma, gammaln, logsumexp

from .imagecore import UNLABELED, LabelMask
from .scorefield import ScoreField

_LN2PI = float(np.log(2.0 * np.pi))


@dataclass
class BgmHyper:
    """Prior hyperparameters; data-driven defaults follow the usual choices:
    concentration 1e-9 per cluster, prior mean = data mean, prior scale matrix
    from the data covariance, degrees of freedom = dimension.

    One restart is run per occupancy level k_low in `init_levels` (default
    1..K): responsibilities start as k-means++ hard assignments into the first
    k_low components while the rest start empty and are starved by the tiny
    concentration prior. The restart with the best final ELBO wins. A single
    k-means++ start at full occupancy tends to stall on symmetric splits of
    one true cluster, which would inflate the number of substantial weights.
    """

    K: int
    alpha0: float = 1e-9
    beta0: float = 1.0
    mu0: np.ndarray | None = None
    W0_inv: np.ndarray | None = None
    nu0: float | None = None
    tol: float = 1e-6
    max_iter: int = 500
    seed: int = 0
    init_levels: tuple | None = None


@dataclass
class MixturePosterior:
    alpha: np.ndarray               # (K,)
    beta: np.ndarray                # (K,)
    m: np.ndarray                   # (K, d)
    W: np.ndarray                   # (K, d, d)
    nu: np.ndarray                  # (K,)
    resp: np.ndarray                # (n, K), rows sum to 1
    pi_hat: np.ndarray              # (K,), alpha / sum(alpha)
    elbo_trace: list = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.alpha.shape[0]

    @property
    def dim(self) -> int:
        return self.m.shape[1]


# ---------------------------------------------------------------------------
# Initialization: k-means++ seeding + 10 Lloyd iterations
# ---------------------------------------------------------------------------

def _kmeans_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    labels = None
    for _ in range(10):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        for j in range(k):
            sel = labels == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)
    return labels


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------

def _resolve_hyper(x: np.ndarray, hyper: BgmHyper):
    n, d = x.shape
    if hyper.K < 1:
        raise ValueError("K must be >= 1")
    if n < hyper.K:
        raise ValueError(f"need at least K={hyper.K} points, got {n}")
    if hyper.alpha0 <= 0 or hyper.beta0 <= 0:
        raise ValueError("alpha0 and beta0 must be positive")
    mu0 = x.mean(axis=0) if hyper.mu0 is None else np.asarray(hyper.mu0, float)
    if hyper.W0_inv is None:
        centered = x - x.mean(axis=0)
        w0_inv = centered.T @ centered / max(n - 1, 1)
    else:
        w0_inv = np.asarray(hyper.W0_inv, float)
    ridge = 1e-8 * max(np.trace(w0_inv) / d, 1e-12)
    w0_inv = w0_inv + ridge * np.eye(d)
    nu0 = float(d) if hyper.nu0 is None else float(hyper.nu0)
    if nu0 < d:
        raise ValueError(f"nu0 must be >= dimension ({d})")
    return mu0, w0_inv, nu0, ridge


def _chol_logdet(a: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cholesky(a, lower=True)))))


def _ln_wishart_b(logdet_w: float, nu: float, d: int) -> float:
    return (-(nu / 2.0) * logdet_w - (nu * d / 2.0) * np.log(2.0)
            - (d * (d - 1) / 4.0) * np.log(np.pi)
            - float(gammaln((nu + 1 - np.arange(1, d + 1)) / 2.0).sum()))


def fit_vbgmm(vectors: np.ndarray, hyper: BgmHyper) -> MixturePosterior:
    """Coordinate-ascent variational inference; deterministic given the seed.

    Runs one restart per initial occupancy level and returns the fit with the
    highest final ELBO. Each run iterates parameter updates and responsibility
    updates until the relative ELBO change drops below `tol` or `max_iter` is
    hit; its ELBO trace is non-decreasing (coordinate ascent guarantee).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be (n, d)")
    n, k = x.shape[0], hyper.K
    _resolve_hyper(x, hyper)  # validate before spending time on restarts
    levels = hyper.init_levels or range(1, k + 1)
    best = None
    for trial, k_low in enumerate(levels):
        if not 1 <= k_low <= k:
            raise ValueError(f"init level {k_low} outside 1..{k}")
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=hyper.seed, spawn_key=(trial,)))
        labels = _kmeans_init(x, int(k_low), rng)
        resp = np.zeros((n, k))
        resp[np.arange(n), labels] = 1.0
        post = _fit_once(x, hyper, resp)
        if best is None or post.elbo_trace[-1] > best.elbo_trace[-1]:
            best = post
    return best


def _fit_once(x: np.ndarray, hyper: BgmHyper, resp: np.ndarray) -> MixturePosterior:
    n, d = x.shape
    k = hyper.K
    mu0, w0_inv, nu0, ridge = _resolve_hyper(x, hyper)
    logdet_w0 = -_chol_logdet(w0_inv)
    ln_b0 = _ln_wishart_b(logdet_w0, nu0, d)

    elbo_trace: list[float] = []
    alpha = beta = nu = m = w = None
    for _ in range(hyper.max_iter):
        # ---- update q(pi, mu, Lambda) from responsibilities
        nk = resp.sum(axis=0)
        safe = np.maximum(nk, 1e-300)
        xbar = (resp.T @ x) / safe[:, None]
        alpha = hyper.alpha0 + nk
        beta = hyper.beta0 + nk
        nu = nu0 + nk
        m = (hyper.beta0 * mu0 + nk[:, None] * xbar) / beta[:, None]
        w = np.empty((k, d, d))
        logdet = np.empty(k)
        sk = np.empty((k, d, d))
        for j in range(k):
            diff = x - xbar[j]
            sk[j] = (resp[:, j][:, None] * diff).T @ diff / safe[j]
            dm = (xbar[j] - mu0)[:, None]
            w_inv = (w0_inv + ridge * np.eye(d) + nk[j] * sk[j]
                     + (hyper.beta0 * nk[j] / beta[j]) * (dm @ dm.T))
            cf = cho_factor(w_inv, lower=True)
            w[j] = cho_solve(cf, np.eye(d))
            w[j] = (w[j] + w[j].T) / 2.0
            logdet[j] = -2.0 * float(np.sum(np.log(np.diag(cf[0]))))

        # ---- expectations
        ln_lambda = (digamma((nu[:, None] + 1 - np.arange(1, d + 1)) / 2.0).sum(axis=1)
                     + d * np.log(2.0) + logdet)
        ln_pi = digamma(alpha) - digamma(alpha.sum())

        # ---- update q(c)
        diff_all = x[:, None, :] - m[None]
        maha = np.einsum("nkd,kde,nke->nk", diff_all, w, diff_all, optimize=True)
        ln_rho = (ln_pi[None, :] + 0.5 * ln_lambda[None, :] - 0.5 * d * _LN2PI
                  - 0.5 * (d / beta)[None, :] - 0.5 * nu[None, :] * maha)
        ln_norm = logsumexp(ln_rho, axis=1, keepdims=True)
        resp = np.exp(ln_rho - ln_norm)

        # ---- ELBO at (params, fresh responsibilities)
        nk2 = resp.sum(axis=0)
        safe2 = np.maximum(nk2, 1e-300)
        xbar2 = (resp.T @ x) / safe2[:, None]
        e_data = 0.0
        e_prior_gw = 0.0
        e_q_gw = 0.0
        for j in range(k):
            diff = x - xbar2[j]
            s_j = (resp[:, j][:, None] * diff).T @ diff / safe2[j]
            dxm = xbar2[j] - m[j]
            e_data += 0.5 * nk2[j] * (
                ln_lambda[j] - d / beta[j]
                - nu[j] * float(np.trace(s_j @ w[j]))
                - nu[j] * float(dxm @ w[j] @ dxm) - d * _LN2PI)
            dmu = m[j] - mu0
            e_prior_gw += 0.5 * (d * np.log(hyper.beta0 / (2 * np.pi)) + ln_lambda[j]
                                 - d * hyper.beta0 / beta[j]
                                 - hyper.beta0 * nu[j] * float(dmu @ w[j] @ dmu))
            e_prior_gw += ((nu0 - d - 1) / 2.0) * ln_lambda[j] \
                - 0.5 * nu[j] * float(np.trace(w0_inv @ w[j]))
            h_wishart = (-_ln_wishart_b(logdet[j], nu[j], d)
                         - ((nu[j] - d - 1) / 2.0) * ln_lambda[j] + nu[j] * d / 2.0)
            e_q_gw += (0.5 * ln_lambda[j] + 0.5 * d * np.log(beta[j] / (2 * np.pi))
                       - d / 2.0 - h_wishart)
        e_prior_gw += k * ln_b0
        e_assign = float((nk2 * ln_pi).sum())
        ln_c_alpha0 = float(gammaln(k * hyper.alpha0) - k * gammaln(hyper.alpha0))
        e_prior_pi = ln_c_alpha0 + (hyper.alpha0 - 1.0) * float(ln_pi.sum())
        e_q_c = float(np.sum(resp[resp > 0] * np.log(resp[resp > 0])))
        ln_c_alpha = float(gammaln(alpha.sum()) - gammaln(alpha).sum())
        e_q_pi = float(((alpha - 1.0) * ln_pi).sum()) + ln_c_alpha
        elbo = e_data + e_assign + e_prior_pi + e_prior_gw - e_q_c - e_q_pi - e_q_gw
        if not np.isfinite(elbo):
            raise FloatingPointError("non-finite ELBO; input may be degenerate")
        elbo_trace.append(float(elbo))
        if len(elbo_trace) >= 2:
            prev = elbo_trace[-2]
            if abs(elbo - prev) / max(abs(elbo), 1e-12) < hyper.tol:
                break

    return MixturePosterior(
        alpha=alpha, beta=beta, m=m, W=w, nu=nu, resp=resp,
        pi_hat=alpha / alpha.sum(), elbo_trace=elbo_trace,
    )


def predict_responsibilities(p: MixturePosterior, x: np.ndarray) -> np.ndarray:
    """Posterior assignment probabilities for arbitrary vectors.

    Evaluates the same variational expectations used during fitting, so
    predicting the fit vectors reproduces the fitted responsibilities. Lets a
    mixture fitted on a spatial subsample label every pixel.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    ln_lambda = (digamma((p.nu[:, None] + 1 - np.arange(1, d + 1)) / 2.0).sum(axis=1)
                 + d * np.log(2.0) + np.array([_chol_logdet(w) for w in p.W]))
    ln_pi = digamma(p.alpha) - digamma(p.alpha.sum())
    diff = x[:, None, :] - p.m[None]
    maha = np.einsum("nkd,kde,nke->nk", diff, p.W, diff, optimize=True)
    ln_rho = (ln_pi[None, :] + 0.5 * ln_lambda[None, :] - 0.5 * d * _LN2PI
              - 0.5 * (d / p.beta)[None, :] - 0.5 * p.nu[None, :] * maha)
    return np.exp(ln_rho - logsumexp(ln_rho, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Cluster-count diagnostics
# ---------------------------------------------------------------------------

def effective_clusters(p: MixturePosterior, weight_threshold: float = 0.02) -> int:
    """Number of posterior mixing weights above the threshold."""
    if not 0.0 < weight_threshold < 1.0:
        raise ValueError("weight_threshold must be in (0, 1)")
    return int((p.pi_hat > weight_threshold).sum())


def mixture_param_count(k: int, d: int) -> int:
    """Free parameters of a K-component full-covariance d-dim GMM."""
    return (k - 1) + k * d + k * d * (d + 1) // 2


def point_log_likelihood(p: MixturePosterior, x: np.ndarray) -> float:
    """Mixture log-likelihood at posterior point estimates (pi_hat, m, nu*W)."""
    n, d = x.shape
    parts = np.empty((n, p.n_components))
    for j in range(p.n_components):
        prec = p.nu[j] * p.W[j]
        logdet = _chol_logdet(prec)
        diff = x - p.m[j]
        maha = np.einsum("nd,de,ne->n", diff, prec, diff, optimize=True)
        parts[:, j] = (np.log(max(p.pi_hat[j], 1e-300))
                       + 0.5 * logdet - 0.5 * d * _LN2PI - 0.5 * maha)
    return float(logsumexp(parts, axis=1).sum())


def information_criteria(vectors: np.ndarray, k_range, hyper: BgmHyper):
    """Fit one model per K; returns ([(K, logLik, P, AIC, BIC)], suggested_K).

    suggested_K is the automated elbow: the K maximizing the discrete second
    difference of BIC. When BIC is already minimal at the smallest K (flat or
    rising curve), that smallest K is suggested instead. The full curve is
    always returned so a human can override.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    ks = sorted(int(k) for k in k_range)
    if not ks:
        raise ValueError("empty K range")
    if ks[-1] > n:
        raise ValueError(f"K={ks[-1]} exceeds number of points {n}")
    rows = []
    for k in ks:
        post = fit_vbgmm(x, replace(hyper, K=k))
        ll = point_log_likelihood(post, x)
        p_count = mixture_param_count(k, d)
        rows.append((k, ll, p_count,
                     -2.0 * ll + 2.0 * p_count,
                     -2.0 * ll + p_count * np.log(n)))
    bic = np.array([r[4] for r in rows])
    if len(ks) == 1:
        suggested = ks[0]
    elif len(ks) == 2:
        suggested = ks[int(bic.argmin())]
    elif bic[0] <= bic.min() + 1e-9:
        suggested = ks[0]
    else:
        second = bic[2:] - 2.0 * bic[1:-1] + bic[:-2]
        suggested = ks[1 + int(second.argmax())]
    return rows, suggested


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def segment_labels(p: MixturePosterior, f: ScoreField,
                   significant: set[int]) -> LabelMask:
    """Label each valid pixel with its argmax-responsibility cluster.

    Significant clusters are remapped to dense ids 0.. in order of decreasing
    posterior weight (ties by cluster id). Pixels of insignificant clusters and
    the border band are UNLABELED. Ties in responsibilities go to the lowest
    cluster id.
    """
    if not f.smoothed:
        raise ValueError("segmentation requires a smoothed score field")
    h, w, _ = f.vectors.shape
    if p.resp.shape[0] != h * w:
        raise ValueError(f"posterior rows {p.resp.shape[0]} do not match "
                         f"field pixels {h * w}")
    order = sorted(significant, key=lambda j: (-p.pi_hat[j], j))
    remap = np.full(p.n_components, UNLABELED, dtype=np.int32)
    for dense, j in enumerate(order):
        remap[j] = dense
    winners = p.resp.argmax(axis=1)
    img_h, img_w = f.image_shape
    labels = np.full((img_h, img_w), UNLABELED, dtype=np.int32)
    b = f.border
    labels[b:b + h, b:b + w] = remap[winners].reshape(h, w)
    return LabelMask(labels=labels)


# ---------------------------------------------------------------------------
# Posterior checkpoint: JSON header + little-endian float64 arrays
# ---------------------------------------------------------------------------

_MAGIC = b"MCBGMPST"
_ARRAYS = ("alpha", "beta", "m", "W", "nu", "resp", "pi_hat")


def save_posterior(p: MixturePosterior, path) -> None:
    header = {name: list(getattr(p, name).shape) for name in _ARRAYS}
    header["elbo_trace"] = p.elbo_trace
    head = json.dumps(header).encode()
    with open(str(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for name in _ARRAYS:
            fh.write(np.ascontiguousarray(getattr(p, name)).astype("<f8").tobytes())


def load_posterior(path) -> MixturePosterior:
    with open(str(path), "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a posterior checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    arrays = {}
    offset = 0
    for name in _ARRAYS:
        shape = tuple(header[name])
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).copy()
        offset += count * 8
    return MixturePosterior(elbo_trace=list(header["elbo_trace"]), **arrays)
