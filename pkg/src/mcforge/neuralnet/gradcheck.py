"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import math

import numpy as np

from .network import Network, forward, backward


def _activation_pattern(net: Network, cache):
    """Discrete activation state (relu signs, pool argmaxes, clamp masks).

    Central differences are only meaningful where the network is locally
    smooth; a sample whose +/-eps evaluations land in different linear pieces
    must be discarded, not compared.
    """
    pattern = []
    for spec in net.layers:
        kind = spec["kind"]
        name = spec["name"]
        if kind == "relu":
            pattern.append(cache.outputs[name] > 0)
        elif kind == "maxpool2d":
            pattern.append(cache.aux[name])
        elif kind == "exp_head":
            pattern.append(cache.aux[name])
    return pattern


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(net: Network, loss_fn, x, labels, eps: float = 1e-3,
               sample_frac: float = 0.01, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks a seeded random sample (>= 25 entries per parameter tensor, or the
    whole tensor if smaller; at least sample_frac of each) against
    |analytic - diff| / max(1e-8, |analytic| + |diff|). Samples whose
    perturbation crosses a non-differentiable point (relu kink, pool argmax
    switch, clamp boundary) are skipped. Intended for small float64 networks.
    """
    out, cache = forward(net, x)
    _, dout = loss_fn(out, labels)
    grads, _ = backward(net, cache, dout)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in net.param_order:
        p = net.params[name]
        n_take = min(p.size, max(25, math.ceil(sample_frac * p.size)))
        idx = rng.choice(p.size, size=n_take, replace=False)
        flat = p.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            out_p, cache_p = forward(net, x)
            lp, _ = loss_fn(out_p, labels)
            flat[i] = orig - eps
            out_m, cache_m = forward(net, x)
            lm, _ = loss_fn(out_m, labels)
            flat[i] = orig
            if not _same_pattern(_activation_pattern(net, cache_p),
                                 _activation_pattern(net, cache_m)):
                continue
            diff = (lp - lm) / (2 * eps)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - diff) / max(1e-8, abs(analytic) + abs(diff))
            worst = max(worst, err)
    return worst
