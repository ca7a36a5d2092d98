"""Deterministic feed-forward network core with exact analytic gradients.

Tensors are plain numpy arrays in row-major (C) order, batched along axis 0.
A network is an ordered list of layer specs forming a DAG: each layer names
its inputs (default: the previous layer), which is how skip connections are
expressed. Shapes are validated and inferred once at construction, so a
mis-wired architecture fails before any data flows.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Layer wiring or runtime tensor shape inconsistency."""


def layer(kind: str, name: str, inputs=None, **kwargs) -> dict:
    """Build one layer spec. `inputs` defaults to the previous layer."""
    spec = {"kind": kind, "name": name, **kwargs}
    if inputs is not None:
        spec["inputs"] = list(inputs)
    return spec


def _conv_out(size, k_eff, stride, pad):
    return (size + 2 * pad - k_eff) // stride + 1


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Bilinear interpolation weights (align corners); rows sum to 1."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        A[:, 0] = 1.0
        return A
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(src.astype(np.int64), n_in - 2)
    frac = (src - lo).astype(dtype)
    A[np.arange(n_out), lo] = 1.0 - frac
    A[np.arange(n_out), lo + 1] += frac
    return A


class Network:
    """Ordered layer list plus named parameter vectors.

    Supported kinds: dense, conv2d, relu, maxpool2d, avgpool2d (global when
    kernel omitted), upsample (bilinear), concat, flatten, exp_head,
    softmax_head.
    """

    def __init__(self, layers, input_shape, seed=0, dtype=np.float32,
                 class_count=None, params=None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.class_count = class_count
        self.layers = []
        self.shapes = {"input": self.input_shape}
        self.params: dict[str, np.ndarray] = {}
        self.param_order: list[str] = []
        rng = np.random.default_rng(seed)

        prev = "input"
        names = {"input"}
        for idx, spec in enumerate(layers):
            spec = dict(spec)
            name = spec.get("name")
            if not name or name in names:
                raise ShapeError(f"layer {idx}: missing or duplicate name {name!r}")
            inputs = spec.get("inputs") or [prev]
            for src in inputs:
                if src not in names:
                    raise ShapeError(f"layer {idx} ({name}): unknown input {src!r}")
            spec["inputs"] = inputs
            self.shapes[name] = self._infer(idx, spec, [self.shapes[s] for s in inputs])
            self._init_params(spec, self.shapes[inputs[0]], rng)
            self.layers.append(spec)
            names.add(name)
            prev = name
        self.output_name = prev
        self.output_shape = self.shapes[prev]
        if params is not None:
            for k in self.param_order:
                if k not in params:
                    raise ValueError(f"missing parameter {k}")
                if params[k].shape != self.params[k].shape:
                    raise ShapeError(f"parameter {k}: shape {params[k].shape} != "
                                     f"{self.params[k].shape}")
                self.params[k] = np.ascontiguousarray(params[k], dtype=self.dtype)

    # -- construction helpers ------------------------------------------------

    def _infer(self, idx, spec, in_shapes):
        kind = spec["kind"]
        first = in_shapes[0]

        def need_chw():
            if len(first) != 3:
                raise ShapeError(f"layer {idx} ({spec['name']}): {kind} needs (C,H,W) "
                                 f"input, got {first}")

        if kind == "conv2d":
            need_chw()
            k = spec["kernel"]
            s = spec.get("stride", 1)
            d = spec.get("dilation", 1)
            p = spec.get("padding", 0)
            k_eff = k + (k - 1) * (d - 1)
            ho = _conv_out(first[1], k_eff, s, p)
            wo = _conv_out(first[2], k_eff, s, p)
            if ho < 1 or wo < 1:
                raise ShapeError(f"layer {idx} ({spec['name']}): conv output "
                                 f"{ho}x{wo} is empty")
            return (spec["channels"], ho, wo)
        if kind == "dense":
            if len(first) != 1:
                raise ShapeError(f"layer {idx} ({spec['name']}): dense needs flat "
                                 f"input, got {first}")
            return (spec["units"],)
        if kind == "flatten":
            return (int(np.prod(first)),)
        if kind in ("relu", "exp_head", "softmax_head"):
            return first
        if kind in ("maxpool2d", "avgpool2d"):
            need_chw()
            k = spec.get("kernel")
            if k is None:
                if kind == "maxpool2d":
                    raise ShapeError(f"layer {idx} ({spec['name']}): maxpool2d "
                                     "requires a kernel")
                return (first[0], 1, 1)
            s = spec.get("stride", k)
            return (first[0], _conv_out(first[1], k, s, 0), _conv_out(first[2], k, s, 0))
        if kind == "upsample":
            need_chw()
            return (first[0], spec["size"][0], spec["size"][1])
        if kind == "concat":
            for sh in in_shapes:
                if len(sh) != 3 or sh[1:] != first[1:]:
                    raise ShapeError(f"layer {idx} ({spec['name']}): concat inputs "
                                     f"must share spatial dims, got {in_shapes}")
            return (sum(sh[0] for sh in in_shapes), first[1], first[2])
        raise ShapeError(f"layer {idx}: unknown kind {kind!r}")

    def _init_params(self, spec, in_shape, rng):
        kind = spec["kind"]
        scale = spec.get("init_scale", 1.0)
        if kind == "conv2d":
            c, k = in_shape[0], spec["kernel"]
            fan_in = c * k * k
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in) * scale,
                           size=(spec["channels"], c, k, k))
            self._register(spec["name"] + ".w", w)
            self._register(spec["name"] + ".b", np.zeros(spec["channels"]))
        elif kind == "dense":
            fan_in = in_shape[0]
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in) * scale,
                           size=(fan_in, spec["units"]))
            self._register(spec["name"] + ".w", w)
            self._register(spec["name"] + ".b", np.zeros(spec["units"]))

    def _register(self, name, value):
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        self.param_order.append(name)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


class Cache:
    """Forward activations and per-layer auxiliaries needed by backward."""

    def __init__(self, x):
        self.outputs = {"input": x}
        self.aux = {}


# ---------------------------------------------------------------------------
# im2col-style window helpers (offset slicing keeps everything vectorized
# without fancy-index scatter, which also makes backward deterministic)
# ---------------------------------------------------------------------------

def _window_cols(xp, k, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, ho, wo), dtype=xp.dtype)
    i = 0
    for di in range(0, k * dilation, dilation):
        for dj in range(0, k * dilation, dilation):
            cols[:, :, i] = xp[:, :, di:di + stride * (ho - 1) + 1:stride,
                               dj:dj + stride * (wo - 1) + 1:stride]
            i += 1
    return cols.reshape(n, c, k * k, ho * wo)


def _window_cols_add(dxp, dcols, k, stride, dilation, ho, wo):
    n, c = dxp.shape[:2]
    dcols = dcols.reshape(n, c, k * k, ho, wo)
    i = 0
    for di in range(0, k * dilation, dilation):
        for dj in range(0, k * dilation, dilation):
            dxp[:, :, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride] += dcols[:, :, i]
            i += 1


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward(net: Network, x: np.ndarray):
    """Run the network on a batch; returns (output, cache for backward)."""
    x = np.ascontiguousarray(x, dtype=net.dtype)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match network "
                         f"input {net.input_shape}")
    cache = Cache(x)
    for spec in net.layers:
        ins = [cache.outputs[s] for s in spec["inputs"]]
        cache.outputs[spec["name"]] = _layer_forward(net, spec, ins, cache)
    return cache.outputs[net.output_name], cache


def _layer_forward(net, spec, ins, cache):
    kind = spec["kind"]
    name = spec["name"]
    x = ins[0]
    if kind == "conv2d":
        k = spec["kernel"]
        s = spec.get("stride", 1)
        d = spec.get("dilation", 1)
        p = spec.get("padding", 0)
        _, ho, wo = net.shapes[name]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _window_cols(xp, k, s, d, ho, wo)
        n = x.shape[0]
        w = net.params[name + ".w"]
        colsm = cols.transpose(1, 2, 0, 3).reshape(w.shape[1] * k * k, n * ho * wo)
        out = w.reshape(w.shape[0], -1) @ colsm
        out = out.reshape(w.shape[0], n, ho * wo).transpose(1, 0, 2)
        out = out.reshape(n, w.shape[0], ho, wo) + net.params[name + ".b"].reshape(1, -1, 1, 1)
        cache.aux[name] = colsm
        return out
    if kind == "dense":
        return x @ net.params[name + ".w"] + net.params[name + ".b"]
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "maxpool2d":
        k = spec["kernel"]
        s = spec.get("stride", k)
        _, ho, wo = net.shapes[name]
        cols = _window_cols(x, k, s, 1, ho, wo)
        arg = cols.argmax(axis=2)
        cache.aux[name] = arg
        out = np.take_along_axis(cols, arg[:, :, None, :], axis=2)[:, :, 0, :]
        return out.reshape(x.shape[0], x.shape[1], ho, wo)
    if kind == "avgpool2d":
        k = spec.get("kernel")
        if k is None:
            return x.mean(axis=(2, 3), keepdims=True)
        s = spec.get("stride", k)
        _, ho, wo = net.shapes[name]
        cols = _window_cols(x, k, s, 1, ho, wo)
        return cols.mean(axis=2).reshape(x.shape[0], x.shape[1], ho, wo)
    if kind == "upsample":
        ho, wo = spec["size"]
        ah = _interp_matrix(ho, x.shape[2], x.dtype)
        aw = _interp_matrix(wo, x.shape[3], x.dtype)
        cache.aux[name] = (ah, aw)
        return np.einsum("oh,nchw,pw->ncop", ah, x, aw, optimize=True)
    if kind == "concat":
        return np.concatenate(ins, axis=1)
    if kind == "exp_head":
        c = spec.get("clamp", 10.0)
        clipped = np.clip(x, -c, c)
        out = np.exp(clipped)
        cache.aux[name] = (np.abs(x) < c)
        return out
    if kind == "softmax_head":
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise ShapeError(f"unknown layer kind {kind!r}")


def backward(net: Network, cache: Cache, upstream_grad: np.ndarray):
    """Backpropagate an output gradient; returns (param grads, input grad)."""
    out = cache.outputs.get(net.output_name)
    if out is None:
        raise RuntimeError("backward called before forward")
    if upstream_grad.shape != out.shape:
        raise ShapeError(f"upstream grad shape {upstream_grad.shape} does not "
                         f"match output {out.shape}")
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    acc = {net.output_name: np.ascontiguousarray(upstream_grad, dtype=net.dtype)}
    for spec in reversed(net.layers):
        g = acc.pop(spec["name"], None)
        if g is None:
            continue
        ins = [cache.outputs[s] for s in spec["inputs"]]
        in_grads = _layer_backward(net, spec, ins, g, cache, grads)
        for src, ig in zip(spec["inputs"], in_grads):
            if src in acc:
                acc[src] = acc[src] + ig
            else:
                acc[src] = ig
    return grads, acc.get("input", np.zeros_like(cache.outputs["input"]))


def _layer_backward(net, spec, ins, g, cache, grads):
    kind = spec["kind"]
    name = spec["name"]
    x = ins[0]
    if kind == "conv2d":
        k = spec["kernel"]
        s = spec.get("stride", 1)
        d = spec.get("dilation", 1)
        p = spec.get("padding", 0)
        _, ho, wo = net.shapes[name]
        n = x.shape[0]
        w = net.params[name + ".w"]
        colsm = cache.aux[name]
        gm = g.reshape(n, w.shape[0], ho * wo).transpose(1, 0, 2).reshape(w.shape[0], -1)
        grads[name + ".w"] += (gm @ colsm.T).reshape(w.shape)
        grads[name + ".b"] += g.sum(axis=(0, 2, 3))
        dcols = (w.reshape(w.shape[0], -1).T @ gm)
        dcols = dcols.reshape(w.shape[1], k * k, n, ho * wo).transpose(2, 0, 1, 3)
        hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        dxp = np.zeros((n, x.shape[1], hp, wp), dtype=x.dtype)
        _window_cols_add(dxp, dcols, k, s, d, ho, wo)
        dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
        return [dx]
    if kind == "dense":
        grads[name + ".w"] += x.T @ g
        grads[name + ".b"] += g.sum(axis=0)
        return [g @ net.params[name + ".w"].T]
    if kind == "relu":
        return [g * (x > 0)]
    if kind == "flatten":
        return [g.reshape(x.shape)]
    if kind == "maxpool2d":
        k = spec["kernel"]
        s = spec.get("stride", k)
        _, ho, wo = net.shapes[name]
        n, c = x.shape[:2]
        arg = cache.aux[name]
        dcols = np.zeros((n, c, k * k, ho * wo), dtype=x.dtype)
        np.put_along_axis(dcols, arg[:, :, None, :],
                          g.reshape(n, c, 1, ho * wo), axis=2)
        dx = np.zeros_like(x)
        _window_cols_add(dx, dcols, k, s, 1, ho, wo)
        return [dx]
    if kind == "avgpool2d":
        k = spec.get("kernel")
        if k is None:
            area = x.shape[2] * x.shape[3]
            return [np.broadcast_to(g / area, x.shape).astype(x.dtype)]
        s = spec.get("stride", k)
        _, ho, wo = net.shapes[name]
        n, c = x.shape[:2]
        dcols = np.broadcast_to(g.reshape(n, c, 1, ho * wo) / (k * k),
                                (n, c, k * k, ho * wo)).astype(x.dtype)
        dx = np.zeros_like(x)
        _window_cols_add(dx, dcols, k, s, 1, ho, wo)
        return [dx]
    if kind == "upsample":
        ah, aw = cache.aux[name]
        return [np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True)]
    if kind == "concat":
        splits = np.cumsum([t.shape[1] for t in ins])[:-1]
        return list(np.split(g, splits, axis=1))
    if kind == "exp_head":
        return [g * cache.outputs[name] * cache.aux[name]]
    if kind == "softmax_head":
        pvals = cache.outputs[name]
        inner = (g * pvals).sum(axis=1, keepdims=True)
        return [pvals * (g - inner)]
    raise ShapeError(f"unknown layer kind {kind!r}")
