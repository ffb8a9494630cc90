"""A small static-graph reverse-mode autodiff engine over NCHW arrays.

Graphs are built once with channel counts fixed and spatial size free;
each node records how its spatial size relates to the graph input so
shapes are checked on every forward pass. ``forward`` caches what
``backward`` needs; ``backward`` returns fresh gradient arrays for every
parameter and every graph input.

Conventions:
  * ``relu``/``brelu`` have subgradient 0 at their kinks.
  * min/max pooling route gradient to one element per window, the lowest
    index in row-major window order on ties.
  * Weights are initialized uniform in [-s, s], s = sqrt(1 / fan_in);
    biases start at zero.
"""
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

sliding_window_view = np.lib.stride_tricks.sliding_window_view


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple
    name: str
    channels: int
    scale: Fraction
    attrs: dict = field(default_factory=dict)
    params: tuple = ()


# ---------------------------------------------------------------------------
# operator kernels: forward(x..., **attrs) -> (out, cache); backward(g, cache) -> input grads


def _conv_out(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _conv_windows(xp, k, stride, dilation, ho, wo):
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def conv2d_forward(x, w, b, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    k = w.shape[2]
    ho = _conv_out(h, k, stride, padding, dilation)
    wo = _conv_out(wd, k, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _conv_windows(xp, k, stride, dilation, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (xp.shape, cols)


def conv2d_backward(g, w, cache, stride=1, padding=0, dilation=1):
    xp_shape, cols = cache
    k = w.shape[2]
    n, o, ho, wo = g.shape
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    gb = g.sum(axis=(0, 2, 3))
    gcols = np.tensordot(g, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            gxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return gxp, gw, gb


def conv_transpose2d_forward(x, w, b):
    # kernel 2, stride 2: every input pixel paints a disjoint 2x2 block
    n, c, h, wd = x.shape
    o = w.shape[1]
    out = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, O, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_transpose2d_backward(g, x, w):
    n, o, h2, w2 = g.shape
    gr = g.reshape(n, o, h2 // 2, 2, w2 // 2, 2)
    gx = np.tensordot(gr, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    gw = np.tensordot(x, gr, axes=([0, 2, 3], [0, 2, 4]))
    gb = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), gw, gb


def maxpool_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(g, arg):
    n, c, h, w = g.shape
    blocks = np.zeros((n, c, h, w, 4), dtype=g.dtype)
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    return blocks.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)


def minpool_forward(x, k):
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(n, c, h, w, k * k)
    arg = win.argmin(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def minpool_backward(g, arg, k):
    n, c, h, w = g.shape
    p = (k - 1) // 2
    hp, wp = h + 2 * p, w + 2 * p
    rows = np.arange(h)[:, None] + arg // k
    cols = np.arange(w)[None, :] + arg % k
    plane = np.arange(n * c).reshape(n, c, 1, 1) * (hp * wp)
    flat = (plane + rows * wp + cols).ravel()
    gp = np.bincount(flat, weights=g.ravel(), minlength=n * c * hp * wp)
    gp = gp.reshape(n, c, hp, wp).astype(g.dtype, copy=False)
    return gp[:, :, p : p + h, p : p + w]


def channel_min_forward(x):
    arg = x.argmin(axis=1)[:, None]
    return np.take_along_axis(x, arg, axis=1), arg


def channel_min_backward(g, arg, channels):
    n, _, h, w = g.shape
    gx = np.zeros((n, channels, h, w), dtype=g.dtype)
    np.put_along_axis(gx, arg, g, axis=1)
    return gx


def asm_invert_forward(I, t, A):
    return (I - A) / t + A


def asm_invert_backward(g, I, t, A):
    inv = 1.0 / t
    gI = g * inv
    gA = g * (1.0 - inv)
    gt = -(g * (I - A)).sum(axis=1, keepdims=True) * inv * inv
    return gI, gt, gA


# ---------------------------------------------------------------------------


class Graph:
    """Static computation graph with named parameters.

    Build with the layer methods (each returns a node id), mark the result
    with :meth:`set_output`, then call :meth:`forward` / :meth:`backward`.
    """

    def __init__(self, name, seed=0, dtype=np.float32):
        self.name = name
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self.params = {}
        self.input_names = {}
        self.output = None
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x6E6E])))
        self._cache = None

    # -- building -----------------------------------------------------------

    def _add(self, kind, inputs, channels, scale, name=None, attrs=None, params=()):
        nid = len(self.nodes)
        if name is None:
            name = f"{kind}{nid}"
        if any(n.name == name for n in self.nodes):
            raise ValueError(f"duplicate node name {name!r}")
        self.nodes.append(Node(nid, kind, tuple(inputs), name, channels, Fraction(scale), attrs or {}, tuple(params)))
        return nid

    def _param(self, name, shape, fan_in=None):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        if fan_in is None:
            value = np.zeros(shape, dtype=self.dtype)
        else:
            s = math.sqrt(1.0 / fan_in)
            value = self._rng.uniform(-s, s, size=shape).astype(self.dtype)
        self.params[name] = Parameter(name, value)
        return name

    def input(self, name, channels):
        nid = self._add("input", (), channels, 1, name=name)
        self.input_names[name] = nid
        return nid

    def conv2d(self, x, out_channels, kernel, stride=1, padding=None, dilation=1, name=None):
        """Convolution; ``padding=None`` means same-size output for stride 1."""
        if padding is None:
            if kernel % 2 == 0:
                raise ValueError("same padding needs an odd kernel")
            padding = dilation * (kernel - 1) // 2
        src = self.nodes[x]
        if padding != dilation * (kernel - 1) // 2 or kernel % 2 == 0:
            raise ValueError("only size-preserving padding is supported")
        name = name or f"conv{len(self.nodes)}"
        c = src.channels
        w = self._param(f"{name}.weight", (out_channels, c, kernel, kernel), fan_in=c * kernel * kernel)
        b = self._param(f"{name}.bias", (out_channels,))
        attrs = dict(kernel=kernel, stride=stride, padding=padding, dilation=dilation)
        return self._add("conv2d", (x,), out_channels, src.scale / stride, name, attrs, (w, b))

    def conv_transpose2d(self, x, out_channels, name=None):
        """2x2 transposed convolution with stride 2 (doubles H and W)."""
        src = self.nodes[x]
        name = name or f"upconv{len(self.nodes)}"
        w = self._param(f"{name}.weight", (src.channels, out_channels, 2, 2), fan_in=src.channels)
        b = self._param(f"{name}.bias", (out_channels,))
        return self._add("conv_transpose2d", (x,), out_channels, src.scale * 2, name, {}, (w, b))

    def maxpool(self, x, name=None):
        src = self.nodes[x]
        return self._add("maxpool", (x,), src.channels, src.scale / 2, name)

    def minpool(self, x, kernel, name=None):
        if kernel % 2 == 0:
            raise ValueError("minpool kernel must be odd")
        src = self.nodes[x]
        return self._add("minpool", (x,), src.channels, src.scale, name, {"kernel": kernel})

    def channel_min(self, x, name=None):
        return self._add("channel_min", (x,), 1, self.nodes[x].scale, name)

    def relu(self, x, name=None):
        src = self.nodes[x]
        return self._add("relu", (x,), src.channels, src.scale, name)

    def brelu(self, x, name=None):
        src = self.nodes[x]
        return self._add("brelu", (x,), src.channels, src.scale, name)

    def scalar_affine(self, x, scale=1.0, shift=0.0, name=None):
        src = self.nodes[x]
        return self._add("scalar_affine", (x,), src.channels, src.scale, name, {"a": scale, "b": shift})

    def add(self, x, y, name=None):
        a, b = self.nodes[x], self.nodes[y]
        if (a.channels, a.scale) != (b.channels, b.scale):
            raise ShapeError(f"add: {a.name} and {b.name} differ in shape")
        return self._add("add", (x, y), a.channels, a.scale, name)

    def concat(self, xs, name=None):
        scales = {self.nodes[x].scale for x in xs}
        if len(scales) != 1:
            raise ShapeError("concat inputs differ in spatial size")
        return self._add("concat", tuple(xs), sum(self.nodes[x].channels for x in xs), scales.pop(), name)

    def asm_invert(self, image, trans, light, name=None):
        """(I - A) / t + A with a one-channel ``t`` broadcast over colours."""
        I, t, A = self.nodes[image], self.nodes[trans], self.nodes[light]
        if t.channels != 1 or I.channels != A.channels or len({I.scale, t.scale, A.scale}) != 1:
            raise ShapeError("asm_invert: incompatible operand shapes")
        return self._add("asm_invert", (image, trans, light), I.channels, I.scale, name)

    def set_output(self, x):
        self.output = x
        return x

    # -- execution ----------------------------------------------------------

    def _expected_shape(self, node, n, h, w):
        sh, sw = node.scale * h, node.scale * w
        if sh.denominator != 1 or sw.denominator != 1:
            raise ShapeError(f"node {node.name}: input size {h}x{w} not divisible for scale {node.scale}")
        return (n, node.channels, int(sh), int(sw))

    def forward(self, inputs):
        """Evaluate the graph on a dict of named NCHW arrays."""
        if self.output is None:
            raise ValueError(f"graph {self.name} has no output")
        missing = set(self.input_names) - set(inputs)
        if missing:
            raise ShapeError(f"missing graph inputs: {sorted(missing)}")
        first = np.asarray(inputs[next(iter(self.input_names))])
        if first.ndim != 4:
            raise ShapeError(f"inputs must be NCHW, got shape {first.shape}")
        n, _, h, w = first.shape
        vals, caches = [], []
        for node in self.nodes:
            expected = self._expected_shape(node, n, h, w)
            out, cache = self._run(node, vals, inputs)
            if out.shape != expected:
                raise ShapeError(f"node {node.name} ({node.kind}): got {out.shape}, expected {expected}")
            vals.append(out)
            caches.append(cache)
        self._cache = (vals, caches)
        return vals[self.output]

    def _run(self, node, vals, inputs):
        k = node.kind
        xs = [vals[i] for i in node.inputs]
        if k == "input":
            return np.ascontiguousarray(inputs[node.name], dtype=self.dtype), None
        if k == "conv2d":
            w, b = (self.params[p].value for p in node.params)
            a = node.attrs
            return conv2d_forward(xs[0], w, b, a["stride"], a["padding"], a["dilation"])
        if k == "conv_transpose2d":
            w, b = (self.params[p].value for p in node.params)
            return conv_transpose2d_forward(xs[0], w, b), None
        if k == "maxpool":
            return maxpool_forward(xs[0])
        if k == "minpool":
            return minpool_forward(xs[0], node.attrs["kernel"])
        if k == "channel_min":
            return channel_min_forward(xs[0])
        if k == "relu":
            return np.maximum(xs[0], 0), None
        if k == "brelu":
            return np.clip(xs[0], 0, 1), None
        if k == "scalar_affine":
            return (node.attrs["a"] * xs[0] + node.attrs["b"]).astype(self.dtype, copy=False), None
        if k == "add":
            return xs[0] + xs[1], None
        if k == "concat":
            return np.concatenate(xs, axis=1), None
        if k == "asm_invert":
            return asm_invert_forward(*xs), None
        raise ValueError(f"unknown operator {k}")

    def backward(self, upstream):
        """Reverse pass from ``d(objective)/d(output)``.

        Returns ``(param_grads, input_grads)``, both dicts of new arrays;
        parameter gradients are also stored in ``Parameter.grad``.
        """
        if self._cache is None:
            raise RuntimeError(f"backward called on graph {self.name} before forward")
        vals, caches = self._cache
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != vals[self.output].shape:
            raise ShapeError(f"upstream shape {upstream.shape} != output shape {vals[self.output].shape}")
        grads = [None] * len(self.nodes)
        grads[self.output] = upstream
        pgrads = {name: np.zeros_like(p.value) for name, p in self.params.items()}

        def acc(i, g):
            grads[i] = g if grads[i] is None else grads[i] + g

        for node in reversed(self.nodes[: self.output + 1]):
            g = grads[node.id]
            if g is None or node.kind == "input":
                continue
            k = node.kind
            xs = [vals[i] for i in node.inputs]
            cache = caches[node.id]
            if k == "conv2d":
                w = self.params[node.params[0]].value
                a = node.attrs
                gx, gw, gb = conv2d_backward(g, w, cache, a["stride"], a["padding"], a["dilation"])
                pgrads[node.params[0]] += gw
                pgrads[node.params[1]] += gb
                acc(node.inputs[0], gx)
            elif k == "conv_transpose2d":
                w = self.params[node.params[0]].value
                gx, gw, gb = conv_transpose2d_backward(g, xs[0], w)
                pgrads[node.params[0]] += gw
                pgrads[node.params[1]] += gb
                acc(node.inputs[0], gx)
            elif k == "maxpool":
                acc(node.inputs[0], maxpool_backward(g, cache))
            elif k == "minpool":
                acc(node.inputs[0], minpool_backward(g, cache, node.attrs["kernel"]))
            elif k == "channel_min":
                acc(node.inputs[0], channel_min_backward(g, cache, xs[0].shape[1]))
            elif k == "relu":
                acc(node.inputs[0], g * (xs[0] > 0))
            elif k == "brelu":
                acc(node.inputs[0], g * ((xs[0] > 0) & (xs[0] < 1)))
            elif k == "scalar_affine":
                acc(node.inputs[0], (node.attrs["a"] * g).astype(self.dtype, copy=False))
            elif k == "add":
                acc(node.inputs[0], g)
                acc(node.inputs[1], g)
            elif k == "concat":
                start = 0
                for i in node.inputs:
                    c = self.nodes[i].channels
                    acc(i, g[:, start : start + c])
                    start += c
            elif k == "asm_invert":
                for i, gi in zip(node.inputs, asm_invert_backward(g, *xs)):
                    acc(i, gi)
            else:
                raise ValueError(f"unknown operator {k}")

        for name, gval in pgrads.items():
            self.params[name].grad = gval
        in_grads = {}
        for name, nid in self.input_names.items():
            gi = grads[nid]
            in_grads[name] = np.zeros_like(vals[nid]) if gi is None else np.ascontiguousarray(gi)
        return pgrads, in_grads

    # -- utilities ----------------------------------------------------------

    def astype(self, dtype):
        """Copy of this graph with every parameter cast to ``dtype``."""
        g = Graph.__new__(Graph)
        g.__dict__.update(self.__dict__)
        g.dtype = np.dtype(dtype)
        g.params = {n: Parameter(n, p.value.astype(dtype)) for n, p in self.params.items()}
        g._cache = None
        return g

    def describe(self):
        """JSON-friendly summary: operator list and parameter shapes."""
        return {
            "name": self.name,
            "seed": self.seed,
            "inputs": {name: self.nodes[i].channels for name, i in self.input_names.items()},
            "operators": [
                {"name": n.name, "kind": n.kind, "inputs": [self.nodes[i].name for i in n.inputs],
                 "channels": n.channels, "scale": str(n.scale), "attrs": n.attrs}
                for n in self.nodes
            ],
            "params": {name: list(p.value.shape) for name, p in self.params.items()},
        }

    def branch_pattern(self):
        """Which side of every kink the last forward pass took.

        Relu/brelu masks plus the selected index of every min/max. Two points
        with equal patterns lie on the same smooth piece of the graph.
        """
        if self._cache is None:
            raise RuntimeError(f"graph {self.name} has not run forward")
        vals, caches = self._cache
        out = []
        for node in self.nodes:
            if node.kind in ("relu", "brelu"):
                x = vals[node.inputs[0]]
                out.append(x > 0)
                if node.kind == "brelu":
                    out.append(x < 1)
            elif node.kind in ("maxpool", "minpool", "channel_min"):
                out.append(caches[node.id])
        return out

    def n_parameters(self):
        return sum(p.value.size for p in self.params.values())


def sgd_step(params, grads, lr):
    """Plain SGD, ``p <- p - lr * g``; refuses to touch anything if a gradient is non-finite."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    for name, g in grads.items():
        p = params[name]
        p.value -= (lr * g).astype(p.value.dtype, copy=False)


@dataclass
class GradCheckReport:
    max_rel_error: dict
    checked: dict
    # elements left out because every step size tried crossed a kink
    skipped: dict = field(default_factory=dict)

    @property
    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    def passed(self, tolerance):
        return self.worst < tolerance


def rel_error(analytic, numeric):
    """Largest elementwise gap, scaled by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(graph, inputs, eps=1e-6, seed=0, max_elements=10_000, check_inputs=True, shrink=3):
    """Compare analytic gradients with central differences in float64.

    The objective is ``sum(output * R)`` for a fixed random ``R``. Parameters
    larger than ``max_elements`` are checked on a random subsample.

    A central difference is only meaningful when both probes stay on the same
    smooth piece as the base point. When a probe flips a relu mask or a
    pooling choice, the step is cut tenfold, up to ``shrink`` times; elements
    that still straddle a kink are counted in ``skipped`` instead of compared.
    """
    g = graph.astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    inputs = {k: np.asarray(v, dtype=np.float64).copy() for k, v in inputs.items()}
    out = g.forward(inputs)
    base = g.branch_pattern()
    R = rng.standard_normal(out.shape)
    pgrads, igrads = g.backward(R)

    def probe():
        value = float(np.sum(g.forward(inputs) * R))
        same = all(np.array_equal(a, b) for a, b in zip(base, g.branch_pattern()))
        return value, same

    def check(arr, analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        numeric = np.full(len(idx), np.nan)
        for j, i in enumerate(idx):
            orig = flat[i]
            h = eps
            for _ in range(shrink + 1):
                flat[i] = orig + h
                up, ok_up = probe()
                flat[i] = orig - h
                down, ok_down = probe()
                flat[i] = orig
                if ok_up and ok_down:
                    numeric[j] = (up - down) / (2 * h)
                    break
                h /= 10
        keep = ~np.isnan(numeric)
        return rel_error(analytic.reshape(-1)[idx][keep], numeric[keep]), int(keep.sum()), int((~keep).sum())

    errors, counts, skipped = {}, {}, {}
    targets = [(name, p.value, pgrads[name]) for name, p in g.params.items()]
    if check_inputs:
        targets += [(f"input:{name}", inputs[name], igrads[name]) for name in g.input_names]
    for name, arr, analytic in targets:
        errors[name], counts[name], skipped[name] = check(arr, analytic)
    return GradCheckReport(errors, counts, skipped)
