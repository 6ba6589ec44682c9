"""Dense float64 buffers with a reverse-mode tape.

Everything downstream of this module is built from the ops defined here:
a Tensor wraps a contiguous float64 ndarray, and every differentiable op
records a node (op name, inputs, vector-Jacobian product) on the active
Tape.  Backward replays the node list in reverse.  There is no
broadcasting magic beyond what numpy gives us and what the recorded VJPs
undo with `_unbroadcast`.

All arithmetic is 64-bit; finite-difference checks rely on that.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "ConfigError", "NumericError",
    "matmul", "softplus_clamped", "bilinear_sample", "scatter_add",
    "grad_check", "Adam", "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ConfigError(ValueError):
    """A configuration value is out of its documented range."""


class NumericError(ArithmeticError):
    """A forward evaluation produced a non-finite value."""


class Tensor:
    """A dense n-dimensional float64 buffer, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of forward kernels paired with their VJPs.

    Entering the tape makes it the recording target for all ops.  Nodes
    are replayed strictly in reverse, so each recorded input receives its
    gradient contribution exactly once per node.
    """

    def __init__(self):
        # (name, out, inputs, need, vjp); vjp(g, need) -> per-input grads
        self.nodes: list[tuple] = []
        self._tracked: set[int] = set()
        self.gradients: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Accumulate gradients of `out` (seeded with `seed` or ones)."""
        grads: dict[int, np.ndarray] = {
            id(out): np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        leaves: dict[int, Tensor] = {}
        for name, o, inputs, need, vjp in reversed(self.nodes):
            g = grads.get(id(o))
            if g is None:
                continue
            contribs = vjp(g, need)
            for t, gi, wanted in zip(inputs, contribs, need):
                if not wanted or gi is None:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                acc = grads.get(id(t))
                grads[id(t)] = gi.copy() if acc is None else acc + gi
                if t.requires_grad:
                    leaves[id(t)] = t
        for t in leaves.values():
            g = grads[id(t)]
            t.grad = g if t.grad is None else t.grad + g
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.gradients.get(id(t))


def record(name: str, out: Tensor, inputs: tuple, vjp) -> Tensor:
    """Register `out = op(inputs)` on the active tape, if any."""
    if not _TAPES:
        return out
    tape = _TAPES[-1]
    need = tuple(tape._tracks(t) for t in inputs)
    if not any(need):
        return out
    tape.nodes.append((name, out, inputs, need, vjp))
    tape._tracked.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data + b.data)

    def vjp(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data - b.data)

    def vjp(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(-g, b.shape) if need[1] else None)

    return record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data * b.data)

    def vjp(g, need):
        return (_unbroadcast(g * b.data, a.shape) if need[0] else None,
                _unbroadcast(g * a.data, b.shape) if need[1] else None)

    return record("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data / b.data)

    def vjp(g, need):
        ga = _unbroadcast(g / b.data, a.shape) if need[0] else None
        gb = _unbroadcast(-g * a.data / (b.data ** 2), b.shape) if need[1] else None
        return ga, gb

    return record("div", out, (a, b), vjp)


def exp(a) -> Tensor:
    a = _t(a)
    out = Tensor(np.exp(a.data))
    od = out.data

    def vjp(g, need):
        return (g * od,)

    return record("exp", out, (a,), vjp)


def log(a) -> Tensor:
    a = _t(a)
    out = Tensor(np.log(a.data))

    def vjp(g, need):
        return (g / a.data,)

    return record("log", out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _t(a)
    out = Tensor(np.tanh(a.data))
    od = out.data

    def vjp(g, need):
        return (g * (1.0 - od * od),)

    return record("tanh", out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _t(a)
    x = a.data
    od = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                  np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(od)

    def vjp(g, need):
        return (g * od * (1.0 - od),)

    return record("sigmoid", out, (a,), vjp)


def absval(a) -> Tensor:
    a = _t(a)
    out = Tensor(np.abs(a.data))

    def vjp(g, need):
        return (g * np.sign(a.data),)

    return record("abs", out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the band (inclusive)."""
    a = _t(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)

    def vjp(g, need):
        return (g * inside,)

    return record("clip", out, (a,), vjp)


def softplus_clamped(a, lo: float, hi: float) -> Tensor:
    """Elementwise log(1+exp(x)) clipped to [lo, hi].

    Gradient is sigmoid(x) strictly inside the clip band and zero outside.
    """
    if not (0.0 < lo < hi):
        raise ConfigError(f"softplus_clamped needs 0 < lo < hi, got lo={lo}, hi={hi}")
    a = _t(a)
    sp = np.logaddexp(0.0, a.data)
    out = Tensor(np.clip(sp, lo, hi))
    inside = (sp > lo) & (sp < hi)

    def vjp(g, need):
        sg = 1.0 / (1.0 + np.exp(-a.data))
        return (g * sg * inside,)

    return record("softplus_clamped", out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape / reduction ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def vjp(g, need):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = Tensor(a.data.reshape(shape))

    def vjp(g, need):
        return (g.reshape(a.shape),)

    return record("reshape", out, (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_t(x) for x in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, need):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if w else None for p, w in zip(parts, need))

    return record("concat", out, tuple(ts), vjp)


def matmul(a, b) -> Tensor:
    """`a @ b` where b is a 2-D weight; a may carry leading batch axes."""
    a, b = _t(a), _t(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    k, n = b.shape

    def vjp(g, need):
        ga = g @ b.data.T if need[0] else None
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if need[1] else None
        return ga, gb

    return record("matmul", out, (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    od = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(od)

    def vjp(g, need):
        inner = np.sum(g * od, axis=axis, keepdims=True)
        return ((g - inner) * od,)

    return record("softmax", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = Tensor(z - lse)
    sm = np.exp(out.data)

    def vjp(g, need):
        return (g - sm * np.sum(g, axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# gather / scatter


def gather_rows(a, idx) -> Tensor:
    """a[idx] along axis 0; idx is an integer ndarray of any shape."""
    a = _t(a)
    idx = np.asarray(idx)
    raw = a.data[idx]
    out = Tensor(raw)

    def vjp(g, need):
        z = np.zeros_like(a.data)
        # Tensor promotes 0-d outputs to 1-d; restore the indexed shape
        np.add.at(z, idx, np.asarray(g).reshape(raw.shape))
        return (z,)

    return record("gather_rows", out, (a,), vjp)


def take2d(a, rows, cols) -> Tensor:
    """a[rows, cols] for a (H, W, ...) buffer; rows/cols same-shape ints."""
    a = _t(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(a.data[rows, cols])

    def vjp(g, need):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return record("take2d", out, (a,), vjp)


def scatter_add(target, rows, cols, values) -> Tensor:
    """target[r, c, :] += value, accumulated in ascending (r, c, input
    position) order so colliding entries reduce bit-reproducibly."""
    target, values = _t(target), _t(values)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    h, w = target.shape[0], target.shape[1]
    bad = (rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndexError(
            f"scatter_add: index ({rows[i]}, {cols[i]}) at entry {i} outside "
            f"target extents ({h}, {w})")
    order = np.lexsort((cols, rows))  # stable: ties keep input position
    out_data = target.data.copy()
    np.add.at(out_data, (rows[order], cols[order]), values.data[order])
    out = Tensor(out_data)

    def vjp(g, need):
        gt = g if need[0] else None
        gv = g[rows, cols] if need[1] else None
        return gt, gv

    return record("scatter_add", out, (target, values), vjp)


def scatter_add_pairs(target, indices, values) -> Tensor:
    """scatter_add taking `indices` as a list of (row, col) pairs."""
    idx = np.asarray(list(indices), dtype=np.int64).reshape(-1, 2)
    return scatter_add(target, idx[:, 0], idx[:, 1], values)


def bilinear_sample(plane, u, v) -> Tensor:
    """Bilinear read of a (H, W, C) plane at continuous (u, v).

    u indexes columns (axis 1), v indexes rows (axis 0); both may be
    Tensors of any shared shape.  Out-of-range coordinates clamp to edge
    texels, which also zeroes their positional gradient.
    """
    plane = _t(plane)
    u, v = _t(u), _t(v)
    h, w = plane.shape[0], plane.shape[1]
    uc = clip(u, 0.0, float(w - 1))
    vc = clip(v, 0.0, float(h - 1))
    u0 = np.minimum(np.floor(uc.data), max(w - 2, 0)).astype(np.int64)
    v0 = np.minimum(np.floor(vc.data), max(h - 2, 0)).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = sub(uc, Tensor(u0.astype(np.float64)))
    fv = sub(vc, Tensor(v0.astype(np.float64)))
    sh = fu.shape + (1,)
    fu = reshape(fu, sh)
    fv = reshape(fv, sh)
    one = 1.0
    c00 = take2d(plane, v0, u0)
    c01 = take2d(plane, v0, u1)
    c10 = take2d(plane, v1, u0)
    c11 = take2d(plane, v1, u1)
    top = add(mul(c00, sub(one, fu)), mul(c01, fu))
    bot = add(mul(c10, sub(one, fu)), mul(c11, fu))
    return add(mul(top, sub(one, fv)), mul(bot, fv))


def shift2d(a, di: int, dj: int) -> Tensor:
    """Zero-padded shift of a (A, B, C) plane: out[i, j] = a[i-di, j-dj]."""
    a = _t(a)
    out_data = np.zeros_like(a.data)
    A, B = a.shape[0], a.shape[1]
    si = slice(max(di, 0), A + min(di, 0))
    sj = slice(max(dj, 0), B + min(dj, 0))
    ti = slice(max(-di, 0), A + min(-di, 0))
    tj = slice(max(-dj, 0), B + min(-dj, 0))
    out_data[si, sj] = a.data[ti, tj]
    out = Tensor(out_data)

    def vjp(g, need):
        z = np.zeros_like(a.data)
        z[ti, tj] = g[si, sj]
        return (z,)

    return record("shift2d", out, (a,), vjp)


def shift3d_edge(a, dx: int, dy: int, dz: int) -> Tensor:
    """Edge-clamped shift of an (X, Y, Z, C) field: out[p] = a[clip(p+d)]."""
    a = _t(a)
    X, Y, Z = a.shape[0], a.shape[1], a.shape[2]
    ix = np.clip(np.arange(X) + dx, 0, X - 1)
    iy = np.clip(np.arange(Y) + dy, 0, Y - 1)
    iz = np.clip(np.arange(Z) + dz, 0, Z - 1)
    out = Tensor(a.data[np.ix_(ix, iy, iz)])

    def vjp(g, need):
        z = np.zeros_like(a.data)
        np.add.at(z, np.ix_(ix, iy, iz), g)
        return (z,)

    return record("shift3d_edge", out, (a,), vjp)


_OFFSETS3 = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]


def depthwise_conv3d(a, w, dilation: int = 1) -> Tensor:
    """Depthwise 3x3x3 convolution over an (X, Y, Z, C) field.

    `w` has shape (27, C): one scalar per tap per channel.  Borders are
    edge-clamped.  Fused forward/backward to keep the step cost down.
    """
    a, w = _t(a), _t(w)
    if w.shape != (27, a.shape[-1]):
        raise ShapeError(f"depthwise_conv3d: weights {w.shape} vs field {a.shape}")
    X, Y, Z = a.shape[0], a.shape[1], a.shape[2]

    def ax(n, d):
        return np.clip(np.arange(n) + d, 0, n - 1)

    out_data = np.zeros_like(a.data)
    for k, (dx, dy, dz) in enumerate(_OFFSETS3):
        sh = a.data[np.ix_(ax(X, dx * dilation), ax(Y, dy * dilation), ax(Z, dz * dilation))]
        out_data += sh * w.data[k]
    out = Tensor(out_data)

    def vjp(g, need):
        ga = np.zeros_like(a.data) if need[0] else None
        gw = np.zeros_like(w.data) if need[1] else None
        for k, (dx, dy, dz) in enumerate(_OFFSETS3):
            mesh = np.ix_(ax(X, dx * dilation), ax(Y, dy * dilation), ax(Z, dz * dilation))
            if need[0]:
                np.add.at(ga, mesh, g * w.data[k])
            if need[1]:
                gw[k] = np.sum(a.data[mesh] * g, axis=(0, 1, 2))
        return ga, gw

    return record("depthwise_conv3d", out, (a, w), vjp)


def custom_op(name: str, inputs: tuple, out_data: np.ndarray, vjp) -> Tensor:
    """Register a fused kernel with a hand-written VJP on the tape."""
    out = Tensor(out_data)
    return record(name, out, tuple(_t(x) for x in inputs), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _project(out_data: np.ndarray, proj: np.ndarray) -> float:
    return float(np.sum(out_data * proj))


def grad_check(fn, inputs, h: float = 1e-6, seed: int = 0,
               max_coords_per_input: int | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` maps the given Tensors to an output Tensor; the output is
    reduced to a scalar through a fixed random projection.  Per element,
    the error is |analytic - numeric| / max(1, |numeric|).  When
    `max_coords_per_input` is set, a seeded random subset of coordinates
    is probed instead of every element (needed for whole-pipeline checks).
    """
    inputs = [_t(x) for x in inputs]
    with Tape() as tape:
        tape.watch(*inputs)
        out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: forward produced non-finite values")
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.data.shape)
    grads = tape.backward(out, seed=proj)

    worst = 0.0
    for t in inputs:
        analytic = grads.get(id(t))
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat_idx = np.arange(t.size)
        if max_coords_per_input is not None and t.size > max_coords_per_input:
            flat_idx = rng.choice(t.size, size=max_coords_per_input, replace=False)
        buf = t.data.ravel()
        aflat = analytic.ravel()
        for i in flat_idx:
            orig = buf[i]
            buf[i] = orig + h
            f1 = _project(fn(*inputs).data, proj)
            buf[i] = orig - h
            f0 = _project(fn(*inputs).data, proj)
            buf[i] = orig
            numeric = (f1 - f0) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: grad {g.shape} vs param {p.data.shape} for {k!r}")
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam) -> Adam:
    """Functional wrapper: assign grads, apply one Adam update."""
    for k, p in params.items():
        p.grad = grads.get(k)
    state.step()
    return state
