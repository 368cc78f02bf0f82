"""Differentiable array core.

A small reverse-mode autodiff engine over numpy arrays, providing exactly
the primitives the re-identification architecture needs: convolution,
normalization (batch / instance / split), activations, pooling, linear
maps, concatenation, L2 normalization and pairwise squared distances.
Every primitive carries an analytic backward pass that is verified against
central finite differences (see `grad_check`).

Conventions:
  - feature maps are channel-major: (N, C, H, W)
  - convolution is cross-correlation (no kernel flip)
  - training runs in float32, gradient checks in float64
  - all ops are deterministic and pure given their explicit inputs; the
    only mutation is the running-statistics update inside `normalize`
    when `train=True`
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.9

_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (eval-path speedup)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *args):
        global _grad_enabled
        _grad_enabled = self._prev


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """A numpy array plus the graph bookkeeping needed for backward().

    Leaf tensors created with ``requires_grad=True`` accumulate gradients
    (sum semantics over everything downstream, hence over the batch).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if _grad_enabled else ()
        self._backward = backward if _grad_enabled else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor.

        Without a seed the tensor must be scalar (loss); gradients
        accumulate into every reachable tensor with requires_grad.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; all defined in terms of the named primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data, parents, backward):
    return Tensor(data, parents=tuple(parents), backward=backward)


# ---------------------------------------------------------------------------
# elementwise / shape primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else np.float32)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else np.float32)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def reshape(t: Tensor, shape) -> Tensor:
    old = t.data.shape
    out_data = t.data.reshape(shape)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g.reshape(old))

    return _node(out_data, (t,), backward)


def concat(tensors, axis=0) -> Tensor:
    """Order-stable concatenation; gradient splits back into the parts."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(out_data, tensors, backward)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (used for channel splits)."""
    sl = [slice(None)] * t.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = t.data[sl]

    def backward(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[sl] = g
            t._accumulate(full)

    return _node(out_data, (t,), backward)


def sum_(t: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not t.requires_grad:
            return
        if axis is None:
            t._accumulate(np.broadcast_to(g, t.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        t._accumulate(np.broadcast_to(g, t.data.shape).copy())

    return _node(out_data, (t,), backward)


def mean_(t: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = t.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= t.data.shape[ax]
    return mul(sum_(t, axis=axis, keepdims=keepdims), 1.0 / count)


def powc(t: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    out_data = t.data ** p

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * p * t.data ** (p - 1.0))

    return _node(out_data, (t,), backward)


def safe_sqrt(t: Tensor) -> Tensor:
    """sqrt with subgradient 0 at 0 (distances of coincident points)."""
    out_data = np.sqrt(np.maximum(t.data, 0.0))

    def backward(g):
        if t.requires_grad:
            denom = np.where(out_data > 0.0, 2.0 * out_data, 1.0)
            t._accumulate(np.where(out_data > 0.0, g / denom, 0.0))

    return _node(out_data, (t,), backward)


def select(t: Tensor, idx) -> Tensor:
    """Gather elements of a 1-D tensor; backward scatter-adds."""
    idx = np.asarray(idx)
    out_data = t.data[idx]

    def backward(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            np.add.at(full, idx, g)
            t._accumulate(full)

    return _node(out_data, (t,), backward)


def select_pairs(t: Tensor, rows, cols) -> Tensor:
    """Gather t[rows[i], cols[i]] from a 2-D tensor."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out_data = t.data[rows, cols]

    def backward(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            np.add.at(full, (rows, cols), g)
            t._accumulate(full)

    return _node(out_data, (t,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(t: Tensor) -> Tensor:
    out_data = np.maximum(t.data, 0.0)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * (t.data > 0.0))

    return _node(out_data, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # stable split: never exponentiates a positive argument
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (t,), backward)


def softplus(t: Tensor) -> Tensor:
    x = t.data
    # max(x,0) + log1p(exp(-|x|)) never overflows
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if t.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            t._accumulate(g * s)

    return _node(out_data, (t,), backward)


def softmax(t: Tensor, axis=-1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if t.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            t._accumulate(out_data * (g - dot))

    return _node(out_data, (t,), backward)


def log_softmax(t: Tensor, axis=-1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        if t.requires_grad:
            t._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (t,), backward)


# ---------------------------------------------------------------------------
# pooling / linear / normalization-free feature ops
# ---------------------------------------------------------------------------

def gap(t: Tensor) -> Tensor:
    """Spatial global average pooling: (N,C,H,W) -> (N,C)."""
    if t.data.ndim != 4:
        raise ShapeError(f"gap expects (N,C,H,W), got {t.data.shape}")
    n, c, h, w = t.data.shape
    out_data = t.data.mean(axis=(2, 3))

    def backward(g):
        if t.requires_grad:
            t._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), t.data.shape).copy())

    return _node(out_data, (t,), backward)


def channel_max(t: Tensor) -> Tensor:
    """Max over the channel axis, keepdims: (N,C,H,W) -> (N,1,H,W)."""
    out_data = t.data.max(axis=1, keepdims=True)

    def backward(g):
        if t.requires_grad:
            # route to the first argmax per spatial position
            arg = t.data.argmax(axis=1, keepdims=True)
            full = np.zeros_like(t.data)
            np.put_along_axis(full, arg, g, axis=1)
            t._accumulate(full)

    return _node(out_data, (t,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully-connected map: (N,din) @ (dout,din)^T + (dout,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear shapes incompatible: x{x.data.shape} w{w.data.shape}")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def l2norm(x: Tensor, axis=1, eps=1e-12) -> Tensor:
    """Rows scaled to unit L2 norm (epsilon only guards exact zeros)."""
    n2 = sum_(mul(x, x), axis=axis, keepdims=True)
    inv = powc(add(n2, eps), -0.5)
    return mul(x, inv)


def pairwise_sq_dist(x: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances of row vectors.

    Expansion |a|^2 + |b|^2 - 2ab, clamped at 0; the diagonal comes out
    exactly 0 because G_ii equals the squared-norm terms bit-for-bit.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"pairwise_sq_dist expects (N,D), got {x.data.shape}")
    gram = x.data @ x.data.T
    sq = np.diagonal(gram)
    raw = sq[:, None] + sq[None, :] - 2.0 * gram
    clamp_mask = raw >= 0.0
    out_data = np.maximum(raw, 0.0)

    def backward(g):
        if x.requires_grad:
            gm = np.where(clamp_mask, g, 0.0)
            s = gm + gm.T
            x._accumulate(2.0 * (s.sum(axis=1)[:, None] * x.data - s @ x.data))

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x, k, stride, padding):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride))
    return view.reshape(n, c * k * k, ho * wo).copy(), (ho, wo)


def _col2im(cols, xshape, k, stride, padding, ho, wo):
    n, c, h, w = xshape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding == 0:
        return xp
    return xp[:, :, padding:h + padding, padding:w + padding]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,k,k) weights."""
    if x.data.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.data.shape), w, b, stride, padding)
        return reshape(out, out.data.shape[1:])
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weights, got x{x.data.shape} w{w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs weights {w.data.shape}")
    n, c, h, w_sp = x.data.shape
    cout, _, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {w.data.shape}")
    cols, (ho, wo) = _im2col(x.data, k, stride, padding)
    wf = w.data.reshape(cout, -1)
    out_data = np.einsum("oc,ncl->nol", wf, cols, optimize=True).reshape(n, cout, ho, wo)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def backward(g):
        gf = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            w._accumulate(np.einsum("nol,ncl->oc", gf, cols, optimize=True).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.einsum("oc,nol->ncl", wf, gf, optimize=True)
            x._accumulate(_col2im(dcols, x.data.shape, k, stride, padding, ho, wo))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Running statistics for the batch-normalized channels."""
    mean: np.ndarray
    var: np.ndarray

    @staticmethod
    def init(channels: int, dtype=np.float32) -> "NormStats":
        return NormStats(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _affine(xhat: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    g = reshape(gamma, (1, -1, 1, 1))
    b = reshape(beta, (1, -1, 1, 1))
    return add(mul(xhat, g), b)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: NormStats,
               train: bool, eps: float = NORM_EPS,
               momentum: float = NORM_MOMENTUM) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    Training uses batch statistics and folds them into `stats`
    (momentum-weighted); inference normalizes with the running values.
    """
    if train:
        mu = mean_(x, axis=(0, 2, 3), keepdims=True)
        xc = add(x, -mu)
        var = mean_(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        stats.mean[...] = momentum * stats.mean + (1 - momentum) * mu.data.reshape(-1)
        stats.var[...] = momentum * stats.var + (1 - momentum) * var.data.reshape(-1)
        xhat = mul(xc, powc(add(var, eps), -0.5))
    else:
        mu = stats.mean[None, :, None, None]
        inv = 1.0 / np.sqrt(stats.var[None, :, None, None] + eps)
        xhat = mul(add(x, -mu.astype(x.dtype)), inv.astype(x.dtype))
    return _affine(xhat, gamma, beta)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                  eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalization over (H,W); no running stats."""
    mu = mean_(x, axis=(2, 3), keepdims=True)
    xc = add(x, -mu)
    var = mean_(mul(xc, xc), axis=(2, 3), keepdims=True)
    return _affine(mul(xc, powc(add(var, eps), -0.5)), gamma, beta)


def ibn_split(x: Tensor, gamma_in: Tensor, beta_in: Tensor,
              gamma_bn: Tensor, beta_bn: Tensor, stats: NormStats,
              train: bool, eps: float = NORM_EPS,
              momentum: float = NORM_MOMENTUM) -> Tensor:
    """First half of the channels instance-normalized, second half batch-normalized."""
    c = x.data.shape[1]
    if c % 2 != 0:
        raise ShapeError(f"ibn-split needs an even channel count, got {c}")
    half = c // 2
    a = instance_norm(narrow(x, 1, 0, half), gamma_in, beta_in, eps)
    b = batch_norm(narrow(x, 1, half, half), gamma_bn, beta_bn, stats, train, eps, momentum)
    return concat([a, b], axis=1)


def normalize(x: Tensor, mode: str, params: dict, stats: NormStats | None,
              train: bool, eps: float = NORM_EPS,
              momentum: float = NORM_MOMENTUM) -> Tensor:
    """Dispatching front-end over the three normalization modes.

    params holds 'gamma'/'beta' (batch, instance) or the four
    'gamma_in'/'beta_in'/'gamma_bn'/'beta_bn' tensors (ibn-split).
    """
    if mode == "batch":
        return batch_norm(x, params["gamma"], params["beta"], stats, train, eps, momentum)
    if mode == "instance":
        return instance_norm(x, params["gamma"], params["beta"], eps)
    if mode == "ibn-split":
        return ibn_split(x, params["gamma_in"], params["beta_in"],
                         params["gamma_bn"], params["beta_bn"], stats, train, eps, momentum)
    raise ValueError(f"unknown normalization mode {mode!r}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of one finite-difference check."""
    max_rel_err: float
    worst_input: str = ""
    worst_index: tuple = ()
    per_input: dict = field(default_factory=dict)

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_err <= tolerance


def grad_check(fn, inputs: dict, h: float = 1e-5, rng=None) -> GradCheckReport:
    """Compare analytic gradients of fn(**inputs) against central differences.

    Inputs must be float64 tensors (the check is meaningless in float32).
    Non-scalar outputs are contracted with a fixed random projection so a
    single backward pass covers the full Jacobian action. Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    for name, t in inputs.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 inputs, {name} is {t.data.dtype}")
    rng = rng or np.random.default_rng(0)

    out = fn(**inputs)
    proj = rng.standard_normal(out.data.shape)

    def scalar():
        with no_grad():
            o = fn(**inputs)
        return float((o.data * proj).sum())

    for t in inputs.values():
        t.zero_grad()
    loss = sum_(mul(out, Tensor(proj)))
    loss.backward()

    report = GradCheckReport(0.0)
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        worst = 0.0
        worst_idx = ()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar()
            flat[i] = orig - h
            fm = scalar()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        an = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), 1.0)
        rel = np.abs(an - numeric) / denom
        i = int(rel.argmax()) if rel.size else 0
        if rel.size and rel[i] > worst:
            worst = float(rel[i])
            worst_idx = np.unravel_index(i, t.data.shape)
        report.per_input[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst_input = name
            report.worst_index = worst_idx
    return report
