"""Reverse-mode autodiff substrate with the layers and optimizer used by the trainers.

Tensors hold 2-D float64 arrays. Every operation records its inputs so that
``backward()`` can walk the graph in reverse topological order and accumulate
gradients. The layer primitives that dominate training time (linear maps, the
GRU recurrence, row-wise mixing, per-trajectory pooling) are single graph
nodes with hand-written backward rules, which keeps batched training cheap on
one CPU core. All backward rules are covered by central finite-difference
tests.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_2d(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad=False):
        self.data = _as_2d(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data[0, 0])

    def detach(self):
        """Same values, no graph connection; shares storage with self."""
        return Tensor(self.data, requires_grad=False)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() starts from a scalar loss")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad; nothing to backpropagate")
        if self._backward_ran:
            raise RuntimeError("backward() already ran for this graph; run a new forward pass first")
        self._backward_ran = True

        # Iterative postorder walk; recursion would overflow on long GRU chains.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Operator sugar.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    out._backward_ran = False
    return out


def _acc(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def zeros(rows, cols):
    return Tensor(np.zeros((rows, cols)))


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting, gradients summed back to shape).

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _acc(a, _unbroadcast(out.grad, a.data.shape))
            _acc(b, _unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _acc(a, _unbroadcast(out.grad, a.data.shape))
            _acc(b, _unbroadcast(-out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _acc(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _acc(b, _unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _acc(a, out.grad @ b.data.T)
            _acc(b, a.data.T @ out.grad)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Activations.

def relu(x):
    x = _wrap(x)
    mask = x.data > 0.0  # subgradient at exactly 0 is 0
    out = _node(np.where(mask, x.data, 0.0), (x,))
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad * mask)
        out._backward = _bw
    return out


def elu(x, alpha=1.0):
    x = _wrap(x)
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    pos_mask = x.data > 0.0
    out_data = np.where(pos_mask, x.data, neg)
    out = _node(out_data, (x,))
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad * np.where(pos_mask, 1.0, neg + alpha))
        out._backward = _bw
    return out


def absval(x):
    x = _wrap(x)
    out = _node(np.abs(x.data), (x,))
    if out.requires_grad:
        sgn = np.sign(x.data)

        def _bw():
            _acc(x, out.grad * sgn)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Reductions.

def tsum(x, axis=None):
    x = _wrap(x)
    if axis is None:
        data = x.data.sum().reshape(1, 1)
    else:
        data = x.data.sum(axis=axis, keepdims=True)
    out = _node(data, (x,))
    if out.requires_grad:
        def _bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += out.grad  # (1,1)/(1,C)/(R,1) all broadcast back
        out._backward = _bw
    return out


def tmean(x, axis=None):
    x = _wrap(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty tensor")
    return mul(tsum(x, axis), 1.0 / n)


def mse_loss(pred, target):
    pred, target = _wrap(pred), _wrap(target)
    if pred.data.size == 0:
        raise ValueError("mse_loss on empty input")
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse_loss shape mismatch {pred.data.shape} vs {target.data.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# Structural ops.

def concat(tensors, axis):
    tensors = tuple(_wrap(t) for t in tensors)
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                piece = out.grad[lo:hi] if axis == 0 else out.grad[:, lo:hi]
                _acc(t, piece)
        out._backward = _bw
    return out


def reshape(x, rows, cols):
    x = _wrap(x)
    out = _node(x.data.reshape(rows, cols), (x,))
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad.reshape(x.data.shape))
        out._backward = _bw
    return out


def slice_rows(x, start, stop):
    x = _wrap(x)
    out = _node(x.data[start:stop], (x,))
    if out.requires_grad:
        def _bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += out.grad
        out._backward = _bw
    return out


def index_rows(x, idx):
    """out[j] = x[idx[j]]; rows may repeat, gradients accumulate."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = _node(x.data[idx], (x,))
    if out.requires_grad:
        def _bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, out.grad)
        out._backward = _bw
    return out


def gather_cols(x, idx):
    """Per-row column pick: out[r, 0] = x[r, idx[r]]."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = _node(x.data[rows, idx].reshape(-1, 1), (x,))
    if out.requires_grad:
        def _bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (rows, idx), out.grad[:, 0])
        out._backward = _bw
    return out


def indexed_mean(x, idx):
    """Mean of x rows per group: out[j] = mean(x[idx[j, k], 0] for idx[j, k] >= 0).

    x is a column tensor; idx is an integer array (J, K) where -1 marks unused
    slots. Every group needs at least one valid entry.
    """
    x = _wrap(x)
    if x.data.shape[1] != 1:
        raise ValueError("indexed_mean expects a column tensor")
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("indexed_mean group with no valid entries")
    vals = x.data[np.maximum(idx, 0), 0]
    data = ((vals * valid).sum(axis=1) / counts).reshape(-1, 1)
    out = _node(data, (x,))
    if out.requires_grad:
        def _bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            w = out.grad[:, 0] / counts
            np.add.at(x.grad, (idx[valid], 0), np.broadcast_to(w[:, None], idx.shape)[valid])
        out._backward = _bw
    return out


def indexed_max(x, idx):
    """Max of x rows per group; gradient flows to the first maximizing row."""
    x = _wrap(x)
    if x.data.shape[1] != 1:
        raise ValueError("indexed_max expects a column tensor")
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    if (~valid).all(axis=1).any():
        raise ValueError("indexed_max group with no valid entries")
    vals = np.where(valid, x.data[np.maximum(idx, 0), 0], -np.inf)
    pos = vals.argmax(axis=1)
    rows = np.arange(idx.shape[0])
    out = _node(vals[rows, pos].reshape(-1, 1), (x,))
    if out.requires_grad:
        src = idx[rows, pos]

        def _bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (src, 0), out.grad[:, 0])
        out._backward = _bw
    return out


def rowwise_mix(q, w, n_in, n_out):
    """Per-row bilinear mix: out[r, o] = sum_i q[r, i] * w[r, i * n_out + o]."""
    q, w = _wrap(q), _wrap(w)
    rows = q.data.shape[0]
    if q.data.shape[1] != n_in or w.data.shape != (rows, n_in * n_out):
        raise ValueError("rowwise_mix shape mismatch")
    wr = w.data.reshape(rows, n_in, n_out)
    out = _node(np.einsum("ri,rio->ro", q.data, wr), (q, w))
    if out.requires_grad:
        def _bw():
            _acc(q, np.einsum("ro,rio->ri", out.grad, wr))
            _acc(w, (q.data[:, :, None] * out.grad[:, None, :]).reshape(rows, n_in * n_out))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Layer ops.

def linear(x, weight, bias):
    """Affine map x @ weight.T + bias; weight is (out, in), bias is (1, out)."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            f"linear input width {x.data.shape[1]} != weight fan-in {weight.data.shape[1]}")
    out = _node(x.data @ weight.data.T + bias.data, (x, weight, bias))
    if out.requires_grad:
        def _bw():
            g = out.grad
            _acc(x, g @ weight.data)
            _acc(weight, g.T @ x.data)
            _acc(bias, g.sum(axis=0, keepdims=True))
        out._backward = _bw
    return out


def _sigmoid(a):
    # Clipped so exp never overflows; float64 saturates exactly past +-60.
    return 1.0 / (1.0 + np.exp(-np.clip(a, -60.0, 60.0)))


def gru_from_gates(gi, h, w_hh, b_hh):
    """GRU update given precomputed input-side gate activations.

    gi is x @ w_ih.T + b_ih laid out as (rows, 3H) in gate order
    (reset, update, candidate). Returns the new hidden state
    (1 - update) * candidate + update * h.
    """
    gi, h, w_hh, b_hh = _wrap(gi), _wrap(h), _wrap(w_hh), _wrap(b_hh)
    hid = h.data.shape[1]
    if gi.data.shape[1] != 3 * hid:
        raise ValueError(f"gate width {gi.data.shape[1]} != 3 * hidden {hid}")
    if gi.data.shape[0] != h.data.shape[0]:
        raise ValueError("gi/h row mismatch")
    gh = h.data @ w_hh.data.T + b_hh.data
    r = _sigmoid(gi.data[:, :hid] + gh[:, :hid])
    z = _sigmoid(gi.data[:, hid:2 * hid] + gh[:, hid:2 * hid])
    hn = gh[:, 2 * hid:]
    n = np.tanh(gi.data[:, 2 * hid:] + r * hn)
    out = _node((1.0 - z) * n + z * h.data, (gi, h, w_hh, b_hh))
    if out.requires_grad:
        def _bw():
            g = out.grad
            dn = g * (1.0 - z)
            dz = g * (h.data - n)
            dan = dn * (1.0 - n * n)
            dar = (dan * hn) * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dgi = np.concatenate([dar, daz, dan], axis=1)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            _acc(gi, dgi)
            _acc(h, dgh @ w_hh.data + g * z)
            _acc(w_hh, dgh.T @ h.data)
            _acc(b_hh, dgh.sum(axis=0, keepdims=True))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Modules.

class Module:
    """Base class; parameters are discovered by scanning attributes in sorted order."""

    def named_parameters(self, prefix=""):
        found = []
        for name in sorted(vars(self)):
            value = vars(self)[name]
            if isinstance(value, Tensor):
                found.append((prefix + name, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(prefix + name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return found

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"parameter name mismatch: {missing}")
        for name, value in state.items():
            if params[name].data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}")
            params[name].data[...] = value

    def sync_from(self, other):
        self.load_state_dict(other.state_dict())

    def freeze(self):
        """Mark all parameters constant so forwards build no graph."""
        for _, t in self.named_parameters():
            t.requires_grad = False
        return self


class Linear(Module):
    """Affine layer with uniform +-1/sqrt(fan_in) init from a seeded generator."""

    def __init__(self, in_dim, out_dim, rng):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)),
                             requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(1, out_dim)),
                           requires_grad=True)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class GRUCell(Module):
    """Single GRU step; weights packed (reset | update | candidate) like the stock layout."""

    def __init__(self, in_dim, hidden_dim, rng):
        bi = 1.0 / np.sqrt(in_dim)
        bh = 1.0 / np.sqrt(hidden_dim)
        self.w_ih = Tensor(rng.uniform(-bi, bi, size=(3 * hidden_dim, in_dim)),
                           requires_grad=True)
        self.b_ih = Tensor(rng.uniform(-bi, bi, size=(1, 3 * hidden_dim)),
                           requires_grad=True)
        self.w_hh = Tensor(rng.uniform(-bh, bh, size=(3 * hidden_dim, hidden_dim)),
                           requires_grad=True)
        self.b_hh = Tensor(rng.uniform(-bh, bh, size=(1, 3 * hidden_dim)),
                           requires_grad=True)
        self.hidden_dim = hidden_dim

    def gates(self, x):
        """Input-side gate activations, batchable across timesteps."""
        return linear(x, self.w_ih, self.b_ih)

    def from_gates(self, gi, h):
        return gru_from_gates(gi, h, self.w_hh, self.b_hh)

    def __call__(self, x, h):
        return self.from_gates(self.gates(x), h)


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims, rng):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def __call__(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = relu(x)
        return x


class RmsProp:
    """RMSProp with a global gradient-norm clip; mode="sgd" gives plain SGD.

    A parameter whose grad is None is treated as having an exactly-zero
    gradient and is left untouched. Non-finite gradients or parameters abort
    the step with FloatingPointError.
    """

    def __init__(self, named_params, lr=5e-4, smoothing=0.99, eps=1e-5,
                 clip_norm=10.0, mode="rmsprop"):
        if mode not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.params = [(n, t) for n, t in named_params if t.requires_grad]
        self.lr = lr
        self.smoothing = smoothing
        self.eps = eps
        self.clip_norm = clip_norm
        self.mode = mode
        self.avg = {name: np.zeros_like(t.data) for name, t in self.params}

    def grad_norm(self):
        total = 0.0
        for _, t in self.params:
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return float(np.sqrt(total))

    def step(self):
        live = [(n, t) for n, t in self.params if t.grad is not None]
        if not live:
            return
        total = self.grad_norm()
        if not np.isfinite(total):
            bad = next(n for n, t in live if not np.isfinite(t.grad).all())
            raise FloatingPointError(f"non-finite gradient in parameter {bad!r}")
        scale = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            scale = self.clip_norm / total
        for name, t in live:
            g = t.grad if scale == 1.0 else t.grad * scale
            if self.mode == "sgd":
                t.data -= self.lr * g
            else:
                a = self.avg[name]
                a *= self.smoothing
                a += (1.0 - self.smoothing) * g * g
                t.data -= self.lr * g / (np.sqrt(a) + self.eps)
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"non-finite parameter after update: {name!r}")

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None


def save_params(path, modules):
    """Write the parameters of {prefix: module} to an .npz file."""
    arrays = {}
    for prefix, module in modules.items():
        for name, t in module.named_parameters():
            arrays[f"{prefix}.{name}"] = t.data
    np.savez(path, **arrays)


def load_params(path, modules):
    """Load parameters saved by save_params into matching modules."""
    with np.load(path) as blob:
        stored = {k: blob[k] for k in blob.files}
    used = set()
    for prefix, module in modules.items():
        state = {}
        for name, _ in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in stored:
                raise KeyError(f"missing parameter {key!r} in {path}")
            state[name] = stored[key]
            used.add(key)
        module.load_state_dict(state)
    unused = set(stored) - used
    if unused:
        raise KeyError(f"unmatched parameters in {path}: {sorted(unused)}")
