"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray and, while grad mode is enabled, participates in a
tape of backward closures. Calling ``backward()`` on a scalar walks the tape
in reverse topological order and accumulates gradients into every reachable
leaf that requires them. Frozen leaves stay out of the tape entirely, so
their ``grad`` is never touched by a backward pass.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class TapeError(RuntimeError):
    """Backward called on a consumed tape or a non-scalar root."""


class InvalidValueError(ValueError):
    """NaN or Inf encountered where finite values are required."""


class no_grad:
    """Context manager that disables tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


def _tracks(t):
    return _grad_enabled and t.requires_grad and not t.frozen


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast up from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "name",
                 "_prev", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self._prev = ()
        self._backward = None
        self._consumed = False

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def is_valid(self):
        """False when data holds NaN or Inf."""
        return bool(np.isfinite(self.data).all())

    def item(self):
        return self.data.item()

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- backward pass ----------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise TapeError("backward() requires a scalar root")
        if self._consumed:
            raise TapeError("backward() called twice on a consumed tape")

        # Iterative topological order; graphs can be deep for long loss sums.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._consumed:
                raise TapeError("tape node reused after backward()")
            if node._backward is not None:
                node._backward(node.grad)
                node._consumed = True
                node._backward = None
                node._prev = ()
        self._consumed = True

    # -- graph construction helpers ----------------------------------------

    @staticmethod
    def _lift(x, like=None):
        if isinstance(x, Tensor):
            return x
        dtype = like.data.dtype if like is not None else None
        return Tensor(np.asarray(x, dtype=dtype))

    @staticmethod
    def _node(data, parents, backward):
        out = Tensor(data)
        if any(_tracks(p) for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
        return out

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if _tracks(b):
                b.accumulate_grad(_unbroadcast(g, b.data.shape))

        return Tensor._node(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if _tracks(b):
                b.accumulate_grad(_unbroadcast(-g, b.data.shape))

        return Tensor._node(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return Tensor._lift(other, self).__sub__(self)

    def __neg__(self):
        a = self

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(-g)

        return Tensor._node(-a.data, (a,), bw)

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            if _tracks(b):
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._node(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
            if _tracks(b):
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data),
                                               b.data.shape))

        return Tensor._node(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return Tensor._lift(other, self).__truediv__(self)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        a = self

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(g * p * a.data ** (p - 1))

        return Tensor._node(a.data ** p, (a,), bw)

    def __matmul__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(g @ b.data.T)
            if _tracks(b):
                b.accumulate_grad(a.data.T @ g)

        return Tensor._node(a.data @ b.data, (a, b), bw)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bw(g):
            if _tracks(a):
                a.accumulate_grad(g.reshape(old))

        return Tensor._node(a.data.reshape(shape), (a,), bw)

    def __getitem__(self, idx):
        a = self
        parts = idx if isinstance(idx, tuple) else (idx,)
        plain = all(isinstance(p, (slice, int)) for p in parts)

        def bw(g):
            if _tracks(a):
                full = np.zeros_like(a.data)
                if plain:
                    full[idx] += g
                else:
                    np.add.at(full, idx, g)
                a.accumulate_grad(full)

        return Tensor._node(a.data[idx], (a,), bw)

    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if not _tracks(a):
                return
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self):
        n = self.data.size
        return self.sum() / float(n)


def concat(tensors, axis=0):
    """Join tensors along an axis; gradient splits back to each input."""
    parents = tuple(tensors)
    sizes = [t.data.shape[axis] for t in parents]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(parents, offsets[:-1], offsets[1:]):
            if _tracks(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    data = np.concatenate([t.data for t in parents], axis=axis)
    return Tensor._node(data, parents, bw)


def relu(x):
    mask = x.data > 0

    def bw(g):
        if _tracks(x):
            x.accumulate_grad(g * mask)

    return Tensor._node(np.where(mask, x.data, 0), (x,), bw)


def log_softmax(x, axis=-1):
    """Numerically stable log softmax along `axis`."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        if _tracks(x):
            x.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._node(out, (x,), bw)


def softmax(logits, axis=-1):
    """Plain-numpy softmax; no tape participation."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels against rows of logits."""
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), labels].mean()
    soft = np.exp(logp)

    def bw(g):
        if _tracks(logits):
            grad = soft.copy()
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(grad * (g / n))

    return Tensor._node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def linear(x, weight, bias):
    """Affine map of (B, in) rows by a (out, in) weight and (out,) bias."""

    def bw(g):
        if _tracks(x):
            x.accumulate_grad(g @ weight.data)
        if _tracks(weight):
            weight.accumulate_grad(g.T @ x.data)
        if _tracks(bias):
            bias.accumulate_grad(g.sum(axis=0))

    return Tensor._node(x.data @ weight.data.T + bias.data,
                        (x, weight, bias), bw)


def _im2col(x, kernel, stride, padding):
    """Return padded input and a (B, C, L_out, k) sliding-window copy."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    b, c, lp = x.shape
    lo = (lp - kernel) // stride + 1
    s0, s1, s2 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, lo, kernel), strides=(s0, s1, s2 * stride, s2))
    return x, np.ascontiguousarray(cols), lo


def conv_output_length(length, kernel, stride, padding):
    out = (length + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"conv output length {out} < 1 for L={length} k={kernel} "
            f"s={stride} p={padding}")
    return out


def conv1d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of (B, C_in, L) input with (C_out, C_in, k) kernels."""
    b, c_in, l_in = x.data.shape
    c_out, c_w, kernel = weight.data.shape
    if c_w != c_in:
        raise ValueError(f"conv1d channel mismatch: input {c_in}, weight {c_w}")
    lo = conv_output_length(l_in, kernel, stride, padding)

    _, cols, _ = _im2col(x.data, kernel, stride, padding)
    # (B*L_out, C_in*k) @ (C_in*k, C_out) is the whole layer as one GEMM
    cols2 = cols.transpose(0, 2, 1, 3).reshape(b * lo, c_in * kernel)
    w2 = weight.data.reshape(c_out, c_in * kernel)
    out2 = cols2 @ w2.T
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(b, lo, c_out).transpose(0, 2, 1)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(b * lo, c_out)
        if _tracks(weight):
            weight.accumulate_grad((g2.T @ cols2).reshape(c_out, c_in, kernel))
        if bias is not None and _tracks(bias):
            bias.accumulate_grad(g2.sum(axis=0))
        if _tracks(x):
            gcols = (g2 @ w2).reshape(b, lo, c_in, kernel).transpose(0, 2, 1, 3)
            gx = np.zeros((b, c_in, l_in + 2 * padding), dtype=g.dtype)
            for j in range(kernel):
                gx[:, :, j:j + lo * stride:stride] += gcols[:, :, :, j]
            if padding > 0:
                gx = gx[:, :, padding:-padding]
            x.accumulate_grad(gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._node(out, parents, bw)


def batchnorm1d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Channel batchnorm over (B, C, L).

    Training normalizes with batch statistics and updates the running arrays
    in place (unbiased variance, torch convention); eval normalizes with the
    stored running statistics.
    """
    b, c, l = x.data.shape
    if training:
        n = b * l
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        unbiased = var * (n / max(n - 1, 1))
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * ivar[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def bw(g):
        if _tracks(gamma):
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2)))
        if _tracks(beta):
            beta.accumulate_grad(g.sum(axis=(0, 2)))
        if _tracks(x):
            gi = g * gamma.data[None, :, None]
            if training:
                n = b * l
                sum_gi = gi.sum(axis=(0, 2))
                sum_gi_xhat = (gi * xhat).sum(axis=(0, 2))
                gx = (gi - (sum_gi[None, :, None]
                            + xhat * sum_gi_xhat[None, :, None]) / n)
                gx *= ivar[None, :, None]
            else:
                gx = gi * ivar[None, :, None]
            x.accumulate_grad(gx)

    return Tensor._node(out.astype(x.data.dtype, copy=False),
                        (x, gamma, beta), bw)
