"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every forward call records a node holding its parents and a closure that maps
the upstream gradient to one gradient per parent. ``Tensor.backward`` walks the
recorded graph in reverse topological order. Graphs are rebuilt on each
forward pass; nothing is retained between steps.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_STATE = {"grad_enabled": True, "dtype": np.float32}


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for freshly created constants."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = prev


def get_default_dtype():
    return _STATE["dtype"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_STATE["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to avoid recursion limits."""
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    post.reverse()
    return post


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_STATE["dtype"]))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _STATE["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0, a.data).astype(a.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * sig,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _result(np.maximum(a.data, lo).astype(a.dtype), (a,), lambda g: (g * keep,))


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return as_tensor(a)
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, keep.astype(as_tensor(a).dtype))


# -- reductions and shape ------------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


# -- fused primitives ----------------------------------------------------------
def masked_softmax(logits, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly zero."""
    logits = as_tensor(logits)
    x = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError as exc:
            raise ValueError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from exc
        if not np.all(mask.any(axis=axis)):
            raise ValueError("empty attention row")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(logits.dtype)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (logits,), backward)


def softmax(logits, axis: int = -1) -> Tensor:
    return masked_softmax(logits, axis=axis, mask=None)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gain.data + bias.data).astype(x.dtype)

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


def conv1d(x, kernel, bias) -> Tensor:
    """Same-length 1-D convolution along the second-to-last axis.

    ``x`` is (..., n, c_in), ``kernel`` is (k, c_in, c_out) with odd k, ``bias`` is
    (c_out,). Zero padding of (k-1)/2 rows on each side keeps the length n.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    k, c_in, c_out = kernel.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ValueError(f"feature dim mismatch: input has {x.shape[-1]}, kernel expects {c_in}")
    n = x.shape[-2]
    pad = (k - 1) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.zeros(x.shape[:-1] + (c_out,), dtype=np.result_type(x.data, kernel.data))
    for j in range(k):
        out += xp[..., j : j + n, :] @ kernel.data[j]
    out += bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        flat_g = g.reshape(-1, c_out)
        for j in range(k):
            win = xp[..., j : j + n, :]
            gk[j] = win.reshape(-1, c_in).T @ flat_g
            gxp[..., j : j + n, :] += g @ kernel.data[j].T
        gx = gxp[..., pad : pad + n, :]
        return gx, gk, flat_g.sum(axis=0)

    return _result(out, (x, kernel, bias), backward)


# -- parameters ----------------------------------------------------------------
class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter path {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple, fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_scalars(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state(self, state: dict) -> None:
        if list(state) != list(self._params):
            raise KeyError("parameter paths do not match")
        for k, arr in state.items():
            if arr.shape != self._params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self._params[k].shape}")
            self._params[k].data = np.array(arr, dtype=np.float32)

    def cast(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)


# -- gradient checking ---------------------------------------------------------
@dataclass
class GradReport:
    max_abs_diff: dict[str, float] = field(default_factory=dict)
    max_rel_diff: dict[str, float] = field(default_factory=dict)
    compared: dict[str, int] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)
    passed: bool = True

    def summary(self) -> str:
        lines = [f"{'parameter':<40} {'n':>5} {'max_abs':>11} {'max_rel':>11}  ok"]
        for name in self.compared:
            ok = "yes" if self.failures[name] == 0 else "NO"
            lines.append(
                f"{name:<40} {self.compared[name]:>5} {self.max_abs_diff[name]:>11.3e} "
                f"{self.max_rel_diff[name]:>11.3e}  {ok}"
            )
        total = sum(self.compared.values())
        bad = sum(self.failures.values())
        lines.append(f"compared {total} coordinates, {bad} failures -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-3,
    rel_tol: float = 1e-2,
    abs_tol: float = 1e-4,
    max_per_param: int | None = None,
    seed: int = 0,
    dtype=np.float64,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    Parameters are evaluated in ``dtype`` (float64 by default) for the duration
    of the check and restored afterwards. ``max_per_param`` limits the number of
    coordinates sampled from each tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = params.state()
    rng = np.random.default_rng(seed)
    report = GradReport()
    try:
        params.cast(dtype)
        with default_dtype(dtype):
            params.zero_grad()
            loss = loss_fn(params)
            base = float(loss.data)
            if not np.isfinite(base):
                raise FloatingPointError("loss is not finite")
            loss.backward()
            analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
            with no_grad():
                again = float(loss_fn(params).data)
            if again != base:
                raise RuntimeError(f"loss_fn is nondeterministic ({base!r} != {again!r})")
            for name, t in params.items():
                flat = t.data.reshape(-1)
                size = flat.size
                if max_per_param is not None and size > max_per_param:
                    idx = np.sort(rng.choice(size, size=max_per_param, replace=False))
                else:
                    idx = np.arange(size)
                a_flat = analytic[name].reshape(-1)
                max_abs = max_rel = 0.0
                fails = 0
                for i in idx:
                    orig = flat[i]
                    with no_grad():
                        flat[i] = orig + eps
                        fp = float(loss_fn(params).data)
                        flat[i] = orig - eps
                        fm = float(loss_fn(params).data)
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise FloatingPointError(f"loss not finite while perturbing {name}")
                    num = (fp - fm) / (2 * eps)
                    a = float(a_flat[i])
                    diff = abs(a - num)
                    scale = max(abs(a), abs(num))
                    max_abs = max(max_abs, diff)
                    max_rel = max(max_rel, diff / scale if scale > 0 else 0.0)
                    if diff > abs_tol + rel_tol * scale:
                        fails += 1
                report.max_abs_diff[name] = max_abs
                report.max_rel_diff[name] = max_rel
                report.compared[name] = int(len(idx))
                report.failures[name] = fails
    finally:
        params.load_state(saved)
        params.zero_grad()
    report.passed = all(v == 0 for v in report.failures.values())
    return report
