"""Tape-based reverse-mode differentiation over dense numpy arrays.

Only the operations the multimodal transformer needs are provided. Ops record
themselves on the active :class:`Tape`; outside a tape they just compute,
which is how inference runs.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "GradientError", "NumericalError",
    "matmul", "add", "scale", "mul_const", "gelu", "softmax", "layer_norm",
    "embedding", "concat", "slice_last", "transpose", "dropout", "elementwise",
    "total", "square", "log_softmax", "softmax_cross_entropy", "squared_error",
    "backward", "grad_check", "numeric_grads", "analytic_grads", "relative_error",
]


class DimensionError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Usage::

        with Tape() as tape:
            loss = f(params)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, backward_fn))

    def reset(self) -> None:
        self.records.clear()
        self._done = False

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

        Returns gradients of named tensors keyed by name.
        """
        if self._done:
            raise GradientError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GradientError("loss is not connected to this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        reached: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    reached[key] = inp
        named = {}
        for key, t in reached.items():
            g = grads[key].astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
            if t.name is not None:
                named[t.name] = t.grad
        self._done = True
        return named


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    if loss._tape is None:
        raise GradientError("loss is detached: it was not produced under a tape")
    return loss._tape.backward(loss)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    want = np.result_type(*(t.data.dtype for t in inputs))
    out = Tensor(np.asarray(data).astype(want, copy=False), requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- linear ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` may be 2-D (a shared weight, gradient summed over the leading axes of
    ``a``) or have the same leading axes as ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2
    if shared:
        # flatten leading axes: one 2-D GEMM beats a broadcast batched matmul
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = ad @ bd

    def back(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = a2.T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a vector added along the last axis."""
    if a.shape != b.shape and not (b.data.ndim == 1 and b.shape[0] == a.shape[-1]):
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    bias = a.shape != b.shape

    def back(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return _result(a.data + b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a`` (masks, dropout keeps)."""
    m = np.asarray(mask, dtype=a.data.dtype)
    return _result(a.data * m, (a,), lambda g: (g * m,))


def elementwise(a: Tensor, fn: Callable[[np.ndarray], np.ndarray],
                dfn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a scalar function with known derivative ``dfn`` elementwise."""
    x = a.data
    return _result(fn(x), (a,), lambda g: (g * dfn(x),))


def square(a: Tensor) -> Tensor:
    return elementwise(a, np.square, lambda x: 2.0 * x)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU, as in GPT-2."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), back)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    h = x.shape[-1] if x.data.ndim else 0
    if h == 0:
        raise DimensionError("layer_norm over an empty last dimension")
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs last dim {h}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, h)
        return gx, (flat * xhat.reshape(-1, h)).sum(axis=0), flat.sum(axis=0)

    return _result(out, (x, gain, bias), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")

    def back(g):
        flat = ids.reshape(-1)
        order = np.argsort(flat, kind="stable")
        keys = flat[order]
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        gt = np.zeros_like(table.data)
        if flat.size:
            gt[keys[starts]] = np.add.reduceat(g.reshape(-1, table.shape[1])[order], starts, axis=0)
        return (gt,)

    return _result(table.data[ids], (table,), back)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].data.ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    if not 0 <= start <= stop <= a.shape[-1]:
        raise DimensionError(f"slice {start}:{stop} outside last dim {a.shape[-1]}")

    def back(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul_const(a, keep)


# ------------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean over masked-in positions of ``-log softmax(logits)[target]``.

    ``logits`` has shape ``[..., V]``; ``targets``/``mask`` match its leading axes.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(f"targets {targets.shape}/mask {mask.shape} vs logits {logits.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross-entropy mask selects no positions")
    sel = targets[mask]
    if sel.min() < 0 or sel.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    fmask = mask.reshape(-1)
    ftgt = np.where(fmask, targets.reshape(-1), 0)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(flat.shape[0]), ftgt]
    value = nll[fmask].sum() / count

    def back(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(flat.shape[0]), ftgt] -= 1.0
        p *= (fmask / count)[:, None]
        return ((p * g).reshape(logits.shape),)

    return _result(np.asarray(value, dtype=logits.data.dtype), (logits,), back)


def squared_error(preds: Tensor, targets, mask) -> Tensor:
    """Mean over masked-in positions of the squared Euclidean error norm."""
    targets = np.asarray(targets, dtype=preds.data.dtype)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != preds.shape or mask.shape != preds.shape[:-1]:
        raise DimensionError(f"targets {targets.shape}/mask {mask.shape} vs preds {preds.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("squared-error mask selects no positions")
    diff = (preds.data - targets) * mask[..., None]
    value = (diff ** 2).sum() / count
    return _result(np.asarray(value, dtype=preds.data.dtype), (preds,),
                   lambda g: (g * 2.0 * diff / count,))


# ---------------------------------------------------------- gradient check

def numeric_grads(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, Tensor],
                  eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences ``(f(x+eps) - f(x-eps)) / 2eps`` for every coordinate."""
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(params).data)
            flat[i] = orig - eps
            down = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"objective not finite while perturbing {name}[{i}]")
            num[i] = (up - down) / (2 * eps)
        out[name] = num.reshape(p.shape)
    return out


def analytic_grads(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"objective is not finite: {loss.data}")
    tape.backward(loss)
    tape.reset()
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, Tensor],
               eps: float = 1e-4) -> dict[str, float]:
    """Relative error of the analytic gradient of each tensor against central differences.

    For a tensor, error is ``max|a - n| / max(max|a|, max|n|)`` (0 when both vanish).
    Coordinates whose true derivative is exactly zero, such as key biases under
    softmax shift invariance, carry only rounding noise of about
    ``machine_eps * |f| / eps`` numerically; a per-coordinate ratio would divide
    that noise by itself, so the tensor scale is the reference.
    """
    analytic = analytic_grads(f, params)
    numeric = numeric_grads(f, params, eps)
    return {name: relative_error(analytic[name], numeric[name]) for name in params}


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(float(np.abs(a).max()), float(np.abs(n).max()))
    return float(np.abs(a - n).max()) / scale if scale > 0 else 0.0
