"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything (images, network weights, losses) is carried by :class:`Tensor`,
a thin wrapper around a C-contiguous float64 ndarray. Operations on tensors
that require gradients record a backward closure and their parents, forming
an implicit tape; :func:`backward` replays it in reverse topological order.

Contracts enforced throughout:

* no broadcasting except scalar ops -- operand shapes must match exactly,
* every operation validates that its output is finite (no NaN/Inf),
* a tensor and the graph hanging off it belong to one thread; leaf tensors
  without recorded history (e.g. frozen weights) are safe to share.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced or received NaN/Inf values."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


_VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[_VJP] = None
        self._op = "leaf"

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        _require(self.data.size == 1, "item", f"tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A fresh leaf with a copy of this tensor's values and no history."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # pickling drops tape state; only leaf payloads travel between processes
    def __getstate__(self):
        return (self.data, self.requires_grad)

    def __setstate__(self, state):
        self.data, self.requires_grad = state
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scalar_mul(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def flatten(self) -> "Tensor":
        return flatten(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp: _VJP) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim and not data.flags["C_CONTIGUOUS"]:
        data = np.ascontiguousarray(data)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# -- graph traversal ------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar. Gradients accumulate into existing ``grad``
    buffers, so call ``zero_grad`` between independent passes.
    """
    _require(loss.shape == (), "backward", f"loss must be scalar, got shape {loss.shape}")
    order = topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            have = flowing.get(id(parent))
            flowing[id(parent)] = pg if have is None else have + pg


# -- elementwise and scalar ops ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "sub", f"shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def div_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Divide ``a`` elementwise by the scalar tensor ``s``."""
    _require(s.shape == (), "div_scalar", f"divisor must be scalar, got shape {s.shape}")
    sval = float(s.data)
    _require(sval != 0.0, "div_scalar", "division by zero")

    def vjp(g: np.ndarray):
        return g / sval, np.asarray(-(g * a.data).sum() / (sval * sval))

    return _result(a.data / sval, "div_scalar", (a, s), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def clamp01(a: Tensor) -> Tensor:
    """Clamp into [0, 1]; gradient passes through the interior and boundary."""
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    return _result(np.clip(a.data, 0.0, 1.0), "clamp01", (a,), lambda g: (g * inside,))


def elementwise_blend(a: Tensor, b: Tensor, mask: Tensor) -> Tensor:
    """``a * mask + b * (1 - mask)`` with matching shapes."""
    _require(
        a.shape == b.shape == mask.shape,
        "elementwise_blend",
        f"shape mismatch {a.shape} vs {b.shape} vs {mask.shape}",
    )
    m = mask.data

    def vjp(g: np.ndarray):
        return g * m, g * (1.0 - m), g * (a.data - b.data)

    return _result(a.data * m + b.data * (1.0 - m), "elementwise_blend", (a, b, mask), vjp)


# -- reductions and distances ----------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    _require(n > 0, "mean", "cannot average an empty tensor")
    return _result(np.asarray(a.data.mean()), "mean", (a,), lambda g: (np.full(a.shape, float(g) / n),))


def l2_norm(a: Tensor) -> Tensor:
    norm = float(np.sqrt((a.data * a.data).sum()))

    def vjp(g: np.ndarray):
        if norm == 0.0:
            return (np.zeros_like(a.data),)  # subgradient at the origin
        return (float(g) * a.data / norm,)

    return _result(np.asarray(norm), "l2_norm", (a,), vjp)


def sq_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared elementwise differences."""
    _require(a.shape == b.shape, "sq_l2_distance", f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def vjp(g: np.ndarray):
        scaled = (2.0 * float(g)) * diff
        return scaled, -scaled

    return _result(np.asarray((diff * diff).sum()), "sq_l2_distance", (a, b), vjp)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute elementwise difference."""
    _require(a.shape == b.shape, "l1_distance", f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g: np.ndarray):
        scaled = (float(g) / n) * np.sign(diff)
        return scaled, -scaled

    return _result(np.asarray(np.abs(diff).mean()), "l1_distance", (a, b), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of ``logits`` (B, K) against integer ``labels`` (B,)."""
    _require(logits.data.ndim == 2, "cross_entropy", f"logits must be rank-2, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.shape
    _require(lab.shape == (batch,), "cross_entropy", f"labels shape {lab.shape} != ({batch},)")
    _require(bool((lab >= 0).all() and (lab < n_classes).all()), "cross_entropy", "label out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    expz = np.exp(z - zmax)
    denom = expz.sum(axis=1, keepdims=True)
    softmax = expz / denom
    logprob = (z - zmax) - np.log(denom)
    loss = -logprob[np.arange(batch), lab].mean()

    def vjp(g: np.ndarray):
        grad = softmax.copy()
        grad[np.arange(batch), lab] -= 1.0
        return (grad * (float(g) / batch),)

    return _result(np.asarray(loss), "cross_entropy", (logits,), vjp)


# -- shape ops ------------------------------------------------------------------


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading axis; rank <= 1 passes through."""
    if a.data.ndim <= 1:
        new_shape: tuple[int, ...] = a.shape
    else:
        new_shape = (a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64)))
    return _result(a.data.reshape(new_shape), "flatten", (a,), lambda g: (g.reshape(a.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(data, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.ndim == 2 and b.data.ndim == 2, "matmul", f"rank-2 operands required, got {a.shape} @ {b.shape}")
    _require(a.shape[1] == b.shape[0], "matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-column bias (M,) to every row of a rank-2 tensor (N, M)."""
    _require(x.data.ndim == 2, "add_bias", f"input must be rank-2, got {x.shape}")
    _require(bias.shape == (x.shape[1],), "add_bias", f"bias shape {bias.shape} != ({x.shape[1]},)")
    return _result(x.data + bias.data[None, :], "add_bias", (x, bias), lambda g: (g, g.sum(axis=0)))


# -- spatial ops ------------------------------------------------------------------


def _conv_geometry(op: str, x_shape, w_shape, stride: int, padding: int) -> tuple[int, int]:
    _require(len(x_shape) == 4, op, f"input must be rank-4 (B,C,H,W), got {x_shape}")
    _require(len(w_shape) == 4, op, f"kernel must be rank-4 (O,C,kh,kw), got {w_shape}")
    _require(x_shape[1] == w_shape[1], op, f"channel mismatch: input {x_shape} vs kernel {w_shape}")
    _require(stride >= 1 and padding >= 0, op, f"stride {stride} and padding {padding} must be positive")
    h = x_shape[2] + 2 * padding - w_shape[2]
    w = x_shape[3] + 2 * padding - w_shape[3]
    _require(h >= 0 and w >= 0, op, f"kernel {w_shape} larger than padded input {x_shape}")
    return h // stride + 1, w // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (B, C, H, W) with an (O, C, kh, kw) kernel."""
    h_out, w_out = _conv_geometry("conv2d", x.shape, weight.shape, stride, padding)
    batch, _, _, _ = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if bias is not None:
        _require(bias.shape == (out_ch,), "conv2d", f"bias shape {bias.shape} != ({out_ch},)")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(batch, h_out * w_out, in_ch * kh * kw)
    kmat = weight.data.reshape(out_ch, in_ch * kh * kw)
    out = cols @ kmat.T  # (B, Ho*Wo, O)
    if bias is not None:
        out = out + bias.data[None, None, :]
    out = out.transpose(0, 2, 1).reshape(batch, out_ch, h_out, w_out)

    def vjp(g: np.ndarray):
        g2 = g.reshape(batch, out_ch, h_out * w_out).transpose(0, 2, 1)  # (B, Ho*Wo, O)
        d_kmat = np.einsum("bno,bnk->ok", g2, cols)
        d_cols = g2 @ kmat  # (B, Ho*Wo, C*kh*kw)
        d_windows = d_cols.reshape(batch, h_out, w_out, in_ch, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(
            (batch, in_ch, x.shape[2] + 2 * padding, x.shape[3] + 2 * padding), dtype=np.float64
        )
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += d_windows[
                    :, :, :, :, i, j
                ]
        dx = dxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]] if padding else dxp
        grads: list[Optional[np.ndarray]] = [dx, d_kmat.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", parents, vjp)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    _require(x.data.ndim == 4, "avg_pool2d", f"input must be rank-4, got {x.shape}")
    batch, ch, h, w = x.shape
    _require(k >= 1, "avg_pool2d", f"window {k} must be >= 1")
    _require(h % k == 0 and w % k == 0, "avg_pool2d", f"spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(batch, ch, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g: np.ndarray):
        g_up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g_up,)

    return _result(out, "avg_pool2d", (x,), vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a rank-4 tensor."""
    _require(x.data.ndim == 4, "upsample2x", f"input must be rank-4, got {x.shape}")
    batch, ch, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g: np.ndarray):
        return (g.reshape(batch, ch, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, "upsample2x", (x,), vjp)
