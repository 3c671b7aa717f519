"""Dense tensors, the forward ops used by the classifiers, and reverse-mode autodiff.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`. While
gradient recording is enabled (the default) the output carries an
:class:`OpRecord` describing how it was produced, and :func:`backward` walks
those records in reverse topological order, accumulating into the ``grad`` of
every reachable :class:`Parameter`.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes or invalid geometry."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without emitting OpRecords (inference and finite differences)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(frozen=True, eq=False)
class OpRecord:
    """How a tensor was produced: op kind, inputs, attributes and saved intermediates."""

    kind: str
    inputs: tuple["Tensor", ...]
    attrs: dict[str, Any]
    saved: dict[str, Any]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] = field(repr=False)


class Tensor:
    """Immutable dense array with an optional record of the op that produced it."""

    __slots__ = ("data", "record")

    def __init__(self, data: Any, dtype: Any = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in SUPPORTED_DTYPES else DEFAULT_DTYPE
        dtype = np.dtype(dtype)
        if dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.array(data, dtype=dtype, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.record: OpRecord | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.record = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data.item())

    def __repr__(self) -> str:
        kind = f", op={self.record.kind}" if self.record is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{kind})"


_param_ids = itertools.count()


class Parameter(Tensor):
    """Trainable leaf tensor. ``data`` is mutated in place by the optimizer."""

    __slots__ = ("grad", "id")

    def __init__(self, data: Any, dtype: Any = None, name: str | None = None):
        super().__init__(data, dtype)
        self.data = self.data.copy()  # writable
        self.grad = np.zeros_like(self.data)
        self.id = name if name is not None else f"param{next(_param_ids)}"

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x: Any, dtype: Any = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype)


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward, attrs=None, saved=None) -> Tensor:
    t = Tensor._wrap(out)
    if is_grad_enabled() and any(_tracks(x) for x in inputs):
        t.record = OpRecord(kind, tuple(inputs), dict(attrs or {}), dict(saved or {}), backward)
    return t


def _tracks(x: Tensor) -> bool:
    return isinstance(x, Parameter) or x.record is not None


def _check_same_dtype(*xs: Tensor) -> None:
    dtypes = {x.dtype for x in xs}
    if len(dtypes) > 1:
        raise TypeError(f"mixed precision inputs: {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[N, C_in, H, W]``, ``weight`` is ``[C_out, C_in, kH, kW]`` and
    ``bias`` is ``[C_out]``. The output is ``[N, C_out, H', W']`` with
    ``H' = (H + 2*padding - kH) // stride + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeError(f"conv2d expects input rank 4, weight rank 4, bias rank 1; got input {x.shape}, "
                         f"weight {weight.shape}, bias {bias.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ShapeError(f"conv2d stride must be a positive integer, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ShapeError(f"conv2d padding must be a non-negative integer, got {padding!r}")
    if 0 in x.shape or 0 in weight.shape:
        raise ShapeError(f"conv2d got a zero dimension: input {x.shape}, weight {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has {c} channels, weight {weight.shape} expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match weight {weight.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel larger than padded input: input {x.shape}, weight {weight.shape}, padding {padding}")
    _check_same_dtype(x, weight, bias)

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
        dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        if padding:
            dx = dx[:, :, padding:-padding, padding:-padding]
        return dx, dw, db

    return _emit("conv2d", out, (x, weight, bias), backward,
                 attrs={"padding": padding, "stride": stride}, saved={"cols": cols})


# ---------------------------------------------------------------------------
# pooling / activations


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling. Ties go to the first element in row-major order."""
    if window != stride:
        raise ShapeError(f"maxpool2d supports non-overlapping windows only (window {window}, stride {stride})")
    if window < 1:
        raise ShapeError(f"maxpool2d window must be positive, got {window}")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    k = window
    if h % k or w % k:
        raise ShapeError(f"maxpool2d needs spatial dims divisible by {k}, got input {x.shape}")
    oh, ow = h // k, w // k
    windows = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gw = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        dx = gw.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _emit("maxpool2d", out, (x,), backward, attrs={"window": window, "stride": stride}, saved={"argmax": idx})


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g: np.ndarray):
        return (g * mask,)

    return _emit("relu", out, (x,), backward, saved={"mask": mask})


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)

    def backward(g: np.ndarray):
        return g, g

    return _emit("residual_add", a.data + b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# dense / reshape


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``x: [N, F]``, ``weight: [F, M]``, ``bias: [M]``."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"dense expects input rank 2, weight rank 2, bias rank 1; got input {x.shape}, "
                         f"weight {weight.shape}, bias {bias.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense inner dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias {bias.shape} does not match weight {weight.shape}")
    _check_same_dtype(x, weight, bias)
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def backward(g: np.ndarray):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _emit("dense", out, (x, weight, bias), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(src),)

    return _emit("reshape", x.data.reshape(shape), (x,), backward, attrs={"shape": shape})


def flatten(x: Tensor) -> Tensor:
    """``[N, C, H, W] -> [N, C*H*W]`` keeping row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"flatten expects rank-4 input, got {x.shape}")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def unflatten(x: Tensor, shape: Sequence[int]) -> Tensor:
    return reshape(x, shape)


# ---------------------------------------------------------------------------
# losses


def _labels_array(labels: Any, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    bad = (y < 0) | (y >= k)
    if bad.any():
        raise ValueError(f"label {int(y[bad][0])} out of range [0, {k})")
    return y.astype(np.intp)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Any) -> tuple[Tensor, Tensor]:
    """Mean categorical cross-entropy of softmax(logits); returns ``(loss, probabilities)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    y = _labels_array(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = 0.0 - logp[np.arange(n), y].mean()  # avoid -0.0 on perfect predictions

    def backward(g: np.ndarray):
        d = probs.copy()
        d[np.arange(n), y] -= 1
        return (d * (g / n),)

    out = _emit("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward,
                attrs={"labels": y}, saved={"probs": probs})
    return out, Tensor._wrap(probs)


def mse_loss(pred: Tensor, target: Any) -> Tensor:
    """Mean squared error against a constant target."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t

    def backward(g: np.ndarray):
        return (g * 2.0 * diff / diff.size,)

    return _emit("mse_loss", np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), backward,
                 attrs={"target": t})


def weighted_sum(x: Tensor, weights: Any) -> Tensor:
    """``sum(x * weights)`` for a constant weight array; a generic scalar probe for gradient checks."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {x.shape} vs {w.shape}")

    def backward(g: np.ndarray):
        return (g * w,)

    return _emit("weighted_sum", np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), backward,
                 attrs={"weights": w})


# ---------------------------------------------------------------------------
# reverse mode


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.record is not None:
            for parent in node.record.inputs:
                if id(parent) not in seen and _tracks(parent):
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(param) into ``param.grad`` for every reachable Parameter."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g.reshape(node.shape)
            continue
        rec = node.record
        if rec is None:
            continue
        for parent, pg in zip(rec.inputs, rec.backward(g)):
            if pg is None or not _tracks(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


_REPLAY: dict[str, Callable[..., Tensor]] = {
    "conv2d": lambda ins, a: conv2d(*ins, **a),
    "maxpool2d": lambda ins, a: maxpool2d(*ins, **a),
    "relu": lambda ins, a: relu(*ins),
    "residual_add": lambda ins, a: residual_add(*ins),
    "dense": lambda ins, a: dense(*ins),
    "reshape": lambda ins, a: reshape(ins[0], a["shape"]),
    "softmax_cross_entropy": lambda ins, a: softmax_cross_entropy(ins[0], a["labels"])[0],
    "mse_loss": lambda ins, a: mse_loss(ins[0], a["target"]),
    "weighted_sum": lambda ins, a: weighted_sum(ins[0], a["weights"]),
}


def replay(t: Tensor) -> Tensor:
    """Recompute ``t`` from its recorded inputs (no new record is emitted)."""
    if t.record is None:
        raise ValueError("tensor has no op record to replay")
    with no_grad():
        return _REPLAY[t.record.kind](t.record.inputs, t.record.attrs)
