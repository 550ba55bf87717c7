"""Dense tensors and a reverse-mode differentiation tape.

Operations record a :class:`Node` on the active :class:`Tape` whenever one of
their inputs requires a gradient.  :func:`backward` walks the tape in reverse
recording order.  Two node attributes shape the error flow without touching
forward values: ``scale`` multiplies the error passing through the node and
``barrier`` blocks it entirely.  :func:`scale_grad` and :func:`stop_grad` are
the user-facing constructors for such nodes.

Tapes are per forward pass and per thread; a pipeline worker owns its own tape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, TapeError

PRECISIONS = {"wide": np.float64, "standard": np.float32}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ConfigError(f"unknown precision {precision!r}; expected 'wide' or 'standard'") from None
    return np.dtype(precision)


class Tensor:
    """Immutable array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Node:
    __slots__ = ("op", "inputs", "output", "vjp", "scale", "barrier")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp: Callable, scale: float = 1.0, barrier: bool = False):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp
        self.scale = scale
        self.barrier = barrier

    def __repr__(self) -> str:
        return f"Node({self.op}, scale={self.scale}, barrier={self.barrier})"


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the nodes produced during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


@contextlib.contextmanager
def no_tape():
    """Run ops without recording (finite-difference evaluations, inference)."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


# Activation-pattern capture: lets a finite-difference oracle detect when a
# perturbation crossed a ReLU kink or flipped a max-pool winner.
@contextlib.contextmanager
def record_patterns():
    patterns: list[np.ndarray] = []
    prev = getattr(_local, "patterns", None)
    _local.patterns = patterns
    try:
        yield patterns
    finally:
        _local.patterns = prev


def _note_pattern(arr: np.ndarray) -> None:
    patterns = getattr(_local, "patterns", None)
    if patterns is not None:
        patterns.append(arr)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable,
          scale: float = 1.0, barrier: bool = False) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(op, inputs, out, vjp, scale=scale, barrier=barrier))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), out, vjp)


def mul_const(a: Tensor, c: np.ndarray | float) -> Tensor:
    """Elementwise product with a constant (no gradient to ``c``)."""
    return _emit("mul_const", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_pattern(mask)
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype, copy=False), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).astype(g.dtype),)

    return _emit("avgpool", (x,), x.data.mean(axis=(2, 3)), vjp)


def max_pool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2x2 expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"max_pool2x2: spatial extent {H}x{W} too small")
    win = x.data[:, :, : 2 * Ho, : 2 * Wo].reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = win.argmax(axis=-1)
    _note_pattern(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((B, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * Ho, : 2 * Wo] = gw.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
        return (gx,)

    return _emit("maxpool", (x,), out, vjp)


def conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_check(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d expects a square kernel, got {w.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    k = w.shape[2]
    Ho = conv_output_extent(x.shape[2], k, stride, padding)
    Wo = conv_output_extent(x.shape[3], k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {x.shape}, kernel {k}, stride {stride}, padding {padding}")
    return Ho, Wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Reference cross-correlation by explicit loops over output positions."""
    Ho, Wo = _conv_check(x, w, stride, padding)
    k = w.shape[2]
    xp = _pad(x, padding)
    out = np.zeros((x.shape[0], w.shape[0], Ho, Wo), dtype=np.result_type(x, w))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, i * stride: i * stride + k, j * stride: j * stride + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


def _windows(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    return cols[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]


def conv2d_im2col(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    Ho, Wo = _conv_check(x, w, stride, padding)
    cols = _windows(_pad(x, padding), w.shape[2], stride, Ho, Wo)
    return np.einsum("bchwij,ocij->bohw", cols, w, optimize=True)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    X, Wt = x.data, w.data
    Ho, Wo = _conv_check(X, Wt, stride, padding)
    B, C = X.shape[:2]
    O, k = Wt.shape[0], Wt.shape[2]
    xp = _pad(X, padding)
    # im2col, built once: rows are (sample, y, x), columns are (channel, ky, kx)
    cols = np.ascontiguousarray(_windows(xp, k, stride, Ho, Wo).transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, -1)
    wmat = Wt.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def vjp(g):
        gx = gw = None
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(Wt.shape)
        if x.requires_grad:
            gc = (gmat @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros((B, xp.shape[2], xp.shape[3], C), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i: i + (Ho - 1) * stride + 1: stride, j: j + (Wo - 1) * stride + 1: stride] += gc[..., i, j]
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding: padding + X.shape[2], padding: padding + X.shape[3]] if padding else gxp
        return gx, gw

    return _emit("conv2d", (x, w), np.ascontiguousarray(out), vjp)


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize with batch statistics.  Returns ``(out, batch_mean, batch_var)``."""
    X = x.data
    axes, bshape = _bn_axes(X)
    if X.shape[0] < 2:
        raise ShapeError(f"batch_norm in train mode needs batch size >= 2, got {X.shape[0]}")
    n = X.size // X.shape[1]
    mean = X.mean(axis=axes)
    var = X.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mean.reshape(bshape)) * inv.reshape(bshape)
    G = gamma.data.reshape(bshape)
    out = xhat * G + beta.data.reshape(bshape)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * G
        gx = (inv.reshape(bshape) / n) * (
            n * dxhat - dxhat.sum(axis=axes).reshape(bshape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
        )
        return gx, dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta), out, vjp), mean, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                    eps: float = 1e-5) -> Tensor:
    X = x.data
    axes, bshape = _bn_axes(X)
    inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape)
    xhat = (X - running_mean.reshape(bshape)) * inv
    G = gamma.data.reshape(bshape)

    def vjp(g):
        return g * G * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("batchnorm_eval", (x, gamma, beta), (xhat * G + beta.data.reshape(bshape)).astype(X.dtype, copy=False), vjp)


def scale_grad(t: Tensor, s: float) -> Tensor:
    """Identity forward; the backward error is multiplied by ``s``."""
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ConfigError(f"scale_grad factor must lie in [0, 1], got {s}")
    return _emit("scale_grad", (t,), t.data, lambda g: (g,), scale=s)


def stop_grad(t: Tensor) -> Tensor:
    """Identity forward; no error passes back through this node."""
    return _emit("stop_grad", (t,), t.data, lambda g: (g,), barrier=True)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, seeds: Mapping[Tensor, np.ndarray], wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate seed errors through ``tape`` in reverse recording order.

    Multiple seeds sum by linearity.  Returns gradients keyed by tensor: for
    the tensors in ``wrt`` if given, otherwise for every leaf that requires a
    gradient and was reached.
    """
    grads: dict[int, np.ndarray] = {}
    owners: dict[int, Tensor] = {}
    for t, g in seeds.items():
        if t not in tape:
            raise TapeError(f"seed tensor {t!r} was not produced on this tape")
        g = np.asarray(g, dtype=t.dtype)
        if g.shape != t.shape:
            raise ShapeError(f"seed error shape {g.shape} does not match tensor shape {t.shape}")
        key = id(t)
        grads[key] = grads[key] + g if key in grads else g.copy()
        owners[key] = t

    wanted = None if wrt is None else {id(t): t for t in wrt}
    kept: dict[int, np.ndarray] = {}

    for node in reversed(tape.nodes):
        key = id(node.output)
        g = grads.pop(key, None)
        if g is None:
            continue
        if wanted is not None and key in wanted:
            kept[key] = g
        if node.barrier:
            continue
        if node.scale != 1.0:
            g = g * node.scale
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                owners[k] = inp

    result: dict[Tensor, np.ndarray] = {}
    if wanted is not None:
        for k, t in wanted.items():
            g = kept.get(k, grads.get(k))
            result[t] = np.zeros(t.shape, dtype=t.dtype) if g is None else g
        return result
    for k, g in grads.items():
        result[owners[k]] = g
    return result
