"""Small double-precision tensor library with reverse-mode autodiff.

Only the handful of operations the autoencoder needs are provided:
2-D convolution and its transpose, affine maps, ReLU, sigmoid, reshape,
summation and mean squared error.  Every forward result is checked for
NaN/Inf so numeric blow-ups surface at the op that caused them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, UsageError

__all__ = [
    "Tensor",
    "AdamState",
    "adam_step",
    "backward",
    "conv2d",
    "conv_transpose2d",
    "linear",
    "relu",
    "sigmoid",
    "mse_loss",
    "reshape",
    "tsum",
    "zero_grad",
]


class Tensor:
    """n-dimensional float64 array that may take part in gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; copied to a contiguous float64 array.
    tracked : bool
        Whether gradients should flow to this tensor.
    """

    __slots__ = ("data", "grad", "tracked", "_parents", "_backward")

    def __init__(self, data, tracked: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.tracked = tracked
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


def _result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str,
) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tracked = any(p.tracked for p in parents)
    out._parents = parents if out.tracked else ()
    out._backward = rule if out.tracked else None
    return out


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    Intermediate gradients live only for the duration of the call, so
    calling ``backward`` twice on the same graph doubles leaf gradients.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise UsageError("backward() called on a tensor that is not tracked")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# convolution helpers

def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Return windows of shape (N, H', W', C, kh, kw) from an (N, C, H, W) array."""
    x = x.transpose(0, 2, 3, 1)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win[:, ::stride, ::stride])


def _scatter(
    mat: np.ndarray,
    kernel: np.ndarray,
    grid: tuple[int, int, int],
    out_hw: tuple[int, int],
    stride: int,
    padding: int,
) -> np.ndarray:
    """Spread ``mat @ kernel[:, :, i, j]`` over every kernel offset (i, j).

    ``mat`` is (N*H'*W', A) laid out as the (N, H', W') grid, ``kernel`` is
    (A, C, kh, kw); the result is the (N, C, H, W) overlap-add.  This is the
    input-gradient of conv2d and the forward pass of conv_transpose2d.
    """
    n, hg, wg = grid
    _, c, kh, kw = kernel.shape
    h, w = out_hw
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))
    for i in range(kh):
        for j in range(kw):
            part = (mat @ taps[i, j]).reshape(n, hg, wg, c)
            out[:, i : i + stride * hg : stride, j : j + stride * wg : stride] += part
    if padding:
        out = out[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _check_stride_padding(stride: int, padding: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ConfigError(f"stride must be a positive int, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ConfigError(f"padding must be a non-negative int, got {padding}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate an (N, C_in, H, W) batch with a (C_out, C_in, kH, kW) kernel."""
    _check_stride_padding(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ConfigError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if bias.shape != (co,):
        raise ConfigError(f"conv2d bias shape {bias.shape} does not match {co} output channels")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    cols = _im2col(x.data, kh, kw, stride, padding).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(co, -1)
    out = (cols @ kmat.T + bias.data).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gx = gk = gb = None
        if x.tracked:
            gx = _scatter(gmat, kernel.data, (n, ho, wo), (h, w), stride, padding)
        if kernel.tracked:
            gk = (gmat.T @ cols).reshape(kernel.shape)
        if bias.tracked:
            gb = gmat.sum(axis=0)
        return gx, gk, gb

    return _result(out, (x, kernel, bias), rule, "conv2d")


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution with a (C_in, C_out, kH, kW) kernel.

    The forward pass is exactly the input-gradient of :func:`conv2d` for the
    same geometry, so output extent is ``(H - 1) * stride - 2 * padding + kH``.
    """
    _check_stride_padding(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigError(
            f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    ci, co, kh, kw = kernel.shape
    if ci != c:
        raise ConfigError(f"conv_transpose2d channel mismatch: input has {c}, kernel expects {ci}")
    if bias.shape != (co,):
        raise ConfigError(f"conv_transpose2d bias shape {bias.shape} does not match {co} channels")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv_transpose2d output extent {ho}x{wo} is empty")
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    kmat = kernel.data.reshape(ci, -1)
    out = _scatter(xmat, kernel.data, (n, h, w), (ho, wo), stride, padding) + bias.data[None, :, None, None]

    def rule(g):
        gcols = _im2col(g, kh, kw, stride, padding).reshape(n * h * w, co * kh * kw)
        gx = gk = gb = None
        if x.tracked:
            gx = np.ascontiguousarray((gcols @ kmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        if kernel.tracked:
            gk = (xmat.T @ gcols).reshape(kernel.shape)
        if bias.tracked:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _result(out, (x, kernel, bias), rule, "conv_transpose2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (N, F_in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear inner dimensions differ: {x.shape} vs {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ConfigError(f"linear bias shape {bias.shape} does not match {weight.shape[0]}")
    out = x.data @ weight.data.T + bias.data

    def rule(g):
        gx = g @ weight.data if x.tracked else None
        gw = g.T @ x.data if weight.tracked else None
        gb = g.sum(axis=0) if bias.tracked else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), rule, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"cannot reshape {src} to {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def tsum(x: Tensor) -> Tensor:
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over every element of the squared difference."""
    if pred.shape != target.shape:
        raise ConfigError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.array(np.dot(diff.ravel(), diff.ravel()) / n)

    def rule(g):
        scale = 2.0 * float(g) / n
        return (
            diff * scale if pred.tracked else None,
            -diff * scale if target.tracked else None,
        )

    return _result(out, (pred, target), rule, "mse_loss")


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and advance ``state``."""
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise UsageError(f"adam_step: parameters {missing} have no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise UsageError("adam_step: parameter list changed between steps")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise UsageError(f"adam_step: moment shape {m.shape} != parameter {p.data.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
