"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the inverse-scattering network needs are provided:
2-D convolution (cross-correlation convention, no kernel flip), transposed
convolution, ReLU, elementwise addition, cropping, summation and the mean
squared error. Gradients accumulate into ``Tensor.grad``; callers zero them
between optimisation steps.

Arrays are NCHW. Training runs in float32; gradient checks pass float64
arrays and every op preserves the input dtype.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, NumericalError

CHECKPOINT_MAGIC = b"WSCKPT1\n"


class Tensor:
    """A node on the tape: a value, its lazily allocated gradient, and the op
    that produced it."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self._grad += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


# ---------------------------------------------------------------------------
# im2col helpers
# ---------------------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*kh*kw, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int,
            stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col`` followed by cropping the padding away."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def _check_conv_shapes(x_shape, k_shape, stride: int, pad: int, op: str) -> None:
    if len(x_shape) != 4:
        raise DataError(f"{op}: input must be rank 4 (N,C,H,W), got rank {len(x_shape)}")
    if len(k_shape) != 4:
        raise DataError(f"{op}: kernels must be rank 4, got rank {len(k_shape)}")
    if stride < 1:
        raise DataError(f"{op}: stride must be positive, got {stride}")
    if pad < 0:
        raise DataError(f"{op}: pad must be non-negative, got {pad}")


def _weight_grad(a: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """sum_n a[n] @ cols[n].T for a (N, K, P) and cols (N, Q, P)."""
    out = a[0] @ cols[0].T
    for i in range(1, a.shape[0]):
        out += a[i] @ cols[i].T
    return out


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def conv2d(x, kernels, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        Input of shape (N, C, H, W).
    kernels : Tensor
        Weights of shape (K, C, kh, kw). Not flipped.
    bias : Tensor, optional
        Shape (K,).
    stride, pad : int
        Output extent is ``floor((H + 2*pad - kh) / stride) + 1``.

    Returns
    -------
    Tensor
        Shape (N, K, H', W').
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    _check_conv_shapes(x.shape, kernels.shape, stride, pad, "conv2d")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernels.shape
    if kc != c:
        raise DataError(f"conv2d: kernel channel dimension {kc} does not match input channels {c}")
    if kh > h + 2 * pad:
        raise DataError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise DataError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * pad}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (k,):
            raise DataError(f"conv2d: bias length {bias.shape} does not match output channels {k}")
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)

    cols = _im2col(_pad(x.data, pad), kh, kw, stride, ho, wo)
    w2 = kernels.data.reshape(k, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, k, ho, wo)

    def backward(g: np.ndarray) -> None:
        g = g.reshape(n, k, ho * wo)
        if kernels.requires_grad:
            kernels._accumulate(_weight_grad(g, cols).reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g)
            x._accumulate(_col2im(dcols, c, h, w, kh, kw, stride, pad, ho, wo))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, backward)


def conv2d_adjoint(y: np.ndarray, kernels: np.ndarray, stride: int, pad: int,
                   input_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of the linear part of :func:`conv2d` (no bias), on plain arrays.

    Maps (N, K, H', W') back to (N, C, H, W) for kernels of shape (K, C, kh, kw).
    """
    n, k, ho, wo = y.shape
    _, c, kh, kw = kernels.shape
    h, w = input_hw
    dcols = np.matmul(kernels.reshape(k, -1).T, y.reshape(n, k, ho * wo))
    return _col2im(dcols, c, h, w, kh, kw, stride, pad, ho, wo)


def deconv2d(x, kernels, bias=None, stride: int = 2, pad: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of ``conv2d(., kernels, stride, pad)``.

    Kernels have shape (C_in, K_out, kh, kw). The output extents must come out
    to exactly ``stride`` times the input extents, which requires
    ``kh - 2*pad == stride`` (likewise for kw).
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    _check_conv_shapes(x.shape, kernels.shape, stride, pad, "deconv2d")
    n, c, h, w = x.shape
    kc, k, kh, kw = kernels.shape
    if kc != c:
        raise DataError(f"deconv2d: kernel input dimension {kc} does not match input channels {c}")
    if kh - 2 * pad != stride:
        raise DataError(f"deconv2d: kernel height {kh} with pad {pad} does not give stride-{stride} upsampling")
    if kw - 2 * pad != stride:
        raise DataError(f"deconv2d: kernel width {kw} with pad {pad} does not give stride-{stride} upsampling")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (k,):
            raise DataError(f"deconv2d: bias length {bias.shape} does not match output channels {k}")
    ho, wo = stride * h, stride * w

    w2 = kernels.data.reshape(c, -1)
    out = conv2d_adjoint(x.data, kernels.data, stride, pad, (ho, wo))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        gcols = _im2col(_pad(g, pad), kh, kw, stride, h, w)
        if kernels.requires_grad:
            xf = x.data.reshape(n, c, h * w)
            kernels._accumulate(_weight_grad(xf, gcols).reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(np.matmul(w2, gcols).reshape(n, c, h, w))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, backward)


def relu(x) -> Tensor:
    """Elementwise max(x, 0). The subgradient at exactly 0 is taken as 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _result(out, (x,), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DataError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def crop2d(x, top: int, left: int, height: int, width: int) -> Tensor:
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise DataError(f"crop2d: window ({top},{left},{height},{width}) outside extents {(h, w)}")
    out = x.data[..., top:top + height, left:left + width].copy()

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[..., top:top + height, left:left + width] = g
        x._accumulate(full)

    return _result(out, (x,), backward)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as a constant."""
    pred = _as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise DataError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g: np.ndarray) -> None:
        pred._accumulate(g * (2.0 / diff.size) * diff)

    return _result(out, (pred,), backward)


# ---------------------------------------------------------------------------
# tape sweep
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar ``loss``; gradients add into ``.grad``."""
    if loss.data.size != 1:
        raise DataError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    # Intermediate grads are scratch space for this sweep only.
    for node in order:
        if node._backward is not None:
            node._grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A step with any non-finite gradient entry is rejected with
    :class:`NumericalError` before anything is modified.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DataError("adam_step: params, grads and state lengths differ")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise DataError(f"adam_step: shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {i}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for e in arr.shape:
        fh.write(struct.pack("<I", e))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], adam: AdamState | None = None,
                    names: Sequence[str] | None = None) -> None:
    """Write named float32 arrays (and optionally Adam moments) to ``path``.

    Adam moments are stored under ``<name>.m`` / ``<name>.v`` for the
    parameter names in ``names`` (default: every key of ``tensors``), with the
    step counter under ``adam.t``.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in tensors.items():
            _write_entry(fh, name, arr)
        if adam is not None:
            pnames = list(tensors) if names is None else list(names)
            if len(pnames) != len(adam.m):
                raise DataError("save_checkpoint: Adam state does not match parameter names")
            for name, m, v in zip(pnames, adam.m, adam.v):
                _write_entry(fh, name + ".m", m)
                _write_entry(fh, name + ".v", v)
            _write_entry(fh, "adam.t", np.array([adam.t], dtype=np.float64))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read every entry of a checkpoint into a name -> float32 array dict."""
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = arr.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    return out


def adam_from_checkpoint(entries: Mapping[str, np.ndarray], names: Iterable[str], lr: float,
                         beta1: float, beta2: float, eps: float) -> AdamState | None:
    names = list(names)
    if "adam.t" not in entries:
        return None
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                     t=int(entries["adam.t"][0]),
                     m=[entries[n + ".m"].copy() for n in names],
                     v=[entries[n + ".v"].copy() for n in names])
