"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Every value is a (batch, channel, height, width) float array. Operations
build an implicit tape: each result remembers its inputs and a closure that
propagates gradients to them. ``Tensor.backward()`` walks that tape in
reverse topological order.

Tensors are treated as immutable values; ops never modify their inputs and
always allocate fresh output arrays, so results are bitwise reproducible
for a fixed precision. float32 is the working precision, float64 exists
for gradient verification (finite differences are unreliable in float32).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A rank-4 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise DimensionError(f"tensors are rank-4 (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, got dims {self.dims}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision; drops any graph history."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Seed this scalar node with gradient 1 and fill ``grad`` on every
        node that (transitively) produced it.

        Gradients from earlier calls are discarded first, so each call sees
        exactly one graph. Fan-out contributions accumulate by summation.
        """
        if self.dims != (1, 1, 1, 1):
            raise DimensionError(
                f"backward() seeds must be scalar (1, 1, 1, 1) tensors, got dims {self.dims}"
            )
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones((1, 1, 1, 1), dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; recursion would limit graph depth.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # "+" allocates, so a gradient array already assigned to another node is
    # never mutated through this path.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, inputs: Iterable[Tensor], backward: Callable[[], None] | None) -> Tensor:
    inputs = tuple(inputs)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        out._prev = inputs
        out._backward = backward
    return out


def _check_same_dims(x: Tensor, y: Tensor, op: str) -> None:
    if x.dims != y.dims:
        raise DimensionError(f"{op}: dims mismatch {x.dims} vs {y.dims}")
    if x.dtype != y.dtype:
        raise DimensionError(f"{op}: dtype mismatch {x.dtype} vs {y.dtype}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_dims(x, y, "add")
    out_data = x.data + y.data

    def backward():
        g = out.grad
        if x.requires_grad:
            _accumulate(x, g)
        if y.requires_grad:
            _accumulate(y, g)

    out = _make(out_data, (x, y), backward)
    return out


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_same_dims(x, y, "sub")
    out_data = x.data - y.data

    def backward():
        g = out.grad
        if x.requires_grad:
            _accumulate(x, g)
        if y.requires_grad:
            _accumulate(y, -g)

    out = _make(out_data, (x, y), backward)
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-dims tensors."""
    _check_same_dims(x, y, "mul")
    out_data = x.data * y.data

    def backward():
        g = out.grad
        if x.requires_grad:
            _accumulate(x, g * y.data)
        if y.requires_grad:
            _accumulate(y, g * x.data)

    out = _make(out_data, (x, y), backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out_data = x.data * x.data.dtype.type(c)

    def backward():
        if x.requires_grad:
            _accumulate(x, out.grad * x.data.dtype.type(c))

    out = _make(out_data, (x,), backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum over every element, as a (1, 1, 1, 1) scalar tensor."""
    out_data = x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def backward():
        if x.requires_grad:
            _accumulate(x, np.full(x.dims, out.grad.reshape(()), dtype=x.data.dtype))

    out = _make(out_data, (x,), backward)
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward():
        if x.requires_grad:
            # subgradient at exactly 0 is 0
            _accumulate(x, out.grad * (x.data > 0))

    out = _make(out_data, (x,), backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    # sign-split form: exp() only ever sees non-positive arguments
    t = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t)).astype(x.data.dtype)

    def backward():
        if x.requires_grad:
            _accumulate(x, out.grad * out.data * (1.0 - out.data))

    out = _make(out_data, (x,), backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent, dims (n, c, h, w) -> (n, c, 1, 1)."""
    n, c, h, w = x.dims
    if h < 1 or w < 1:
        raise DimensionError(f"global_avg_pool: empty spatial extent in dims {x.dims}")
    out_data = x.data.mean(axis=(2, 3), keepdims=True, dtype=x.data.dtype)

    def backward():
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(out.grad / (h * w), x.dims).astype(x.data.dtype))

    out = _make(out_data, (x,), backward)
    return out


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Per-channel broadcast multiply; ``s`` has dims (n, c, 1, 1)."""
    n, c, _, _ = x.dims
    if s.dims != (n, c, 1, 1):
        raise DimensionError(f"channel_scale: gate dims {s.dims} do not match (n={n}, c={c}, 1, 1)")
    if x.dtype != s.dtype:
        raise DimensionError(f"channel_scale: dtype mismatch {x.dtype} vs {s.dtype}")
    out_data = x.data * s.data

    def backward():
        g = out.grad
        if x.requires_grad:
            _accumulate(x, g * s.data)
        if s.requires_grad:
            _accumulate(s, (g * x.data).sum(axis=(2, 3), keepdims=True))

    out = _make(out_data, (x, s), backward)
    return out


# ---------------------------------------------------------------------------
# shape ops


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange r*r channel groups into an r-times larger spatial grid.

    out[n][c][h*r + i][w*r + j] = in[n][c*r*r + i*r + j][h][w]
    """
    n, c, h, w = x.dims
    r = int(r)
    if r < 1 or c % (r * r) != 0:
        raise DimensionError(f"pixel_shuffle: channels {c} not divisible by r*r = {r * r}")
    oc = c // (r * r)
    out_data = np.ascontiguousarray(
        x.data.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)
    )

    def backward():
        if x.requires_grad:
            g = out.grad
            _accumulate(
                x,
                np.ascontiguousarray(
                    g.reshape(n, oc, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w)
                ),
            )

    out = _make(out_data, (x,), backward)
    return out


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`: fold r x r spatial blocks into channels."""
    n, c, h, w = x.dims
    r = int(r)
    if r < 1 or h % r != 0 or w % r != 0:
        raise DimensionError(f"space_to_depth: spatial dims ({h}, {w}) not divisible by r = {r}")
    oh, ow = h // r, w // r
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, oh, r, ow, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, oh, ow)
    )

    def backward():
        if x.requires_grad:
            g = out.grad
            _accumulate(
                x,
                np.ascontiguousarray(
                    g.reshape(n, c, r, r, oh, ow).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w)
                ),
            )

    out = _make(out_data, (x,), backward)
    return out


def reflect_pad_br(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Mirror-pad on the bottom/right only (no edge duplication).

    Lets any input reach the next multiple of the downsampling factor; the
    mirror index is clamped so inputs smaller than the pad degrade to edge
    replication instead of failing.
    """
    if pad_h < 0 or pad_w < 0:
        raise DimensionError("reflect_pad_br: negative padding")
    if pad_h == 0 and pad_w == 0:
        return x
    n, c, h, w = x.dims
    row_idx = np.concatenate([np.arange(h), np.clip(h - 2 - np.arange(pad_h), 0, h - 1)])
    col_idx = np.concatenate([np.arange(w), np.clip(w - 2 - np.arange(pad_w), 0, w - 1)])
    out_data = np.ascontiguousarray(x.data[:, :, row_idx][:, :, :, col_idx])

    def backward():
        if x.requires_grad:
            g = out.grad
            folded_w = np.zeros((n, c, h + pad_h, w), dtype=g.dtype)
            np.add.at(folded_w, (slice(None), slice(None), slice(None), col_idx), g)
            gx = np.zeros((n, c, h, w), dtype=g.dtype)
            np.add.at(gx, (slice(None), slice(None), row_idx), folded_w)
            _accumulate(x, gx)

    out = _make(out_data, (x,), backward)
    return out


def crop_br(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Keep the top-leftout_h x out_w window; gradient zero-pads the rest."""
    n, c, h, w = x.dims
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise DimensionError(f"crop_br: target ({out_h}, {out_w}) exceeds dims {x.dims}")
    if out_h == h and out_w == w:
        return x
    out_data = x.data[:, :, :out_h, :out_w].copy()

    def backward():
        if x.requires_grad:
            gx = np.zeros(x.dims, dtype=out.grad.dtype)
            gx[:, :, :out_h, :out_w] = out.grad
            _accumulate(x, gx)

    out = _make(out_data, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weights, bias and geometry of one convolution layer.

    weight dims are (out_ch, in_ch, k, k); bias dims (1, out_ch, 1, 1).
    Default padding of k//2 keeps stride-1 convs size preserving.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        oc, ic, kh, kw = self.weight.dims
        if kh != kw or kh not in (1, 3):
            raise DimensionError(f"conv kernels must be square with k in {{1, 3}}, got {kh}x{kw}")
        if self.bias.dims != (1, oc, 1, 1):
            raise DimensionError(f"bias dims {self.bias.dims} do not match out_ch {oc}")
        if self.stride not in (1, 2):
            raise DimensionError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding is None:
            self.padding = kh // 2

    @property
    def in_ch(self) -> int:
        return self.weight.dims[1]

    @property
    def out_ch(self) -> int:
        return self.weight.dims[0]

    @property
    def kernel(self) -> int:
        return self.weight.dims[2]


def _window_view(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, c, oh, ow, k, k), (sn, sc, sh * stride, sw * stride, sh, sw))


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    Output dims are (n, out_ch, (h + 2p - k)//stride + 1, ...), which for the
    kernel/padding pairs used here equals ceil(h / stride).

    Forward is an im2col + GEMM: a strided window view of the padded input
    is contracted against the kernel with one tensordot call, so BLAS does
    the accumulation in a fixed order and results are deterministic.
    """
    n, c, h, w = x.dims
    if c != p.in_ch:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {p.in_ch}")
    if h < 1 or w < 1:
        raise DimensionError(f"conv2d: zero-sized spatial dims in {x.dims}")
    if x.dtype != p.weight.dtype or x.dtype != p.bias.dtype:
        raise DimensionError("conv2d: input and parameter dtypes differ")
    k, s, pad = p.kernel, p.stride, p.padding
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d: dims {x.dims} too small for kernel {k} with padding {pad}")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    oh = (h + 2 * pad - k) // s + 1
    ow = (w + 2 * pad - k) // s + 1

    windows = _window_view(xp, k, s, oh, ow)
    out_data = np.tensordot(windows, p.weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    out_data += p.bias.data

    weight, bias = p.weight, p.bias

    def backward():
        g = out.grad
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(g, _window_view(xp, k, s, oh, ow), axes=([0, 2, 3], [0, 2, 3])))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        if x.requires_grad:
            # scatter each kernel tap back onto the padded grid
            gwin = np.tensordot(g, weight.data, axes=([1], [0]))  # (n, oh, ow, c, k, k)
            gwin = gwin.transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki : ki + (oh - 1) * s + 1 : s, kj : kj + (ow - 1) * s + 1 : s] += gwin[
                        :, :, :, :, ki, kj
                    ]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            _accumulate(x, np.ascontiguousarray(gx))

    out = _make(out_data, (x, weight, bias), backward)
    return out


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(
    f: Callable[[], Tensor],
    leaf: Tensor,
    eps: float,
    max_elems: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare the analytic gradient of ``f()`` w.r.t. ``leaf`` against
    central finite differences.

    ``f`` rebuilds the scalar-valued graph from the current leaf contents on
    every call. Returns the max over checked elements of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.

    ``max_elems`` caps the number of coordinates checked (uniformly sampled
    without replacement); for large leaves an exhaustive sweep would cost two
    forward passes per element.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be positive, got {eps}")
    if leaf.dtype != np.float64:
        raise ValueError("finite_diff_check requires the 64-bit precision mode")

    out = f()
    out.backward()
    analytic = np.zeros(leaf.dims) if leaf.grad is None else leaf.grad.copy()

    size = leaf.data.size
    if max_elems is not None and max_elems < size:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(size, size=max_elems, replace=False)
    else:
        indices = np.arange(size)

    flat = leaf.data.reshape(-1)
    worst = 0.0
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = f().item()
        flat[idx] = orig - eps
        f_minus = f().item()
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic.reshape(-1)[idx])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst
