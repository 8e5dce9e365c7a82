"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float64 by default, float32 opt-in)
and records the operations applied to it as a dynamically built graph:
every non-leaf tensor keeps references to its parents together with one
vector-Jacobian closure per parent.  ``backward()`` on a scalar walks that
graph once in reverse topological order and accumulates gradients
additively into every ``requires_grad`` tensor, so an explicit
``zero_grad`` is required between iterations.

The operation set is deliberately small: elementwise arithmetic with
exact-shape or scalar broadcasting, ReLU/Sigmoid/sign with a
straight-through derivative, sum/mean/reshape, channel concat/slice/scale,
pixel (un)shuffle, and grouped strided 2-D convolution with its transpose.
Convolution is lowered to im2col + matrix multiply; its backward folds
columns back with a small loop over kernel offsets, which keeps the
reduction order fixed and the results deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.float32, np.float64)


def _as_data(data, dtype=None):
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
    if arr.ndim == 0:
        return np.asarray(arr, dtype=dtype)  # ascontiguousarray would promote to 1-d
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """N-dimensional float array participating in a differentiation graph.

    Image data uses the (batch, channels, height, width) convention.
    ``grad`` is ``None`` until ``backward`` reaches this tensor; it then has
    the same shape as ``data`` and accumulates across repeated backward
    passes until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_data(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value outside any graph."""
        return Tensor(self.data.copy())

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _result(data, parents, vjps):
        """Create an op result; records parents only when gradients can flow.

        ``vjps[i]`` maps the upstream gradient to parent ``i``'s gradient
        contribution (as an ndarray); it is ``None`` for parents that do not
        require gradients.
        """
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjps = tuple(
                (vjp if p.requires_grad else None) for p, vjp in zip(parents, vjps)
            )
        return out

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into ``grad`` (+=)."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss tensor")
        # Iterative topological sort: recursion would overflow on deep
        # unrolled networks.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            gout = grads.pop(id(node), None)
            if gout is None:
                continue
            if node.requires_grad:
                node.grad = gout if node.grad is None else node.grad + gout
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None:
                    continue
                contrib = vjp(gout)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    # -- elementwise arithmetic ----------------------------------------------

    @staticmethod
    def _coerce(other, like) -> "Tensor":
        if isinstance(other, Tensor):
            if other.shape != like.shape and other.size != 1 and like.size != 1:
                raise DimensionError(
                    f"elementwise shapes differ: {like.shape} vs {other.shape}"
                )
            return other
        if np.isscalar(other):
            return Tensor(np.asarray(other, dtype=like.dtype))
        raise DimensionError("operand must be a Tensor or a scalar")

    @staticmethod
    def _reduce_to(operand: "Tensor"):
        """VJP wrapper summing the gradient for a scalar operand."""

        def wrap(fn):
            def vjp(g):
                out = fn(g)
                if operand.size == 1 and out.size != 1:
                    return np.asarray(out.sum(), dtype=out.dtype).reshape(operand.shape)
                return out

            return vjp

        return wrap

    def __add__(self, other):
        o = Tensor._coerce(other, self)
        return Tensor._result(
            self.data + o.data,
            (self, o),
            (Tensor._reduce_to(self)(lambda g: g), Tensor._reduce_to(o)(lambda g: g)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other):
        o = Tensor._coerce(other, self)
        return Tensor._result(
            self.data - o.data,
            (self, o),
            (Tensor._reduce_to(self)(lambda g: g), Tensor._reduce_to(o)(lambda g: -g)),
        )

    def __rsub__(self, other):
        return Tensor._coerce(other, self) - self

    def __mul__(self, other):
        o = Tensor._coerce(other, self)
        a, b = self, o
        return Tensor._result(
            a.data * b.data,
            (a, b),
            (
                Tensor._reduce_to(a)(lambda g: g * b.data),
                Tensor._reduce_to(b)(lambda g: g * a.data),
            ),
        )

    __rmul__ = __mul__

    # -- nonlinearities --------------------------------------------------------

    def relu(self):
        mask = self.data > 0
        return Tensor._result(
            np.where(mask, self.data, 0.0), (self,), (lambda g: g * mask,)
        )

    def sigmoid(self):
        y = expit(self.data)
        return Tensor._result(y, (self,), (lambda g: g * y * (1.0 - y),))

    def sign_ste(self):
        """sign with a straight-through derivative.

        Forward maps non-negative entries to +1 and negative ones to -1;
        backward passes the upstream gradient through unchanged.
        """
        y = np.where(self.data >= 0, 1.0, -1.0).astype(self.dtype)
        return Tensor._result(y, (self,), (lambda g: g,))

    # -- reductions and rearrangements -----------------------------------------

    def sum(self):
        return Tensor._result(
            np.asarray(self.data.sum(), dtype=self.dtype).reshape(()),
            (self,),
            (lambda g: np.broadcast_to(g, self.shape).copy(),),
        )

    def mean(self):
        n = self.data.size
        return Tensor._result(
            np.asarray(self.data.mean(), dtype=self.dtype).reshape(()),
            (self,),
            (lambda g: np.broadcast_to(g / n, self.shape).copy(),),
        )

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(
            self.data.reshape(shape).copy(),
            (self,),
            (lambda g: g.reshape(old),),
        )

    def slice_channels(self, start: int, stop: int) -> "Tensor":
        """View-free slice ``[:, start:stop]`` of an NCHW tensor."""
        if self.ndim != 4:
            raise DimensionError("slice_channels expects an NCHW tensor")
        if not (0 <= start < stop <= self.shape[1]):
            raise DimensionError(f"channel slice [{start}:{stop}] out of range")

        def g_self(g):
            full = np.zeros(self.shape, dtype=g.dtype)
            full[:, start:stop] = g
            return full

        return Tensor._result(self.data[:, start:stop].copy(), (self,), (g_self,))

    def channel_scale(self, scales) -> "Tensor":
        """Multiply each channel by a constant factor (no gradient to scales)."""
        if self.ndim != 4:
            raise DimensionError("channel_scale expects an NCHW tensor")
        v = np.asarray(scales, dtype=self.dtype).reshape(1, -1, 1, 1)
        if v.shape[1] != self.shape[1]:
            raise DimensionError("one scale per channel required")
        return Tensor._result(self.data * v, (self,), (lambda g: g * v,))


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate tensors along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor._result(data, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


# ---------------------------------------------------------------------------
# pixel shuffle / unshuffle
# ---------------------------------------------------------------------------


def _shuffle_data(x: np.ndarray, s: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = x.reshape(n, c // (s * s), s, s, h, w)
    return out.transpose(0, 1, 4, 2, 5, 3).reshape(n, c // (s * s), h * s, w * s)


def _unshuffle_data(x: np.ndarray, s: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // s, s, w // s, s)
    return out.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h // s, w // s)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange ``[N, C·s², H, W]`` to ``[N, C, H·s, W·s]`` (bijective)."""
    if s < 1:
        raise DimensionError("shuffle factor must be >= 1")
    if x.ndim != 4 or x.shape[1] % (s * s) != 0:
        raise DimensionError(f"channels {x.shape} not divisible by s²={s * s}")
    if s == 1:
        return Tensor._result(x.data.copy(), (x,), (lambda g: g,))
    return Tensor._result(_shuffle_data(x.data, s), (x,), (lambda g: _unshuffle_data(g, s),))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`: ``[N, C, H·s, W·s]`` to ``[N, C·s², H, W]``."""
    if s < 1:
        raise DimensionError("shuffle factor must be >= 1")
    if x.ndim != 4 or x.shape[2] % s != 0 or x.shape[3] % s != 0:
        raise DimensionError(f"spatial dims {x.shape} not divisible by s={s}")
    if s == 1:
        return Tensor._result(x.data.copy(), (x,), (lambda g: g,))
    return Tensor._result(_unshuffle_data(x.data, s), (x,), (lambda g: _shuffle_data(g, s),))


# ---------------------------------------------------------------------------
# grouped 2-D convolution (strided, padded, optionally transposed)
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding-window view [N, C, Ho, Wo, kh, kw] over a padded input."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _conv_forward(x, w, stride, padding, groups):
    n, cin, h, w_sp = x.shape
    cout, cig, kh, kw = w.shape
    cog = cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if groups == 1:
        # One GEMM per kernel tap on the contiguous padded input avoids
        # materialising the kh*kw-fold im2col buffer.  Tap weights must be
        # contiguous or matmul falls off the BLAS fast path.
        xf = xp.reshape(n, cin, hp * wp)
        wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        if kh == 1 and kw == 1 and stride == 1:
            return (wt[0, 0] @ xf).reshape(n, cout, hp, wp)
        dt = np.result_type(x.dtype, w.dtype)
        y = np.zeros((n, cout, ho, wo), dtype=dt)
        for i in range(kh):
            for j in range(kw):
                z = (wt[i, j] @ xf).reshape(n, cout, hp, wp)
                y += z[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        return y
    cols = _im2col(xp, kh, kw, stride)
    # [N, g, Ho*Wo, cig*kh*kw] @ [g, cig*kh*kw, cog]
    cols = cols.reshape(n, groups, cig, ho, wo, kh, kw)
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 4, 2, 5, 6)).reshape(
        n, groups, ho * wo, cig * kh * kw
    )
    wm = w.reshape(groups, cog, cig * kh * kw).transpose(0, 2, 1)
    y = cols @ wm
    return np.ascontiguousarray(y.transpose(0, 1, 3, 2)).reshape(n, cout, ho, wo)


def _conv_input_grad(gy, w, stride, padding, groups, in_hw):
    """Adjoint of _conv_forward in its first argument (also: transposed conv)."""
    n, cout, ho, wo = gy.shape
    _, cig, kh, kw = w.shape
    cog = cout // groups
    cin = cig * groups
    h, w_sp = in_hw
    hp, wp = h + 2 * padding, w_sp + 2 * padding
    if groups == 1:
        gyf = gy.reshape(n, cout, ho * wo)
        wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
        if kh == 1 and kw == 1 and stride == 1 and not padding:
            return (wt[0, 0] @ gyf).reshape(n, cin, h, w_sp)
        dt = np.result_type(gy.dtype, w.dtype)
        gxp = np.zeros((n, cin, hp, wp), dtype=dt)
        for i in range(kh):
            for j in range(kw):
                g = (wt[i, j] @ gyf).reshape(n, cin, ho, wo)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g
        if padding:
            return gxp[:, :, padding:-padding, padding:-padding]
        return gxp
    wm = w.reshape(groups, cog, cig * kh * kw)
    gyr = np.ascontiguousarray(gy.reshape(n, groups, cog, ho * wo).transpose(0, 1, 3, 2))
    gcols = gyr @ wm  # [N, g, Ho*Wo, cig*kh*kw]
    gcols = gcols.reshape(n, groups, ho, wo, cig, kh, kw).transpose(0, 1, 4, 2, 3, 5, 6)
    gcols = gcols.reshape(n, cin, ho, wo, kh, kw)
    gxp = np.zeros((n, cin, hp, wp), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, :, :, :, i, j
            ]
    if padding:
        return gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def _conv_weight_grad(x, gy, stride, padding, groups, kh, kw):
    n, cin, _, _ = x.shape
    cout = gy.shape[1]
    cig, cog = cin // groups, cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if groups == 1:
        dt = np.result_type(x.dtype, gy.dtype)
        if kh == 1 and kw == 1 and stride == 1 and not padding:
            gyf = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(cout, -1)
            xf = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(cin, -1)
            return (gyf @ xf.T).reshape(cout, cin, 1, 1).astype(dt, copy=False)
        # Scatter gy onto a padded-size canvas per tap so each contraction is
        # a single batched GEMM against one shared transpose of the input.
        xpt = np.ascontiguousarray(xp.reshape(n, cin, hp * wp).transpose(0, 2, 1))
        canvas = np.zeros((n, cout, hp, wp), dtype=dt)
        gw = np.empty((cout, cin, kh, kw), dtype=dt)
        for i in range(kh):
            for j in range(kw):
                canvas[...] = 0.0
                canvas[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] = gy
                t = canvas.reshape(n, cout, hp * wp) @ xpt  # [N, Cout, Cin]
                gw[:, :, i, j] = t.sum(axis=0)
        return gw
    cols = _im2col(xp, kh, kw, stride)
    cols = cols.reshape(n, groups, cig, ho, wo, kh, kw)
    cols = np.ascontiguousarray(cols.transpose(1, 0, 3, 4, 2, 5, 6)).reshape(
        groups, n * ho * wo, cig * kh * kw
    )
    gyr = np.ascontiguousarray(
        gy.reshape(n, groups, cog, ho * wo).transpose(1, 2, 0, 3)
    ).reshape(groups, cog, n * ho * wo)
    gw = gyr @ cols  # [g, cog, cig*kh*kw]
    return gw.reshape(cout, cig, kh, kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, stride: int = 1,
           padding: int = 0, groups: int = 1, transposed: bool = False) -> Tensor:
    """Grouped 2-D cross-correlation, or its algebraic transpose.

    ``weight`` is ``[Cout, Cin/groups, kh, kw]`` in the forward sense.  With
    ``transposed=True`` the same weight is applied as the adjoint map, so the
    input then carries ``Cout`` channels and the output ``Cin``:
    ``<conv2d(x, w), y> == <x, conv2d(y, w, transposed=True)>``.
    """
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIHW weight")
    cout, cig, kh, kw = weight.shape
    if cout % groups != 0:
        raise DimensionError(f"out channels {cout} not divisible by groups {groups}")
    cin = cig * groups
    w_arr = weight.data

    if not transposed:
        if x.shape[1] != cin:
            raise DimensionError(f"expected {cin} input channels, got {x.shape[1]}")
        in_hw = (x.shape[2], x.shape[3])
        y = _conv_forward(x.data, w_arr, stride, padding, groups)

        def g_x(g):
            return _conv_input_grad(g, w_arr, stride, padding, groups, in_hw)

        def g_w(g):
            return _conv_weight_grad(x.data, g, stride, padding, groups, kh, kw)

    else:
        if x.shape[1] != cout:
            raise DimensionError(f"expected {cout} input channels, got {x.shape[1]}")
        hin, win = x.shape[2], x.shape[3]
        h_out = (hin - 1) * stride + kh - 2 * padding
        w_out = (win - 1) * stride + kw - 2 * padding
        if h_out < 1 or w_out < 1:
            raise DimensionError("transposed conv output would be empty")
        y = _conv_input_grad(x.data, w_arr, stride, padding, groups, (h_out, w_out))

        def g_x(g):
            return _conv_forward(g, w_arr, stride, padding, groups)

        def g_w(g):
            return _conv_weight_grad(g, x.data, stride, padding, groups, kh, kw)

    out_channels = cout if not transposed else cin
    parents = [x, weight]
    vjps = [g_x, g_w]
    if bias is not None:
        if bias.size != out_channels:
            raise DimensionError(f"bias size {bias.size} != {out_channels} channels")
        y = y + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)).reshape(bias.shape))
    return Tensor._result(y, tuple(parents), tuple(vjps))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int

    def __bool__(self):
        return self.passed


def grad_check(f, point, h: float = 1e-5, tol: float = 1e-4,
               n_samples: int = 20, seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` to central differences.

    Up to ``n_samples`` coordinates of ``point`` are perturbed by ±h (in
    float64).  A coordinate passes when the relative error is below ``tol``;
    absolute differences under 1e-8 count as zero error so that near-zero
    gradients do not produce spurious failures.
    """
    base = np.asarray(point.data if isinstance(point, Tensor) else point,
                      dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad.astype(np.float64)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("analytic gradient contains non-finite values")

    flat = analytic.ravel()
    n = base.size
    if n <= n_samples:
        indices = np.arange(n)
    else:
        indices = np.random.default_rng(seed).choice(n, size=n_samples, replace=False)

    max_rel = 0.0
    for i in indices:
        pert = base.copy()
        pert.flat[i] += h
        fp = f(Tensor(pert)).item()
        pert.flat[i] -= 2 * h
        fm = f(Tensor(pert)).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("function returned non-finite values during grad_check")
        numeric = (fp - fm) / (2 * h)
        diff = abs(flat[i] - numeric)
        rel = 0.0 if diff < 1e-8 else diff / max(abs(flat[i]), abs(numeric))
        max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel_error=max_rel, passed=max_rel < tol, checked=len(indices))
