"""Block-based sampling physics.

An image is split into non-overlapping B×B blocks; each block, flattened
row-major to length N = B², is measured by the same M×N matrix A whose rows
are orthonormal (QR-orthogonalized i.i.d. Gaussian draw).  Measurements are
laid out as ``[batch, M, H/B, W/B]``.

Because the block grid never overlaps, the "B×B convolution with stride B"
view of the operator reduces to a reshape followed by one matrix multiply,
which is how every function here applies A and Aᵀ — including the
feature-domain variants that treat a multi-channel tensor as independent
image channels sharing the same physics.  All application functions are
differentiable: the backward of the forward map is the adjoint map and vice
versa, and when the operator is marked learnable the gradient also flows
into A itself.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor

OPERATOR_MAGIC = b"CSOP"
OPERATOR_VERSION = 1
MEASUREMENT_MAGIC = b"CSMS"
MEASUREMENT_VERSION = 1


@dataclass
class SamplingOperator:
    """The physics {A, B, M, N, γ}: an M×N matrix acting block-wise.

    ``learnable`` marks A as a trainable parameter; :meth:`parameter` then
    exposes (and caches) a requires_grad Tensor sharing A's storage so the
    training loop can register and update it.  No re-orthogonalization is
    performed on updates, so the range/nullspace projections become
    approximate for a trained A.
    """

    A: np.ndarray
    B: int
    M: int
    N: int
    gamma: float
    seed: int
    learnable: bool = False
    _param: Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        if self.A.shape != (self.M, self.N):
            raise DimensionError(f"A has shape {self.A.shape}, expected {(self.M, self.N)}")
        if self.N != self.B * self.B:
            raise DimensionError(f"N={self.N} must equal B²={self.B * self.B}")
        if not (1 <= self.M <= self.N):
            raise ConfigurationError(f"M={self.M} outside [1, N={self.N}]")

    def parameter(self) -> Tensor | None:
        if not self.learnable:
            return None
        if self._param is None:
            self._param = Tensor(self.A, requires_grad=True)
            self.A = self._param.data  # share storage: optimizer updates apply here
        return self._param

    def orthogonality_defect(self) -> float:
        """max |AAᵀ − I|, ~0 for a freshly generated operator."""
        gram = self.A @ self.A.T
        return float(np.abs(gram - np.eye(self.M)).max())


@dataclass
class Measurement:
    """Per-block measurements ``y`` of shape [batch, M, H/B, W/B] plus noise metadata."""

    y: Tensor
    sigma: float = 0.0
    onebit: bool = False

    @property
    def shape(self):
        return self.y.shape


def compute_m(B: int, gamma: float) -> int:
    n = B * B
    if not (0.0 < gamma <= 1.0):
        raise ConfigurationError(f"sampling ratio must be in (0, 1], got {gamma}")
    return max(1, int(np.round(gamma * n)))


def generate_operator(B: int, gamma: float, seed: int) -> SamplingOperator:
    """Draw an i.i.d. Gaussian M×N matrix and orthogonalize its rows by QR.

    Deterministic per (B, gamma, seed); the result satisfies AAᵀ = I_M to
    machine precision (and AᵀA = I_N when γ = 1).
    """
    if B < 1:
        raise ConfigurationError(f"block size must be >= 1, got {B}")
    n = B * B
    m = compute_m(B, gamma)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, m))
    q, _ = np.linalg.qr(g)  # reduced: q is N×M with orthonormal columns
    return SamplingOperator(A=q.T.copy(), B=B, M=m, N=n, gamma=gamma, seed=seed)


# ---------------------------------------------------------------------------
# block <-> matrix plumbing
# ---------------------------------------------------------------------------


def _check_blocks(h: int, w: int, B: int):
    if h % B or w % B:
        raise DimensionError(f"spatial size {h}x{w} not divisible by block size {B}")


def _to_blocks(x: np.ndarray, B: int) -> np.ndarray:
    """[n, c, H, W] -> [n, c, H/B, W/B, B²] with row-major in-block order."""
    n, c, h, w = x.shape
    _check_blocks(h, w, B)
    hb, wb = h // B, w // B
    return np.ascontiguousarray(
        x.reshape(n, c, hb, B, wb, B).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, hb, wb, B * B)


def _from_blocks(blocks: np.ndarray, B: int) -> np.ndarray:
    n, c, hb, wb, _ = blocks.shape
    x = blocks.reshape(n, c, hb, wb, B, B).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(x).reshape(n, c, hb * B, wb * B)


def _apply_A(x: np.ndarray, A: np.ndarray, B: int) -> np.ndarray:
    """[n, c, H, W] -> [n, c·M, H/B, W/B] (channel-major: c slow, m fast)."""
    blocks = _to_blocks(x, B)
    n, c, hb, wb, _ = blocks.shape
    y = blocks @ A.T.astype(x.dtype, copy=False)
    return np.ascontiguousarray(y.transpose(0, 1, 4, 2, 3)).reshape(n, c * A.shape[0], hb, wb)


def _apply_AT(y: np.ndarray, A: np.ndarray, B: int) -> np.ndarray:
    """[n, c·M, H/B, W/B] -> [n, c, H, W]; adjoint of :func:`_apply_A`."""
    m = A.shape[0]
    n, cm, hb, wb = y.shape
    if cm % m:
        raise DimensionError(f"{cm} measurement channels not divisible by M={m}")
    c = cm // m
    yb = np.ascontiguousarray(y.reshape(n, c, m, hb, wb).transpose(0, 1, 3, 4, 2))
    blocks = yb @ A.astype(y.dtype, copy=False)
    return _from_blocks(blocks, B)


def _grad_A_forward(x: np.ndarray, gy: np.ndarray, B: int, m: int) -> np.ndarray:
    # d/dA of (blocks @ Aᵀ) contracted with the upstream measurement gradient
    xb = _to_blocks(x, B)
    n, c, hb, wb, nblk = xb.shape
    gyb = gy.reshape(n, c, m, hb, wb).transpose(0, 1, 3, 4, 2).reshape(-1, m)
    return gyb.T @ xb.reshape(-1, nblk)


def _grad_A_adjoint(y: np.ndarray, gx: np.ndarray, B: int, m: int) -> np.ndarray:
    # d/dA of (y_blocks @ A) contracted with the upstream image gradient
    gxb = _to_blocks(gx, B)
    n, c, hb, wb, nblk = gxb.shape
    yb = y.reshape(n, c, m, hb, wb).transpose(0, 1, 3, 4, 2).reshape(-1, m)
    return yb.T @ gxb.reshape(-1, nblk)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _linear_op(op: SamplingOperator, x: Tensor, forward: bool) -> Tensor:
    """Graph node applying A (forward=True) or Aᵀ, with optional grad into A."""
    A = op.A
    B = op.B
    apply_fn = _apply_A if forward else _apply_AT
    grad_fn = _apply_AT if forward else _apply_A
    out = apply_fn(x.data, A, B)
    parents = [x]
    vjps = [lambda g: grad_fn(g, A, B)]
    param = op.parameter()
    if param is not None:
        parents.append(param)
        if forward:
            vjps.append(lambda g: _grad_A_forward(x.data, g, B, A.shape[0]))
        else:
            vjps.append(lambda g: _grad_A_adjoint(x.data, g, B, A.shape[0]))
    return Tensor._result(out, tuple(parents), tuple(vjps))


# ---------------------------------------------------------------------------
# acquisition, adjoint, projections
# ---------------------------------------------------------------------------


def _noise(shape, sigma: float, seed: int, dtype) -> np.ndarray | None:
    if sigma == 0.0:
        return None
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * (sigma / 255.0)).astype(dtype)


def sample(op: SamplingOperator, x, sigma: float = 0.0, seed: int = 0) -> Measurement:
    """Acquire y = Ax + ε block-by-block from a single-channel image batch.

    ``sigma`` is the additive-white-Gaussian-noise level on the 0–255
    intensity scale; internally it is divided by 255 to match [0,1] data.
    The draw is deterministic per seed.
    """
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"sample expects [batch, 1, H, W], got {x.shape}")
    y = _linear_op(op, x, forward=True)
    eps = _noise(y.shape, sigma, seed, y.dtype)
    if eps is not None:
        y = y + Tensor(eps)
    return Measurement(y=y, sigma=sigma, onebit=False)


def onebit_sample(op: SamplingOperator, x, sigma: float = 0.0, seed: int = 0) -> Measurement:
    """One-bit acquisition y = sign(Ax + ε) ∈ {−1, +1}.

    The sign keeps a straight-through derivative, so gradients pass to x
    exactly as they would through the linear measurement.
    """
    m = sample(op, x, sigma=sigma, seed=seed)
    return Measurement(y=m.y.sign_ste(), sigma=sigma, onebit=True)


def _measurement_tensor(y) -> Tensor:
    return y.y if isinstance(y, Measurement) else _as_tensor(y)


def adjoint(op: SamplingOperator, y) -> Tensor:
    """Aᵀy reassembled to image layout [batch, 1, H, W]."""
    t = _measurement_tensor(y)
    if t.ndim != 4 or t.shape[1] != op.M:
        raise DimensionError(f"adjoint expects [batch, {op.M}, H/B, W/B], got {t.shape}")
    return _linear_op(op, t, forward=False)


def project_range(op: SamplingOperator, x) -> Tensor:
    """Orthogonal projection AᵀAx onto the row space of A (block-wise)."""
    x = _as_tensor(x)
    return _linear_op(op, _linear_op(op, x, forward=True), forward=False)


def project_null(op: SamplingOperator, x) -> Tensor:
    """Nullspace component x − AᵀAx; satisfies A(project_null(x)) = 0."""
    x = _as_tensor(x)
    return x - project_range(op, x)


# ---------------------------------------------------------------------------
# feature-domain lifted operators
# ---------------------------------------------------------------------------


def fd_forward(op: SamplingOperator, X, r: int) -> Tensor:
    """Apply A to a feature tensor: [n, r²D, H/r, W/r] -> [n, D·M, H/B, W/B].

    The r² sub-pixel channels are first rearranged back to full resolution
    (pixel shuffle), then each of the D resulting channels is sampled
    independently with the shared matrix A — the grouped-convolution view of
    the physics, realized as a block reshape plus one matmul and introducing
    no parameters of its own.
    """
    X = _as_tensor(X)
    if X.ndim != 4 or X.shape[1] % (r * r):
        raise DimensionError(f"feature channels {X.shape} not divisible by r²={r * r}")
    from .tensor import pixel_shuffle  # local import to avoid cycle at module load

    full = pixel_shuffle(X, r) if r > 1 else X
    return _linear_op(op, full, forward=True)


def fd_adjoint(op: SamplingOperator, Y, r: int) -> Tensor:
    """Adjoint of :func:`fd_forward`: [n, D·M, H/B, W/B] -> [n, r²D, H/r, W/r]."""
    Y = _measurement_tensor(Y)
    if Y.ndim != 4 or Y.shape[1] % op.M:
        raise DimensionError(f"measurement channels {Y.shape} not divisible by M={op.M}")
    from .tensor import pixel_unshuffle

    full = _linear_op(op, Y, forward=False)
    return pixel_unshuffle(full, r) if r > 1 else full


def fd_project_null(op: SamplingOperator, X, r: int) -> Tensor:
    """Channel-wise nullspace projection in the feature domain."""
    X = _as_tensor(X)
    return X - fd_adjoint(op, fd_forward(op, X, r), r)


# ---------------------------------------------------------------------------
# padding helpers for images whose sides are not multiples of B
# ---------------------------------------------------------------------------


def pad_to_block(x: np.ndarray, B: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the trailing spatial axes up to the next multiple of B.

    Returns the padded array and the original (H, W) for :func:`crop_to`.
    Falls back to edge padding when the image is smaller than the pad width.
    """
    h, w = x.shape[-2], x.shape[-1]
    ph = (-h) % B
    pw = (-w) % B
    if ph == 0 and pw == 0:
        return x, (h, w)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(x, pad, mode=mode), (h, w)


def crop_to(x, h: int, w: int):
    if isinstance(x, Tensor):
        return Tensor(x.data[..., :h, :w].copy())
    return x[..., :h, :w]


# ---------------------------------------------------------------------------
# binary operator / measurement containers
# ---------------------------------------------------------------------------


def save_operator(op: SamplingOperator, path: str) -> None:
    header = OPERATOR_MAGIC + struct.pack(
        "<IIIIQ", OPERATOR_VERSION, op.B, op.M, op.N, op.seed & 0xFFFFFFFFFFFFFFFF
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(op.A.astype("<f8", copy=False).tobytes())


def load_operator(path: str) -> SamplingOperator:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28 or blob[:4] != OPERATOR_MAGIC:
        raise DataError(f"not a sampling-operator file: {path}")
    version, b, m, n, seed = struct.unpack("<IIIIQ", blob[4:28])
    if version != OPERATOR_VERSION:
        raise DataError(f"unsupported operator version {version} in {path}")
    expect = 28 + m * n * 8
    if len(blob) != expect:
        raise DataError(f"operator payload truncated in {path}")
    a = np.frombuffer(blob[28:], dtype="<f8").reshape(m, n).copy()
    return SamplingOperator(A=a, B=b, M=m, N=n, gamma=m / n, seed=seed)


def save_measurement(m: Measurement, path: str) -> None:
    y = m.y.data
    n, mm, h, w = y.shape
    with open(path, "wb") as fh:
        fh.write(MEASUREMENT_MAGIC)
        fh.write(struct.pack("<IIIIIdI", MEASUREMENT_VERSION, n, mm, h, w,
                             float(m.sigma), 1 if m.onebit else 0))
        fh.write(y.astype("<f8", copy=False).tobytes())


def load_measurement(path: str) -> Measurement:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 36 or blob[:4] != MEASUREMENT_MAGIC:
        raise DataError(f"not a measurement file: {path}")
    version, n, mm, h, w, sigma, onebit = struct.unpack("<IIIIIdI", blob[4:36])
    if version != MEASUREMENT_VERSION:
        raise DataError(f"unsupported measurement version {version} in {path}")
    y = np.frombuffer(blob[36:], dtype="<f8").reshape(n, mm, h, w).copy()
    return Measurement(y=Tensor(y), sigma=sigma, onebit=bool(onebit))
