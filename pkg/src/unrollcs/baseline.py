"""Non-learned ISTA reconstruction used as a correctness and quality anchor.

Alternates an analytic data-consistency step with soft thresholding in an
orthonormal transform domain (identity or blockwise 8x8 DCT).  Because the
transform is orthonormal the thresholding step is the exact proximal map of
the l1 prior, so the solver's fixed-point algebra can be tested in closed
form.  Runs entirely outside the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import ConfigurationError, DimensionError
from .physics import Measurement, SamplingOperator, adjoint, sample
from .tensor import Tensor

TRANSFORMS = ("identity", "dct2d-8x8")

_DCT_BLOCK = 8


@dataclass
class IstaConfig:
    """Iteration budget, step size, threshold level and prior transform.

    ``lam`` is the soft-threshold level (the l1 weight), applied on [0,1]
    intensity data; the default was chosen by a coarse grid search on
    natural images, not taken from any reference.
    """

    iterations: int = 30
    rho: float = 1.0
    lam: float = 0.05
    transform: str = "dct2d-8x8"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be at least 1")
        if self.rho <= 0:
            raise ConfigurationError("rho must be positive")
        if self.lam < 0:
            raise ConfigurationError("lam must be non-negative")
        self.transform = str(self.transform).lower()
        if self.transform not in TRANSFORMS:
            raise ConfigurationError(f"unknown transform {self.transform!r}")


def soft_threshold(v, lam: float):
    """sign(v) * max(|v| - lam, 0), elementwise.

    Accepts a Tensor or an ndarray and returns the same kind.  This is the
    exact proximal map of ``lam * ||.||_1``.
    """
    if lam < 0:
        raise ConfigurationError("lam must be non-negative")
    data = v.data if isinstance(v, Tensor) else np.asarray(v)
    out = np.sign(data) * np.maximum(np.abs(data) - lam, 0.0)
    return Tensor(out) if isinstance(v, Tensor) else out


def _blocked(x: np.ndarray):
    n, c, h, w = x.shape
    s = _DCT_BLOCK
    pad_h = (-h) % s
    pad_w = (-w) % s
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    hb, wb = x.shape[2] // s, x.shape[3] // s
    view = x.reshape(n, c, hb, s, wb, s).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(view), (h, w)


def _unblocked(blocks: np.ndarray, hw) -> np.ndarray:
    n, c, hb, wb, s, _ = blocks.shape
    x = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hb * s, wb * s)
    return np.ascontiguousarray(x[..., : hw[0], : hw[1]])


def _dct2d(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    blocks, hw = _blocked(x)
    return scipy.fft.dctn(blocks, axes=(-2, -1), norm="ortho"), hw


def _idct2d(coeffs: np.ndarray, hw) -> np.ndarray:
    return _unblocked(scipy.fft.idctn(coeffs, axes=(-2, -1), norm="ortho"), hw)


def ista_reconstruct(op: SamplingOperator, y: Measurement,
                     cfg: IstaConfig | None = None) -> Tensor:
    """Iterative shrinkage-thresholding from block measurements.

    Starts at the adjoint image and alternates
    ``z = x - rho * adjoint(sample(x) - y)`` with thresholding of ``T(z)``,
    where ``T`` is the configured orthonormal transform.
    """
    cfg = cfg or IstaConfig()
    yt = y.y if isinstance(y, Measurement) else y
    if yt.ndim != 4:
        raise DimensionError("measurement must be [batch, M, H/B, W/B]")
    ydata = yt.data if isinstance(yt, Tensor) else np.asarray(yt)
    x = adjoint(op, Tensor(ydata)).data
    for _ in range(cfg.iterations):
        resid = sample(op, Tensor(x)).y.data - ydata
        z = x - cfg.rho * adjoint(op, Tensor(resid)).data
        if cfg.transform == "identity":
            x = soft_threshold(z, cfg.lam)
        else:
            coeffs, hw = _dct2d(z)
            x = _idct2d(soft_threshold(coeffs, cfg.lam), hw)
    return Tensor(x)
