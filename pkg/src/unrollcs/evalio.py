"""Grayscale image I/O, quality metrics, and dataset evaluation reports.

Images live on disk as 8-bit PGM (P5) or PNG and in memory as ``[1,1,H,W]``
tensors scaled to [0,1].  Color inputs are reduced to BT.601 luminance.
PSNR uses a unit peak; SSIM uses the canonical 11x11 Gaussian window
(sigma 1.5, K1=0.01, K2=0.03) averaged over the fully-valid interior.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage

from .baseline import IstaConfig, ista_reconstruct
from .errors import DataError, DimensionError, UnrollCSError
from .physics import (
    Measurement,
    SamplingOperator,
    adjoint,
    crop_to,
    pad_to_block,
    sample,
)
from .tensor import Tensor

_LUMA = (0.299, 0.587, 0.114)

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise DataError(f"not a binary PGM file: {path}")
    # header = magic + width + height + maxval, with '#' comments allowed
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise DataError(f"truncated PGM header: {path}")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise DataError(f"malformed PGM header: {path}") from None
    if maxval != 255:
        raise DataError(f"only 8-bit PGM supported (maxval={maxval}): {path}")
    if len(blob) - pos < w * h:
        raise DataError(f"PGM payload truncated: {path}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w)


def _write_pgm(path: str, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def load_image(path: str) -> Tensor:
    """Read an 8-bit grayscale PGM or an 8/24-bit PNG as ``[1,1,H,W]`` in [0,1]."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such image: {path}")
    if p.suffix.lower() in (".pgm", ".ppm"):
        gray = _read_pgm(path).astype(np.float64) / 255.0
    else:
        try:
            from PIL import Image

            with Image.open(path) as im:
                if im.mode == "L":
                    gray = np.asarray(im, dtype=np.float64) / 255.0
                elif im.mode in ("RGB", "RGBA"):
                    rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                    gray = rgb @ np.array(_LUMA)
                else:
                    raise DataError(f"unsupported image mode {im.mode!r}: {path}")
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
    return Tensor(gray[None, None])


def save_image(path: str, img) -> None:
    """Quantize to 8 bits and write PGM or PNG depending on the extension."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    data = np.squeeze(data)
    if data.ndim != 2:
        raise DimensionError(f"expected one 2-D image, got shape {data.shape}")
    u8 = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    if Path(path).suffix.lower() == ".pgm":
        _write_pgm(path, u8)
    else:
        from PIL import Image

        Image.fromarray(u8, mode="L").save(path)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _as_image(x) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    data = np.squeeze(data)
    if data.ndim != 2:
        raise DimensionError(f"metric expects a single 2-D image, got {data.shape}")
    return np.asarray(data, dtype=np.float64)


def psnr(x, xhat) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; +inf when equal."""
    a, b = _as_image(x), _as_image(xhat)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _ssim_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    half = _SSIM_WINDOW // 2
    t = scipy.ndimage.correlate1d(img, kernel, axis=0, mode="constant")
    t = scipy.ndimage.correlate1d(t, kernel, axis=1, mode="constant")
    return t[half:-half, half:-half]


def ssim(x, xhat) -> float:
    """Mean structural similarity over the window-valid interior."""
    a, b = _as_image(x), _as_image(xhat)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < _SSIM_WINDOW:
        raise DimensionError(
            f"image {a.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    offsets = np.arange(_SSIM_WINDOW) - _SSIM_WINDOW // 2
    kernel = np.exp(-0.5 * (offsets / _SSIM_SIGMA) ** 2)
    kernel /= kernel.sum()
    mu1 = _ssim_filter(a, kernel)
    mu2 = _ssim_filter(b, kernel)
    var1 = _ssim_filter(a * a, kernel) - mu1 * mu1
    var2 = _ssim_filter(b * b, kernel) - mu2 * mu2
    cov = _ssim_filter(a * b, kernel) - mu1 * mu2
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------


@dataclass
class ImageResult:
    name: str
    psnr_db: float
    ssim: float
    ms: float


@dataclass
class EvalReport:
    """Per-image metrics plus their arithmetic means and a config echo."""

    config: dict
    per_image: list[ImageResult] = field(default_factory=list)
    mean_psnr_db: float = 0.0
    mean_ssim: float = 0.0
    mean_ms: float = 0.0
    warnings: int = 0

    @classmethod
    def build(cls, config: dict, per_image: list[ImageResult], warnings: int = 0):
        n = len(per_image)
        if n == 0:
            raise DataError("no images were evaluated")
        return cls(
            config=config,
            per_image=per_image,
            mean_psnr_db=sum(r.psnr_db for r in per_image) / n,
            mean_ssim=sum(r.ssim for r in per_image) / n,
            mean_ms=sum(r.ms for r in per_image) / n,
            warnings=warnings,
        )

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "per_image": [vars(r) for r in self.per_image],
            "mean_psnr_db": self.mean_psnr_db,
            "mean_ssim": self.mean_ssim,
            "mean_ms": self.mean_ms,
            "warnings": self.warnings,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["name,psnr_db,ssim,ms"]
        lines += [f"{r.name},{r.psnr_db:.6f},{r.ssim:.6f},{r.ms:.3f}"
                  for r in self.per_image]
        return "\n".join(lines) + "\n"


def _normalize_method(method):
    """Turn the supported method spellings into a reconstruction callable."""
    if callable(method):
        return method, {"method": getattr(method, "__name__", "custom")}
    if isinstance(method, str):
        name = method.lower()
        if name in ("adjoint", "adjoint-only"):
            return (lambda op, y: adjoint(op, y)), {"method": "adjoint-only"}
        if name == "ista":
            cfg = IstaConfig()
            return (lambda op, y: ista_reconstruct(op, y, cfg)), {
                "method": "ista", **vars(cfg)
            }
        raise DataError(f"unknown reconstruction method {method!r}")
    if isinstance(method, IstaConfig):
        return (lambda op, y: ista_reconstruct(op, y, method)), {
            "method": "ista", **vars(method)
        }
    try:
        model_cfg, params = method
    except (TypeError, ValueError):
        raise DataError(f"unsupported method object {method!r}") from None
    from .models import model_forward

    return (lambda op, y: model_forward(model_cfg, params, op, y)), {
        "method": "model", **vars(model_cfg)
    }


def list_images(dataset_dir: str) -> list[Path]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataError(f"not a dataset directory: {dataset_dir}")
    return sorted(
        p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".png")
    )


def evaluate(method, dataset_dir: str, op: SamplingOperator,
             sigma: float = 0.0, seed: int = 0) -> EvalReport:
    """Sample, reconstruct, and score every image in a directory.

    Noise draws are seeded per image index, so reports are reproducible and
    independent of which other files happen to be present.  Images that fail
    to load or reconstruct are skipped and counted in ``warnings``.
    """
    recon, config = _normalize_method(method)
    config = {**config, "sigma": sigma, "seed": seed,
              "B": op.B, "M": op.M, "N": op.N, "dataset": str(dataset_dir)}
    files = list_images(dataset_dir)
    if not files:
        raise DataError(f"no .pgm or .png images in {dataset_dir}")
    multiple = math.lcm(op.B, 4)  # multi-scale models downsample twice
    results, warnings = [], 0
    for index, path in enumerate(files):
        try:
            x = load_image(str(path))
            padded, (h, w) = pad_to_block(x.data, multiple)
            y = sample(op, Tensor(padded), sigma=sigma, seed=seed * 100003 + index)
            t0 = time.perf_counter()
            xhat = recon(op, y)
            ms = (time.perf_counter() - t0) * 1e3
            data = xhat.data if isinstance(xhat, Tensor) else np.asarray(xhat)
            rec = crop_to(data, h, w)
            results.append(
                ImageResult(path.name, psnr(x, rec), ssim(x, rec), ms)
            )
        except (UnrollCSError, OSError):
            warnings += 1
    if not results:
        raise DataError(f"every image in {dataset_dir} failed to evaluate")
    return EvalReport.build(config, results, warnings)
