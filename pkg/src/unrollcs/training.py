"""End-to-end l2 training with deterministic, resumable checkpoints.

Every source of randomness is a pure function of (seed, purpose, step), so
an interrupted run resumed from a checkpoint replays the exact same crops,
augmentations and noise draws and reproduces the uninterrupted loss history
bit for bit.  Checkpoints are a flat binary container of named f64 arrays
("PRLC" format) guarded by a config hash and a CRC32; the human-readable
config snapshot travels in a sidecar JSON with the same path plus ".json".
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DataError, NumericError
from .evalio import list_images, load_image
from .models import ModelConfig, ParameterStore, init_params, model_forward
from .physics import SamplingOperator, generate_operator, sample
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PRLC"
CHECKPOINT_VERSION = 1

_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainConfig:
    """Optimization schedule and data-pipeline settings.

    The reference protocol this scales down from used batches of 16 random
    128-pixel crops and hundreds of thousands of steps; the defaults here
    are desk-sized.  ``lr_decay_points`` are 0-based step indices at which
    the rate is multiplied by ``lr_decay_factor`` (taking effect from that
    step onward).  ``dtype`` selects the arithmetic width of parameters and
    activations; float32 roughly halves step time on wide models.
    """

    batch_size: int = 4
    patch: int = 64
    steps: int = 200
    lr: float = 1e-4
    lr_decay_points: tuple = ()
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    sigma_train: float = 0.0
    gamma: float = 0.1
    augment: bool = True
    dtype: str = "float64"
    checkpoint_every: int = 0  # 0 = only at the end

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1 or self.patch < 1:
            raise ConfigurationError("batch_size, steps and patch must be positive")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0 < self.lr_decay_factor:
            raise ConfigurationError("lr_decay_factor must be positive")
        pts = tuple(int(p) for p in self.lr_decay_points)
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ConfigurationError("lr_decay_points must be strictly increasing")
        self.lr_decay_points = pts
        if self.sigma_train < 0:
            raise ConfigurationError("sigma_train must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


# ---------------------------------------------------------------------------
# loss, optimizer, augmentation
# ---------------------------------------------------------------------------


def mse_loss(x: Tensor, xhat: Tensor) -> Tensor:
    """Mean squared error over all elements, as a differentiable scalar."""
    if x.shape != xhat.shape:
        raise ContractError(f"loss shapes differ: {x.shape} vs {xhat.shape}")
    diff = xhat - x
    return (diff * diff).mean()


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParameterStore, cfg: TrainConfig | None = None):
        kw = {}
        if cfg is not None:
            kw = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        state = cls(**kw)
        for name, p in store.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(store: ParameterStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; gradients are consumed (zeroed).

    Parameter arrays are updated in place so that tensors shared with other
    owners (e.g. a learnable sampling matrix) keep their storage identity.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in store.items():
        if p.grad is None:
            raise ContractError(f"adam_step: no gradient for {name!r}")
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    store.zero_grad()


def augment(patch, index: int):
    """Apply one of the 8 square symmetries (rotations, then a horizontal flip)."""
    if not 0 <= index <= 7:
        raise ConfigurationError(f"augment index {index} outside 0..7")
    data = patch.data if isinstance(patch, Tensor) else np.asarray(patch)
    out = np.rot90(data, index % 4, axes=(-2, -1))
    if index >= 4:
        out = out[..., ::-1]
    out = np.ascontiguousarray(out)
    return Tensor(out) if isinstance(patch, Tensor) else out


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate in effect at a 0-based step index (pure function).

    Computed by repeated multiplication so the rate just past a decay point
    equals the previous rate times the factor bit-exactly.
    """
    rate = cfg.lr
    for point in cfg.lr_decay_points:
        if step >= point:
            rate *= cfg.lr_decay_factor
    return rate


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> int:
    """Stable 64-bit digest of both configurations."""
    doc = json.dumps(
        {"model": asdict(model_cfg), "train": asdict(train_cfg)},
        sort_keys=True,
    )
    return int.from_bytes(hashlib.sha256(doc.encode()).digest()[:8], "little")


@dataclass
class Checkpoint:
    """Everything needed to continue (or reproduce) a run from step ``step``."""

    model_config: ModelConfig
    train_config: TrainConfig
    params: dict
    m: dict
    v: dict
    step: int
    history: list


def _pack_arrays(arrays: dict) -> bytes:
    chunks = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _unpack_arrays(blob: bytes, pos: int, count: int):
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, "<f8", n, pos).reshape(shape).copy()
        pos += 8 * n
    return arrays, pos


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays |= {f"opt/m/{k}": v for k, v in ckpt.m.items()}
    arrays |= {f"opt/v/{k}": v for k, v in ckpt.v.items()}
    arrays["meta/step"] = np.array([float(ckpt.step)])
    arrays["meta/history"] = (
        np.asarray(ckpt.history, dtype=np.float64).reshape(-1, 3)
    )
    body = CHECKPOINT_MAGIC + struct.pack(
        "<IQI",
        CHECKPOINT_VERSION,
        config_hash(ckpt.model_config, ckpt.train_config),
        len(arrays),
    ) + _pack_arrays(arrays)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
    sidecar = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "model": asdict(ckpt.model_config),
            "train": asdict(ckpt.train_config),
        },
        sort_keys=True,
        indent=2,
    )
    Path(path + ".json").write_text(sidecar + "\n")


def load_checkpoint(path: str, model_cfg: ModelConfig | None = None,
                    train_cfg: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint, taking the configs from the sidecar if not given."""
    if model_cfg is None or train_cfg is None:
        sidecar = Path(path + ".json")
        if not sidecar.is_file():
            raise DataError(f"missing config sidecar {sidecar}")
        doc = json.loads(sidecar.read_text())
        model_cfg = ModelConfig(**doc["model"])
        train_cfg = TrainConfig(**doc["train"])
    blob = Path(path).read_bytes()
    if len(blob) < 24 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise DataError(f"checkpoint CRC mismatch: {path}")
    version, digest, count = struct.unpack_from("<IQI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path}")
    if digest != config_hash(model_cfg, train_cfg):
        raise DataError(f"checkpoint config hash mismatch: {path}")
    arrays, _ = _unpack_arrays(blob[:-4], 20, count)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    m = {k[6:]: v for k, v in arrays.items() if k.startswith("opt/m/")}
    v = {k[6:]: v for k, v in arrays.items() if k.startswith("opt/v/")}
    step = int(arrays["meta/step"][0])
    history = [(int(s), float(l), float(r)) for s, l, r in arrays["meta/history"]]
    return Checkpoint(model_cfg, train_cfg, params, m, v, step, history)


def _overlay(store: ParameterStore, state: AdamState, ckpt: Checkpoint) -> None:
    """Write checkpoint arrays into an existing store/state, in place."""
    for name, t in store.items():
        if name not in ckpt.params:
            raise DataError(f"checkpoint missing parameter {name!r}")
        t.data[...] = ckpt.params[name].astype(t.dtype)
        state.m[name][...] = ckpt.m[name].astype(t.dtype)
        state.v[name][...] = ckpt.v[name].astype(t.dtype)
    state.t = ckpt.step


def restore_model(path: str) -> tuple[ModelConfig, TrainConfig, ParameterStore]:
    """Load a checkpoint into a ready-to-run parameter store."""
    ckpt = load_checkpoint(path)
    store = init_params(ckpt.model_config, ckpt.train_config.seed,
                        ckpt.train_config.np_dtype)
    state = AdamState.for_store(store, ckpt.train_config)
    _overlay(store, state, ckpt)
    return ckpt.model_config, ckpt.train_config, store


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _load_dataset(dataset_dir: str, patch: int) -> list[np.ndarray]:
    images = []
    for p in list_images(dataset_dir):
        img = load_image(str(p)).data[0, 0]
        if img.shape[0] >= patch and img.shape[1] >= patch:
            images.append(img)
    if not images:
        raise DataError(
            f"no images of at least {patch}x{patch} pixels in {dataset_dir}"
        )
    return images


def _draw_batch(images, cfg: TrainConfig, step: int) -> np.ndarray:
    rng = np.random.default_rng((cfg.seed, 1, step))
    crops = []
    for _ in range(cfg.batch_size):
        img = images[int(rng.integers(len(images)))]
        top = int(rng.integers(img.shape[0] - cfg.patch + 1))
        left = int(rng.integers(img.shape[1] - cfg.patch + 1))
        crop = img[top : top + cfg.patch, left : left + cfg.patch]
        if cfg.augment:
            crop = augment(crop, int(rng.integers(8)))
        crops.append(crop)
    return np.stack(crops)[:, None]


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset_dir: str,
          out_checkpoint: str | None = None, op: SamplingOperator | None = None,
          resume: str | None = None, on_step=None) -> list:
    """Run (or continue) a training loop; returns [(step, loss, lr), ...].

    ``resume`` names a checkpoint written by the same configuration; the
    continued run reproduces what the uninterrupted run would have logged.
    ``on_step`` is an optional callback ``(step, loss, lr) -> None``.
    """
    if train_cfg.patch % model_cfg.B:
        raise ConfigurationError(
            f"patch {train_cfg.patch} not divisible by block size {model_cfg.B}"
        )
    dtype = train_cfg.np_dtype
    images = _load_dataset(dataset_dir, train_cfg.patch)
    if op is None:
        op = generate_operator(model_cfg.B, train_cfg.gamma, train_cfg.seed)
    store = init_params(model_cfg, train_cfg.seed, dtype)
    if op.learnable:
        store.add("sampling/matrix", op.parameter())
    state = AdamState.for_store(store, train_cfg)
    history: list = []
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, model_cfg, train_cfg)
        _overlay(store, state, ckpt)
        history = list(ckpt.history)
        start = ckpt.step

    def snapshot(step):
        return Checkpoint(
            model_cfg, train_cfg,
            {k: t.data for k, t in store.items()},
            state.m, state.v, step, history,
        )

    for step in range(start, train_cfg.steps):
        x = _draw_batch(images, train_cfg, step).astype(dtype)
        noise_seed = int(
            np.random.default_rng((train_cfg.seed, 2, step)).integers(2 ** 62)
        )
        y = sample(op, Tensor(x), sigma=train_cfg.sigma_train, seed=noise_seed)
        out = model_forward(model_cfg, store, op, y)
        loss = mse_loss(Tensor(x), out)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"training diverged: loss={value} at step {step}")
        loss.backward()
        lr = lr_at(train_cfg, step)
        adam_step(store, state, lr)
        history.append((step + 1, value, lr))
        if on_step is not None:
            on_step(step + 1, value, lr)
        if (
            out_checkpoint
            and train_cfg.checkpoint_every
            and (step + 1) % train_cfg.checkpoint_every == 0
        ):
            save_checkpoint(out_checkpoint, snapshot(step + 1))
    if out_checkpoint:
        save_checkpoint(out_checkpoint, snapshot(train_cfg.steps))
    return history
