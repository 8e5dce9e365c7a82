"""Unrolled reconstruction networks over block-sampling physics.

Four architectures share one stage vocabulary:

``plain-id``
    Single-channel iterations on the image itself.  Each stage takes an
    analytic gradient step and refines it with a small conv/residual-block
    branch.  The ``fixed`` variant freezes the stage's output conv to a
    channel selector; the ``reduced`` variant drops both 1x1 convs and
    carries a zero-initialized container of extra channels between stages.
``plain-fd``
    The same unrolling lifted to a D-channel feature space, entered through
    an extraction conv and left through a reconstruction conv.  The physics
    is applied per feature channel and fused by a learned conv.
``prl-star``
    Six stage groups at full resolution with stride-1 3x3 convs between
    them, widening the feature space 1x/4x/16x along a U-shaped path.
``prl``
    The same six groups on a genuine 3-scale pyramid: 2x2 stride-2 convs
    move between scales, and pixel-(un)shuffled physics operators keep every
    scale tied to the measurements.

Stage bodies come in two flavors, selected by ``ModelConfig.framework``:
a proximal-gradient stage (gradient step + learned proximal branch) and a
range/nullspace stage (learned range merge + nullspace-projected update).
Both use the same learnable pieces and have identical parameter counts at
matched widths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .physics import (
    Measurement,
    SamplingOperator,
    adjoint,
    fd_adjoint,
    fd_forward,
    fd_project_null,
    sample,
)
from .tensor import Tensor, concat, conv2d, pixel_unshuffle

ARCHITECTURES = ("plain-id", "plain-fd", "prl-star", "prl")
FRAMEWORKS = ("pgd", "rnd")
FUSIONS = ("analytic", "conv1", "conv1_sigmoid", "conv3", "conv3_sigmoid")
VARIANTS = ("default", "fixed", "reduced")

#: per-group physics scale factors along the U-shaped path
_GROUP_SCALES = (1, 2, 4, 4, 2, 1)
#: per-group channel multipliers (relative to the base width)
_GROUP_WIDTHS = (1, 4, 16, 16, 4, 1)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``C`` is the internal stage width, ``D`` the width carried between
    stages (both multiplied by r² at coarser scales), ``K`` the number of
    stages per group (total stages for the plain architectures) and ``q``
    the number of active physics-fusion kernels per transmission channel
    (``None`` means all ``D``).  ``variant`` only applies to ``plain-id``.
    """

    framework: str = "pgd"
    architecture: str = "prl"
    B: int = 32
    C: int = 8
    D: int = 8
    K: int = 5
    q: int | None = None
    rho: float = 1.0
    share_weights: bool = False
    skip_encoder_decoder: bool = True
    skip_intra_stage: bool = True
    fusion: str = "conv3_sigmoid"
    variant: str = "default"

    def __post_init__(self):
        self.framework = str(self.framework).lower()
        self.architecture = str(self.architecture).lower()
        self.fusion = str(self.fusion).lower()
        self.variant = str(self.variant).lower()
        if self.framework not in FRAMEWORKS:
            raise ConfigurationError(f"unknown framework {self.framework!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion mode {self.fusion!r}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.variant != "default" and self.architecture != "plain-id":
            raise ConfigurationError(
                f"variant {self.variant!r} only applies to plain-id"
            )
        if self.architecture == "plain-id":
            # single-channel transmission: the physics term is analytic
            self.fusion = "analytic"
        if self.K < 1:
            raise ConfigurationError("K must be at least 1")
        if self.C < 1 or self.D < 1 or self.B < 1:
            raise ConfigurationError("B, C and D must be positive")
        if self.rho <= 0:
            raise ConfigurationError("rho must be positive")
        if self.q is None:
            self.q = self.D
        if not 0 <= self.q <= self.D:
            raise ConfigurationError(f"q={self.q} outside [0, D={self.D}]")
        if (
            self.framework == "rnd"
            and self.architecture != "plain-id"
            and self.C < self.D
        ):
            raise ConfigurationError("range/nullspace stages require C >= D")
        if self.variant == "reduced" and self.C < 2:
            raise ConfigurationError("reduced variant needs C >= 2 for the container")


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParameterStore:
    """Flat named map of trainable tensors with deterministic iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        """Register an array (wrapped) or an existing trainable Tensor."""
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if isinstance(value, Tensor):
            if not value.requires_grad:
                raise ConfigurationError(f"parameter {name!r} must require grad")
            t = value
        else:
            t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        """(name, tensor) pairs in sorted name order."""
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def replaced(self, name: str, tensor: Tensor) -> "ParameterStore":
        """Shallow copy with one entry swapped (gradient probes, ablations)."""
        if name not in self._params:
            raise ConfigurationError(f"missing parameter {name!r}")
        ps = ParameterStore()
        ps._params = dict(self._params)
        ps._params[name] = tensor
        return ps

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self._params.values())


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _stage_layout(cfg: ModelConfig, d: int, c: int, r: int):
    """Yield (relative name, weight shape, bias length, init kind) per stage."""
    if cfg.variant == "reduced":
        yield "rb1/conv1", (c, c, 3, 3), c, "kaiming"
        yield "rb1/conv2", (c, c, 3, 3), c, "zeros"
        yield "rb2/conv1", (c, c, 3, 3), c, "kaiming"
        yield "rb2/conv2", (c, c, 3, 3), c, "zeros"
        return
    # the fixed variant has no learnable output conv; starting its input
    # conv at zero keeps the stage an exact pass-through at initialization
    yield "conv_in", (c, d, 1, 1), c, "zeros" if cfg.variant == "fixed" else "kaiming"
    yield "rb1/conv1", (c, c, 3, 3), c, "kaiming"
    yield "rb1/conv2", (c, c, 3, 3), c, "kaiming"
    yield "rb2/conv1", (c, c, 3, 3), c, "kaiming"
    yield "rb2/conv2", (c, c, 3, 3), c, "kaiming"
    if cfg.variant != "fixed":
        yield "conv_out", (d, c, 1, 1), d, "zeros"
    if cfg.fusion != "analytic":
        k = 1 if cfg.fusion.startswith("conv1") else 3
        yield "fusion", (d, 2 * d + r * r, k, k), d, "kaiming"


def _model_layout(cfg: ModelConfig):
    """Yield every (name, weight shape, bias length, init kind) for ``cfg``."""
    stages = range(1 if cfg.share_weights else cfg.K)
    if cfg.architecture == "plain-id":
        for s in stages:
            for rel, shape, bn, kind in _stage_layout(cfg, 1, cfg.C, 1):
                yield f"stage{s}/{rel}", shape, bn, kind
        return
    D, C = cfg.D, cfg.C
    yield "extract", (D, 1, 3, 3), D, "kaiming"
    yield "reconstruct", (1, D, 3, 3), 1, "kaiming"
    if cfg.architecture == "plain-fd":
        for s in stages:
            for rel, shape, bn, kind in _stage_layout(cfg, D, C, 1):
                yield f"stage{s}/{rel}", shape, bn, kind
        return
    if cfg.architecture == "prl":
        yield "down1", (4 * D, D, 2, 2), 4 * D, "kaiming"
        yield "down2", (16 * D, 4 * D, 2, 2), 16 * D, "kaiming"
        # transposed convs store the forward-sense kernel, so their bias
        # length follows the kernel's *input* channel count
        yield "up1", (16 * D, 4 * D, 2, 2), 4 * D, "kaiming"
        yield "up2", (4 * D, D, 2, 2), D, "kaiming"
    else:  # prl-star: same bridges at stride 1, full resolution
        yield "down1", (4 * D, D, 3, 3), 4 * D, "kaiming"
        yield "down2", (16 * D, 4 * D, 3, 3), 16 * D, "kaiming"
        yield "up1", (4 * D, 16 * D, 3, 3), 4 * D, "kaiming"
        yield "up2", (D, 4 * D, 3, 3), D, "kaiming"
    for g in range(6):
        if cfg.architecture == "prl":
            r = _GROUP_SCALES[g]
            d, c = r * r * D, r * r * C
        else:
            r = 1
            d, c = _GROUP_WIDTHS[g] * D, _GROUP_WIDTHS[g] * C
        for s in stages:
            for rel, shape, bn, kind in _stage_layout(cfg, d, c, r):
                yield f"group{g + 1}/stage{s}/{rel}", shape, bn, kind


def init_params(cfg: ModelConfig, seed: int, dtype=np.float64) -> ParameterStore:
    """Build a fresh parameter store for ``cfg``.

    Conv weights get fan-in-scaled Gaussian values, biases start at zero,
    and each stage's final conv starts at zero so stages begin as identity
    (or pure gradient-step) maps.  Same seed, same store, bit for bit.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape, bias_n, kind in _model_layout(cfg):
        _, cin, kh, kw = shape
        if kind == "zeros":
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * math.sqrt(2.0 / (cin * kh * kw))
        store.add(f"{name}/weight", w.astype(dtype))
        store.add(f"{name}/bias", np.zeros(bias_n, dtype=dtype))
    return store


def parameter_count(cfg: ModelConfig, op: SamplingOperator | None = None) -> int:
    """Learnable scalar count for ``cfg`` (plus the sampling matrix if given)."""
    total = sum(
        int(np.prod(shape)) + bias_n for _, shape, bias_n, _ in _model_layout(cfg)
    )
    if op is not None:
        total += op.A.size
    return int(total)


# ---------------------------------------------------------------------------
# forward building blocks
# ---------------------------------------------------------------------------


def _conv(store, name, x, **kw):
    return conv2d(x, store[f"{name}/weight"], store[f"{name}/bias"], **kw)


def _residual_block(store, name, x):
    t = _conv(store, f"{name}/conv1", x, padding=1).relu()
    return x + _conv(store, f"{name}/conv2", t, padding=1)


def _ytensor(y) -> Tensor:
    return y.y if isinstance(y, Measurement) else y


def fusion_forward(cfg: ModelConfig, params: ParameterStore, X: Tensor,
                   op: SamplingOperator, y, r: int = 1, prefix: str = "") -> Tensor:
    """Estimate the physics term for a feature tensor at scale ``r``.

    In ``analytic`` mode this is the exact per-channel data-fidelity
    gradient lifted through the shuffled block operators.  The conv modes
    instead concatenate ``[X, AᵀAX, unshuffled Aᵀy]`` and let a learned
    conv (1x1 or 3x3, optionally Sigmoid-bounded) produce the estimate;
    with ``q < D`` the first ``r²·(D−q)`` output channels are forced to
    zero, disabling that share of the physics kernels.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    yt = _ytensor(y)
    d = X.shape[1]
    if d % (r * r):
        raise DimensionError(f"{d} channels not divisible by r²={r * r}")
    if cfg.fusion == "analytic":
        meas = fd_forward(op, X, r)
        reps = meas.shape[1] // yt.shape[1]
        tiled = yt if reps == 1 else concat([yt] * reps, axis=1)
        return fd_adjoint(op, meas - tiled, r)
    back = fd_adjoint(op, fd_forward(op, X, r), r)
    obs = pixel_unshuffle(adjoint(op, yt), r)
    k = 1 if cfg.fusion.startswith("conv1") else 3
    h = _conv(params, f"{prefix}fusion", concat([X, back, obs]), padding=k // 2)
    if cfg.fusion.endswith("sigmoid"):
        h = h.sigmoid()
    if cfg.q < cfg.D:
        zero = d * (cfg.D - cfg.q) // cfg.D
        mask = np.ones(d)
        mask[:zero] = 0.0
        h = h.channel_scale(mask)
    return h


def stage_pgd(cfg: ModelConfig, params: ParameterStore, X: Tensor,
              op: SamplingOperator, y, r: int = 1, prefix: str = "",
              trace: dict | None = None) -> Tensor:
    """One proximal-gradient stage: gradient step, then a learned residual."""
    g = fusion_forward(cfg, params, X, op, y, r, prefix)
    Z = X - cfg.rho * g
    if trace is not None:
        trace["gradient_step"] = Z
    t = _conv(params, f"{prefix}conv_in", Z)
    t = _residual_block(params, f"{prefix}rb1", t)
    t = _residual_block(params, f"{prefix}rb2", t)
    res = (
        t.slice_channels(0, X.shape[1])
        if cfg.variant == "fixed"
        else _conv(params, f"{prefix}conv_out", t)
    )
    return Z + res if cfg.skip_intra_stage else res


def stage_rnd(cfg: ModelConfig, params: ParameterStore, X: Tensor,
              op: SamplingOperator, y, r: int = 1, prefix: str = "",
              trace: dict | None = None) -> Tensor:
    """One range/nullspace stage.

    The head channels of the refined feature are merged with the
    measurements (range part), refined again, projected into the
    operator's nullspace, and added back — so the stage only ever edits
    what the measurements cannot see.
    """
    d = X.shape[1]
    t = _conv(params, f"{prefix}conv_in", X)
    F = _residual_block(params, f"{prefix}rb1", t)
    c = F.shape[1]
    head = F.slice_channels(0, d) if c > d else F
    R = fusion_forward(cfg, params, head, op, y, r, prefix)
    merged = concat([R, F.slice_channels(d, c)]) if c > d else R
    G = _residual_block(params, f"{prefix}rb2", merged)
    gh = G.slice_channels(0, d) if c > d else G
    null = fd_project_null(op, gh, r)
    if trace is not None:
        trace["null"] = null
    G = concat([null, G.slice_channels(d, c)]) if c > d else null
    res = (
        G.slice_channels(0, d)
        if cfg.variant == "fixed"
        else _conv(params, f"{prefix}conv_out", G)
    )
    return X + res if cfg.skip_intra_stage else res


_STAGES = {"pgd": stage_pgd, "rnd": stage_rnd}


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------


def _stage_prefix(cfg: ModelConfig, s: int, group: int | None = None) -> str:
    s = 0 if cfg.share_weights else s
    return f"stage{s}/" if group is None else f"group{group}/stage{s}/"


def _run_group(cfg, params, X, op, y, group, r):
    stage = _STAGES[cfg.framework]
    for s in range(cfg.K):
        X = stage(cfg, params, X, op, y, r, _stage_prefix(cfg, s, group))
    return X


def _reduced_stage(cfg, params, prefix, x, S, op, y):
    """Container-carrying plain-id stage: no 1x1 convs, no stage skip."""
    if cfg.framework == "pgd":
        g = fusion_forward(cfg, params, x, op, y, 1, prefix)
        t = concat([x - cfg.rho * g, S])
        t = _residual_block(params, f"{prefix}rb1", t)
        t = _residual_block(params, f"{prefix}rb2", t)
        return t.slice_channels(0, 1), t.slice_channels(1, cfg.C)
    F = _residual_block(params, f"{prefix}rb1", concat([x, S]))
    R = fusion_forward(cfg, params, F.slice_channels(0, 1), op, y, 1, prefix)
    G = _residual_block(params, f"{prefix}rb2", concat([R, F.slice_channels(1, cfg.C)]))
    null = fd_project_null(op, G.slice_channels(0, 1), 1)
    # the update must stay anchored to x: only its unseen component moves
    return x + null, G.slice_channels(1, cfg.C)


def _forward_plain_id(cfg, params, op, y, x0):
    stage = _STAGES[cfg.framework]
    x = x0
    if cfg.variant == "reduced":
        S = Tensor(np.zeros((x0.shape[0], cfg.C - 1) + x0.shape[2:], dtype=x0.dtype))
        for s in range(cfg.K):
            x, S = _reduced_stage(cfg, params, _stage_prefix(cfg, s), x, S, op, y)
        return x
    for s in range(cfg.K):
        x = stage(cfg, params, x, op, y, 1, _stage_prefix(cfg, s))
    return x


def model_forward(cfg: ModelConfig, params: ParameterStore,
                  op: SamplingOperator, y) -> Tensor:
    """Reconstruct a batch of images from block measurements ``y``."""
    x0 = adjoint(op, y)
    if cfg.architecture == "plain-id":
        return _forward_plain_id(cfg, params, op, y, x0)
    X = _conv(params, "extract", x0, padding=1)
    if cfg.architecture == "plain-fd":
        stage = _STAGES[cfg.framework]
        for s in range(cfg.K):
            X = stage(cfg, params, X, op, y, 1, _stage_prefix(cfg, s))
        return _conv(params, "reconstruct", X, padding=1)
    if cfg.architecture == "prl":
        g1 = _run_group(cfg, params, X, op, y, 1, 1)
        t = _conv(params, "down1", g1, stride=2)
        g2 = _run_group(cfg, params, t, op, y, 2, 2)
        t = _conv(params, "down2", g2, stride=2)
        t = _run_group(cfg, params, t, op, y, 3, 4)
        t = _run_group(cfg, params, t, op, y, 4, 4)
        t = _conv(params, "up1", t, stride=2, transposed=True)
        if cfg.skip_encoder_decoder:
            t = t + g2
        t = _run_group(cfg, params, t, op, y, 5, 2)
        t = _conv(params, "up2", t, stride=2, transposed=True)
        if cfg.skip_encoder_decoder:
            t = t + g1
        t = _run_group(cfg, params, t, op, y, 6, 1)
    else:  # prl-star: the same path without any resampling
        g1 = _run_group(cfg, params, X, op, y, 1, 1)
        t = _conv(params, "down1", g1, padding=1)
        g2 = _run_group(cfg, params, t, op, y, 2, 1)
        t = _conv(params, "down2", g2, padding=1)
        t = _run_group(cfg, params, t, op, y, 3, 1)
        t = _run_group(cfg, params, t, op, y, 4, 1)
        t = _conv(params, "up1", t, padding=1)
        if cfg.skip_encoder_decoder:
            t = t + g2
        t = _run_group(cfg, params, t, op, y, 5, 1)
        t = _conv(params, "up2", t, padding=1)
        if cfg.skip_encoder_decoder:
            t = t + g1
        t = _run_group(cfg, params, t, op, y, 6, 1)
    return _conv(params, "reconstruct", t, padding=1)


def reconstruct_image(cfg: ModelConfig, params: ParameterStore,
                      op: SamplingOperator, x) -> Tensor:
    """Sample ``x`` noiselessly and run the model — convenience for eval."""
    return model_forward(cfg, params, op, sample(op, x))


# ---------------------------------------------------------------------------
# receptive fields
# ---------------------------------------------------------------------------


def receptive_field(architecture: str, K: int) -> int:
    """Receptive-field area of the longest conv path, as a function of K."""
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    arch = str(architecture).lower()
    if arch == "prl-star":
        return (84 * K + 13) ** 2
    if arch == "prl":
        return (140 * K + 8) ** 2
    raise ConfigurationError(f"no receptive-field formula for {architecture!r}")
