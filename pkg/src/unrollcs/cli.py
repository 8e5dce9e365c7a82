"""Command-line entry point: sample, train, reconstruct, eval, verify, bench.

Every command reads an optional plain-text ``key=value`` configuration file
whose keys are the ``ModelConfig``/``TrainConfig`` field names (plus
``learn_sampling``); unknown keys are rejected and command-line flags
override file values.  Exit codes: 0 success, 1 runtime or verification
failure, 2 I/O error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .baseline import IstaConfig, ista_reconstruct
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    UnrollCSError,
)
from .evalio import evaluate, load_image, psnr, save_image, ssim
from .models import (
    ModelConfig,
    init_params,
    model_forward,
    parameter_count,
    receptive_field,
)
from .physics import (
    adjoint,
    fd_adjoint,
    fd_forward,
    generate_operator,
    load_measurement,
    load_operator,
    pad_to_block,
    project_null,
    project_range,
    sample,
    save_measurement,
    save_operator,
)
from .tensor import Tensor, grad_check
from .training import TrainConfig, restore_model, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 2
EXIT_CONFIG = 3


# ---------------------------------------------------------------------------
# run configuration: key=value file + flag overrides
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


def _parse_optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _parse_int_tuple(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


_CONVERTERS = {
    "architecture": str, "framework": str, "fusion": str, "variant": str,
    "dtype": str,
    "B": int, "C": int, "D": int, "K": int, "batch_size": int, "patch": int,
    "steps": int, "seed": int, "checkpoint_every": int,
    "rho": float, "lr": float, "lr_decay_factor": float, "beta1": float,
    "beta2": float, "eps": float, "sigma_train": float, "gamma": float,
    "q": _parse_optional_int,
    "lr_decay_points": _parse_int_tuple,
    "share_weights": _parse_bool, "skip_encoder_decoder": _parse_bool,
    "skip_intra_stage": _parse_bool, "augment": _parse_bool,
    "learn_sampling": _parse_bool,
}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    """The effective model/training configuration behind a command."""

    model: ModelConfig
    train: TrainConfig
    learn_sampling: bool = False

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "learn_sampling": self.learn_sampling,
        }


def parse_config_file(path: str) -> dict:
    """Read ``key=value`` lines; '#' starts a comment, blank lines ignored."""
    values = {}
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def build_run_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Merge a config file with flag overrides into validated dataclasses."""
    merged = parse_config_file(config_path) if config_path else {}
    merged.update(overrides)
    model_kw, train_kw, learn = {}, {}, False
    for key, text in merged.items():
        if key not in _CONVERTERS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        try:
            value = _CONVERTERS[key](str(text))
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key!r}: {text!r}") from exc
        if key == "learn_sampling":
            learn = value
        elif key in _MODEL_KEYS:
            model_kw[key] = value
        else:
            train_kw[key] = value
    return RunConfig(ModelConfig(**model_kw), TrainConfig(**train_kw), learn)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    img = load_image(args.image)
    op = generate_operator(args.block, args.ratio, args.seed)
    padded, _ = pad_to_block(img.data, _model_multiple(args.block))
    msr = sample(op, Tensor(padded), sigma=args.sigma, seed=args.seed)
    save_operator(op, args.out + ".op")
    save_measurement(msr, args.out + ".msr")
    _, _, hb, wb = msr.y.shape
    print(f"M={op.M} N={op.N} gamma={op.gamma:.6g}")
    print(f"measurement tensor {hb}x{wb}x{op.M}")
    print(f"wrote {args.out}.op and {args.out}.msr")
    return EXIT_OK


def _model_multiple(block: int) -> int:
    # multi-scale models downsample twice, so pad to a multiple of lcm(B, 4)
    return math.lcm(block, 4)


def _collect_overrides(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in ("steps", "lr", "gamma", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def cmd_train(args) -> int:
    run = build_run_config(args.config, _collect_overrides(args))
    op = None
    if run.learn_sampling:
        op = generate_operator(run.model.B, run.train.gamma, run.train.seed)
        op.learnable = True
    history = train(run.model, run.train, args.data, out_checkpoint=args.out,
                    op=op, resume=args.resume)
    print(json.dumps(run.to_dict(), sort_keys=True))
    print(f"steps={len(history)} first_loss={history[0][1]:.6g} "
          f"final_loss={history[-1][1]:.6g}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _reconstruction(args, op, msr):
    if args.method == "adjoint":
        return adjoint(op, msr)
    if args.method == "ista":
        cfg = IstaConfig(iterations=args.iterations, rho=args.rho,
                         lam=args.lam, transform=args.transform)
        return ista_reconstruct(op, msr, cfg)
    if not args.checkpoint:
        raise ConfigurationError("--method model requires --checkpoint")
    model_cfg, train_cfg, store = restore_model(args.checkpoint)
    y = Tensor(msr.y.data.astype(train_cfg.np_dtype))
    return model_forward(model_cfg, store, op, y)


def cmd_reconstruct(args) -> int:
    op = load_operator(args.operator)
    msr = load_measurement(args.measurement)
    xhat = _reconstruction(args, op, msr)
    data = np.clip(xhat.data, 0.0, 1.0)
    if args.truth:
        gt = load_image(args.truth)
        data = data[..., : gt.shape[2], : gt.shape[3]]
    save_image(args.out, data)
    print(f"wrote {args.out}")
    if args.truth:
        written = load_image(args.out)  # score the quantized artifact
        print(f"PSNR={psnr(gt, written):.4f} dB SSIM={ssim(gt, written):.6f}")
    return EXIT_OK


def _eval_method(args):
    """Resolve --method, filling --block/--ratio defaults along the way.

    A model method defaults the generated operator to the geometry the
    checkpoint was trained with; the other methods fall back to 32 / 0.1.
    """
    if args.method == "model":
        if not args.checkpoint:
            raise ConfigurationError("--method model requires --checkpoint")
        model_cfg, train_cfg, store = restore_model(args.checkpoint)
        if args.block is None:
            args.block = model_cfg.B
        if args.ratio is None:
            args.ratio = train_cfg.gamma
        return (model_cfg, store)
    if args.block is None:
        args.block = 32
    if args.ratio is None:
        args.ratio = 0.1
    if args.method == "adjoint":
        return "adjoint-only"
    return IstaConfig(iterations=args.iterations, rho=args.rho,
                      lam=args.lam, transform=args.transform)


def _eval_operator(args):
    if args.operator:
        return load_operator(args.operator)
    return generate_operator(args.block, args.ratio, args.seed)


def cmd_eval(args) -> int:
    method = _eval_method(args)
    op = _eval_operator(args)
    report = evaluate(method, args.data, op, sigma=args.sigma, seed=args.seed)
    doc = report.to_json()
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(doc + "\n")
        print(f"wrote {args.json}")
    else:
        print(doc)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        print(f"wrote {args.csv}")
    print(f"mean_psnr_db={report.mean_psnr_db:.4f} mean_ssim={report.mean_ssim:.6f} "
          f"mean_ms={report.mean_ms:.2f} images={len(report.per_image)}")
    if args.svg:
        _write_sweep_svg(args, method)
    return EXIT_OK


def _write_sweep_svg(args, method) -> None:
    values = [float(v) for v in args.sweep_values.split(",") if v.strip()]
    if len(values) < 2:
        raise ConfigurationError("--sweep-values needs at least two numbers")
    means = []
    for value in values:
        if args.sweep == "sigma":
            op = _eval_operator(args)
            report = evaluate(method, args.data, op, sigma=value, seed=args.seed)
        else:  # gamma sweep regenerates the operator at each ratio
            op = generate_operator(args.block, value, args.seed)
            report = evaluate(method, args.data, op, sigma=args.sigma,
                              seed=args.seed)
        means.append(report.mean_psnr_db)
    label = "noise level sigma" if args.sweep == "sigma" else "sampling ratio gamma"
    svg = _svg_line_chart(values, means, label, "mean PSNR (dB)")
    with open(args.svg, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"wrote {args.svg}")


def _svg_line_chart(xs, ys, xlabel: str, ylabel: str) -> str:
    """A dependency-free SVG line chart (one polyline, ticks, labels)."""
    width, height = 640, 420
    left, right, top, bottom = 70, 610, 40, 360
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(v):
        return left + (v - x0) / (x1 - x0) * (right - left)

    def sy(v):
        return bottom - (v - y0) / (y1 - y0) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    for tick in np.linspace(x0, x1, 5):
        px = sx(tick)
        parts.append(f'<line x1="{px:.1f}" y1="{bottom}" x2="{px:.1f}" '
                     f'y2="{bottom + 5}" stroke="black"/>')
        parts.append(f'<text x="{px:.1f}" y="{bottom + 20}" '
                     f'text-anchor="middle">{tick:.4g}</text>')
    for tick in np.linspace(y0, y1, 5):
        py = sy(tick)
        parts.append(f'<line x1="{left - 5}" y1="{py:.1f}" x2="{left}" '
                     f'y2="{py:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{py + 4:.1f}" '
                     f'text-anchor="end">{tick:.4g}</text>')
    points = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
    parts.append(f'<polyline points="{points}" fill="none" stroke="#1f77b4" '
                 f'stroke-width="2"/>')
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" '
                     f'fill="#1f77b4"/>')
    parts.append(f'<text x="{(left + right) / 2:.1f}" y="{height - 12}" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="18" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 18 {(top + bottom) / 2:.1f})">{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# verify: the invariant suites behind the acceptance criteria
# ---------------------------------------------------------------------------


def _suite_orthogonality(inject_fault: bool):
    worst = 0.0
    for block in (2, 8, 32):
        for gamma in (0.1, 0.25, 0.5, 1.0):
            op = generate_operator(block, gamma, seed=0)
            if inject_fault:
                op.A[0] += 1e-4
            worst = max(worst, op.orthogonality_defect())
    return worst < 1e-10, f"max |AA^T - I| = {worst:.2e} over 12 operators"


def _suite_rnd_identity(inject_fault: bool):
    op = generate_operator(8, 0.25, seed=1)
    if inject_fault:
        op.A[0] += 1e-4
    x = Tensor(np.random.default_rng(2).random((100, 1, 16, 16)))
    recomposed = project_range(op, x) + project_null(op, x)
    err_sum = float(np.abs(x.data - recomposed.data).max())
    err_null = float(np.abs(sample(op, project_null(op, x).data).y.data).max())
    ok = err_sum < 1e-12 and err_null < 1e-10
    return ok, f"|x - (Pr+Pn)x| = {err_sum:.2e}, |A Pn x| = {err_null:.2e}"


def _suite_adjointness(inject_fault: bool):
    rng = np.random.default_rng(3)
    worst = 0.0
    trials = 0
    for r in (1, 2, 4):
        for d in (1, 4):
            op = generate_operator(4 * r, 0.4, seed=r * 10 + d)
            for _ in range(5):
                X = Tensor(rng.standard_normal((1, r * r * d, 8, 8)))
                Y = Tensor(rng.standard_normal(fd_forward(op, X, r).shape))
                lhs = float((fd_forward(op, X, r).data * Y.data).sum())
                rhs = float((X.data * fd_adjoint(op, Y, r).data).sum())
                worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-30))
                trials += 1
    op = generate_operator(8, 0.25, seed=4)
    for _ in range(20):
        x = Tensor(rng.standard_normal((2, 1, 16, 16)))
        y = Tensor(rng.standard_normal((2, op.M, 2, 2)))
        lhs = float((sample(op, x).y.data * y.data).sum())
        rhs = float((x.data * adjoint(op, y).data).sum())
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-30))
        trials += 1
    return worst < 1e-10, f"max relative defect {worst:.2e} over {trials} pairings"


def _suite_fd_equivalence(inject_fault: bool):
    rng = np.random.default_rng(5)
    worst = 0.0
    for r, d in ((1, 1), (2, 4), (4, 2)):
        block = 4 * r
        op = generate_operator(block, 0.5, seed=6)
        X = rng.standard_normal((2, r * r * d, 8, 8))
        got = fd_forward(op, Tensor(X), r).data
        # oracle: shuffle to D full-resolution channels, then dense per-block
        # multiplies, one channel at a time
        hi = 8 * r
        full = (
            X.reshape(2, d, r, r, 8, 8).transpose(0, 1, 4, 2, 5, 3).reshape(2, d, hi, hi)
        )
        want = np.empty_like(got)
        for n in range(2):
            for c in range(d):
                for bi in range(hi // block):
                    for bj in range(hi // block):
                        blk = full[n, c, bi * block:(bi + 1) * block,
                                   bj * block:(bj + 1) * block]
                        want[n, c * op.M:(c + 1) * op.M, bi, bj] = op.A @ blk.ravel()
        worst = max(worst, float(np.abs(got - want).max()))
    return worst < 1e-12, f"max |fd_forward - dense| = {worst:.2e} (r in 1,2,4)"


_GRADCHECK_GRID = [
    ("plain-id", "pgd", "default"), ("plain-id", "rnd", "default"),
    ("plain-id", "pgd", "fixed"), ("plain-id", "pgd", "reduced"),
    ("plain-fd", "pgd", "default"), ("plain-fd", "rnd", "default"),
    ("prl-star", "pgd", "default"), ("prl-star", "rnd", "default"),
    ("prl", "pgd", "default"), ("prl", "rnd", "default"),
]


def _suite_gradcheck(inject_fault: bool):
    worst = 0.0
    for arch, framework, variant in _GRADCHECK_GRID:
        op = generate_operator(4, 0.5, seed=13)
        cfg = ModelConfig(architecture=arch, framework=framework,
                          variant=variant, C=2, D=2, K=1, B=4)
        store = init_params(cfg, seed=14)
        x0 = np.random.default_rng(13).random((1, 1, 8, 8))

        def f(t):
            return model_forward(cfg, store, op, sample(op, t)).sigmoid().sum()

        report = grad_check(f, x0, n_samples=6, seed=3)
        worst = max(worst, report.max_rel_error)
    return worst < 1e-4, f"max rel error {worst:.2e} over {len(_GRADCHECK_GRID)} models"


def _suite_receptive_field(inject_fault: bool):
    bad = 0
    for k in range(1, 11):
        if receptive_field("prl-star", k) != (84 * k + 13) ** 2:
            bad += 1
        if receptive_field("prl", k) != (140 * k + 8) ** 2:
            bad += 1
    return bad == 0, f"{20 - bad}/20 closed-form values match"


def _suite_tiny_training(inject_fault: bool):
    rng = np.random.default_rng(11)
    cells = rng.random((8, 8))
    image = np.kron(cells, np.ones((8, 8)))
    with tempfile.TemporaryDirectory() as tmp:
        save_image(f"{tmp}/img.pgm", image)
        cfg = ModelConfig(architecture="prl", framework="pgd", C=4, D=4, K=1, B=32)
        tc = TrainConfig(batch_size=4, patch=64, steps=500, lr=1e-4,
                         gamma=0.3, seed=0, dtype="float32")
        history = train(cfg, tc, tmp)
    first, last = history[0][1], history[-1][1]
    return last < 0.1 * first, f"loss {first:.3e} -> {last:.3e} in 500 steps"


_FAST_SUITES = [
    ("orthogonality", _suite_orthogonality),
    ("range-null identity", _suite_rnd_identity),
    ("adjointness", _suite_adjointness),
    ("fd equivalence", _suite_fd_equivalence),
    ("gradcheck", _suite_gradcheck),
    ("receptive field", _suite_receptive_field),
]


def cmd_verify(args) -> int:
    suites = list(_FAST_SUITES)
    if args.level == "full":
        suites.append(("tiny training", _suite_tiny_training))
    failures = 0
    print(f"{'suite':<22}{'result':<8}detail")
    for name, fn in suites:
        start = time.perf_counter()
        ok, detail = fn(args.inject_fault)
        elapsed = time.perf_counter() - start
        failures += 0 if ok else 1
        print(f"{name:<22}{'PASS' if ok else 'FAIL':<8}{detail} [{elapsed:.1f}s]")
    if failures:
        print(f"{failures} suite(s) failed")
        return EXIT_FAILURE
    print("all suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _layer_pixels(cfg: ModelConfig, name: str, h: int, w: int) -> int:
    """Spatial positions a layer processes (multi-scale only for "prl")."""
    if cfg.architecture == "prl":
        if name.startswith("group"):
            scale = (1, 2, 4, 4, 2, 1)[int(name[5]) - 1]
            return (h // scale) * (w // scale)
        if name in ("down1", "up2"):
            return (h // 2) * (w // 2)
        if name in ("down2", "up1"):
            return (h // 4) * (w // 4)
    return h * w


def _conv_macs(cfg: ModelConfig, h: int, w: int) -> int:
    """Analytic multiply-accumulate estimate for one reconstruction.

    Convolution cost is Cout*Cin*kh*kw per output position at the spatial
    resolution of the layer's group; shared weights are charged once per
    stage application.  Elementwise work and padding overhead are ignored.
    """
    from .models import _model_layout

    total = 0
    for name, shape, _, _ in _model_layout(cfg):
        cout, cin, kh, kw = shape
        copies = cfg.K if cfg.share_weights and "stage0/" in name else 1
        total += cout * cin * kh * kw * _layer_pixels(cfg, name, h, w) * copies
    return total


def _physics_macs(cfg: ModelConfig, op, h: int, w: int) -> int:
    # per stage the fusion path applies A and A^T once each over D channels
    blocks = (h // op.B) * (w // op.B)
    per_apply = op.M * op.N * blocks
    d = 1 if cfg.architecture == "plain-id" else cfg.D
    stage_cost = 2 * d * per_apply
    stages = cfg.K * (6 if cfg.architecture in ("prl", "prl-star") else 1)
    return stage_cost * stages + 2 * per_apply  # + initial adjoint & sampling


def cmd_bench(args) -> int:
    run = build_run_config(args.config, _collect_overrides(args))
    cfg = run.model
    op = generate_operator(cfg.B, run.train.gamma, run.train.seed)
    size = args.size
    multiple = _model_multiple(cfg.B)
    if size % multiple:
        raise ConfigurationError(f"--size must be a multiple of {multiple}")
    params = parameter_count(cfg)
    macs = _conv_macs(cfg, size, size) + _physics_macs(cfg, op, size, size)
    store = init_params(cfg, run.train.seed, np.float32)
    x = np.random.default_rng(run.train.seed).random((1, 1, size, size),
                                                     dtype=np.float32)
    y = sample(op, Tensor(x))
    model_forward(cfg, store, op, y)  # warm-up
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        model_forward(cfg, store, op, y)
        times.append(time.perf_counter() - t0)
    ms = 1e3 * min(times)
    print(f"architecture={cfg.architecture} framework={cfg.framework} "
          f"K={cfg.K} C={cfg.C} D={cfg.D} B={cfg.B} gamma={op.gamma:.4g} "
          f"input=1x1x{size}x{size}")
    print(f"parameters: {params:,} (+ {op.A.size:,} sampling matrix)")
    print(f"analytic estimate: {macs / 1e9:.2f} GMAC/reconstruction "
          f"({2 * macs / 1e9:.2f} GFLOPs)")
    print(f"measured: {ms:.1f} ms/reconstruction (best of {args.repeats})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as configuration errors."""

    def error(self, message):
        raise ConfigurationError(message)


def _add_config_flags(sub):
    sub.add_argument("--config", help="key=value configuration file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one configuration key (repeatable)")
    sub.add_argument("--steps", type=int, help="override train steps")
    sub.add_argument("--lr", type=float, help="override learning rate")
    sub.add_argument("--gamma", type=float, help="override sampling ratio")
    sub.add_argument("--seed", type=int, help="override seed")


def _add_ista_flags(sub):
    sub.add_argument("--iterations", type=int, default=30)
    sub.add_argument("--lam", type=float, default=0.05)
    sub.add_argument("--rho", type=float, default=1.0)
    sub.add_argument("--transform", default="dct2d-8x8",
                     choices=("identity", "dct2d-8x8"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unrollcs",
                     description="Block-based compressed sensing toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("sample", help="measure an image block-by-block")
    p.add_argument("--image", required=True)
    p.add_argument("--block", type=int, default=32)
    p.add_argument("--ratio", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True,
                   help="output prefix; writes <out>.op and <out>.msr")
    p.set_defaults(func=cmd_sample)

    p = subs.add_parser("train", help="train a model on a directory of images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("reconstruct", help="invert a stored measurement")
    p.add_argument("--operator", required=True)
    p.add_argument("--measurement", required=True)
    p.add_argument("--method", default="adjoint",
                   choices=("adjoint", "ista", "model"))
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth image for PSNR/SSIM")
    _add_ista_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = subs.add_parser("eval", help="score a method over an image directory")
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="adjoint",
                   choices=("adjoint", "ista", "model"))
    p.add_argument("--checkpoint")
    p.add_argument("--operator", help="operator file (else generated)")
    p.add_argument("--block", type=int,
                   help="block size for a generated operator (default 32, "
                        "or the checkpoint's block size for --method model)")
    p.add_argument("--ratio", type=float,
                   help="sampling ratio for a generated operator (default 0.1, "
                        "or the checkpoint's training ratio for --method model)")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the report here instead of stdout")
    p.add_argument("--csv", help="also write per-image CSV")
    p.add_argument("--svg", help="write a PSNR sweep line chart")
    p.add_argument("--sweep", choices=("sigma", "gamma"), default="sigma")
    p.add_argument("--sweep-values", default="0,10,25,50",
                   help="comma-separated sweep points for --svg")
    _add_ista_flags(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("verify", help="run the invariant suites")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--inject-fault", action="store_true",
                   help="negative control: perturb physics and expect failure")
    p.set_defaults(func=cmd_verify)

    p = subs.add_parser("bench", help="parameter/compute/runtime summary")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--repeats", type=int, default=3)
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigurationError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UnrollCSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
