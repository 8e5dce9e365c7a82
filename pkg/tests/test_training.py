"""Training loop: Adam oracle, augmentation group, schedule, checkpoint bytes."""

import numpy as np
import pytest

from unrollcs.errors import ConfigurationError, ContractError, DataError, NumericError
from unrollcs.evalio import save_image
from unrollcs.models import ModelConfig, ParameterStore, init_params, model_forward
from unrollcs.physics import adjoint, generate_operator, sample
from unrollcs.tensor import Tensor, grad_check
from unrollcs.training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    augment,
    config_hash,
    load_checkpoint,
    lr_at,
    mse_loss,
    restore_model,
    save_checkpoint,
    train,
)

# ---------------------------------------------------------------------------
# reference implementations
# ---------------------------------------------------------------------------


def oracle_adam(params, grad_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam on plain numpy arrays (out of place)."""
    params = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(a) for k, a in params.items()}
    for t, grads in enumerate(grad_seq, start=1):
        for k in params:
            g = grads[k]
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * g * g
            mhat = m[k] / (1 - beta1**t)
            vhat = v[k] / (1 - beta2**t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


def make_store(arrays):
    store = ParameterStore()
    for name, arr in arrays.items():
        store.add(name, np.array(arr, dtype=np.float64))
    return store


def texture(rng, size):
    """A piecewise-constant random pattern in [0, 1]."""
    cells = max(1, size // 8)
    base = rng.random((cells, cells))
    return np.kron(base, np.ones((size // cells, size // cells)))[:size, :size]


@pytest.fixture
def dataset(tmp_path):
    """Eight deterministic 40x40 grayscale PGM files."""
    rng = np.random.default_rng(7)
    root = tmp_path / "data"
    root.mkdir()
    for i in range(8):
        save_image(str(root / f"img{i:02d}.pgm"), texture(rng, 40))
    return str(root)


# ---------------------------------------------------------------------------
# mse loss
# ---------------------------------------------------------------------------


def test_mse_examples():
    x = Tensor(np.zeros((2, 1, 4, 4)))
    assert mse_loss(x, Tensor(np.zeros((2, 1, 4, 4)))).item() == 0.0
    assert mse_loss(x, Tensor(np.ones((2, 1, 4, 4)))).item() == 1.0


def test_mse_matches_mean_of_squares():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3, 2, 5, 4))
    got = mse_loss(Tensor(a), Tensor(b)).item()
    assert abs(got - np.mean((a - b) ** 2)) < 1e-14


def test_mse_shape_mismatch():
    with pytest.raises(ContractError):
        mse_loss(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))


def test_mse_gradient_closed_form():
    # d/dx̂ mean((x̂-x)²) == 2(x̂-x)/N, and finite differences agree
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1, 3, 3))
    xhat = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    mse_loss(Tensor(x), xhat).backward()
    np.testing.assert_allclose(xhat.grad, 2 * (xhat.data - x) / x.size, atol=1e-15)
    assert grad_check(lambda t: mse_loss(Tensor(x), t), Tensor(xhat.data))


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("g", [1.0, -3.0, 1e4])
def test_adam_first_step_magnitude_is_lr(g):
    store = make_store({"w": [0.5]})
    state = AdamState.for_store(store)
    store["w"].grad = np.array([g])
    adam_step(store, state, lr=1e-3)
    delta = float(store["w"].data[0]) - 0.5
    assert np.sign(delta) == -np.sign(g)
    assert abs(abs(delta) - 1e-3) / 1e-3 < 1e-6


def test_adam_zero_grad_leaves_param_unchanged():
    store = make_store({"w": [2.0, -1.0], "b": [0.25]})
    state = AdamState.for_store(store)
    store["w"].grad = np.zeros(2)
    store["b"].grad = np.array([1.0])
    adam_step(store, state, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, [2.0, -1.0])
    assert store["b"].data[0] != 0.25


def test_adam_missing_grad_is_a_contract_error():
    store = make_store({"w": [1.0], "b": [1.0]})
    state = AdamState.for_store(store)
    store["w"].grad = np.array([1.0])
    with pytest.raises(ContractError):
        adam_step(store, state, lr=0.1)


def test_adam_consumes_gradients():
    store = make_store({"w": [1.0]})
    state = AdamState.for_store(store)
    store["w"].grad = np.array([1.0])
    adam_step(store, state, lr=0.1)
    assert store["w"].grad is None


def test_adam_matches_reference_trajectory():
    rng = np.random.default_rng(3)
    init = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    grad_seq = [
        {k: rng.standard_normal(v.shape) for k, v in init.items()} for _ in range(5)
    ]
    store = make_store(init)
    state = AdamState.for_store(store)
    for grads in grad_seq:
        for k in init:
            store[k].grad = grads[k].copy()
        adam_step(store, state, lr=1e-2)
    want = oracle_adam(init, grad_seq, lr=1e-2)
    for k in init:
        np.testing.assert_allclose(store[k].data, want[k], rtol=1e-12, atol=1e-15)


def test_adam_identical_stores_evolve_identically():
    rng = np.random.default_rng(4)
    init = {"w": rng.standard_normal((2, 2))}
    a, b = make_store(init), make_store(init)
    sa, sb = AdamState.for_store(a), AdamState.for_store(b)
    for _ in range(3):
        g = rng.standard_normal((2, 2))
        a["w"].grad, b["w"].grad = g.copy(), g.copy()
        adam_step(a, sa, 1e-3)
        adam_step(b, sb, 1e-3)
    np.testing.assert_array_equal(a["w"].data, b["w"].data)


def test_adam_updates_in_place():
    # shared storage (e.g. a learnable sampling matrix) must see the update
    store = make_store({"w": [1.0]})
    alias = store["w"].data
    state = AdamState.for_store(store)
    store["w"].grad = np.array([1.0])
    adam_step(store, state, 0.5)
    assert store["w"].data is alias


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

PATCH = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4) / 16.0


def test_augment_index_zero_is_identity():
    np.testing.assert_array_equal(augment(PATCH, 0), PATCH)


def test_augment_rot90_has_order_four():
    out = PATCH
    for _ in range(4):
        out = augment(out, 1)
    np.testing.assert_array_equal(out, PATCH)


def test_augment_flip_is_an_involution():
    np.testing.assert_array_equal(augment(augment(PATCH, 4), 4), PATCH)


def test_augment_rotations_compose():
    np.testing.assert_array_equal(augment(augment(PATCH, 1), 1), augment(PATCH, 2))
    np.testing.assert_array_equal(augment(augment(PATCH, 2), 1), augment(PATCH, 3))


def test_augment_outputs_pairwise_distinct():
    outs = [augment(PATCH, i) for i in range(8)]
    for i in range(8):
        for j in range(i + 1, 8):
            assert not np.array_equal(outs[i], outs[j]), (i, j)


@pytest.mark.parametrize("index", [-1, 8, 100])
def test_augment_index_out_of_range(index):
    with pytest.raises(ConfigurationError):
        augment(PATCH, index)


def test_augment_tensor_passthrough():
    out = augment(Tensor(PATCH), 5)
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, augment(PATCH, 5))
    assert out.data.flags["C_CONTIGUOUS"]


# ---------------------------------------------------------------------------
# schedule and configuration
# ---------------------------------------------------------------------------


def test_lr_schedule_decays_at_the_configured_points():
    cfg = TrainConfig(steps=12, lr=1e-4, lr_decay_points=(3, 7))
    assert lr_at(cfg, 0) == 1e-4
    assert lr_at(cfg, 2) == 1e-4
    assert lr_at(cfg, 3) == lr_at(cfg, 2) * 0.1
    assert lr_at(cfg, 6) == lr_at(cfg, 3)
    assert lr_at(cfg, 7) == lr_at(cfg, 6) * 0.1
    assert lr_at(cfg, 11) == lr_at(cfg, 7)


def test_lr_schedule_without_points_is_constant():
    cfg = TrainConfig(lr=5e-3)
    assert all(lr_at(cfg, s) == 5e-3 for s in range(10))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"batch_size": 0},
        {"steps": 0},
        {"patch": 0},
        {"lr": 0.0},
        {"lr": -1e-4},
        {"lr_decay_points": (5, 5)},
        {"lr_decay_points": (7, 3)},
        {"lr_decay_factor": 0.0},
        {"sigma_train": -1.0},
        {"gamma": 0.0},
        {"gamma": 1.5},
        {"dtype": "float16"},
    ],
)
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_config_hash_is_stable_and_sensitive():
    mc = ModelConfig(architecture="prl", C=4, D=4, K=2)
    tc = TrainConfig(steps=10)
    assert config_hash(mc, tc) == config_hash(
        ModelConfig(architecture="prl", C=4, D=4, K=2), TrainConfig(steps=10)
    )
    assert config_hash(mc, tc) != config_hash(mc, TrainConfig(steps=11))
    assert config_hash(mc, tc) != config_hash(
        ModelConfig(architecture="prl", C=8, D=4, K=2), tc
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def tiny_configs(**train_kw):
    mc = ModelConfig(architecture="plain-id", C=4, D=1, K=1, B=4)
    defaults = dict(batch_size=2, patch=8, steps=4, lr=1e-3, gamma=0.5)
    defaults.update(train_kw)
    return mc, TrainConfig(**defaults)


def random_checkpoint(step=5):
    mc, tc = tiny_configs()
    store = init_params(mc, seed=0)
    rng = np.random.default_rng(9)
    params = {k: rng.standard_normal(t.shape) for k, t in store.items()}
    m = {k: rng.standard_normal(t.shape) for k, t in store.items()}
    v = {k: rng.random(t.shape) for k, t in store.items()}
    history = [(s + 1, float(rng.random()), 1e-3) for s in range(step)]
    return Checkpoint(mc, tc, params, m, v, step, history)


def test_checkpoint_roundtrip_preserves_everything(tmp_path):
    path = str(tmp_path / "run.ckpt")
    ckpt = random_checkpoint()
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path, ckpt.model_config, ckpt.train_config)
    assert back.step == ckpt.step
    assert back.history == ckpt.history
    assert sorted(back.params) == sorted(ckpt.params)
    for k in ckpt.params:
        np.testing.assert_array_equal(back.params[k], ckpt.params[k])
        np.testing.assert_array_equal(back.m[k], ckpt.m[k])
        np.testing.assert_array_equal(back.v[k], ckpt.v[k])


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(p1, random_checkpoint())
    save_checkpoint(p2, load_checkpoint(p1))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt.json").read_text() == (tmp_path / "b.ckpt.json").read_text()


def test_checkpoint_reads_configs_from_sidecar(tmp_path):
    path = str(tmp_path / "run.ckpt")
    ckpt = random_checkpoint()
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.model_config == ckpt.model_config
    assert back.train_config == ckpt.train_config


def test_checkpoint_missing_sidecar(tmp_path):
    path = str(tmp_path / "run.ckpt")
    save_checkpoint(path, random_checkpoint())
    (tmp_path / "run.ckpt.json").unlink()
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_rejects_corruption(tmp_path):
    path = str(tmp_path / "run.ckpt")
    ckpt = random_checkpoint()
    save_checkpoint(path, ckpt)
    blob = bytearray((tmp_path / "run.ckpt").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (tmp_path / "run.ckpt").write_bytes(bytes(blob))
    with pytest.raises(DataError):
        load_checkpoint(path, ckpt.model_config, ckpt.train_config)


def test_checkpoint_rejects_truncation_and_bad_magic(tmp_path):
    path = str(tmp_path / "run.ckpt")
    ckpt = random_checkpoint()
    save_checkpoint(path, ckpt)
    blob = (tmp_path / "run.ckpt").read_bytes()
    (tmp_path / "run.ckpt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataError):
        load_checkpoint(path, ckpt.model_config, ckpt.train_config)
    (tmp_path / "run.ckpt").write_bytes(b"JUNK" + blob[4:])
    with pytest.raises(DataError):
        load_checkpoint(path, ckpt.model_config, ckpt.train_config)


def test_checkpoint_rejects_mismatched_config(tmp_path):
    path = str(tmp_path / "run.ckpt")
    ckpt = random_checkpoint()
    save_checkpoint(path, ckpt)
    mc, tc = tiny_configs(lr=9e-3)
    with pytest.raises(DataError):
        load_checkpoint(path, mc, tc)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


def test_train_smoke_and_determinism(dataset, tmp_path):
    mc, tc = tiny_configs(steps=4, lr_decay_points=(2,))
    hist1 = train(mc, tc, dataset)
    hist2 = train(mc, tc, dataset)
    assert hist1 == hist2
    assert [h[0] for h in hist1] == [1, 2, 3, 4]
    assert all(np.isfinite(h[1]) and h[1] > 0 for h in hist1)
    assert [h[2] for h in hist1] == [lr_at(tc, s) for s in range(4)]


def test_train_final_checkpoints_are_byte_identical(dataset, tmp_path):
    mc, tc = tiny_configs(steps=3)
    train(mc, tc, dataset, out_checkpoint=str(tmp_path / "a.ckpt"))
    train(mc, tc, dataset, out_checkpoint=str(tmp_path / "b.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_train_resume_matches_uninterrupted_history(dataset, tmp_path, dtype):
    class Interrupted(RuntimeError):
        pass

    mc, tc = tiny_configs(steps=6, checkpoint_every=3, dtype=dtype)
    full = train(mc, tc, dataset, out_checkpoint=str(tmp_path / "full.ckpt"))

    def stop_after_four(step, loss, lr):
        if step == 4:
            raise Interrupted

    with pytest.raises(Interrupted):
        train(mc, tc, dataset, out_checkpoint=str(tmp_path / "part.ckpt"),
              on_step=stop_after_four)
    resumed = train(mc, tc, dataset, out_checkpoint=str(tmp_path / "part.ckpt"),
                    resume=str(tmp_path / "part.ckpt"))
    assert resumed == full
    assert (tmp_path / "part.ckpt").read_bytes() == (tmp_path / "full.ckpt").read_bytes()


def test_train_restore_model_reproduces_outputs(dataset, tmp_path):
    mc, tc = tiny_configs(steps=3)
    path = str(tmp_path / "run.ckpt")
    train(mc, tc, dataset, out_checkpoint=path)
    mc2, tc2, store = restore_model(path)
    assert (mc2, tc2) == (mc, tc)
    op = generate_operator(mc.B, tc.gamma, tc.seed)
    x = Tensor(np.random.default_rng(0).random((1, 1, 8, 8)))
    y = sample(op, x)
    out1 = model_forward(mc, store, op, y)
    out2 = model_forward(mc2, restore_model(path)[2], op, y)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_train_learnable_operator_is_optimized(dataset):
    mc, tc = tiny_configs(steps=3)
    op = generate_operator(mc.B, tc.gamma, tc.seed)
    op.learnable = True
    before = op.A.copy()
    train(mc, tc, dataset, op=op)
    assert not np.array_equal(op.A, before)
    assert np.isfinite(op.A).all()


def test_train_rejects_patch_not_divisible_by_block(dataset):
    mc, tc = tiny_configs(patch=10)
    with pytest.raises(ConfigurationError):
        train(mc, tc, dataset)


def test_train_empty_dataset(tmp_path):
    (tmp_path / "empty").mkdir()
    mc, tc = tiny_configs()
    with pytest.raises(DataError):
        train(mc, tc, str(tmp_path / "empty"))


def test_train_all_images_smaller_than_patch(dataset):
    mc, tc = tiny_configs(patch=64)
    with pytest.raises(DataError):
        train(mc, tc, dataset)


def test_train_aborts_on_divergence(dataset):
    # an absurd gradient-step size overflows the forward pass within a few
    # steps; the loop must stop with a diagnostic instead of logging inf
    mc = ModelConfig(architecture="plain-id", C=4, D=1, K=2, B=4, rho=1e200)
    tc = TrainConfig(batch_size=2, patch=8, steps=8, lr=1e-3, gamma=0.5)
    with pytest.raises(NumericError):
        train(mc, tc, dataset)


def test_train_single_image_overfit(tmp_path):
    # regression: a one-stage model fitted to a single image must cut the
    # training loss below 10% of its starting value within 500 steps
    root = tmp_path / "one"
    root.mkdir()
    save_image(str(root / "img.pgm"), texture(np.random.default_rng(11), 64))
    mc = ModelConfig(architecture="prl", framework="pgd", C=4, D=4, K=1, B=32)
    tc = TrainConfig(batch_size=4, patch=64, steps=500, lr=1e-4, gamma=0.3,
                     seed=0, dtype="float32")
    history = train(mc, tc, str(root))
    assert history[-1][1] < 0.1 * history[0][1]
