"""Sampling physics: orthogonality, adjointness, projections, FD lifting, formats."""

import numpy as np
import pytest

from unrollcs.errors import ConfigurationError, DataError, DimensionError
from unrollcs.physics import (
    Measurement,
    SamplingOperator,
    adjoint,
    compute_m,
    fd_adjoint,
    fd_forward,
    fd_project_null,
    generate_operator,
    load_measurement,
    load_operator,
    onebit_sample,
    pad_to_block,
    crop_to,
    project_null,
    project_range,
    sample,
    save_measurement,
    save_operator,
)
from unrollcs.tensor import Tensor, grad_check

# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def oracle_sample(x, A, B):
    """Per-block dense multiply with explicit loops (independent layout oracle)."""
    n, c, h, w = x.shape
    m = A.shape[0]
    hb, wb = h // B, w // B
    y = np.zeros((n, c * m, hb, wb))
    for ni in range(n):
        for ci in range(c):
            for i in range(hb):
                for j in range(wb):
                    block = x[ni, ci, i * B : (i + 1) * B, j * B : (j + 1) * B]
                    y[ni, ci * m : (ci + 1) * m, i, j] = A @ block.reshape(-1)
    return y


def oracle_adjoint(y, A, B):
    m = A.shape[0]
    n, cm, hb, wb = y.shape
    c = cm // m
    x = np.zeros((n, c, hb * B, wb * B))
    for ni in range(n):
        for ci in range(c):
            for i in range(hb):
                for j in range(wb):
                    block = A.T @ y[ni, ci * m : (ci + 1) * m, i, j]
                    x[ni, ci, i * B : (i + 1) * B, j * B : (j + 1) * B] = block.reshape(B, B)
    return x


def selector_operator(B=2, rows=((1, 0, 0, 0), (0, 1, 0, 0))):
    a = np.array(rows, dtype=np.float64)
    return SamplingOperator(A=a, B=B, M=a.shape[0], N=B * B, gamma=a.shape[0] / (B * B), seed=0)


# ---------------------------------------------------------------------------
# operator generation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("B", [2, 8, 32])
@pytest.mark.parametrize("gamma", [0.1, 0.25, 0.5, 1.0])
def test_row_orthonormality(B, gamma):
    op = generate_operator(B, gamma, seed=123)
    assert op.orthogonality_defect() < 1e-10


def test_square_operator_fully_orthogonal():
    op = generate_operator(2, 1.0, seed=5)
    assert np.abs(op.A @ op.A.T - np.eye(4)).max() < 1e-10
    assert np.abs(op.A.T @ op.A - np.eye(4)).max() < 1e-10


def test_measurement_count_formula():
    assert compute_m(32, 0.10) == 102  # round(102.4)
    assert compute_m(32, 0.25) == 256
    assert compute_m(2, 0.10) == 1  # clamped to at least one row
    op = generate_operator(32, 0.10, seed=0)
    assert (op.M, op.N) == (102, 1024)


def test_generation_is_deterministic():
    a = generate_operator(8, 0.3, seed=77)
    b = generate_operator(8, 0.3, seed=77)
    assert np.array_equal(a.A, b.A)
    c = generate_operator(8, 0.3, seed=78)
    assert not np.array_equal(a.A, c.A)


@pytest.mark.parametrize("gamma", [0.0, -0.1, 1.2])
def test_invalid_ratio_rejected(gamma):
    with pytest.raises(ConfigurationError):
        generate_operator(8, gamma, seed=0)


# ---------------------------------------------------------------------------
# sample / adjoint
# ---------------------------------------------------------------------------


def test_sample_selector_rows():
    op = selector_operator()
    x = np.array([[1.5, 2.5], [3.5, 4.5]]).reshape(1, 1, 2, 2)
    m = sample(op, x)
    np.testing.assert_array_equal(m.y.data.ravel(), [1.5, 2.5])


def test_sample_zero_input():
    op = generate_operator(4, 0.5, seed=1)
    m = sample(op, np.zeros((1, 1, 8, 8)))
    assert np.all(m.y.data == 0.0)


def test_sample_matches_dense_oracle():
    rng = np.random.default_rng(8)
    op = generate_operator(4, 0.4, seed=3)
    x = rng.random((2, 1, 12, 8))
    got = sample(op, x).y.data
    np.testing.assert_allclose(got, oracle_sample(x, op.A, 4), atol=1e-12)


def test_adjoint_selector_rows():
    op = selector_operator()
    m = Measurement(y=Tensor(np.array([1.5, 2.5]).reshape(1, 2, 1, 1)))
    x = adjoint(op, m)
    np.testing.assert_array_equal(x.data[0, 0], [[1.5, 2.5], [0.0, 0.0]])


def test_adjoint_matches_dense_oracle():
    rng = np.random.default_rng(9)
    op = generate_operator(4, 0.6, seed=4)
    y = rng.standard_normal((1, op.M, 3, 2))
    got = adjoint(op, Tensor(y)).data
    np.testing.assert_allclose(got, oracle_adjoint(y, op.A, 4), atol=1e-12)


def test_sample_adjoint_inner_product_identity():
    rng = np.random.default_rng(10)
    for trial in range(10):
        op = generate_operator(4, rng.uniform(0.2, 1.0), seed=trial)
        x = rng.standard_normal((1, 1, 8, 8))
        y = rng.standard_normal((1, op.M, 2, 2))
        lhs = float((sample(op, x).y.data * y).sum())
        rhs = float((x * adjoint(op, Tensor(y)).data).sum())
        assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) < 1e-10


def test_adjoint_sample_idempotent():
    op = generate_operator(8, 0.3, seed=6)
    x = np.random.default_rng(0).random((1, 1, 16, 16))
    p1 = adjoint(op, sample(op, x)).data
    p2 = adjoint(op, sample(op, p1)).data
    np.testing.assert_allclose(p2, p1, atol=1e-10)


def test_sample_shape_errors():
    op = generate_operator(8, 0.5, seed=0)
    with pytest.raises(DimensionError):
        sample(op, np.zeros((1, 1, 12, 16)))  # 12 % 8 != 0
    with pytest.raises(DimensionError):
        sample(op, np.zeros((1, 2, 16, 16)))  # two channels
    with pytest.raises(DimensionError):
        adjoint(op, Tensor(np.zeros((1, 3, 2, 2))))  # wrong M


def test_noise_determinism_and_scale():
    op = generate_operator(8, 0.5, seed=0)
    x = np.full((1, 1, 64, 64), 0.5)
    a = sample(op, x, sigma=25.0, seed=42).y.data
    b = sample(op, x, sigma=25.0, seed=42).y.data
    np.testing.assert_array_equal(a, b)
    clean = sample(op, x).y.data
    noise = a - clean
    assert abs(noise.std() - 25.0 / 255.0) < 0.01
    c = sample(op, x, sigma=25.0, seed=43).y.data
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# range / nullspace projections
# ---------------------------------------------------------------------------


def test_projection_identity_many_images():
    rng = np.random.default_rng(11)
    op = generate_operator(8, 0.3, seed=7)
    for _ in range(100):
        x = rng.random((1, 1, 16, 16))
        resid = x - (project_range(op, x).data + project_null(op, x).data)
        assert np.abs(resid).max() < 1e-12


def test_nullspace_maps_to_zero():
    rng = np.random.default_rng(12)
    op = generate_operator(8, 0.3, seed=8)
    x = rng.random((2, 1, 16, 16))
    xn = project_null(op, x)
    assert np.abs(sample(op, xn).y.data).max() < 1e-10


def test_range_projection_idempotent_vs_dense_oracle():
    rng = np.random.default_rng(13)
    op = generate_operator(4, 0.5, seed=9)
    x = rng.random((1, 1, 8, 8))
    p = project_range(op, x).data
    pp = project_range(op, p).data
    np.testing.assert_allclose(pp, p, atol=1e-10)
    # dense oracle: per-block AᵀA multiply
    want = oracle_adjoint(oracle_sample(x, op.A, 4), op.A, 4)
    np.testing.assert_allclose(p, want, atol=1e-12)


# ---------------------------------------------------------------------------
# feature-domain operators
# ---------------------------------------------------------------------------


def test_fd_forward_single_channel_equals_sample():
    rng = np.random.default_rng(14)
    op = generate_operator(4, 0.4, seed=10)
    x = rng.random((1, 1, 8, 8))
    np.testing.assert_allclose(
        fd_forward(op, x, r=1).data, sample(op, x).y.data, atol=1e-12
    )


@pytest.mark.parametrize("r", [1, 2, 4])
@pytest.mark.parametrize("d", [1, 4])
def test_fd_adjointness(r, d):
    rng = np.random.default_rng(100 * r + d)
    op = generate_operator(4, 0.5, seed=r)
    h = w = 16
    X = rng.standard_normal((2, r * r * d, h // r, w // r))
    Y = rng.standard_normal((2, d * op.M, h // 4, w // 4))
    lhs = float((fd_forward(op, X, r).data * Y).sum())
    rhs = float((X * fd_adjoint(op, Tensor(Y), r).data).sum())
    assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) < 1e-10


def test_fd_forward_equals_independent_channels():
    rng = np.random.default_rng(15)
    op = generate_operator(4, 0.3, seed=11)
    d, r = 3, 2
    X = rng.standard_normal((1, r * r * d, 8, 8))
    got = fd_forward(op, X, r).data
    # oracle: shuffle to D full-resolution channels, sample each alone
    from unrollcs.tensor import pixel_shuffle

    full = pixel_shuffle(Tensor(X), r).data
    for ch in range(d):
        one = sample(op, full[:, ch : ch + 1]).y.data
        np.testing.assert_allclose(got[:, ch * op.M : (ch + 1) * op.M], one[:, :], atol=1e-12)


def test_fd_roundtrip_is_channelwise_range_projection():
    rng = np.random.default_rng(16)
    op = generate_operator(4, 0.5, seed=12)
    d, r = 2, 2
    X = rng.standard_normal((1, r * r * d, 8, 8))
    got = fd_adjoint(op, fd_forward(op, X, r), r).data
    from unrollcs.tensor import pixel_shuffle, pixel_unshuffle

    full = pixel_shuffle(Tensor(X), r).data
    per_ch = np.concatenate(
        [project_range(op, full[:, c : c + 1]).data for c in range(d)], axis=1
    )
    want = pixel_unshuffle(Tensor(per_ch), r).data
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_fd_nullspace_projection():
    op = generate_operator(4, 0.5, seed=13)
    X = np.random.default_rng(17).standard_normal((1, 8, 8, 8))
    Xn = fd_project_null(op, X, r=2)
    assert np.abs(fd_forward(op, Xn, r=2).data).max() < 1e-10


def test_fd_gradients_flow():
    op = generate_operator(2, 0.5, seed=14)
    x0 = np.random.default_rng(18).standard_normal((1, 4, 3, 3))
    assert grad_check(lambda t: (fd_forward(op, t, 2) * 1.5).sum(), x0).passed
    y0 = np.random.default_rng(19).standard_normal((1, 2 * op.M, 3, 3))
    assert grad_check(lambda t: fd_adjoint(op, t, 2).sigmoid().sum(), y0).passed


# ---------------------------------------------------------------------------
# one-bit acquisition
# ---------------------------------------------------------------------------


def test_onebit_sign_convention():
    op = SamplingOperator(
        A=np.eye(4)[:3], B=2, M=3, N=4, gamma=0.75, seed=0
    )  # selector rows pass block entries through
    x = np.array([0.3, -0.1, 0.0, 9.9]).reshape(1, 1, 2, 2)
    m = onebit_sample(op, x)
    assert m.onebit
    np.testing.assert_array_equal(m.y.data.ravel(), [1.0, -1.0, 1.0])


def test_onebit_values_are_binary():
    op = generate_operator(8, 0.4, seed=15)
    x = np.random.default_rng(20).random((1, 1, 16, 16))
    vals = np.unique(onebit_sample(op, x).y.data)
    assert set(vals).issubset({-1.0, 1.0})


def test_onebit_gradient_equals_linear_branch():
    op = generate_operator(4, 0.5, seed=16)
    x0 = np.random.default_rng(21).random((1, 1, 8, 8))
    xa = Tensor(x0, requires_grad=True)
    onebit_sample(op, xa).y.sum().backward()
    xb = Tensor(x0, requires_grad=True)
    sample(op, xb).y.sum().backward()
    np.testing.assert_array_equal(xa.grad, xb.grad)


def test_onebit_scale_invariant():
    op = generate_operator(4, 0.5, seed=17)
    x = np.random.default_rng(22).standard_normal((1, 1, 8, 8))
    a = onebit_sample(op, x).y.data
    b = onebit_sample(op, 2.0 * x).y.data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# learnable A
# ---------------------------------------------------------------------------


def test_learnable_gradient_matches_finite_differences():
    op = generate_operator(2, 0.5, seed=18)
    op.learnable = True
    x = np.random.default_rng(23).random((1, 1, 4, 4))

    a0 = op.A.copy()

    def f(avals):
        op2 = SamplingOperator(A=avals.reshape(op.M, op.N), B=2, M=op.M, N=op.N,
                               gamma=op.gamma, seed=0)
        return float(np.sum(sample(op2, x).y.data ** 2))

    param = op.parameter()
    loss = sample(op, x).y
    (loss * loss).sum().backward()
    h = 1e-6
    for idx in range(param.size):
        av = a0.ravel().copy()
        av[idx] += h
        fp = f(av)
        av[idx] -= 2 * h
        fm = f(av)
        num = (fp - fm) / (2 * h)
        assert abs(param.grad.ravel()[idx] - num) < 1e-5


# ---------------------------------------------------------------------------
# padding helpers
# ---------------------------------------------------------------------------


def test_pad_and_crop_roundtrip():
    x = np.random.default_rng(24).random((1, 1, 30, 21))
    padded, (h, w) = pad_to_block(x, 8)
    assert padded.shape[-2] % 8 == 0 and padded.shape[-1] % 8 == 0
    np.testing.assert_array_equal(crop_to(padded, h, w), x)
    same, _ = pad_to_block(x[..., :24, :16], 8)
    assert same.shape == (1, 1, 24, 16)


# ---------------------------------------------------------------------------
# binary containers
# ---------------------------------------------------------------------------


def test_operator_file_roundtrip(tmp_path):
    op = generate_operator(8, 0.25, seed=99)
    p = tmp_path / "op.csop"
    save_operator(op, str(p))
    loaded = load_operator(str(p))
    assert (loaded.B, loaded.M, loaded.N, loaded.seed) == (8, op.M, 64, 99)
    np.testing.assert_array_equal(loaded.A, op.A)
    save_operator(loaded, str(tmp_path / "op2.csop"))
    assert (tmp_path / "op.csop").read_bytes() == (tmp_path / "op2.csop").read_bytes()


def test_operator_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad.csop"
    p.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(DataError):
        load_operator(str(p))


def test_measurement_file_roundtrip(tmp_path):
    op = generate_operator(4, 0.5, seed=1)
    m = sample(op, np.random.default_rng(25).random((2, 1, 8, 8)), sigma=10.0, seed=3)
    p = tmp_path / "m.csms"
    save_measurement(m, str(p))
    loaded = load_measurement(str(p))
    assert loaded.sigma == 10.0 and not loaded.onebit
    np.testing.assert_array_equal(loaded.y.data, m.y.data)
