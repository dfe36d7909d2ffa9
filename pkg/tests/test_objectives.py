import math

import numpy as np
import pytest

from xego import ndmath as nd
from xego import objectives as obj
from xego.errors import DomainError


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def cecl_reference(u, mask, t, b):
    """Scalar double-loop oracle: -(1/n) sum_ij log sigmoid(m_ij (t u_i.u_j - b))."""
    n = u.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            z = mask[i, j] * (t * float(np.dot(u[i], u[j])) - b)
            total += math.log1p(math.exp(-z)) if z > -30 else -z
    return total / n


def _unit_rows(rng, n, d):
    u = rng.normal(size=(n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _block_mask(groups):
    """+1 iff same group id, else -1."""
    g = np.asarray(groups)
    return np.where(g[:, None] == g[None, :], 1, -1)


def test_single_positive_at_init():
    # One segment paired with itself: u.u = 1, loss = -log sigmoid(t - b).
    params = obj.ContrastiveParams.create()
    u = nd.tensor([[1.0, 0.0]])
    loss = obj.cecl_loss(u, np.array([[1]]), params)
    expected = -math.log(_sigmoid(10.0 - (-3.0)))
    assert loss.item() == pytest.approx(expected, rel=1e-9)
    assert loss.item() == pytest.approx(2.2603e-6, rel=1e-3)


def test_orthogonal_all_negative_at_init():
    # Off-diagonal orthogonal pairs at init each cost -log sigmoid(-3).
    params = obj.ContrastiveParams.create()
    u = nd.tensor(np.eye(3))
    mask = np.full((3, 3), -1)
    np.fill_diagonal(mask, 1)
    loss = obj.cecl_loss(u, mask, params)
    per_neg = -math.log(_sigmoid(-3.0))
    assert per_neg == pytest.approx(3.0485873, rel=1e-6)
    per_pos = -math.log(_sigmoid(13.0))
    expected = (6 * per_neg + 3 * per_pos) / 3
    assert loss.item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_matches_double_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    u = _unit_rows(rng, n, 8)
    groups = rng.integers(0, 3, size=n)
    mask = _block_mask(groups)
    t0 = float(rng.uniform(0.5, 12.0))
    b0 = float(rng.uniform(-5.0, 2.0))
    params = obj.ContrastiveParams.create(t_init=t0, b_init=b0)
    loss = obj.cecl_loss(nd.tensor(u), mask, params)
    ref = cecl_reference(u, mask, t0, b0)
    assert loss.item() == pytest.approx(ref, rel=1e-12)


def test_permutation_symmetry():
    rng = np.random.default_rng(42)
    u = _unit_rows(rng, 10, 6)
    mask = _block_mask(rng.integers(0, 2, size=10))
    params = obj.ContrastiveParams.create()
    base = obj.cecl_loss(nd.tensor(u), mask, params).item()
    perm = rng.permutation(10)
    permuted = obj.cecl_loss(nd.tensor(u[perm]), mask[np.ix_(perm, perm)], params).item()
    assert permuted == pytest.approx(base, rel=1e-12)


def test_monotonic_response_to_similarity():
    # Raising similarity for a positive pair lowers the loss; for a negative
    # pair it raises it. Probe with two 2-d unit vectors at varying angle.
    params = obj.ContrastiveParams.create()

    def loss_at(angle, sign):
        u = np.array([[1.0, 0.0], [math.cos(angle), math.sin(angle)]])
        mask = np.array([[1, sign], [sign, 1]])
        return obj.cecl_loss(nd.tensor(u), mask, params).item()

    angles = [2.0, 1.5, 1.0, 0.5, 0.1]  # decreasing angle -> increasing u.u
    pos_losses = [loss_at(a, +1) for a in angles]
    assert all(x > y for x, y in zip(pos_losses, pos_losses[1:]))
    neg_losses = [loss_at(a, -1) for a in angles]
    assert all(x < y for x, y in zip(neg_losses, neg_losses[1:]))


def test_rejects_non_unit_rows():
    params = obj.ContrastiveParams.create()
    u = nd.tensor([[2.0, 0.0]])
    with pytest.raises(DomainError):
        obj.cecl_loss(u, np.array([[1]]), params)


def test_gradients_flow_to_u_t_b():
    rng = np.random.default_rng(3)
    u_data = _unit_rows(rng, 6, 4)
    mask = _block_mask([0, 0, 0, 1, 1, 1])
    params = obj.ContrastiveParams.create()
    u = nd.tensor(u_data)
    with nd.Tape() as tape:
        loss = obj.cecl_loss(u, mask, params)
        tape.backward(loss)
    assert u.grad is not None and np.any(u.grad != 0)
    assert params.t_log.grad is not None
    assert params.b.grad is not None


def test_cecl_grad_check():
    rng = np.random.default_rng(9)
    raw = nd.tensor(rng.normal(size=(5, 4)))
    mask = _block_mask([0, 0, 1, 1, 1])
    params = obj.ContrastiveParams.create(t_init=4.0, b_init=-1.0)

    def f():
        u = nd.l2_normalize_rows(raw)
        return obj.cecl_loss(u, mask, params)

    err = nd.grad_check(f, [raw, params.t_log, params.b])
    assert err < 1e-6


# ---------------------------------------------------------------------------
# bias init

def test_init_bias_paper_mode_batch32():
    b0 = obj.init_bias("paper", (32, 1))
    assert b0 == pytest.approx(math.log(1 / 31), abs=1e-12)
    assert b0 == pytest.approx(-3.4340, abs=1e-4)


def test_init_bias_exact_mode():
    b0 = obj.init_bias("exact", (6, 5))
    assert b0 == pytest.approx(math.log(1 / 5), abs=1e-12)
    assert b0 == pytest.approx(-1.609, abs=1e-3)


def test_init_bias_two_rows():
    assert obj.init_bias("paper", (2, 1)) == pytest.approx(0.0, abs=1e-15)


def test_init_bias_bad_mode():
    with pytest.raises(DomainError):
        obj.init_bias("other", (4, 4))


# ---------------------------------------------------------------------------
# BCE

def test_bce_zero_logits():
    logits = nd.tensor(np.zeros((5, 23)))
    y = np.random.default_rng(0).integers(0, 2, size=(5, 23))
    loss = obj.bce_loss(logits, y)
    assert loss.item() == pytest.approx(23 * math.log(2.0), rel=1e-12)
    assert loss.item() == pytest.approx(15.942, abs=1e-3)


def test_bce_saturated_correct_logit():
    logits = nd.tensor(np.full((1, 1), 50.0))
    loss = obj.bce_loss(logits, np.array([[1]]))
    assert loss.item() == pytest.approx(0.0, abs=1e-20)
    assert math.isfinite(loss.item())


def test_bce_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(scale=3.0, size=(4, 23))
    y = rng.integers(0, 2, size=(4, 23))
    loss = obj.bce_loss(nd.tensor(logits), y)

    total = 0.0
    for i in range(4):
        for j in range(23):
            p = 1.0 / (1.0 + math.exp(-logits[i, j]))
            p = min(max(p, 1e-300), 1 - 1e-16)
            total += -(y[i, j] * math.log(p) + (1 - y[i, j]) * math.log(1.0 - p))
    ref = total / 4
    assert loss.item() == pytest.approx(ref, rel=1e-9)


def test_bce_rejects_non_binary():
    with pytest.raises(DomainError):
        obj.bce_loss(nd.tensor(np.zeros((1, 2))), np.array([[0.5, 1.0]]))


def test_bce_grad_check():
    rng = np.random.default_rng(8)
    logits = nd.tensor(rng.normal(size=(3, 5)))
    y = rng.integers(0, 2, size=(3, 5))

    def f():
        return obj.bce_loss(logits, y)

    assert nd.grad_check(f, [logits]) < 1e-6


# ---------------------------------------------------------------------------
# combined

def test_total_loss_lambda_zero_is_bce():
    bce = nd.tensor(3.0)
    assert obj.total_loss(None, bce, 0.0) is bce


def test_total_loss_weighted_sum():
    out = obj.total_loss(nd.tensor(2.0), nd.tensor(3.0), 1.0)
    assert out.item() == pytest.approx(5.0)
    out = obj.total_loss(nd.tensor(2.0), nd.tensor(3.0), 0.25)
    assert out.item() == pytest.approx(3.5)


def test_total_loss_rejects_negative_lambda():
    with pytest.raises(DomainError):
        obj.total_loss(nd.tensor(1.0), nd.tensor(1.0), -1.0)


def test_total_loss_gradient_splits_linearly():
    # d total / d shared = lam * d cecl + d bce, checked by finite differences
    # through a shared parameter feeding both terms.
    rng = np.random.default_rng(11)
    raw = nd.tensor(rng.normal(size=(4, 3)))
    w = nd.tensor(rng.normal(size=(3, 5)))
    mask = _block_mask([0, 0, 1, 1])
    y = rng.integers(0, 2, size=(4, 5))
    params = obj.ContrastiveParams.create(t_init=3.0, b_init=-1.0)
    lam = 0.7

    def f():
        u = nd.l2_normalize_rows(raw)
        cecl = obj.cecl_loss(u, mask, params)
        logits = nd.matmul(raw, w)
        bce = obj.bce_loss(logits, y)
        return obj.total_loss(cecl, bce, lam)

    assert nd.grad_check(f, [raw, w, params.t_log, params.b]) < 1e-5
