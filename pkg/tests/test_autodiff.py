"""Autodiff core: independent oracles first, then gradient checks.

Oracles are written without reusing any library internals: convolution is a
naive quintuple loop, cross-entropy is a per-pixel softmax sum, and every
gradient is checked against central finite differences.
"""

import numpy as np
import numpy.testing as npt
import pytest

from fedsegsim import autodiff as ad
from fedsegsim.errors import ContractError, DimensionError, NumericFaultError, TapeError


def setup_function(_):
    ad.reset_tape()


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def conv2d_oracle(x, w, stride=1, padding=0):
    """Naive sliding-window cross-correlation, quintuple loop."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, co, i, j] = (patch * w[co]).sum()
    return out


def cross_entropy_oracle(logits, target, ignore_label=-1):
    """Per-pixel softmax + NLL, mean over non-ignored pixels."""
    n, c, h, w = logits.shape
    total, count = 0.0, 0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                t = target[b, i, j]
                if t == ignore_label:
                    continue
                row = logits[b, :, i, j]
                row = row - row.max()
                total += np.log(np.exp(row).sum()) - row[t]
                count += 1
    return total / count if count else 0.0


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar-valued f at x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_grad(build_loss, params, seeds_note="", tol=1e-4):
    """Backprop grad vs central differences for every param, rel err <= tol."""
    ad.reset_tape()
    loss = build_loss()
    ad.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, analytic):
        def f(p=p):
            ad.reset_tape()
            with ad.no_grad():
                return float(build_loss().data)
        num = numeric_grad(f, p.data)
        assert rel_err(g, num) <= tol, f"grad mismatch {seeds_note}: {rel_err(g, num):.3e}"
    ad.reset_tape()


# ---------------------------------------------------------------------------
# Forward-pass oracle equivalence
# ---------------------------------------------------------------------------


def test_conv2d_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for stride, padding, kh in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 2, 5), (1, 2, 5)]:
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, kh, kh))
        got = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=stride, padding=padding)
        want = conv2d_oracle(x, w, stride=stride, padding=padding)
        assert got.data.shape == want.shape
        npt.assert_allclose(got.data, want, rtol=0, atol=1e-12)


def test_conv2d_output_shape_floor_rule():
    x = ad.Tensor(np.zeros((1, 1, 7, 7)))
    w = ad.Tensor(np.zeros((1, 1, 3, 3)))
    out = ad.conv2d(x, w, stride=2, padding=1)
    assert out.data.shape == (1, 1, 4, 4)  # floor((7+2-3)/2)+1


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((2, 5, 4, 4))
    target = rng.integers(0, 5, size=(2, 4, 4))
    target[0, 0, 0] = -1  # ignored pixel
    got = ad.softmax_cross_entropy(ad.Tensor(logits), target, ignore_label=-1)
    want = cross_entropy_oracle(logits, target, ignore_label=-1)
    assert abs(got.item() - want) <= 1e-10


def test_cross_entropy_all_ignored_is_zero():
    logits = ad.Tensor(np.random.default_rng(2).standard_normal((1, 3, 2, 2)), requires_grad=True)
    target = np.full((1, 2, 2), -1)
    loss = ad.softmax_cross_entropy(logits, target)
    assert loss.item() == 0.0
    ad.backward(loss)
    npt.assert_array_equal(logits.grad, 0.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = ad.Tensor(rng.standard_normal((4, 7)) * 50)
        s = ad.softmax(x, axis=-1)
        npt.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(s.data >= 0)


def test_kl_of_identical_logits_is_zero():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 6))
    kl = ad.kl_divergence(ad.Tensor(x), ad.Tensor(x.copy()), axis=1)
    assert abs(kl.item()) <= 1e-14


def test_kl_is_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = ad.Tensor(rng.standard_normal((2, 8)))
        q = ad.Tensor(rng.standard_normal((2, 8)))
        assert ad.kl_divergence(p, q, axis=1).item() >= -1e-15


def test_bce_matches_closed_form():
    p = ad.Tensor(np.array([0.2, 0.9]))
    t = np.array([0.0, 1.0])
    want = -(np.log(0.8) + np.log(0.9)) / 2
    assert abs(ad.binary_cross_entropy(p, t).item() - want) <= 1e-12


def test_info_nce_matches_manual_softmax():
    rng = np.random.default_rng(6)
    k, tau = 5, 0.05
    a = rng.standard_normal(k)
    a /= np.linalg.norm(a)
    pos = rng.standard_normal((3, k))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    neg = rng.standard_normal((4, k))
    neg /= np.linalg.norm(neg, axis=1, keepdims=True)
    want = 0.0
    for i in range(3):
        sims = np.concatenate([[pos[i] @ a], neg @ a]) / tau
        want += -sims[0] + np.log(np.exp(sims - sims.max()).sum()) + sims.max()
    want /= 3
    got = ad.info_nce(ad.Tensor(a), ad.Tensor(pos), ad.Tensor(neg), tau)
    assert abs(got.item() - want) <= 1e-10


def test_info_nce_no_negatives_is_zero():
    a = ad.Tensor(np.array([1.0, 0.0]))
    pos = ad.Tensor(np.array([[0.6, 0.8]]))
    neg = ad.Tensor(np.zeros((0, 2)))
    assert ad.info_nce(a, pos, neg, 0.05).item() == pytest.approx(0.0)


def test_soft_cross_entropy_equals_upsampled_hard_ce():
    # Block-histogram targets at feature resolution reproduce the full-res
    # loss of nearest-upsampled logits exactly.
    rng = np.random.default_rng(8)
    n, c, h, w, f = 2, 4, 3, 3, 4
    logits = rng.standard_normal((n, c, h, w))
    target = rng.integers(0, c, size=(n, h * f, w * f))
    hist = np.zeros((n, c, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                block = target[b, i * f : (i + 1) * f, j * f : (j + 1) * f]
                for cls in range(c):
                    hist[b, cls, i, j] = (block == cls).sum() / (f * f)
    lt = ad.Tensor(logits, requires_grad=True)
    soft = ad.softmax_cross_entropy_soft(lt, hist)
    hard = ad.softmax_cross_entropy(ad.upsample_nearest(ad.Tensor(logits), f), target)
    assert abs(soft.item() - hard.item()) <= 1e-12


def test_soft_cross_entropy_one_hot_matches_hard():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((2, 3, 4, 4))
    target = rng.integers(0, 3, size=(2, 4, 4))
    onehot = np.zeros((2, 3, 4, 4))
    for cls in range(3):
        onehot[:, cls][target == cls] = 1.0
    soft = ad.softmax_cross_entropy_soft(ad.Tensor(logits), onehot)
    hard = ad.softmax_cross_entropy(ad.Tensor(logits), target)
    assert abs(soft.item() - hard.item()) <= 1e-12


def test_upsample_factor_composes():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 2, 3, 3))
    a = ad.upsample_nearest(ad.Tensor(x), 4)
    b = ad.upsample_nearest2x(ad.upsample_nearest2x(ad.Tensor(x)))
    npt.assert_array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# Gradient checks (central differences, eps=1e-5, rel err <= 1e-4, >=20 seeds)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_elementwise_chain(seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    def loss():
        z = ad.relu(x * y + x)
        return ad.tensor_sum(ad.sigmoid(z) * z)

    check_grad(loss, [x, y], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_matmul_broadcast(seed):
    rng = np.random.default_rng(100 + seed)
    a = ad.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    c = ad.Tensor(rng.standard_normal((1, 2)), requires_grad=True)  # broadcast add

    def loss():
        return ad.tensor_sum(ad.sigmoid(ad.matmul(a, b) + c))

    check_grad(loss, [a, b, c], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_conv2d(seed):
    rng = np.random.default_rng(200 + seed)
    stride = 1 + seed % 2
    padding = seed % 3
    x = ad.Tensor(rng.standard_normal((2, 2, 6, 5)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)

    def loss():
        return ad.mean(ad.conv2d(x, w, stride=stride, padding=padding))

    check_grad(loss, [x, w], f"seed={seed} s={stride} p={padding}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_cross_entropy(seed):
    rng = np.random.default_rng(300 + seed)
    x = ad.Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
    target = rng.integers(0, 4, size=(2, 3, 3))
    target[rng.random(target.shape) < 0.2] = -1

    def loss():
        return ad.softmax_cross_entropy(x, target, ignore_label=-1)

    check_grad(loss, [x], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_soft_cross_entropy(seed):
    rng = np.random.default_rng(350 + seed)
    x = ad.Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    q = rng.random((2, 3, 2, 2))
    q /= q.sum(axis=1, keepdims=True)

    def loss():
        return ad.softmax_cross_entropy_soft(x, q)

    check_grad(loss, [x], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_kl_both_sides(seed):
    rng = np.random.default_rng(400 + seed)
    p = ad.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    q = ad.Tensor(rng.standard_normal((3, 5)), requires_grad=True)

    def loss():
        return ad.kl_divergence(p, q, axis=1)

    check_grad(loss, [p, q], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_info_nce(seed):
    rng = np.random.default_rng(500 + seed)

    def unit(v):
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    a = ad.Tensor(unit(rng.standard_normal(6)), requires_grad=True)
    pos = ad.Tensor(unit(rng.standard_normal((2, 6))), requires_grad=True)
    neg = ad.Tensor(unit(rng.standard_normal((3, 6))), requires_grad=True)

    def loss():
        return ad.info_nce(a, pos, neg, tau=0.05)

    check_grad(loss, [a, pos, neg], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_bce_sigmoid(seed):
    rng = np.random.default_rng(600 + seed)
    x = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    t = rng.integers(0, 2, size=(4, 3)).astype(float)

    def loss():
        return ad.binary_cross_entropy(ad.sigmoid(x), t)

    check_grad(loss, [x], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_normalize_cosine(seed):
    rng = np.random.default_rng(700 + seed)
    a = ad.Tensor(rng.standard_normal(7), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(7), requires_grad=True)

    def loss():
        na = ad.l2_normalize(ad.reshape(a, (1, 7)))
        return ad.cosine_similarity(na, b)

    check_grad(loss, [a, b], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_spatial_ops(seed):
    rng = np.random.default_rng(800 + seed)
    x = ad.Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    bias = ad.Tensor(rng.standard_normal(3), requires_grad=True)

    def loss():
        y = ad.upsample_nearest2x(ad.add_channel_bias(x, bias))
        return ad.tensor_sum(ad.global_avg_pool(ad.relu(y)))

    check_grad(loss, [x, bias], f"seed={seed}")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_softmax_gather_slice(seed):
    rng = np.random.default_rng(900 + seed)
    x = ad.Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    idx = rng.integers(0, 5, size=7)  # duplicates exercise grad accumulation

    def loss():
        g = ad.index_rows(x, idx)
        s = ad.softmax(g, axis=-1)
        return ad.mean(ad.narrow(s, 1, 1, 3))

    check_grad(loss, [x], f"seed={seed}")


# ---------------------------------------------------------------------------
# Tape semantics
# ---------------------------------------------------------------------------


def test_double_backward_same_loss_raises():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    loss = ad.tensor_sum(x * x)
    ad.backward(loss)
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_disjoint_subgraphs_backward_independently():
    # Two losses on the same tape sharing no nodes: both backwards succeed,
    # mirroring a discriminator step on detached inputs plus a branch step.
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.Tensor(2 * np.ones(3), requires_grad=True)
    loss_a = ad.tensor_sum(x * x)
    loss_b = ad.tensor_sum(y * y * y)
    ad.backward(loss_a)
    npt.assert_allclose(x.grad, 2.0)
    assert y.grad is None
    ad.backward(loss_b)
    npt.assert_allclose(y.grad, 12.0)


def test_grad_accumulates_across_backwards():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    ad.backward(ad.tensor_sum(x * 3.0))
    ad.backward(ad.tensor_sum(x * 5.0))
    npt.assert_allclose(x.grad, 8.0)


def test_detach_blocks_gradient():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    y = (x * 2.0).detach()
    assert not y.requires_grad
    loss = ad.tensor_sum(y * 3.0)
    assert not loss.requires_grad


def test_no_grad_records_nothing():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    before = len(ad.active_tape().nodes)
    with ad.no_grad():
        y = x * x
    assert len(ad.active_tape().nodes) == before
    assert not y.requires_grad


def test_backward_non_scalar_raises():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * x)


def test_shared_subexpression_accumulates():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x  # reused twice
    loss = ad.tensor_sum(y + y)
    ad.backward(loss)
    npt.assert_allclose(x.grad, 8.0)  # d/dx 2x^2 = 4x


# ---------------------------------------------------------------------------
# Dimension / contract errors
# ---------------------------------------------------------------------------


def test_matmul_dim_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.ones((1, 3, 5, 5))), ad.Tensor(np.ones((2, 4, 3, 3))))


def test_conv2d_even_kernel_raises():
    with pytest.raises(ContractError):
        ad.conv2d(ad.Tensor(np.ones((1, 1, 5, 5))), ad.Tensor(np.ones((1, 1, 2, 2))))


def test_l2_normalize_zero_vector_raises():
    with pytest.raises(NumericFaultError):
        ad.l2_normalize(ad.Tensor(np.zeros((1, 4))))


def test_check_finite_raises_on_nan():
    with pytest.raises(NumericFaultError):
        ad.check_finite(ad.Tensor(np.array([1.0, np.nan])), "probe")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def test_sgd_zero_lr_is_identity():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([5.0, 5.0])
    ad.sgd_step([p], ad.SgdConfig(learning_rate=0.0, weight_decay=0.0))
    npt.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_sgd_plain_step_matches_formula():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    ad.sgd_step([p], ad.SgdConfig(learning_rate=0.1, weight_decay=0.5))
    # p - lr*(g + wd*p) = 1 - 0.1*(2 + 0.5) = 0.75
    npt.assert_allclose(p.data, [0.75])


def test_sgd_global_norm_clip_scales_all_grads():
    a = ad.Tensor(np.zeros(1), requires_grad=True)
    b = ad.Tensor(np.zeros(1), requires_grad=True)
    a.grad = np.array([6.0])
    b.grad = np.array([8.0])  # global norm 10
    ad.sgd_step([a, b], ad.SgdConfig(learning_rate=1.0, weight_decay=0.0, clip_norm=1.0))
    # grads scaled by 0.1 -> steps of 0.6 and 0.8
    npt.assert_allclose(a.data, [-0.6])
    npt.assert_allclose(b.data, [-0.8])


def test_sgd_no_clip_below_threshold():
    p = ad.Tensor(np.zeros(1), requires_grad=True)
    p.grad = np.array([0.5])
    ad.sgd_step([p], ad.SgdConfig(learning_rate=1.0, weight_decay=0.0, clip_norm=1.0))
    npt.assert_allclose(p.data, [-0.5])


def test_sgd_missing_grad_raises():
    p = ad.Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ContractError):
        ad.sgd_step([p], ad.SgdConfig())


def test_training_loop_decreases_quadratic():
    rng = np.random.default_rng(7)
    w = ad.Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    x = ad.Tensor(rng.standard_normal((10, 3)))
    y_true = x.data @ np.array([[1.0], [-2.0], [0.5]])
    losses = []
    for _ in range(50):
        ad.reset_tape()
        diff = ad.matmul(x, w) - ad.Tensor(y_true)
        loss = ad.mean(diff * diff)
        losses.append(loss.item())
        ad.backward(loss)
        ad.sgd_step([w], ad.SgdConfig(learning_rate=0.1, weight_decay=0.0))
    assert losses[-1] < 1e-3 * losses[0]
