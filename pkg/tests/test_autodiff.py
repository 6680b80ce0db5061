"""Gradient checks for every autodiff primitive against central differences."""

import numpy as np
import pytest

from sliceran import autodiff as ad
from sliceran.autodiff import Tensor


@pytest.fixture(autouse=True)
def finite_checks():
    ad.check_finite = True
    yield
    ad.check_finite = False


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_op(build, shapes, seed, rtol=1e-4):
    """Compare backward() grads of a scalarised op with finite differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    # random projection makes the output a scalar without losing structure
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*params)
    proj = rng.standard_normal(out.shape)
    loss = ad.mean(out * Tensor(proj))
    loss.backward()
    for k, (p, a) in enumerate(zip(params, arrays)):
        def scalar(x, k=k):
            vals = [arr.copy() for arr in arrays]
            vals[k] = x
            ps = [Tensor(v) for v in vals]
            with ad.no_grad():
                o = build(*ps)
                return float((o.data * proj).mean())
        ref = fd_grad(scalar, a.copy())
        scale = np.maximum(np.abs(ref), 1e-6)
        assert np.max(np.abs(p.grad - ref) / scale) < rtol, f"operand {k}"


def test_add_broadcast_bias():
    check_op(lambda a, b: ad.add(a, b), [(5, 4), (4,)], seed=0)


def test_sub():
    check_op(lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)], seed=1)


def test_mul():
    check_op(lambda a, b: ad.mul(a, b), [(6,), (6,)], seed=2)


def test_matmul_2d():
    check_op(lambda a, b: ad.matmul(a, b), [(8, 8), (8, 8)], seed=3)


def test_matmul_chain_matches_fd():
    # gradient of a matmul chain, the canonical end-to-end sanity case
    check_op(lambda a, b, c: ad.matmul(ad.relu(ad.matmul(a, b)), c),
             [(8, 8), (8, 8), (8, 8)], seed=4, rtol=1e-4)


def test_matmul_batched_broadcast():
    check_op(lambda a, b: ad.matmul(a, b), [(5, 3, 4), (4, 2)], seed=5)
    check_op(lambda a, b: ad.matmul(a, b), [(5, 3, 4), (5, 4, 2)], seed=6)


def test_relu_values_and_grad():
    assert ad.relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    check_op(lambda a: ad.relu(a), [(7, 3)], seed=7)


def test_log_square():
    rng = np.random.default_rng(8)
    a = rng.random((4, 4)) + 0.5
    p = Tensor(a, requires_grad=True)
    loss = ad.mean(ad.log(p))
    loss.backward()
    assert np.allclose(p.grad, 1.0 / a / a.size)
    check_op(lambda t: ad.square(t), [(5,)], seed=9)


def test_square_scalar_derivative():
    x = Tensor(3.0, requires_grad=True)
    y = ad.square(x)
    y.backward()
    assert np.isclose(x.grad, 6.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((6, 9)))
    p = ad.softmax(x, tau=2.5)
    assert np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_equal_logits_uniform():
    for tau in (0.1, 1.0, 7.0):
        p = ad.softmax(Tensor(np.full((4,), 1.23)), tau=tau)
        assert np.allclose(p.data, 0.25)


def test_softmax_mask_zeroes_entries():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    mask = np.array([[1, 1, 0, 1, 0], [1, 0, 1, 1, 1], [0, 1, 1, 0, 1]], bool)
    p = ad.softmax(x, mask=mask)
    assert np.all(p.data[~mask] == 0.0)
    assert np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)
    ad.mean(p * Tensor(np.ones((3, 5)))).backward()
    assert np.all(x.grad[~mask] == 0.0)


def test_softmax_grad_fd():
    mask = np.array([True, True, False, True, True, True])
    check_op(lambda a: ad.softmax(a, tau=1.7, mask=mask), [(4, 6)], seed=12)


def test_softmax_crossentropy_grad_is_p_minus_onehot():
    rng = np.random.default_rng(13)
    logits = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    labels = rng.integers(0, 7, size=5)
    p = ad.softmax(logits)
    loss = -ad.mean(ad.log(ad.gather(p, labels))) * 5.0  # sum over batch
    loss.backward()
    onehot = np.zeros((5, 7))
    onehot[np.arange(5), labels] = 1.0
    assert np.allclose(logits.grad, p.data - onehot, atol=1e-10)


def test_entropy_uniform():
    for n in (4, 136):
        h = ad.entropy(Tensor(np.full((n,), 1.0 / n)))
        assert np.isclose(float(h.data), np.log(n), atol=1e-12)


def test_entropy_grad_fd():
    rng = np.random.default_rng(14)
    raw = rng.random((3, 5)) + 0.1
    p = raw / raw.sum(-1, keepdims=True)
    t = Tensor(p, requires_grad=True)
    ad.mean(ad.entropy(t)).backward()
    ref = fd_grad(lambda x: float(-(x * np.log(x)).sum(-1).mean()), p.copy())
    assert np.max(np.abs(t.grad - ref)) < 1e-6


def test_reductions_and_reshape_fd():
    check_op(lambda a: ad.sum_(a, axis=1), [(4, 5)], seed=15)
    check_op(lambda a: ad.reshape(a, (2, 10)), [(4, 5)], seed=16)
    check_op(lambda a: ad.transpose(a, (1, 0, 2)), [(3, 4, 2)], seed=17)


def test_concat_take_gather_fd():
    check_op(lambda a, b: ad.concat([a, b], axis=-1), [(3, 4), (3, 2)], seed=18)
    check_op(lambda a: ad.take(a, 2, axis=1), [(4, 5, 3)], seed=19)
    rng = np.random.default_rng(20)
    idx = rng.integers(0, 6, size=8)
    check_op(lambda a: ad.gather(a, idx), [(8, 6)], seed=21)


def test_backward_accumulates_shared_node_once():
    x = Tensor(2.0, requires_grad=True)
    y = ad.square(x)         # used twice below
    z = y + y                # dz/dx = 2 * 2x = 8
    z.backward()
    assert np.isclose(x.grad, 8.0)


def test_no_grad_blocks_recording():
    x = Tensor(1.5, requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert y._vjp is None and not y.requires_grad


def test_finite_check_trips_on_nan():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor([-1.0]))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.allclose(p.data, [1.0, -2.0])

    @pytest.mark.parametrize("g", [1e-4, 1.0, 1e4])
    def test_first_step_magnitude_is_lr(self, g):
        # with constant gradient g, step 1 moves by lr * g/(sqrt(g^2)+eps) ~ lr
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = ad.Adam([p], lr=0.01)
        p.grad = np.array([g])
        opt.step()
        assert np.isclose(abs(p.data[0]), 0.01, rtol=1e-3)

    def test_bias_correction_at_step_one(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = ad.Adam([p], lr=0.0)  # no movement, just inspect moments
        p.grad = np.array([3.0])
        opt.step()
        assert np.isclose(opt._m[0][0] / (1 - opt.beta1), 3.0)
        assert np.isclose(opt._v[0][0] / (1 - opt.beta2), 9.0)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(22)
    named = {
        "agent/0/encoder/W1": rng.standard_normal((4, 3)),
        "agent/0/q/b": rng.standard_normal(7),
        "scalar": np.asarray(2.5),
    }
    ad.save_checkpoint(tmp_path / "ckpt", named)
    back = ad.load_checkpoint(tmp_path / "ckpt")
    assert set(back) == set(named)
    for k in named:
        assert np.array_equal(back[k], np.asarray(named[k], dtype=np.float64))
