"""Tensor engine tests: forward values, hand-checked gradients, and the
finite-difference oracle over every smooth op."""

import numpy as np
import pytest

from flexquant import autograd as ag
from flexquant.autograd import DimensionError, GraphError, Tape, Tensor, no_grad
from flexquant.optim import SGD, ParamGroup, StepError, sgd_step

from conftest import numerical_gradient


def grad_of(build, *tensors):
    """Run build() under a tape, backward from its scalar output."""
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [t.grad for t in tensors]


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(3))
        out = ag.matmul(eye, Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, np.eye(3))

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(ag.matmul(a, b).data, [[2.0], [4.0]])

    def test_annihilator(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        z = Tensor(np.zeros((4, 2)))
        np.testing.assert_array_equal(ag.matmul(a, z).data, np.zeros((3, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 5, 5)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        out = ag.conv2d(x, k, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_convolution(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 2, 2)))
        out = ag.conv2d(x, k)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_zero_input(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        k = Tensor(np.random.default_rng(2).normal(size=(3, 2, 3, 3)))
        out = ag.conv2d(x, k, padding=1)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 4, 4)))

    def test_output_size_formula(self):
        x = Tensor(np.zeros((1, 1, 7, 9)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        out = ag.conv2d(x, k, stride=2, padding=1)
        assert out.shape == (1, 1, 4, 5)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            ag.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_matches_direct_convolution(self):
        # brute-force cross-correlation as the independent oracle
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        stride, pad = 2, 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (6 + 2 * pad - 3) // stride + 1
        wo = (5 + 2 * pad - 3) // stride + 1
        expect = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for f in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        expect[n, f, i, j] = np.sum(patch * w[f])
        out = ag.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, expect, rtol=1e-12)


class TestLosses:
    def test_kl_identical_is_zero(self):
        p = Tensor([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]])
        assert abs(ag.kl_div(p, Tensor(p.data.copy())).item()) < 1e-12

    def test_kl_onehot_vs_uniform(self):
        p = np.zeros((1, 10))
        p[0, 3] = 1.0
        q = np.full((1, 10), 0.1)
        out = ag.kl_div(Tensor(p), Tensor(q))
        assert out.item() == pytest.approx(np.log(10.0), abs=1e-12)

    def test_kl_nonnegative_random(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            p = rng.random((3, 6))
            p /= p.sum(axis=1, keepdims=True)
            q = rng.random((3, 6))
            q /= q.sum(axis=1, keepdims=True)
            assert ag.kl_div(Tensor(p), Tensor(q)).item() >= -1e-9

    def test_cross_entropy_uniform(self):
        m = 7
        probs = Tensor(np.full((4, m), 1.0 / m))
        labels = np.array([0, 3, 6, 2])
        assert ag.cross_entropy(probs, labels).item() == pytest.approx(np.log(m), abs=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        p = ag.softmax(Tensor(rng.normal(scale=5.0, size=(8, 11))))
        np.testing.assert_allclose(p.data.sum(axis=1), np.ones(8), atol=1e-9)

    def test_softmax_shift_invariant(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 9))
        a = ag.softmax(Tensor(x)).data
        b = ag.softmax(Tensor(x + 13.7)).data
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestBatchnorm:
    def test_eval_identity_stats(self):
        x = Tensor(np.random.default_rng(7).normal(size=(6, 4)))
        out = ag.batchnorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)),
                           np.zeros(4), np.ones(4), 0.1, "eval")
        np.testing.assert_allclose(out.data, x.data, atol=1e-9)

    def test_train_constant_batch_gives_beta(self):
        x = Tensor(np.full((5, 3), 2.5))
        beta = np.array([1.0, -2.0, 0.5])
        out = ag.batchnorm(x, Tensor(np.ones(3)), Tensor(beta),
                           np.zeros(3), np.ones(3), 0.1, "train", update_running=False)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (5, 3)), atol=1e-9)

    def test_gamma_zero_gives_beta(self):
        x = Tensor(np.random.default_rng(8).normal(size=(5, 3)))
        beta = np.array([3.0, 0.0, -1.0])
        out = ag.batchnorm(x, Tensor(np.zeros(3)), Tensor(beta),
                           np.zeros(3), np.ones(3), 0.1, "train", update_running=False)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (5, 3)), atol=1e-12)

    def test_running_stats_update(self):
        rng = np.random.default_rng(9)
        x = rng.normal(loc=2.0, scale=3.0, size=(64, 2))
        mean = np.zeros(2)
        var = np.ones(2)
        ag.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     mean, var, 0.5, "train")
        np.testing.assert_allclose(mean, 0.5 * x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(var, 0.5 * 1.0 + 0.5 * x.var(axis=0), rtol=1e-12)

    def test_channelwise_4d(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 3, 4, 4))
        out = ag.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                           np.zeros(3), np.ones(3), 0.1, "train", update_running=False)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), np.ones(3), rtol=1e-6)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        (g,) = grad_of(lambda: ag.sum_(x), x)
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (g,) = grad_of(lambda: ag.sum_(ag.mul(x, x)), x)
        np.testing.assert_allclose(g, [2.0, 4.0, 6.0], rtol=1e-12)

    def test_grad_accumulates_across_uses(self):
        x = Tensor([2.0], requires_grad=True)
        (g,) = grad_of(lambda: ag.add(ag.sum_(x), ag.sum_(ag.mul(x, x))), x)
        np.testing.assert_allclose(g, [1.0 + 4.0], rtol=1e-12)

    def test_loss_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ag.mul(x, x)
        with pytest.raises(GraphError):
            tape.backward(y)

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = ag.sum_(ag.mul(x, x))
        assert len(tape) == 0
        assert not y.requires_grad

    def test_tape_validate_passes_on_real_graph(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            ag.sum_(ag.matmul(x, x))
        tape.validate()

    def test_tape_validate_detects_cycle(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = ag.mul(x, x)
            z = ag.sum_(y)
        # forge an out-of-order node: its input is produced later in the list
        tape.nodes.reverse()
        with pytest.raises(GraphError):
            tape.validate()
        del y, z

    def test_deterministic_bitwise_repeat(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(16, 8)), requires_grad=True)
            w = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
            with Tape() as tape:
                p = ag.softmax(ag.matmul(ag.relu(x), w))
                loss = ag.cross_entropy(p, rng.integers(0, 4, size=16))
            tape.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


SMOOTH_OP_TRIALS = 100


class TestFiniteDifferences:
    """Analytic gradients vs central differences: 100 random 10-element trials."""

    def _check(self, make_loss, x, rtol=1e-5):
        (analytic,) = grad_of(make_loss, x)

        def forward_value():
            with no_grad():
                return float(make_loss().data)

        numeric = numerical_gradient(forward_value, x.data)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=1e-8)

    @pytest.mark.parametrize("trial", range(SMOOTH_OP_TRIALS))
    def test_composite_smooth_graph(self, trial):
        rng = np.random.default_rng(1000 + trial)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 2)))

        def make_loss():
            h = ag.tanh(ag.matmul(x, w))
            return ag.mean(ag.mul(h, h))

        self._check(make_loss, x)

    @pytest.mark.parametrize("op_name", ["mul", "add", "sub", "tanh", "log", "mean"])
    def test_elementwise_ops(self, op_name):
        rng = np.random.default_rng(hash(op_name) % 2**32)
        for trial in range(20):
            x = Tensor(rng.uniform(0.5, 2.0, size=10), requires_grad=True)
            other = Tensor(rng.uniform(0.5, 2.0, size=10))
            builders = {
                "mul": lambda: ag.sum_(ag.mul(x, other)),
                "add": lambda: ag.sum_(ag.mul(ag.add(x, other), x)),
                "sub": lambda: ag.sum_(ag.mul(ag.sub(x, other), x)),
                "tanh": lambda: ag.sum_(ag.tanh(x)),
                "log": lambda: ag.sum_(ag.log(x)),
                "mean": lambda: ag.mean(ag.mul(x, x)),
            }
            self._check(builders[op_name], x)

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
            labels = rng.integers(0, 5, size=2)
            self._check(lambda: ag.cross_entropy(ag.softmax(x), labels), x)

    def test_kl_both_sides(self):
        rng = np.random.default_rng(43)
        for _ in range(20):
            logits_p = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
            logits_q = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
            self._check(lambda: ag.kl_div(ag.softmax(logits_p), ag.softmax(logits_q.detach())),
                        logits_p)
            self._check(lambda: ag.kl_div(ag.softmax(logits_p.detach()), ag.softmax(logits_q)),
                        logits_q)

    def test_matmul_both_sides(self):
        rng = np.random.default_rng(44)
        a = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        self._check(lambda: ag.sum_(ag.tanh(ag.matmul(a, b))), a)
        self._check(lambda: ag.sum_(ag.tanh(ag.matmul(a, b))), b)

    def test_conv2d_input_and_kernel(self):
        rng = np.random.default_rng(45)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        self._check(lambda: ag.mean(ag.tanh(ag.conv2d(x, w, stride=1, padding=1))), x)
        self._check(lambda: ag.mean(ag.tanh(ag.conv2d(x, w, stride=1, padding=1))), w)

    def test_batchnorm_all_inputs(self):
        rng = np.random.default_rng(46)
        x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)

        def make_loss():
            out = ag.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), 0.1,
                               "train", update_running=False)
            return ag.mean(ag.mul(out, out))

        for t in (x, gamma, beta):
            self._check(make_loss, t)

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(47)
        x = Tensor(rng.uniform(0.5, 2.0, size=10) * rng.choice([-1.0, 1.0], size=10),
                   requires_grad=True)
        self._check(lambda: ag.sum_(ag.mul(ag.relu(x), x)), x)

    def test_maxpool_gradient(self):
        rng = np.random.default_rng(48)
        x = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        self._check(lambda: ag.sum_(ag.mul(ag.maxpool2d(x, 2), ag.maxpool2d(x, 2))), x)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class TestSGD:
    def test_zero_gradient_leaves_params(self):
        p = Tensor([1.0, -2.0])
        sgd_step([p], [np.zeros(2)], lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_hand_value(self):
        p = Tensor([0.0])
        sgd_step([p], [np.ones(1)], lr=0.1)
        np.testing.assert_allclose(p.data, [-0.1], rtol=1e-15)

    def test_two_steps_with_momentum(self):
        p = Tensor([0.0])
        v = sgd_step([p], [np.ones(1)], lr=0.1, momentum=0.9)
        assert p.data[0] == pytest.approx(-0.1, abs=1e-15)
        sgd_step([p], [np.ones(1)], lr=0.1, momentum=0.9, velocities=v)
        assert p.data[0] == pytest.approx(-0.29, abs=1e-12)

    def test_nan_gradient_aborts(self):
        p = Tensor([0.0])
        with pytest.raises(StepError):
            sgd_step([p], [np.array([np.nan])], lr=0.1)

    def test_grouped_optimizer_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([1.0])
        opt = SGD([ParamGroup({"p": p}, lr=0.5, weight_decay=0.1)])
        opt.step()
        # v = 1 + 0.1*2 = 1.2; p = 2 - 0.5*1.2
        np.testing.assert_allclose(p.data, [1.4], rtol=1e-15)

    def test_min_value_projection(self):
        p = Tensor(np.asarray(0.05), requires_grad=True)
        p.grad = np.asarray(10.0)
        opt = SGD([ParamGroup({"a": p}, lr=0.1, min_value=1e-3)])
        opt.step()
        assert p.data == pytest.approx(1e-3)

    def test_skips_params_without_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([ParamGroup({"p": p}, lr=0.5, momentum=0.9, weight_decay=0.5)])
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0])
