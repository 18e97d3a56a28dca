import numpy as np
import pytest

from recipnet import autodiff as ad
from recipnet.errors import NondeterministicFunction, NonFiniteGradient, ShapeError
from recipnet.optim import AdamWState, adamw_step, onecycle_lr


def make_param(rng, shape, name):
    return ad.parameter(rng.normal(size=shape), name)


class TestForwardValues:
    def test_softplus_at_zero(self):
        assert ad.softplus(ad.Tensor(np.zeros(1))).data[0] == pytest.approx(np.log(2.0))

    def test_segment_sum_example(self):
        out = ad.segment_sum(ad.Tensor([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
        np.testing.assert_allclose(out.data, [[3.0], [3.0]])

    def test_softmax_numeric(self):
        # oracle: exp / sum of exps evaluated directly
        x = np.array([2.0, 1.0, 0.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(
            ad.softmax(ad.Tensor(x)).data, expected, atol=1e-12
        )
        np.testing.assert_allclose(
            ad.softmax(ad.Tensor(x)).data, [0.66524, 0.24473, 0.09003], atol=1e-5
        )

    def test_segment_mean_empty_segment(self):
        out = ad.segment_mean(ad.Tensor([[2.0], [4.0]]), [0, 0], 3)
        np.testing.assert_allclose(out.data, [[3.0], [0.0], [0.0]])

    def test_concat_last_axis(self):
        a, b = ad.Tensor(np.ones((2, 2))), ad.Tensor(np.zeros((2, 3)))
        assert ad.concat([a, b]).shape == (2, 5)


class TestBackward:
    def test_linear_loss_grad_is_input(self, rng):
        x = rng.normal(size=(4, 3))
        w = ad.parameter(rng.normal(size=(4, 3)), "w")
        loss = ad.tsum(ad.mul(w.value, x))
        loss.backward()
        np.testing.assert_allclose(w.value.grad, x)

    def test_relu_piecewise(self):
        x = ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        ad.tsum(ad.relu(x)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0])

    def test_two_layer_mlp_finite_difference(self, rng):
        x = rng.normal(size=(5, 4))
        w1 = make_param(rng, (4, 8), "w1")
        b1 = make_param(rng, (8,), "b1")
        w2 = make_param(rng, (8, 1), "w2")
        b2 = make_param(rng, (1,), "b2")

        def f():
            h = ad.silu(ad.linear(ad.Tensor(x), w1.value, b1.value))
            return ad.tsum(ad.linear(h, w2.value, b2.value))

        assert ad.grad_check(f, [w1, b1, w2, b2], max_entries_per_param=40) < 1e-6

    def test_accumulation_doubles(self, rng):
        w = make_param(rng, (3, 3), "w")
        x = rng.normal(size=(3, 3))

        def loss():
            return ad.tsum(ad.mul(w.value, x))

        loss().backward()
        once = w.value.grad.copy()
        loss().backward()
        np.testing.assert_array_equal(w.value.grad, 2.0 * once)

    def test_shared_subexpression(self, rng):
        # y = w*x used twice; gradient must count both paths
        w = make_param(rng, (2,), "w")
        x = np.array([3.0, 5.0])
        y = ad.mul(w.value, x)
        ad.tsum(ad.add(y, y)).backward()
        np.testing.assert_allclose(w.value.grad, 2.0 * x)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            ad.Tensor(np.ones(3), requires_grad=True).backward()


class TestEveryOpGradient:
    """Each differentiable op against central differences on random shapes."""

    CASES = {
        "add": lambda p, c: ad.add(p, c),
        "sub": lambda p, c: ad.sub(p, c),
        "mul": lambda p, c: ad.mul(p, c),
        "div": lambda p, c: ad.div(p, ad.Tensor(np.abs(c.data) + 1.0)),
        "matmul": lambda p, c: ad.matmul(p, ad.Tensor(c.data.T.copy())),
        "relu": lambda p, c: ad.relu(ad.add(p, 0.05)),  # keep clear of the kink
        "sigmoid": lambda p, c: ad.sigmoid(p),
        "softplus": lambda p, c: ad.softplus(p),
        "silu": lambda p, c: ad.silu(p),
        "softmax": lambda p, c: ad.mul(ad.softmax(p), c),  # weight: plain sum is constant
        "cos": lambda p, c: ad.cos(p),
        "sin": lambda p, c: ad.sin(p),
        "abs": lambda p, c: ad.absolute(ad.add(p, 5.0)),  # clear of zero
        "power": lambda p, c: ad.power(ad.add(ad.mul(p, p), 1.0), -0.5),
        "mean_all": lambda p, c: ad.tmean(p),
        "mean_axis0": lambda p, c: ad.tmean(p, axis=0),
        "sum_axis1": lambda p, c: ad.tsum(p, axis=1),
        "concat": lambda p, c: ad.concat([p, c], axis=-1),
        "gather": lambda p, c: ad.gather_rows(p, [2, 0, 2, 1]),
        "segment_sum": lambda p, c: ad.segment_sum(p, np.arange(p.shape[0]) % 3, 3),
        "segment_mean": lambda p, c: ad.segment_mean(p, np.arange(p.shape[0]) % 3, 3),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_op(self, name, rng):
        for shape in [(4, 6), (64, 256)]:
            p = make_param(rng, shape, "p")
            c = ad.Tensor(rng.normal(size=shape))

            def f():
                return ad.tsum(self.CASES[name](p.value, c))

            assert ad.grad_check(f, [p], max_entries_per_param=12) < 1e-5, name

    def test_broadcast_bias_gradient(self, rng):
        b = make_param(rng, (5,), "b")
        x = rng.normal(size=(7, 5))

        def f():
            return ad.tsum(ad.add(ad.Tensor(x), b.value))

        assert ad.grad_check(f, [b]) < 1e-7


class TestBatchNorm:
    def test_eval_mode_gradients(self, rng):
        state = ad.BatchNormState.create(6)
        state.running_mean = rng.normal(size=6)
        state.running_var = rng.uniform(0.5, 2.0, size=6)
        gamma = make_param(rng, (6,), "gamma")
        beta = make_param(rng, (6,), "beta")
        x = make_param(rng, (10, 6), "x")

        def f():
            out = ad.batch_norm(x.value, gamma.value, beta.value, state, training=False)
            return ad.tsum(ad.mul(out, out))

        assert ad.grad_check(f, [x, gamma, beta], max_entries_per_param=20) < 1e-6

    def test_train_mode_gradients_exact(self, rng):
        gamma = make_param(rng, (4,), "gamma")
        beta = make_param(rng, (4,), "beta")
        x = make_param(rng, (8, 4), "x")
        c = rng.normal(size=(8, 4))  # sum of squares alone is constant in x

        def f():
            state = ad.BatchNormState.create(4)  # fresh stats: deterministic fn
            out = ad.batch_norm(x.value, gamma.value, beta.value, state, training=True)
            return ad.tsum(ad.mul(ad.silu(out), c))

        assert ad.grad_check(f, [x, gamma, beta], max_entries_per_param=20) < 1e-5

    def test_running_stats_update(self, rng):
        state = ad.BatchNormState.create(3)
        x = rng.normal(loc=2.0, size=(50, 3))
        gamma = ad.Tensor(np.ones(3))
        beta = ad.Tensor(np.zeros(3))
        ad.batch_norm(ad.Tensor(x), gamma, beta, state, training=True)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0), atol=1e-12)
        expected_var = 0.9 * 1.0 + 0.1 * x.var(axis=0, ddof=1)
        np.testing.assert_allclose(state.running_var, expected_var, atol=1e-12)

    def test_train_normalizes_batch(self, rng):
        state = ad.BatchNormState.create(4)
        x = rng.normal(loc=5.0, scale=3.0, size=(100, 4))
        out = ad.batch_norm(
            ad.Tensor(x), ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)), state, True
        )
        np.testing.assert_allclose(out.data.mean(axis=0), np.zeros(4), atol=1e-10)
        np.testing.assert_allclose(out.data.std(axis=0), np.ones(4), atol=1e-3)


class TestGradCheck:
    def test_identity_error_zero(self, rng):
        p = make_param(rng, (3,), "p")

        def f():
            return ad.tsum(p.value)

        assert ad.grad_check(f, [p]) < 1e-10

    def test_nondeterministic_rejected(self, rng):
        p = make_param(rng, (2,), "p")
        state = {"calls": 0}

        def f():
            state["calls"] += 1
            return ad.tsum(ad.mul(p.value, float(state["calls"])))

        with pytest.raises(NondeterministicFunction):
            ad.grad_check(f, [p])


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self, rng):
        p = make_param(rng, (4,), "p")
        before = p.value.data.copy()
        state = AdamWState.create([p])
        adamw_step([p], state, lr=0.1)
        np.testing.assert_array_equal(p.value.data, before)

    def test_first_step_closed_form(self, rng):
        # from zero state: m=(1-b1)g, v=(1-b2)g^2; bias-corrected update is
        # -lr * g / (|g| + eps')
        p = make_param(rng, (5,), "p")
        g = rng.normal(size=5)
        p.value.grad = g.copy()
        before = p.value.data.copy()
        lr, eps = 0.01, 1e-8
        state = AdamWState.create([p])
        adamw_step([p], state, lr=lr, eps=eps)
        expected = before - lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(p.value.data, expected, atol=1e-12)

    def test_decay_only(self, rng):
        p = make_param(rng, (4,), "p")
        before = p.value.data.copy()
        state = AdamWState.create([p])
        adamw_step([p], state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.value.data, before * (1 - 0.1 * 0.5), atol=1e-15)

    def test_non_finite_gradient_rejected(self, rng):
        p = make_param(rng, (2,), "p")
        p.value.grad = np.array([np.nan, 0.0])
        with pytest.raises(NonFiniteGradient):
            adamw_step([p], AdamWState.create([p]), lr=0.1)

    def test_deterministic(self, rng):
        runs = []
        for _ in range(2):
            p = ad.parameter(np.ones(3), "p")
            p.value.grad = np.array([0.5, -0.2, 0.1])
            state = AdamWState.create([p])
            for _ in range(10):
                adamw_step([p], state, lr=0.01, weight_decay=1e-5)
            runs.append(p.value.data.copy())
        np.testing.assert_array_equal(runs[0], runs[1])


class TestOneCycle:
    def test_boundaries(self):
        assert onecycle_lr(0, 100, 1.0, div_factor=25.0) == pytest.approx(0.04)
        assert onecycle_lr(30, 100, 1.0, pct_start=0.3) == pytest.approx(1.0)
        assert onecycle_lr(100, 100, 1.0, final_div=1e4) == pytest.approx(1e-4)

    def test_monotone_phases(self):
        lrs = [onecycle_lr(s, 200, 0.01) for s in range(201)]
        peak = int(0.3 * 200)
        assert all(a <= b + 1e-15 for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[peak:-1], lrs[peak + 1 :]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            onecycle_lr(-1, 100, 1.0)
        with pytest.raises(ValueError):
            onecycle_lr(101, 100, 1.0)


class TestShapeErrors:
    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_add_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))

    def test_segment_index_out_of_range(self):
        with pytest.raises(IndexError):
            ad.segment_sum(ad.Tensor(np.ones((2, 2))), [0, 5], 3)
        with pytest.raises(IndexError):
            ad.segment_sum(ad.Tensor(np.ones((2, 2))), [-1, 0], 3)
