import math

import numpy as np
import pytest

from imnav import numcore as nc
from imnav.errors import ContractError, NumericGuardError, ShapeError
from fdcheck import check_gradients


def t(arr, grad=False):
    return nc.Tensor(np.asarray(arr, dtype=np.float32), requires_grad=grad)


class TestForward:
    def test_softmax_symmetry(self):
        out = nc.softmax(t([0.0, 0.0]))
        assert np.allclose(out.values, [0.5, 0.5])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = t(rng.normal(size=(5, 7)))
        out = nc.softmax(x, axis=-1)
        assert np.allclose(out.values.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_neg_inf_gets_zero_weight(self):
        x = nc.Tensor(np.array([1.0, 2.0, -np.inf], dtype=np.float32))
        out = nc.softmax(x)
        assert out.values[2] == 0.0
        assert np.isclose(out.values.sum(), 1.0)

    def test_relu(self):
        out = nc.relu(t([-1.0, 2.0]))
        assert out.values.tolist() == [0.0, 2.0]

    def test_matmul_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(4, 2)).astype(np.float32)
        got = nc.matmul(t(a), t(b)).values
        want = np.zeros((3, 2), dtype=np.float64)
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += float(a[i, k]) * float(b[k, j])
        assert np.abs(got - want).max() < 1e-6

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            nc.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError):
            nc.add(t(np.zeros((2, 3))), t(np.zeros((3, 2))))

    def test_dropout_eval_is_identity(self):
        x = t(np.ones((4, 4)))
        out = nc.dropout(x, 0.5, np.random.default_rng(0), train=False)
        assert out is x

    def test_dropout_inverted_scaling_preserves_mean(self):
        rng = np.random.default_rng(1)
        x = t(np.ones((200, 200)))
        out = nc.dropout(x, 0.3, rng, train=True)
        assert abs(out.values.mean() - 1.0) < 0.02

    def test_concat_and_mean(self):
        a = t([[1.0, 2.0]])
        b = t([[3.0, 4.0]])
        cat = nc.concat([a, b], axis=0)
        assert cat.values.shape == (2, 2)
        m = nc.mean(cat, axis=0)
        assert np.allclose(m.values, [2.0, 3.0])

    def test_take_rows(self):
        x = t(np.arange(12, dtype=np.float32).reshape(4, 3))
        out = nc.take_rows(x, [2, 0])
        assert np.allclose(out.values, [[6, 7, 8], [0, 1, 2]])


class TestCosine:
    def test_identical(self):
        a = t([1.0, 2.0, 3.0])
        assert abs(nc.cosine_similarity(a, t([1.0, 2.0, 3.0])).item() - 1.0) < 1e-6

    def test_orthogonal(self):
        assert abs(nc.cosine_similarity(t([1.0, 0.0]), t([0.0, 2.0])).item()) < 1e-7

    def test_antipodal(self):
        a = [0.5, -1.5, 2.0]
        got = nc.cosine_similarity(t(a), t([-x for x in a])).item()
        assert abs(got + 1.0) < 1e-6

    def test_zero_norm_guarded(self):
        with pytest.raises(NumericGuardError):
            nc.cosine_similarity(t([0.0, 0.0]), t([1.0, 0.0]))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = nc.cross_entropy(t([0.0, 0.0, 0.0, 0.0]), 1)
        assert abs(loss.item() - math.log(4)) < 1e-6

    def test_saturated(self):
        logits = t([0.0, 1000.0, 0.0])
        assert nc.cross_entropy(logits, 1).item() < 1e-6

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            nc.cross_entropy(t([0.0, 0.0]), 5)

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            logits = rng.normal(size=8).astype(np.float32)
            target = int(rng.integers(8))
            got = nc.cross_entropy(t(logits), target).item()
            z = logits.astype(np.float64)
            want = float(np.log(np.exp(z).sum()) - z[target])
            assert abs(got - want) < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            logits = rng.normal(size=5).astype(np.float32)
            assert nc.cross_entropy(t(logits), int(rng.integers(5))).item() >= 0.0


class TestBackward:
    def test_square_gradient(self):
        x = t(3.0, grad=True)
        loss = nc.mul(x, x)
        nc.backward(loss)
        assert abs(float(x.grad) - 6.0) < 1e-6

    def test_independent_leaf_gets_no_grad(self):
        x = t([1.0, 2.0], grad=True)
        y = t([3.0, 4.0], grad=True)
        nc.backward(nc.mean(nc.mul(y, y)))
        assert x.grad is None

    def test_backward_requires_scalar(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(ContractError):
            nc.backward(nc.relu(x))

    def test_repeated_backward_accumulates(self):
        x = t(2.0, grad=True)
        loss = nc.mul(x, x)
        nc.backward(loss)
        first = float(x.grad)
        loss2 = nc.mul(x, x)
        nc.backward(loss2)
        assert abs(float(x.grad) - 2 * first) < 1e-6

    def test_two_layer_network_matches_finite_differences(self):
        rng = np.random.default_rng(5)

        def build(ts):
            w1, w2, x = ts
            h = nc.relu(nc.matmul(x, w1))
            out = nc.matmul(h, w2)
            return nc.mean(nc.mul(out, out))

        # keep relu pre-activations away from the kink so the FD oracle is valid
        done = 0
        while done < 5:
            w1 = rng.normal(size=(4, 6)) * 0.7
            w2 = rng.normal(size=(6, 2)) * 0.7
            x = rng.normal(size=(3, 4)) * 0.7
            if np.abs(x @ w1).min() < 0.05:
                continue
            check_gradients(build, [w1, w2, x], tol=1e-4)
            done += 1


class TestGradcheckPerOp:
    """Property check: every composite op matches central differences."""

    def test_all_ops(self):
        rng = np.random.default_rng(42)
        cases = {
            "matmul": lambda ts: nc.mean(nc.matmul(ts[0], nc.transpose(ts[1], (1, 0)))),
            "add": lambda ts: nc.mean(nc.add(ts[0], ts[1])),
            "mul": lambda ts: nc.mean(nc.mul(ts[0], ts[1])),
            "scale": lambda ts: nc.mean(nc.scale(ts[0], 2.5)),
            "relu": lambda ts: nc.mean(nc.relu(ts[0])),
            "softmax": lambda ts: nc.mean(nc.mul(nc.softmax(ts[0], axis=-1), ts[1])),
            "sigmoid": lambda ts: nc.mean(nc.sigmoid(ts[0])),
            "tanh": lambda ts: nc.mean(nc.tanh(ts[0])),
            "concat": lambda ts: nc.mean(nc.concat([ts[0], ts[1]], axis=0)),
            "take_rows": lambda ts: nc.mean(nc.take_rows(ts[0], [1, 1, 0])),
            # offset keeps the norm O(1): the FD oracle's truncation error
            # grows like 1/|x|^2 near the origin
            "l2_norm": lambda ts: nc.l2_norm(nc.add(ts[0], nc.constant(np.full((2, 3), 1.5)))),
            "reshape": lambda ts: nc.mean(nc.mul(nc.reshape(ts[0], (6,)), nc.reshape(ts[1], (6,)))),
            "transpose": lambda ts: nc.mean(nc.mul(nc.transpose(ts[0], (1, 0)), nc.transpose(ts[1], (1, 0)))),
            "cosine": lambda ts: nc.cosine_similarity(nc.reshape(ts[0], (6,)), nc.reshape(ts[1], (6,))),
            "cross_entropy": lambda ts: nc.cross_entropy(nc.reshape(ts[0], (6,)), 2),
        }
        for name, build in cases.items():
            done = 0
            while done < 3:
                a = rng.normal(size=(2, 3))
                b = rng.normal(size=(2, 3))
                if min(np.abs(a).min(), np.abs(b).min()) < 0.05:
                    continue
                check_gradients(build, [a, b], tol=1e-4)
                done += 1

    def test_batched_matmul_grad(self):
        rng = np.random.default_rng(9)

        def build(ts):
            return nc.mean(nc.matmul(ts[0], ts[1]))

        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 5))
        check_gradients(build, [a, b], tol=1e-4)

    def test_softmax_with_neg_inf_grad_is_finite(self):
        x = nc.Tensor(np.array([[0.5, 1.5, -np.inf]], dtype=np.float32), requires_grad=True)
        out = nc.softmax(x, axis=-1)
        nc.backward(nc.mean(out))
        assert np.isfinite(x.grad[:, :2]).all()
        assert x.grad[0, 2] == 0.0


class TestDeterminism:
    def test_same_seed_same_result(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            x = t(rng.normal(size=(4, 4)))
            y = nc.dropout(nc.softmax(x, axis=1), 0.2, np.random.default_rng(seed + 1), train=True)
            return y.values.tobytes()

        assert run(3) == run(3)
        assert run(3) != run(4)


class TestAdam:
    def test_frozen_group_untouched(self):
        store = nc.ParamStore()
        a = store.add("a", t([1.0, 2.0]), "base")
        b = store.add("b", t([3.0]), "imagination_encoder")
        before = a.values.tobytes()
        a.grad = np.ones_like(a.values)
        b.grad = np.ones_like(b.values)
        opt = nc.Adam(store)
        opt.step({"base": 0.0, "imagination_encoder": 0.1})
        assert a.values.tobytes() == before
        assert b.values[0] != 3.0

    def test_first_step_approx_lr(self):
        store = nc.ParamStore()
        x = store.add("x", t(5.0), "base")
        x.grad = np.asarray(1.0, dtype=np.float32)
        nc.Adam(store).step({"base": 0.1})
        assert abs(float(x.values) - 4.9) < 1e-4

    def test_missing_grad_raises(self):
        store = nc.ParamStore()
        store.add("x", t(5.0), "base")
        with pytest.raises(ContractError):
            nc.Adam(store).step({"base": 0.1})

    def test_five_step_trace_matches_reference(self):
        # independent reference Adam on f(x) = x^2 (grad 2x)
        beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.05
        xr = 1.5
        m = v = 0.0
        ref = []
        for step in range(1, 6):
            g = 2 * xr
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            mhat = m / (1 - beta1 ** step)
            vhat = v / (1 - beta2 ** step)
            xr -= lr * mhat / (math.sqrt(vhat) + eps)
            ref.append(xr)

        store = nc.ParamStore()
        x = store.add("x", nc.Tensor(np.asarray(1.5, dtype=np.float64)), "base")
        opt = nc.Adam(store, beta1, beta2, eps)
        got = []
        for _ in range(5):
            store.zero_grads()
            loss = nc.mul(x, x)
            nc.backward(loss)
            opt.step({"base": lr})
            got.append(float(x.values))
        assert np.abs(np.array(got) - np.array(ref)).max() < 1e-7
