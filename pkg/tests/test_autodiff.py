import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from enat.autodiff import (Adam, NonFiniteError, OptimizerState, ShapeError, Tape, Tensor, TrainingError,
                           adam_step, backward, clip_grad_norm, gradcheck, load_checkpoint, no_grad, ops,
                           save_checkpoint, use_tape)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_hand_product(self):
        out = ops.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_identity(self, rng):
        a = Tensor(rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(ops.matmul(a, Tensor(np.eye(3))).data, a.data)

    def test_sum_gradient_is_ones_times_bt(self, rng):
        a, b = param(rng, 3, 4), Tensor(rng.normal(size=(4, 2)))
        backward(ops.sum(ops.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_weight_gradient(self, rng):
        a, w = param(rng, 2, 3, 4), param(rng, 4, 5)
        assert gradcheck(lambda: ops.sum(ops.matmul(a, w) * ops.matmul(a, w)), [a, w]) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_reference_values(self):
        np.testing.assert_allclose(ops.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=1e-4)

    def test_large_inputs_stay_finite(self):
        out = ops.softmax(Tensor([1000.0, 1001.0]))
        assert out.is_finite()
        np.testing.assert_allclose(out.data.sum(), 1.0)

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            ops.softmax(Tensor(np.zeros((2, 0))))

    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariant_rows_sum_to_one(self, x, c):
        a = ops.softmax(Tensor(x), axis=-1).data
        b = ops.softmax(Tensor(x + c), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)
        assert (a >= 0).all()


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = ops.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_values(self):
        out = ops.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_rows_have_zero_mean(self, rng):
        x = Tensor(rng.normal(3.0, 5.0, (6, 7)))
        out = ops.layer_norm(x, Tensor(np.ones(7)), Tensor(np.zeros(7)), 1e-5)
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-9
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, rtol=1e-4)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            ops.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_reuse_accumulates(self):
        x = Tensor(1.5, requires_grad=True)
        backward(x + x)
        assert x.grad == pytest.approx(2.0)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            backward(x * 2.0)

    def test_tape_cleared_after_backward(self):
        tape = Tape()
        x = Tensor(2.0, requires_grad=True)
        with use_tape(tape):
            backward(x * x, tape)
        assert len(tape) == 0

    def test_no_grad_records_nothing(self):
        tape = Tape()
        x = Tensor(np.ones(3), requires_grad=True)
        with use_tape(tape), no_grad():
            y = ops.sum(x * x)
        assert len(tape) == 0 and not y.requires_grad

    def test_detect_non_finite(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan]).check_finite()

    def test_deterministic(self, rng):
        def run():
            r = np.random.default_rng(7)
            a, b = param(r, 3, 4), param(r, 4, 2)
            backward(ops.sum(ops.softmax(ops.matmul(a, b))))
            return a.grad, b.grad
        (a1, b1), (a2, b2) = run(), run()
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


class TestOpGradients:
    """Central differences, h = 1e-5, relative error under 1e-3."""

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_broadcasting_binary(self, rng, op):
        a, b = param(rng, 3, 4), param(rng, 4)
        if op == "div":
            b.data = np.abs(b.data) + 1.0
        f = getattr(ops, op)
        assert gradcheck(lambda: ops.sum(f(a, b) * f(a, b)), [a, b]) < 1e-3

    @pytest.mark.parametrize("name", ["relu", "sigmoid", "log_sigmoid", "exp"])
    def test_unary(self, rng, name):
        x = param(rng, 4, 3)
        x.data[np.abs(x.data) < 1e-3] = 0.1  # keep relu away from its kink
        f = getattr(ops, name)
        assert gradcheck(lambda: ops.sum(f(x) * f(x)), [x]) < 1e-3

    def test_log(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        assert gradcheck(lambda: ops.sum(ops.log(x) * ops.log(x)), [x]) < 1e-3

    def test_reductions_and_shapes(self, rng):
        x = param(rng, 2, 3, 4)
        w = Tensor(rng.normal(size=(3, 2, 4)))

        def f():
            y = ops.transpose(x, (1, 0, 2)) * w
            m = ops.mean(y, axis=1)
            s = ops.sum(y, axis=1, keepdims=True).reshape(3, 4)
            return ops.sum(m * s)

        assert gradcheck(f, [x]) < 1e-3

    def test_scale(self, rng):
        x = param(rng, 3)
        assert gradcheck(lambda: ops.sum(ops.scale(x, -2.5) * x), [x]) < 1e-3

    def test_getitem_concatenate(self, rng):
        a, b = param(rng, 3, 4), param(rng, 2, 4)
        w = Tensor(rng.normal(size=(4, 4)))
        assert gradcheck(lambda: ops.sum(ops.concatenate([a[1:], b], axis=0) * w), [a, b]) < 1e-3

    def test_embedding_with_repeats(self, rng):
        table = param(rng, 6, 3)
        ids = np.array([[1, 1, 4], [0, 5, 1]])
        w = Tensor(rng.normal(size=(2, 3, 3)))
        assert gradcheck(lambda: ops.sum(ops.embedding(table, ids) * w), [table]) < 1e-3

    def test_embedding_out_of_range(self, rng):
        with pytest.raises(IndexError):
            ops.embedding(param(rng, 3, 2), np.array([3]))

    def test_softmax_and_log_softmax(self, rng):
        x = param(rng, 3, 5)
        w = Tensor(rng.normal(size=(3, 5)))
        assert gradcheck(lambda: ops.sum(ops.softmax(x) * w), [x]) < 1e-3
        assert gradcheck(lambda: ops.sum(ops.log_softmax(x) * w), [x]) < 1e-3

    def test_layer_norm(self, rng):
        x, g, b = param(rng, 4, 5), param(rng, 5), param(rng, 5)
        w = Tensor(rng.normal(size=(4, 5)))
        assert gradcheck(lambda: ops.sum(ops.layer_norm(x, g, b, 1e-5) * w), [x, g, b]) < 1e-3

    def test_l2_norm_and_take_last(self, rng):
        x = param(rng, 3, 4)
        idx = np.array([0, 3, 1])
        assert gradcheck(lambda: ops.sum(ops.l2_norm(x, axis=-1)), [x]) < 1e-3
        assert gradcheck(lambda: ops.sum(ops.take_last(x, idx) * ops.take_last(x, idx)), [x]) < 1e-3


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        before = p["w"].data.copy()
        adam_step(p, {"w": np.zeros(2)}, OptimizerState(base_lr=0.1))
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_size(self):
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        adam_step(p, {"w": np.ones(3)}, OptimizerState(base_lr=0.1))
        # m_hat = v_hat = 1, so the update is lr / (1 + eps)
        np.testing.assert_allclose(p["w"].data, -0.1, rtol=1e-8)

    def test_quadratic_decreases(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=1e-2)
        before = float(w.data[0] ** 2)
        backward(ops.sum(w * w))
        opt.step()
        assert float(w.data[0] ** 2) < before

    def test_schedule_warmup_then_decay(self):
        s = OptimizerState(base_lr=1.0, warmup_steps=4)
        rates = [s.learning_rate(k) for k in (1, 2, 4, 16)]
        assert rates == pytest.approx([0.25, 0.5, 1.0, 0.5])

    def test_nan_gradient_names_parameter(self):
        p = {"enc.w": Tensor(np.zeros(2), requires_grad=True)}
        with pytest.raises(TrainingError, match="enc.w"):
            adam_step(p, {"enc.w": np.array([np.nan, 0.0])}, OptimizerState())

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        total = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        assert total == pytest.approx(1.0)

    def test_lr_scale_multiplies_one_parameter(self):
        a = Tensor(np.zeros(1), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        adam_step({"a": a, "b": b}, {"a": np.ones(1), "b": np.ones(1)}, OptimizerState(base_lr=0.1), {"b": 10.0})
        assert b.data[0] == pytest.approx(10 * a.data[0])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        params = {"emb": param(rng, 5, 3), "dec.0.w": param(rng, 3, 3)}
        opt = Adam(params, lr=1e-2, warmup_steps=3)
        for p in params.values():
            p.grad = rng.normal(size=p.shape)
        opt.step()
        save_checkpoint(tmp_path / "c.npz", params, opt.state, {"note": "x"})
        loaded, state, meta = load_checkpoint(tmp_path / "c.npz")
        assert meta == {"note": "x"} and state.step == 1 and state.warmup_steps == 3
        for k in params:
            assert np.array_equal(loaded[k].data, params[k].data)
            assert np.array_equal(state.m[k], opt.state.m[k])
            assert np.array_equal(state.v[k], opt.state.v[k])
