"""Forward-value oracles and gradient checks for every tensor op."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fasdg import ops
from fasdg.errors import ConfigError, NumericalError, ShapeError
from fasdg.gradcheck import check_gradients
from fasdg.tensor import GradTape, Tensor, set_debug_checks


def t64(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def rand64(shape, seed, rg=True):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape), requires_grad=rg)


def scalar_loss(x):
    """Reduce any tensor to a scalar via mean of squares (smooth everywhere)."""
    return ops.mse(ops.reshape(x, (x.size,)), Tensor(np.zeros(x.size), dtype=np.float64))


# ---------------------------------------------------------------------------
# forward values


class TestMatmul:
    def test_identity(self):
        m = t64([[2.0, -1.0], [0.5, 3.0]])
        eye = t64(np.eye(2), rg=False)
        out = ops.matmul(eye, m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_hand_product(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[1.0], [1.0]])
        np.testing.assert_allclose(ops.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(rand64((2, 3), 0), rand64((2, 3), 1))

    def test_grad_matches_central_differences(self):
        # independent FD oracle, not the packaged checker
        a = rand64((3, 4), 10)
        b = rand64((4, 2), 11, rg=False)

        def f():
            prod = ops.matmul(a, b)
            return ops.mse(
                ops.reshape(prod, (6,)), Tensor(np.zeros(6)), reduction="sum"
            )

        with GradTape() as tape:
            out = f()
        tape.backward(out)
        analytic = a.grad.copy()
        eps = 1e-4
        flat = a.data.reshape(-1)
        for ix in range(flat.size):
            keep = flat[ix]
            flat[ix] = keep + eps
            fp = float(f().data)
            flat[ix] = keep - eps
            fm = float(f().data)
            flat[ix] = keep
            num = (fp - fm) / (2 * eps)
            ana = analytic.reshape(-1)[ix]
            assert abs(ana - num) / max(abs(ana), abs(num), 1e-12) < 1e-5


class TestSoftmax:
    def test_symmetric_row(self):
        out = ops.softmax_rows(t64([[0.0, 0.0, 0.0]], rg=False))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_no_overflow_on_huge_logit(self):
        out = ops.softmax_rows(t64([[1000.0, 0.0]], rg=False))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_direct_exp_sum_oracle(self):
        out = ops.softmax_rows(t64([[1.0, 2.0, 3.0]], rg=False))
        np.testing.assert_allclose(
            out.data, [[0.09003, 0.24473, 0.66524]], atol=1e-5
        )

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.lists(st.floats(-50, 50), min_size=2, max_size=8),
            min_size=1,
            max_size=6,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    def test_rows_sum_to_one(self, rows):
        x64 = np.asarray(rows, dtype=np.float64)
        out64 = ops.softmax_rows(Tensor(x64))
        np.testing.assert_allclose(out64.data.sum(axis=-1), 1.0, atol=1e-9)
        out32 = ops.softmax_rows(Tensor(x64.astype(np.float32)))
        np.testing.assert_allclose(out32.data.sum(axis=-1), 1.0, atol=1e-5)


class TestLogistic:
    def test_zero(self):
        assert ops.logistic(t64([0.0], rg=False)).data[0] == pytest.approx(0.5)

    def test_saturation(self):
        assert ops.logistic(t64([1e3], rg=False)).data[0] == pytest.approx(1.0, abs=1e-12)

    def test_closed_form(self):
        assert ops.logistic(t64([1.0], rg=False)).data[0] == pytest.approx(
            0.7310585786300049, abs=1e-6
        )


class TestGradReverse:
    def test_forward_is_identity(self):
        x = t64([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(ops.grad_reverse(x, 1.0).data, x.data)

    def test_backward_negates_seed(self):
        x = t64([1.0, 2.0, 3.0])
        with GradTape() as tape:
            y = ops.grad_reverse(x, 1.0)
        g = np.array([0.3, -0.7, 2.0])
        tape.backward(y, seed=g)
        np.testing.assert_array_equal(x.grad, -g)

    @pytest.mark.parametrize("lam", [1.0, 0.5])
    def test_paired_run_matches_identity_run_exactly(self, lam):
        # downstream graph is shared; only the reversal layer differs
        x0 = np.random.default_rng(3).standard_normal((4, 5))
        w = rand64((5, 2), 4, rg=False)

        def run(with_grl):
            x = Tensor(x0.copy(), requires_grad=True)
            with GradTape() as tape:
                h = ops.grad_reverse(x, lam) if with_grl else x
                out = scalar_loss(ops.matmul(h, w))
            tape.backward(out)
            return x.grad

        g_plain = run(False)
        g_grl = run(True)
        np.testing.assert_array_equal(g_grl, -lam * g_plain)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            ops.grad_reverse(t64([1.0]), -0.1)


class TestMisc:
    def test_add_broadcast_bias(self):
        x = rand64((4, 3), 20)
        b = rand64((3,), 21)
        out = ops.add(x, b)
        np.testing.assert_allclose(out.data, x.data + b.data)

    def test_mse_values(self):
        assert float(ops.mse(t64([1.0, 0.0]), t64([0.0, 1.0], rg=False)).data) == pytest.approx(1.0)
        assert float(ops.mse(t64([0.8]), t64([0.7], rg=False)).data) == pytest.approx(0.01, abs=1e-9)
        same = t64([0.3, 0.9])
        assert float(ops.mse(same, t64([0.3, 0.9], rg=False)).data) == 0.0

    def test_mse_empty_batch_rejected(self):
        with pytest.raises(ShapeError):
            ops.mse(Tensor(np.zeros((0,))), Tensor(np.zeros((0,))))

    def test_cross_entropy_uniform_is_log_n(self):
        logits = Tensor(np.zeros((2, 3)), requires_grad=True)
        loss = ops.cross_entropy_logits(logits, np.array([0, 2]))
        assert float(loss.data) == pytest.approx(np.log(3.0), abs=1e-12)

    def test_cross_entropy_confident_correct_is_small(self):
        logits = Tensor(np.array([[50.0, 0.0, 0.0]]), requires_grad=True)
        loss = ops.cross_entropy_logits(logits, np.array([0]))
        assert float(loss.data) < 1e-12

    def test_mean_axis(self):
        x = rand64((3, 4), 30)
        np.testing.assert_allclose(ops.mean_axis(x, 0).data, x.data.mean(axis=0))
        np.testing.assert_allclose(ops.mean_axis(x, 1).data, x.data.mean(axis=1))

    def test_embedding_lookup_gathers_rows(self):
        table = rand64((5, 3), 31)
        idx = np.array([4, 0, 4])
        out = ops.embedding_lookup(table, idx)
        np.testing.assert_array_equal(out.data, table.data[idx])

    def test_concat_last_roundtrip(self):
        a, b = rand64((2, 3), 32), rand64((2, 2), 33)
        out = ops.concat_last([a, b])
        assert out.shape == (2, 5)
        np.testing.assert_array_equal(out.data[:, :3], a.data)

    def test_dtype_mix_rejected(self):
        a = Tensor(np.zeros((2, 2), dtype=np.float32))
        b = Tensor(np.zeros((2, 2), dtype=np.float64))
        with pytest.raises(ShapeError, match="float32"):
            ops.add(a, b)

    def test_debug_flag_catches_nonfinite(self):
        set_debug_checks(True)
        try:
            with pytest.raises(NumericalError, match="log"):
                ops.log(t64([-1.0], rg=False))
        finally:
            set_debug_checks(False)


# ---------------------------------------------------------------------------
# tape semantics


class TestTape:
    def test_fan_out_gradients_accumulate(self):
        x = t64([2.0])
        with GradTape() as tape:
            y = ops.add(ops.scale(x, 3.0), ops.scale(x, 4.0))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [7.0])

    def test_backward_is_repeatable_bit_for_bit(self):
        a, b = rand64((6, 6), 40), rand64((6, 6), 41)
        with GradTape() as tape:
            out = scalar_loss(ops.matmul(ops.gelu(a), ops.softmax_rows(b)))
        tape.backward(out)
        ga, gb = a.grad.copy(), b.grad.copy()
        tape.backward(out)
        assert np.array_equal(a.grad, ga)
        assert np.array_equal(b.grad, gb)

    def test_identical_runs_identical_grads(self):
        def run():
            a = Tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
            with GradTape() as tape:
                out = scalar_loss(ops.layer_norm(a, t64(np.ones(4)), t64(np.zeros(4))))
            tape.backward(out)
            return a.grad

        assert np.array_equal(run(), run())

    def test_no_tape_means_no_recording(self):
        x = t64([1.0, 2.0])
        y = ops.scale(x, 2.0)
        assert y.requires_grad
        assert x.grad is None  # nothing to backward through


# ---------------------------------------------------------------------------
# gradient checks for every differentiable op


def _check(f, params, tol=1e-4, eps=1e-3):
    report = check_gradients(f, params, eps=eps, tol=tol)
    assert report.passed, str(report)


class TestOpGradients:
    def test_matmul(self):
        a, b = rand64((3, 4), 50), rand64((4, 2), 51)
        _check(lambda: scalar_loss(ops.matmul(a, b)), {"a": a, "b": b})

    def test_bmm(self):
        a, b = rand64((2, 3, 4), 52), rand64((2, 4, 2), 53)
        _check(lambda: scalar_loss(ops.bmm(a, b)), {"a": a, "b": b})

    def test_add_broadcast(self):
        a, b = rand64((3, 4), 54), rand64((4,), 55)
        _check(lambda: scalar_loss(ops.add(a, b)), {"a": a, "b": b})

    def test_multiply_broadcast(self):
        a, b = rand64((2, 3, 3), 56), rand64((1,), 57)
        _check(lambda: scalar_loss(ops.multiply(a, b)), {"a": a, "b": b})

    def test_scale_add_scalar(self):
        x = rand64((5,), 58)
        _check(lambda: scalar_loss(ops.add_scalar(ops.scale(x, -2.5), 0.7)), {"x": x})

    def test_mean_axis(self):
        x = rand64((3, 4, 2), 59)
        _check(lambda: scalar_loss(ops.mean_axis(x, 1)), {"x": x})

    def test_softmax_rows(self):
        x = rand64((4, 5), 60)
        _check(lambda: scalar_loss(ops.softmax_rows(x)), {"x": x})

    def test_logistic(self):
        x = rand64((7,), 61)
        _check(lambda: scalar_loss(ops.logistic(x)), {"x": x})

    def test_gelu(self):
        x = rand64((9,), 62)
        _check(lambda: scalar_loss(ops.gelu(x)), {"x": x})

    def test_layer_norm(self):
        x, g, b = rand64((4, 6), 63), rand64((6,), 64), rand64((6,), 65)
        _check(
            lambda: scalar_loss(ops.layer_norm(x, g, b)), {"x": x, "g": g, "b": b}
        )

    def test_normalize_rows(self):
        x = Tensor(np.abs(np.random.default_rng(66).standard_normal((3, 5))) + 0.2, requires_grad=True)
        _check(lambda: scalar_loss(ops.normalize_rows(x)), {"x": x})

    def test_reshape_transpose_concat(self):
        a, b = rand64((2, 6), 67), rand64((2, 2), 68)

        def f():
            joined = ops.concat_last([ops.reshape(a, (2, 6)), b])
            return scalar_loss(ops.transpose(joined))

        _check(f, {"a": a, "b": b})

    def test_embedding_lookup_with_duplicate_rows(self):
        table = rand64((4, 3), 69)
        idx = np.array([0, 2, 0, 3])
        _check(lambda: scalar_loss(ops.embedding_lookup(table, idx)), {"table": table})

    def test_cross_entropy_logits(self):
        logits = rand64((5, 3), 70)
        y = np.array([0, 2, 1, 1, 0])
        _check(lambda: ops.cross_entropy_logits(logits, y), {"logits": logits})

    def test_mse_both_sides(self):
        p, t = rand64((6,), 71), rand64((6,), 72)
        _check(lambda: ops.mse(p, t), {"p": p, "t": t})

    def test_log(self):
        x = Tensor(np.abs(np.random.default_rng(73).standard_normal(5)) + 0.5, requires_grad=True)
        _check(lambda: scalar_loss(ops.log(x)), {"x": x})


class TestCheckGradientsHarness:
    def test_square_function(self):
        x = t64([3.0])

        def f():
            return ops.mse(x, Tensor(np.zeros(1)), reduction="sum")

        # d/dx x^2 = 6 at x=3; central differences are exact for quadratics
        report = check_gradients(f, {"x": x}, eps=1e-3, tol=1e-8)
        assert report.passed, str(report)
        assert report.worst_analytic == pytest.approx(6.0, abs=1e-8)

    def test_constant_function_zero_gradient(self):
        x = t64([1.5, -2.0])

        def f():
            return scalar_loss(ops.scale(x, 0.0))

        report = check_gradients(f, {"x": x}, eps=1e-3, tol=1e-10)
        assert report.passed
        assert report.worst_analytic == 0.0
        assert report.worst_numeric == 0.0

    def test_rejects_float32(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(NumericalError, match="float64"):
            check_gradients(lambda: scalar_loss(x), {"x": x})
