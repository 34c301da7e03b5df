import numpy as np
import pytest

import qckt.autodiff as ad
from qckt.autodiff import Tape, grad_check, sigmoid
from qckt.errors import DomainError, ShapeError


class TestScalarHelpers:
    def test_sigmoid_trivial_values(self):
        assert sigmoid(0.0) == 0.5
        np.testing.assert_allclose(sigmoid(np.log(3.0)), 0.75, rtol=1e-14)
        # extreme inputs stay finite and saturate
        assert sigmoid(1000.0) == 1.0
        assert sigmoid(-1000.0) == 0.0

    def test_sigmoid_matches_naive_formula(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(5, 7)) * 3.0
        np.testing.assert_allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), rtol=1e-14)

    def test_bce_trivial_value(self):
        # -ln(1/2) for a 0.5 prediction, either target
        np.testing.assert_allclose(ad.bce_value(0.5, 1.0), np.log(2.0), rtol=1e-14)
        np.testing.assert_allclose(ad.bce_value(0.5, 0.0), np.log(2.0), rtol=1e-14)

    def test_bce_clamped_at_endpoints(self):
        assert np.isfinite(ad.bce_value(0.0, 1.0))
        assert np.isfinite(ad.bce_value(1.0, 0.0))


class TestForwardValues:
    def test_matmul_vector(self):
        tape = Tape()
        w = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
        x = tape.leaf([5.0, 6.0])
        np.testing.assert_allclose(tape.matmul(w, x).value, [17.0, 39.0])

    def test_matmul_shape_error_names_both_shapes(self):
        tape = Tape()
        w = tape.leaf(np.zeros((2, 3)))
        x = tape.leaf(np.zeros(4))
        with pytest.raises(ShapeError) as exc:
            tape.matmul(w, x)
        assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)

    def test_concat_rejects_matrices(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            tape.concat([tape.leaf(np.zeros((2, 2)))])

    def test_sum_pool_empty_vector_is_zero(self):
        tape = Tape()
        out = tape.sum_pool(tape.leaf(np.zeros(0)))
        assert out.value == 0.0

    def test_relu_gradient_is_zero_at_zero(self):
        tape = Tape()
        x = tape.leaf([-1.0, 0.0, 2.0])
        loss = tape.sum_pool(tape.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_bce_rejects_fractional_target(self):
        tape = Tape()
        with pytest.raises(DomainError):
            tape.bce(tape.leaf(0.5), 0.25)

    def test_backward_requires_scalar_loss(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        with pytest.raises(ShapeError):
            tape.backward(tape.relu(x))


class TestStraightLineOracle:
    """Hand-written gradient formulas for a small dense composite."""

    def test_sigmoid_affine_chain(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(2, 3))
        x = rng.normal(size=3)
        b = rng.normal(size=2)

        tape = Tape()
        wn, xn, bn = tape.leaf(w), tape.leaf(x), tape.leaf(b)
        z = tape.add(tape.matmul(wn, xn), bn)
        loss = tape.sum_pool(tape.sigmoid(z))
        tape.backward(loss)

        s = 1.0 / (1.0 + np.exp(-(w @ x + b)))
        ds = s * (1.0 - s)
        np.testing.assert_allclose(bn.grad, ds, rtol=1e-12)
        np.testing.assert_allclose(wn.grad, np.outer(ds, x), rtol=1e-12)
        np.testing.assert_allclose(xn.grad, w.T @ ds, rtol=1e-12)

    def test_concat_routes_gradient_segments(self):
        tape = Tape()
        a = tape.leaf([1.0, 2.0])
        b = tape.leaf([3.0])
        joined = tape.concat([a, b])
        weights = tape.leaf([10.0, 20.0, 30.0])
        loss = tape.sum_pool(tape.mul(joined, weights))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [10.0, 20.0])
        np.testing.assert_array_equal(b.grad, [30.0])

    def test_unreachable_parameter_gets_zero_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        unused = tape.leaf([5.0])
        tape.backward(tape.sum_pool(x))
        np.testing.assert_array_equal(Tape.grad(unused), [0.0])
        assert unused.grad is None

    def test_fanout_accumulates(self):
        # y = x*x + x  =>  dy/dx = 2x + 1
        tape = Tape()
        x = tape.leaf([3.0, -1.5])
        loss = tape.sum_pool(tape.add(tape.mul(x, x), x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [7.0, -2.0], rtol=1e-14)


def _shift_from_zero(x, margin=0.15):
    return x + np.sign(x) * margin + (x == 0) * margin


class TestFiniteDifferenceBattery:
    """Every op checked against central finite differences."""

    def test_dense_composite_example(self):
        rng = np.random.default_rng(42)
        params = {
            "W": rng.normal(size=(2, 3)),
            "x": rng.normal(size=3),
            "b": rng.normal(size=2),
        }

        def build(tape, n):
            return tape.sum_pool(tape.sigmoid(tape.add(tape.matmul(n["W"], n["x"]), n["b"])))

        report = grad_check(build, params)
        assert report.passed, report
        assert report.worst() < 1e-6

    def test_elementwise_and_pool_ops(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            params = {
                "a": rng.normal(size=6),
                "b": _shift_from_zero(rng.normal(size=6)),
            }

            def build(tape, n):
                mixed = tape.mul(tape.tanh(n["a"]), tape.sigmoid(n["b"]))
                return tape.sum_pool(tape.add(mixed, tape.relu(n["b"])))

            report = grad_check(build, params)
            assert report.passed, (trial, report)

    def test_batched_matrix_ops(self):
        rng = np.random.default_rng(11)
        for trial in range(3):
            params = {
                "W": rng.normal(size=(3, 4)),
                "X": rng.normal(size=(4, 5)),
                "bias": rng.normal(size=3),
                "roww": rng.normal(size=3),
                "dotw": rng.normal(size=3),
            }
            coeffs = rng.normal(size=5)

            def build(tape, n):
                y = tape.add_bias(tape.matmul(n["W"], n["X"]), n["bias"])
                y = tape.scale_rows(tape.tanh(y), n["roww"])
                y = tape.scale_columns(y, coeffs)
                per_col = tape.add(tape.sum_columns(y), tape.dot_columns(n["dotw"], y))
                back_up = tape.sum_columns(tape.vstack([tape.as_row(per_col)] * 2))
                return tape.sum_pool(back_up)

            report = grad_check(build, params)
            assert report.passed, (trial, report)

    def test_scalar_param_ops(self):
        rng = np.random.default_rng(19)
        params = {
            "x": rng.normal(size=4),
            "s": rng.normal(),
            "t": rng.normal(),
        }

        def build(tape, n):
            y = tape.add_scalar(tape.mul_scalar(n["x"], n["s"]), n["t"])
            return tape.sum_pool(tape.scale_const(tape.tanh(y), 0.7))

        report = grad_check(build, params)
        assert report.passed, report

    def test_vstack_and_embed_ops(self):
        rng = np.random.default_rng(23)
        params = {
            "M": rng.normal(size=(4, 3)),
            "X": rng.normal(size=(2, 3)),
        }
        idx = [2, 0, 2]  # duplicate row exercises accumulation
        groups = [(0, 2), (1,), (0, 1, 3)]

        def build(tape, n):
            e = tape.embed(n["M"], idx)
            em = tape.embed_mean(n["M"], groups)
            stacked = tape.vstack([e, em, n["X"]])
            return tape.sum_pool(tape.sum_columns(tape.tanh(stacked)))

        report = grad_check(build, params)
        assert report.passed, report

    def test_bce_ops(self):
        params = {"p": np.array(0.37), "v": np.array([0.2, 0.9, 0.55, 0.4])}
        targets = np.array([1.0, 0.0, 1.0, 1.0])
        mask = np.array([1.0, 1.0, 0.0, 1.0])

        def build(tape, n):
            total = tape.bce(n["p"], 1)
            total = tape.add(total, tape.bce_sum(n["v"], targets, mask))
            return total

        report = grad_check(build, params)
        assert report.passed, report

    def test_bce_sum_mask_blocks_gradient(self):
        tape = Tape()
        v = tape.leaf([0.2, 0.9])
        loss = tape.bce_sum(v, [1.0, 1.0], mask=[1.0, 0.0])
        tape.backward(loss)
        assert v.grad[1] == 0.0
        np.testing.assert_allclose(loss.value, ad.bce_value(0.2, 1.0), rtol=1e-14)

    def test_lstm_gates_two_step_chain(self):
        rng = np.random.default_rng(31)
        d, batch = 3, 2
        params = {
            "z1": rng.normal(size=(4 * d, batch)),
            "z2": rng.normal(size=(4 * d, batch)),
            "c0": rng.normal(size=(d, batch)),
        }

        def build(tape, n):
            h1, c1 = tape.lstm_gates(n["z1"], n["c0"])
            h2, c2 = tape.lstm_gates(n["z2"], c1)
            both = tape.add(h1, h2)
            return tape.sum_pool(tape.sum_columns(tape.add(both, c2)))

        report = grad_check(build, params)
        assert report.passed, report

    def test_lstm_gates_cell_only_use_still_flows(self):
        rng = np.random.default_rng(37)
        params = {"z": rng.normal(size=(4, 2)), "c0": rng.normal(size=(1, 2))}

        def build(tape, n):
            _h, c = tape.lstm_gates(n["z"], n["c0"])
            return tape.sum_pool(tape.sum_columns(c))

        report = grad_check(build, params)
        assert report.passed, report


class TestDeterminism:
    def _run(self):
        rng = np.random.default_rng(123)
        w, x = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        tape = Tape()
        wn, xn = tape.leaf(w), tape.leaf(x)
        h, c = tape.lstm_gates(tape.vstack([xn] * 4), tape.tanh(tape.matmul(wn, xn)))
        loss = tape.sum_pool(tape.sum_columns(tape.add(h, c)))
        tape.backward(loss)
        return float(loss.value), wn.grad.copy(), xn.grad.copy()

    def test_bit_identical_reruns(self):
        l1, gw1, gx1 = self._run()
        l2, gw2, gx2 = self._run()
        assert l1 == l2
        np.testing.assert_array_equal(gw1, gw2)
        np.testing.assert_array_equal(gx1, gx2)


class TestNegativeControl:
    def test_corrupted_backward_is_detected(self, monkeypatch):
        class BrokenTape(Tape):
            def tanh(self, x):
                y = np.tanh(x.value)

                def backward(g):
                    ad._ensure_grad(x)
                    x.grad += 2.0 * g * (1.0 - y * y)  # deliberately doubled

                return self._record("tanh", y, (x,), backward)

        monkeypatch.setattr(ad, "Tape", BrokenTape)
        report = ad.grad_check(
            lambda tape, n: tape.sum_pool(tape.tanh(n["x"])), {"x": [0.3, -0.7]}
        )
        assert not report.passed
        assert report.worst() > 0.01
