import json

import numpy as np
import pytest

from caggnet import functional as F
from caggnet.autograd import (
    AutogradError,
    Tape,
    backward,
    finite_diff_check,
)


def leaf(tape, data):
    return tape.leaf(np.asarray(data, dtype=np.float64))


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        t = Tape()
        x = leaf(t, np.arange(4.0).reshape(1, 1, 2, 2))
        loss = F.sum_all(x)
        grads = backward(t, loss)
        assert np.array_equal(grads.get(x.id), np.ones((1, 1, 2, 2)))

    def test_sum_of_squares_hand_gradient(self):
        # d/dx sum(x*x) = 2x, so x = [1, 2] gives [2, 4]
        t = Tape()
        x = leaf(t, np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
        loss = F.sum_all(F.mul(x, x))
        grads = backward(t, loss)
        assert np.allclose(grads.get(x.id), [[[[2.0, 4.0]]]], atol=0, rtol=0)

    def test_disconnected_leaf_has_no_gradient(self):
        t = Tape()
        x = leaf(t, np.ones((1, 1, 2, 2)))
        p = leaf(t, np.ones((1, 1, 3, 3)))
        loss = F.sum_all(x)
        grads = backward(t, loss)
        assert grads.get(p.id) is None
        assert p.id not in grads

    def test_multi_path_accumulation(self):
        t = Tape()
        x = leaf(t, np.full((1, 1, 2, 2), 3.0))
        loss = F.sum_all(F.add(x, x))
        grads = backward(t, loss)
        assert np.array_equal(grads.get(x.id), np.full((1, 1, 2, 2), 2.0))

    def test_non_scalar_loss_rejected(self):
        t = Tape()
        x = leaf(t, np.ones((1, 1, 2, 2)))
        y = F.add(x, x)
        with pytest.raises(AutogradError, match="1, 1, 1, 1"):
            backward(t, y)

    def test_foreign_id_rejected(self):
        t = Tape()
        leaf(t, np.ones((1, 1, 1, 1)))
        with pytest.raises(AutogradError, match="not on this tape"):
            backward(t, 99)

    def test_mixed_dtypes_rejected(self):
        t = Tape()
        t.leaf(np.ones((1, 1, 1, 1), dtype=np.float64))
        with pytest.raises(AutogradError, match="mixed"):
            t.leaf(np.ones((1, 1, 1, 1), dtype=np.float32))

    def test_leaf_registration_is_cached(self):
        t = Tape()
        arr = np.ones((1, 1, 2, 2))
        a = t.leaf(arr)
        b = t.leaf(arr)
        assert a.id == b.id
        assert t.leaf_id_for(arr) == a.id


class TestLinearityAndReplay:
    def test_backward_is_linear(self, rng):
        xv = rng.normal(size=(1, 2, 3, 3))
        yv = rng.normal(size=(1, 2, 3, 3))
        a, b = 1.7, -0.3

        def grads_of(scale_a, scale_b):
            t = Tape()
            x = t.leaf(xv)
            y = t.leaf(yv)
            l1 = F.sum_all(F.mul(x, x))
            l2 = F.sum_all(F.mul(x, y))
            combined = F.add(F.scale(l1, scale_a), F.scale(l2, scale_b))
            g = backward(t, combined)
            return g.get(x.id)

        combo = grads_of(a, b)
        g1 = grads_of(1.0, 0.0)
        g2 = grads_of(0.0, 1.0)
        assert np.max(np.abs(combo - (a * g1 + b * g2))) < 1e-10

    def test_replay_is_bit_identical(self, rng):
        t = Tape()
        x = t.leaf(rng.normal(size=(1, 2, 4, 4)))
        w = t.leaf(rng.normal(size=(3, 2, 3, 3)))
        b = t.leaf(np.zeros(3))
        loss = F.sum_all(F.relu(F.conv2d(x, w, b)))
        g1 = backward(t, loss)
        g2 = backward(t, loss)
        for tid, arr in g1.items():
            assert arr.tobytes() == g2.get(tid).tobytes()


class TestFiniteDiffCheck:
    def _quadratic_fn(self):
        def f(params, need_grad=False):
            t = Tape()
            x = t.leaf(params["x"])
            loss = F.sum_all(F.mul(x, x))
            val = float(loss.value.reshape(()))
            if not need_grad:
                return val
            grads = backward(t, loss)
            return val, {"x": grads.get(x.id)}

        return f

    def test_quadratic(self, rng):
        params = {"x": rng.normal(size=(1, 1, 3, 3))}
        report = finite_diff_check(self._quadratic_fn(), params, name="quadratic")
        assert report.passed
        assert report.max_rel_err < 1e-8

    def test_sigmoid_slope_at_zero(self):
        # sigmoid'(0) = 0.25 exactly
        params = {"w": np.zeros((1, 1, 1, 1))}

        def f(p, need_grad=False):
            t = Tape()
            w = t.leaf(p["w"])
            out = F.sigmoid(w)
            val = float(out.value.reshape(()))
            if not need_grad:
                return val
            grads = backward(t, out)
            return val, {"w": grads.get(w.id)}

        _, grads = f(params, need_grad=True)
        assert abs(float(grads["w"].reshape(())) - 0.25) < 1e-15
        report = finite_diff_check(f, params, name="sigmoid0")
        assert report.passed and report.max_rel_err < 1e-8

    def test_eps_bounds_enforced(self, rng):
        params = {"x": rng.normal(size=(1, 1, 2, 2))}
        with pytest.raises(AutogradError):
            finite_diff_check(self._quadratic_fn(), params, eps=1e-7)
        with pytest.raises(AutogradError):
            finite_diff_check(self._quadratic_fn(), params, eps=1e-2)

    def test_requires_double_precision(self):
        params = {"x": np.zeros((1, 1, 2, 2), dtype=np.float32)}
        with pytest.raises(AutogradError, match="float64"):
            finite_diff_check(self._quadratic_fn(), params)

    def test_sampled_coordinates_capped(self, rng):
        calls = {"n": 0}
        params = {"x": rng.normal(size=(1, 1, 40, 40))}
        base = self._quadratic_fn()

        def counting(p, need_grad=False):
            if not need_grad:
                calls["n"] += 1
            return base(p, need_grad)

        report = finite_diff_check(counting, params, max_coords=16)
        assert report.passed
        assert calls["n"] == 2 * 16

    def test_report_json_shape(self, rng):
        params = {"x": rng.normal(size=(1, 1, 2, 2))}
        report = finite_diff_check(self._quadratic_fn(), params, name="quad")
        payload = json.loads(report.to_json())
        assert set(payload) == {"op", "max_rel_err", "worst_coord", "passed"}
        assert payload["op"] == "quad"
        assert payload["passed"] is True


class TestRegistry:
    def test_duplicate_registration_rejected(self):
        from caggnet.autograd import register_backward

        with pytest.raises(AutogradError, match="twice"):
            register_backward("add", lambda node, g: (g, g))

    def test_unregistered_op_rejected(self):
        t = Tape()
        x = t.leaf(np.ones((1, 1, 1, 1)))
        with pytest.raises(AutogradError, match="no registered backward"):
            t.record("no_such_op", (x,), np.ones((1, 1, 1, 1)))

    def test_cross_tape_operands_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(np.ones((1, 1, 1, 1)))
        b = t2.leaf(np.ones((1, 1, 1, 1)))
        with pytest.raises(AutogradError, match="different tapes"):
            F.add(a, b)
