"""Tape correctness: per-op finite-difference checks, Adam, determinism."""

import numpy as np
import pytest

from anomaly3d import autodiff as ad
from anomaly3d.errors import NumericalOverflowError


def numeric_grad(f, param: ad.Parameter, eps: float = 1e-6) -> np.ndarray:
    """Independent central-difference gradient of a scalar builder."""
    flat = param.t.data.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(param.t.data.shape)


def analytic_grad(f, param: ad.Parameter) -> np.ndarray:
    param.zero_grad()
    ad.backward(f())
    return param.gradient.copy()


def assert_grad_close(f, param, rtol=1e-5):
    num = numeric_grad(f, param)
    ana = analytic_grad(f, param)
    np.testing.assert_allclose(ana, num, rtol=rtol, atol=1e-8)


def test_square_at_three():
    x = ad.Parameter(np.array(3.0))
    value = ad.backward(x.t * x.t)
    assert value == 9.0
    assert x.gradient == 6.0


def test_sum_gradient_is_ones():
    x = ad.Parameter(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.tsum(x.t))
    np.testing.assert_array_equal(x.gradient, np.ones((2, 3)))


@pytest.mark.parametrize("opname", [
    "add", "sub", "mul", "div", "matmul", "exp", "log", "sqrt", "power",
    "sigmoid", "softplus", "gelu", "clip", "sum_axis", "mean", "max",
    "concat", "reshape", "slice0",
])
def test_op_gradients_match_finite_differences(opname):
    rng = np.random.default_rng(sum(map(ord, opname)))
    for _ in range(50):
        x = ad.Parameter(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        other = rng.standard_normal((4, 3))

        def build():
            t = x.t
            if opname == "add":
                y = t + ad.const(w)
            elif opname == "sub":
                y = ad.const(w) - t
            elif opname == "mul":
                y = t * ad.const(w)
            elif opname == "div":
                y = t / ad.const(np.abs(w) + 1.0)
            elif opname == "matmul":
                y = t @ ad.const(other)
            elif opname == "exp":
                y = ad.texp(t * 0.3)
            elif opname == "log":
                y = ad.tlog(ad.texp(t) + 1.0)
            elif opname == "sqrt":
                y = ad.tsqrt(t * t + 1.0)
            elif opname == "power":
                y = ad.power(ad.sigmoid(t), 2.5)
            elif opname == "sigmoid":
                y = ad.sigmoid(t * 3.0)
            elif opname == "softplus":
                y = ad.softplus(t * 2.0)
            elif opname == "gelu":
                y = ad.gelu(t)
            elif opname == "clip":
                y = ad.clip(t, -0.5, 0.5)
            elif opname == "sum_axis":
                y = ad.tsum(t, axis=1) * ad.const(w[:, 0])
            elif opname == "mean":
                y = ad.tmean(t, axis=0)
            elif opname == "max":
                y = ad.amax(t)
            elif opname == "concat":
                y = ad.concat([t, t * 2.0], axis=0)
            elif opname == "reshape":
                y = ad.reshape(t, (4, 3))
            elif opname == "slice0":
                y = ad.slice0(t, 1)
            return ad.tsum(y * y)

        assert_grad_close(build, x)


def test_clip_gradient_zero_outside_range():
    x = ad.Parameter(np.array([-2.0, 0.0, 2.0]))
    ad.backward(ad.tsum(ad.clip(x.t, -1.0, 1.0)))
    np.testing.assert_array_equal(x.gradient, [0.0, 1.0, 0.0])


def test_max_tie_breaks_to_first_argmax():
    x = ad.Parameter(np.array([1.0, 3.0, 3.0, 2.0]))
    ad.backward(ad.amax(x.t))
    np.testing.assert_array_equal(x.gradient, [0.0, 1.0, 0.0, 0.0])


def test_reverse_accumulation_is_linear():
    rng = np.random.default_rng(1)
    x = ad.Parameter(rng.standard_normal(5))
    a, b = 2.5, -1.25

    def f():
        return ad.tsum(ad.sigmoid(x.t))

    def g():
        return ad.tsum(x.t * x.t)

    gf = analytic_grad(f, x)
    gg = analytic_grad(g, x)
    combo = analytic_grad(lambda: a * f() + b * g(), x)
    np.testing.assert_allclose(combo, a * gf + b * gg, atol=1e-10)


def test_nonfinite_result_raises():
    x = ad.Parameter(np.array([800.0]))
    with pytest.raises(NumericalOverflowError, match="numerical overflow"):
        ad.texp(x.t)


def test_gelu_values():
    x = ad.const(np.array([0.0, 1.0, 30.0, -30.0]))
    y = ad.gelu(x).data
    assert y[0] == 0.0
    # Phi(1) = 0.8413447460685429 via erf
    assert abs(y[1] - 0.8413447460685429) < 1e-12
    assert abs(y[2] - 30.0) < 1e-12
    assert abs(y[3]) < 1e-12


class TestAdam:
    def test_zero_gradient_keeps_fresh_parameter(self):
        p = ad.Parameter(np.array([1.0, -2.0]))
        p.t.grad = np.zeros(2)
        ad.adam_step(p, lr=1e-3)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_moments_decay_toward_zero_on_zero_gradient(self):
        p = ad.Parameter(np.array([1.0]))
        p.m = np.array([0.5])
        p.v = np.array([0.25])
        p.t.grad = np.zeros(1)
        ad.adam_step(p, lr=1e-3)
        assert abs(p.m[0]) < 0.5 and abs(p.v[0]) < 0.25

    def test_first_step_matches_recurrence(self):
        # t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        g = np.array([0.3, -4.0, 1e-3])
        lr, eps = 1e-3, 1e-8
        p = ad.Parameter(np.zeros(3))
        p.t.grad = g.copy()
        ad.adam_step(p, lr=lr, eps=eps)
        expected = -lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
        assert p.step == 1

    def test_two_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            p = ad.Parameter(rng.standard_normal(4))
            for _ in range(10):
                p.zero_grad()
                ad.backward(ad.tsum(ad.sigmoid(p.t) * p.t))
                ad.adam_step(p)
            return p.data.copy()

        a, b = run(), run()
        np.testing.assert_array_equal(a, b)

    def test_nonpositive_lr_rejected(self):
        p = ad.Parameter(np.zeros(1))
        p.t.grad = np.ones(1)
        with pytest.raises(ValueError):
            ad.adam_step(p, lr=0.0)


def test_check_gradients_agrees_with_manual_oracle():
    rng = np.random.default_rng(3)
    x = ad.Parameter(rng.standard_normal((2, 3)))

    def build():
        return ad.tmean(ad.gelu(x.t) * x.t)

    worst = ad.check_gradients(build, [x], rng, coords_per_param=6)
    assert worst < 1e-6
