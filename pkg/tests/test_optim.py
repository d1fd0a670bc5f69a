import math

import numpy as np
import pytest

from tailcast.autodiff import parameter
from tailcast.optim import AdamW, NonFiniteGradientError, global_norm_clip


def test_global_norm_clip_noop_below_threshold():
    grads = [np.array([0.3, 0.4])]  # norm 0.5
    out = global_norm_clip(grads, 1.0)
    np.testing.assert_array_equal(out[0], grads[0])


def test_global_norm_clip_scales_jointly():
    grads = [np.array([3.0, 0.0]), np.array([4.0])]  # joint norm 5
    out = global_norm_clip(grads, 1.0)
    joint = math.sqrt(sum(float(np.sum(g * g)) for g in out))
    assert joint == pytest.approx(1.0)
    # direction preserved
    assert out[0][0] / out[1][0] == pytest.approx(3.0 / 4.0)


def test_global_norm_clip_none_disables():
    grads = [np.array([100.0])]
    assert global_norm_clip(grads, None)[0][0] == 100.0


def test_adamw_first_step_closed_form():
    # first Adam step moves each coordinate by ~lr * sign(g)
    p = parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.25])
    opt = AdamW([p], lr=0.1, clip=None)
    opt.step()
    expected = np.array([1.0, -2.0]) - 0.1 * np.sign([0.5, -0.25]) / (1.0 + 1e-8)
    np.testing.assert_allclose(p.value, expected, rtol=1e-6)


def test_adamw_decoupled_weight_decay():
    p = parameter(np.array([10.0]))
    p.grad = np.array([0.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.01, clip=None)
    opt.step()
    # zero gradient: only the decay term moves the parameter
    assert p.value[0] == pytest.approx(10.0 - 0.1 * 0.01 * 10.0)


def test_adamw_refuses_non_finite():
    p = parameter(np.array([1.0]))
    p.grad = np.array([np.nan])
    opt = AdamW([p])
    with pytest.raises(NonFiniteGradientError):
        opt.step()
    np.testing.assert_array_equal(p.value, [1.0])  # untouched


def test_adamw_zero_grad():
    p = parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    opt = AdamW([p])
    opt.zero_grad()
    assert p.grad is None


def test_adamw_converges_on_quadratic():
    from tailcast.autodiff import backward, constant, mul, sum_, sub

    target = np.array([1.0, -3.0, 2.0])
    p = parameter(np.zeros(3))
    opt = AdamW([p], lr=0.05, clip=None)
    for _ in range(2000):
        opt.zero_grad()
        d = sub(p, constant(target))
        backward(sum_(mul(d, d)))
        opt.step()
    np.testing.assert_allclose(p.value, target, atol=1e-3)


def test_missing_grad_treated_as_zero():
    p = parameter(np.array([5.0]))
    opt = AdamW([p], lr=0.1, clip=None)
    opt.step()
    assert p.value[0] == pytest.approx(5.0)
