import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stseg.errors import ValidationError
from stseg.gradcheck import grad_check
from stseg import functional as F
from stseg.optim import OptimizerState, adam_step, onecycle_lr
from stseg.tensor import Tensor


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = Tensor(np.array([1.0, -2.0]))
    st_ = OptimizerState(lr=0.1)
    st_.m["p"] = np.array([0.5, 0.5])
    st_.v["p"] = np.array([0.25, 0.25])
    before_m = st_.m["p"].copy()
    adam_step({"p": p}, {"p": np.zeros(2)}, st_)
    # moments decay; the bias-corrected step is nonzero only through the old moments
    np.testing.assert_allclose(st_.m["p"], 0.9 * before_m)
    np.testing.assert_allclose(st_.v["p"], 0.999 * 0.25)
    fresh = Tensor(np.array([1.0, -2.0]))
    adam_step({"p": fresh}, {"p": np.zeros(2)}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(fresh.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    lr = 1e-3
    p = Tensor(np.array([0.0]))
    s = adam_step({"p": p}, {"p": np.array([1.0])}, OptimizerState(lr=lr))
    # m_hat = 1, v_hat = 1 -> update lr / (1 + eps)
    assert abs(abs(p.data[0]) - lr / (1 + 1e-8)) < 1e-6 * lr
    assert s.step == 1


def test_adam_identical_params_identical_updates(rng):
    g = rng.normal(size=(3, 3))
    a, b = Tensor(np.ones((3, 3))), Tensor(np.ones((3, 3)))
    s = OptimizerState(lr=0.01)
    for _ in range(5):
        adam_step({"a": a, "b": b}, {"a": g, "b": g.copy()}, s)
    assert a.data.tobytes() == b.data.tobytes()
    assert s.step == 5


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValidationError):
        adam_step({"p": Tensor(np.zeros(1))}, {"p": np.zeros(1)}, OptimizerState(), lr=0.0)


def test_onecycle_endpoints():
    total, lr = 1000, 3e-3
    assert onecycle_lr(0, total, lr) == pytest.approx(lr / 25, rel=1e-12)
    assert onecycle_lr(round(0.3 * total), total, lr) == pytest.approx(lr, rel=1e-12)
    assert abs(onecycle_lr(total - 1, total, lr) - lr / 1e4) <= 0.01 * lr / 1e4


@settings(max_examples=40, deadline=None)
@given(total=st.integers(4, 5000), max_lr=st.floats(1e-5, 1.0))
def test_onecycle_shape(total, max_lr):
    lrs = np.array([onecycle_lr(s, total, max_lr) for s in range(total)])
    peak = int(np.argmax(lrs))
    assert lrs.max() == pytest.approx(max_lr, rel=1e-12)
    assert np.all(np.diff(lrs[: peak + 1]) >= 0)
    assert np.all(np.diff(lrs[peak:]) <= 1e-18)
    assert lrs[0] == pytest.approx(max_lr / 25, rel=1e-12)
    assert abs(lrs[-1] - max_lr / 1e4) <= 0.01 * max_lr / 1e4


def test_onecycle_out_of_range():
    with pytest.raises(ValidationError):
        onecycle_lr(10, 10, 1e-3)
    with pytest.raises(ValidationError):
        onecycle_lr(-1, 10, 1e-3)


# -- grad_check harness -------------------------------------------------------


def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda t: (t * t).sum(), rng.normal(size=(4, 3))) < 1e-7


def test_grad_check_constant_function(rng):
    assert grad_check(lambda t: (t * 0.0).sum() + 3.0, rng.normal(size=5)) == 0.0


def test_grad_check_cross_entropy_of_conv3d(rng):
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
    labels = rng.integers(0, 3, size=(1, 4, 3, 3))
    err = grad_check(lambda x: F.cross_entropy(F.conv3d(x, w), labels), rng.normal(size=(1, 2, 4, 3, 3)))
    assert err < 1e-4


def test_grad_check_detects_wrong_gradient(rng):
    from stseg.tensor import make_result

    def bad_square(t):
        return make_result(t.data**2, (t,), lambda g: (g * t.data,))  # missing factor 2

    assert grad_check(lambda t: bad_square(t).sum(), rng.uniform(1, 2, size=4)) > 0.3


def test_grad_check_non_finite_raises():
    with pytest.raises(ValidationError), np.errstate(divide="ignore"):
        grad_check(lambda t: (t / Tensor(np.zeros(2))).sum(), np.ones(2))


def test_grad_check_sampled_coordinates(rng):
    err = grad_check(lambda t: (t**3).sum(), rng.normal(size=(50,)), max_checks=5, rng=np.random.default_rng(0))
    assert err < 1e-6
    assert math.isfinite(err)
