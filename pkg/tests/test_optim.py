import math

import numpy as np
import pytest

from latentloop.optim import NonFiniteGradientError, Optimizer, OptimizerConfig
from latentloop.tensor import Tensor, backward, mul, tsum


def make_param(val):
    return {"w": Tensor(np.array(val, dtype=np.float32), requires_grad=True)}


def test_zero_grad_zero_decay_leaves_params_unchanged():
    params = make_param([1.0, -2.0, 3.0])
    opt = Optimizer(params, OptimizerConfig(weight_decay=0.0, warmup_steps=0))
    params["w"].grad = np.zeros(3, dtype=np.float32)
    before = params["w"].data.copy()
    opt.step()
    assert np.array_equal(params["w"].data, before)


def test_atan2_saturation_limit():
    # one step with m_hat > 0 and v_hat -> 0 moves by ~lr * pi/2, not 1/sqrt(v)
    params = make_param([0.0])
    lr = 1e-2
    opt = Optimizer(params, OptimizerConfig(lr=lr, weight_decay=0.0, warmup_steps=0))
    params["w"].grad = np.array([1e-20], dtype=np.float32)
    opt.step()
    # after bias correction m_hat = g and v_hat = g^2; atan2(g, |g|) = pi/4 for
    # finite g, but as v -> 0 exactly the step saturates at pi/2
    params2 = make_param([0.0])
    opt2 = Optimizer(params2, OptimizerConfig(lr=lr, weight_decay=0.0, warmup_steps=0))
    opt2.m["w"][:] = 1.0
    opt2.v["w"][:] = 0.0
    # drive the internal update directly: beta1*m + (1-b1)*g with g=0 keeps m>0
    params2["w"].grad = np.array([0.0], dtype=np.float32)
    opt2.step()
    assert abs(abs(params2["w"].data[0]) - lr * math.pi / 2) < 1e-6


def test_quadratic_loss_decreases():
    # atan2 steps have near-constant magnitude ~lr*pi/4 away from the optimum,
    # so over 100 steps at lr=1e-3 the quadratic descends strictly
    params = make_param([1.0])
    opt = Optimizer(params, OptimizerConfig(lr=1e-3, weight_decay=0.0, warmup_steps=0))
    losses = []
    for _ in range(100):
        loss = tsum(mul(params["w"], params["w"]))
        losses.append(loss.item())
        opt.zero_grad()
        backward(loss)
        opt.step()
    assert all(l2 < l1 for l1, l2 in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_warmup_schedule():
    params = make_param([1.0])
    opt = Optimizer(params, OptimizerConfig(lr=1e-3, warmup_steps=10))
    assert opt.effective_lr(1) == pytest.approx(1e-4)
    assert opt.effective_lr(5) == pytest.approx(5e-4)
    assert opt.effective_lr(10) == pytest.approx(1e-3)
    assert opt.effective_lr(500) == pytest.approx(1e-3)


def test_nonfinite_gradient_aborts_step():
    params = make_param([1.0])
    opt = Optimizer(params, OptimizerConfig())
    params["w"].grad = np.array([float("inf")], dtype=np.float32)
    before = params["w"].data.copy()
    with pytest.raises(NonFiniteGradientError):
        opt.step()
    assert np.array_equal(params["w"].data, before)
    assert opt.t == 0


def test_ema_converges_to_frozen_params():
    params = make_param([2.0, -1.0])
    opt = Optimizer(params, OptimizerConfig(ema_ratio=0.999))
    p = params["w"].data
    opt.ema["w"] = p + np.array([1.0, -1.0], dtype=np.float32)
    gap0 = np.abs(opt.ema["w"] - p).copy()
    n = 200
    opt.config.weight_decay = 0.0  # freeze params: zero grad + zero decay
    for _ in range(n):
        params["w"].grad = np.zeros(2, dtype=np.float32)
        opt.step()
    # decay ratio at stored (f32) precision
    ratio = float(np.float32(0.999))
    assert np.all(np.abs(opt.ema["w"] - p) <= gap0 * ratio ** n + 1e-6)


def test_plain_adam_variant():
    params = make_param([1.0])
    opt = Optimizer(params, OptimizerConfig(variant="adam", lr=1e-1,
                                            weight_decay=0.0, warmup_steps=0))
    params["w"].grad = np.array([1.0], dtype=np.float32)
    opt.step()
    # first Adam step moves by ~lr regardless of gradient scale
    assert params["w"].data[0] == pytest.approx(1.0 - 0.1, abs=1e-4)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        Optimizer(make_param([1.0]), OptimizerConfig(variant="sgd"))
