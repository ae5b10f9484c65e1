import math

import numpy as np
import pytest

from amsnet.harness.config import TrainConfig
from amsnet.harness.optim import Adam, adam_update, lr_at
from amsnet.harness.model import Linear


CFG = TrainConfig(epochs=60, warmup_epochs=10, base_lr=3.5e-4, final_lr=7.7e-7)


def test_schedule_anchor_points():
    assert lr_at(0, CFG) == pytest.approx(3.5e-6)
    assert lr_at(5, CFG) == pytest.approx(3.5e-6 + 0.5 * (3.5e-4 - 3.5e-6))
    assert lr_at(10, CFG) == pytest.approx(3.5e-4)
    assert lr_at(59, CFG) == 7.7e-7
    assert lr_at(80, CFG) == 7.7e-7
    mid = 10 + (59 - 10) / 2
    assert lr_at(mid, CFG) == pytest.approx((3.5e-4 + 7.7e-7) / 2)


def test_schedule_continuous_and_monotone():
    t = np.linspace(0, 59, 5901)
    lr = np.array([lr_at(e, CFG) for e in t])
    warm = t < 10
    assert np.all(np.diff(lr[warm]) > 0)
    assert np.all(np.diff(lr[~warm]) <= 0)
    assert np.abs(np.diff(lr)).max() < 1e-6
    assert abs(lr_at(10 - 1e-9, CFG) - lr_at(10, CFG)) < 1e-12


def test_no_warmup():
    cfg = TrainConfig(epochs=5, warmup_epochs=0)
    assert lr_at(0, cfg) == cfg.base_lr


def textbook_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * (mh / (math.sqrt(vh) + eps) + wd * p)
    return p


@pytest.mark.parametrize("wd", [0.0, 5e-4])
def test_adam_matches_scalar_reference(wd):
    rng = np.random.default_rng(9)
    grads = rng.normal(size=100)
    p, m, v = np.array([0.7]), np.zeros(1), np.zeros(1)
    for t, g in enumerate(grads, start=1):
        adam_update(p, np.array([g]), m, v, t, 1e-2, weight_decay=wd)
    assert abs(p[0] - textbook_adam(0.7, grads, 1e-2, wd=wd)) < 1e-12


def test_adam_optimizer_state_round_trip():
    rng = np.random.default_rng(0)
    layer = Linear(3, 2, rng)
    opt = Adam(layer, weight_decay=0.0)
    layer.grads["weight"][...] = 1.0
    opt.step(0.1)
    state = opt.state()
    other = Adam(layer)
    other.load_state(state, opt.t)
    assert other.t == 1
    for k in state:
        assert np.array_equal(other.state()[k], state[k])


def test_adam_first_step_moves_by_lr():
    rng = np.random.default_rng(0)
    layer = Linear(3, 2, rng)
    w0 = layer.params["weight"].copy()
    layer.grads["weight"][...] = rng.normal(size=w0.shape)
    Adam(layer, weight_decay=0.0).step(0.01)
    assert np.allclose(np.abs(layer.params["weight"] - w0), 0.01, rtol=1e-5)
