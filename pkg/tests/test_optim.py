import math

import numpy as np
import pytest

from softsense.loss import compute_beta, compute_loss
from softsense.model import ModelConfig, build_model, commit_batchnorm, model_backward, model_forward
from softsense.numeric import make_rng
from softsense.optim import AdamState, EarlyStopState, ScheduleConfig, adam_step, early_stop_update, noam_lr


class TestSchedule:
    def test_peak(self):
        cfg = ScheduleConfig(d=64, warmup=4000)
        assert abs(noam_lr(4000, cfg) - 0.1 / (8 * math.sqrt(4000))) < 1e-15
        assert abs(noam_lr(4000, cfg) - 1.9764e-4) < 1e-8

    def test_first_step(self):
        assert noam_lr(1, ScheduleConfig()) == pytest.approx(0.1 * 0.125 * 4000**-1.5)
        assert noam_lr(1, ScheduleConfig()) == pytest.approx(4.941e-8, rel=1e-3)

    @pytest.mark.parametrize("d,warmup", [(1, 1), (64, 4000), (16, 50)])
    def test_up_then_down(self, d, warmup):
        cfg = ScheduleConfig(d=d, warmup=warmup)
        lr = np.array([noam_lr(s, cfg) for s in range(1, 20001)])
        up, down = lr[:warmup], lr[warmup - 1 :]
        assert np.all(np.diff(up) > 0)
        assert np.all(np.diff(down) < 0)

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            noam_lr(0, ScheduleConfig())


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"w": np.array([0.0])}
        adam_step(params, {"w": np.array([1.0])}, AdamState(), 0.01)
        assert params["w"][0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)

    def test_zero_gradient_identity(self):
        params = {"w": np.array([1.0, -2.0])}
        st = AdamState()
        for _ in range(10):
            adam_step(params, {"w": np.zeros(2)}, st, 0.1)
        assert params["w"].tolist() == [1.0, -2.0]

    def test_update_bound(self):
        rng = make_rng(0)
        params = {"w": np.zeros(50)}
        st = AdamState()
        lr = 0.01
        for _ in range(20):
            before = params["w"].copy()
            adam_step(params, {"w": rng.normal(scale=rng.uniform(0.01, 100), size=50)}, st, lr)
            assert np.all(np.abs(params["w"] - before) <= lr / (1 - st.beta1) + 1e-15)

    def test_unknown_gradient(self):
        with pytest.raises(KeyError):
            adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, AdamState(), 0.1)


class TestEarlyStop:
    def test_decreasing_never_stops(self):
        st = EarlyStopState(patience=3)
        for i in range(50):
            assert early_stop_update(st, 10.0 - 0.1 * i)
        assert not st.stopped and st.best_epoch == 50

    def test_constant_stops(self):
        st = EarlyStopState(patience=100)
        for _ in range(101):
            early_stop_update(st, 1.0)
        assert not st.stopped
        early_stop_update(st, 1.0)
        assert st.stopped and st.best_epoch == 1

    def test_dip_resets_counter(self):
        st = EarlyStopState(patience=5)
        early_stop_update(st, 1.0)
        for _ in range(5):
            early_stop_update(st, 1.0)
        assert early_stop_update(st, 0.5)
        for _ in range(5):
            early_stop_update(st, 0.7)
        assert not st.stopped and st.best_epoch == 7

    def test_min_delta(self):
        st = EarlyStopState(patience=1, min_delta=1e-9)
        early_stop_update(st, 1.0)
        assert not early_stop_update(st, 1.0 - 1e-12)

    def test_nan_fails(self):
        st = EarlyStopState()
        early_stop_update(st, float("nan"))
        assert st.stopped and st.failed


def test_single_sample_overfit():
    cfg = ModelConfig(input_features=3, timesteps=2, num_tasks=1, embed_dim=8, dropout_rate=0.0)
    st = build_model(cfg, make_rng(0))
    x = make_rng(1).random((1, 2, 3))
    y = np.ones((1, 1))
    weights = compute_beta([1], 1, 1)
    adam = AdamState()
    losses = []
    for _ in range(50):
        Y, trace = model_forward(x, st, "train", make_rng(2))
        rep = compute_loss(y, Y, weights, np.ones((1, 1)), None)
        losses.append(rep.objective)
        grads = model_backward(trace, rep.dY, st)
        commit_batchnorm(st, trace)
        adam_step(st.params, grads, adam, 1e-2)
    assert losses[-1] < losses[0]
    assert losses[-1] < 0.5 * losses[0]
