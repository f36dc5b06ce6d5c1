import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarlab import autograd as ag
from sarlab.optim import LinearSchedule, NumericalError, OptimizerState, adamw_step


class TestSchedule:
    def test_peak_at_five_percent(self):
        s = LinearSchedule(2e-5, 1000)
        assert s.lr_at(50) == pytest.approx(2e-5, rel=1e-15)

    def test_ramp_start_and_decay_end(self):
        s = LinearSchedule(1.0, 200)
        assert s.lr_at(0) == 0.0
        assert s.lr_at(200) == 0.0

    def test_peak_attained_exactly_once(self):
        s = LinearSchedule(1.0, 400)
        values = [s.lr_at(t) for t in range(401)]
        assert values.count(max(values)) == 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(20, 2000))
    def test_piecewise_linear_and_continuous(self, total):
        s = LinearSchedule(1.0, total)
        lr = np.array([s.lr_at(t) for t in range(total + 1)])
        steps = np.abs(np.diff(lr))
        # consecutive steps never jump by more than the steeper slope
        w = s.warmup_steps
        assert steps.max() <= max(1.0 / w, 1.0 / (total - w)) + 1e-12
        second = np.diff(lr, 2)
        # second differences vanish away from the kink
        assert (np.abs(second) > 1e-12).sum() <= 2


class TestAdamW:
    def test_decay_only_step(self):
        p = ag.parameter([1.0, -2.0, 4.0])
        st_ = OptimizerState({"p": p}, LinearSchedule(0.1, 10, 0.0), weight_decay=0.01)
        st_.zero_grad()
        adamw_step(st_)
        lr = st_.schedule.lr_at(1)
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 4.0]) * (1 - lr * 0.01),
                                   rtol=1e-15)

    def test_first_step_is_signed_lr(self):
        p = ag.parameter([0.0, 0.0, 0.0])
        s = OptimizerState({"p": p}, LinearSchedule(0.1, 10, 0.0), eps=1e-12,
                           weight_decay=0.0, max_grad_norm=None)
        p.grad = np.array([3.0, -0.5, 1e-3])
        lr = adamw_step(s)
        np.testing.assert_allclose(p.data, -lr * np.sign([3.0, -0.5, 1e-3]), rtol=1e-6)

    def test_decoupled_decay_with_zero_lr_is_noop(self):
        p = ag.parameter([1.0])
        s = OptimizerState({"p": p}, LinearSchedule(0.0, 10, 0.0))
        p.grad = np.array([1.0])
        adamw_step(s)
        assert p.data[0] == 1.0

    def test_two_steps_decrease_quadratic(self):
        target = np.array([1.0, -3.0, 0.5])
        p = ag.parameter(np.zeros(3))
        s = OptimizerState({"p": p}, LinearSchedule(0.05, 10, 0.0))

        def loss():
            return ag.sq_norm(ag.sub(p, ag.tensor(target)))

        values = []
        for _ in range(3):
            s.zero_grad()
            out = loss()
            values.append(out.item())
            ag.backward(out)
            adamw_step(s)
        assert values[0] > values[1] > values[2]

    def test_global_norm_clipping(self):
        p, q = ag.parameter([0.0]), ag.parameter([0.0])
        s = OptimizerState({"p": p, "q": q}, LinearSchedule(0.1, 10, 0.0), weight_decay=0.0)
        p.grad, q.grad = np.array([30.0]), np.array([40.0])
        adamw_step(s)
        # after clipping to unit norm the first moments hold 0.1 * (0.6, 0.8)
        np.testing.assert_allclose([s.m["p"][0], s.m["q"][0]], [0.06, 0.08], rtol=1e-12)

    def test_nan_gradient_names_parameter(self):
        p = ag.parameter([1.0])
        s = OptimizerState({"encoder.w": p}, LinearSchedule(0.1, 10))
        p.grad = np.array([np.nan])
        with pytest.raises(NumericalError, match="encoder.w"):
            adamw_step(s)
        assert p.data[0] == 1.0

    def test_parameters_outside_state_untouched(self):
        p, other = ag.parameter([1.0]), ag.parameter([2.0])
        s = OptimizerState({"p": p}, LinearSchedule(0.1, 10))
        p.grad, other.grad = np.array([1.0]), np.array([1.0])
        adamw_step(s)
        assert other.data[0] == 2.0
