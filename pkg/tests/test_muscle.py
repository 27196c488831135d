import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from mupiano import muscle
from mupiano.muscle import MuscleParams

P = MuscleParams()


def test_activation_rise_analytic():
    a1 = muscle.activation_step(0.0, 1.0, P.tau_act, P)
    assert a1 == pytest.approx(1.0 - np.exp(-1.0), abs=1e-12)


def test_activation_fixed_point():
    for dt in (1e-4, 0.01, 1.0):
        assert muscle.activation_step(0.5, 0.5, dt, P) == pytest.approx(0.5)


def test_activation_decay_analytic():
    a1 = muscle.activation_step(1.0, 0.0, P.tau_deact, P)
    assert a1 == pytest.approx(np.exp(-1.0), abs=1e-12)


def test_activation_clips_control():
    assert muscle.activation_step(0.0, 5.0, 1.0, P) <= 1.0
    assert muscle.activation_step(1.0, -3.0, 1.0, P) >= 0.0


def test_activation_rejects_nonfinite():
    with pytest.raises(muscle.MuscleInputError):
        muscle.activation_step(np.nan, 0.5, 0.01, P)
    with pytest.raises(muscle.MuscleInputError):
        muscle.activation_step(0.5, np.inf, 0.01, P)
    with pytest.raises(muscle.MuscleInputError):
        muscle.activation_step(0.5, 0.5, 0.0, P)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 1), u=st.floats(0, 1),
       dt=st.floats(1e-6, 10.0, allow_nan=False))
def test_activation_stays_in_bounds(a, u, dt):
    out = muscle.activation_step(a, u, dt, P)
    assert 0.0 <= out <= 1.0


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 1), u=st.floats(0, 1), dt=st.floats(1e-5, 0.05))
def test_activation_semigroup(a, u, dt):
    # two half steps equal one full step while u stays on one side of a
    two = muscle.activation_step(muscle.activation_step(a, u, dt, P), u, dt, P)
    one = muscle.activation_step(a, u, 2 * dt, P)
    assert two == pytest.approx(one, abs=1e-12)


def test_fiber_length_linear():
    l_norm, sat = muscle.normalized_fiber_length(P.l_slack + P.l_opt, P)
    assert l_norm == pytest.approx(1.0) and not sat
    l_norm, sat = muscle.normalized_fiber_length(P.l_slack + 1.2 * P.l_opt, P)
    assert l_norm == pytest.approx(1.2) and not sat


def test_fiber_length_saturation():
    l_norm, sat = muscle.normalized_fiber_length(P.l_slack, P)
    assert l_norm == 0.01 and sat
    l_norm, sat = muscle.normalized_fiber_length(0.0, P)
    assert l_norm == 0.01 and sat


def test_active_fl_values():
    assert muscle.active_fl(1.0, P) == 1.0
    assert muscle.active_fl(1.0 + P.fl_width, P) == pytest.approx(np.exp(-1.0))
    assert muscle.active_fl(50.0, P) < 1e-300


def test_force_velocity_values():
    assert muscle.force_velocity(0.0, P) == 1.0
    assert muscle.force_velocity(-1.0, P) == 0.0
    assert muscle.force_velocity(-2.0, P) == 0.0
    assert muscle.force_velocity(1e9, P) == pytest.approx(1.5, rel=1e-6)


def test_passive_force_knee():
    assert muscle.passive_force(1.0, MuscleParams(fp_knee=1.0)) == 0.0
    assert muscle.passive_force(P.fp_knee, P) == 0.0
    assert muscle.passive_force(0.2, P) == 0.0
    expected = P.fp_gain * (np.e - 1.0)
    assert muscle.passive_force(P.fp_knee + 1.0, P) == pytest.approx(expected)


def test_muscle_force_fixtures():
    assert muscle.muscle_force(P, 0.0, 1.0, 0.0) == 0.0
    assert muscle.muscle_force(P, 1.0, 1.0, 0.0) == pytest.approx(P.f_max)


def test_muscle_force_nonnegative_random():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, 20000)
    l = rng.uniform(0.01, 2.5, 20000)
    v = rng.uniform(-3, 3, 20000)
    f = muscle.muscle_force(P, a, l, v)
    assert np.all(f >= 0.0)


def test_muscle_force_rejects_bad_activation():
    with pytest.raises(muscle.MuscleInputError):
        muscle.muscle_force(P, 1.5, 1.0, 0.0)


def _sympy_curves():
    l, v = sympy.symbols("l v")
    fl = sympy.exp(-(((l - 1) / P.fl_width) ** 2))
    fv_short = (1 + v) / (1 - v / P.fv_shape)
    fv_long = 1 + 0.5 * v / (v + 0.1 * P.fv_shape)
    fp = P.fp_gain * (sympy.exp(l - P.fp_knee) - 1)
    return l, v, fl, fv_short, fv_long, fp


def test_curve_derivatives_match_finite_differences():
    l, v, fl, fv_short, fv_long, fp = _sympy_curves()
    rng = np.random.default_rng(7)
    h = 1e-6

    dfl = sympy.lambdify(l, sympy.diff(fl, l))
    for x in rng.uniform(0.2, 2.0, 100):
        fd = (muscle.active_fl(x + h, P) - muscle.active_fl(x - h, P)) / (2 * h)
        assert fd == pytest.approx(dfl(x), abs=1e-4, rel=1e-4)

    dshort = sympy.lambdify(v, sympy.diff(fv_short, v))
    dlong = sympy.lambdify(v, sympy.diff(fv_long, v))
    for x in rng.uniform(-0.95, 2.0, 100):
        if abs(x) < 0.01:  # value kink at rest is allowed, slope is not tested
            continue
        fd = (muscle.force_velocity(x + h, P) - muscle.force_velocity(x - h, P)) / (2 * h)
        ref = dshort(x) if x < 0 else dlong(x)
        assert fd == pytest.approx(ref, abs=1e-4, rel=1e-4)

    dfp = sympy.lambdify(l, sympy.diff(fp, l))
    for x in rng.uniform(P.fp_knee + 0.01, 2.5, 100):
        fd = (muscle.passive_force(x + h, P) - muscle.passive_force(x - h, P)) / (2 * h)
        assert fd == pytest.approx(dfp(x), abs=1e-4, rel=1e-4)


def test_curve_continuity_at_kinks():
    for f, x0 in ((lambda x: muscle.force_velocity(x, P), 0.0),
                  (lambda x: muscle.force_velocity(x, P), -1.0),
                  (lambda x: muscle.passive_force(x, P), P.fp_knee)):
        assert f(x0 - 1e-9) == pytest.approx(f(x0 + 1e-9), abs=1e-6)


def test_step_response_time_constant():
    # 63.21% of a unit command after exactly tau_act
    a = muscle.activation_step(0.0, 1.0, P.tau_act, P)
    assert abs(a - (1 - np.exp(-1.0))) < 1e-9 * (1 - np.exp(-1.0))


def test_params_validation():
    with pytest.raises(muscle.MuscleInputError):
        MuscleParams(tau_act=0.05, tau_deact=0.04)
    with pytest.raises(muscle.MuscleInputError):
        MuscleParams(fl_width=1.5)
    with pytest.raises(muscle.MuscleInputError):
        MuscleParams(fp_knee=0.5)
    with pytest.raises(muscle.MuscleInputError):
        MuscleParams(f_max=-1.0)


def test_stacked_params_vectorize():
    stacked = muscle.stack_params([MuscleParams(), MuscleParams(tau_act=0.02,
                                                                tau_deact=0.05)])
    out = muscle.activation_step(np.zeros(2), np.ones(2), 0.01, stacked)
    assert out.shape == (2,)
    assert out[0] == pytest.approx(1 - np.exp(-1.0))
    assert out[1] == pytest.approx(1 - np.exp(-0.5))
