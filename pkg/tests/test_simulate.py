import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from exciter.errors import DimensionError, DomainError, SimulationError
from exciter.model import (ConstantExponential, Empirical, ExpRegimeDrift, IntensityScaledLognormal,
                           MarkedPath, ModelSpec)
from exciter.simulate import (IntensityState, SimConfig, _replay_expm, apply_jump, intensity_at,
                              propagate, replay, simulate_path, simulate_paths)

EXP1 = ConstantExponential(1.0)


def linear2(A=((-1.0, 0.1), (0.05, -0.9)), B=((0.3, 0.1), (0.3, 0.2))):
    return ModelSpec([0.8, 1.0], A, B, (EXP1, EXP1))


def test_zero_horizon_is_empty():
    res = simulate_path(linear2(), 0.0)
    assert res.path.empty and res.path.T == 0.0


def test_same_seed_same_path():
    a = simulate_path(linear2(), 50.0, SimConfig(seed=3), stream=2).path
    b = simulate_path(linear2(), 50.0, SimConfig(seed=3), stream=2).path
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.marks, b.marks)


def test_streams_differ():
    a, b = simulate_paths(linear2(), 50.0, 2, SimConfig(seed=3))
    assert len(a.path) != len(b.path) or not np.array_equal(a.path.times, b.path.times)


def test_stream_independent_of_batch_size():
    few = simulate_paths(linear2(), 20.0, 2, SimConfig(seed=9))
    many = simulate_paths(linear2(), 20.0, 5, SimConfig(seed=9))
    np.testing.assert_array_equal(few[1].path.times, many[1].path.times)


def test_invalid_spec_rejected():
    with pytest.raises(DomainError):
        simulate_path(linear2(B=((-0.1, 0.0), (0.0, 0.1))), 10.0)
    with pytest.raises(DomainError):
        simulate_path(linear2(), -1.0)


def test_runaway_is_reported():
    spec = ModelSpec([1.0], [[-0.1]], [[2.0]], (EXP1,))
    with pytest.raises(SimulationError):
        simulate_path(spec, 1e6, SimConfig(max_events=20_000))


def test_poisson_rate_and_interarrivals():
    spec = ModelSpec([2.0], [[0.0]], [[0.0]], (EXP1,))
    counts, passes = [], 0
    for res in simulate_paths(spec, 500.0, 20, SimConfig(seed=1)):
        t = res.path.times
        counts.append(t.size)
        passes += stats.kstest(np.diff(np.concatenate([[0.0], t])), "expon", args=(0, 0.5)).pvalue > 0.01
    assert abs(np.mean(counts) - 1000) < 3 * np.sqrt(1000 / 20)
    assert passes >= 18


def test_checkpoints_on_grid():
    res = simulate_path(linear2(), 10.0, SimConfig(seed=0, record_grid=0.5))
    np.testing.assert_allclose(res.checkpoint_times, 0.5 * np.arange(21))
    assert res.checkpoint_lambda.shape == (21, 2)
    np.testing.assert_allclose(res.checkpoint_lambda[0], [0.8, 1.0])


def test_checkpoints_match_replay():
    spec = linear2()
    grid = (1.0, 3.3, 7.25, 10.0)
    res = simulate_path(spec, 10.0, SimConfig(seed=4, record_grid=grid))
    for t, lam, comp in zip(res.checkpoint_times, res.checkpoint_lambda, res.checkpoint_compensator):
        path = res.path
        keep = path.times < t
        sub = MarkedPath(t, path.times[keep], path.components[keep], path.marks[keep], 2)
        rep = replay(spec, sub)
        np.testing.assert_allclose(lam, rep.lambda_T, rtol=1e-10)
        np.testing.assert_allclose(comp, rep.compensator, rtol=1e-10)


def test_final_compensator_matches_replay():
    spec = linear2()
    res = simulate_path(spec, 200.0, SimConfig(seed=5))
    rep = replay(spec, res.path)
    np.testing.assert_allclose(res.final.compensator, rep.compensator, rtol=1e-10)
    np.testing.assert_allclose(res.final.lam, rep.lambda_T, rtol=1e-10)


def test_metzler_intensity_stays_above_baseline():
    spec = linear2()
    res = simulate_path(spec, 200.0, SimConfig(seed=6))
    lm = replay(spec, res.path).lambda_minus
    assert np.all(lm >= spec.lambda0 - 1e-12)


def test_eigen_and_expm_replay_agree():
    spec = linear2(A=((-1.0, 0.4), (-0.3, -0.6)))  # complex eigenvalues
    path = simulate_path(spec, 100.0, SimConfig(seed=7)).path
    fast = replay(spec, path)
    lm, comp, lam_T = _replay_expm(spec.A, path.times, path.components, path.marks, path.T,
                                   spec.lambda0.copy(), spec.lambda0, spec.B)
    np.testing.assert_allclose(fast.lambda_minus, lm, rtol=1e-10)
    np.testing.assert_allclose(fast.compensator, comp, rtol=1e-10)
    np.testing.assert_allclose(fast.lambda_T, lam_T, rtol=1e-10)


def test_defective_drift_uses_fallback():
    spec = linear2(A=((-1.0, 1.0), (0.0, -1.0)))  # Jordan block
    path = MarkedPath(3.0, [0.5, 1.2], [0, 1], [1.0, 2.0], 2)
    rep = replay(spec, path)
    lam = spec.lambda0 + spec.B[:, 0] * 1.0
    # lambda(t) - lambda0 = exp(At) x, exp(At) = e^{-t} [[1, t], [0, 1]]
    x = lam - spec.lambda0
    g = 0.7
    expected = spec.lambda0 + np.exp(-g) * np.array([x[0] + g * x[1], x[1]])
    np.testing.assert_allclose(rep.lambda_minus[1], expected, rtol=1e-12)


def test_intensity_at_excludes_event_at_t():
    spec = linear2()
    path = MarkedPath(2.0, [1.0], [0], [1.0], 2)
    before = intensity_at(spec, path, 1.0)
    after = intensity_at(spec, path, 1.0 + 1e-12)
    np.testing.assert_allclose(before, spec.lambda0)
    np.testing.assert_allclose(after - before, spec.B[:, 0], atol=1e-9)
    with pytest.raises(DomainError):
        intensity_at(spec, path, 3.0)


def test_propagate_and_jump():
    spec = ModelSpec([0.5], [[-1.0]], [[0.3]], (EXP1,))
    s0 = IntensityState(0.0, np.array([1.5]), np.zeros(1))
    s1 = propagate(spec, s0, 2.0)
    np.testing.assert_allclose(s1.lam, 0.5 + np.exp(-2.0), rtol=1e-13)
    np.testing.assert_allclose(s1.compensator, 1.0 + (1 - np.exp(-2.0)), rtol=1e-13)
    s2 = apply_jump(spec, s1, 0, 2.0)
    np.testing.assert_allclose(s2.lam - s1.lam, 0.6)
    assert s2.t == s1.t
    with pytest.raises(DomainError):
        propagate(spec, s1, 1.0)
    with pytest.raises(DimensionError):
        apply_jump(spec, s1, 1, 1.0)


def test_nonlinear_simulation_consistent_with_replay():
    spec = linear2().replace(drift=ExpRegimeDrift([0.3, 0.2], 0.5))
    res = simulate_path(spec, 100.0, SimConfig(seed=8, rk4_steps_per_unit=40))
    rep = replay(spec, res.path, steps_per_unit=40)
    np.testing.assert_allclose(res.final.compensator, rep.compensator, rtol=1e-9)


def test_point_mass_marks_are_exact():
    spec = ModelSpec([0.5, 0.5], np.diag([-1.0, -1.0]), np.diag([0.3, 0.3]),
                     (Empirical((0.04,)), Empirical((0.07,))))
    p = simulate_path(spec, 100.0, SimConfig(seed=1)).path
    assert set(p.marks[p.components == 0]) == {0.04}
    assert set(p.marks[p.components == 1]) == {0.07}


def test_intensity_dependent_marks_simulate():
    spec = ModelSpec([0.5, 0.5], np.diag([-1.0, -1.0]), np.diag([0.3, 0.3]),
                     (IntensityScaledLognormal(-3.0, 0.5, 0.2),) * 2)
    p = simulate_path(spec, 100.0, SimConfig(seed=2)).path
    assert len(p) > 0 and np.all(p.marks > 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), a12=st.floats(0, 0.3), a21=st.floats(0, 0.3),
       b=st.floats(0.05, 0.4))
def test_compensator_matches_replay_property(seed, a12, a21, b):
    spec = linear2(A=((-1.0, a12), (a21, -1.2)), B=((b, 0.1), (0.05, b)))
    res = simulate_path(spec, 30.0, SimConfig(seed=seed))
    rep = replay(spec, res.path)
    np.testing.assert_allclose(res.final.compensator, rep.compensator, rtol=1e-9)
    assert np.all(np.diff(res.path.times) > 0)
