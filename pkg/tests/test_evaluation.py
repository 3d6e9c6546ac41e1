import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phnn.datagen import Ring, sample_initial_conditions
from phnn.evaluation import (
    PoincareSection,
    RolloutDivergedError,
    _section_hist,
    evaluate_rollouts,
    hamiltonian_surface,
    histogram_mse,
    mse_energy,
    mse_state,
    poincare,
    recover_force_damping,
    rollout_model,
)
from phnn.integrate import Trajectory, integrate
from phnn.models import Model, ModelError, init_params
from phnn.systems import CHAOTIC_DUFFING_PARAMS, duffing_period, make_system

MS = make_system("mass_spring")


class _Oracle(Model):
    """A 'model' whose vector field is a system's exact rhs."""

    def __init__(self, spec, arch="phnn"):
        self.spec = spec
        self.params = init_params(arch, spec.dim, hidden=(2,))
        self._nets, self._damping = self.params.unflatten()

    def rhs(self, state, t):
        state = np.atleast_2d(state)
        t = np.broadcast_to(np.asarray(t, float).reshape(-1), (state.shape[0],))
        return self.spec.rhs(state, t)

    def hamiltonian(self, state, t=0.0):
        return self.spec.energy(np.atleast_2d(state))


def test_oracle_rollout_matches_truth():
    truth = integrate(MS.rhs, [1.0, 0.5], 0.0, 0.05, 3.05)
    pred = rollout_model(_Oracle(MS), [1.0, 0.5], 0.05, 3.05)
    assert mse_state(pred, truth) <= 1e-10


def test_period_normalization():
    seen = []

    class Probe(_Oracle):
        def rhs(self, state, t):
            seen.append(np.asarray(t).ravel()[0])
            return np.zeros_like(np.atleast_2d(state))

    T = 2 * math.pi / 1.4
    # start the single-step rollout at t = 0; the model sees t mod T throughout
    rollout_model(Probe(MS), [0.0, 0.0], 3 * T + 0.5, 3 * T + 0.5, period=T)
    assert seen[0] == 0.0
    assert seen[-1] == pytest.approx(0.5, abs=1e-12)


def _traj(states, dt=0.1):
    states = np.asarray(states, float)
    return Trajectory(dt * np.arange(len(states)), states)


def test_mse_identities():
    a = integrate(MS.rhs, [2.0, 0.0], 0.0, 0.1, 2.0)
    assert mse_state(a, a) == 0.0 and mse_energy(MS, a, a) == 0.0
    shifted = _traj(a.states + [1.0, 0.0])
    assert mse_state(shifted, _traj(a.states)) == pytest.approx(1.0, abs=1e-15)
    zero = _traj(np.zeros_like(a.states))
    # every step has H = 2 for the truth and 0 for the zero trajectory
    assert mse_energy(MS, zero, _traj(a.states)) == pytest.approx(4.0, abs=1e-12)


def test_mse_averages_over_steps_after_the_first():
    truth = _traj([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    pred = _traj([[5.0, 0.0], [1.0, 0.0], [2.0, 1.0]])
    assert mse_state(pred, truth) == pytest.approx((1 + 5) / 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mse_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = _traj(rng.normal(size=(12, 2))), _traj(rng.normal(size=(12, 2)))
    assert mse_state(a, b) == mse_state(b, a)
    assert mse_energy(MS, a, b) == mse_energy(MS, b, a)
    assert mse_state(a, b) > 0


def test_mse_length_mismatch():
    with pytest.raises(ValueError):
        mse_state(_traj(np.zeros((4, 2))), _traj(np.zeros((5, 2))))
    with pytest.raises(ValueError):
        mse_energy(MS, _traj(np.zeros((4, 2)), 0.1), _traj(np.zeros((4, 2)), 0.2))


def test_evaluate_rollouts_statistics():
    spec = make_system("damped_mass_spring")
    ics = sample_initial_conditions(Ring(0.5, 1), 5, 1_000_000)
    model = Model(init_params("phnn", hidden=(8,), seed=0))
    rep = evaluate_rollouts(model, spec, ics, 0.1, 3.0)
    assert len(rep.mse_state) == 5 and not any(rep.diverged)
    mean, std = rep.state_mean_std
    assert mean == pytest.approx(np.mean(rep.mse_state))
    assert std == pytest.approx(np.std(rep.mse_state, ddof=1))
    np.testing.assert_allclose(rep.mse_state, [np.mean(e) for e in rep.state_errors])
    s = rep.summary()
    assert s["n_initial_conditions"] == 5 and s["n_diverged"] == 0


def test_evaluate_oracle_is_exact():
    spec = make_system("forced_II")
    ics = sample_initial_conditions(Ring(1, 4.5), 3, 1)
    truths = [integrate(spec.rhs, x, 0.0, 0.01, 1.0, substeps=1) for x in ics]
    rep = evaluate_rollouts(_Oracle(spec), spec, ics, 0.01, 1.0, truths=truths)
    np.testing.assert_array_equal(rep.mse_state, 0.0)


def test_diverging_rollout_scores_inf():
    class Blowup(_Oracle):
        def rhs(self, state, t):
            with np.errstate(over="ignore", invalid="ignore"):
                return np.atleast_2d(state) ** 3

    ics = np.array([[5.0, 5.0], [0.0, 0.0]])
    rep = evaluate_rollouts(Blowup(MS), MS, ics, 0.1, 10.0)
    assert rep.diverged == [True, False]
    assert rep.mse_state[0] == math.inf and rep.mse_state[1] == 0.0
    with pytest.raises(RolloutDivergedError):
        rollout_model(Blowup(MS), [5.0, 5.0], 0.1, 10.0)


def test_untrained_damping_curve_is_zero():
    model = Model(init_params("phnn", hidden=(8, 8), seed=1))
    ref = integrate(MS.rhs, [1.0, 0.0], 0.0, 0.1, 2.0)
    out = recover_force_damping(model, np.linspace(0, 2, 11), ref)
    np.testing.assert_array_equal(out["damping"], 0.0)
    assert out["force"].shape == (11, 1)


def test_force_recovery_requires_phnn():
    ref = integrate(MS.rhs, [1.0, 0.0], 0.0, 0.1, 1.0)
    with pytest.raises(ModelError):
        recover_force_damping(Model(init_params("tdhnn", hidden=(4,))), [0.0], ref)


def test_surface_shape_and_t_invariance():
    model = Model(init_params("phnn", hidden=(8, 8), seed=2))
    qs, ps, a = hamiltonian_surface(model, resolution=101, t_fixed=0.0)
    _, _, b = hamiltonian_surface(model, resolution=101, t_fixed=1.0)
    assert a.shape == (101, 101) and a.size == 10201 and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    assert qs[0] == -2 and ps[-1] == 2


def test_tdhnn_surface_uses_time():
    rng = np.random.default_rng(0)
    p = init_params("tdhnn", hidden=(8,), seed=2)
    model = Model(p.copy(p.theta + rng.normal(size=p.theta.size)))
    _, _, a = hamiltonian_surface(model, resolution=11, t_fixed=0.0)
    _, _, b = hamiltonian_surface(model, resolution=11, t_fixed=1.0)
    assert not np.array_equal(a, b)


def test_surface_of_quadratic_oracle():
    qs, ps, values = hamiltonian_surface(_Oracle(MS), resolution=(21, 31))
    Q, P = np.meshgrid(qs, ps, indexing="ij")
    np.testing.assert_allclose(values, 0.5 * (Q**2 + P**2), rtol=0, atol=1e-15)


def test_surface_rejects_baseline():
    with pytest.raises(ModelError):
        hamiltonian_surface(Model(init_params("baseline", hidden=(4,))))


def test_poincare_periodic_orbit_is_one_point():
    section = poincare(MS, [1.2, -0.4], 2 * math.pi, 20, 2 * math.pi / 100, substeps=100)
    assert section.count == 20
    np.testing.assert_allclose(section.points, [[1.2, -0.4]] * 20, rtol=0, atol=1e-8)


def test_poincare_count_matches_horizon():
    spec = make_system("duffing", CHAOTIC_DUFFING_PARAMS)
    T = duffing_period(spec)
    # floor(18000 / 4.48799...) = floor(4010.7)
    assert math.floor(18000 / T) == 4010
    section = poincare(spec, [0.3, 0.2], T, 40, T / 100)
    assert section.count == 40 and section.hist.shape == (50, 50)
    inside = np.sum(np.all((section.points >= -2) & (section.points <= 2), axis=1))
    assert section.hist.sum() == inside


def test_poincare_deterministic():
    spec = make_system("duffing", CHAOTIC_DUFFING_PARAMS)
    T = duffing_period(spec)
    a = poincare(spec, [0.3, 0.2], T, 30, T / 100)
    b = poincare(spec, [0.3, 0.2], T, 30, T / 100)
    np.testing.assert_array_equal(a.hist, b.hist)
    np.testing.assert_array_equal(a.points, b.points)


def test_poincare_time_normalization_is_exact_for_periodic_fields():
    spec = make_system("duffing", CHAOTIC_DUFFING_PARAMS)
    T = duffing_period(spec)
    a = poincare(spec, [0.3, 0.2], T, 5, T / 100, normalize_time=True)
    b = poincare(spec, [0.3, 0.2], T, 5, T / 100, normalize_time=False)
    np.testing.assert_allclose(a.points, b.points, rtol=0, atol=1e-9)


def test_poincare_rejects_bad_step():
    with pytest.raises(ValueError):
        poincare(MS, [1.0, 0.0], 1.0, 3, 0.3)
    with pytest.raises(ValueError):
        poincare(MS, [1.0, 0.0], 1.0, 0, 0.01)


def test_poincare_divergence_returns_partial():
    def blowup(state, t):
        with np.errstate(over="ignore", invalid="ignore"):
            return state**3

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        section = poincare(blowup, [1.5, 1.5], 1.0, 50, 0.01)
    assert section.diverged and section.count < 50
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def _section(points, bins=50, window=(-2.0, 2.0, -2.0, 2.0)):
    pts = np.asarray(points, float).reshape(-1, 2)
    return PoincareSection(pts, _section_hist(pts, window, bins), window, bins, "test")


def test_histogram_identities():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2, 2, (300, 2))
    a = _section(pts)
    assert histogram_mse(a, a) == 0.0
    doubled = _section(np.concatenate([pts, pts]))
    assert histogram_mse(a, doubled) == 0.0
    other = _section(rng.uniform(-2, 2, (300, 2)))
    assert histogram_mse(a, other) > 0


def test_histogram_disjoint_single_bins():
    a = _section([[-1.9, -1.9]], bins=10)
    b = _section([[1.9, 1.9]], bins=10)
    assert histogram_mse(a, b) == pytest.approx(2.0, abs=1e-15)


def test_histogram_geometry_mismatch():
    with pytest.raises(ValueError):
        histogram_mse(_section([[0, 0]], bins=10), _section([[0, 0]], bins=20))
    with pytest.raises(ValueError):
        histogram_mse(_section([[0, 0]]), _section([[0, 0]], window=(-3.0, 3.0, -3.0, 3.0)))


def test_histogram_empty_section():
    with pytest.raises(ValueError):
        histogram_mse(_section([[5.0, 5.0]]), _section([[0.0, 0.0]]))
