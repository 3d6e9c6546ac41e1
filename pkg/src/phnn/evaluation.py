"""Rollouts, state/energy errors, force and damping recovery, Hamiltonian surfaces
and Poincare sections."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .integrate import NonFiniteStateError, Trajectory, integrate_many, n_steps, rk4_step
from .models import Model, ModelError
from .systems import SystemSpec

__all__ = [
    "RolloutDivergedError",
    "RolloutReport",
    "PoincareSection",
    "rollout_model",
    "rollout_many",
    "mse_state",
    "mse_energy",
    "evaluate_rollouts",
    "recover_force_damping",
    "hamiltonian_surface",
    "poincare",
    "histogram_mse",
    "DEFAULT_WINDOW",
    "DEFAULT_BINS",
    "TEST_SEED_OFFSET",
]

DEFAULT_WINDOW = (-2.0, 2.0, -2.0, 2.0)
DEFAULT_BINS = 50
TEST_SEED_OFFSET = 10**6


class RolloutDivergedError(NonFiniteStateError):
    pass


def _model_rhs(model: Model, period: float | None):
    if period is None:
        return model.rhs

    def f(state, t):
        return model.rhs(state, np.mod(t, period))

    return f


def rollout_many(model: Model, states0, dt: float, t_max: float,
                 period: float | None = None) -> list[Trajectory]:
    """RK4 rollouts (one step per stored point) using the model as vector field.

    With ``period`` set the model sees ``t mod period`` as its time input.
    """
    try:
        return integrate_many(_model_rhs(model, period), states0, 0.0, dt, t_max,
                              substeps=1, with_derivs=False)
    except NonFiniteStateError as exc:
        raise RolloutDivergedError(exc.time, f"rollout diverged at t={exc.time:.6g}") from None


def rollout_model(model: Model, state0, dt: float, t_max: float,
                  period: float | None = None) -> Trajectory:
    (traj,) = rollout_many(model, np.asarray(state0, float)[None], dt, t_max, period)
    return traj


def _check_pair(pred: Trajectory, truth: Trajectory):
    if len(pred) != len(truth) or pred.states.shape != truth.states.shape:
        raise ValueError(f"trajectory length mismatch: {len(pred)} vs {len(truth)}")
    if not np.allclose(pred.times, truth.times, rtol=0, atol=1e-9):
        raise ValueError("trajectories are sampled on different time grids")


def state_sq_errors(pred: Trajectory, truth: Trajectory) -> np.ndarray:
    """Per-step squared state error (summed over q and p), steps 1..N."""
    _check_pair(pred, truth)
    d = pred.states[1:] - truth.states[1:]
    return np.sum(d * d, axis=1)


def energy_sq_errors(system: SystemSpec, pred: Trajectory, truth: Trajectory) -> np.ndarray:
    _check_pair(pred, truth)
    d = system.energy(truth.states[1:]) - system.energy(pred.states[1:])
    return d * d


def mse_state(pred: Trajectory, truth: Trajectory) -> float:
    return float(np.mean(state_sq_errors(pred, truth)))


def mse_energy(system: SystemSpec, pred: Trajectory, truth: Trajectory) -> float:
    """Squared error of the stationary Hamiltonian along both trajectories."""
    return float(np.mean(energy_sq_errors(system, pred, truth)))


@dataclass
class RolloutReport:
    predictions: list[Trajectory | None]
    truths: list[Trajectory]
    state_errors: list[np.ndarray | None]
    energy_errors: list[np.ndarray | None]
    mse_state: np.ndarray
    mse_energy: np.ndarray
    diverged: list[bool] = field(default_factory=list)

    @staticmethod
    def _stats(values: np.ndarray) -> tuple[float, float]:
        if len(values) < 2:
            return float(np.mean(values)), 0.0
        return float(np.mean(values)), float(np.std(values, ddof=1))

    @property
    def state_mean_std(self) -> tuple[float, float]:
        return self._stats(self.mse_state)

    @property
    def energy_mean_std(self) -> tuple[float, float]:
        return self._stats(self.mse_energy)

    def summary(self) -> dict:
        sm, ss = self.state_mean_std
        em, es = self.energy_mean_std
        return {
            "n_initial_conditions": len(self.truths),
            "state_mse_mean": sm,
            "state_mse_std": ss,
            "energy_mse_mean": em,
            "energy_mse_std": es,
            "n_diverged": int(sum(self.diverged)),
            "per_ic_state_mse": [float(v) for v in self.mse_state],
            "per_ic_energy_mse": [float(v) for v in self.mse_energy],
        }


def evaluate_rollouts(model: Model, system: SystemSpec, test_ics, dt: float, t_max: float,
                      truths: list[Trajectory] | None = None, truth_substeps: int = 100,
                      period: float | None = None) -> RolloutReport:
    """Roll out every test initial condition and score it against ground truth.

    A rollout that produces non-finite states scores ``inf`` for that IC.
    """
    test_ics = np.atleast_2d(np.asarray(test_ics, float))
    if truths is None:
        truths = integrate_many(system.rhs, test_ics, 0.0, dt, t_max, truth_substeps)
    try:
        preds: list[Trajectory | None] = list(rollout_many(model, test_ics, dt, t_max, period))
    except RolloutDivergedError:
        preds = []
        for x0 in test_ics:
            try:
                preds.append(rollout_model(model, x0, dt, t_max, period))
            except RolloutDivergedError:
                preds.append(None)
    s_err, e_err, s_mse, e_mse, div = [], [], [], [], []
    for pred, truth in zip(preds, truths):
        if pred is None:
            s_err.append(None)
            e_err.append(None)
            s_mse.append(math.inf)
            e_mse.append(math.inf)
            div.append(True)
            continue
        se = state_sq_errors(pred, truth)
        ee = energy_sq_errors(system, pred, truth)
        s_err.append(se)
        e_err.append(ee)
        s_mse.append(float(np.mean(se)))
        e_mse.append(float(np.mean(ee)))
        div.append(False)
    return RolloutReport(preds, truths, s_err, e_err, np.array(s_mse), np.array(e_mse), div)


def _require(model: Model, allowed: tuple[str, ...], what: str):
    if model.architecture not in allowed:
        raise ModelError(f"{what} requires one of {allowed}, got {model.architecture!r}")


def recover_force_damping(model: Model, times, reference: Trajectory) -> dict:
    """Learned force on ``times`` and damping contribution ``N dH/dp`` along ``reference``."""
    _require(model, ("phnn",), "force/damping recovery")
    times = np.asarray(times, float)
    force = model.force(times)
    grad = model.hamiltonian_grad(reference.states, reference.times)
    damping = model.damping * grad[:, model.dim:]
    return {
        "times": times,
        "force": force,
        "damping_times": reference.times,
        "damping": damping,
        "damping_coefficient": model.damping,
    }


def hamiltonian_surface(model: Model, q_range=(-2.0, 2.0), p_range=(-2.0, 2.0),
                        resolution=101, t_fixed: float = 0.0):
    """Learned Hamiltonian on a ``(q1, p1)`` grid; other coordinates are held at 0.

    Returns ``(q_grid, p_grid, values)`` with ``values[i, j] = H(q_grid[i], p_grid[j])``.
    """
    _require(model, ("hnn", "tdhnn", "phnn"), "hamiltonian_surface")
    nq, np_ = (resolution, resolution) if np.isscalar(resolution) else resolution
    qs = np.linspace(q_range[0], q_range[1], int(nq))
    ps = np.linspace(p_range[0], p_range[1], int(np_))
    Q, P = np.meshgrid(qs, ps, indexing="ij")
    m = model.dim
    states = np.zeros((Q.size, 2 * m))
    states[:, 0] = Q.ravel()
    states[:, m] = P.ravel()
    t = 0.0 if model.architecture != "tdhnn" else t_fixed
    values = model.hamiltonian(states, t).reshape(Q.shape)
    return qs, ps, values


@dataclass
class PoincareSection:
    points: np.ndarray  # (count, 2) samples of (q1, p1)
    hist: np.ndarray  # (bins, bins)
    window: tuple[float, float, float, float]
    bins: int
    source: str
    diverged: bool = False
    full_states: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.points)


def _section_hist(points: np.ndarray, window, bins: int) -> np.ndarray:
    if len(points) == 0:
        return np.zeros((bins, bins))
    h, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins,
                             range=[[window[0], window[1]], [window[2], window[3]]])
    return h


def poincare(source, state0, period: float, n_periods: int, dt: float, *,
             substeps: int = 1, normalize_time: bool = True, window=DEFAULT_WINDOW,
             bins: int = DEFAULT_BINS, tag: str | None = None) -> PoincareSection:
    """Stroboscopic samples of ``(q1, p1)`` at ``t = k * period``, ``k = 1..n_periods``.

    ``source`` is a :class:`Model`, a :class:`SystemSpec` or a callable
    ``f(state, t)``. With ``normalize_time`` the vector field is evaluated at
    ``t mod period``. A divergent rollout returns the samples gathered so far
    with ``diverged=True``.
    """
    if n_periods < 1:
        raise ValueError("n_periods must be >= 1")
    steps = int(round(period / dt))
    if steps < 1 or abs(steps * dt - period) > 1e-12 * max(1.0, period):
        raise ValueError(f"dt={dt!r} does not divide the period {period!r}")
    if isinstance(source, Model):
        f: Callable = source.rhs
        tag = tag or source.architecture
    elif isinstance(source, SystemSpec):
        f = source.rhs
        tag = tag or f"truth:{source.name}"
    else:
        f = source
        tag = tag or "custom"
    state = np.asarray(state0, float).reshape(1, -1)
    m = state.shape[1] // 2
    h = dt / substeps
    points = []
    diverged = False
    for k in range(n_periods):
        base = 0.0 if normalize_time else k * period
        try:
            for j in range(steps * substeps):
                state = rk4_step(f, state, base + j * h, h)
        except NonFiniteStateError:
            diverged = True
            break
        points.append((state[0, 0], state[0, m]))
    if diverged:
        warnings.warn(f"{tag}: Poincare rollout diverged after {len(points)} periods",
                      RuntimeWarning, stacklevel=2)
    pts = np.array(points, dtype=float).reshape(-1, 2)
    return PoincareSection(pts, _section_hist(pts, window, bins), tuple(window), bins, tag,
                           diverged)


def histogram_mse(a: PoincareSection, b: PoincareSection) -> float:
    """Squared difference of the unit-mass histograms, averaged over bins and scaled by B^2."""
    if a.bins != b.bins or tuple(a.window) != tuple(b.window):
        raise ValueError("sections use different histogram geometry")
    sa, sb = a.hist.sum(), b.hist.sum()
    if sa == 0 or sb == 0:
        raise ValueError("a section has no points inside the histogram window")
    diff = a.hist / sa - b.hist / sb
    return float(np.mean(diff * diff) * a.bins**2)
