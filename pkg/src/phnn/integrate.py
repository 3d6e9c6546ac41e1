"""Fixed-step classical RK4 integration."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

__all__ = [
    "Trajectory",
    "NonFiniteStateError",
    "rk4_step",
    "integrate",
    "integrate_many",
    "n_steps",
    "rk4_step_recorded",
]

Rhs = Callable[[np.ndarray, np.ndarray], np.ndarray]


class NonFiniteStateError(FloatingPointError):
    def __init__(self, time: float, message: str | None = None):
        self.time = float(time)
        super().__init__(message or f"non-finite state reached at t={self.time:.17g}")


@dataclass
class Trajectory:
    """Stored states on a uniform time grid.

    ``states`` has shape ``(N+1, 2M)`` ordered as ``(q, p)``. ``derivs`` holds
    the analytic ``(dq/dt, dp/dt)`` at the stored points for ground-truth
    trajectories and is ``None`` for model rollouts.
    """

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.states.shape[-1] // 2

    def __len__(self) -> int:
        return len(self.times)


def n_steps(dt: float, t_max: float) -> int:
    """Number of steps ``N = T_max / dt``, rounded to the nearest integer."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = int(round(t_max / dt))
    if n < 1:
        raise ValueError(f"T_max={t_max} shorter than one step of dt={dt}")
    return n


def rk4_step(f: Rhs, state, t, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    half = 0.5 * dt
    # overflow is detected below and reported with the time reached
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = f(state, t)
        k2 = f(state + half * k1, t + half)
        k3 = f(state + half * k2, t + half)
        k4 = f(state + dt * k3, t + dt)
        out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError(t + dt)
    return out


def _stepper(f, dt, substeps):
    h = dt / substeps

    def advance(state, t_start):
        for j in range(substeps):
            state = rk4_step(f, state, t_start + j * h, h)
        return state

    return advance


def integrate_many(f: Rhs, states0, t0: float, dt: float, t_max: float,
                   substeps: int = 100, with_derivs: bool = True) -> list[Trajectory]:
    """Integrate a batch of initial states ``(B, 2M)`` together.

    ``f`` must accept batched states ``(B, 2M)`` and a scalar time.
    """
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    states0 = np.atleast_2d(np.asarray(states0, dtype=np.float64))
    n = n_steps(dt, t_max)
    times = t0 + dt * np.arange(n + 1)
    out = np.empty((n + 1,) + states0.shape)
    out[0] = states0
    advance = _stepper(f, dt, substeps)
    state = states0
    for i in range(n):
        state = advance(state, times[i])
        out[i + 1] = state
    trajs = []
    for b in range(states0.shape[0]):
        derivs = None
        if with_derivs:
            derivs = np.asarray(f(out[:, b], times), dtype=np.float64)
        trajs.append(Trajectory(times.copy(), out[:, b].copy(), derivs))
    return trajs


def integrate(f: Rhs, state0, t0: float, dt: float, t_max: float,
              substeps: int = 100, with_derivs: bool = True) -> Trajectory:
    """Integrate one initial state; stored spacing ``dt``, internal step ``dt/substeps``."""
    (traj,) = integrate_many(f, np.asarray(state0, float)[None], t0, dt, t_max,
                             substeps, with_derivs)
    return traj


def rk4_step_recorded(graph: ad.Graph, model_rhs, state: ad.Var, t, dt: float) -> ad.Var:
    """One RK4 step recorded on ``graph``.

    ``model_rhs(state_var, t_array)`` must return a Var shaped like ``state``.
    ``t`` is an array broadcastable to ``(B, 1)`` with the start time per row.
    """
    t = np.asarray(t, dtype=np.float64)
    half = 0.5 * dt
    k1 = model_rhs(state, t)
    k2 = model_rhs(state + ad.scale(k1, half), t + half)
    k3 = model_rhs(state + ad.scale(k2, half), t + half)
    k4 = model_rhs(state + ad.scale(k3, dt), t + dt)
    incr = k1 + ad.scale(k2, 2.0) + ad.scale(k3, 2.0) + k4
    return state + ad.scale(incr, dt / 6.0)
