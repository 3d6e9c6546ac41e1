"""Analytic benchmark systems.

Every system is written as a stationary Hamiltonian ``H_stat(q, p)``, a
time-dependent force ``F(t)`` acting on the momenta and a scalar damping
coefficient ``N`` so that::

    dq/dt = dH_stat/dp
    dp/dt = -dH_stat/dq + N * dH_stat/dp + F(t)

``N`` is negative for dissipative systems. The full (time-dependent)
Hamiltonian is ``H_stat(q, p) - q . F(t)``.

All functions broadcast over leading batch dimensions: ``q`` and ``p`` have
shape ``(..., M)`` and ``t`` has shape ``(...)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SystemSpec",
    "SystemError",
    "UnknownSystemError",
    "InvalidParameterError",
    "NoForcingError",
    "SYSTEM_NAMES",
    "DEFAULT_PARAMS",
    "CHAOTIC_DUFFING_PARAMS",
    "make_system",
    "hamiltonian_partials",
    "duffing_period",
]


class SystemError(ValueError):
    pass


class UnknownSystemError(SystemError):
    pass


class InvalidParameterError(SystemError):
    pass


class NoForcingError(SystemError):
    pass


Array = np.ndarray


@dataclass(frozen=True)
class SystemSpec:
    name: str
    dim: int
    params: dict
    stationary_hamiltonian: Callable[[Array, Array], Array]
    stationary_partials: Callable[[Array, Array], tuple[Array, Array]]
    force: Callable[[Array], Array]
    damping_coefficient: float
    rhs_qp: Callable[[Array, Array, Array], tuple[Array, Array]]
    forcing_frequency: float | None = None
    extra: dict = field(default_factory=dict)

    def hamiltonian(self, q, p, t) -> Array:
        q, p = np.asarray(q, float), np.asarray(p, float)
        f = self.force(np.asarray(t, float))
        return self.stationary_hamiltonian(q, p) - np.sum(q * f, axis=-1)

    def rhs(self, state, t) -> Array:
        """Closed-form ``(dq/dt, dp/dt)`` for ``state = (q, p)`` of shape ``(..., 2M)``."""
        state = np.asarray(state, float)
        m = self.dim
        dq, dp = self.rhs_qp(state[..., :m], state[..., m:], np.asarray(t, float))
        return np.concatenate([dq, dp], axis=-1)

    def energy(self, states) -> Array:
        """Stationary Hamiltonian evaluated on ``(..., 2M)`` states."""
        states = np.asarray(states, float)
        return self.stationary_hamiltonian(states[..., : self.dim], states[..., self.dim :])

    @property
    def is_forced(self) -> bool:
        return self.forcing_frequency is not None


DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "mass_spring": {"k": 1.0, "m": 1.0},
    "damped_mass_spring": {"k": 1.0, "m": 1.0, "nu": 0.3},
    "forced_I": {"k": 1.0, "m": 1.0, "F0": 1.0, "omega": 3.0},
    "forced_II": {"k": 1.0, "m": 1.0, "F0": 1.0, "omega": 3.0},
    "duffing": {"alpha": -1.0, "beta": 1.0, "delta": 0.3, "gamma": 0.2, "omega": 1.2, "m": 1.0},
    "relativistic_duffing": {
        "alpha": 1.0, "beta": 1.0, "delta": 0.0, "gamma": 0.2, "omega": 1.2, "c": 1.0, "m0": 1.0,
    },
    "coupled_two_body": {"k": 1.0, "m": 1.0, "F0": 1.0, "omega": 1.0},
}

CHAOTIC_DUFFING_PARAMS = {"alpha": 1.0, "beta": 1.0, "delta": 0.1, "gamma": 0.39, "omega": 1.4}

SYSTEM_NAMES = tuple(DEFAULT_PARAMS)


def _check_params(name: str, params: dict | None) -> dict:
    merged = dict(DEFAULT_PARAMS[name])
    for key, value in (params or {}).items():
        if key not in merged:
            raise InvalidParameterError(f"{name}: unknown parameter {key!r}")
        if value is None:
            raise InvalidParameterError(f"{name}: parameter {key!r} is missing")
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise InvalidParameterError(f"{name}: parameter {key!r} is not a real number") from None
        if not math.isfinite(value):
            raise InvalidParameterError(f"{name}: parameter {key!r} must be finite")
        merged[key] = value
    for key in ("m", "c", "m0"):
        if key in merged and merged[key] <= 0:
            raise InvalidParameterError(f"{name}: {key} must be positive, got {merged[key]}")
    if "omega" in merged and merged["omega"] <= 0:
        raise InvalidParameterError(f"{name}: omega must be positive")
    return merged


def _zero_force(dim: int):
    def force(t):
        t = np.asarray(t, float)
        return np.zeros(t.shape + (dim,))

    return force


def _mass_spring_family(name: str, P: dict) -> SystemSpec:
    k, m = P["k"], P["m"]
    nu = P.get("nu", 0.0)
    omega = P.get("omega")

    def h_stat(q, p):
        return np.sum(0.5 * k * q**2 + p**2 / (2 * m), axis=-1)

    def partials(q, p):
        return k * q, p / m

    if name == "forced_I":
        F0 = P["F0"]

        def force(t):
            return (F0 * np.sin(omega * np.asarray(t, float)))[..., None]

    elif name == "forced_II":
        F0 = P["F0"]

        def force(t):
            t = np.asarray(t, float)
            return (F0 * np.sin(omega * t) * np.sin(2 * omega * t))[..., None]

    else:
        force = _zero_force(1)
        omega = None

    def rhs(q, p, t):
        return p / m, -k * q - nu * p / m + force(t)

    return SystemSpec(name, 1, P, h_stat, partials, force, -nu, rhs, omega)


def _duffing(P: dict) -> SystemSpec:
    a, b, d, g, w, m = (P[key] for key in ("alpha", "beta", "delta", "gamma", "omega", "m"))

    def h_stat(q, p):
        return np.sum(p**2 / (2 * m) + a * q**2 / 2 + b * q**4 / 4, axis=-1)

    def partials(q, p):
        return a * q + b * q**3, p / m

    def force(t):
        return (g * np.sin(w * np.asarray(t, float)))[..., None]

    def rhs(q, p, t):
        qdot = p / m
        return qdot, -d * qdot - a * q - b * q**3 + g * np.sin(w * t)[..., None]

    return SystemSpec("duffing", 1, P, h_stat, partials, force, -d, rhs, w)


def _relativistic(P: dict) -> SystemSpec:
    a, b, d, g, w, c, m0 = (
        P[key] for key in ("alpha", "beta", "delta", "gamma", "omega", "c", "m0")
    )

    def h_stat(q, p):
        return np.sum(c * np.sqrt(p**2 + m0**2 * c**2) + a * q**2 / 2 + b * q**4 / 4, axis=-1)

    def partials(q, p):
        return a * q + b * q**3, c * p / np.sqrt(p**2 + m0**2 * c**2)

    def force(t):
        return (g * np.sin(w * np.asarray(t, float)))[..., None]

    def rhs(q, p, t):
        qdot = c * p / np.sqrt(p**2 + m0**2 * c**2)
        return qdot, -a * q - b * q**3 - d * qdot + g * np.sin(w * t)[..., None]

    return SystemSpec("relativistic_duffing", 1, P, h_stat, partials, force, -d, rhs, w)


def _coupled(P: dict) -> SystemSpec:
    k, m, F0, w = P["k"], P["m"], P["F0"], P["omega"]

    def h_stat(q, p):
        q1, q2 = q[..., 0], q[..., 1]
        return np.sum(p**2, axis=-1) / (2 * m) + k * q1**2 + k * q2**2 - k * q1 * q2

    def partials(q, p):
        q1, q2 = q[..., 0], q[..., 1]
        return np.stack([2 * k * q1 - k * q2, 2 * k * q2 - k * q1], axis=-1), p / m

    def force(t):
        t = np.asarray(t, float)
        drive = F0 * np.cos(w * t)
        return np.stack([drive, np.zeros_like(drive)], axis=-1)

    def rhs(q, p, t):
        q1, q2 = q[..., 0], q[..., 1]
        drive = F0 * np.cos(w * t)
        pdot = np.stack([-2 * k * q1 + k * q2 + drive, -2 * k * q2 + k * q1], axis=-1)
        return p / m, pdot

    return SystemSpec("coupled_two_body", 2, P, h_stat, partials, force, 0.0, rhs, w)


def make_system(name: str, params: dict | None = None) -> SystemSpec:
    """Build a benchmark system; unspecified parameters take their default values."""
    if name not in DEFAULT_PARAMS:
        raise UnknownSystemError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")
    P = _check_params(name, params)
    if name in ("mass_spring", "damped_mass_spring", "forced_I", "forced_II"):
        return _mass_spring_family(name, P)
    if name == "duffing":
        return _duffing(P)
    if name == "relativistic_duffing":
        return _relativistic(P)
    return _coupled(P)


def hamiltonian_partials(spec: SystemSpec, q, p, t) -> tuple[Array, Array]:
    """Partials of the full time-dependent Hamiltonian ``H_stat - q . F(t)``."""
    q, p = np.asarray(q, float), np.asarray(p, float)
    dq, dp = spec.stationary_partials(q, p)
    return dq - spec.force(np.asarray(t, float)), dp


def duffing_period(spec: SystemSpec) -> float:
    if spec.forcing_frequency is None:
        raise NoForcingError(f"{spec.name} has no forcing term, so no forcing period")
    return 2 * math.pi / spec.forcing_frequency
