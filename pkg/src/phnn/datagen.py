"""Initial-condition samplers, ground-truth datasets and their on-disk format.

A dataset directory contains ``metadata.json`` and one CSV per trajectory
(``traj_0000.csv``, ...) with header ``t,q...,p...,dq...,dp...`` and floats
written with 17 significant digits, so the text round-trips exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .integrate import NonFiniteStateError, Trajectory, integrate_many
from .systems import SystemSpec, make_system

__all__ = [
    "Ring",
    "Box",
    "Dataset",
    "SamplerError",
    "DatasetError",
    "sample_initial_conditions",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "sampler_from_dict",
    "csv_header",
    "FLOAT_FMT",
]

FLOAT_FMT = "%.17g"


class SamplerError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Ring:
    """Radius uniform in ``[r_min, r_max]``, angle uniform in ``[0, 2pi)`` (M = 1)."""

    r_min: float
    r_max: float
    kind: str = field(default="ring", init=False)

    def validate(self):
        if not (0 <= self.r_min <= self.r_max) or not math.isfinite(self.r_max):
            raise SamplerError(f"invalid ring bounds [{self.r_min}, {self.r_max}]")


@dataclass(frozen=True)
class Box:
    """Each coordinate uniform in ``[lo_i, hi_i]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    kind: str = field(default="box", init=False)

    @classmethod
    def square(cls, lo: float, hi: float, dim: int = 1) -> "Box":
        return cls((float(lo),) * 2 * dim, (float(hi),) * 2 * dim)

    def validate(self):
        if len(self.lo) != len(self.hi) or not self.lo:
            raise SamplerError("box bounds must be non-empty and of equal length")
        for a, b in zip(self.lo, self.hi):
            if not (math.isfinite(a) and math.isfinite(b)) or a > b:
                raise SamplerError(f"invalid box interval [{a}, {b}]")


def sampler_from_dict(d: dict) -> Ring | Box:
    if d.get("kind") == "ring":
        return Ring(float(d["r_min"]), float(d["r_max"]))
    if d.get("kind") == "box":
        return Box(tuple(map(float, d["lo"])), tuple(map(float, d["hi"])))
    raise SamplerError(f"unknown sampler descriptor {d!r}")


def sample_initial_conditions(kind: Ring | Box, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` initial states as an ``(n, 2M)`` array."""
    if n < 1:
        raise SamplerError(f"n must be >= 1, got {n}")
    kind.validate()
    rng = np.random.default_rng(seed)
    if isinstance(kind, Ring):
        r = rng.uniform(kind.r_min, kind.r_max, size=n)
        theta = rng.uniform(0.0, 2 * math.pi, size=n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    lo, hi = np.asarray(kind.lo), np.asarray(kind.hi)
    return lo + (hi - lo) * rng.random((n, lo.size))


@dataclass
class Dataset:
    system: str
    params: dict
    sampler: Ring | Box
    seed: int
    dt: float
    t_max: float
    sigma: float
    val_fraction: float
    trajectories: list[Trajectory]
    substeps: int = 100

    @property
    def n_val(self) -> int:
        return math.ceil(self.val_fraction * len(self.trajectories))

    @property
    def train_trajectories(self) -> list[Trajectory]:
        return self.trajectories[: len(self.trajectories) - self.n_val]

    @property
    def val_trajectories(self) -> list[Trajectory]:
        return self.trajectories[len(self.trajectories) - self.n_val:]

    @property
    def dim(self) -> int:
        return self.trajectories[0].dim

    def spec(self) -> SystemSpec:
        return make_system(self.system, self.params)

    def metadata(self) -> dict:
        return {
            "system": self.system,
            "params": self.params,
            "sampler": asdict(self.sampler),
            "seed": self.seed,
            "dt": self.dt,
            "t_max": self.t_max,
            "sigma": self.sigma,
            "val_fraction": self.val_fraction,
            "substeps": self.substeps,
            "n_trajectories": len(self.trajectories),
            "dim": self.dim,
        }


def _noise_rng(seed: int) -> np.random.Generator:
    # independent of the initial-condition stream so targets do not depend on sigma
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def build_dataset(system: SystemSpec, sampler: Ring | Box, n_train: int, dt: float,
                  t_max: float, sigma: float = 0.0, seed: int = 0, *,
                  val_fraction: float = 0.2, substeps: int = 100) -> Dataset:
    """Integrate ``n_train`` sampled initial conditions of ``system``.

    With ``sigma > 0`` Gaussian noise is added to the stored ``(q, p)`` only; the
    derivative targets stay the clean analytic values.
    """
    if sigma < 0:
        raise DatasetError(f"sigma must be >= 0, got {sigma}")
    ics = sample_initial_conditions(sampler, n_train, seed)
    if ics.shape[1] != 2 * system.dim:
        raise SamplerError(
            f"sampler yields {ics.shape[1]} coordinates but {system.name} needs {2 * system.dim}"
        )
    try:
        trajs = integrate_many(system.rhs, ics, 0.0, dt, t_max, substeps)
    except NonFiniteStateError:
        # rerun one by one to name the offending trajectory
        for i, x0 in enumerate(ics):
            try:
                integrate_many(system.rhs, x0[None], 0.0, dt, t_max, substeps)
            except NonFiniteStateError as exc:
                raise DatasetError(f"trajectory {i} diverged at t={exc.time}") from exc
        raise
    if sigma > 0:
        rng = _noise_rng(seed)
        for tr in trajs:
            tr.states = tr.states + rng.normal(0.0, sigma, size=tr.states.shape)
    return Dataset(system.name, dict(system.params), sampler, seed, dt, t_max, float(sigma),
                   val_fraction, trajs, substeps)


def csv_header(dim: int) -> str:
    if dim == 1:
        names = ["q", "p", "dq", "dp"]
    else:
        names = [f"{s}{i + 1}" for s in ("q", "p", "dq", "dp") for i in range(dim)]
    return ",".join(["t"] + names)


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "metadata.json", "w") as fh:
        json.dump(ds.metadata(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    header = csv_header(ds.dim)
    for i, tr in enumerate(ds.trajectories):
        table = np.column_stack([tr.times, tr.states, tr.derivs])
        np.savetxt(directory / f"traj_{i:04d}.csv", table, fmt=FLOAT_FMT, delimiter=",",
                   header=header, comments="")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "metadata.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    dim = int(meta["dim"])
    trajs = []
    for i in range(int(meta["n_trajectories"])):
        path = directory / f"traj_{i:04d}.csv"
        with open(path) as fh:
            header = fh.readline().strip()
        if header != csv_header(dim):
            raise DatasetError(f"{path}: unexpected header {header!r}")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        trajs.append(Trajectory(table[:, 0].copy(), table[:, 1:1 + 2 * dim].copy(),
                                table[:, 1 + 2 * dim:].copy()))
    return Dataset(meta["system"], meta["params"], sampler_from_dict(meta["sampler"]),
                   int(meta["seed"]), float(meta["dt"]), float(meta["t_max"]),
                   float(meta["sigma"]), float(meta["val_fraction"]), trajs,
                   int(meta.get("substeps", 100)))
