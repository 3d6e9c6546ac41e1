"""Loss functions, the Adam training loop and the (lambda_F, lambda_N) grid search."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .datagen import Dataset
from .integrate import Trajectory, rk4_step_recorded
from .models import Model, ModelParams

__all__ = [
    "TrainConfig",
    "TrainReport",
    "Batch",
    "TrainingError",
    "TrainingDivergedError",
    "GridSearchError",
    "GridResult",
    "DEFAULT_LAMBDA_GRID",
    "derivative_batch",
    "transition_batch",
    "loss_derivative_mode",
    "loss_embedded_mode",
    "loss_and_grad",
    "train",
    "grid_search",
    "auto_batch_size",
]

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (1e-2, 1e-4, 1e-6, 1e-8)
MODES = ("derivative", "embedded_rk4")


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")


class GridSearchError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "derivative"
    iterations: int = 20000
    batch_size: int | None = None  # None: automatic, 0: full batch
    learning_rate: float = 1e-3
    lambda_f: float = 1e-4
    lambda_n: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.0  # holdout used by train(); grid search falls back to 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.lambda_f < 0 or self.lambda_n < 0:
            raise ValueError("regularization weights must be non-negative")


@dataclass
class TrainReport:
    losses: np.ndarray
    val_loss: float
    wall_time: float
    lambda_f: float
    lambda_n: float
    damping: float | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class Batch:
    """Training samples.

    Derivative mode uses ``states``, ``times`` and ``targets`` (the analytic
    derivatives). Embedded mode uses ``states``, ``times`` and ``next_states``.
    """

    states: np.ndarray
    times: np.ndarray
    targets: np.ndarray | None = None
    next_states: np.ndarray | None = None
    dt: float | None = None

    def __len__(self) -> int:
        return self.states.shape[0]

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Batch(self.states[idx], self.times[idx], pick(self.targets),
                     pick(self.next_states), self.dt)


def derivative_batch(trajs: Sequence[Trajectory]) -> Batch:
    return Batch(
        np.concatenate([tr.states for tr in trajs]),
        np.concatenate([tr.times for tr in trajs])[:, None],
        targets=np.concatenate([tr.derivs for tr in trajs]),
    )


def transition_batch(trajs: Sequence[Trajectory]) -> Batch:
    dt = float(trajs[0].times[1] - trajs[0].times[0])
    return Batch(
        np.concatenate([tr.states[:-1] for tr in trajs]),
        np.concatenate([tr.times[:-1] for tr in trajs])[:, None],
        next_states=np.concatenate([tr.states[1:] for tr in trajs]),
        dt=dt,
    )


def _penalty(outputs, batch_size: int, lambda_f: float, lambda_n: float):
    """L1 terms averaged over ``outputs`` (one per RK stage, or a single one)."""
    terms = []
    for out in outputs:
        if out.force is not None and lambda_f > 0:
            terms.append(ad.scale(ad.reduce_sum(ad.absolute(out.force)), lambda_f / batch_size))
        if out.damping is not None and lambda_n > 0:
            terms.append(ad.scale(ad.absolute(out.damping), lambda_n))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return ad.scale(total, 1.0 / len(outputs))


def loss_derivative_mode(model: Model, batch: Batch, lambda_f: float, lambda_n: float,
                         graph: ad.Graph | None = None, leaves: dict | None = None,
                         penalties: bool = True) -> ad.Var:
    """Mean squared derivative error plus L1 penalties on the force and damping."""
    graph = graph or ad.Graph()
    out = model.forward(graph, batch.states, batch.times, leaves)
    n = len(batch)
    err = out.state_derivative() - graph.constant(batch.targets)
    loss = ad.scale(ad.reduce_sum(ad.square(err)), 1.0 / n)
    pen = _penalty([out], n, lambda_f, lambda_n) if penalties else None
    return loss if pen is None else loss + pen


def loss_embedded_mode(model: Model, batch: Batch, dt: float, lambda_f: float,
                       lambda_n: float, graph: ad.Graph | None = None,
                       leaves: dict | None = None, penalties: bool = True) -> ad.Var:
    """Mean squared next-state error of one recorded RK4 step through the model."""
    graph = graph or ad.Graph()
    if leaves is None:
        leaves = model.bind(graph)
    stages = []

    def model_rhs(state, t):
        out = model.forward(graph, state, t, leaves)
        stages.append(out)
        return out.state_derivative()

    state = graph.constant(batch.states)
    pred = rk4_step_recorded(graph, model_rhs, state, batch.times, dt)
    n = len(batch)
    err = pred - graph.constant(batch.next_states)
    loss = ad.scale(ad.reduce_sum(ad.square(err)), 1.0 / n)
    pen = _penalty(stages, n, lambda_f, lambda_n) if penalties else None
    return loss if pen is None else loss + pen


def loss_and_grad(model: Model, batch: Batch, config: TrainConfig,
                  penalties: bool = True) -> tuple[float, np.ndarray]:
    graph = ad.Graph()
    leaves = model.bind(graph)
    if config.mode == "derivative":
        loss = loss_derivative_mode(model, batch, config.lambda_f, config.lambda_n, graph,
                                    leaves, penalties)
    else:
        loss = loss_embedded_mode(model, batch, batch.dt, config.lambda_f, config.lambda_n,
                                  graph, leaves, penalties)
    leaf_vars = Model.leaf_list(leaves)
    grads = ad.backward(graph, loss, leaf_vars)
    return float(loss.value), np.concatenate([g.ravel() for g in grads])


def loss_value(model: Model, batch: Batch, config: TrainConfig, penalties: bool = False) -> float:
    graph = ad.Graph()
    if config.mode == "derivative":
        loss = loss_derivative_mode(model, batch, config.lambda_f, config.lambda_n, graph,
                                    penalties=penalties)
    else:
        loss = loss_embedded_mode(model, batch, batch.dt, config.lambda_f, config.lambda_n,
                                  graph, penalties=penalties)
    return float(loss.value)


def split_trajectories(trajs: Sequence[Trajectory], fraction: float):
    """The last ``ceil(fraction * n)`` trajectories form the validation set."""
    if not 0 <= fraction < 1:
        raise ValueError(f"validation fraction must be in [0, 1), got {fraction}")
    n_val = math.ceil(fraction * len(trajs))
    if n_val >= len(trajs):
        raise TrainingError("validation split leaves no training trajectories")
    return list(trajs[: len(trajs) - n_val]), list(trajs[len(trajs) - n_val:])


def auto_batch_size(n_samples: int) -> int:
    """Full batch up to 10^4 samples, minibatches of 512 above."""
    return 0 if n_samples <= 10_000 else 512


def _make_batch(trajs, mode) -> Batch:
    return derivative_batch(trajs) if mode == "derivative" else transition_batch(trajs)


def train(params: ModelParams, dataset: Dataset, config: TrainConfig,
          callback: Callable[[int, float], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Minimize the configured loss with Adam; deterministic for a fixed seed."""
    if dataset.dim != params.dim:
        raise TrainingError(f"dataset has M={dataset.dim} but model expects M={params.dim}")
    train_trajs, val_trajs = split_trajectories(dataset.trajectories, config.val_fraction)
    data = _make_batch(train_trajs, config.mode)
    n = len(data)
    bs = auto_batch_size(n) if config.batch_size is None else config.batch_size
    bs = n if bs <= 0 or bs >= n else bs
    rng = np.random.default_rng(config.seed)

    theta = params.theta.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    losses = np.empty(config.iterations)
    order = np.arange(n)
    cursor = n
    start = time.perf_counter()
    for it in range(config.iterations):
        if bs == n:
            batch = data
        else:
            if cursor + bs > n:
                order = rng.permutation(n)
                cursor = 0
            batch = data.subset(order[cursor:cursor + bs])
            cursor += bs
        model = Model(params.copy(theta))
        # overflow shows up as a non-finite loss, which is reported below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = loss_and_grad(model, batch, config)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergedError(it, loss)
        losses[it] = loss
        m1 = config.beta1 * m1 + (1 - config.beta1) * grad
        m2 = config.beta2 * m2 + (1 - config.beta2) * grad * grad
        mhat = m1 / (1 - config.beta1 ** (it + 1))
        vhat = m2 / (1 - config.beta2 ** (it + 1))
        theta = theta - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
        if callback is not None:
            callback(it, loss)
    wall = time.perf_counter() - start

    trained = params.copy(theta)
    val = loss_value(Model(trained), _make_batch(val_trajs, config.mode), config) \
        if val_trajs else float("nan")
    report = TrainReport(losses, val, wall, config.lambda_f, config.lambda_n, trained.damping)
    log.info("trained %s: final loss %.3e, val %.3e, %.1fs", params.architecture,
             losses[-1] if len(losses) else float("nan"), val, wall)
    return trained, report


@dataclass
class GridResult:
    best_lambda_f: float
    best_lambda_n: float
    table: list[dict]  # rows: lambda_f, lambda_n, val_loss, status


def grid_search(model_factory: Callable[[], ModelParams], dataset: Dataset,
                config: TrainConfig, grid_f: Sequence[float] = DEFAULT_LAMBDA_GRID,
                grid_n: Sequence[float] = DEFAULT_LAMBDA_GRID, jobs: int = 1) -> GridResult:
    """Train one model per (lambda_F, lambda_N) cell and keep the lowest validation loss.

    Ties go to the larger lambda_F, then the larger lambda_N. Failed cells are
    recorded in the table and excluded from selection.
    """
    cells = [(float(lf), float(ln)) for lf in grid_f for ln in grid_n]
    if config.val_fraction == 0:
        config = replace(config, val_fraction=dataset.val_fraction or 0.2)

    def run(cell):
        lf, ln = cell
        try:
            _, report = train(model_factory(), dataset, replace(config, lambda_f=lf, lambda_n=ln))
        except TrainingError as exc:
            return {"lambda_f": lf, "lambda_n": ln, "val_loss": float("nan"),
                    "status": f"failed: {exc}"}
        status = "ok" if math.isfinite(report.val_loss) else "failed: non-finite validation loss"
        return {"lambda_f": lf, "lambda_n": ln, "val_loss": report.val_loss, "status": status}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            table = list(pool.map(run, cells))
    else:
        table = [run(c) for c in cells]
    ok = [row for row in table if row["status"] == "ok"]
    if not ok:
        raise GridSearchError("every grid cell failed")
    best = min(ok, key=lambda r: (r["val_loss"], -r["lambda_f"], -r["lambda_n"]))
    return GridResult(best["lambda_f"], best["lambda_n"], table)
