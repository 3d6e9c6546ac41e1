"""The four architectures compared in this package.

``baseline``  MLP(q, p, t) -> (dq/dt, dp/dt)
``hnn``       H = MLP(q, p);    (dq/dt, dp/dt) = (dH/dp, -dH/dq)
``tdhnn``     H = MLP(q, p, t); same symplectic readout
``phnn``      H = MLP(q, p), F = MLP(t), scalar N;
              dq/dt = dH/dp,  dp/dt = -dH/dq + N dH/dp + F(t)

Every dense layer is stored as an augmented matrix of shape
``(fan_in + 1, fan_out)`` whose last row is the bias.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

__all__ = [
    "ARCHITECTURES",
    "ACTIVATIONS",
    "ModelParams",
    "ModelOutput",
    "Model",
    "ModelError",
    "CheckpointError",
    "CorruptCheckpointError",
    "CheckpointVersionError",
    "CheckpointLengthError",
    "ArchitectureMismatchError",
    "init_params",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]

ARCHITECTURES = ("baseline", "hnn", "tdhnn", "phnn")
ACTIVATIONS = ("tanh", "sin", "cos")
DEFAULT_HIDDEN = (200, 200, 200)
CHECKPOINT_FORMAT = "phnn-checkpoint"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def _net_widths(architecture: str, dim: int, hidden) -> dict[str, list[int]]:
    h = list(hidden)
    if architecture == "baseline":
        return {"net": [2 * dim + 1, *h, 2 * dim]}
    if architecture == "hnn":
        return {"H": [2 * dim, *h, 1]}
    if architecture == "tdhnn":
        return {"H": [2 * dim + 1, *h, 1]}
    if architecture == "phnn":
        return {"H": [2 * dim, *h, 1], "F": [1, *h, dim]}
    raise ModelError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")


@dataclass
class ModelParams:
    architecture: str
    dim: int
    hidden: tuple[int, ...]
    activation: str
    seed: int
    theta: np.ndarray

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        expected = self.expected_size()
        if self.theta.shape != (expected,):
            raise CheckpointLengthError(
                f"{self.architecture}: parameter vector has {self.theta.size} entries, "
                f"expected {expected}"
            )

    @property
    def widths(self) -> dict[str, list[int]]:
        return _net_widths(self.architecture, self.dim, self.hidden)

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        return {
            name: [(w[i] + 1, w[i + 1]) for i in range(len(w) - 1)]
            for name, w in self.widths.items()
        }

    def expected_size(self) -> int:
        n = sum(a * b for shapes in self.layer_shapes().values() for a, b in shapes)
        return n + (1 if self.architecture == "phnn" else 0)

    def unflatten(self, theta: np.ndarray | None = None) -> tuple[dict[str, list[np.ndarray]], float | None]:
        theta = self.theta if theta is None else theta
        nets: dict[str, list[np.ndarray]] = {}
        pos = 0
        for name, shapes in self.layer_shapes().items():
            mats = []
            for a, b in shapes:
                mats.append(theta[pos:pos + a * b].reshape(a, b))
                pos += a * b
            nets[name] = mats
        damping = float(theta[pos]) if self.architecture == "phnn" else None
        return nets, damping

    @property
    def damping(self) -> float | None:
        return float(self.theta[-1]) if self.architecture == "phnn" else None

    def copy(self, theta: np.ndarray | None = None) -> "ModelParams":
        return ModelParams(self.architecture, self.dim, self.hidden, self.activation, self.seed,
                           (self.theta if theta is None else theta).copy())


def init_params(architecture: str, dim: int = 1, activation: str = "tanh", seed: int = 0,
                hidden=DEFAULT_HIDDEN) -> ModelParams:
    """Glorot-uniform weights, zero biases and a zero damping scalar."""
    if activation not in ACTIVATIONS:
        raise ModelError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
    widths = _net_widths(architecture, dim, hidden)
    rng = np.random.default_rng(seed)
    chunks = []
    for w in widths.values():
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            mat = np.zeros((fan_in + 1, fan_out))
            mat[:-1] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            chunks.append(mat.ravel())
    if architecture == "phnn":
        chunks.append(np.zeros(1))
    return ModelParams(architecture, dim, tuple(hidden), activation, seed, np.concatenate(chunks))


@dataclass
class ModelOutput:
    dq: ad.Var
    dp: ad.Var
    hamiltonian: ad.Var | None = None
    force: ad.Var | None = None
    damping: ad.Var | None = None
    dH_dq: ad.Var | None = None
    dH_dp: ad.Var | None = None

    def state_derivative(self) -> ad.Var:
        return ad.concat([self.dq, self.dp], axis=1)


_GRAPH_ACT = {"tanh": ad.tanh, "sin": ad.sin, "cos": ad.cos}


def _graph_mlp(graph: ad.Graph, x: ad.Var, layers: list[ad.Var], act: str) -> ad.Var:
    ones = graph.constant(np.ones((x.shape[0], 1)))
    h = x
    for i, w in enumerate(layers):
        h = ad.concat([h, ones], axis=1) @ w
        if i < len(layers) - 1:
            h = _GRAPH_ACT[act](h)
    return h


def _np_act(act: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and derivative."""
    if act == "tanh":
        h = np.tanh(z)
        return h, 1.0 - h * h
    if act == "sin":
        return np.sin(z), np.cos(z)
    return np.cos(z), -np.sin(z)


def _np_mlp(x: np.ndarray, layers: list[np.ndarray], act: str, need_grad: bool = False):
    """Plain numpy MLP; optionally also d(sum of scalar output)/dx."""
    h = x
    derivs = []
    for w in layers[:-1]:
        z = h @ w[:-1] + w[-1]
        h, d = _np_act(act, z)
        derivs.append(d)
    w = layers[-1]
    out = h @ w[:-1] + w[-1]
    if not need_grad:
        return out, None
    g = np.broadcast_to(w[:-1, 0], h.shape)
    for w, d in zip(reversed(layers[:-1]), reversed(derivs)):
        g = (g * d) @ w[:-1].T
    return out, g


class Model:
    """Binds :class:`ModelParams` to graph evaluation and a fast numpy path."""

    def __init__(self, params: ModelParams):
        self.params = params
        self._nets, self._damping = params.unflatten()

    @property
    def architecture(self) -> str:
        return self.params.architecture

    @property
    def dim(self) -> int:
        return self.params.dim

    # -- graph path -----------------------------------------------------------

    def bind(self, graph: ad.Graph) -> dict:
        """Create parameter leaves on ``graph`` (in flat-vector order)."""
        leaves = {name: [graph.parameter(w) for w in mats] for name, mats in self._nets.items()}
        if self.architecture == "phnn":
            leaves["N"] = graph.parameter(np.array(self._damping))
        return leaves

    @staticmethod
    def leaf_list(leaves: dict) -> list[ad.Var]:
        out = []
        for name, value in leaves.items():
            out.extend(value if isinstance(value, list) else [value])
        return out

    def forward(self, graph: ad.Graph, state, t, leaves: dict | None = None) -> ModelOutput:
        """Record the model on ``graph``.

        ``state`` is a Var or array of shape ``(B, 2M)``; ``t`` is a Var or
        array broadcastable to ``(B, 1)``.
        """
        if leaves is None:
            leaves = self.bind(graph)
        if not isinstance(state, ad.Var):
            state = graph.constant(np.atleast_2d(np.asarray(state, float)))
        batch = state.shape[0]
        if not isinstance(t, ad.Var):
            t = graph.constant(np.broadcast_to(np.asarray(t, float).reshape(-1, 1), (batch, 1)))
        m, act, arch = self.dim, self.params.activation, self.architecture
        if state.shape != (batch, 2 * m) or t.shape != (batch, 1):
            raise ad.ShapeMismatchError("model input", state.shape, t.shape)

        if arch == "baseline":
            out = _graph_mlp(graph, ad.concat([state, t], axis=1), leaves["net"], act)
            return ModelOutput(out[:, :m], out[:, m:])

        x = state if arch in ("hnn", "phnn") else ad.concat([state, t], axis=1)
        H = _graph_mlp(graph, x, leaves["H"], act)
        dH = ad.grad_as_var(graph, ad.reduce_sum(H), state)
        dH_dq, dH_dp = dH[:, :m], dH[:, m:]
        if arch in ("hnn", "tdhnn"):
            return ModelOutput(dH_dp, -dH_dq, H, dH_dq=dH_dq, dH_dp=dH_dp)

        F = _graph_mlp(graph, t, leaves["F"], act)
        N = leaves["N"]
        dp = -dH_dq + ad.mul(N, dH_dp) + F
        return ModelOutput(dH_dp, dp, H, F, N, dH_dq, dH_dp)

    # -- numpy path (rollouts, surfaces) ---------------------------------------

    def _inputs(self, state, t):
        state = np.atleast_2d(np.asarray(state, float))
        t = np.broadcast_to(np.asarray(t, float).reshape(-1, 1), (state.shape[0], 1))
        return state, t

    def rhs(self, state, t) -> np.ndarray:
        """Predicted ``(dq/dt, dp/dt)`` without recording a graph."""
        squeeze = np.ndim(state) == 1
        state, t = self._inputs(state, t)
        m, act, arch = self.dim, self.params.activation, self.architecture
        if arch == "baseline":
            out, _ = _np_mlp(np.concatenate([state, t], axis=1), self._nets["net"], act)
        else:
            x = state if arch in ("hnn", "phnn") else np.concatenate([state, t], axis=1)
            _, g = _np_mlp(x, self._nets["H"], act, need_grad=True)
            dq, dp = g[:, m:2 * m], -g[:, :m]
            if arch == "phnn":
                F, _ = _np_mlp(t, self._nets["F"], act)
                dp = dp + self._damping * dq + F
            out = np.concatenate([dq, dp], axis=1)
        return out[0] if squeeze else out

    def hamiltonian(self, state, t=0.0) -> np.ndarray:
        if self.architecture == "baseline":
            raise ModelError("baseline network defines no Hamiltonian")
        state, t = self._inputs(state, t)
        x = state if self.architecture in ("hnn", "phnn") else np.concatenate([state, t], axis=1)
        H, _ = _np_mlp(x, self._nets["H"], self.params.activation)
        return H[:, 0]

    def hamiltonian_grad(self, state, t=0.0) -> np.ndarray:
        state, t = self._inputs(state, t)
        x = state if self.architecture in ("hnn", "phnn") else np.concatenate([state, t], axis=1)
        _, g = _np_mlp(x, self._nets["H"], self.params.activation, need_grad=True)
        return g[:, : 2 * self.dim]

    def force(self, t) -> np.ndarray:
        if self.architecture != "phnn":
            raise ModelError(f"{self.architecture} defines no force network")
        t = np.asarray(t, float).reshape(-1, 1)
        F, _ = _np_mlp(t, self._nets["F"], self.params.activation)
        return F

    @property
    def damping(self) -> float | None:
        return self._damping


def forward(params: ModelParams, graph: ad.Graph, q, p, t) -> ModelOutput:
    """Functional form: record ``params`` applied to ``(q, p, t)`` on ``graph``."""
    if isinstance(q, ad.Var) or isinstance(p, ad.Var):
        q = q if isinstance(q, ad.Var) else graph.constant(q)
        p = p if isinstance(p, ad.Var) else graph.constant(p)
        state = ad.concat([q, p], axis=1)
    else:
        q = np.asarray(q, float).reshape(-1, params.dim)
        p = np.asarray(p, float).reshape(-1, params.dim)
        state = np.concatenate([q, p], axis=1)
    return Model(params).forward(graph, state, t)


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": params.architecture,
        "dim": params.dim,
        "hidden": list(params.hidden),
        "activation": params.activation,
        "seed": params.seed,
        "n_params": int(params.theta.size),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend("%.17g" % v for v in params.theta)
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path, architecture: str | None = None) -> ModelParams:
    """Load a checkpoint; ``architecture`` optionally asserts the expected tag."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CorruptCheckpointError(f"{path}: empty checkpoint")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}"
        )
    if lines[-1] != "end":
        raise CorruptCheckpointError(f"{path}: missing end marker (truncated file?)")
    body = lines[1:-1]
    try:
        theta = np.array([float(v) for v in body])
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: malformed parameter value") from exc
    if theta.size != header["n_params"]:
        raise CorruptCheckpointError(
            f"{path}: header declares {header['n_params']} values, found {theta.size}"
        )
    if architecture is not None and header["architecture"] != architecture:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint holds {header['architecture']!r}, expected {architecture!r}"
        )
    return ModelParams(header["architecture"], int(header["dim"]), tuple(header["hidden"]),
                       header["activation"], int(header["seed"]), theta)
