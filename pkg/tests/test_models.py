import numpy as np
import pytest

from phnn import autodiff as ad
from phnn.models import (
    ARCHITECTURES,
    ArchitectureMismatchError,
    CheckpointLengthError,
    CheckpointVersionError,
    CorruptCheckpointError,
    Model,
    ModelError,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

SMALL = (8, 8, 8)


def test_phnn_default_layout():
    p = init_params("phnn", 1)
    assert p.widths == {"H": [2, 200, 200, 200, 1], "F": [1, 200, 200, 200, 1]}
    hidden_and_out = 2 * 201 * 200 + 201
    assert p.theta.size == (3 * 200 + hidden_and_out) + (2 * 200 + hidden_and_out) + 1
    assert p.damping == 0.0


def test_baseline_default_layout():
    p = init_params("baseline", 1)
    assert p.widths == {"net": [3, 200, 200, 200, 2]}
    assert p.theta.size == 4 * 200 + 2 * 201 * 200 + 201 * 2


@pytest.mark.parametrize("arch,dim,expected", [
    ("hnn", 1, {"H": [2, 8, 8, 8, 1]}),
    ("tdhnn", 1, {"H": [3, 8, 8, 8, 1]}),
    ("tdhnn", 2, {"H": [5, 8, 8, 8, 1]}),
    ("phnn", 2, {"H": [4, 8, 8, 8, 1], "F": [1, 8, 8, 8, 2]}),
    ("baseline", 2, {"net": [5, 8, 8, 8, 4]}),
])
def test_widths(arch, dim, expected):
    p = init_params(arch, dim, hidden=SMALL)
    assert p.widths == expected
    total = sum((w[i] + 1) * w[i + 1] for w in expected.values() for i in range(len(w) - 1))
    assert p.theta.size == total + (arch == "phnn")


def test_glorot_init():
    p = init_params("hnn", 1, seed=3, hidden=(50, 40))
    nets, _ = p.unflatten()
    for w in nets["H"]:
        fan_in, fan_out = w.shape[0] - 1, w.shape[1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(w[:-1]) <= limit)
        assert np.all(w[-1] == 0.0)
    assert np.abs(nets["H"][1][:-1]).max() > 0.8 * np.sqrt(6.0 / 90)


def test_init_is_seeded():
    a, b = init_params("phnn", seed=4, hidden=SMALL), init_params("phnn", seed=4, hidden=SMALL)
    np.testing.assert_array_equal(a.theta, b.theta)
    c = init_params("phnn", seed=5, hidden=SMALL)
    assert not np.array_equal(a.theta, c.theta)


@pytest.mark.parametrize("arch,act", [("mlp", "tanh"), ("hnn", "relu")])
def test_unknown_names(arch, act):
    with pytest.raises(ModelError):
        init_params(arch, activation=act)


def test_length_checked():
    p = init_params("hnn", hidden=SMALL)
    with pytest.raises(CheckpointLengthError):
        ModelParams("hnn", 1, SMALL, "tanh", 0, p.theta[:-1])


def _linear_phnn(dHdq, dHdp, N, F):
    p = init_params("phnn", 1, hidden=())
    # H layer: rows (q, p, bias); F layer: rows (t, bias); then N
    theta = np.array([dHdq, dHdp, 0.0, 0.0, F, N])
    return p.copy(theta)


def test_phnn_assembly_arithmetic():
    params = _linear_phnn(2.0, 3.0, -0.5, 1.0)
    g = ad.Graph()
    out = forward(params, g, [[0.4]], [[-0.7]], [[2.0]])
    np.testing.assert_allclose(out.state_derivative().value, [[3.0, -2.5]], atol=1e-15)
    np.testing.assert_allclose(Model(params).rhs([0.4, -0.7], 2.0), [3.0, -2.5], atol=1e-15)


def test_hnn_quadratic_stand_in():
    # cos units with a tiny scale realize H = (q^2 + p^2)/2 up to O(eps^2)
    eps = 1e-3
    p = init_params("hnn", 1, activation="cos", hidden=(2,))
    w1 = np.array([[eps, 0.0], [0.0, eps], [0.0, 0.0]])
    w2 = np.array([[-1 / eps**2], [-1 / eps**2], [0.0]])
    params = p.copy(np.concatenate([w1.ravel(), w2.ravel()]))
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (10, 2))
    g = ad.Graph()
    out = Model(params).forward(g, x, np.zeros((10, 1)))
    np.testing.assert_allclose(out.dq.value[:, 0], x[:, 1], atol=1e-5)
    np.testing.assert_allclose(out.dp.value[:, 0], -x[:, 0], atol=1e-5)


@pytest.mark.parametrize("dim", [1, 2])
def test_phnn_output_identity(dim):
    rng = np.random.default_rng(dim)
    p = init_params("phnn", dim, hidden=SMALL, seed=2)
    p = p.copy(rng.normal(size=p.theta.size))
    g = ad.Graph()
    x = rng.uniform(-2, 2, (7, 2 * dim))
    t = rng.uniform(0, 5, (7, 1))
    out = Model(p).forward(g, x, t)
    lhs = out.dp.value
    rhs = -out.dH_dq.value + out.damping.value * out.dH_dp.value + out.force.value
    assert np.max(np.abs(lhs - rhs)) <= 1e-14
    np.testing.assert_array_equal(out.dq.value, out.dH_dp.value)


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("act", ["tanh", "sin", "cos"])
def test_numpy_path_matches_graph(arch, act):
    rng = np.random.default_rng(1)
    p = init_params(arch, 2 if arch == "phnn" else 1, activation=act, hidden=SMALL, seed=1)
    p = p.copy(p.theta + 0.1 * rng.normal(size=p.theta.size))
    m = p.dim
    x = rng.uniform(-2, 2, (9, 2 * m))
    t = rng.uniform(0, 5, (9, 1))
    model = Model(p)
    out = model.forward(ad.Graph(), x, t)
    np.testing.assert_allclose(model.rhs(x, t), out.state_derivative().value, rtol=0, atol=1e-12)
    if arch != "baseline":
        np.testing.assert_allclose(model.hamiltonian(x, t), out.hamiltonian.value[:, 0],
                                   rtol=0, atol=1e-12)


def _divergence(model, x, t, eps=1e-5):
    m = model.dim
    div = 0.0
    for i in range(2 * m):
        e = np.zeros_like(x)
        e[i] = eps
        div += (model.rhs(x + e, t)[i] - model.rhs(x - e, t)[i]) / (2 * eps)
    return div


@pytest.mark.parametrize("arch", ["hnn", "tdhnn"])
def test_symplectic_field_is_divergence_free(arch):
    rng = np.random.default_rng(2)
    model = Model(init_params(arch, 1, hidden=(32, 32), seed=9))
    for _ in range(100):
        x, t = rng.uniform(-2, 2, 2), rng.uniform(0, 10)
        assert abs(_divergence(model, x, t)) <= 1e-6


def test_phnn_time_separation():
    rng = np.random.default_rng(3)
    p = init_params("phnn", 1, hidden=SMALL, seed=3)
    model = Model(p)
    x = rng.uniform(-2, 2, (5, 2))
    np.testing.assert_array_equal(model.hamiltonian(x, 0.0), model.hamiltonian(x, 17.3))
    g1, g2 = ad.Graph(), ad.Graph()
    a = model.forward(g1, x, np.zeros((5, 1)))
    b = model.forward(g2, x, np.full((5, 1), 17.3))
    np.testing.assert_array_equal(a.hamiltonian.value, b.hamiltonian.value)
    # force depends on t only
    c = model.forward(ad.Graph(), rng.uniform(-2, 2, (5, 2)), np.full((5, 1), 17.3))
    np.testing.assert_array_equal(b.force.value, c.force.value)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_finite_at_init_on_wide_inputs(arch):
    rng = np.random.default_rng(4)
    for dim in (1, 2):
        model = Model(init_params(arch, dim, seed=0))
        x = rng.uniform(-10, 10, (50, 2 * dim))
        t = rng.uniform(-10, 10, (50, 1))
        assert np.all(np.isfinite(model.rhs(x, t)))


def test_untrained_damping_is_zero():
    model = Model(init_params("phnn", hidden=SMALL))
    assert model.damping == 0.0


def test_non_phnn_has_no_force():
    with pytest.raises(ModelError):
        Model(init_params("hnn", hidden=SMALL)).force([0.0])
    with pytest.raises(ModelError):
        Model(init_params("baseline", hidden=SMALL)).hamiltonian([[0.0, 0.0]])


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpoint_round_trip(arch, tmp_path):
    rng = np.random.default_rng(5)
    p = init_params(arch, 1, activation="sin", hidden=SMALL, seed=12)
    p = p.copy(p.theta + rng.normal(size=p.theta.size) / 3)
    save_checkpoint(p, tmp_path / "m.ckpt")
    q = load_checkpoint(tmp_path / "m.ckpt", architecture=arch)
    assert (q.architecture, q.dim, q.hidden, q.activation, q.seed) == (arch, 1, SMALL, "sin", 12)
    np.testing.assert_array_equal(p.theta, q.theta)
    x = rng.uniform(-2, 2, (4, 2))
    np.testing.assert_array_equal(Model(p).rhs(x, 0.3), Model(q).rhs(x, 0.3))


def test_checkpoint_truncated(tmp_path):
    path = save_checkpoint(init_params("hnn", hidden=SMALL), tmp_path / "m.ckpt")
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_garbage(tmp_path):
    (tmp_path / "x").write_text("hello\n")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "x")
    (tmp_path / "y").write_text("")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "y")


def test_checkpoint_version(tmp_path):
    path = save_checkpoint(init_params("hnn", hidden=SMALL), tmp_path / "m.ckpt")
    lines = path.read_text().splitlines()
    lines[0] = lines[0].replace('"version": 1', '"version": 99')
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_count_mismatch(tmp_path):
    path = save_checkpoint(init_params("hnn", hidden=SMALL), tmp_path / "m.ckpt")
    lines = path.read_text().splitlines()
    del lines[3]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_architecture_mismatch(tmp_path):
    path = save_checkpoint(init_params("hnn", hidden=SMALL), tmp_path / "m.ckpt")
    with pytest.raises(ArchitectureMismatchError):
        load_checkpoint(path, architecture="phnn")
