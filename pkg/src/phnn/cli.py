"""Command line pipeline: generate -> train -> rollout -> evaluate -> poincare -> report.

Every stage reads and writes one run directory::

    <root>/<experiment>[/noise_<sigma>]/
        config.json          resolved experiment configuration
        dataset/             ground-truth trajectories (see datagen)
        test_ics.csv         unseen initial conditions used for rollouts
        grid/<arch>.csv      lambda grid table (when grid search is on)
        checkpoints/<arch>.ckpt
        train/<arch>_losses.csv, train/<arch>.json
        rollouts/<arch>_errors.csv, rollouts/<arch>.json
        curves/              recovered force and damping (pHNN)
        surfaces/<arch>.csv  learned Hamiltonian on a (q, p) grid
        poincare/            section points and histogram scores
        report.csv, report.txt
        manifest.json        seeds, configuration and sha256 of every artifact

Wall-clock timings go to ``timing.json``, which is left out of the manifest so
reruns with the same configuration produce byte-identical manifests.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import (
    DatasetError,
    SamplerError,
    build_dataset,
    load_dataset,
    sample_initial_conditions,
    sampler_from_dict,
    save_dataset,
)
from .evaluation import (
    DEFAULT_BINS,
    DEFAULT_WINDOW,
    TEST_SEED_OFFSET,
    evaluate_rollouts,
    hamiltonian_surface,
    histogram_mse,
    poincare,
    recover_force_damping,
)
from .integrate import NonFiniteStateError, integrate_many
from .models import ARCHITECTURES, ACTIVATIONS, CheckpointError, Model, init_params, load_checkpoint, save_checkpoint
from .systems import CHAOTIC_DUFFING_PARAMS, SystemError, duffing_period, make_system
from .train import (
    DEFAULT_LAMBDA_GRID,
    MODES,
    GridSearchError,
    TrainConfig,
    TrainingError,
    grid_search,
    train,
)

log = logging.getLogger("phnn")

OUTPUT_ROOT_ENV = "PHNN_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "phnn_runs"
FAST_ITERATIONS = 3000
FAST_HIDDEN = (64, 64, 64)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MISSING = 0, 2, 3, 4
STAGES = ("generate", "gridsearch", "train", "rollout", "evaluate", "poincare", "report")


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path, stage: str):
        self.path = Path(path)
        self.stage = stage
        super().__init__(f"missing artifact {self.path} (run the '{stage}' stage first)")


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    name: str
    system: str
    params: dict
    sampler: dict
    n_train: int
    n_test: int
    dt: float
    t_max: float
    architectures: list = field(default_factory=lambda: list(ARCHITECTURES))
    mode: str = "derivative"
    iterations: int = 20000
    batch_size: int | None = None
    learning_rate: float = 1e-3
    lambda_f: float = 1e-4
    lambda_n: float = 1e-4
    grid_search: bool = False
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    val_fraction: float = 0.2
    hidden: list = field(default_factory=lambda: [200, 200, 200])
    activation: str = "tanh"
    sigma: float = 0.0
    seed_data: int = 0
    seed_init: int = 1
    seed_shuffle: int = 2
    substeps: int = 100
    period_normalize: bool = False
    poincare: bool = False
    poincare_t_max: float = 18000.0
    poincare_truth_substeps: int = 1
    poincare_bins: int = DEFAULT_BINS
    poincare_window: list = field(default_factory=lambda: list(DEFAULT_WINDOW))
    surface_resolution: int = 101

    def validate(self) -> "ExperimentConfig":
        try:
            spec = make_system(self.system, self.params)
            sampler = sampler_from_dict(self.sampler)
            sample_initial_conditions(sampler, 1, 0)
        except (SystemError, SamplerError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        bad = [a for a in self.architectures if a not in ARCHITECTURES]
        if bad or not self.architectures:
            raise ConfigError(f"unknown architectures {bad}; expected a subset of {ARCHITECTURES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        checks = [
            (self.n_train >= 1, "n_train must be >= 1"),
            (self.n_test >= 1, "n_test must be >= 1"),
            (self.dt > 0 and self.t_max >= self.dt, "need 0 < dt <= t_max"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.sigma >= 0, "sigma must be >= 0"),
            (0 <= self.val_fraction < 1, "val_fraction must be in [0, 1)"),
            (all(int(h) >= 1 for h in self.hidden), "hidden widths must be >= 1"),
            (self.substeps >= 1, "substeps must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if (self.period_normalize or self.poincare) and not spec.is_forced:
            raise ConfigError(f"{self.system} has no forcing period to normalize by")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown configuration fields {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, lambda_f=None, lambda_n=None, val_fraction=0.0) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            iterations=self.iterations,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lambda_f=self.lambda_f if lambda_f is None else lambda_f,
            lambda_n=self.lambda_n if lambda_n is None else lambda_n,
            seed=self.seed_shuffle,
            val_fraction=val_fraction,
        )

    @property
    def seeds(self) -> dict:
        return {"data": self.seed_data, "init": self.seed_init, "shuffle": self.seed_shuffle,
                "test": self.seed_data + TEST_SEED_OFFSET}


def _box(lo, hi, dim=1):
    return {"kind": "box", "lo": [float(lo)] * 2 * dim, "hi": [float(hi)] * 2 * dim}


def _chaotic_preset() -> dict:
    period = 2 * math.pi / CHAOTIC_DUFFING_PARAMS["omega"]
    dt = period / 100
    return dict(
        system="duffing", params=dict(CHAOTIC_DUFFING_PARAMS), sampler=_box(-1, 1),
        # one period sampled at 100 points per trajectory, 20 trajectories = 2000 points
        n_train=20, n_test=25, dt=dt, t_max=period - dt,
        architectures=["baseline", "phnn"], period_normalize=True, poincare=True,
        val_fraction=0.0,
    )


PRESETS: dict[str, dict] = {
    "mass_spring": dict(system="mass_spring", params={}, sampler={"kind": "ring", "r_min": 1.0, "r_max": 4.5},
                        n_train=25, n_test=25, dt=0.05, t_max=3.05),
    "damped": dict(system="damped_mass_spring", params={}, sampler=_box(-1, 1),
                   n_train=20, n_test=25, dt=0.1, t_max=30.1),
    "forced_I": dict(system="forced_I", params={}, sampler={"kind": "ring", "r_min": 1.0, "r_max": 4.5},
                     n_train=20, n_test=25, dt=0.01, t_max=10.01),
    "forced_II": dict(system="forced_II", params={}, sampler={"kind": "ring", "r_min": 1.0, "r_max": 4.5},
                      n_train=20, n_test=25, dt=0.01, t_max=10.01),
    "duffing": dict(system="duffing", params={}, sampler=_box(-1, 1),
                    n_train=25, n_test=25, dt=0.01, t_max=10.01),
    "duffing_chaotic": _chaotic_preset(),
    "relativistic": dict(system="relativistic_duffing", params={}, sampler=_box(0, 2),
                         n_train=25, n_test=25, dt=0.01, t_max=20.01),
    "coupled_two_body": dict(system="coupled_two_body", params={},
                             sampler={"kind": "box", "lo": [-0.5, -0.5, -0.2, -0.2],
                                      "hi": [0.5, 0.5, 0.2, 0.2]},
                             n_train=25, n_test=25, dt=0.1, t_max=5.0, mode="embedded_rk4"),
}


def preset_config(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return ExperimentConfig(name=name, **json.loads(json.dumps(PRESETS[name])))


# flag name -> (config field, converter)
_OVERRIDES = {
    "arch": ("architectures", lambda s: [a.strip() for a in s.split(",") if a.strip()]),
    "mode": ("mode", str),
    "iterations": ("iterations", int),
    "batch_size": ("batch_size", int),
    "lr": ("learning_rate", float),
    "lambda_f": ("lambda_f", float),
    "lambda_n": ("lambda_n", float),
    "hidden": ("hidden", lambda s: [int(h) for h in s.split(",")]),
    "activation": ("activation", str),
    "sigma": ("sigma", float),
    "seed_data": ("seed_data", int),
    "seed_init": ("seed_init", int),
    "seed_shuffle": ("seed_shuffle", int),
    "n_train": ("n_train", int),
    "n_test": ("n_test", int),
    "poincare_t_max": ("poincare_t_max", float),
    "val_fraction": ("val_fraction", float),
}


def resolve_config(args) -> ExperimentConfig:
    """Preset defaults, then the JSON config file, then command-line flags."""
    base: dict = {}
    file_fields: dict = {}
    if getattr(args, "config", None):
        try:
            file_fields = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_fields, dict):
            raise ConfigError("config file must hold a JSON object")
    preset = getattr(args, "preset", None) or file_fields.get("preset")
    if preset:
        base = preset_config(preset).to_dict()
    file_fields = {k: v for k, v in file_fields.items() if k != "preset"}
    merged = {**base, **file_fields}
    if "name" not in merged:
        merged["name"] = preset or "custom"
    if getattr(args, "fast", False):
        merged["iterations"] = FAST_ITERATIONS
        merged["hidden"] = list(FAST_HIDDEN)
    for flag, (key, conv) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            try:
                merged[key] = conv(value)
            except ValueError:
                raise ConfigError(f"invalid value for --{flag.replace('_', '-')}: {value!r}") from None
    if getattr(args, "grid", None) is not None:
        merged["grid_search"] = args.grid
    missing = [f.name for f in dataclasses.fields(ExperimentConfig)
               if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
               and f.name not in merged]
    if missing:
        raise ConfigError(f"configuration is missing fields {missing}; use --preset or a config file")
    return ExperimentConfig.from_dict(merged).validate()


def run_directory(cfg: ExperimentConfig, root=None) -> Path:
    root = Path(root or os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
    path = root / cfg.name
    if cfg.sigma > 0:
        path = path / f"noise_{cfg.sigma:g}"
    return path


# --------------------------------------------------------------------------
# file helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


_UNHASHED = {"manifest.json", "timing.json", "error.json"}


def write_manifest(run_dir: Path, cfg: ExperimentConfig) -> Path:
    files = {}
    for path in sorted(run_dir.rglob("*")):
        rel = path.relative_to(run_dir).as_posix()
        if path.is_file() and rel not in _UNHASHED and not rel.startswith("noise_"):
            files[rel] = _sha256(path)
    manifest = {
        "experiment": cfg.name,
        "seeds": cfg.seeds,
        "config": cfg.to_dict(),
        "files": files,
    }
    path = run_dir / "manifest.json"
    _write_json(path, manifest)
    return path


def _record_timing(run_dir: Path, key: str, seconds: float) -> None:
    path = run_dir / "timing.json"
    timing = json.loads(path.read_text()) if path.exists() else {}
    timing[key] = seconds
    _write_json(path, timing)


# --------------------------------------------------------------------------
# stages


def _load_run_config(run_dir: Path) -> ExperimentConfig:
    path = _require(run_dir / "config.json", "generate")
    return ExperimentConfig.from_dict(json.loads(path.read_text())).validate()


def _test_ics(cfg: ExperimentConfig) -> np.ndarray:
    return sample_initial_conditions(sampler_from_dict(cfg.sampler), cfg.n_test,
                                     cfg.seed_data + TEST_SEED_OFFSET)


def stage_generate(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    spec = make_system(cfg.system, cfg.params)
    ds = build_dataset(spec, sampler_from_dict(cfg.sampler), cfg.n_train, cfg.dt, cfg.t_max,
                       cfg.sigma, cfg.seed_data, val_fraction=cfg.val_fraction,
                       substeps=cfg.substeps)
    save_dataset(ds, run_dir / "dataset")
    ics = _test_ics(cfg)
    m = spec.dim
    header = [f"q{i + 1}" for i in range(m)] + [f"p{i + 1}" for i in range(m)]
    _write_csv(run_dir / "test_ics.csv", header, ics.tolist())


def _load_dataset(run_dir: Path):
    _require(run_dir / "dataset" / "metadata.json", "generate")
    return load_dataset(run_dir / "dataset")


def _defines_penalties(arch: str) -> bool:
    return arch == "phnn"


def _hidden(cfg):
    return tuple(int(h) for h in cfg.hidden)


def _factory(cfg: ExperimentConfig, arch: str, dim: int):
    return lambda: init_params(arch, dim, cfg.activation, cfg.seed_init, _hidden(cfg))


def stage_gridsearch(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    ds = _load_dataset(run_dir)
    for arch in cfg.architectures:
        if not _defines_penalties(arch):
            continue
        t0 = time.perf_counter()
        result = grid_search(_factory(cfg, arch, ds.dim), ds,
                             cfg.train_config(val_fraction=cfg.val_fraction or 0.2),
                             cfg.lambda_grid, cfg.lambda_grid, jobs=jobs)
        _record_timing(run_dir, f"gridsearch/{arch}", time.perf_counter() - t0)
        rows = [(r["lambda_f"], r["lambda_n"], r["val_loss"], r["status"]) for r in result.table]
        _write_csv(run_dir / "grid" / f"{arch}.csv", ["lambda_f", "lambda_n", "val_loss", "status"], rows)
        _write_json(run_dir / "grid" / f"{arch}_choice.json",
                    {"lambda_f": result.best_lambda_f, "lambda_n": result.best_lambda_n})


def _chosen_lambdas(cfg: ExperimentConfig, run_dir: Path, arch: str):
    if cfg.grid_search and _defines_penalties(arch):
        choice = json.loads(_require(run_dir / "grid" / f"{arch}_choice.json", "gridsearch").read_text())
        return choice["lambda_f"], choice["lambda_n"]
    return cfg.lambda_f, cfg.lambda_n


def stage_train(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    ds = _load_dataset(run_dir)
    for arch in cfg.architectures:
        lf, ln = _chosen_lambdas(cfg, run_dir, arch)
        params, report = train(_factory(cfg, arch, ds.dim)(), ds, cfg.train_config(lf, ln))
        _record_timing(run_dir, f"train/{arch}", report.wall_time)
        save_checkpoint(params, _ckpt_path(run_dir, arch, create=True))
        _write_csv(run_dir / "train" / f"{arch}_losses.csv", ["iteration", "loss"],
                   enumerate(report.losses.tolist()))
        _write_json(run_dir / "train" / f"{arch}.json", {
            "architecture": arch,
            "iterations": len(report.losses),
            "final_loss": float(report.losses[-1]) if len(report.losses) else None,
            "val_loss": None if math.isnan(report.val_loss) else report.val_loss,
            "lambda_f": lf,
            "lambda_n": ln,
            "damping": report.damping,
        })


def _ckpt_path(run_dir: Path, arch: str, create: bool = False) -> Path:
    path = run_dir / "checkpoints" / f"{arch}.ckpt"
    if create:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_model(run_dir: Path, arch: str) -> Model:
    path = _require(_ckpt_path(run_dir, arch), "train")
    return Model(load_checkpoint(path, architecture=arch))


def _period(cfg: ExperimentConfig):
    if not cfg.period_normalize:
        return None
    return duffing_period(make_system(cfg.system, cfg.params))


def _load_test_ics(run_dir: Path) -> np.ndarray:
    path = _require(run_dir / "test_ics.csv", "generate")
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _truths(cfg: ExperimentConfig, ics):
    spec = make_system(cfg.system, cfg.params)
    return spec, integrate_many(spec.rhs, ics, 0.0, cfg.dt, cfg.t_max, cfg.substeps)


def stage_rollout(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    ics = _load_test_ics(run_dir)
    models = {arch: _load_model(run_dir, arch) for arch in cfg.architectures}
    spec, truths = _truths(cfg, ics)
    for arch, model in models.items():
        rep = evaluate_rollouts(model, spec, ics, cfg.dt, cfg.t_max, truths=truths,
                                period=_period(cfg))
        rows = []
        for i, (se, ee) in enumerate(zip(rep.state_errors, rep.energy_errors)):
            if se is None:
                continue
            times = truths[i].times[1:]
            rows.extend((i, k + 1, t, s, e) for k, (t, s, e) in enumerate(zip(times, se, ee)))
        _write_csv(run_dir / "rollouts" / f"{arch}_errors.csv",
                   ["ic", "step", "t", "state_sq_error", "energy_sq_error"], rows)
        summary = rep.summary()
        summary.update({"architecture": arch, "errors_file": f"rollouts/{arch}_errors.csv",
                        "diverged": [i for i, d in enumerate(rep.diverged) if d]})
        _write_json(run_dir / "rollouts" / f"{arch}.json", summary)


def stage_evaluate(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    ics = _load_test_ics(run_dir)
    spec, truths = _truths(cfg, ics[:1])
    reference = truths[0]
    for arch in cfg.architectures:
        model = _load_model(run_dir, arch)
        if arch == "phnn":
            times = reference.times
            tin = times if _period(cfg) is None else np.mod(times, _period(cfg))
            curves = recover_force_damping(model, tin, reference)
            true_force = spec.force(times).reshape(len(times), -1)
            m = spec.dim
            rows = [(t, *f, *ft) for t, f, ft in zip(times, curves["force"], true_force)]
            _write_csv(run_dir / "curves" / "force.csv",
                       ["t"] + [f"force{i + 1}" for i in range(m)] + [f"true_force{i + 1}" for i in range(m)],
                       rows)
            true_damp = spec.damping_coefficient * spec.stationary_partials(
                reference.states[:, :m], reference.states[:, m:])[1]
            rows = [(t, *d, *dt_) for t, d, dt_ in zip(times, curves["damping"], true_damp)]
            _write_csv(run_dir / "curves" / "damping.csv",
                       ["t"] + [f"damping{i + 1}" for i in range(m)] + [f"true_damping{i + 1}" for i in range(m)],
                       rows)
            _write_json(run_dir / "curves" / "summary.json", {
                "damping_coefficient": curves["damping_coefficient"],
                "true_damping_coefficient": spec.damping_coefficient,
                "max_force_error": float(np.max(np.abs(curves["force"] - true_force))),
            })
        if arch in ("hnn", "tdhnn", "phnn"):
            qs, ps, values = hamiltonian_surface(model, resolution=cfg.surface_resolution)
            rows = [(q, p, values[i, j]) for i, q in enumerate(qs) for j, p in enumerate(ps)]
            _write_csv(run_dir / "surfaces" / f"{arch}.csv", ["q", "p", "H"], rows)


def stage_poincare(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    if not cfg.poincare:
        return
    spec = make_system(cfg.system, cfg.params)
    period = duffing_period(spec)
    ics = _load_test_ics(run_dir)
    x0 = ics[0]
    n_periods = int(math.floor(cfg.poincare_t_max / period + 1e-9))
    dt = cfg.dt
    window, bins = tuple(cfg.poincare_window), cfg.poincare_bins
    sections = {"truth": poincare(spec, x0, period, n_periods, dt, substeps=cfg.poincare_truth_substeps,
                                  window=window, bins=bins, tag="truth")}
    for arch in cfg.architectures:
        sections[arch] = poincare(_load_model(run_dir, arch), x0, period, n_periods, dt,
                                  window=window, bins=bins, tag=arch)
    scores = {}
    for tag, sec in sections.items():
        _write_csv(run_dir / "poincare" / f"{tag}.csv", ["q", "p"], sec.points.tolist())
        if tag != "truth":
            try:
                scores[tag] = histogram_mse(sec, sections["truth"])
            except ValueError:
                scores[tag] = None
    _write_json(run_dir / "poincare" / "scores.json", {
        "n_periods": n_periods,
        "bins": bins,
        "window": list(window),
        "initial_state": x0.tolist(),
        "histogram_mse": scores,
        "diverged": {tag: sec.diverged for tag, sec in sections.items()},
        "counts": {tag: sec.count for tag, sec in sections.items()},
    })


def _fmt(v) -> str:
    return "inf" if v is None or not math.isfinite(v) else f"{v:.3e}"


def stage_report(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    rows = []
    for arch in cfg.architectures:
        s = json.loads(_require(run_dir / "rollouts" / f"{arch}.json", "rollout").read_text())
        rows.append((arch, s["state_mse_mean"], s["state_mse_std"], s["energy_mse_mean"],
                     s["energy_mse_std"], s["n_diverged"], s["errors_file"]))
    _write_csv(run_dir / "report.csv",
               ["architecture", "state_mse_mean", "state_mse_std", "energy_mse_mean",
                "energy_mse_std", "n_diverged", "source"], rows)
    lines = [f"{cfg.name}: mean +/- std over {cfg.n_test} test initial conditions", ""]
    lines.append(f"{'method':<10} {'State':>23} {'Energy':>23}")
    for arch, sm, ss, em, es, *_ in rows:
        lines.append(f"{arch:<10} {_fmt(sm):>10} +/- {_fmt(ss):<9} {_fmt(em):>10} +/- {_fmt(es):<9}")
    scores_path = run_dir / "poincare" / "scores.json"
    if cfg.poincare and scores_path.exists():
        scores = json.loads(scores_path.read_text())["histogram_mse"]
        lines.append("")
        lines.append("Poincare histogram MSE vs ground truth:")
        for tag, v in scores.items():
            lines.append(f"  {tag:<10} {_fmt(v)}")
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n")


STAGE_FUNCS = {
    "generate": stage_generate,
    "gridsearch": stage_gridsearch,
    "train": stage_train,
    "rollout": stage_rollout,
    "evaluate": stage_evaluate,
    "poincare": stage_poincare,
    "report": stage_report,
}


def _fingerprint(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def _stage_marker(run_dir: Path, stage: str) -> Path:
    return run_dir / "stages" / f"{stage}.done"


def run_stage(stage: str, cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> None:
    log.info("stage %s -> %s", stage, run_dir)
    t0 = time.perf_counter()
    STAGE_FUNCS[stage](cfg, run_dir, jobs)
    _record_timing(run_dir, f"stage/{stage}", time.perf_counter() - t0)
    marker = _stage_marker(run_dir, stage)
    marker.parent.mkdir(parents=True, exist_ok=True)
    marker.write_text(_fingerprint(cfg) + "\n")
    write_manifest(run_dir, cfg)


def run_pipeline(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1, restart: bool = False) -> Path:
    """Run every stage, skipping stages already completed with the same configuration."""
    run_dir.mkdir(parents=True, exist_ok=True)
    fp = _fingerprint(cfg)
    config_path = run_dir / "config.json"
    if config_path.exists() and not restart:
        if _fingerprint(ExperimentConfig.from_dict(json.loads(config_path.read_text()))) != fp:
            restart = True  # configuration changed: nothing can be reused
    if restart and (run_dir / "stages").exists():
        for marker in (run_dir / "stages").iterdir():
            marker.unlink()
    _write_json(config_path, cfg.to_dict())
    for stage in STAGES:
        if stage == "gridsearch" and not cfg.grid_search:
            continue
        if stage == "poincare" and not cfg.poincare:
            continue
        marker = _stage_marker(run_dir, stage)
        if marker.exists() and marker.read_text().strip() == fp:
            log.info("stage %s already complete, skipping", stage)
            continue
        run_stage(stage, cfg, run_dir, jobs)
    return run_dir


# --------------------------------------------------------------------------
# argument parsing


def _add_experiment_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--preset", choices=sorted(PRESETS), help="named experiment")
    p.add_argument("--config", help="JSON configuration document (flags override its fields)")
    p.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV} or ./{DEFAULT_OUTPUT_ROOT})")
    p.add_argument("--run-dir", help="explicit run directory (overrides --out and naming)")
    p.add_argument("--fast", action="store_true",
                   help=f"desk scale: {FAST_ITERATIONS} iterations, width {FAST_HIDDEN[0]}")
    p.add_argument("--jobs", type=int, default=1, help="parallel grid-search cells")
    p.add_argument("--arch", help="comma-separated architectures")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-f", type=float, dest="lambda_f")
    p.add_argument("--lambda-n", type=float, dest="lambda_n")
    p.add_argument("--grid", action=argparse.BooleanOptionalAction, default=None,
                   help="select (lambda_F, lambda_N) by grid search before training")
    p.add_argument("--hidden", help="comma-separated hidden widths, e.g. 200,200,200")
    p.add_argument("--activation", choices=ACTIVATIONS)
    p.add_argument("--sigma", type=float, help="std of Gaussian noise on training states")
    p.add_argument("--seed-data", type=int, dest="seed_data")
    p.add_argument("--seed-init", type=int, dest="seed_init")
    p.add_argument("--seed-shuffle", type=int, dest="seed_shuffle")
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--poincare-t-max", type=float, dest="poincare_t_max")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phnn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run the whole pipeline (resumable)",
        "generate": "integrate ground-truth training data and test initial conditions",
        "gridsearch": "select (lambda_F, lambda_N) on a validation split",
        "train": "train one checkpoint per architecture",
        "rollout": "roll out test initial conditions and score state/energy MSE",
        "evaluate": "recovered force/damping curves and Hamiltonian surfaces",
        "poincare": "Poincare sections and histogram scores (forced systems)",
        "report": "collate the comparison table",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _add_experiment_options(p)
        if name == "run":
            p.add_argument("--restart", action="store_true", help="ignore completed stages")
    return parser


def _explicit_options(args) -> bool:
    return bool(args.preset or args.config)


def _apply_cli_overrides(stored: ExperimentConfig, args) -> ExperimentConfig:
    d = stored.to_dict()
    if args.fast:
        d["iterations"], d["hidden"] = FAST_ITERATIONS, list(FAST_HIDDEN)
    for flag, (key, conv) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            d[key] = conv(value)
    if args.grid is not None:
        d["grid_search"] = args.grid
    return ExperimentConfig.from_dict(d).validate()


def _error_record(run_dir: Path | None, stage: str, exc: Exception, code: int) -> None:
    record = {"stage": stage, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, MissingArtifactError):
        record["expected_path"] = str(exc.path)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if run_dir is not None and run_dir.exists():
        _write_json(run_dir / "error.json", record)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    run_dir = None
    try:
        if stage in ("run", "generate"):
            cfg = resolve_config(args)
            run_dir = Path(args.run_dir) if args.run_dir else run_directory(cfg, args.out)
        else:
            # later stages read the configuration stored by 'generate'
            if args.run_dir:
                run_dir = Path(args.run_dir)
            elif _explicit_options(args):
                run_dir = run_directory(resolve_config(args), args.out)
            else:
                raise ConfigError("give --preset, --config or --run-dir")
            cfg = _apply_cli_overrides(_load_run_config(run_dir), args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if stage == "run":
            run_pipeline(cfg, run_dir, args.jobs, args.restart)
        else:
            run_dir.mkdir(parents=True, exist_ok=True)
            if stage == "generate":
                _write_json(run_dir / "config.json", cfg.to_dict())
            run_stage(stage, cfg, run_dir, args.jobs)
        err = run_dir / "error.json"
        if err.exists():
            err.unlink()
        print(run_dir)
        return EXIT_OK
    except MissingArtifactError as exc:
        _error_record(run_dir, stage, exc, EXIT_MISSING)
        return EXIT_MISSING
    except (ConfigError, CheckpointError) as exc:
        _error_record(run_dir, stage, exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except (TrainingError, GridSearchError, NonFiniteStateError, DatasetError, FloatingPointError) as exc:
        _error_record(run_dir, stage, exc, EXIT_NUMERICAL)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
