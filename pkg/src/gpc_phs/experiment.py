"""Config-driven reproduction of the microactuator experiment.

Stages run in order and each writes its artifact before the next starts:

    data.csv -> regression.csv -> model.json -> openloop.csv -> design.json
    -> certificate.json -> closedloop.csv -> sweep.csv -> report.json

Data, regression, model and design artifacts carry a stage key derived from
the config digest; a rerun with the same config reloads them instead of
recomputing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import gp, ida
from .phs import MicroactuatorParams, Trajectory, integrate, microactuator, read_csv, simulate, write_csv

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# config


@dataclass
class ExcitationConfig:
    amplitude: float = 1.0
    frequency: float = 1.0


@dataclass
class SamplingConfig:
    t_end: float = 20.0
    n_points: int = 300
    noise_variance: float = 1e-3
    x0: tuple[float, ...] = (0.0, 0.0, 1.0)
    dt: float = 1e-3


@dataclass
class FilterConfig:
    window: int = 9
    poly_order: int = 3


@dataclass
class TrainingConfig:
    restarts: int = 3
    max_iters: int = 1500
    spread: float = 1.0
    xatol: float = 1e-3
    fatol: float = 1e-3
    # starts are screened on a strided subset of at most this many samples
    screen_size: int | None = 150
    trainable: tuple[str, ...] = ("b", "r")
    learn_noise: bool = True
    # initial hyperparameters; b starts deliberately far from the truth
    sigma_f: float = 1.0
    lengthscales: tuple[float, ...] = (1.0, 1.0, 1.0)
    b: float = 1.0
    r: float = 1.0
    noise: tuple[float, ...] = (1e-3, 1e-3, 1e-3)


@dataclass
class DesignConfig:
    r_d: float = 2 / 3
    x1_target: float = 0.5
    beta: tuple[float, ...] = (2.0, 2.0, 2.0)
    box_lo: float = -2.0
    box_hi: float = 2.0
    grid: tuple[int, ...] = (21, 21, 21)
    tol_match: float = 1e-6


@dataclass
class OpenLoopConfig:
    enabled: bool = True
    dt: float = 1e-2


@dataclass
class ClosedLoopConfig:
    t_end: float = 13.0
    dt: float = 1e-3
    x0: tuple[float, ...] = (0.0, 0.0, 1.0)


@dataclass
class SweepConfig:
    enabled: bool = True
    sizes: tuple[int, ...] = (100, 300, 600)


@dataclass
class ExperimentConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    plant: MicroactuatorParams = field(default_factory=MicroactuatorParams)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    open_loop: OpenLoopConfig = field(default_factory=OpenLoopConfig)
    closed_loop: ClosedLoopConfig = field(default_factory=ClosedLoopConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        version = d.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version}")
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        s, t, cl = self.sampling, self.training, self.closed_loop
        positive = {
            "sampling.t_end": s.t_end,
            "sampling.dt": s.dt,
            "closed_loop.t_end": cl.t_end,
            "closed_loop.dt": cl.dt,
            "open_loop.dt": self.open_loop.dt,
            "design.r_d": self.design.r_d,
            "training.sigma_f": t.sigma_f,
        }
        for name, v in positive.items():
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if s.noise_variance < 0:
            raise ValueError("sampling.noise_variance must be non-negative")
        if s.n_points < 2 or t.restarts < 1:
            raise ValueError("need n_points >= 2 and restarts >= 1")


def _build(tp, value):
    if dataclasses.is_dataclass(tp):
        hints = {f.name: f.type for f in dataclasses.fields(tp)}
        kwargs = {}
        for f in dataclasses.fields(tp):
            if f.name in value:
                kwargs[f.name] = _build(_resolve(tp, f), value[f.name])
        unknown = set(value) - set(hints)
        if unknown:
            raise ValueError(f"unknown config keys for {tp.__name__}: {sorted(unknown)}")
        return tp(**kwargs)
    if isinstance(value, list):
        return tuple(value)
    return value


def _resolve(tp, f):
    sub = {
        "plant": MicroactuatorParams,
        "excitation": ExcitationConfig,
        "sampling": SamplingConfig,
        "filter": FilterConfig,
        "training": TrainingConfig,
        "design": DesignConfig,
        "open_loop": OpenLoopConfig,
        "closed_loop": ClosedLoopConfig,
        "sweep": SweepConfig,
    }
    return sub.get(f.name, object) if tp is ExperimentConfig else object


def derive_seed(master: int, stage: str, n: int) -> int:
    """Stable sub-seed for (master seed, stage, sample count)."""
    h = hashlib.sha256(f"{master}:{stage}:{n}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# ---------------------------------------------------------------------------
# stages


def _input_fn(cfg: ExperimentConfig):
    a, w = cfg.excitation.amplitude, cfg.excitation.frequency
    return lambda t: np.array([a * math.sin(w * t)])


def generate_data(cfg: ExperimentConfig, n_points: int | None = None, path=None) -> Trajectory:
    """Noisy samples of the true plant under the sinusoidal excitation."""
    s = cfg.sampling
    N = s.n_points if n_points is None else n_points
    if N < 2 or s.t_end / (N - 1) < s.dt:
        raise ValueError(f"{N} samples over {s.t_end} need a finer integration step than {s.dt}")
    plant = microactuator(cfg.plant)
    times = np.linspace(0.0, s.t_end, N)
    clean = simulate(plant, s.x0, _input_fn(cfg), s.t_end, s.dt, t_eval=times)
    rng = np.random.default_rng(derive_seed(cfg.seed, "data", N))
    noisy = clean.states + rng.normal(0.0, math.sqrt(s.noise_variance), clean.states.shape)
    data = Trajectory(times, noisy, clean.inputs)
    if path is not None:
        data.to_csv(path, comment=f"config_digest={cfg.digest()} stage_key={_key(cfg, 'data', N)}")
    return data


# config sections each cached artifact depends on
_STAGE_INPUTS = {
    "data": ("seed", "plant", "excitation", "sampling"),
    "regression": ("seed", "plant", "excitation", "sampling", "filter"),
    "train": ("seed", "plant", "excitation", "sampling", "filter", "training"),
    "design": ("seed", "plant", "excitation", "sampling", "filter", "training", "design"),
}


def _key(cfg: ExperimentConfig, stage: str, N: int) -> str:
    d = cfg.to_dict()
    deps = {k: d[k] for k in _STAGE_INPUTS[stage]}
    canon = json.dumps(deps, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(f"{canon}:{stage}:{N}".encode()).hexdigest()[:16]


def _csv_key(path: Path) -> str | None:
    if not path.exists():
        return None
    first = path.open().readline()
    for tok in first.lstrip("# ").split():
        if tok.startswith("stage_key="):
            return tok.split("=", 1)[1]
    return None


def _json_key(path: Path) -> str | None:
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text()).get("stage_key")
    except json.JSONDecodeError:
        return None


def init_hyperparameters(cfg: ExperimentConfig) -> gp.Hyperparameters:
    t = cfg.training
    return gp.Hyperparameters(t.sigma_f, t.lengthscales, {"b": t.b, "r": t.r}, t.noise)


def _run_stage(name, fn):
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - tagged and re-raised
        raise StageError(name, exc) from exc


@dataclass
class LearnedController:
    N: int
    data: Trajectory
    reg: gp.RegressionDataset
    model: gp.GpPhsModel
    design: ida.DesiredDesign


def learn(cfg: ExperimentConfig, out: Path, N: int | None = None, stop_after: str | None = None) -> LearnedController:
    """Data, filtering, training and design synthesis for one sample count."""
    N = cfg.sampling.n_points if N is None else N
    out.mkdir(parents=True, exist_ok=True)
    tag = f"config_digest={cfg.digest()}"

    data_path = out / "data.csv"
    if _csv_key(data_path) == _key(cfg, "data", N):
        data = Trajectory.from_csv(data_path)
    else:
        data = _run_stage("generate-data", lambda: generate_data(cfg, N, data_path))
    if stop_after == "data":
        return LearnedController(N, data, None, None, None)

    reg_path = out / "regression.csv"
    if _csv_key(reg_path) == _key(cfg, "regression", N):
        reg = gp.RegressionDataset.from_csv(reg_path)
    else:
        reg = _run_stage(
            "filter", lambda: gp.estimate_derivatives(data, cfg.filter.window, cfg.filter.poly_order)
        )
        reg.to_csv(reg_path, comment=f"{tag} stage_key={_key(cfg, 'regression', N)}")

    model_path = out / "model.json"
    if _json_key(model_path) == _key(cfg, "train", N):
        model = gp.GpPhsModel.from_json(model_path.read_text())
        log.info("N=%d: reusing trained model from %s", N, model_path)
    else:
        t = cfg.training

        def fit():
            return gp.train(
                reg,
                init_hyperparameters(cfg),
                gp.STRUCTURES["microactuator"],
                restarts=t.restarts,
                max_iters=t.max_iters,
                seed=derive_seed(cfg.seed, "train", N),
                trainable=t.trainable,
                learn_noise=t.learn_noise,
                spread=t.spread,
                xatol=t.xatol,
                fatol=t.fatol,
                screen_size=t.screen_size,
            )

        model = _run_stage("train", fit)
        _write_json(model_path, json.loads(model.to_json()), cfg, _key(cfg, "train", N))
        log.info("N=%d: trained, b_hat=%.4f nlml=%.3f", N, model.hyper.phys["b"], model.info["nlml"])
    if stop_after == "train":
        return LearnedController(N, data, reg, model, None)

    design_path = out / "design.json"
    if _json_key(design_path) == _key(cfg, "design", N):
        design = ida.DesiredDesign.from_json(design_path.read_text())
    else:
        d = cfg.design

        def synth():
            template = ida.design_template(model, d.r_d, box=(d.box_lo, d.box_hi))
            return ida.solve_equilibrium_shift(model, template, d.x1_target)

        design = _run_stage("synthesize", synth)
        _write_json(design_path, json.loads(design.to_json()), cfg, _key(cfg, "design", N))
    return LearnedController(N, data, reg, model, design)


def _write_json(path: Path, payload: dict, cfg: ExperimentConfig, stage_key: str | None = None) -> None:
    payload = dict(payload)
    payload["config_digest"] = cfg.digest()
    if stage_key is not None:
        payload["stage_key"] = stage_key
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def open_loop_validation(cfg: ExperimentConfig, model: gp.GpPhsModel, path=None) -> dict:
    """Simulate plant and posterior mean under the training input; score the gap.

    Only grid times that do not coincide with a training sample count, so the
    score measures prediction rather than recall.
    """
    s = cfg.sampling
    plant = microactuator(cfg.plant)
    u = _input_fn(cfg)
    dt = cfg.open_loop.dt
    times, truth = integrate(lambda t, x: plant_field(plant, x, u(t)), s.x0, s.t_end, dt)
    _, pred = integrate(lambda t, x: model.dynamics_mean(x[None], u(t)[None])[0], s.x0, s.t_end, dt)
    spacing = s.t_end / (s.n_points - 1)
    phase = times / spacing
    between = np.abs(phase - np.round(phase)) > 1e-6
    rmse = np.sqrt(np.mean((truth[between] - pred[between]) ** 2, axis=0))
    if path is not None:
        header = ["t", "x1", "x2", "x3", "x1_pred", "x2_pred", "x3_pred"]
        write_csv(path, header, np.column_stack([times, truth, pred]), f"config_digest={cfg.digest()}")
    return {"rmse": rmse.tolist(), "scored_points": int(between.sum())}


def plant_field(plant, x, u):
    return (plant.J(x) - plant.R(x)) @ plant.gradH(x) + plant.G(x) @ u


@dataclass
class ClosedLoopRun:
    times: np.ndarray
    states: np.ndarray
    desired: np.ndarray  # pure desired-PHS trajectory from the same x0
    inputs: np.ndarray
    Hd: np.ndarray

    @property
    def mse(self) -> np.ndarray:
        return np.mean((self.states - self.desired) ** 2, axis=1)


def run_closed_loop(cfg: ExperimentConfig, model, design: ida.DesiredDesign) -> ClosedLoopRun:
    c = cfg.closed_loop
    plant = microactuator(cfg.plant)
    loop = ida.closed_loop(plant, model, design)
    times, states = integrate(loop, c.x0, c.t_end, c.dt)
    _, desired = integrate(ida.desired_field(model, design), c.x0, c.t_end, c.dt)
    inputs = np.array([loop.control(x) for x in states])
    Hd, _ = ida.desired_hamiltonian_batch(design, model, states)
    return ClosedLoopRun(times, states, desired, inputs, Hd)


def data_sweep(cfg: ExperimentConfig, out: Path, reuse: dict | None = None) -> dict:
    """Closed-loop vs desired-PHS MSE for every sample count in the sweep.

    Each N gets its own data and training sub-seeds, so results do not depend
    on the order the sizes are listed in. A failing N is recorded and the
    remaining sizes still run.
    """
    out.mkdir(parents=True, exist_ok=True)
    reuse = reuse or {}
    rows, summary, failures = [], {}, {}
    for N in cfg.sweep.sizes:
        try:
            if N in reuse:
                learned = reuse[N]
            else:
                learned = learn(cfg, out / f"N{N}", N)
            run = run_closed_loop(cfg, learned.model, learned.design)
        except Exception as exc:  # noqa: BLE001 - per-N failures are data
            failures[str(N)] = f"{type(exc).__name__}: {exc}"
            log.warning("sweep N=%d failed: %s", N, exc)
            continue
        mse = run.mse
        rows.append(np.column_stack([np.full(len(mse), N), run.times, mse]))
        summary[str(N)] = float(np.mean(mse))
    if rows:
        write_csv(out / "sweep.csv", ["N", "t", "mse"], np.vstack(rows), f"config_digest={cfg.digest()}")
    return {"time_averaged_mse": summary, "failures": failures}


STAGES = ("generate-data", "train", "synthesize", "certify", "simulate", "pipeline")


def run_pipeline(cfg: ExperimentConfig, out, until: str = "pipeline") -> dict:
    """Run every stage up to ``until`` and return the report written to report.json."""
    if until not in STAGES:
        raise ValueError(f"unknown stage {until}")
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    report: dict[str, Any] = {"config_digest": cfg.digest(), "seed": cfg.seed, "stages": []}

    stop = {"generate-data": "data", "train": "train"}.get(until)
    learned = learn(cfg, out, stop_after=stop)
    report["stages"].append("generate-data")
    report["n_samples"] = len(learned.data.times)
    if until == "generate-data":
        return _finish(out, cfg, report)

    model = learned.model
    report["stages"].append("train")
    report["hyperparameters"] = model.hyper.to_dict()
    report["b_hat"] = model.hyper.phys["b"]
    report["nlml"] = model.info.get("nlml")
    if until == "train":
        return _finish(out, cfg, report)

    if cfg.open_loop.enabled:
        report["open_loop"] = _run_stage("open-loop", lambda: open_loop_validation(cfg, model, out / "openloop.csv"))

    design = learned.design
    report["stages"].append("synthesize")
    report["design"] = {"c": design.c, "x_d": design.x_d.tolist()}
    if until == "synthesize":
        return _finish(out, cfg, report)

    d = cfg.design
    cert = _run_stage("certify", lambda: ida.certify(model, design, d.beta, d.grid, d.tol_match))
    _write_json(out / "certificate.json", cert.to_dict(), cfg)
    report["stages"].append("certify")
    report["certificate"] = {
        "passed": cert.passed,
        "max_matching_residual": cert.max_matching_residual,
        "min_robustness_margin": cert.min_robustness_margin,
        "worst_margin_point": cert.worst_margin_point.tolist(),
        "negative_margin_nodes": cert.negative_margin_nodes,
    }
    if until == "certify":
        return _finish(out, cfg, report)

    run = _run_stage("simulate", lambda: run_closed_loop(cfg, model, design))
    _, grad_end = ida.desired_hamiltonian(design, model, run.states[-1])
    header = ["t", "x1", "x2", "x3", "x1_des", "x2_des", "x3_des", "u1", "Hd"]
    write_csv(
        out / "closedloop.csv",
        header,
        np.column_stack([run.times, run.states, run.desired, run.inputs, run.Hd]),
        f"config_digest={cfg.digest()}",
    )
    report["stages"].append("simulate")
    report["closed_loop"] = {
        "terminal_state": run.states[-1].tolist(),
        "x1_error": abs(run.states[-1, 0] - d.x1_target),
        "terminal_grad_Hd_norm": float(np.linalg.norm(grad_end)),
        "max_Hd_increase_per_step": float(np.max(np.diff(run.Hd))),
        "time_averaged_mse": float(np.mean(run.mse)),
    }
    if until == "simulate":
        return _finish(out, cfg, report)

    if cfg.sweep.enabled:
        reuse = {learned.N: learned}
        report["sweep"] = _run_stage("sweep", lambda: data_sweep(cfg, out / "sweep", reuse))
        report["stages"].append("sweep")
    return _finish(out, cfg, report)


def _finish(out: Path, cfg: ExperimentConfig, report: dict) -> dict:
    report = json.loads(json.dumps(report))  # normalise tuples/np scalars
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def read_table(path) -> tuple[list[str], np.ndarray]:
    return read_csv(path)
