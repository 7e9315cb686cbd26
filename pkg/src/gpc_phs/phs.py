"""Port-Hamiltonian plant models, simulation and structural checks.

A plant is ``xdot = (J(x) - R(x)) gradH(x) + G(x) u`` with output
``y = G(x)^T gradH(x)``. Times are plain reals (the experiments label them
milliseconds); no unit conversion happens anywhere in the package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Matrix = Callable[[np.ndarray], np.ndarray]


class ContractViolation(ValueError):
    """Raised when arguments have the wrong shape or violate a precondition."""


class IntegrationBlowup(RuntimeError):
    def __init__(self, t: float, x: np.ndarray):
        super().__init__(f"non-finite state at t={t:.6g}: {x}")
        self.t = t
        self.x = x


@dataclass(frozen=True)
class PlantModel:
    """Evaluable PHS structure. All callables take a state vector of length n."""

    n: int
    m: int
    J: Matrix
    R: Matrix
    G: Matrix
    H: Callable[[np.ndarray], float]
    gradH: Callable[[np.ndarray], np.ndarray]
    name: str = "phs"

    def _state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ContractViolation(f"{self.name}: state must have shape ({self.n},), got {x.shape}")
        return x

    def _input(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.m,):
            raise ContractViolation(f"{self.name}: input must have shape ({self.m},), got {u.shape}")
        return u


def eval_dynamics(sys: PlantModel, x, u) -> np.ndarray:
    x = sys._state(x)
    u = sys._input(u)
    return (sys.J(x) - sys.R(x)) @ sys.gradH(x) + sys.G(x) @ u


def output_port(sys: PlantModel, x) -> np.ndarray:
    x = sys._state(x)
    return sys.G(x).T @ sys.gradH(x)


@dataclass
class Trajectory:
    times: np.ndarray  # (K,)
    states: np.ndarray  # (K, n)
    inputs: np.ndarray  # (K, m)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(len(self.times), -1)
        if not (len(self.times) == len(self.states) == len(self.inputs)):
            raise ContractViolation("times, states and inputs must have equal lengths")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ContractViolation("times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    def to_csv(self, path, comment: str | None = None) -> None:
        header = ["t"] + [f"x{i + 1}" for i in range(self.n)] + [f"u{i + 1}" for i in range(self.m)]
        write_csv(path, header, np.column_stack([self.times, self.states, self.inputs]), comment)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        header, data = read_csv(path)
        n = sum(1 for h in header if h.startswith("x"))
        return cls(data[:, 0], data[:, 1 : 1 + n], data[:, 1 + n :])


def write_csv(path, header: Sequence[str], rows: np.ndarray, comment: str | None = None) -> None:
    """Write a float table with 17 significant digits (exact float64 round trip)."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.atleast_2d(rows):
            w.writerow([f"{v:.17g}" for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=float)
    return header, data.reshape(-1, len(header))


def rk4_step(f, t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + h / 2, x + h / 2 * k1)
    k3 = f(t + h / 2, x + h / 2 * k2)
    k4 = f(t + h, x + h * k3)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(f, x0, t_end: float, dt: float, t_eval: Sequence[float] | None = None):
    """Fixed-step RK4 for ``xdot = f(t, x)`` starting at t=0.

    Without ``t_eval`` the solution is returned on the grid ``k*dt`` for
    ``k = 0..round(t_end/dt)``. With ``t_eval`` (increasing, starting at or
    after 0) every interval between requested times is split into the fewest
    equal steps no longer than ``dt``, so samples land exactly on ``t_eval``.

    Returns ``(times, states)``.
    """
    if dt <= 0 or t_end <= 0:
        raise ContractViolation("dt and t_end must be positive")
    x = np.array(x0, dtype=float)
    if t_eval is None:
        steps = max(1, int(round(t_end / dt)))
        times = np.arange(steps + 1) * dt
        out = np.empty((steps + 1, x.size))
        out[0] = x
        for k in range(steps):
            x = rk4_step(f, times[k], x, dt)
            if not np.all(np.isfinite(x)):
                raise IntegrationBlowup(times[k + 1], x)
            out[k + 1] = x
        return times, out

    times = np.asarray(t_eval, dtype=float)
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ContractViolation("t_eval must be non-negative and strictly increasing")
    out = np.empty((times.size, x.size))
    t = 0.0
    for i, target in enumerate(times):
        span = target - t
        if span > 0:
            steps = max(1, math.ceil(span / dt - 1e-9))
            h = span / steps
            for k in range(steps):
                x = rk4_step(f, t + k * h, x, h)
                if not np.all(np.isfinite(x)):
                    raise IntegrationBlowup(t + (k + 1) * h, x)
        t = target
        out[i] = x
    return times, out


def simulate(
    sys: PlantModel,
    x0,
    input_fn: Callable[[float], np.ndarray],
    t_end: float,
    dt: float,
    t_eval: Sequence[float] | None = None,
) -> Trajectory:
    """Simulate the plant under an open-loop input signal ``u = input_fn(t)``."""
    x0 = sys._state(x0)

    def field(t, x):
        return (sys.J(x) - sys.R(x)) @ sys.gradH(x) + sys.G(x) @ np.atleast_1d(input_fn(t))

    times, states = integrate(field, x0, t_end, dt, t_eval)
    inputs = np.array([np.atleast_1d(input_fn(t)) for t in times], dtype=float)
    return Trajectory(times, states, inputs.reshape(len(times), sys.m))


@dataclass(frozen=True)
class MicroactuatorParams:
    A: float = 1.0
    m_mass: float = 1.0
    eps: float = 1.0
    x1_star: float = 1.0
    b: float = 0.5
    r: float = 1.0
    k_coeff: float = 10.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (value > 0 and math.isfinite(value)):
                raise ContractViolation(f"microactuator parameter {name} must be positive, got {value}")


def microactuator(params: MicroactuatorParams = MicroactuatorParams()) -> PlantModel:
    """Electrostatic microactuator: air gap x1, momentum x2, charge x3."""
    p = params
    Jm = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    Rm = np.diag([0.0, p.b, 1.0 / p.r])
    Gm = np.array([[0.0], [0.0], [1.0 / p.r]])
    cap = p.A * p.eps

    def H(x):
        return p.k_coeff / 4 * (x[0] - p.x1_star) ** 4 + x[1] ** 2 / (2 * p.m_mass) + x[0] * x[2] ** 2 / (2 * cap)

    def gradH(x):
        return np.array(
            [
                p.k_coeff * (x[0] - p.x1_star) ** 3 + x[2] ** 2 / (2 * cap),
                x[1] / p.m_mass,
                x[0] * x[2] / cap,
            ]
        )

    return PlantModel(
        n=3,
        m=1,
        J=lambda x: Jm,
        R=lambda x: Rm,
        G=lambda x: Gm,
        H=H,
        gradH=gradH,
        name="microactuator",
    )


@dataclass
class StructureReport:
    max_skew_violation: float
    min_R_eigenvalue: float
    max_grad_mismatch: float
    worst: dict = field(default_factory=dict)

    def ok(self, skew_tol=1e-12, psd_tol=1e-10, grad_tol=1e-5) -> bool:
        return (
            self.max_skew_violation <= skew_tol
            and self.min_R_eigenvalue >= -psd_tol
            and self.max_grad_mismatch <= grad_tol
        )


def fd_gradient(f, x, h=1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


def check_structure(sys: PlantModel, probes) -> StructureReport:
    """Skew-symmetry of J, PSD-ness of R and gradH vs central differences of H.

    The gradient mismatch is relative: ``|gradH - fd| / max(1, |gradH|)``.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.shape[0] == 0:
        raise ContractViolation("need at least one probe")
    skew, min_eig, grad = 0.0, math.inf, 0.0
    worst = {}
    for x in probes:
        J = sys.J(x)
        s = float(np.max(np.abs(J + J.T)))
        if s >= skew:
            skew, worst["skew"] = s, x
        R = sys.R(x)
        e = float(np.min(np.linalg.eigvalsh((R + R.T) / 2)))
        if e < min_eig:
            min_eig, worst["psd"] = e, x
        g = sys.gradH(x)
        err = float(np.max(np.abs(g - fd_gradient(sys.H, x)) / np.maximum(1.0, np.abs(g))))
        if err >= grad:
            grad, worst["grad"] = err, x
    return StructureReport(skew, min_eig, grad, worst)
