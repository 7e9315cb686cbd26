"""Robust IDA-PBC synthesis and grid certification on top of a GP-PHS posterior.

The desired closed loop is ``xdot = (Jd - Rd) grad Hd`` with

    Hd(x) = mu_H(x) + (x_k - c)^2,

``mu_H`` the posterior-mean Hamiltonian and ``k`` the actuated coordinate.
The control law cancels the posterior drift in the actuated directions:

    u = (G^T G)^{-1} G^T ((Jd - Rd) grad Hd - mu(xdot | x, u=0)).

Anything with the small "posterior" surface used here (``dynamics_mean``,
``dynamics_variance``, ``hamiltonian_mean``, ``hamiltonian_grad_mean``,
``G``, ``JR``, ``n``) can stand in for a trained model; :class:`ExactPosterior`
wraps a known plant that way, which is how the oracle checks are built.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .phs import ContractViolation, PlantModel, eval_dynamics

DESIGN_SCHEMA_VERSION = 1
CERTIFICATE_SCHEMA_VERSION = 1


class NoAnnihilator(ValueError):
    pass


class DesignInfeasible(RuntimeError):
    pass


class SaddleRejected(DesignInfeasible):
    pass


class RankLoss(np.linalg.LinAlgError):
    pass


class ExactPosterior:
    """A known plant dressed up as a zero-variance posterior."""

    def __init__(self, plant: PlantModel):
        self.plant = plant
        self.n = plant.n
        self.m = plant.m

    def G(self, x):
        return self.plant.G(np.asarray(x, dtype=float))

    def JR(self, x):
        x = np.asarray(x, dtype=float)
        return self.plant.J(x) - self.plant.R(x)

    def dynamics_mean(self, Xq, U=None):
        Xq = np.asarray(Xq, dtype=float).reshape(-1, self.n)
        U = np.zeros((len(Xq), self.m)) if U is None else np.asarray(U, dtype=float).reshape(len(Xq), self.m)
        return np.array([eval_dynamics(self.plant, x, u) for x, u in zip(Xq, U)])

    def dynamics_variance(self, Xq):
        return np.zeros(np.asarray(Xq, dtype=float).reshape(-1, self.n).shape)

    def hamiltonian_mean(self, Xq):
        return np.array([self.plant.H(x) for x in np.asarray(Xq, dtype=float).reshape(-1, self.n)])

    def hamiltonian_grad_mean(self, Xq):
        return np.array([self.plant.gradH(x) for x in np.asarray(Xq, dtype=float).reshape(-1, self.n)])


# ---------------------------------------------------------------------------
# annihilator


@dataclass(frozen=True)
class Annihilator:
    Gperp: np.ndarray  # (n - m, n)


def left_annihilator(Gmat) -> Annihilator:
    """Canonical orthonormal basis of the left null space of a constant G.

    The basis is Gram-Schmidt applied, in row order, to the rows of the
    orthogonal projector onto the null space; it therefore depends only on
    the subspace, not on how an SVD happens to order or sign its vectors.
    Entries within 1e-12 of -1, 0 or 1 are then snapped if the snapped
    matrix still annihilates G exactly.
    """
    G = np.atleast_2d(np.asarray(Gmat, dtype=float))
    if G.shape[0] < G.shape[1]:
        G = G.T
    n, m = G.shape
    if np.linalg.matrix_rank(G) < m:
        raise NoAnnihilator(f"G has rank {np.linalg.matrix_rank(G)} < {m}; no annihilator of rank {n - m}")
    if m == n:
        return Annihilator(np.zeros((0, n)))
    N = linalg.null_space(G.T)  # (n, n - m), orthonormal columns
    P = N @ N.T
    rows: list[np.ndarray] = []
    for p in P:
        v = p.copy()
        for _ in range(2):  # a second pass restores orthogonality lost to cancellation
            for q in rows:
                v -= (v @ q) * q
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            rows.append(v / norm)
        if len(rows) == n - m:
            break
    # tiny pivots amplify rounding, so project back and re-orthonormalise
    Q, Rq = np.linalg.qr((np.array(rows) @ P).T)
    A = (Q * np.sign(np.diag(Rq))).T
    snapped = A.copy()
    for target in (-1.0, 0.0, 1.0):
        snapped[np.abs(A - target) <= 1e-12] = target
    if np.all(snapped @ G == 0.0) and np.linalg.matrix_rank(snapped) == n - m:
        A = snapped
    return Annihilator(A)


# ---------------------------------------------------------------------------
# design


@dataclass(frozen=True)
class DesiredDesign:
    """Constant Jd (skew), Rd (diagonal PSD) and the equilibrium-shift term.

    ``shift_index`` is the coordinate the term ``(x_k - c)^2`` acts on.
    """

    Jd: np.ndarray
    Rd: np.ndarray
    c: float
    x_d: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    shift_index: int = 2

    def __post_init__(self):
        for name in ("Jd", "Rd", "x_d", "box_lo", "box_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.max(np.abs(self.Jd + self.Jd.T), initial=0.0) > 1e-12:
            raise ContractViolation("Jd must be skew-symmetric")
        off = self.Rd - np.diag(np.diag(self.Rd))
        if np.any(off != 0) or np.any(np.diag(self.Rd) < 0):
            raise ContractViolation("Rd must be diagonal with non-negative entries")
        if self.x_d.size and not np.all((self.box_lo <= self.x_d) & (self.x_d <= self.box_hi)):
            raise ContractViolation(f"x_d={self.x_d} lies outside the design box")

    @property
    def JdRd(self) -> np.ndarray:
        return self.Jd - self.Rd

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": DESIGN_SCHEMA_VERSION,
                "Jd": self.Jd.tolist(),
                "Rd": self.Rd.tolist(),
                "c": self.c,
                "x_d": self.x_d.tolist(),
                "box_lo": self.box_lo.tolist(),
                "box_hi": self.box_hi.tolist(),
                "shift_index": self.shift_index,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "DesiredDesign":
        d = json.loads(text)
        if d.get("schema_version") != DESIGN_SCHEMA_VERSION:
            raise ContractViolation(f"unsupported design schema {d.get('schema_version')}")
        return cls(d["Jd"], d["Rd"], d["c"], d["x_d"], d["box_lo"], d["box_hi"], d["shift_index"])


def design_template(model, r_d: float = 2 / 3, shift_index: int = 2, box=(-2.0, 2.0)) -> DesiredDesign:
    """Non-parameterised IDA choice: copy the model's unactuated rows of J - R.

    The actuated row becomes ``-1/r_d`` on the diagonal. The returned design
    has ``c = nan`` and an empty ``x_d`` until :func:`solve_equilibrium_shift`
    fills them in.
    """
    n, k = model.n, shift_index
    T = np.array(model.JR(np.zeros(n)), dtype=float)
    # actuated row mirrors its column so that the off-diagonal part stays skew
    T[k, :] = -T[:, k]
    T[k, k] = -1.0 / r_d
    Jd = (T - T.T) / 2 + 0.0  # + 0.0 turns -0.0 into 0.0
    Rd = -(T + T.T) / 2 + 0.0
    lo, hi = _box(box, n)
    return DesiredDesign(Jd, Rd, math.nan, np.zeros(0), lo, hi, shift_index)


def _box(box, n):
    lo, hi = box
    return np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy(), np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()


def desired_hamiltonian(design: DesiredDesign, model, x) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=float)
    val, grad = desired_hamiltonian_batch(design, model, x[None])
    return float(val[0]), grad[0]


def desired_hamiltonian_batch(design: DesiredDesign, model, Xq) -> tuple[np.ndarray, np.ndarray]:
    Xq = np.asarray(Xq, dtype=float).reshape(-1, model.n)
    k = design.shift_index
    shift = Xq[:, k] - design.c
    value = model.hamiltonian_mean(Xq) + shift**2
    grad = np.array(model.hamiltonian_grad_mean(Xq), dtype=float)
    grad[:, k] += 2 * shift
    return value, grad


def _hessian_fd(gradf, x, h=1e-5) -> np.ndarray:
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (gradf(x + e) - gradf(x - e)) / (2 * h)
    return (H + H.T) / 2


def solve_equilibrium_shift(
    model,
    template: DesiredDesign,
    x1_target: float,
    fixed_index: int = 0,
    starts: Sequence[float] = (0.5, 1.0, 1.5, 2.0),
    tol: float = 1e-10,
    max_iter: int = 100,
) -> DesiredDesign:
    """Place a minimum of Hd at a state whose ``fixed_index`` entry is ``x1_target``.

    Stationarity in the shift coordinate fixes ``c = x_k + dmu_H/dx_k / 2``,
    leaving ``n - 1`` equations (every other gradient component) in the
    ``n - 1`` free coordinates. These are solved by damped Newton with a
    finite-difference Jacobian, from each start value of ``x_k`` in turn.
    The first start that lands on a minimum inside the box wins.
    """
    n, k = model.n, template.shift_index
    if fixed_index == k:
        raise ContractViolation("the fixed coordinate cannot be the shifted one")
    if not template.box_lo[fixed_index] <= x1_target <= template.box_hi[fixed_index]:
        raise ContractViolation("target outside the design box")
    free = [i for i in range(n) if i != fixed_index]
    eqs = [i for i in range(n) if i != k]

    def full(z):
        x = np.empty(n)
        x[fixed_index] = x1_target
        x[free] = z
        return x

    def F(z):
        return model.hamiltonian_grad_mean(full(z)[None])[0][eqs]

    attempts = []
    for s in starts:
        z = np.zeros(n - 1)
        z[free.index(k)] = s
        Fz = F(z)
        converged = False
        for _ in range(max_iter):
            if np.linalg.norm(Fz) < tol:
                converged = True
                break
            Jac = np.empty((n - 1, n - 1))
            for j in range(n - 1):
                e = np.zeros(n - 1)
                e[j] = 1e-6
                Jac[:, j] = (F(z + e) - F(z - e)) / 2e-6
            try:
                step = np.linalg.solve(Jac, -Fz)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            while t > 1e-6:
                trial = z + t * step
                Ft = F(trial)
                if np.linalg.norm(Ft) < (1 - 1e-4 * t) * np.linalg.norm(Fz):
                    break
                t /= 2
            else:
                break
            z, Fz = trial, Ft
        x = full(z)
        inside = bool(np.all((template.box_lo <= x) & (x <= template.box_hi)))
        attempts.append((s, converged, inside, x))
        if not (converged and inside):
            continue
        c = float(x[k] + model.hamiltonian_grad_mean(x[None])[0][k] / 2)
        design = DesiredDesign(template.Jd, template.Rd, c, x, template.box_lo, template.box_hi, k)
        hess = _hessian_fd(lambda y: desired_hamiltonian(design, model, y)[1], x)
        if np.min(np.linalg.eigvalsh(hess)) > 0:
            return design
        attempts[-1] = (s, converged, inside, x, "saddle")
    if any(len(a) == 5 for a in attempts):
        raise SaddleRejected(f"stationary points found but none is a minimum: {attempts}")
    raise DesignInfeasible(f"no stationary point of Hd inside the box: {attempts}")


# ---------------------------------------------------------------------------
# matching, robustness and control


def matching_residual(model, design: DesiredDesign, x, annihilator: Annihilator | None = None) -> np.ndarray:
    return matching_residual_batch(model, design, np.asarray(x, dtype=float)[None], annihilator)[0]


def matching_residual_batch(model, design, Xq, annihilator: Annihilator | None = None) -> np.ndarray:
    """``G_perp (mu(xdot | x, u=0) - (Jd - Rd) grad Hd)`` for each row of Xq."""
    Xq = np.asarray(Xq, dtype=float).reshape(-1, model.n)
    A = (annihilator or left_annihilator(model.G(np.zeros(model.n)))).Gperp
    _, grad = desired_hamiltonian_batch(design, model, Xq)
    mismatch = model.dynamics_mean(Xq) - grad @ design.JdRd.T
    return mismatch @ A.T


def robustness_margin(model, design: DesiredDesign, beta, x) -> float:
    return float(robustness_margin_batch(model, design, beta, np.asarray(x, dtype=float)[None])[0])


def robustness_margin_batch(model, design, beta, Xq) -> np.ndarray:
    """``gradHd^T Rd gradHd - sum_i beta_i var_i |dHd/dx_i|``.

    The subtracted term is the largest value of ``gradHd^T eta`` over the box
    ``|eta_i| <= beta_i var_i``, so a non-negative margin certifies the
    decrease inequality at x for every admissible perturbation.
    """
    Xq = np.asarray(Xq, dtype=float).reshape(-1, model.n)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (model.n,))
    if np.any(beta < 0):
        raise ContractViolation("beta must be non-negative")
    _, g = desired_hamiltonian_batch(design, model, Xq)
    var = model.dynamics_variance(Xq)
    dissipation = np.einsum("qi,ij,qj->q", g, design.Rd, g)
    return dissipation - np.sum(beta * var * np.abs(g), axis=1)


def control_input(model, design: DesiredDesign, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    G = model.G(x)
    GtG = G.T @ G
    if np.linalg.cond(GtG) > 1e12:
        raise RankLoss(f"G^T G is singular at x={x}")
    _, grad = desired_hamiltonian(design, model, x)
    mismatch = design.JdRd @ grad - model.dynamics_mean(x[None])[0]
    return np.linalg.solve(GtG, G.T @ mismatch)


class ClosedLoop:
    """Vector field ``f(t, x)`` of the plant under the robust control law."""

    def __init__(self, plant: PlantModel, model, design: DesiredDesign):
        if plant.n != model.n:
            raise ContractViolation("plant and model dimensions differ")
        self.plant = plant
        self.model = model
        self.design = design

    def control(self, x) -> np.ndarray:
        return control_input(self.model, self.design, x)

    def __call__(self, t, x) -> np.ndarray:
        return eval_dynamics(self.plant, x, self.control(x))


def closed_loop(plant: PlantModel, model, design: DesiredDesign) -> ClosedLoop:
    return ClosedLoop(plant, model, design)


def desired_field(model, design: DesiredDesign):
    """The target dynamics ``xdot = (Jd - Rd) grad Hd`` as ``f(t, x)``."""

    def f(t, x):
        return design.JdRd @ desired_hamiltonian(design, model, x)[1]

    return f


# ---------------------------------------------------------------------------
# certification


@dataclass
class Certificate:
    grid: tuple[int, ...]
    box_lo: np.ndarray
    box_hi: np.ndarray
    beta: np.ndarray
    tol_match: float
    max_matching_residual: float
    min_robustness_margin: float
    worst_residual_point: np.ndarray
    worst_margin_point: np.ndarray
    negative_margin_nodes: int
    dissipation_zero_nodes: int
    model_digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_matching_residual <= self.tol_match and self.min_robustness_margin >= 0

    def to_dict(self) -> dict:
        return {
            "schema_version": CERTIFICATE_SCHEMA_VERSION,
            "grid": list(self.grid),
            "box_lo": self.box_lo.tolist(),
            "box_hi": self.box_hi.tolist(),
            "beta": self.beta.tolist(),
            "tol_match": self.tol_match,
            "max_matching_residual": self.max_matching_residual,
            "min_robustness_margin": self.min_robustness_margin,
            "worst_residual_point": self.worst_residual_point.tolist(),
            "worst_margin_point": self.worst_margin_point.tolist(),
            "negative_margin_nodes": self.negative_margin_nodes,
            "dissipation_zero_nodes": self.dissipation_zero_nodes,
            "passed": self.passed,
            "model_digest": self.model_digest,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def grid_nodes(box_lo, box_hi, counts) -> np.ndarray:
    """Lexicographically ordered nodes of a tensor grid (last axis fastest)."""
    axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(box_lo, box_hi, counts)]
    return np.array(list(itertools.product(*axes)))


def certify(
    model,
    design: DesiredDesign,
    beta,
    grid: Sequence[int] = (21, 21, 21),
    tol_match: float = 1e-6,
    chunk: int = 2048,
) -> Certificate:
    """Evaluate the matching residual and robustness margin on every grid node.

    Ties between witnesses go to the earliest node in lexicographic order.
    """
    grid = tuple(int(g) for g in np.broadcast_to(np.asarray(grid), (model.n,)))
    if min(grid) < 2:
        raise ContractViolation("need at least 2 grid points per axis")
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (model.n,)).copy()
    nodes = grid_nodes(design.box_lo, design.box_hi, grid)
    A = left_annihilator(model.G(np.zeros(model.n)))
    res = np.empty(len(nodes))
    margin = np.empty(len(nodes))
    dissipation = np.empty(len(nodes))
    for s in range(0, len(nodes), chunk):
        blk = nodes[s : s + chunk]
        r = matching_residual_batch(model, design, blk, A)
        res[s : s + chunk] = np.max(np.abs(r), axis=1) if r.shape[1] else 0.0
        margin[s : s + chunk] = robustness_margin_batch(model, design, beta, blk)
        _, g = desired_hamiltonian_batch(design, model, blk)
        dissipation[s : s + chunk] = np.einsum("qi,ij,qj->q", g, design.Rd, g)
    i_res = int(np.argmax(res))
    i_mar = int(np.argmin(margin))
    digest = model.gram_digest() if hasattr(model, "gram_digest") else ""
    return Certificate(
        grid=grid,
        box_lo=design.box_lo,
        box_hi=design.box_hi,
        beta=beta,
        tol_match=tol_match,
        max_matching_residual=float(res[i_res]),
        min_robustness_margin=float(margin[i_mar]),
        worst_residual_point=nodes[i_res],
        worst_margin_point=nodes[i_mar],
        negative_margin_nodes=int(np.sum(margin < 0)),
        dissipation_zero_nodes=int(np.sum(dissipation <= 1e-12)),
        model_digest=digest,
    )
