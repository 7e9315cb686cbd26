"""Gaussian-process model of PHS dynamics with a structured kernel.

The Hamiltonian gets a prior ``H ~ GP(0, sigma_f^2 exp(-|x - x'|^2_Lam))`` with
``Lam = diag(l_1^2, ..., l_n^2)``. Pushing it through the linear operator
``x -> (J(x) - R(x)) grad`` gives a vector-valued GP over drift fields with the
covariance block

    k_phs(x, x') = sigma_f^2 JR(x) Pi(x, x') JR(x')^T,

where ``Pi`` is the mixed second derivative of the SE kernel. Unknown
physical parameters in J, R and G are hyperparameters, learned jointly with
the kernel and noise by minimising the negative log marginal likelihood.

Arrays of points are stored row-wise, shape ``(N, n)``. Stacked output
vectors are point-major: all n components of point 1, then point 2, ...
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numba
import numpy as np
from scipy import linalg, optimize, signal

from .phs import ContractViolation, Trajectory, read_csv, write_csv

MODEL_SCHEMA_VERSION = 1
JITTER_START = 1e-8
JITTER_MAX = 1e-4


class UnsupportedGrid(ValueError):
    pass


class IndefiniteGram(np.linalg.LinAlgError):
    pass


class TrainingFailed(RuntimeError):
    def __init__(self, message: str, diagnostics: list):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# data


TrajectoryDataset = Trajectory


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a if a.ndim == 2 else a.reshape(len(a), -1)


@dataclass
class RegressionDataset:
    """Filtered states, derivative estimates and inputs, one row per sample."""

    X: np.ndarray  # (N, n)
    Xdot: np.ndarray  # (N, n)
    U: np.ndarray  # (N, m)
    t: np.ndarray | None = None

    def __post_init__(self):
        self.X = _rows(self.X)
        self.Xdot = _rows(self.Xdot)
        self.U = _rows(self.U)
        if self.Xdot.shape != self.X.shape:
            raise ContractViolation("Xdot must have the same shape as X")
        if self.t is None:
            self.t = np.arange(len(self.X), dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if not (len(self.X) == len(self.Xdot) == len(self.U) == len(self.t)):
            raise ContractViolation("regression dataset columns differ in length")
        for name in ("X", "Xdot", "U"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractViolation(f"non-finite entries in {name}")

    def __len__(self):
        return len(self.X)

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def to_csv(self, path, comment: str | None = None) -> None:
        n, m = self.n, self.U.shape[1]
        header = (
            ["t"]
            + [f"x{i + 1}" for i in range(n)]
            + [f"xdot{i + 1}" for i in range(n)]
            + [f"u{i + 1}" for i in range(m)]
        )
        write_csv(path, header, np.column_stack([self.t, self.X, self.Xdot, self.U]), comment)

    @classmethod
    def from_csv(cls, path) -> "RegressionDataset":
        header, data = read_csv(path)
        n = sum(1 for h in header if h.startswith("xdot"))
        return cls(data[:, 1 : 1 + n], data[:, 1 + n : 1 + 2 * n], data[:, 1 + 2 * n :], data[:, 0])


def estimate_derivatives(data: Trajectory, window: int = 9, poly_order: int = 3) -> RegressionDataset:
    """Savitzky-Golay smoothing and differentiation on a uniform time grid.

    Samples within ``window // 2`` of either end are dropped, so every
    retained sample is the centre of a full window.
    """
    if window % 2 != 1 or window < poly_order + 2:
        raise ContractViolation("window must be odd and at least poly_order + 2")
    t = data.times
    if len(t) <= window:
        raise ContractViolation(f"need more than {window} samples, got {len(t)}")
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if np.max(np.abs(steps - dt)) > 1e-9 * dt:
        raise UnsupportedGrid("time samples are not uniformly spaced")

    smooth = signal.savgol_coeffs(window, poly_order, deriv=0, use="dot")
    slope = signal.savgol_coeffs(window, poly_order, deriv=1, delta=dt, use="dot")
    windows = np.lib.stride_tricks.sliding_window_view(data.states, window, axis=0)  # (K, n, window)
    half = window // 2
    keep = slice(half, len(t) - half)
    return RegressionDataset(
        X=windows @ smooth,
        Xdot=windows @ slope,
        U=data.inputs[keep],
        t=t[keep],
    )


# ---------------------------------------------------------------------------
# structure and hyperparameters


@dataclass(frozen=True)
class PhsStructure:
    """Parametric form of J, R and G with physical parameters looked up by name.

    ``matrices(x, phys)`` returns ``(J, R, G)``. Positivity of every physical
    parameter is enforced by optimising in log space, so a structure only has
    to be skew/PSD for positive parameter values.
    """

    name: str
    n: int
    m: int
    matrices: Callable[[np.ndarray, Mapping[str, float]], tuple]
    param_names: tuple[str, ...]
    state_dependent: bool = False

    def JR(self, x, phys) -> np.ndarray:
        J, R, _ = self.matrices(np.asarray(x, dtype=float), phys)
        return J - R

    def G(self, x, phys) -> np.ndarray:
        return self.matrices(np.asarray(x, dtype=float), phys)[2]

    def JR_batch(self, X: np.ndarray, phys) -> np.ndarray:
        if not self.state_dependent:
            return np.broadcast_to(self.JR(np.zeros(self.n), phys), (len(X), self.n, self.n))
        return np.stack([self.JR(x, phys) for x in X]) if len(X) else np.zeros((0, self.n, self.n))

    def G_batch(self, X: np.ndarray, phys) -> np.ndarray:
        if not self.state_dependent:
            return np.broadcast_to(self.G(np.zeros(self.n), phys), (len(X), self.n, self.m))
        return np.stack([self.G(x, phys) for x in X]) if len(X) else np.zeros((0, self.n, self.m))


def _microactuator_matrices(x, phys):
    b, r = phys["b"], phys["r"]
    J = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    R = np.diag([0.0, b, 1.0 / r])
    G = np.array([[0.0], [0.0], [1.0 / r]])
    return J, R, G


def _scalar_matrices(x, phys):
    return np.zeros((1, 1)), np.array([[phys["r"]]]), np.array([[phys["g"]]])


STRUCTURES = {
    "microactuator": PhsStructure("microactuator", 3, 1, _microactuator_matrices, ("b", "r")),
    # xdot = -r dH/dx + g u; handy for small checks
    "scalar": PhsStructure("scalar", 1, 1, _scalar_matrices, ("r", "g")),
}


@dataclass(frozen=True)
class Hyperparameters:
    sigma_f: float
    lengthscales: tuple[float, ...]  # l_i; the SE metric is Lam = diag(l_i^2)
    phys: Mapping[str, float]
    noise: tuple[float, ...]  # per-dimension derivative-noise variances

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in self.lengthscales))
        object.__setattr__(self, "noise", tuple(float(v) for v in self.noise))
        object.__setattr__(self, "phys", {k: float(v) for k, v in dict(self.phys).items()})
        if not self.sigma_f > 0 or min(self.lengthscales) <= 0 or min(self.noise) < 0:
            raise ContractViolation(f"invalid hyperparameters: {self}")

    @property
    def lam(self) -> np.ndarray:
        return np.asarray(self.lengthscales) ** 2

    def to_dict(self) -> dict:
        return {
            "sigma_f": self.sigma_f,
            "lengthscales": list(self.lengthscales),
            "phys": dict(self.phys),
            "noise": list(self.noise),
        }

    @classmethod
    def from_dict(cls, d) -> "Hyperparameters":
        return cls(d["sigma_f"], d["lengthscales"], d["phys"], d["noise"])


@dataclass(frozen=True)
class _Packing:
    """Maps Hyperparameters to/from the unconstrained log-space vector."""

    template: Hyperparameters
    trainable: tuple[str, ...]
    learn_noise: bool

    def pack(self, h: Hyperparameters) -> np.ndarray:
        parts = [[h.sigma_f], h.lengthscales, [h.phys[k] for k in self.trainable]]
        if self.learn_noise:
            parts.append(h.noise)
        return np.log(np.concatenate([np.asarray(p, dtype=float) for p in parts]))

    def unpack(self, theta: np.ndarray) -> Hyperparameters:
        v = np.exp(np.clip(theta, -30.0, 30.0))
        n = len(self.template.lengthscales)
        k = len(self.trainable)
        phys = dict(self.template.phys)
        phys.update(zip(self.trainable, v[1 + n : 1 + n + k]))
        noise = v[1 + n + k :] if self.learn_noise else self.template.noise
        return Hyperparameters(v[0], v[1 : 1 + n], phys, noise)


# ---------------------------------------------------------------------------
# kernel


def se_hessian(x, x2, lam) -> np.ndarray:
    """Mixed second derivative d^2/dx_i dx'_j of exp(-(x-x')^T Lam (x-x')).

    ``lam`` is the diagonal of Lam (squared lengthscales).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    return _pi_blocks(x[None], x2[None], np.atleast_1d(np.asarray(lam, dtype=float)))[0, 0]


def _pi_blocks(XA: np.ndarray, XB: np.ndarray, lam: np.ndarray) -> np.ndarray:
    d = XA[:, None, :] - XB[None, :, :]  # (NA, NB, n)
    ld = d * lam
    e = np.exp(-np.sum(d * ld, axis=-1))[..., None, None]
    return (np.diag(2 * lam) - 4 * ld[..., :, None] * ld[..., None, :]) * e


def _se_grad_second(XA: np.ndarray, XB: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Gradient of the SE kernel w.r.t. its second argument, shape (NA, NB, n)."""
    d = XA[:, None, :] - XB[None, :, :]
    ld = d * lam
    return 2 * ld * np.exp(-np.sum(d * ld, axis=-1))[..., None]


def phs_kernel_block(x, x2, hyper: Hyperparameters, structure: PhsStructure) -> np.ndarray:
    """Prior covariance Cov(xdot(x), xdot(x')) as an n x n block."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return (
        hyper.sigma_f**2
        * structure.JR(x, hyper.phys)
        @ se_hessian(x, x2, hyper.lam)
        @ structure.JR(x2, hyper.phys).T
    )


class PairDiffs:
    """Pairwise differences between two point sets, reused across hyperparameters."""

    def __init__(self, XA: np.ndarray, XB: np.ndarray):
        self.XA = XA
        self.XB = XB
        self.d = np.ascontiguousarray(XA[:, None, :] - XB[None, :, :])  # (NA, NB, n)


@numba.njit(cache=True)
def _assemble(d, JA, JB, lam, s2):
    NA, NB, n = d.shape
    out = np.empty((NA * n, NB * n))
    va = np.empty(n)
    vb = np.empty(n)
    for a in range(NA):
        for b in range(NB):
            q = 0.0
            for k in range(n):
                q += lam[k] * d[a, b, k] * d[a, b, k]
            e = s2 * np.exp(-q)
            for i in range(n):
                acc_a = 0.0
                acc_b = 0.0
                for k in range(n):
                    acc_a += JA[a, i, k] * lam[k] * d[a, b, k]
                    acc_b += JB[b, i, k] * lam[k] * d[a, b, k]
                va[i] = acc_a
                vb[i] = acc_b
            for i in range(n):
                for j in range(n):
                    c = 0.0
                    for k in range(n):
                        c += JA[a, i, k] * 2.0 * lam[k] * JB[b, j, k]
                    out[a * n + i, b * n + j] = e * (c - 4.0 * va[i] * vb[j])
    return out


def kernel_matrix(XA, XB, hyper: Hyperparameters, structure: PhsStructure, pairs: PairDiffs | None = None) -> np.ndarray:
    """Noise-free cross covariance between stacked drifts at XA and XB.

    Uses ``JR_a Pi JR_b^T = e (JR_a 2Lam JR_b^T - 4 (JR_a Lam d)(JR_b Lam d)^T)``
    with ``d = x_a - x_b`` and ``e`` the SE kernel value.
    """
    n = structure.n
    if pairs is None:
        XA = np.asarray(XA, dtype=float).reshape(-1, n)
        XB = np.asarray(XB, dtype=float).reshape(-1, n)
        pairs = PairDiffs(XA, XB)
    JA = np.ascontiguousarray(structure.JR_batch(pairs.XA, hyper.phys))
    JB = np.ascontiguousarray(structure.JR_batch(pairs.XB, hyper.phys))
    return _assemble(pairs.d, JA, JB, hyper.lam, hyper.sigma_f**2)


@dataclass
class GramFactor:
    K: np.ndarray  # regularised Gram matrix (noise + jitter on the diagonal)
    chol: np.ndarray  # lower triangular, chol @ chol.T == K
    jitter: float


def factorize_gram(X, hyper: Hyperparameters, structure: PhsStructure, pairs: PairDiffs | None = None) -> GramFactor:
    """Assemble the regularised Gram matrix and its Cholesky factor.

    Jitter starts at ``1e-8 sigma_f^2`` and grows tenfold up to
    ``1e-4 sigma_f^2``; past that the matrix is declared indefinite.
    """
    X = np.asarray(X, dtype=float).reshape(-1, structure.n)
    K0 = kernel_matrix(X, X, hyper, structure, pairs)
    K0 = (K0 + K0.T) / 2
    noise = np.tile(np.asarray(hyper.noise), len(X))
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        jitter = rel * hyper.sigma_f**2
        K = K0 + np.diag(noise + jitter)
        try:
            L = linalg.cholesky(K, lower=True, check_finite=False)
        except linalg.LinAlgError:
            rel *= 10
            continue
        if np.all(np.isfinite(L)):
            return GramFactor(K, L, jitter)
        rel *= 10
    raise IndefiniteGram(f"Gram matrix not positive definite with jitter up to {JITTER_MAX:g}*sigma_f^2")


def gram_matrix(X, hyper: Hyperparameters, structure: PhsStructure) -> np.ndarray:
    return factorize_gram(X, hyper, structure).K


def mean_adjusted_outputs(reg: RegressionDataset, hyper: Hyperparameters, structure: PhsStructure) -> np.ndarray:
    """Stack ``xdot_i - G(x_i) u_i`` point-major into one vector of length nN."""
    G = structure.G_batch(reg.X, hyper.phys)
    return (reg.Xdot - (G @ reg.U[..., None])[..., 0]).reshape(-1)


def nlml(hyper: Hyperparameters, reg: RegressionDataset, structure: PhsStructure) -> float:
    """Negative log marginal likelihood including the 1/2 and 2*pi constants."""
    y = mean_adjusted_outputs(reg, hyper, structure)
    L = factorize_gram(reg.X, hyper, structure).chol
    return _nlml_from_factor(L, y)


def _nlml_from_factor(L: np.ndarray, y: np.ndarray) -> float:
    z = linalg.solve_triangular(L, y, lower=True, check_finite=False)
    return float(0.5 * z @ z + np.sum(np.log(np.diag(L))) + 0.5 * y.size * math.log(2 * math.pi))


# ---------------------------------------------------------------------------
# trained model


@dataclass(frozen=True)
class GpPhsModel:
    """Trained GP-PHS posterior; immutable and safe to query concurrently."""

    structure: PhsStructure
    hyper: Hyperparameters
    X: np.ndarray  # (N, n) training states
    alpha: np.ndarray  # (nN,) K^{-1} Xdot_0
    chol: np.ndarray  # (nN, nN)
    jitter: float = 0.0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        JRt = self.structure.JR_batch(self.X, self.hyper.phys)
        # w_i = JR(x_i)^T alpha_i, shared by the Hamiltonian and dynamics means
        w = (JRt.transpose(0, 2, 1) @ self.alpha.reshape(-1, self.structure.n, 1))[..., 0]
        object.__setattr__(self, "_w", w)

    @property
    def n(self) -> int:
        return self.structure.n

    @property
    def N(self) -> int:
        return len(self.X)

    def G(self, x) -> np.ndarray:
        return self.structure.G(x, self.hyper.phys)

    def JR(self, x) -> np.ndarray:
        return self.structure.JR(x, self.hyper.phys)

    # -- dynamics -----------------------------------------------------------

    def dynamics_mean(self, Xq, U=None) -> np.ndarray:
        """Posterior mean of xdot at rows of Xq; ``U=None`` means zero input."""
        Xq = np.asarray(Xq, dtype=float).reshape(-1, self.n)
        if self.N:
            mean = (kernel_matrix(Xq, self.X, self.hyper, self.structure) @ self.alpha).reshape(-1, self.n)
        else:
            mean = np.zeros_like(Xq)
        if U is not None:
            U = np.asarray(U, dtype=float).reshape(len(Xq), self.structure.m)
            mean = mean + (self.structure.G_batch(Xq, self.hyper.phys) @ U[..., None])[..., 0]
        return mean

    def dynamics_variance(self, Xq, chunk: int = 512) -> np.ndarray:
        """Posterior marginal variances of xdot, clamped at zero, shape (Q, n)."""
        Xq = np.asarray(Xq, dtype=float).reshape(-1, self.n)
        n = self.n
        JRq = self.structure.JR_batch(Xq, self.hyper.phys)
        # prior diagonal: sigma_f^2 JR (2 Lam) JR^T
        prior = self.hyper.sigma_f**2 * np.einsum("qij,j,qij->qi", JRq, 2 * self.hyper.lam, JRq)
        if not self.N:
            return np.maximum(prior, 0.0)
        out = np.empty_like(prior)
        for s in range(0, len(Xq), chunk):
            blk = Xq[s : s + chunk]
            k = kernel_matrix(blk, self.X, self.hyper, self.structure)  # (q n, nN)
            v = linalg.solve_triangular(self.chol, k.T, lower=True, check_finite=False)
            out[s : s + chunk] = prior[s : s + chunk] - np.sum(v * v, axis=0).reshape(-1, n)
        return np.maximum(out, 0.0)

    # -- Hamiltonian --------------------------------------------------------

    def hamiltonian_mean(self, Xq) -> np.ndarray:
        Xq = np.asarray(Xq, dtype=float).reshape(-1, self.n)
        if not self.N:
            return np.zeros(len(Xq))
        D = _se_grad_second(Xq, self.X, self.hyper.lam)  # (Q, N, n)
        return self.hyper.sigma_f**2 * np.einsum("qni,ni->q", D, self._w)

    def hamiltonian_grad_mean(self, Xq) -> np.ndarray:
        Xq = np.asarray(Xq, dtype=float).reshape(-1, self.n)
        if not self.N:
            return np.zeros_like(Xq)
        lam = self.hyper.lam
        d = Xq[:, None, :] - self.X[None, :, :]
        ld = d * lam
        e = np.exp(-np.sum(d * ld, axis=-1))  # (Q, N)
        # Pi(x, x_i) w_i = e (2 Lam w_i - 4 Lam d (Lam d . w_i))
        proj = np.sum(ld * self._w[None], axis=-1)  # (Q, N)
        g = 2 * lam * (e @ self._w) - 4 * np.einsum("qn,qni->qi", e * proj, ld)
        return self.hyper.sigma_f**2 * g

    # -- serialisation ------------------------------------------------------

    def gram_digest(self) -> str:
        return _digest(self.chol @ self.chol.T)

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": MODEL_SCHEMA_VERSION,
                "structure": self.structure.name,
                "hyperparameters": self.hyper.to_dict(),
                "X": self.X.tolist(),
                "alpha": self.alpha.tolist(),
                "jitter": self.jitter,
                "gram_digest": _digest(self._regularized_gram()),
                "info": {k: v for k, v in self.info.items() if k != "trace"},
            },
            indent=1,
        )

    def _regularized_gram(self) -> np.ndarray:
        K0 = kernel_matrix(self.X, self.X, self.hyper, self.structure)
        return (K0 + K0.T) / 2 + np.diag(np.tile(np.asarray(self.hyper.noise), self.N) + self.jitter)

    @classmethod
    def from_json(cls, text: str, structures: Mapping[str, PhsStructure] = STRUCTURES) -> "GpPhsModel":
        d = json.loads(text)
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ContractViolation(f"unsupported model schema {d.get('schema_version')}")
        structure = structures[d["structure"]]
        hyper = Hyperparameters.from_dict(d["hyperparameters"])
        X = np.asarray(d["X"], dtype=float).reshape(-1, structure.n)
        alpha = np.asarray(d["alpha"], dtype=float)
        jitter = float(d["jitter"])
        model = cls(structure, hyper, X, alpha, np.zeros((0, 0)), jitter, d.get("info", {}))
        K = model._regularized_gram()
        if _digest(K) != d["gram_digest"]:
            raise ContractViolation("Gram digest mismatch: model file does not match its hyperparameters")
        L = linalg.cholesky(K, lower=True) if len(K) else np.zeros((0, 0))
        return cls(structure, hyper, X, alpha, L, jitter, d.get("info", {}))


def _digest(K: np.ndarray) -> str:
    scale = max(1.0, float(np.max(np.abs(K)))) if K.size else 1.0
    q = np.round(K / scale, 10) + 0.0  # +0.0 folds -0.0 into 0.0
    return hashlib.sha256(q.tobytes()).hexdigest()


def fit(reg: RegressionDataset, hyper: Hyperparameters, structure: PhsStructure, info=None) -> GpPhsModel:
    """Condition the GP on data at fixed hyperparameters."""
    if len(reg) == 0:
        return GpPhsModel(structure, hyper, np.zeros((0, structure.n)), np.zeros(0), np.zeros((0, 0)), 0.0, info or {})
    f = factorize_gram(reg.X, hyper, structure)
    y = mean_adjusted_outputs(reg, hyper, structure)
    alpha = linalg.cho_solve((f.chol, True), y, check_finite=False)
    return GpPhsModel(structure, hyper, reg.X.copy(), alpha, f.chol, f.jitter, info or {})


def posterior_dynamics(model: GpPhsModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    mean = model.dynamics_mean(x[None], np.atleast_1d(u)[None])[0]
    return mean, model.dynamics_variance(x[None])[0]


def posterior_hamiltonian(model: GpPhsModel, x) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=float)[None]
    return float(model.hamiltonian_mean(x)[0]), model.hamiltonian_grad_mean(x)[0]


# ---------------------------------------------------------------------------
# training


def train(
    reg: RegressionDataset,
    init: Hyperparameters,
    structure: PhsStructure,
    restarts: int = 8,
    max_iters: int = 2000,
    seed: int = 0,
    trainable: Sequence[str] | None = None,
    learn_noise: bool = True,
    spread: float = 1.0,
    xatol: float = 1e-4,
    fatol: float = 1e-4,
    simplex_step: float = 0.5,
    screen_size: int | None = None,
) -> GpPhsModel:
    """Multi-start Nelder-Mead on the log-space hyperparameters.

    Start 0 is ``init`` itself; the others perturb it with seeded Gaussian
    noise of scale ``spread`` (log units). Starts run in order and the best
    final value wins, ties going to the lower start index.

    With ``screen_size`` set and more samples than that, the starts run on
    an evenly strided subset and only the winner is polished on the full
    data, starting from a smaller simplex.
    """
    if restarts < 1:
        raise ContractViolation("restarts must be >= 1")
    if screen_size is not None and screen_size < 1:
        raise ContractViolation("screen_size must be positive")
    trainable = tuple(structure.param_names if trainable is None else trainable)
    packing = _Packing(init, trainable, learn_noise)
    theta0 = packing.pack(init)
    rng = np.random.default_rng(seed)
    starts = [theta0] + [theta0 + spread * rng.standard_normal(theta0.size) for _ in range(restarts - 1)]
    opts = {"max_iters": max_iters, "xatol": xatol, "fatol": fatol}

    screened = screen_size is not None and len(reg) > screen_size
    if screened:
        stride = -(-len(reg) // screen_size)
        sub = RegressionDataset(reg.X[::stride], reg.Xdot[::stride], reg.U[::stride])
        results, diagnostics = _run_starts(sub, structure, packing, starts, simplex_step, **opts)
        _, best_i, theta_sub, _ = min(results, key=lambda r: (r[0], r[1]))
        polish, polish_diag = _run_starts(reg, structure, packing, [theta_sub], simplex_step / 5, **opts)
        best_val, _, best_theta, best_trace = polish[0]
        diagnostics.append({**polish_diag[0], "start": "polish"})
    else:
        results, diagnostics = _run_starts(reg, structure, packing, starts, simplex_step, **opts)
        best_val, best_i, best_theta, best_trace = min(results, key=lambda r: (r[0], r[1]))
    hyper = packing.unpack(best_theta)
    info = {
        "nlml": best_val,
        "nlml_init": _objective(reg, structure, packing)(theta0, []),
        "best_start": best_i,
        "screened_on": len(sub) if screened else None,
        "starts": diagnostics,
        "trace": best_trace,
    }
    return fit(reg, hyper, structure, info)


def _objective(reg: RegressionDataset, structure: PhsStructure, packing: "_Packing"):
    y_cache = {}
    pairs = PairDiffs(reg.X, reg.X)

    def objective(theta, trace):
        h = packing.unpack(theta)
        try:
            L = factorize_gram(reg.X, h, structure, pairs).chol
        except IndefiniteGram:
            val = math.inf
        else:
            key = tuple(h.phys[k] for k in structure.param_names)
            if key not in y_cache:
                y_cache.clear()
                y_cache[key] = mean_adjusted_outputs(reg, h, structure)
            val = float(_nlml_from_factor(L, y_cache[key]))
        trace.append(min(trace[-1], val) if trace else val)
        return val if math.isfinite(val) else 1e300

    return objective


def _run_starts(reg, structure, packing, starts, simplex_step, max_iters, xatol, fatol):
    objective = _objective(reg, structure, packing)
    results, diagnostics = [], []
    for i, start in enumerate(starts):
        trace: list[float] = []
        # scipy's default simplex is 5% of each coordinate, degenerate at log(1) = 0
        simplex = np.vstack([start, start + simplex_step * np.eye(start.size)])
        res = optimize.minimize(
            objective,
            start,
            args=(trace,),
            method="Nelder-Mead",
            options={
                "maxiter": max_iters,
                "maxfev": 2 * max_iters,
                "xatol": xatol,
                "fatol": fatol,
                "adaptive": True,
                "initial_simplex": simplex,
            },
        )
        ok = bool(trace) and math.isfinite(trace[-1])
        diagnostics.append({"start": i, "nlml": float(res.fun), "nfev": int(res.nfev), "ok": ok, "message": res.message})
        if ok and res.fun < 1e299:
            results.append((float(res.fun), i, res.x, trace))
    if not results:
        raise TrainingFailed("every start failed to factorise the Gram matrix", diagnostics)
    return results, diagnostics
