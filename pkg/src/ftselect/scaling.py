"""Scaling-law models for fine-tuning loss curves and their fitting.

The central model is the rectified law

    L(D) = B / (F + D**beta) + E

where the offset ``F`` is either a kernel-derived test loss ``F(Theta, t)``
(``KernelF``) or a fitted surrogate constant ``F0 * exp(-kappa * t)``
(``SurrogateF``). Fits minimise a penalty on log-space residuals computed
through ``logaddexp`` so that ``B``, ``F`` and ``D**beta`` never overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .errors import InsufficientDataError, ValidationError
from .ntk import KernelMatrix


# --------------------------------------------------------------------------- closed-form laws


@dataclass(frozen=True)
class PowerLawParams:
    A: float
    B: float
    alpha: float
    alpha_N: float
    beta: float


def _check_positive(name, v):
    if np.any(np.asarray(v, dtype=np.float64) <= 0):
        raise ValueError(f"{name} must be positive")


def predict_power_law(p: PowerLawParams, N, D):
    """``(A / N**alpha_N + B / D**beta) ** alpha``."""
    _check_positive("N", N)
    _check_positive("D", D)
    N, D = np.asarray(N, dtype=np.float64), np.asarray(D, dtype=np.float64)
    out = (p.A / N**p.alpha_N + p.B / D**p.beta) ** p.alpha
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class FixedModelLawParams:
    B: float
    E: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.B < 0 or self.E < 0 or not self.alpha > 0 or not self.beta > 0:
            raise ValueError("need B >= 0, E >= 0, alpha > 0, beta > 0")


def predict_fixed_law(p: FixedModelLawParams, D):
    """``(B / D**beta + E) ** alpha``."""
    _check_positive("D", D)
    D = np.asarray(D, dtype=np.float64)
    out = (p.B / D**p.beta + p.E) ** p.alpha
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- rectified law


@dataclass(frozen=True)
class SurrogateF:
    """One-exponential stand-in for the kernel test loss: ``F0 * exp(-kappa * t)``."""

    F0: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if self.F0 < 0 or self.kappa < 0:
            raise ValueError("F0 and kappa must be nonnegative")

    def value(self, t):
        return self.F0 * np.exp(-self.kappa * np.asarray(t, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class KernelF:
    """``F(Theta, t) = ||exp(-eta Theta t) r0||^2`` for a fixed kernel and residual."""

    kernel: KernelMatrix
    residual: np.ndarray
    eta: float

    def __post_init__(self):
        r = np.asarray(self.residual, dtype=np.float64)
        # validates length and caches the spectral weights
        object.__setattr__(self, "residual", r)
        object.__setattr__(self, "_weights", self.kernel.spectral_weights(r))

    def value(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0):
            raise ValueError("t must be nonnegative")
        out = np.exp(-2.0 * self.eta * np.multiply.outer(t, self.kernel.eigenvalues)) @ self._weights
        return out

    @property
    def initial(self) -> float:
        return float(self.value(0.0))


@dataclass(frozen=True)
class RectifiedParams:
    B: float
    E: float
    beta: float
    t: float = 0.0
    f_mode: SurrogateF | KernelF = field(default_factory=SurrogateF)

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError("B must be positive")
        if self.E < 0:
            raise ValueError("E must be nonnegative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.t < 0:
            raise ValueError("t must be nonnegative")

    @property
    def F(self) -> float:
        return float(self.f_mode.value(self.t))

    def with_surrogate(self, F: float) -> "RectifiedParams":
        return replace(self, t=0.0, f_mode=SurrogateF(F, 0.0))


def _log_pred(logB, E, beta, logF, logD):
    """log of ``B / (F + D**beta) + E`` computed through log-sum-exp."""
    a = logB - np.logaddexp(logF, beta * logD)
    with np.errstate(divide="ignore"):
        logE = np.log(E)
    return np.logaddexp(a, logE)


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def predict_rectified(p: RectifiedParams, D):
    _check_positive("D", D)
    D = np.asarray(D, dtype=np.float64)
    F = p.F
    denom = F + D**p.beta
    if np.any(denom <= 0):
        raise ZeroDivisionError("F + D**beta must be positive")
    out = p.B / denom + p.E
    return float(out) if out.ndim == 0 else out


def log_predict_rectified(p: RectifiedParams, D):
    """``log L(D)`` evaluated through the LSE form used by the fitting objective."""
    D = np.asarray(D, dtype=np.float64)
    out = _log_pred(math.log(p.B), p.E, p.beta, _safe_log(p.F), np.log(D))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- curves


@dataclass(frozen=True)
class LossObservation:
    dataset_size: int
    test_loss: float
    steps: int | None = None

    def __post_init__(self):
        if int(self.dataset_size) != self.dataset_size or self.dataset_size < 1:
            raise ValidationError(f"dataset_size must be a positive integer, got {self.dataset_size}")
        if not (self.test_loss > 0 and math.isfinite(self.test_loss)):
            raise ValidationError(f"test_loss must be positive and finite, got {self.test_loss}")
        if self.steps is not None and self.steps < 1:
            raise ValidationError("steps must be positive when given")
        object.__setattr__(self, "dataset_size", int(self.dataset_size))
        object.__setattr__(self, "test_loss", float(self.test_loss))


@dataclass(frozen=True)
class LossCurve:
    model_id: str
    observations: tuple[LossObservation, ...]
    seed: int | None = None

    def __post_init__(self):
        obs = tuple(sorted(self.observations, key=lambda o: o.dataset_size))
        sizes = [o.dataset_size for o in obs]
        if len(set(sizes)) != len(sizes):
            raise ValidationError(f"curve {self.model_id!r} has duplicate dataset sizes")
        object.__setattr__(self, "observations", obs)

    @classmethod
    def from_arrays(cls, model_id: str, sizes, losses, steps=None, seed: int | None = None) -> "LossCurve":
        steps = [None] * len(sizes) if steps is None else steps
        return cls(
            model_id,
            tuple(LossObservation(int(s), float(l), st) for s, l, st in zip(sizes, losses, steps)),
            seed,
        )

    @property
    def sizes(self) -> np.ndarray:
        return np.array([o.dataset_size for o in self.observations], dtype=np.float64)

    @property
    def losses(self) -> np.ndarray:
        return np.array([o.test_loss for o in self.observations], dtype=np.float64)

    def __len__(self):
        return len(self.observations)

    def subset(self, mask) -> "LossCurve":
        return LossCurve(self.model_id, tuple(o for o, m in zip(self.observations, mask) if m), self.seed)


# --------------------------------------------------------------------------- objective


class Penalty(str, Enum):
    SQUARED = "squared"
    HUBER = "huber"


def _rho(r, penalty: Penalty, delta: float):
    r = np.asarray(r)
    if penalty is Penalty.SQUARED:
        return r**2
    a = np.abs(r)
    return np.where(a <= delta, r**2, 2.0 * delta * a - delta**2)


def log_residuals(p: RectifiedParams, curve: LossCurve) -> np.ndarray:
    return log_predict_rectified(p, curve.sizes) - np.log(curve.losses)


def lse_objective(p: RectifiedParams, curve: LossCurve, penalty="squared", delta: float = 1e-3) -> float:
    """Sum of penalised log-residuals ``LSE(log B - log(F + D**beta), log E) - log L``."""
    if len(curve) == 0:
        raise InsufficientDataError("curve is empty")
    return float(np.sum(_rho(log_residuals(p, curve), Penalty(penalty), delta)))


# --------------------------------------------------------------------------- fitting


@dataclass(frozen=True)
class FitConfig:
    t_grid_points: int = 32
    t_min: float = 1.0
    t_max: float = 1e6
    # Surrogate mode grids over the offset F itself (log10 bounds).
    f_log10_min: float = -2.0
    f_log10_max: float = 9.0
    n_restarts: int = 16
    penalty: Penalty = Penalty.SQUARED
    huber_delta: float = 1e-3
    max_iter: int = 4000
    # Phase-2 Nelder-Mead pass before the least-squares polish.
    simplex: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "penalty", Penalty(self.penalty))
        if self.t_grid_points < 1 or self.n_restarts < 0:
            raise ValidationError("t_grid_points >= 1 and n_restarts >= 0 required")
        if not 0 < self.t_min < self.t_max:
            raise ValidationError("need 0 < t_min < t_max")

    def to_dict(self) -> dict:
        return {
            "t_grid_points": self.t_grid_points,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "f_log10_min": self.f_log10_min,
            "f_log10_max": self.f_log10_max,
            "n_restarts": self.n_restarts,
            "penalty": self.penalty.value,
            "huber_delta": self.huber_delta,
            "max_iter": self.max_iter,
            "simplex": self.simplex,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FitResult:
    params: RectifiedParams
    objective_value: float
    residual_std: float
    converged: bool
    n_restarts_used: int
    degenerate: bool = False


MIN_FIT_POINTS = 4
DEGENERATE_SPREAD = 1e-9
BOUNDARY_RTOL = 1e-9
_E_FLOOR_RAW = -60.0  # softplus(-60) ~ 1e-26: effectively E = 0


def _softplus(u):
    return np.logaddexp(0.0, u)


def _inv_softplus(e):
    e = max(float(e), 1e-300)
    return e + math.log(-math.expm1(-e)) if e < 30 else e


class _Problem:
    """Log-space residuals over the unconstrained vector (log B, E_raw, log beta, s).

    ``s`` is ``log F`` in surrogate mode and ``log t`` in kernel mode.
    """

    def __init__(self, curve: LossCurve, kernel: KernelF | None, config: FitConfig):
        self.logD = np.log(curve.sizes)
        self.logL = np.log(curve.losses)
        self.kernel = kernel
        self.config = config

    def log_offset(self, s):
        if self.kernel is None:
            return s
        return _safe_log(float(self.kernel.value(math.exp(s))))

    def residuals(self, u, s=None):
        if s is None:
            logB, e_raw, logbeta, s = u
        else:
            logB, e_raw, logbeta = u
        E = _softplus(e_raw)
        beta = math.exp(min(max(logbeta, -12.0), 4.0))
        return _log_pred(logB, E, beta, self.log_offset(min(s, 700.0)), self.logD) - self.logL

    def objective(self, u, s=None) -> float:
        r = self.residuals(u, s)
        if not np.all(np.isfinite(r)):
            return math.inf
        return float(np.sum(_rho(r, self.config.penalty, self.config.huber_delta)))

    def _ls_kwargs(self):
        if self.config.penalty is Penalty.HUBER:
            return dict(method="trf", loss="huber", f_scale=self.config.huber_delta)
        return dict(method="lm") if len(self.logD) >= 4 else dict(method="trf")

    def solve_inner(self, u0, s):
        """Phase 1: optimise (log B, E_raw, log beta) with the offset parameter fixed."""
        try:
            sol = least_squares(
                lambda u: self.residuals(u, s), u0, xtol=1e-14, ftol=1e-14, gtol=1e-14,
                max_nfev=self.config.max_iter, **self._ls_kwargs()
            )
        except (ValueError, FloatingPointError):
            return None
        if not np.all(np.isfinite(sol.x)):
            return None
        return sol.x, self.objective(sol.x, s)

    def polish(self, u0):
        try:
            sol = least_squares(
                self.residuals, u0, xtol=1e-15, ftol=1e-15, gtol=1e-15,
                max_nfev=self.config.max_iter, **self._ls_kwargs()
            )
        except (ValueError, FloatingPointError):
            return u0, self.objective(u0), False
        return sol.x, self.objective(sol.x), bool(sol.status > 0)


def _initial_inner(problem: _Problem, log_offset: float) -> np.ndarray:
    L = np.exp(problem.logL)
    E0 = 0.5 * float(L.min())
    beta0 = 0.5
    excess = max(float(L[0] - E0), 1e-8)
    logB = math.log(excess) + float(np.logaddexp(log_offset, beta0 * problem.logD[0]))
    return np.array([logB, _inv_softplus(E0), math.log(beta0)])


def _grid(config: FitConfig, kernel: KernelF | None) -> np.ndarray:
    if kernel is None:
        return np.linspace(config.f_log10_min, config.f_log10_max, config.t_grid_points) * math.log(10)
    return np.linspace(math.log(config.t_min), math.log(config.t_max), config.t_grid_points)


def _degenerate_result(curve: LossCurve, kernel: KernelF | None) -> FitResult:
    f_mode = kernel if kernel is not None else SurrogateF(0.0, 0.0)
    params = RectifiedParams(B=1e-12, E=float(np.mean(curve.losses)), beta=1.0, t=0.0, f_mode=f_mode)
    r = log_residuals(params, curve)
    return FitResult(params, float(np.sum(r**2)), float(np.std(r)), True, 0, degenerate=True)


def _to_params(u, kernel: KernelF | None) -> RectifiedParams:
    logB, e_raw, logbeta, s = (float(v) for v in u)
    logbeta = min(max(logbeta, -12.0), 4.0)
    E = float(_softplus(e_raw))
    if e_raw < _E_FLOOR_RAW:
        E = 0.0
    if kernel is None:
        return RectifiedParams(math.exp(logB), E, math.exp(logbeta), 0.0, SurrogateF(math.exp(s), 0.0))
    return RectifiedParams(math.exp(logB), E, math.exp(logbeta), math.exp(s), kernel)


def fit_two_phase(curve: LossCurve, config: FitConfig | None = None, kernel: KernelF | None = None) -> FitResult:
    """Fit the rectified law to one loss curve.

    Phase 1 sweeps a log-spaced grid over the offset parameter (``t`` for a
    kernel-backed offset, ``F`` itself for the surrogate) and solves the
    remaining three parameters by nonlinear least squares at each grid point.
    Phase 2 refines all four parameters jointly (Nelder-Mead unless disabled), starting from
    the best grid points plus seeded random perturbations, and finishes with a
    least-squares polish. The lowest objective wins.
    """
    config = config or FitConfig()
    if len(curve) < MIN_FIT_POINTS:
        raise InsufficientDataError(
            f"insufficient points: need at least {MIN_FIT_POINTS} distinct sizes, got {len(curve)}"
        )
    logL = np.log(curve.losses)
    if np.ptp(logL) < DEGENERATE_SPREAD:
        return _degenerate_result(curve, kernel)

    problem = _Problem(curve, kernel, config)
    grid = _grid(config, kernel)

    # Phase 1: offset parameter fixed on the grid, continuation between neighbours.
    phase1 = []
    prev = None
    for s in grid:
        starts = [_initial_inner(problem, problem.log_offset(s))]
        if prev is not None:
            starts.append(prev)
        best = None
        for u0 in starts:
            out = problem.solve_inner(u0, s)
            if out is not None and (best is None or out[1] < best[1]):
                best = out
        if best is None:
            continue
        prev = best[0]
        phase1.append((best[1], np.append(best[0], s)))
    if not phase1:
        raise RuntimeError("phase-1 fitting failed at every grid point")
    phase1.sort(key=lambda item: item[0])

    # Phase 2: joint refinement from the best grid points and perturbations.
    rng = np.random.default_rng(config.seed)
    n_seeds = min(len(phase1), max(1, config.n_restarts // 2))
    starts = [u for _, u in phase1[:n_seeds]]
    while len(starts) < max(1, config.n_restarts):
        base = starts[len(starts) % n_seeds]
        starts.append(base + rng.normal(scale=[0.5, 0.5, 0.2, 1.0]))

    best_u, best_obj, best_conv = phase1[0][1], phase1[0][0], False
    for u0 in starts:
        nm_ok = False
        if config.simplex:
            nm = minimize(
                problem.objective, u0, method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": config.max_iter, "adaptive": True},
            )
            u0, nm_ok = nm.x, bool(nm.success)
        u, obj, conv = problem.polish(u0)
        if not math.isfinite(obj):
            continue
        if obj < best_obj:
            best_u, best_obj, best_conv = u, obj, conv or nm_ok
    params = _to_params(best_u, kernel)
    r = log_residuals(params, curve)
    result = FitResult(
        params=params,
        objective_value=float(np.sum(_rho(r, config.penalty, config.huber_delta))),
        residual_std=float(np.std(r)),
        converged=best_conv,
        n_restarts_used=len(starts),
    )
    if kernel is not None:
        # The log-spaced t grid never reaches t = 0; score that boundary too and
        # keep it when the interior optimum is no better to solver precision.
        edge = fit_fixed_offset(curve, kernel.initial, config)
        if edge.objective_value <= result.objective_value * (1.0 + BOUNDARY_RTOL) + 1e-15:
            p = edge.params
            return FitResult(RectifiedParams(p.B, p.E, p.beta, 0.0, kernel), edge.objective_value,
                             edge.residual_std, edge.converged, len(starts))
    return result


def fit_fixed_offset(curve: LossCurve, F: float, config: FitConfig | None = None) -> FitResult:
    """Rectified law with the offset held at ``F`` (no time dependence); fits B, E, beta."""
    config = config or FitConfig()
    if len(curve) < 3:
        raise InsufficientDataError("insufficient points: need at least 3")
    problem = _Problem(curve, None, config)
    s = _safe_log(F)
    best = problem.solve_inner(_initial_inner(problem, s), s)
    if best is None:
        raise RuntimeError("fixed-offset fit failed")
    u = np.append(best[0], s)
    logB, e_raw, logbeta, _ = u
    E = 0.0 if e_raw < _E_FLOOR_RAW else float(_softplus(e_raw))
    params = RectifiedParams(math.exp(logB), E, math.exp(logbeta), 0.0, SurrogateF(F, 0.0))
    r = log_residuals(params, curve)
    return FitResult(params, float(np.sum(_rho(r, config.penalty, config.huber_delta))), float(np.std(r)), True, 1)


# --------------------------------------------------------------------------- phases


class Phase(str, Enum):
    PRE_POWER = "pre_power"
    POWER = "power"


def transition_point(p: RectifiedParams) -> float:
    """Size ``D* = F**(1/beta)`` at which the two denominator terms are equal."""
    F = p.F
    if F <= 0:
        return 0.0
    return F ** (1.0 / p.beta)


def classify_phase(p: RectifiedParams, D: float) -> Phase:
    _check_positive("D", D)
    return Phase.PRE_POWER if D < transition_point(p) else Phase.POWER


def local_log_slope(p: RectifiedParams, D: float) -> float:
    """``d log L / d log D`` of the rectified law, analytically."""
    Db = D**p.beta
    F = p.F
    num = -p.B * p.beta * Db / (F + Db) ** 2
    return num / (p.B / (F + Db) + p.E)


def curve_from_params(model_id: str, p: RectifiedParams, sizes: Sequence[int]) -> LossCurve:
    return LossCurve.from_arrays(model_id, sizes, predict_rectified(p, np.asarray(sizes, dtype=float)))
