"""Progressive-halving model selection with a regression-deviation stopping rule.

Each candidate is trained on a nested chain of halved subsets. Once ``gamma``
(log size, log loss) pairs are collected, a regressor ``psi`` is fitted to them
and the newest pair is tested against it; the run stops when the normalised
deviation exceeds ``tau`` or the size floor is hit. The candidate's score is
``exp(psi(log D_full))``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import FtselectError, InsufficientDataError, ProviderError
from .scaling import (
    FitConfig,
    LossCurve,
    RectifiedParams,
    fit_two_phase,
    log_predict_rectified,
    predict_rectified,
)

SIGMA_FLOOR = 1e-12

# Lighter than the standalone fitter: psi is refitted at every iteration.
SELECTION_FIT_CONFIG = FitConfig(t_grid_points=12, n_restarts=2, max_iter=2000, simplex=False)


class EstimatorKind(str, Enum):
    LOG_LINEAR = "log_linear"
    SCALING_LAW = "scaling_law"
    AUTO = "auto"


class BreakReason(str, Enum):
    SIGNAL_EXCEEDED = "signal_exceeded"
    FLOOR_REACHED = "floor_reached"
    CURVE_EXHAUSTED = "curve_exhausted"


class Polarity(str, Enum):
    LOSS_LIKE = "loss"
    SCORE_LIKE = "score"


@dataclass(frozen=True)
class SizeLossPair:
    log_size: float
    log_loss: float

    def __post_init__(self):
        if not (math.isfinite(self.log_size) and math.isfinite(self.log_loss)):
            raise ValueError("pair entries must be finite")

    @classmethod
    def of(cls, size: float, loss: float) -> "SizeLossPair":
        return cls(math.log(size), math.log(loss))


@dataclass(frozen=True)
class Estimator:
    kind: EstimatorKind
    fit_residual_std: float
    slope: float = 0.0
    intercept: float = 0.0
    params: RectifiedParams | None = None

    def predict_log(self, log_size):
        if self.kind is EstimatorKind.LOG_LINEAR:
            return self.slope * np.asarray(log_size) + self.intercept
        out = log_predict_rectified(self.params, np.exp(np.asarray(log_size, dtype=np.float64)))
        return out


def fit_regressor(
    pairs: Sequence[SizeLossPair],
    kind: EstimatorKind = EstimatorKind.AUTO,
    fit_config: FitConfig | None = None,
) -> Estimator:
    """Least-squares fit of ``psi`` in (log D, log L) space."""
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.AUTO:
        kind = EstimatorKind.SCALING_LAW if len(pairs) >= 4 else EstimatorKind.LOG_LINEAR
    return _fit_cached(tuple(pairs), kind, fit_config or SELECTION_FIT_CONFIG)


# Fits are deterministic; sweeps over tau replay identical pair prefixes.
@functools.lru_cache(maxsize=8192)
def _fit_cached(pairs: tuple[SizeLossPair, ...], kind: EstimatorKind, fit_config: FitConfig) -> Estimator:
    x = np.array([p.log_size for p in pairs])
    y = np.array([p.log_loss for p in pairs])
    need = 2 if kind is EstimatorKind.LOG_LINEAR else 4
    if len(pairs) < need:
        raise InsufficientDataError(f"{kind.value} estimator needs at least {need} pairs, got {len(pairs)}")
    if np.ptp(x) == 0:
        raise InsufficientDataError("all pairs share the same size")
    if kind is EstimatorKind.LOG_LINEAR:
        A = np.column_stack([x, np.ones_like(x)])
        (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - (slope * x + intercept)
        return Estimator(kind, float(np.std(resid)), float(slope), float(intercept))
    curve = LossCurve.from_arrays("psi", np.rint(np.exp(x)).astype(int), np.exp(y))
    fit = fit_two_phase(curve, fit_config)
    resid = y[np.argsort(x)] - log_predict_rectified(fit.params, curve.sizes)
    return Estimator(kind, float(np.std(resid)), params=fit.params)


def stopping_signal(estimator: Estimator, pair: SizeLossPair, conventional: bool = False) -> float:
    """``|log L - psi(log D)| / sqrt(sigma)``; ``conventional`` divides by ``sigma`` instead."""
    sigma = max(estimator.fit_residual_std, SIGMA_FLOOR)
    dev = abs(pair.log_loss - float(estimator.predict_log(pair.log_size)))
    return dev / (sigma if conventional else math.sqrt(sigma))


def predict_full_score(estimator: Estimator, D_full: float) -> float:
    if estimator.kind is EstimatorKind.SCALING_LAW:
        return predict_rectified(estimator.params, D_full)
    return math.exp(float(estimator.predict_log(math.log(D_full))))


# --------------------------------------------------------------------------- providers


class CurveExhausted(FtselectError, LookupError):
    """The provider has no observation for the requested size."""


Provider = Callable[[int, np.ndarray], float]


class RecordedCurveProvider:
    """Serves losses from an ingested curve.

    In exact mode a missing size raises :class:`CurveExhausted`; otherwise
    sizes inside the observed range are interpolated linearly in log-log space.
    """

    def __init__(self, curve: LossCurve, exact: bool = True):
        self.curve = curve
        self.exact = exact
        self._lookup = {o.dataset_size: o.test_loss for o in curve.observations}

    def __call__(self, size: int, subset=None) -> float:
        if size in self._lookup:
            return self._lookup[size]
        sizes = self.curve.sizes
        if self.exact or not sizes[0] <= size <= sizes[-1]:
            raise CurveExhausted(f"no observation for size {size} in curve {self.curve.model_id!r}")
        return float(np.exp(np.interp(math.log(size), np.log(sizes), np.log(self.curve.losses))))


class SyntheticProvider:
    """Evaluates a ground-truth rectified law with multiplicative log-normal noise.

    Noise is drawn from a generator keyed on ``(seed, size)`` so a given size
    always returns the same value regardless of query order.
    """

    def __init__(self, params: RectifiedParams, log_noise_sigma: float = 0.0, seed: int = 0):
        self.params = params
        self.log_noise_sigma = log_noise_sigma
        self.seed = seed

    def __call__(self, size: int, subset=None) -> float:
        loss = predict_rectified(self.params, size)
        if self.log_noise_sigma > 0:
            eps = np.random.default_rng([self.seed, int(size)]).normal()
            loss *= math.exp(self.log_noise_sigma * eps)
        return loss


# --------------------------------------------------------------------------- algorithm


@dataclass(frozen=True)
class TraceEntry:
    size: int
    loss: float
    signal: float | None = None
    deviations: tuple[float, ...] | None = None


@dataclass(frozen=True)
class SelectionReport:
    model_id: str
    predicted_score: float
    iterations: int
    data_fraction: float
    break_reason: BreakReason
    trace: tuple[TraceEntry, ...]
    full_size: int
    estimator_kind: EstimatorKind

    @property
    def trained_sizes(self) -> list[int]:
        return [e.size for e in self.trace]

    @property
    def smallest_size(self) -> int:
        return min(self.trained_sizes)


def default_floor(D_full: int) -> int:
    return max(32, D_full // 2**10)


def subset_chain(D_full: int, seed: int) -> np.ndarray:
    """Seeded permutation; the subset of size k is its first k entries (so halves nest)."""
    return np.random.default_rng(seed).permutation(D_full)


def progressive_select(
    provider: Provider,
    D_full: int,
    gamma: int = 3,
    tau: float = 3.0,
    floor: int | None = None,
    seed: int = 0,
    *,
    model_id: str = "model",
    start_size: int | None = None,
    estimator: EstimatorKind = EstimatorKind.AUTO,
    conventional_signal: bool = False,
    fit_config: FitConfig | None = None,
) -> SelectionReport:
    if gamma < 2:
        raise ValueError("gamma must be >= 2")
    if not tau >= 0:
        raise ValueError("tau must be nonnegative")
    D_full = int(D_full)
    floor = default_floor(D_full) if floor is None else int(floor)
    if floor < 1:
        raise ValueError("floor must be >= 1")
    size = D_full if start_size is None else int(start_size)
    if not 1 <= size <= D_full:
        raise ValueError("start_size must lie in [1, D_full]")
    order = subset_chain(D_full, seed)

    collected: list[SizeLossPair] = []
    trace: list[TraceEntry] = []
    psi: Estimator | None = None
    a = 1
    while True:
        try:
            loss = float(provider(size, order[:size]))
        except CurveExhausted:
            reason = BreakReason.CURVE_EXHAUSTED
            psi = None
            break
        except Exception as exc:
            raise ProviderError(f"provider failed at size {size}: {exc}", partial=tuple(trace)) from exc
        pair = SizeLossPair.of(size, loss)
        if len(collected) >= gamma:
            psi = fit_regressor(collected, estimator, fit_config)
            deviations = tuple(
                abs(p.log_loss - float(psi.predict_log(p.log_size))) for p in collected
            )
            signal = stopping_signal(psi, pair, conventional_signal)
            trace.append(TraceEntry(size, loss, signal, deviations))
            if signal > tau:
                reason = BreakReason.SIGNAL_EXCEEDED
                break
        else:
            trace.append(TraceEntry(size, loss))
        collected.append(pair)
        psi = None
        if size // 2 < floor:
            reason = BreakReason.FLOOR_REACHED
            break
        size //= 2
        a += 1

    if not trace:
        raise InsufficientDataError(f"provider has no observation at the start size {size}")
    if psi is None:
        psi = _final_estimator(collected, estimator, fit_config)
    score = predict_full_score(psi, D_full)
    smallest = min(e.size for e in trace)
    return SelectionReport(
        model_id=model_id,
        predicted_score=score,
        iterations=a,
        data_fraction=smallest / D_full,
        break_reason=reason,
        trace=tuple(trace),
        full_size=D_full,
        estimator_kind=psi.kind,
    )


def _final_estimator(collected, kind, fit_config) -> Estimator:
    if len(collected) >= 2:
        if EstimatorKind(kind) is EstimatorKind.SCALING_LAW and len(collected) < 4:
            kind = EstimatorKind.LOG_LINEAR
        return fit_regressor(collected, kind, fit_config)
    # A single observation: flat extrapolation.
    return Estimator(EstimatorKind.LOG_LINEAR, 0.0, 0.0, collected[0].log_loss)


# --------------------------------------------------------------------------- ranking


@dataclass(frozen=True)
class Ranking:
    polarity: Polarity
    entries: tuple[tuple[str, float], ...]

    @property
    def selected(self) -> str:
        return self.entries[0][0]

    @property
    def order(self) -> list[str]:
        return [m for m, _ in self.entries]


def rank_pool(reports: Sequence[SelectionReport], polarity: Polarity = Polarity.LOSS_LIKE) -> Ranking:
    """Best first: ascending score for losses, descending for scores; ties by id."""
    polarity = Polarity(polarity)
    if not reports:
        raise ValueError("cannot rank an empty pool")
    ids = [r.model_id for r in reports]
    if len(set(ids)) != len(ids):
        raise ValueError("model ids must be unique")
    sign = 1.0 if polarity is Polarity.LOSS_LIKE else -1.0
    ordered = sorted(reports, key=lambda r: (sign * r.predicted_score, r.model_id))
    return Ranking(polarity, tuple((r.model_id, r.predicted_score) for r in ordered))


@dataclass(frozen=True)
class Candidate:
    model_id: str
    param_count: int
    provider: Provider
    true_full_loss: float | None = None

    def __post_init__(self):
        if self.param_count <= 0:
            raise ValueError("param_count must be positive")


@dataclass(frozen=True)
class CandidatePool:
    candidates: tuple[Candidate, ...]
    D_full: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = [c.model_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("model ids must be unique")

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @property
    def ground_truth(self) -> dict[str, float]:
        return {c.model_id: c.true_full_loss for c in self.candidates}


def select_pool(pool: CandidatePool, **kwargs) -> list[SelectionReport]:
    """Run :func:`progressive_select` for every candidate with shared settings."""
    return [progressive_select(c.provider, pool.D_full, model_id=c.model_id, **kwargs) for c in pool]
