"""Selection metrics and the 6ND training-cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ValidationError


class UndefinedCorrelation(ValueError):
    pass


def pearson_corr(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if x.size < 2:
        raise ValueError("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    # relative test: a list of equal floats can leave rounding-level spread
    if sx <= 1e-14 * max(1.0, float(np.abs(x).max())) or sy <= 1e-14 * max(1.0, float(np.abs(y).max())):
        raise UndefinedCorrelation("correlation is undefined for a constant input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def relative_accuracy(selected_perf: float, pool_perfs: Sequence[float]) -> float:
    """Position of the selected model between worst (0) and best (1); higher is better."""
    perfs = np.asarray(pool_perfs, dtype=np.float64)
    if perfs.size < 2:
        raise ValueError("pool needs at least two models")
    best, worst = float(perfs.max()), float(perfs.min())
    if best == worst:
        raise UndefinedCorrelation("relative accuracy is undefined for a degenerate pool")
    if not worst <= selected_perf <= best:
        raise ValueError("selected performance lies outside the pool range")
    return (selected_perf - worst) / (best - worst)


def rmse(pred: Sequence[float], actual: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.size == 0:
        raise ValueError("pred and actual must be nonempty and of equal length")
    return float(np.sqrt(np.mean((p - a) ** 2)))


@dataclass(frozen=True)
class SelectionScores:
    pearson: float
    relative_accuracy: float
    selected: str


def score_selection(predicted: dict[str, float], actual: dict[str, float], loss_like: bool = True) -> SelectionScores:
    """PearCorr and RelAcc of a pool's predictions against realised values.

    With ``loss_like`` both sides are negated so higher means better on each
    axis; the selected model is the one with the best prediction.
    """
    ids = sorted(predicted)
    if set(ids) != set(actual):
        raise ValueError("predicted and actual cover different models")
    sign = -1.0 if loss_like else 1.0
    pred_perf = np.array([sign * predicted[m] for m in ids])
    true_perf = np.array([sign * actual[m] for m in ids])
    r = pearson_corr(pred_perf, true_perf)
    pick = min(range(len(ids)), key=lambda i: (-pred_perf[i], ids[i]))
    return SelectionScores(r, relative_accuracy(true_perf[pick], true_perf), ids[pick])


# --------------------------------------------------------------------------- cost model


@dataclass(frozen=True)
class CostInputs:
    epochs: int
    hp_rounds: int
    param_count: int
    dataset_size: int

    def __post_init__(self):
        for name in ("epochs", "hp_rounds", "param_count", "dataset_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")


def run_cost(c: CostInputs) -> float:
    """Training FLOPs ``6 * t * h * N * D``."""
    return 6.0 * c.epochs * c.hp_rounds * c.param_count * c.dataset_size


class CostMethod(str, Enum):
    FULL = "full"
    SUB = "sub"
    # progressive halving; "lens" is the CLI spelling
    PROGRESSIVE = "lens"


@dataclass(frozen=True)
class MethodCostSpec:
    method: CostMethod
    pool: tuple[CostInputs, ...]
    fraction: float | None = None
    executed_sizes: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", CostMethod(self.method))
        object.__setattr__(self, "pool", tuple(self.pool))
        if not self.pool:
            raise ValidationError("cost pool is empty")
        if self.method is CostMethod.SUB and not (self.fraction is not None and 0 < self.fraction < 1):
            raise ValidationError("subset tuning needs a fraction in (0, 1)")
        if self.method is CostMethod.PROGRESSIVE:
            if self.executed_sizes is None or len(self.executed_sizes) != len(self.pool):
                raise ValidationError("progressive cost needs one executed size chain per model")
            chains = tuple(tuple(int(s) for s in chain) for chain in self.executed_sizes)
            for chain in chains:
                check_halving_chain(chain)
            object.__setattr__(self, "executed_sizes", chains)


def check_halving_chain(sizes: Sequence[int]) -> None:
    if not sizes:
        raise ValidationError("empty size chain")
    for prev, nxt in zip(sizes, sizes[1:]):
        if nxt != prev // 2:
            raise ValidationError(f"sizes {list(sizes)} do not form a halving chain")
    if sizes[-1] < 1:
        raise ValidationError("chain sizes must be positive")


@dataclass(frozen=True)
class CostBreakdown:
    method: CostMethod
    total: float
    per_model: tuple[float, ...]


def method_cost(spec: MethodCostSpec) -> CostBreakdown:
    full = [run_cost(c) for c in spec.pool]
    if spec.method is CostMethod.FULL:
        per = full
    elif spec.method is CostMethod.SUB:
        per = [spec.fraction * f for f in full]
    else:
        per = [
            sum(6.0 * c.epochs * c.hp_rounds * c.param_count * s for s in chain)
            for c, chain in zip(spec.pool, spec.executed_sizes)
        ]
    return CostBreakdown(spec.method, float(sum(per)), tuple(float(p) for p in per))


def pareto_front(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Points not dominated by any other (lower-or-equal cost, higher-or-equal performance)."""
    if not points:
        raise ValueError("no points")
    pts = sorted({(float(c), float(p)) for c, p in points}, key=lambda cp: (cp[0], -cp[1]))
    front, best_perf = [], -math.inf
    for c, p in pts:
        if p > best_perf:
            front.append((c, p))
            best_perf = p
    return front


@dataclass(frozen=True)
class MetricsReport:
    pearson: float
    relative_accuracy: float
    rmse: float
    selected: str
    n_models: int


def metrics_report(predicted: dict[str, float], actual: dict[str, float], loss_like: bool = True) -> MetricsReport:
    sc = score_selection(predicted, actual, loss_like)
    ids = sorted(predicted)
    err = rmse([predicted[m] for m in ids], [actual[m] for m in ids])
    return MetricsReport(sc.pearson, sc.relative_accuracy, err, sc.selected, len(ids))
