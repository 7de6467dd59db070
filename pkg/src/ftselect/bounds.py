"""PAC-Bayes bound terms on toy networks: layer Hessians, h_i, KL and lemma checks.

Per-sample loss throughout is ``0.5 * (f(x) - y)**2``; the empirical loss is
its mean. Hessians are exact (nested autodiff) and restricted to one layer's
parameter block.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import hessian, vmap

from . import ntk
from .errors import DimensionError, InsufficientDataError, NumericalError, ValidationError
from .ntk import Architecture, ToyNetwork

MAX_LAYER_PARAMS = 2000
XI_EXPONENT = 0.75


# --------------------------------------------------------------------------- Hessians


@dataclass(frozen=True)
class LayerHessian:
    layer_index: int
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def from_matrix(cls, matrix, layer_index: int = 0) -> "LayerHessian":
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError("Hessian must be square")
        scale = max(1.0, float(np.abs(m).max(initial=0.0)))
        if np.abs(m - m.T).max(initial=0.0) > 1e-8 * scale:
            raise NumericalError("Hessian is not symmetric")
        m = 0.5 * (m + m.T)
        lam, U = np.linalg.eigh(m)
        return cls(layer_index, m, lam, U)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _layer_loss_fn(net: ToyNetwork, layer_index: int) -> tuple[Callable, torch.Tensor]:
    """Per-sample loss as a function of one layer's flat parameters."""
    if not net.spec.activation.smooth:
        raise ValidationError("exact Hessians need a smooth activation (plain ReLU rejected)")
    if not 0 <= layer_index < len(net.spec.layer_shapes):
        raise IndexError(f"layer {layer_index} out of range")
    sl = net.spec.layer_slice(layer_index)
    if sl.stop - sl.start > MAX_LAYER_PARAMS:
        raise ValidationError(f"layer has {sl.stop - sl.start} parameters; dense limit is {MAX_LAYER_PARAMS}")
    fn = ntk.model_function(net.spec)
    theta = ntk.as_tensor(net.flat())
    head, tail = theta[: sl.start], theta[sl.stop :]

    def loss(w, x, y):
        out = fn(torch.cat([head, w, tail]), x[None, :])[0]
        return 0.5 * (out - y) ** 2

    return loss, theta[sl]


def per_sample_hessians(net: ToyNetwork, data, layer_index: int) -> np.ndarray:
    """Stack of per-sample loss Hessians w.r.t. one layer, shape ``(n, p_i, p_i)``."""
    X, y = ntk.as_dataset(data)
    X = ntk._check_inputs(net, X)
    loss, w = _layer_loss_fn(net, layer_index)
    H = vmap(hessian(loss), in_dims=(None, 0, 0))(w, ntk.as_tensor(X), ntk.as_tensor(y))
    return H.detach().numpy()


def layer_hessian(net: ToyNetwork, data, layer_index: int) -> LayerHessian:
    """Exact Hessian of the mean per-sample loss w.r.t. one layer's parameters."""
    H = per_sample_hessians(net, data, layer_index).mean(axis=0)
    return LayerHessian.from_matrix(H, layer_index)


def full_hessian_trace(net: ToyNetwork, data) -> float:
    """Trace of the mean-loss Hessian over all parameters (sum of layer-block traces)."""
    return float(sum(np.trace(layer_hessian(net, data, i).matrix) for i in range(len(net.spec.layer_shapes))))


def _as_hessian(H) -> LayerHessian:
    return H if isinstance(H, LayerHessian) else LayerHessian.from_matrix(H)


def truncated_psd_quadratic(H: LayerHessian | np.ndarray, v) -> float:
    """``v^T U max(Lambda, 0) U^T v``: the quadratic form with negative curvature removed."""
    H = _as_hessian(H)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != H.size:
        raise DimensionError(f"vector length {v.shape[0]} != Hessian size {H.size}")
    coeff = H.eigenvectors.T @ v
    return float(np.sum(np.maximum(H.eigenvalues, 0.0) * coeff**2))


def _truncated_batch(Hs: np.ndarray, v: np.ndarray) -> np.ndarray:
    lam, U = np.linalg.eigh(0.5 * (Hs + np.swapaxes(Hs, 1, 2)))
    coeff = np.einsum("nij,i->nj", U, v)
    return np.sum(np.maximum(lam, 0.0) * coeff**2, axis=1)


def hessian_term(net: ToyNetwork, data, layer_index: int, slack: float = 1.0) -> float:
    """``h_i``: max over samples of the truncated quadratic form in the layer displacement.

    ``slack >= 1`` pads the tight value upward.
    """
    if slack < 1:
        raise ValidationError("slack must be >= 1")
    if net.pretrained_weights is None:
        raise ValidationError("network has no pretrained snapshot")
    v = net.displacement(layer_index)
    if not np.any(v):
        return 0.0
    Hs = per_sample_hessians(net, data, layer_index)
    return slack * float(_truncated_batch(Hs, v).max())


def hessian_terms(net: ToyNetwork, data, slack: float = 1.0) -> list[float]:
    return [hessian_term(net, data, i, slack) for i in range(len(net.spec.layer_shapes))]


# --------------------------------------------------------------------------- KL


class KLMode(str, Enum):
    ISOTROPIC = "isotropic"
    FULL = "full"


def kl_divergence(
    net: ToyNetwork,
    sigmas: Sequence[float] | None = None,
    mode: KLMode = KLMode.ISOTROPIC,
    covariances: Sequence[np.ndarray] | None = None,
) -> float:
    """KL between Gaussian posteriors centred at the fine-tuned and pretrained weights.

    Isotropic: ``sum ||dW_i||_F^2 / (2 sigma_i^2)``. Full: ``0.5 sum vec(dW_i)^T
    Sigma_i^{-1} vec(dW_i)`` with one covariance per layer.
    """
    mode = KLMode(mode)
    if net.pretrained_weights is None:
        raise ValidationError("network has no pretrained snapshot")
    n_layers = len(net.spec.layer_shapes)
    total = 0.0
    if mode is KLMode.ISOTROPIC:
        if sigmas is None or len(sigmas) != n_layers:
            raise DimensionError(f"need one sigma per layer ({n_layers})")
        for i, s in enumerate(sigmas):
            if not s > 0:
                raise ValidationError("sigmas must be positive")
            v = net.displacement(i)
            total += float(v @ v) / (2.0 * s * s)
        return total
    if covariances is None or len(covariances) != n_layers:
        raise DimensionError(f"need one covariance per layer ({n_layers})")
    for i, cov in enumerate(covariances):
        cov = np.asarray(cov, dtype=np.float64)
        v = net.displacement(i)
        if cov.shape != (v.size, v.size):
            raise DimensionError(f"covariance {i} has shape {cov.shape}, expected {(v.size, v.size)}")
        try:
            # Cholesky doubles as the positive-definiteness check.
            L = np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance {i} is singular or not positive definite") from exc
        z = np.linalg.solve(L, v)
        total += 0.5 * float(z @ z)
    return total


# --------------------------------------------------------------------------- bound values


@dataclass(frozen=True)
class BoundReport:
    empirical_loss: float
    h: tuple[float, ...]
    n: int
    C: float
    epsilon: float
    xi_constant: float
    bound_value: float
    base: float
    hessian_term: float
    xi_term: float

    @property
    def term_breakdown(self) -> dict[str, float]:
        return {"base": self.base, "hessian_term": self.hessian_term, "xi_term": self.xi_term}


def _check_nonneg(**values):
    for name, v in values.items():
        if not (v >= 0 and math.isfinite(v)):
            raise ValidationError(f"{name} must be finite and nonnegative, got {v}")


def evaluate_pac_bound(
    L_hat: float, h: Sequence[float], n: int, C: float, epsilon: float, xi_constant: float = 1.0
) -> BoundReport:
    """``(1+eps) L_hat + (1+eps) sqrt(C) sum sqrt(h_i) / sqrt(n) + xi_constant * n^(-3/4)``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    _check_nonneg(L_hat=L_hat, C=C, xi_constant=xi_constant)
    h = tuple(float(x) for x in h)
    for x in h:
        _check_nonneg(h_i=x)
    base = (1.0 + epsilon) * L_hat
    hess = (1.0 + epsilon) * math.sqrt(C) * sum(math.sqrt(x) for x in h) / math.sqrt(n)
    xi = xi_constant * n ** (-XI_EXPONENT)
    return BoundReport(float(L_hat), h, int(n), float(C), float(epsilon), float(xi_constant),
                       base + hess + xi, base, hess, xi)


@dataclass(frozen=True)
class ScalingBoundParams:
    C3: float
    beta3: float
    C2: float | None = None
    beta2: float | None = None

    def __post_init__(self):
        if not self.C3 > 0:
            raise ValidationError("C3 must be positive")
        if not 0 < self.beta3 <= 1:
            raise ValidationError("beta3 must lie in (0, 1]")


def derive_scaling_params(C: float, n_layers: int, C2: float, beta2: float) -> ScalingBoundParams:
    """``beta3 = (beta2 + 1) / 2`` and ``C3 = sqrt(C * l * C2)``."""
    return ScalingBoundParams(math.sqrt(C * n_layers * C2), (beta2 + 1.0) / 2.0, C2, beta2)


def scaling_corollary_bound(L_hat: float, p: ScalingBoundParams, n: float, epsilon: float, xi_constant: float = 1.0) -> float:
    if n < 1:
        raise ValidationError("n must be >= 1")
    return (1.0 + epsilon) * L_hat + p.C3 * n ** (-p.beta3) + xi_constant * n ** (-XI_EXPONENT)


def dominance_crossover(p: ScalingBoundParams, xi_constant: float = 1.0) -> float:
    """Smallest ``n0 >= 1`` past which ``C3 n^-beta3`` exceeds ``xi_constant n^-3/4``.

    The ratio ``(C3/xi) n^(3/4 - beta3)`` is increasing for ``beta3 < 3/4``, so
    the crossover solves it equal to one; below ``n = 1`` the answer is 1.
    Returns ``inf`` when the crossover lies beyond the float range.
    """
    if not p.beta3 < XI_EXPONENT:
        raise ValidationError("the Hessian term only dominates when beta3 < 3/4")
    if xi_constant == 0:
        return 1.0
    log_n0 = math.log(xi_constant / p.C3) / (XI_EXPONENT - p.beta3)
    if log_n0 >= math.log(sys.float_info.max):
        return math.inf
    return max(1.0, math.exp(log_n0))


def term_ratio(p: ScalingBoundParams, n: float, xi_constant: float = 1.0) -> float:
    return p.C3 * n ** (-p.beta3) / (xi_constant * n ** (-XI_EXPONENT))


# --------------------------------------------------------------------------- scaling diagnostics


def power_law_fit(ns: Sequence[float], values: Sequence[float]) -> tuple[float, float]:
    """Fit ``values = C n^-beta`` by log-log least squares; returns ``(C, beta)``."""
    ns = np.asarray(ns, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if ns.size < 2 or np.unique(ns).size < 2:
        raise InsufficientDataError("need at least two distinct sizes")
    if np.any(ns <= 0) or np.any(vals <= 0):
        raise ValidationError("sizes and values must be positive")
    slope, intercept = np.polyfit(np.log(ns), np.log(vals), 1)
    return float(math.exp(intercept)), float(-slope)


@dataclass(frozen=True)
class HessianScalingResult:
    sizes: tuple[int, ...]
    traces: tuple[float, ...]
    max_h: tuple[float, ...]
    C2: float
    beta2: float
    trace_slope: float


# (n, seed) -> (network with pretrained snapshot, training data)
ProblemFactory = Callable[[int, int], tuple[ToyNetwork, tuple[np.ndarray, np.ndarray]]]


def hessian_scaling_fit(
    factory: ProblemFactory, sizes: Sequence[int], seed: int = 0, tol: float = 1e-8, min_decades: float = 2.0
) -> HessianScalingResult:
    """Train to ``tol`` at each size and regress tr(H) and max-layer h_i on n in log-log.

    ``trace_slope`` is the fitted d log tr(H) / d log n.
    """
    sizes = sorted(int(s) for s in sizes)
    if len(sizes) < 4 or len(set(sizes)) < 4:
        raise InsufficientDataError("need at least 4 distinct sizes")
    if math.log10(sizes[-1] / sizes[0]) < min_decades - 1e-12:
        raise InsufficientDataError(f"sizes must span at least {min_decades} decades")
    traces, max_h = [], []
    for n in sizes:
        net, data = factory(n, seed)
        fitted, _ = ntk.fit_to_tolerance(net, data, tol=tol)
        traces.append(full_hessian_trace(fitted, data))
        max_h.append(max(hessian_terms(fitted, data)))
    _, neg_slope = power_law_fit(sizes, traces)
    if all(v > 0 for v in max_h):
        C2, beta2 = power_law_fit(sizes, max_h)
    else:
        C2, beta2 = math.nan, math.nan
    return HessianScalingResult(tuple(sizes), tuple(traces), tuple(max_h), C2, beta2, -neg_slope)


# --------------------------------------------------------------------------- lemma checks


@dataclass(frozen=True)
class TraceCheck:
    trace_H: float
    gn_trace: float
    gap: float

    @property
    def relative_gap(self) -> float:
        return self.gap / abs(self.trace_H) if self.trace_H else self.gap


def gauss_newton_trace_check(net: ToyNetwork, data, tol: float = 1e-8) -> TraceCheck:
    """Compare tr(H) with the Gauss-Newton trace ``mean ||grad f(x_i)||^2`` at an interpolating point."""
    X, y = ntk.as_dataset(data)
    mse = float(np.mean((ntk.forward_batch(net, X) - y) ** 2))
    if not mse < tol:
        raise ValidationError(f"network does not interpolate the data (MSE {mse:.3e} >= {tol:.1e})")
    trace = full_hessian_trace(net, (X, y))
    J = ntk.jacobian(net, X)
    gn = float(np.mean(np.sum(J * J, axis=1)))
    return TraceCheck(trace, gn, abs(trace - gn))


def cauchy_schwarz_check(h: Sequence[float]) -> tuple[float, float, bool]:
    """``sum sqrt(h_i) <= sqrt(l * sum h_i)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        raise ValidationError("h is empty")
    if np.any(h < 0):
        raise ValidationError("h entries must be nonnegative")
    lhs = float(np.sum(np.sqrt(h)))
    rhs = math.sqrt(h.size * float(np.sum(h)))
    return lhs, rhs, lhs <= rhs + 1e-12


@dataclass(frozen=True)
class WeightDistanceCheck:
    lhs: tuple[float, ...]
    bound: tuple[float, ...]
    holds: bool


def _layer_inputs(net: ToyNetwork, X: np.ndarray) -> list[np.ndarray]:
    """Activations entering each layer (MLP / linear only)."""
    mats = ntk.unflatten(net.spec, net.flat())
    h = torch.as_tensor(X, dtype=ntk.DTYPE)
    inputs = []
    with torch.no_grad():
        for W in mats:
            inputs.append(h.numpy().copy())
            h = ntk._activate(net.spec.activation, h @ torch.as_tensor(W).T)
    return inputs


def weight_distance_bound_check(net: ToyNetwork, data, energy_tol: float = 1e-12) -> WeightDistanceCheck:
    """Per-layer ``||dW_i||_F^2 <= min(d_i, d_{i-1}) sigma^2 / lambda_min``.

    ``lambda_min`` is the smallest eigenvalue of the mean input second moment
    of the layer and ``sigma^2 = d_i * eps^2`` with ``eps`` the largest
    per-coordinate output perturbation ``|(dW_i x)_j|`` observed on the data.
    Without input energy (no data, or all-zero inputs) the bound is the
    zero-displacement value 0. A rank-deficient but nonzero input set gives an
    infinite bound.
    """
    if net.pretrained_weights is None:
        raise ValidationError("network has no pretrained snapshot")
    if net.spec.architecture is Architecture.TOY_ATTENTION:
        raise ValidationError("weight-distance check supports linear and MLP networks")
    X, _ = ntk.as_dataset(data)
    X = ntk._check_inputs(net, X)
    lhs, bounds, holds = [], [], True
    for i, Z in enumerate(_layer_inputs(net, X)):
        d_out, d_in = net.spec.layer_shapes[i]
        dW = net.displacement(i).reshape(d_out, d_in)
        dist = float(np.sum(dW * dW))
        if not np.any(Z):
            bound = 0.0
        else:
            lam_min = float(np.linalg.eigvalsh(Z.T @ Z / Z.shape[0])[0])
            eps = float(np.abs(Z @ dW.T).max())
            sigma2 = d_out * eps * eps
            bound = math.inf if lam_min <= energy_tol * float(np.mean(np.sum(Z * Z, axis=1))) else (
                min(d_out, d_in) * sigma2 / lam_min
            )
        lhs.append(dist)
        bounds.append(bound)
        holds = holds and dist <= bound * (1.0 + 1e-9) + 1e-15
    return WeightDistanceCheck(tuple(lhs), tuple(bounds), holds)


__all__ = [
    "BoundReport",
    "HessianScalingResult",
    "KLMode",
    "LayerHessian",
    "ScalingBoundParams",
    "TraceCheck",
    "WeightDistanceCheck",
    "cauchy_schwarz_check",
    "derive_scaling_params",
    "dominance_crossover",
    "evaluate_pac_bound",
    "full_hessian_trace",
    "gauss_newton_trace_check",
    "hessian_scaling_fit",
    "hessian_term",
    "hessian_terms",
    "kl_divergence",
    "layer_hessian",
    "per_sample_hessians",
    "power_law_fit",
    "scaling_corollary_bound",
    "term_ratio",
    "truncated_psd_quadratic",
    "weight_distance_bound_check",
]
