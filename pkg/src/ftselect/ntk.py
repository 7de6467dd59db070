"""Exact gradient, NTK and linearized-dynamics machinery for small networks.

Three architectures are supported, all with a scalar output:

* ``linear``: ``f(x) = W x`` with a single ``1 x d`` weight matrix.
* ``mlp``: bias-free multilayer perceptron, ``layer_dims = [d_in, h_1, ..., 1]``.
* ``toy_attention``: one post-LN transformer block on a sequence of ``T`` tokens
  of width ``d`` (``layer_dims = [T, d, d_ff]``), mean-pooled to a scalar.

Networks are plain containers of numpy weight matrices. Differentiation is done
with ``torch.func`` in float64 against a flat parameter vector that concatenates
the row-major flattened matrices in layer order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.optimize import least_squares
from torch.func import jacrev

from .errors import DimensionError, NumericalError, TrainingDivergence

DTYPE = torch.float64
DIVERGENCE_LOSS = 1e12
SOFTPLUS_SHARPNESS = 10.0
LN_EPS = 1e-12


class Architecture(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"
    TOY_ATTENTION = "toy_attention"


class Activation(str, Enum):
    TANH = "tanh"
    SMOOTH_RELU = "smooth_relu"
    RELU = "relu"

    @property
    def smooth(self) -> bool:
        return self is not Activation.RELU


@dataclass(frozen=True)
class NetworkSpec:
    architecture: Architecture
    layer_dims: tuple[int, ...]
    activation: Activation = Activation.TANH
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if not self.layer_dims:
            raise DimensionError("layer_dims must be nonempty")
        if any(d <= 0 for d in self.layer_dims):
            raise DimensionError(f"layer_dims must be positive, got {self.layer_dims}")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        arch, dims = self.architecture, self.layer_dims
        if arch is Architecture.LINEAR and (len(dims) != 2 or dims[1] != 1):
            raise DimensionError("linear networks take layer_dims [d, 1]")
        if arch is Architecture.MLP and (len(dims) < 2 or dims[-1] != 1):
            raise DimensionError("mlp layer_dims must be [d_in, ..., 1]")
        if arch is Architecture.TOY_ATTENTION and len(dims) != 3:
            raise DimensionError("toy_attention layer_dims must be [seq_len, d_model, d_ff]")

    @property
    def input_dim(self) -> int:
        if self.architecture is Architecture.TOY_ATTENTION:
            return self.layer_dims[0] * self.layer_dims[1]
        return self.layer_dims[0]

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        dims = self.layer_dims
        if self.architecture is Architecture.TOY_ATTENTION:
            _, d, d_ff = dims
            # Wq, Wk, Wv, W_ff1, W_ff2, w_out
            return ((d, d), (d, d), (d, d), (d_ff, d), (d, d_ff), (1, d))
        return tuple((dims[i + 1], dims[i]) for i in range(len(dims) - 1))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(r * c for r, c in self.layer_shapes)

    @property
    def param_count(self) -> int:
        return sum(self.layer_sizes)

    def layer_slice(self, index: int) -> slice:
        sizes = self.layer_sizes
        if not 0 <= index < len(sizes):
            raise IndexError(f"layer {index} out of range for {len(sizes)} layers")
        start = sum(sizes[:index])
        return slice(start, start + sizes[index])

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture.value,
            "layer_dims": list(self.layer_dims),
            "activation": self.activation.value,
            "init_scale": self.init_scale,
            "seed": self.seed,
        }


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ToyNetwork:
    """Current weights ``W_i`` plus the immutable pretrained snapshot."""

    spec: NetworkSpec
    weights: tuple[np.ndarray, ...]
    pretrained_weights: tuple[np.ndarray, ...] | None = field(default=None)

    def __post_init__(self):
        shapes = self.spec.layer_shapes
        ws = tuple(_frozen(w) for w in self.weights)
        if tuple(w.shape for w in ws) != shapes:
            raise DimensionError(
                f"weight shapes {[w.shape for w in ws]} do not match spec {list(shapes)}"
            )
        object.__setattr__(self, "weights", ws)
        if self.pretrained_weights is not None:
            pws = tuple(_frozen(w) for w in self.pretrained_weights)
            if tuple(w.shape for w in pws) != shapes:
                raise DimensionError("pretrained snapshot shapes do not match spec")
            object.__setattr__(self, "pretrained_weights", pws)

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def pretrained_flat(self) -> np.ndarray:
        if self.pretrained_weights is None:
            raise ValueError("network has no pretrained snapshot")
        return np.concatenate([w.ravel() for w in self.pretrained_weights])

    def with_flat(self, theta: np.ndarray) -> "ToyNetwork":
        """New network with replaced current weights; the snapshot is carried over."""
        return ToyNetwork(self.spec, unflatten(self.spec, theta), self.pretrained_weights)

    def snapshot(self) -> "ToyNetwork":
        """Freeze the current weights as the pretrained snapshot."""
        return ToyNetwork(self.spec, self.weights, self.weights)

    def displacement(self, layer: int) -> np.ndarray:
        """Flattened ``W_i - W_i^(s)`` for one layer."""
        if self.pretrained_weights is None:
            raise ValueError("network has no pretrained snapshot")
        return (self.weights[layer] - self.pretrained_weights[layer]).ravel()


def unflatten(spec: NetworkSpec, theta) -> tuple[np.ndarray, ...]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.param_count,):
        raise DimensionError(f"expected {spec.param_count} parameters, got {theta.shape}")
    out, start = [], 0
    for r, c in spec.layer_shapes:
        out.append(theta[start : start + r * c].reshape(r, c))
        start += r * c
    return tuple(out)


def build_toy_network(spec: NetworkSpec) -> ToyNetwork:
    """Gaussian init with variance ``init_scale**2 / fan_in``; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    weights = [
        rng.standard_normal((r, c)) * spec.init_scale / math.sqrt(c) for r, c in spec.layer_shapes
    ]
    return ToyNetwork(spec, weights, weights)


# --------------------------------------------------------------------------- torch core


def _activate(kind: Activation, z):
    if kind is Activation.TANH:
        return torch.tanh(z)
    if kind is Activation.SMOOTH_RELU:
        return torch.nn.functional.softplus(SOFTPLUS_SHARPNESS * z) / SOFTPLUS_SHARPNESS
    return torch.relu(z)


def norm_preserving_layer_norm(h):
    """Center each row and rescale it back to the row's input norm."""
    centered = h - h.mean(dim=-1, keepdim=True)
    scale = torch.linalg.vector_norm(h, dim=-1, keepdim=True) / torch.sqrt(
        (centered**2).sum(dim=-1, keepdim=True) + LN_EPS**2
    )
    return centered * scale


def _split(spec: NetworkSpec, theta):
    mats, start = [], 0
    for r, c in spec.layer_shapes:
        mats.append(theta[start : start + r * c].reshape(r, c))
        start += r * c
    return mats


def _attention_block(spec: NetworkSpec, mats, X, taps: dict | None = None):
    T, d, _ = spec.layer_dims
    Wq, Wk, Wv, W1, W2, w_out = mats
    S = X.reshape(X.shape[0], T, d)
    scores = (S @ Wq.T) @ (S @ Wk.T).transpose(-1, -2) / math.sqrt(d)
    A = torch.softmax(scores, dim=-1)
    H = S + A @ (S @ Wv.T)
    H1 = norm_preserving_layer_norm(H)
    Z = H1 + _activate(spec.activation, H1 @ W1.T) @ W2.T
    Z1 = norm_preserving_layer_norm(Z)
    if taps is not None:
        taps["attention"] = A
        taps["ln_in"] = [H, Z]
        taps["ln_out"] = [H1, Z1]
    return (Z1.mean(dim=1) @ w_out.T)[:, 0]


def _forward_batch(spec: NetworkSpec, theta, X, taps: dict | None = None):
    mats = _split(spec, theta)
    if spec.architecture is Architecture.TOY_ATTENTION:
        return _attention_block(spec, mats, X, taps)
    h = X
    for W in mats[:-1]:
        h = _activate(spec.activation, h @ W.T)
    return (h @ mats[-1].T)[:, 0]


@lru_cache(maxsize=None)
def model_function(spec: NetworkSpec) -> Callable:
    """Batched torch function ``(theta[P], X[n, d_in]) -> outputs[n]``."""

    def fn(theta, X):
        return _forward_batch(spec, theta, X)

    return fn


def as_tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


def as_dataset(data) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(X, y)`` arrays or a sequence of ``(x, y)`` pairs."""
    if isinstance(data, tuple) and len(data) == 2 and np.ndim(data[1]) == 1 and np.ndim(data[0]) == 2:
        X, y = data
    else:
        pairs = list(data)
        if not pairs:
            raise ValueError("data must be nonempty")
        X = np.array([np.asarray(x, dtype=np.float64).ravel() for x, _ in pairs])
        y = np.array([float(t) for _, t in pairs])
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("data must be nonempty")
    if X.shape[0] != y.shape[0]:
        raise DimensionError("X and y lengths differ")
    return X, y


def _check_inputs(net: ToyNetwork, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != net.spec.input_dim:
        raise DimensionError(f"input dimension {X.shape[1]} != {net.spec.input_dim}")
    return X


# --------------------------------------------------------------------------- public ops


def forward_batch(net: ToyNetwork, X) -> np.ndarray:
    X = _check_inputs(net, X)
    with torch.no_grad():
        return model_function(net.spec)(as_tensor(net.flat()), as_tensor(X)).numpy()


def forward(net: ToyNetwork, x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(forward_batch(net, x[None, :])[0])


def jacobian(net: ToyNetwork, X) -> np.ndarray:
    """Rows are ``grad_theta f(x_i)``; shape ``(n, param_count)``."""
    X = _check_inputs(net, X)
    fn = model_function(net.spec)
    return jacrev(fn)(as_tensor(net.flat()), as_tensor(X)).numpy()


def param_gradient(net: ToyNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    return jacobian(net, x[None, :])[0]


@dataclass(frozen=True)
class KernelMatrix:
    """Symmetric PSD kernel together with its eigendecomposition."""

    entries: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def from_matrix(cls, matrix) -> "KernelMatrix":
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError("kernel must be square")
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        if np.max(np.abs(m - m.T), initial=0.0) > 1e-10 * scale:
            raise NumericalError("kernel is not symmetric")
        m = 0.5 * (m + m.T)
        try:
            lam, U = np.linalg.eigh(m)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigendecomposition failed: {exc}") from exc
        tol = 1e-8 * scale
        if lam.size and lam.min() < -tol:
            raise NumericalError(f"kernel is not PSD (min eigenvalue {lam.min():.3e})")
        lam = np.clip(lam, 0.0, None)
        return cls(_frozen(m), _frozen(lam), _frozen(U))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def spectral_weights(self, r0) -> np.ndarray:
        """Squared projections ``(u_k . r0)**2`` of a residual onto the eigenbasis."""
        r0 = np.asarray(r0, dtype=np.float64)
        if r0.shape != (self.size,):
            raise DimensionError(f"residual length {r0.shape} != kernel size {self.size}")
        return (self.eigenvectors.T @ r0) ** 2


def compute_ntk(net: ToyNetwork, inputs) -> KernelMatrix:
    X = _check_inputs(net, np.asarray(inputs, dtype=np.float64))
    J = jacobian(net, X)
    return KernelMatrix.from_matrix(J @ J.T)


def _check_rate_time(eta, t):
    if not eta > 0:
        raise ValueError("eta must be positive")
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")


def ntk_test_loss(kernel: KernelMatrix, r0, eta: float, t):
    """``||exp(-eta * Theta * t) r0||^2``; ``t`` may be a scalar or an array."""
    _check_rate_time(eta, t)
    w = kernel.spectral_weights(r0)
    t_arr = np.asarray(t, dtype=np.float64)
    decay = np.exp(-2.0 * eta * np.multiply.outer(t_arr, kernel.eigenvalues))
    out = decay @ w
    return float(out) if t_arr.ndim == 0 else out


def linearized_residual(kernel: KernelMatrix, r0, eta: float, t: float) -> np.ndarray:
    _check_rate_time(eta, t)
    r0 = np.asarray(r0, dtype=np.float64)
    if r0.shape != (kernel.size,):
        raise DimensionError(f"residual length {r0.shape} != kernel size {kernel.size}")
    U = kernel.eigenvectors
    return U @ (np.exp(-eta * kernel.eigenvalues * t) * (U.T @ r0))


def gd_kernel_rate(eta: float, n: int) -> float:
    """Kernel-flow rate matching ``train_sgd``: the gradient of half the MSE is ``J^T r / n``."""
    return eta / n


def initial_residual(net: ToyNetwork, data) -> np.ndarray:
    X, y = as_dataset(data)
    return forward_batch(net, X) - y


@dataclass(frozen=True)
class LossTrace:
    steps: tuple[int, ...]
    losses: tuple[float, ...]
    network: ToyNetwork | None = None

    def __iter__(self):
        return iter(zip(self.steps, self.losses))

    def __len__(self):
        return len(self.steps)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train_sgd(net: ToyNetwork, data, eta: float, steps: int, record_residuals: bool = False):
    """Full-batch gradient descent on the mean squared error.

    The update is ``theta -= eta * grad(0.5 * MSE)``; the recorded loss is the
    plain MSE at every step (``steps + 1`` entries). With ``record_residuals``
    the residual vectors are returned as a second value.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not eta > 0:
        raise ValueError("eta must be positive")
    X, y = as_dataset(data)
    X = _check_inputs(net, X)
    fn = model_function(net.spec)
    Xt, yt = as_tensor(X), as_tensor(y)
    theta = as_tensor(net.flat()).clone()
    losses, residuals = [], []
    for k in range(steps + 1):
        theta.requires_grad_(True)
        r = fn(theta, Xt) - yt
        mse = (r**2).mean()
        value = float(mse.detach())
        if not math.isfinite(value) or value > DIVERGENCE_LOSS:
            partial = LossTrace(tuple(range(len(losses))), tuple(losses), None)
            raise TrainingDivergence(f"loss {value:.3e} at step {k} exceeded divergence limit", partial)
        losses.append(value)
        if record_residuals:
            residuals.append(r.detach().numpy().copy())
        if k == steps:
            break
        (g,) = torch.autograd.grad(0.5 * mse, theta)
        theta = (theta.detach() - eta * g).detach()
    trace = LossTrace(tuple(range(steps + 1)), tuple(losses), net.with_flat(theta.detach().numpy()))
    if record_residuals:
        return trace, residuals
    return trace


def fit_to_tolerance(net: ToyNetwork, data, tol: float = 1e-8, max_nfev: int = 2000):
    """Drive the MSE below ``tol`` with a trust-region least-squares solver.

    Used where only the converged point matters (Hessian checks). Returns the
    fitted network and its final MSE; raises ``NumericalError`` if ``tol`` is
    not reached.
    """
    X, y = as_dataset(data)
    X = _check_inputs(net, X)
    fn = model_function(net.spec)
    Xt, yt = as_tensor(X), as_tensor(y)
    jac_fn = jacrev(fn)

    def resid(theta):
        with torch.no_grad():
            return (fn(as_tensor(theta), Xt) - yt).numpy()

    def jac(theta):
        return jac_fn(as_tensor(theta), Xt).numpy()

    sol = least_squares(
        resid, net.flat(), jac=jac, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev
    )
    fitted = net.with_flat(sol.x)
    mse = float(np.mean(resid(sol.x) ** 2))
    if not mse < tol:
        raise NumericalError(f"least-squares fit stalled at MSE {mse:.3e} (tol {tol:.1e})")
    return fitted, mse


@dataclass(frozen=True)
class DiagnosticsReport:
    """Empirical analogues of the smoothness/boundedness/stability constants."""

    max_abs_loss: float
    max_input_norm: float
    min_grad_norm: float
    layer_norm_scale_ratio: tuple[float, float] | None
    max_softmax_row_norm: float | None

    def to_dict(self) -> dict:
        return {
            "max_abs_loss": self.max_abs_loss,
            "max_input_norm": self.max_input_norm,
            "min_grad_norm": self.min_grad_norm,
            "layer_norm_scale_ratio": None
            if self.layer_norm_scale_ratio is None
            else list(self.layer_norm_scale_ratio),
            "max_softmax_row_norm": self.max_softmax_row_norm,
        }


def assumption_diagnostics(net: ToyNetwork, data) -> DiagnosticsReport:
    X, y = as_dataset(data)
    X = _check_inputs(net, X)
    r = forward_batch(net, X) - y
    grads = np.linalg.norm(jacobian(net, X), axis=1)
    ln_ratio = softmax_norm = None
    if net.spec.architecture is Architecture.TOY_ATTENTION:
        taps: dict = {}
        with torch.no_grad():
            _forward_batch(net.spec, as_tensor(net.flat()), as_tensor(X), taps)
        ratios = np.concatenate(
            [
                (torch.linalg.vector_norm(o, dim=-1) / torch.linalg.vector_norm(i, dim=-1)).numpy().ravel()
                for i, o in zip(taps["ln_in"], taps["ln_out"])
            ]
        )
        ln_ratio = (float(ratios.min()), float(ratios.max()))
        softmax_norm = float(taps["attention"].abs().sum(dim=-1).max())
    return DiagnosticsReport(
        max_abs_loss=float(np.max(0.5 * r**2)),
        max_input_norm=float(np.max(np.linalg.norm(X, axis=1))),
        min_grad_norm=float(grads.min()),
        layer_norm_scale_ratio=ln_ratio,
        max_softmax_row_norm=softmax_norm,
    )


def stack_inputs(inputs: Sequence) -> np.ndarray:
    return np.array([np.asarray(x, dtype=np.float64).ravel() for x in inputs])
