"""Ground-truth generators and experiment harnesses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import ntk
from .errors import TrainingDivergence, ValidationError
from .metrics import UndefinedCorrelation, score_selection
from .ntk import NetworkSpec, ToyNetwork
from .scaling import KernelF, LossCurve, LossObservation, RectifiedParams, SurrogateF, predict_rectified
from .selection import Candidate, CandidatePool, EstimatorKind, SyntheticProvider, progressive_select

DEFAULT_SIZES = tuple(2**k for k in range(5, 15))


# --------------------------------------------------------------------------- synthetic curves


def size_noise(seed: int, size: int) -> float:
    """Standard normal draw keyed on ``(seed, size)``; shared with :class:`SyntheticProvider`."""
    return float(np.random.default_rng([seed, int(size)]).normal())


@dataclass(frozen=True)
class CurveGenSpec:
    true_params: RectifiedParams
    sizes: tuple[int, ...] = DEFAULT_SIZES
    log_noise_sigma: float = 0.0
    seed: int = 0
    model_id: str = "synthetic"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if any(b <= a for a, b in zip(sizes, sizes[1:])) or not sizes or sizes[0] < 1:
            raise ValidationError("sizes must be positive and strictly increasing")
        if self.log_noise_sigma < 0:
            raise ValidationError("log_noise_sigma must be nonnegative")
        object.__setattr__(self, "sizes", sizes)


def generate_curve(spec: CurveGenSpec) -> LossCurve:
    clean = predict_rectified(spec.true_params, np.array(spec.sizes, dtype=np.float64))
    if spec.log_noise_sigma > 0:
        eps = np.array([size_noise(spec.seed, s) for s in spec.sizes])
        clean = clean * np.exp(spec.log_noise_sigma * eps)
    return LossCurve.from_arrays(spec.model_id, spec.sizes, clean)


@dataclass(frozen=True)
class PoolGenSpec:
    n_models: int = 20
    B_range: tuple[float, float] = (1.0, 20.0)
    E_range: tuple[float, float] = (0.5, 2.0)
    beta_range: tuple[float, float] = (0.3, 0.7)
    F_range: tuple[float, float] = (10.0, 1000.0)
    D_full: int = 2**14
    log_noise_sigma: float = 0.01
    param_count_range: tuple[int, int] = (10**8, 10**10)
    seed: int = 0

    def __post_init__(self):
        if self.n_models < 2:
            raise ValidationError("n_models must be >= 2")
        ranges = (self.B_range, self.E_range, self.beta_range, self.F_range)
        for lo, hi in ranges:
            if not 0 < lo <= hi:
                raise ValidationError(f"invalid parameter range ({lo}, {hi})")
        if all(lo == hi for lo, hi in ranges):
            raise ValidationError("parameter ranges are degenerate: every model would be identical")

    def to_dict(self) -> dict:
        return {
            "n_models": self.n_models,
            "B_range": list(self.B_range),
            "E_range": list(self.E_range),
            "beta_range": list(self.beta_range),
            "F_range": list(self.F_range),
            "D_full": self.D_full,
            "log_noise_sigma": self.log_noise_sigma,
            "param_count_range": list(self.param_count_range),
            "seed": self.seed,
        }


def _log_uniform(rng, lo, hi):
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def generate_pool(spec: PoolGenSpec) -> CandidatePool:
    """Candidates with log-uniform (B, E, F), uniform beta and synthetic providers."""
    rng = np.random.default_rng(spec.seed)
    candidates = []
    width = len(str(spec.n_models - 1))
    for i in range(spec.n_models):
        params = RectifiedParams(
            B=_log_uniform(rng, *spec.B_range),
            E=_log_uniform(rng, *spec.E_range),
            beta=rng.uniform(*spec.beta_range),
            t=0.0,
            f_mode=SurrogateF(_log_uniform(rng, *spec.F_range), 0.0),
        )
        n_params = int(round(_log_uniform(rng, *spec.param_count_range)))
        provider = SyntheticProvider(params, spec.log_noise_sigma, seed=spec.seed * 100_003 + i)
        candidates.append(
            Candidate(f"m{i:0{width}d}", n_params, provider, predict_rectified(params, spec.D_full))
        )
    return CandidatePool(tuple(candidates), spec.D_full, meta={"spec": spec})


# --------------------------------------------------------------------------- toy regression tasks


@dataclass(frozen=True)
class TaskData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    X_source: np.ndarray
    y_source: np.ndarray


@dataclass(frozen=True)
class RegressionTask:
    """Teacher-student regression with a related source task for pre-training.

    The target teacher is a random tanh network; the source teacher perturbs
    its weights by ``source_shift``. ``test_fraction`` of the generated target
    samples is held out.
    """

    input_dim: int = 4
    capacity: int = 2**12
    test_fraction: float = 0.2
    n_source: int = 256
    noise: float = 0.1
    teacher_width: int = 16
    teacher_seed: int = 0
    source_shift: float = 0.7

    def _teacher(self, shift_rng=None):
        rng = np.random.default_rng(self.teacher_seed)
        W1 = rng.standard_normal((self.teacher_width, self.input_dim))
        w2 = rng.standard_normal(self.teacher_width) / math.sqrt(self.teacher_width)
        if shift_rng is not None:
            W1 = W1 + self.source_shift * shift_rng.standard_normal(W1.shape)
            w2 = w2 + self.source_shift * shift_rng.standard_normal(w2.shape) / math.sqrt(self.teacher_width)
        return lambda X: np.tanh(X @ W1.T) @ w2

    def sample(self, seed: int = 0) -> TaskData:
        rng = np.random.default_rng([self.teacher_seed, seed])
        n_test = int(round(self.capacity * self.test_fraction / (1.0 - self.test_fraction)))
        target = self._teacher()
        source = self._teacher(np.random.default_rng([self.teacher_seed, 1]))

        def draw(n, fn):
            X = rng.standard_normal((n, self.input_dim))
            return X, fn(X) + self.noise * rng.standard_normal(n)

        X, y = draw(self.capacity + n_test, target)
        Xs, ys = draw(self.n_source, source)
        return TaskData(X[: self.capacity], y[: self.capacity], X[self.capacity :], y[self.capacity :], Xs, ys)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.5
    steps: int = 200
    pretrain_eta: float = 0.5
    pretrain_steps: int = 500
    batch_size: int | None = None


def pretrain(net_spec: NetworkSpec, data: TaskData, config: TrainConfig) -> ToyNetwork:
    """Train on the source task and snapshot the result as the pretrained weights."""
    net = ntk.build_toy_network(net_spec)
    if config.pretrain_steps > 0:
        net = ntk.train_sgd(net, (data.X_source, data.y_source), config.pretrain_eta, config.pretrain_steps).network
    return net.snapshot()


def _train_minibatch(net: ToyNetwork, X, y, eta, steps, batch_size, seed) -> ToyNetwork:
    fn = ntk.model_function(net.spec)
    Xt, yt = ntk.as_tensor(X), ntk.as_tensor(y)
    theta = ntk.as_tensor(net.flat()).clone()
    rng = np.random.default_rng(seed)
    n = len(y)
    for k in range(steps):
        idx = torch.as_tensor(rng.choice(n, size=min(batch_size, n), replace=False))
        theta.requires_grad_(True)
        r = fn(theta, Xt[idx]) - yt[idx]
        loss = 0.5 * (r**2).mean()
        if not torch.isfinite(loss) or float(loss) > ntk.DIVERGENCE_LOSS:
            raise TrainingDivergence(f"minibatch loss diverged at step {k}")
        (g,) = torch.autograd.grad(loss, theta)
        theta = (theta.detach() - eta * g).detach()
    return net.with_flat(theta.numpy())


def finetune(pretrained: ToyNetwork, X, y, config: TrainConfig, seed: int = 0) -> ToyNetwork:
    if config.steps == 0:
        return pretrained
    if config.batch_size is None or config.batch_size >= len(y):
        return ntk.train_sgd(pretrained, (X, y), config.eta, config.steps).network
    return _train_minibatch(pretrained, X, y, config.eta, config.steps, config.batch_size, seed)


def heldout_mse(net: ToyNetwork, X, y) -> float:
    return float(np.mean((ntk.forward_batch(net, X) - y) ** 2))


class ToyTrainerProvider:
    """Fine-tunes a pretrained toy network on the requested subset; returns held-out MSE."""

    def __init__(self, pretrained: ToyNetwork, data: TaskData, config: TrainConfig, seed: int = 0):
        self.pretrained = pretrained
        self.data = data
        self.config = config
        self.seed = seed

    def __call__(self, size: int, subset) -> float:
        idx = np.asarray(subset)[:size]
        net = finetune(self.pretrained, self.data.X_train[idx], self.data.y_train[idx], self.config, self.seed)
        return heldout_mse(net, self.data.X_test, self.data.y_test)


@dataclass(frozen=True)
class ToyCurve:
    curve: LossCurve
    pretrained: ToyNetwork
    data: TaskData


def toy_finetune_curve(
    net_spec: NetworkSpec,
    task: RegressionTask,
    sizes: Sequence[int] = DEFAULT_SIZES,
    train_config: TrainConfig = TrainConfig(),
    seed: int = 0,
    model_id: str = "toy",
) -> ToyCurve:
    """Test-MSE curve of a pretrained toy net fine-tuned on nested subsets."""
    sizes = sorted(int(s) for s in sizes)
    if sizes[-1] > task.capacity:
        raise ValidationError(f"size {sizes[-1]} exceeds task capacity {task.capacity}")
    data = task.sample(seed)
    pretrained = pretrain(net_spec, data, train_config)
    order = np.random.default_rng(seed).permutation(task.capacity)
    provider = ToyTrainerProvider(pretrained, data, train_config, seed)
    steps = train_config.steps if train_config.steps > 0 else None
    observations = []
    for size in sizes:
        try:
            loss = provider(size, order[:size])
        except TrainingDivergence as exc:
            partial = LossCurve(model_id, tuple(observations))
            raise TrainingDivergence(f"divergence at size {size}: {exc}", partial) from exc
        observations.append(LossObservation(size, loss, steps))
    return ToyCurve(LossCurve(model_id, tuple(observations)), pretrained, data)


def curve_kernel(toy: ToyCurve, probe_size: int = 64, eta: float | None = None, seed: int = 0) -> KernelF:
    """NTK offset for a toy curve: kernel and initial residual on a probe batch of target inputs."""
    rng = np.random.default_rng([seed, 7])
    idx = rng.choice(len(toy.data.y_train), size=min(probe_size, len(toy.data.y_train)), replace=False)
    X, y = toy.data.X_train[idx], toy.data.y_train[idx]
    kernel = ntk.compute_ntk(toy.pretrained, X)
    r0 = ntk.forward_batch(toy.pretrained, X) - y
    if eta is None:
        eta = 1.0 / max(float(kernel.eigenvalues.max()), 1e-12)
    return KernelF(kernel, r0, eta)


# --------------------------------------------------------------------------- ablation sweep


@dataclass(frozen=True)
class SweepCell:
    gamma: int
    tau: float
    learning_rate: float | None
    batch_size: int | None
    pearson: float | None
    relative_accuracy: float | None
    error: str | None = None


@dataclass(frozen=True)
class SweepTable:
    cells: tuple[SweepCell, ...]

    def grid(self, metric: str = "pearson", learning_rate=None, batch_size=None):
        """Metric grid with one row per gamma and one column per tau."""
        cells = [c for c in self.cells if c.learning_rate == learning_rate and c.batch_size == batch_size]
        gammas = sorted({c.gamma for c in cells})
        taus = sorted({c.tau for c in cells})
        lookup = {(c.gamma, c.tau): getattr(c, metric) for c in cells}
        return gammas, taus, [[lookup.get((g, t)) for t in taus] for g in gammas]

    def spread(self, metric: str = "pearson") -> float:
        vals = [getattr(c, metric) for c in self.cells if getattr(c, metric) is not None]
        return max(vals) - min(vals) if vals else math.nan


PoolSource = CandidatePool | Callable[[float | None, int | None], CandidatePool]


def evaluate_pool(pool: CandidatePool, **select_kwargs):
    reports = [progressive_select(c.provider, pool.D_full, model_id=c.model_id, **select_kwargs) for c in pool]
    predicted = {r.model_id: r.predicted_score for r in reports}
    scores = score_selection(predicted, pool.ground_truth)
    return reports, scores


def ablation_sweep(
    pool: PoolSource,
    gamma_list: Sequence[int],
    tau_list: Sequence[float],
    learning_rates: Sequence[float] | None = None,
    batch_sizes: Sequence[int] | None = None,
    seed: int = 0,
    **select_kwargs,
) -> SweepTable:
    """Full grid over (gamma, tau[, lr, batch]); each cell is an independent seeded run.

    ``pool`` is either a fixed pool or a factory ``(lr, batch) -> pool`` for
    trainer-backed candidates. Cells that fail record the error and the sweep
    continues.
    """
    if not gamma_list or not tau_list:
        raise ValueError("gamma_list and tau_list must be nonempty")
    lrs = list(learning_rates) if learning_rates else [None]
    batches = list(batch_sizes) if batch_sizes else [None]
    cells, index = [], 0
    for lr in lrs:
        for bs in batches:
            cell_pool = pool(lr, bs) if callable(pool) else pool
            for gamma in gamma_list:
                for tau in tau_list:
                    try:
                        _, sc = evaluate_pool(cell_pool, gamma=gamma, tau=tau, seed=seed + index, **select_kwargs)
                        cells.append(SweepCell(gamma, tau, lr, bs, sc.pearson, sc.relative_accuracy))
                    except (UndefinedCorrelation, ValueError, RuntimeError) as exc:
                        cells.append(SweepCell(gamma, tau, lr, bs, None, None, f"{type(exc).__name__}: {exc}"))
                    index += 1
    return SweepTable(tuple(cells))


__all__ = [
    "CurveGenSpec",
    "PoolGenSpec",
    "RegressionTask",
    "SweepCell",
    "SweepTable",
    "TaskData",
    "ToyCurve",
    "ToyTrainerProvider",
    "TrainConfig",
    "ablation_sweep",
    "curve_kernel",
    "evaluate_pool",
    "generate_curve",
    "generate_pool",
    "toy_finetune_curve",
]
