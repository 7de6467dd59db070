"""Run configuration: one section per module, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .scaling import FitConfig, Penalty
from .selection import EstimatorKind, Polarity


@dataclass(frozen=True)
class SelectionConfig:
    gamma: int = 3
    tau: float = 3.0
    floor: int | None = None
    polarity: Polarity = Polarity.LOSS_LIKE
    estimator: EstimatorKind = EstimatorKind.AUTO
    start_size: int | None = None
    # recorded curves: interpolate missing sizes instead of stopping
    interpolate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        object.__setattr__(self, "estimator", EstimatorKind(self.estimator))
        if self.gamma < 2:
            raise ValidationError("gamma must be >= 2")
        if self.tau < 0:
            raise ValidationError("tau must be nonnegative")


@dataclass(frozen=True)
class BoundConfig:
    epsilon: float = 0.01
    xi_constant: float = 1.0
    sigmas: tuple[float, ...] | None = None
    slack: float = 1.0
    # fine-tuning applied when the network file carries no fine-tuned weights
    eta: float = 0.1
    steps: int = 100
    loss_bound: float | None = None

    def __post_init__(self):
        if self.sigmas is not None:
            object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")


@dataclass(frozen=True)
class CostConfig:
    epochs: int = 1
    hp_rounds: int = 1
    param_counts: dict = field(default_factory=dict)
    fraction: float = 0.5


_FIT_FIELDS = {f.name for f in dataclasses.fields(FitConfig)}


@dataclass(frozen=True)
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    seed: int = 0
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ValidationError("config must be a JSON object")
        _reject_unknown("config", raw, {f.name for f in dataclasses.fields(cls)})
        sections = {}
        for name, kind in (("fit", FitConfig), ("selection", SelectionConfig), ("bound", BoundConfig), ("cost", CostConfig)):
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ValidationError(f"config section {name!r} must be an object")
            _reject_unknown(name, body, {f.name for f in dataclasses.fields(kind)})
            if kind is FitConfig and "penalty" in body:
                body = {**body, "penalty": Penalty(body["penalty"])}
            try:
                sections[name] = kind(**body)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"config section {name!r}: {exc}") from exc
        return cls(**sections, seed=int(raw.get("seed", 0)), output_dir=raw.get("output_dir"))

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(raw)

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        sel = dataclasses.asdict(self.selection)
        sel["polarity"] = self.selection.polarity.value
        sel["estimator"] = self.selection.estimator.value
        bound = dataclasses.asdict(self.bound)
        if bound["sigmas"] is not None:
            bound["sigmas"] = list(bound["sigmas"])
        return {
            "fit": self.fit.to_dict(),
            "selection": sel,
            "bound": bound,
            "cost": dataclasses.asdict(self.cost),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _reject_unknown(where: str, body: dict, allowed: set[str]) -> None:
    unknown = sorted(set(body) - allowed)
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
