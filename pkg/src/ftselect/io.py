"""Curve files and report serialization.

Every JSON report is an envelope ``{"schema_version", "type", "data"}`` with
fixed key order. Reals are written with 17 significant digits, so
serialize -> parse -> serialize is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from enum import Enum
from typing import Any, Callable

import numpy as np

from .bench import PoolGenSpec, SweepCell, SweepTable
from .bounds import BoundReport
from .config import RunConfig
from .errors import ValidationError
from .metrics import CostBreakdown, CostMethod, MetricsReport, SelectionScores
from .ntk import DiagnosticsReport, KernelMatrix
from .scaling import FitResult, KernelF, LossCurve, LossObservation, RectifiedParams, SurrogateF
from .selection import BreakReason, EstimatorKind, Polarity, Ranking, SelectionReport, TraceEntry

SCHEMA_VERSION = 1
CURVE_HEADER = ("model_id", "dataset_size", "test_loss", "steps", "seed")


class Format(str, Enum):
    JSON = "json"
    CSV = "csv"


# --------------------------------------------------------------------------- canonical JSON


def format_real(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = "%.17g" % x
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1))
    close = "\n" + " " * (indent * level)
    if obj is None or isinstance(obj, (bool, str)):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_real(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{" + pad + ("," + pad).join(items) + close + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # flat numeric rows stay on one line
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level) for v in obj) + "]"
        return "[" + pad + ("," + pad).join(_encode(v, indent, level + 1) for v in obj) + close + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(tree: Any) -> bytes:
    return (_encode(tree, 2, 0) + "\n").encode()


def loads(data: bytes | str) -> Any:
    text = data.decode() if isinstance(data, bytes) else data
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"line {exc.lineno}: malformed JSON: {exc.msg}") from exc


# --------------------------------------------------------------------------- to / from trees


def _opt(x, fn):
    return None if x is None else fn(x)


def params_to_tree(p: RectifiedParams) -> dict:
    if isinstance(p.f_mode, KernelF):
        f_mode = {
            "kind": "kernel",
            "eta": p.f_mode.eta,
            "residual": [float(v) for v in p.f_mode.residual],
            "kernel": [[float(v) for v in row] for row in p.f_mode.kernel.entries],
        }
    else:
        f_mode = {"kind": "surrogate", "F0": p.f_mode.F0, "kappa": p.f_mode.kappa}
    return {"B": p.B, "E": p.E, "beta": p.beta, "t": p.t, "f_mode": f_mode}


def params_from_tree(d: dict) -> RectifiedParams:
    fm = d["f_mode"]
    if fm["kind"] == "kernel":
        f_mode = KernelF(KernelMatrix.from_matrix(np.array(fm["kernel"], dtype=np.float64)), np.array(fm["residual"]), fm["eta"])
    elif fm["kind"] == "surrogate":
        f_mode = SurrogateF(fm["F0"], fm["kappa"])
    else:
        raise ValidationError(f"unknown f_mode kind {fm['kind']!r}")
    return RectifiedParams(d["B"], d["E"], d["beta"], d["t"], f_mode)


def _curves_to_tree(curves) -> list:
    return [
        {
            "model_id": c.model_id,
            "seed": c.seed,
            "observations": [
                {"dataset_size": o.dataset_size, "test_loss": o.test_loss, "steps": o.steps} for o in c.observations
            ],
        }
        for c in curves
    ]


def _curves_from_tree(d: list) -> list[LossCurve]:
    return [
        LossCurve(
            c["model_id"],
            tuple(LossObservation(o["dataset_size"], o["test_loss"], o["steps"]) for o in c["observations"]),
            c["seed"],
        )
        for c in d
    ]


def _fit_to_tree(f: FitResult) -> dict:
    return {
        "params": params_to_tree(f.params),
        "objective_value": f.objective_value,
        "residual_std": f.residual_std,
        "converged": f.converged,
        "n_restarts_used": f.n_restarts_used,
        "degenerate": f.degenerate,
    }


def _fit_from_tree(d: dict) -> FitResult:
    return FitResult(
        params_from_tree(d["params"]), d["objective_value"], d["residual_std"], d["converged"],
        d["n_restarts_used"], d["degenerate"],
    )


def _selection_to_tree(r: SelectionReport) -> dict:
    return {
        "model_id": r.model_id,
        "r": r.predicted_score,
        "s": r.data_fraction,
        "a": r.iterations,
        "break_reason": r.break_reason.value,
        "full_size": r.full_size,
        "estimator_kind": r.estimator_kind.value,
        "trace": [
            {"size": e.size, "loss": e.loss, "signal": e.signal, "deviations": _opt(e.deviations, list)}
            for e in r.trace
        ],
    }


def _selection_from_tree(d: dict) -> SelectionReport:
    trace = tuple(
        TraceEntry(e["size"], e["loss"], e["signal"], _opt(e["deviations"], tuple)) for e in d["trace"]
    )
    return SelectionReport(
        model_id=d["model_id"],
        predicted_score=d["r"],
        iterations=d["a"],
        data_fraction=d["s"],
        break_reason=BreakReason(d["break_reason"]),
        trace=trace,
        full_size=d["full_size"],
        estimator_kind=EstimatorKind(d["estimator_kind"]),
    )


def _ranking_to_tree(r: Ranking) -> dict:
    return {"polarity": r.polarity.value, "entries": [{"model_id": m, "score": s} for m, s in r.entries]}


def _ranking_from_tree(d: dict) -> Ranking:
    return Ranking(Polarity(d["polarity"]), tuple((e["model_id"], e["score"]) for e in d["entries"]))


def _bound_to_tree(b: BoundReport) -> dict:
    return {
        "empirical_loss": b.empirical_loss,
        "h": list(b.h),
        "n": b.n,
        "C": b.C,
        "epsilon": b.epsilon,
        "xi_constant": b.xi_constant,
        "bound_value": b.bound_value,
        "term_breakdown": b.term_breakdown,
    }


def _bound_from_tree(d: dict) -> BoundReport:
    t = d["term_breakdown"]
    return BoundReport(
        d["empirical_loss"], tuple(d["h"]), d["n"], d["C"], d["epsilon"], d["xi_constant"], d["bound_value"],
        t["base"], t["hessian_term"], t["xi_term"],
    )


def _cost_to_tree(c: CostBreakdown) -> dict:
    return {"method": c.method.value, "total": c.total, "per_model": list(c.per_model)}


def _cost_from_tree(d: dict) -> CostBreakdown:
    return CostBreakdown(CostMethod(d["method"]), d["total"], tuple(d["per_model"]))


_CELL_FIELDS = ("gamma", "tau", "learning_rate", "batch_size", "pearson", "relative_accuracy", "error")


def _sweep_to_tree(t: SweepTable) -> dict:
    return {"cells": [{k: getattr(c, k) for k in _CELL_FIELDS} for c in t.cells]}


def _sweep_from_tree(d: dict) -> SweepTable:
    return SweepTable(tuple(SweepCell(**{k: c[k] for k in _CELL_FIELDS}) for c in d["cells"]))


def _plain(cls, fields):
    return (lambda o: {k: getattr(o, k) for k in fields}, lambda d: cls(**{k: d[k] for k in fields}))


def _diag_to_tree(r: DiagnosticsReport) -> dict:
    return r.to_dict()


def _diag_from_tree(d: dict) -> DiagnosticsReport:
    d = dict(d)
    if d.get("layer_norm_scale_ratio") is not None:
        d["layer_norm_scale_ratio"] = tuple(d["layer_norm_scale_ratio"])
    return DiagnosticsReport(**d)


def _pool_spec_from_tree(d: dict) -> PoolGenSpec:
    d = dict(d)
    for k in ("B_range", "E_range", "beta_range", "F_range", "param_count_range"):
        if k in d:
            d[k] = tuple(d[k])
    return PoolGenSpec(**d)


_Codec = tuple[type, Callable[[Any], Any], Callable[[Any], Any]]

REPORT_TYPES: dict[str, _Codec] = {
    "curves": (list, _curves_to_tree, _curves_from_tree),
    "fit_result": (FitResult, _fit_to_tree, _fit_from_tree),
    "selection_report": (SelectionReport, _selection_to_tree, _selection_from_tree),
    "ranking": (Ranking, _ranking_to_tree, _ranking_from_tree),
    "bound_report": (BoundReport, _bound_to_tree, _bound_from_tree),
    "selection_scores": (SelectionScores, *_plain(SelectionScores, ("pearson", "relative_accuracy", "selected"))),
    "metrics": (MetricsReport, *_plain(MetricsReport, ("pearson", "relative_accuracy", "rmse", "selected", "n_models"))),
    "cost_breakdown": (CostBreakdown, _cost_to_tree, _cost_from_tree),
    "sweep_table": (SweepTable, _sweep_to_tree, _sweep_from_tree),
    "diagnostics": (DiagnosticsReport, _diag_to_tree, _diag_from_tree),
    "run_config": (RunConfig, lambda c: c.to_dict(), RunConfig.from_dict),
    "pool_spec": (PoolGenSpec, lambda s: s.to_dict(), _pool_spec_from_tree),
}


def report_type(report) -> str:
    for tag, (cls, _, _) in REPORT_TYPES.items():
        if cls is not list and isinstance(report, cls):
            return tag
    if isinstance(report, (list, tuple)) and all(isinstance(c, LossCurve) for c in report):
        return "curves"
    raise TypeError(f"no report schema for {type(report).__name__}")


def to_envelope(report) -> dict:
    tag = report_type(report)
    return {"schema_version": SCHEMA_VERSION, "type": tag, "data": REPORT_TYPES[tag][1](report)}


def write_report(report, fmt: Format | str = Format.JSON) -> bytes:
    fmt = Format(fmt)
    if fmt is Format.JSON:
        return dumps(to_envelope(report))
    return _write_csv(report)


def read_report(data: bytes | str):
    tree = loads(data)
    if not isinstance(tree, dict) or set(tree) != {"schema_version", "type", "data"}:
        raise ValidationError("not a report envelope")
    if tree["schema_version"] != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema version {tree['schema_version']}")
    if tree["type"] not in REPORT_TYPES:
        raise ValidationError(f"unknown report type {tree['type']!r}")
    return REPORT_TYPES[tree["type"]][2](tree["data"])


# --------------------------------------------------------------------------- CSV


def csv_table(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else format_real(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode()


def write_curves_csv(curves) -> bytes:
    rows = [
        (c.model_id, o.dataset_size, o.test_loss, o.steps, c.seed) for c in curves for o in c.observations
    ]
    return csv_table(CURVE_HEADER, rows)


def sweep_grid_csv(table: SweepTable, metric: str = "pearson", learning_rate=None, batch_size=None) -> bytes:
    """Rows gamma, columns tau."""
    gammas, taus, grid = table.grid(metric, learning_rate, batch_size)
    return csv_table(["gamma\\tau", *[format_real(t) for t in taus]], [[g, *row] for g, row in zip(gammas, grid)])


def _write_csv(report) -> bytes:
    tag = report_type(report)
    if tag == "curves":
        return write_curves_csv(report)
    if tag == "ranking":
        return csv_table(("rank", "model_id", "score"), [(i + 1, m, s) for i, (m, s) in enumerate(report.entries)])
    if tag in ("metrics", "selection_scores", "bound_report", "diagnostics", "fit_result"):
        tree = REPORT_TYPES[tag][1](report)
        flat = _flatten(tree)
        return csv_table(("field", "value"), flat)
    if tag == "selection_report":
        return csv_table(
            ("model_id", "size", "loss", "signal"), [(report.model_id, e.size, e.loss, e.signal) for e in report.trace]
        )
    if tag == "cost_breakdown":
        rows = [(report.method.value, i, c) for i, c in enumerate(report.per_model)]
        rows.append((report.method.value, "total", report.total))
        return csv_table(("method", "model_index", "cost"), rows)
    if tag == "sweep_table":
        return csv_table(_CELL_FIELDS, [[getattr(c, k) for k in _CELL_FIELDS] for c in report.cells])
    raise ValueError(f"{tag} has no CSV form; use JSON")


def _flatten(tree, prefix="") -> list[tuple[str, Any]]:
    out = []
    if isinstance(tree, dict):
        for k, v in tree.items():
            out += _flatten(v, f"{prefix}{k}.")
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            out += _flatten(v, f"{prefix}{i}.")
    else:
        out.append((prefix[:-1], tree))
    return out


# --------------------------------------------------------------------------- curve parsing


def _positive_int(text: str, name: str, line: int) -> int:
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"line {line}: {name} is not a number: {text!r}") from None
    if not v.is_integer() or v < 1:
        raise ValidationError(f"line {line}: {name} must be a positive integer, got {text!r}")
    return int(v)


def _record(line: int, model_id, size, loss, steps, seed) -> tuple:
    if not isinstance(model_id, str) or not model_id:
        raise ValidationError(f"line {line}: model_id must be a nonempty string")
    size = _positive_int(str(size), "dataset_size", line)
    try:
        loss = float(loss)
    except (TypeError, ValueError):
        raise ValidationError(f"line {line}: test_loss is not a number: {loss!r}") from None
    if not (loss > 0 and math.isfinite(loss)):
        raise ValidationError(f"line {line}: test_loss must be positive and finite, got {loss}")
    steps = None if steps in (None, "") else _positive_int(str(steps), "steps", line)
    if seed in (None, ""):
        seed = None
    else:
        try:
            seed = int(str(seed))
        except ValueError:
            raise ValidationError(f"line {line}: seed must be an integer, got {seed!r}") from None
    return line, model_id, size, loss, steps, seed


def _csv_records(text: str) -> list[tuple]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValidationError("line 1: empty curve file")
    if tuple(h.strip() for h in rows[0]) != CURVE_HEADER:
        raise ValidationError(f"line 1: header must be {','.join(CURVE_HEADER)}")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CURVE_HEADER):
            raise ValidationError(f"line {i}: expected {len(CURVE_HEADER)} fields, got {len(row)}")
        out.append(_record(i, *(c.strip() for c in row)))
    return out


def _json_records(text: str) -> list[tuple]:
    """Records from a JSON array (or ``{"records": [...]}``), tagged with their line numbers."""
    tree = loads(text)
    if isinstance(tree, dict) and set(tree) == {"schema_version", "type", "data"} and tree["type"] == "curves":
        curves = _curves_from_tree(tree["data"])
        return [
            (0, c.model_id, o.dataset_size, o.test_loss, o.steps, c.seed) for c in curves for o in c.observations
        ]
    start = text.find("[")
    if isinstance(tree, dict):
        if set(tree) != {"records"}:
            raise ValidationError("line 1: JSON curves must be an array of records or {\"records\": [...]}")
        start = text.find("[", text.find('"records"'))
    elif not isinstance(tree, list):
        raise ValidationError("line 1: JSON curves must be an array of records")
    decoder = json.JSONDecoder()
    out, pos = [], start + 1
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            break
        line = text.count("\n", 0, pos) + 1
        rec, pos = decoder.raw_decode(text, pos)
        if not isinstance(rec, dict):
            raise ValidationError(f"line {line}: record must be an object")
        unknown = set(rec) - set(CURVE_HEADER)
        missing = {"model_id", "dataset_size", "test_loss"} - set(rec)
        if unknown or missing:
            raise ValidationError(f"line {line}: bad record keys (unknown {sorted(unknown)}, missing {sorted(missing)})")
        out.append(_record(line, *(rec.get(k) for k in CURVE_HEADER)))
    return out


def parse_curves(data: bytes | str, fmt: Format | str = Format.CSV) -> list[LossCurve]:
    """Curves grouped by (model_id, seed), sorted by size; errors name the offending line."""
    text = data.decode() if isinstance(data, bytes) else data
    records = _csv_records(text) if Format(fmt) is Format.CSV else _json_records(text)
    seen: dict[tuple, int] = {}
    groups: dict[tuple, list] = {}
    for line, model_id, size, loss, steps, seed in records:
        key = (model_id, size, seed)
        if key in seen:
            raise ValidationError(f"line {line}: duplicate record for {key} (first at line {seen[key]})")
        seen[key] = line
        groups.setdefault((model_id, seed), []).append(LossObservation(size, loss, steps))
    ordered = sorted(groups, key=lambda k: (k[0], -1 if k[1] is None else k[1]))
    return [LossCurve(m, tuple(groups[(m, s)]), s) for m, s in ordered]


def sniff_format(path: str) -> Format:
    return Format.JSON if str(path).lower().endswith(".json") else Format.CSV


__all__ = [
    "CURVE_HEADER",
    "Format",
    "SCHEMA_VERSION",
    "csv_table",
    "format_real",
    "parse_curves",
    "read_report",
    "sweep_grid_csv",
    "write_curves_csv",
    "write_report",
]
