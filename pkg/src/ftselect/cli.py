"""Command-line entry point: ``ftselect <command> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, bench, bounds, ntk
from .config import RunConfig
from .errors import FtselectError
from .io import Format, csv_table, dumps, parse_curves, read_report, sniff_format, sweep_grid_csv, write_curves_csv, write_report
from .metrics import CostInputs, CostMethod, MethodCostSpec, method_cost, metrics_report, pareto_front
from .scaling import fit_two_phase
from .selection import Candidate, CandidatePool, RecordedCurveProvider, SelectionReport, progressive_select, rank_pool

log = logging.getLogger("ftselect")

DEFAULT_OUT = "runs"


# --------------------------------------------------------------------------- run directories


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy
    import torch

    return {
        "ftselect": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


class RunDir:
    """``<root>/<command>-<hash>/`` with a manifest; identical runs map to the same directory."""

    def __init__(self, root: str | Path, command: str, config: RunConfig, inputs: dict[str, str], argv_key: dict):
        self.inputs = {name: _sha256(p) for name, p in sorted(inputs.items()) if p is not None}
        key = json.dumps({"config": config.digest(), "inputs": self.inputs, "args": argv_key}, sort_keys=True)
        self.run_id = f"{command}-{hashlib.sha256(key.encode()).hexdigest()[:12]}"
        self.path = Path(root) / self.run_id
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.files: list[str] = []

    def write(self, name: str, payload: bytes) -> Path:
        target = self.path / name
        target.write_bytes(payload)
        self.files.append(name)
        return target

    def finish(self) -> Path:
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "config_hash": self.config.digest(),
            "config": self.config.to_dict(),
            "input_hashes": self.inputs,
            "files": sorted(self.files),
            "versions": _versions(),
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        (self.path / "manifest.json").write_bytes(dumps(manifest))
        return self.path


def _out_root(args, config: RunConfig) -> str:
    return args.out or config.output_dir or os.environ.get("LENS_OUT_DIR") or DEFAULT_OUT


def _ext(fmt: Format) -> str:
    return "json" if fmt is Format.JSON else "csv"


def _emit(args, payload: bytes) -> None:
    if not args.quiet:
        sys.stdout.write(payload.decode())


# --------------------------------------------------------------------------- commands


def _load_config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None)).with_seed(args.seed)


def cmd_fit(args) -> int:
    config = _load_config(args)
    curves = parse_curves(Path(args.curves).read_bytes(), sniff_format(args.curves))
    if args.model:
        curves = [c for c in curves if c.model_id == args.model]
        if not curves:
            raise FtselectError(f"model {args.model!r} not found in {args.curves}")
    run = RunDir(_out_root(args, config), "fit", config, {"curves": args.curves}, {"model": args.model})
    fmt = Format(args.format)
    for curve in curves:
        result = fit_two_phase(curve, config.fit)
        name = curve.model_id if curve.seed is None else f"{curve.model_id}.seed{curve.seed}"
        run.write(f"fit_{name}.{_ext(fmt)}", write_report(result, fmt))
        p = result.params
        log.info("%s: B=%.6g E=%.6g beta=%.6g F=%.6g", name, p.B, p.E, p.beta, p.F)
    print(run.finish())
    return 0


def _select_reports(pool: CandidatePool, config: RunConfig) -> list[SelectionReport]:
    s = config.selection
    return [
        progressive_select(
            c.provider, pool.D_full, s.gamma, s.tau, s.floor, config.seed,
            model_id=c.model_id, start_size=s.start_size, estimator=s.estimator,
        )
        for c in pool
    ]


def _pool_from_curves(curves, config: RunConfig) -> CandidatePool:
    sizes = {int(c.sizes[-1]) for c in curves}
    if len(sizes) != 1:
        raise FtselectError("all curves must share the same largest size (the full dataset size)")
    ids = [c.model_id if c.seed is None else f"{c.model_id}.seed{c.seed}" for c in curves]
    counts = config.cost.param_counts
    cands = tuple(
        Candidate(i, int(counts.get(i, 1)), RecordedCurveProvider(c, exact=not config.selection.interpolate))
        for i, c in zip(ids, curves)
    )
    return CandidatePool(cands, sizes.pop())


def cmd_select(args) -> int:
    config = _load_config(args)
    if args.curves:
        curves = parse_curves(Path(args.curves).read_bytes(), sniff_format(args.curves))
        pool = _pool_from_curves(curves, config)
        inputs = {"curves": args.curves}
    else:
        spec = read_report(Path(args.synthetic).read_bytes())
        if not isinstance(spec, bench.PoolGenSpec):
            raise FtselectError(f"{args.synthetic} is not a pool spec")
        pool = bench.generate_pool(spec)
        inputs = {"synthetic": args.synthetic}
    run = RunDir(_out_root(args, config), "select", config, inputs, {})
    reports = _select_reports(pool, config)
    fmt = Format(args.format)
    for r in reports:
        run.write(f"selection_{r.model_id}.json", write_report(r))
    ranking = rank_pool(reports, config.selection.polarity)
    run.write(f"ranking.{_ext(fmt)}", write_report(ranking, fmt))
    truth = pool.ground_truth
    if all(v is not None for v in truth.values()):
        predicted = {r.model_id: r.predicted_score for r in reports}
        loss_like = config.selection.polarity.value == "loss"
        run.write(f"metrics.{_ext(fmt)}", write_report(metrics_report(predicted, truth, loss_like), fmt))
    _emit(args, write_report(ranking, fmt))
    print(run.finish(), file=sys.stderr)
    return 0


def cmd_rank(args) -> int:
    reports = []
    for path in sorted(Path(args.reports).glob("*.json")):
        try:
            obj = read_report(path.read_bytes())
        except FtselectError:
            continue
        if isinstance(obj, SelectionReport):
            reports.append(obj)
    if not reports:
        raise FtselectError(f"no selection reports in {args.reports}")
    _emit(args, write_report(rank_pool(reports, args.polarity), args.format))
    return 0


def _load_network(path: str) -> ntk.ToyNetwork:
    raw = json.loads(Path(path).read_text())
    known = {"architecture", "layer_dims", "activation", "init_scale", "seed", "weights", "pretrained_weights"}
    unknown = set(raw) - known
    if unknown:
        raise FtselectError(f"unknown key(s) in network file: {sorted(unknown)}")
    spec = ntk.NetworkSpec(
        ntk.Architecture(raw["architecture"]),
        tuple(raw["layer_dims"]),
        ntk.Activation(raw.get("activation", "tanh")),
        float(raw.get("init_scale", 1.0)),
        int(raw.get("seed", 0)),
    )
    net = ntk.build_toy_network(spec)
    if "pretrained_weights" in raw:
        net = ntk.ToyNetwork(spec, tuple(np.array(w, dtype=np.float64) for w in raw["pretrained_weights"]), None).snapshot()
    if "weights" in raw:
        net = ntk.ToyNetwork(spec, tuple(np.array(w, dtype=np.float64) for w in raw["weights"]), net.pretrained_weights)
    return net


def _load_data(path: str):
    if sniff_format(path) is Format.JSON:
        raw = json.loads(Path(path).read_text())
        return np.array(raw["X"], dtype=np.float64), np.array(raw["y"], dtype=np.float64)
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, :-1], arr[:, -1]


def cmd_bound(args) -> int:
    config = _load_config(args)
    net = _load_network(args.netspec)
    X, y = _load_data(args.data)
    raw = json.loads(Path(args.netspec).read_text())
    if "weights" not in raw:
        net = ntk.train_sgd(net, (X, y), config.bound.eta, config.bound.steps).network
    losses = 0.5 * (ntk.forward_batch(net, X) - y) ** 2
    C = config.bound.loss_bound if config.bound.loss_bound is not None else float(losses.max())
    h = bounds.hessian_terms(net, (X, y), config.bound.slack)
    report = bounds.evaluate_pac_bound(float(losses.mean()), h, len(y), C, config.bound.epsilon, config.bound.xi_constant)
    payload = write_report(report, args.format)
    if args.out:
        run = RunDir(args.out, "bound", config, {"netspec": args.netspec, "data": args.data}, {})
        run.write(f"bound.{_ext(Format(args.format))}", payload)
        run.finish()
    _emit(args, payload)
    return 0


def cmd_simulate(args) -> int:
    config = _load_config(args)
    raw = json.loads(Path(args.spec).read_text())
    kind = raw.pop("kind", "pool")
    run = RunDir(_out_root(args, config), "simulate", config, {"spec": args.spec}, {})
    if kind == "pool":
        spec = bench.PoolGenSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
        pool = bench.generate_pool(spec)
        run.write("pool.json", write_report(spec))
        run.write("ground_truth.json", dumps(pool.ground_truth))
        sizes = [pool.D_full >> k for k in range(int(np.log2(pool.D_full)) - 4, -1, -1)]
        curves = [
            bench.generate_curve(bench.CurveGenSpec(c.provider.params, tuple(sizes), c.provider.log_noise_sigma,
                                                    c.provider.seed, c.model_id))
            for c in pool
        ]
    elif kind == "curve":
        from .io import params_from_tree

        curves = [
            bench.generate_curve(
                bench.CurveGenSpec(
                    params_from_tree(raw["true_params"]),
                    tuple(raw.get("sizes", bench.DEFAULT_SIZES)),
                    float(raw.get("log_noise_sigma", 0.0)),
                    int(raw.get("seed", config.seed)),
                    raw.get("model_id", "synthetic"),
                )
            )
        ]
    else:
        raise FtselectError(f"unknown simulate kind {kind!r} (pool or curve)")
    run.write("curves.csv", write_curves_csv(curves))
    print(run.finish())
    return 0


def cmd_cost(args) -> int:
    raw = json.loads(Path(args.inputs).read_text())
    models = raw["models"]
    pool = tuple(
        CostInputs(m["epochs"], m["hp_rounds"], m["param_count"], m["dataset_size"]) for m in models
    )
    methods = [CostMethod(m) for m in args.method] if args.method else list(CostMethod)
    rows, breakdowns = [], {}
    for method in methods:
        spec = MethodCostSpec(
            method,
            pool,
            fraction=raw.get("fraction"),
            executed_sizes=tuple(tuple(m["executed_sizes"]) for m in models) if method is CostMethod.PROGRESSIVE else None,
        )
        breakdowns[method] = method_cost(spec)
        rows.append((method.value, breakdowns[method].total))
    perf = raw.get("performance", {})
    points = [(breakdowns[m].total, float(perf[m.value])) for m in methods if m.value in perf]
    fmt = Format(args.format)
    if fmt is Format.JSON:
        body = {
            "costs": {m.value: b.total for m, b in breakdowns.items()},
            "pareto": [list(p) for p in pareto_front(points)] if points else [],
        }
        payload = dumps(body)
    else:
        payload = csv_table(("method", "cost"), rows)
        if points:
            payload += b"\n" + csv_table(("cost", "performance"), pareto_front(points))
    _emit(args, payload)
    if args.out:
        config = _load_config(args)
        run = RunDir(args.out, "cost", config, {"inputs": args.inputs}, {"method": args.method})
        run.write(f"cost.{_ext(fmt)}", payload)
        if points:
            run.write("pareto.csv", csv_table(("cost", "performance"), pareto_front(points)))
        run.finish()
    return 0


def _load_scores(path: str) -> dict[str, float]:
    if sniff_format(path) is Format.JSON:
        raw = json.loads(Path(path).read_text())
        return {str(k): float(v) for k, v in raw.items()}
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    out = {}
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise FtselectError(f"{path}: line {i}: expected model_id,value")
        out[row[0]] = float(row[1])
    return out


def cmd_metrics(args) -> int:
    report = metrics_report(_load_scores(args.pred), _load_scores(args.actual), args.polarity == "loss")
    _emit(args, write_report(report, args.format))
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    spec = read_report(Path(args.pool).read_bytes())
    if not isinstance(spec, bench.PoolGenSpec):
        raise FtselectError(f"{args.pool} is not a pool spec")
    gammas = [int(v) for v in args.gamma.split(",")]
    taus = [float(v) for v in args.tau.split(",")]
    table = bench.ablation_sweep(bench.generate_pool(spec), gammas, taus, seed=config.seed)
    run = RunDir(_out_root(args, config), "sweep", config, {"pool": args.pool}, {"gamma": gammas, "tau": taus})
    run.write("sweep.json", write_report(table))
    run.write("sweep_pearson.csv", sweep_grid_csv(table, "pearson"))
    run.write("sweep_relacc.csv", sweep_grid_csv(table, "relative_accuracy"))
    _emit(args, sweep_grid_csv(table, "pearson"))
    print(run.finish(), file=sys.stderr)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    def globals_(parser, suppress):
        # Accepted before or after the subcommand; the subcommand copy must not reset the default.
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(None), help="override the config seed")
        parser.add_argument("--format", choices=[f.value for f in Format], default=d("json"))
        parser.add_argument("--quiet", action="store_true", default=d(False))

    common = argparse.ArgumentParser(add_help=False)
    globals_(common, suppress=True)
    p = argparse.ArgumentParser(prog="ftselect", description=__doc__)
    globals_(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit", parents=[common], help="fit the rectified law to loss curves")
    sp.add_argument("--curves", required=True)
    sp.add_argument("--config")
    sp.add_argument("--model")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("select", parents=[common], help="progressive-halving selection over a pool")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--curves")
    src.add_argument("--synthetic", metavar="POOLSPEC")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("rank", parents=[common], help="rank saved selection reports")
    sp.add_argument("--reports", required=True)
    sp.add_argument("--polarity", choices=["loss", "score"], default="loss")
    sp.set_defaults(func=cmd_rank)

    sp = sub.add_parser("bound", parents=[common], help="PAC-Bayes bound for a toy network")
    sp.add_argument("--netspec", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("simulate", parents=[common], help="generate synthetic curves or pools")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("cost", parents=[common], help="training-cost table and Pareto front")
    sp.add_argument("--method", action="append", choices=[m.value for m in CostMethod])
    sp.add_argument("--inputs", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("metrics", parents=[common], help="PearCorr / RelAcc / RMSE")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--actual", required=True)
    sp.add_argument("--polarity", choices=["loss", "score"], default="loss")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("sweep", parents=[common], help="gamma/tau ablation grid")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--gamma", required=True, help="comma-separated list")
    sp.add_argument("--tau", required=True, help="comma-separated list")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (FtselectError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
