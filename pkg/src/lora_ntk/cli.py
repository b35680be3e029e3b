"""Command-line entry point.

Every subcommand writes ``<command>_trace.csv`` and ``<command>_summary.json``
into the output directory.  Exit codes: 0 pass, 2 certified failure, 1 usage
or input error.  Settings come from built-in defaults, then ``--config``,
then flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .generalization import BoundSpec, SyntheticTask, excess_risk_bound, lambda_from_bound, monte_carlo_gap, perturbation_budget
from .io import ConfigError, DatasetFormatError, ExperimentConfig, parse_config, read_dataset, write_dataset
from .landscape import TOL_GRAD, multistart, toy_instance, toy_rank1_floor
from .model import assemble_S, dual_weights, empirical_risk, random_dataset
from .optim import rank_threshold
from .prox import ConvergenceError, solve_global
from .reduction import OptimalityCertificateError, rank_reduce

logger = logging.getLogger("lora_ntk")

EXIT_PASS, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
REPRO_TOL = 1e-12
ZERO_TOL = 1e-8
FLOOR_TOL = 1e-6
DRIFT_TOL = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# config flag -> (config key, type)
_CONFIG_FLAGS = {
    "seed": int,
    "rank": int,
    "lambda": float,
    "step_size": float,
    "epochs": int,
    "batch_size": str,
    "init": str,
    "sigma_init": float,
    "noise_std": float,
    "perturb_eps": float,
    "tol_grad": float,
    "tol_hess": float,
    "rank_tol": float,
    "runs": int,
    "eta": float,
    "slack_eps": float,
    "n_pop": int,
    "out_dir": str,
}

# per-command defaults applied below the config file
_COMMAND_DEFAULTS = {
    "toy": {"lambda": 0.0, "step_size": 0.1, "epochs": 20000, "tol_grad": 1e-10, "rank": 1, "batch_size": "none"},
    "train-lora": {},
    "landscape": {"lambda": 0.05, "step_size": 2.0, "epochs": 50000, "tol_grad": 1e-10, "perturb_eps": 1e-3, "batch_size": "none"},
    "gen-bound": {"perturb_eps": 1e-3, "step_size": 0.5, "epochs": 20000, "tol_grad": 1e-8, "batch_size": "none"},
}


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value experiment config file")
    for key, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, type=typ, default=None, metavar=key.upper())
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lora-ntk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parent = _config_parent()

    p = sub.add_parser("gen-data", parents=[parent], help="write a synthetic or toy LNTK1 dataset")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--toy", choices="abc")
    p.add_argument("--blocks", default="4x4", help="comma-separated MxN block sizes")
    p.add_argument("--samples", type=int, default=8, help="N")
    p.add_argument("--outputs", type=int, default=1, help="K")
    p.add_argument("--loss", choices=["squared_error", "cross_entropy"], default="squared_error")

    p = sub.add_parser("toy", parents=[parent], help="train on a 2 x 2 toy problem")
    p.add_argument("--which", choices="abc", required=True)
    p.add_argument("--check", choices=["zero", "floor"], default="zero")

    p = sub.add_parser("train-lora", parents=[parent], help="train LoRA factors on a dataset")
    p.add_argument("--data", required=True)

    p = sub.add_parser("train-prox", parents=[parent], help="solve the nuclear-norm problem")
    p.add_argument("--data", required=True)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=200_000)

    p = sub.add_parser("reduce-rank", parents=[parent], help="convex solve followed by rank reduction")
    p.add_argument("--data", required=True)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=200_000)

    p = sub.add_parser("landscape", parents=[parent], help="multistart SOSP certification")
    p.add_argument("--data", help="dataset file; a synthetic instance is drawn when omitted")
    p.add_argument("--blocks", default="4x4")
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--outputs", type=int, default=1)
    p.add_argument("--loss", choices=["squared_error", "cross_entropy"], default="squared_error")
    p.add_argument("--lambda-rel", type=float, help="set lambda to this fraction of |grad L(0)|_2")

    p = sub.add_parser("gen-bound", parents=[parent], help="regularization weight, bound and perturbation budget")
    p.add_argument("--outputs", type=int, default=2, help="K")
    p.add_argument("--samples", type=int, default=100, help="N")
    p.add_argument("--feature-bound", type=float, default=1.0, help="R")
    p.add_argument("--nuc-true", type=float, default=1.0)
    p.add_argument("--nuc-lambda", type=float)
    p.add_argument("--lipschitz", type=float, default=math.sqrt(2.0))
    p.add_argument("--monte-carlo", type=int, default=0, metavar="TRIALS")
    p.add_argument("--sizes", default="25,100,400")
    p.add_argument("--blocks", default="4x4")
    p.add_argument("--loss", choices=["squared_error", "cross_entropy"], default="cross_entropy")

    p = sub.add_parser("report", help="print summaries, optionally re-running them")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--verify", action="store_true", help="re-run and compare final losses")
    return parser


def _parse_blocks(text: str):
    try:
        blocks = [tuple(int(x) for x in b.lower().split("x")) for b in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --blocks value {text!r}; expected e.g. 4x4,2x3") from None
    if any(len(b) != 2 for b in blocks):
        raise UsageError(f"bad --blocks value {text!r}; expected e.g. 4x4,2x3")
    return blocks


def resolve_config(args) -> ExperimentConfig:
    values = dict(_COMMAND_DEFAULTS.get(args.command, {}))
    text = ""
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
    file_cfg = parse_config(text)
    file_keys = {line.split("=", 1)[0].strip() for line in text.splitlines() if "=" in line.split("#", 1)[0]}
    merged = {k: v for k, v in values.items() if k not in file_keys}
    merged.update({k: v for k, v in file_cfg.to_dict().items() if k in file_keys})
    for key in _CONFIG_FLAGS:
        val = getattr(args, "cfg_" + key, None)
        if val is not None:
            merged[key] = val
    return parse_config("", {k: ("none" if v is None else v) for k, v in merged.items()})


class Output:
    """Collects the CSV rows and JSON summary of one command."""

    def __init__(self, command: str, out_dir, argv, cfg: ExperimentConfig | None):
        self.command = command
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.summary = {
            "command": command,
            "argv": list(argv),
            "cwd": os.getcwd(),
            "version": __version__,
            "config": None if cfg is None else cfg.to_dict(),
            "seed": None if cfg is None else cfg.seed,
        }
        self.rows = []
        self.header = None

    def trace(self, header, rows):
        self.header = list(header)
        self.rows.extend(rows)

    def finish(self, passed: bool) -> int:
        self.summary["verdict"] = "pass" if passed else "fail"
        stem = self.command.replace("-", "_")
        csv_path = self.dir / f"{stem}_trace.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header or ["epoch", "loss"])
            w.writerows(self.rows)
        json_path = self.dir / f"{stem}_summary.json"
        json_path.write_text(json.dumps(_jsonable(self.summary), indent=2, allow_nan=True) + "\n")
        self.summary_path = json_path
        return EXIT_PASS if passed else EXIT_FAIL


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _trace_rows(trace, seed=None):
    for r in trace.records:
        row = [r.epoch, repr(r.factored_risk), repr(r.regularized_risk), repr(r.grad_norm)]
        yield ([seed] if seed is not None else []) + row


_TRACE_HEADER = ["epoch", "factored_risk", "regularized_risk", "grad_norm"]


def _abs_argv(argv):
    """Make path-valued arguments absolute so a summary can be re-run from anywhere."""
    out = list(argv)
    for i, a in enumerate(out[:-1]):
        if a in ("--config", "--data", "--out"):
            out[i + 1] = str(Path(out[i + 1]).resolve())
    return out


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, out: Output) -> int:
    if args.toy:
        data = toy_instance(args.toy)
    else:
        data = random_dataset(_parse_blocks(args.blocks), args.samples, args.outputs, args.loss, seed=cfg.seed)
    write_dataset(args.out, data)
    out.summary.update(
        dataset=str(Path(args.out).resolve()),
        n_samples=data.n_samples,
        output_dim=data.output_dim,
        blocks=[list(b) for b in data.shape.blocks],
        loss=data.loss.value,
        nbytes=Path(args.out).stat().st_size,
        final_losses={"risk_at_zero": empirical_risk(np.zeros((data.shape.m, data.shape.n)), data)},
    )
    return out.finish(True)


def _multistart_traces(data, tcfg, runs):
    from .optim import train
    from dataclasses import replace

    return [train(data, replace(tcfg, seed=tcfg.seed + i)) for i in range(runs)]


def cmd_toy(args, cfg, out: Output) -> int:
    data = toy_instance(args.which)
    tcfg = cfg.train_config()
    traces = _multistart_traces(data, tcfg, cfg.runs)
    finals = [empirical_risk(t.factors.delta, data) for t in traces]
    for t in traces:
        out.trace(["seed"] + _TRACE_HEADER, _trace_rows(t, t.seed))
    out.summary.update(which=args.which, rank=cfg.rank, check=args.check, seeds=[t.seed for t in traces])
    out.summary["statuses"] = [t.status for t in traces]
    out.summary["final_losses"] = {str(t.seed): f for t, f in zip(traces, finals)}
    if args.check == "zero":
        passed = all(f < ZERO_TOL for f in finals)
        out.summary.update(threshold=ZERO_TOL)
    else:
        floor = toy_rank1_floor(args.which)
        passed = all(f >= floor - FLOOR_TOL for f in finals) and min(finals) <= floor + FLOOR_TOL
        out.summary.update(rank1_floor=floor, tolerance=FLOOR_TOL)
    out.summary["min_final"] = min(finals)
    out.summary["max_final"] = max(finals)
    return out.finish(passed)


def cmd_train_lora(args, cfg, out: Output) -> int:
    from .optim import train

    data = read_dataset(args.data)
    trace = train(data, cfg.train_config())
    out.trace(_TRACE_HEADER, _trace_rows(trace))
    fin = trace.final
    out.summary.update(
        dataset=str(Path(args.data).resolve()),
        status=trace.status,
        epochs=fin.epoch,
        step_size=trace.step_size,
        final_losses={
            "factored_risk": fin.factored_risk,
            "regularized_risk": fin.regularized_risk,
            "empirical_risk": empirical_risk(trace.factors.delta, data),
        },
        grad_norm=fin.grad_norm,
    )
    return out.finish(trace.converged)


def _solve(args, cfg, data):
    try:
        return solve_global(data, cfg.lam, tol=args.tol, max_iter=args.max_iter)
    except ConvergenceError as exc:
        logger.warning("%s", exc)
        return None


def cmd_train_prox(args, cfg, out: Output) -> int:
    from .prox import ProxConfig, _initial_step, prox_gradient

    data = read_dataset(args.data)
    res = prox_gradient(
        data, ProxConfig(lam=cfg.lam, step_size=_initial_step(data), max_iter=args.max_iter, tol=args.tol)
    )
    out.trace(["iteration", "objective"], ([i, repr(v)] for i, v in enumerate(res.trace)))
    s = np.linalg.svd(res.delta, compute_uv=False)
    out.summary.update(
        dataset=str(Path(args.data).resolve()),
        converged=res.converged,
        iterations=res.iterations,
        residual=res.residual,
        tol=args.tol,
        nuclear_norm=float(s.sum()),
        rank=int(np.sum(s > cfg.rank_tol * s[0])) if s[0] > 0 else 0,
        final_losses={"objective": res.objective, "empirical_risk": empirical_risk(res.delta, data)},
    )
    return out.finish(res.converged)


def cmd_reduce_rank(args, cfg, out: Output) -> int:
    data = read_dataset(args.data)
    res = _solve(args, cfg, data)
    if res is None:
        out.summary.update(error="convex solve did not converge")
        return out.finish(False)
    try:
        red = rank_reduce(res.delta, data, cfg.lam)
    except OptimalityCertificateError as exc:
        out.summary.update(error=str(exc), trace_value=exc.trace_value)
        return out.finish(False)
    KN = data.n_samples * data.output_dim
    rows = [[i, rk, repr(t), repr(tr), nul] for i, (rk, t, tr, nul) in enumerate(red.steps)]
    rows.append([len(red.steps), red.rank, "", "", ""])
    out.trace(["step", "rank", "t_star", "trace", "nullity"], rows)
    ok_rank = red.rank * (red.rank + 1) // 2 <= KN
    ok_drift = red.drift < DRIFT_TOL
    out.summary.update(
        dataset=str(Path(args.data).resolve()),
        prox_iterations=res.iterations,
        initial_rank=red.initial_rank,
        rank=red.rank,
        KN=KN,
        drift=red.drift,
        max_trace=red.max_trace,
        rank_ok=ok_rank,
        drift_ok=ok_drift,
        final_losses={"prox_objective": red.objective_before, "reduced_objective": red.objective_after},
    )
    return out.finish(ok_rank and ok_drift)


def cmd_landscape(args, cfg, out: Output) -> int:
    if args.data:
        data = read_dataset(args.data)
    else:
        data = random_dataset(_parse_blocks(args.blocks), args.samples, args.outputs, args.loss, seed=cfg.seed)
    K, N = data.output_dim, data.n_samples
    r = rank_threshold(K, N) if args.cfg_rank is None else cfg.rank
    lam = cfg.lam
    if args.lambda_rel is not None:
        lam = args.lambda_rel * np.linalg.norm(assemble_S(dual_weights(np.zeros((data.shape.m, data.shape.n)), data), data), 2)
    tcfg = cfg.train_config(rank=r, lam=float(lam))
    # training may stop at a tighter gradient norm than the certificate requires
    rep = multistart(data, tcfg, cfg.runs, tol_grad=max(cfg.tol_grad, TOL_GRAD),
                     tol_hess=cfg.tol_hess, rank_tol=cfg.rank_tol, keep_traces=True)
    for t in rep.traces:
        out.trace(["seed"] + _TRACE_HEADER, _trace_rows(t, t.seed))
    conv = rep.converged_runs
    deficient = bool(conv) and all(x.certificate.rank < r for x in conv)
    converged_frac = len(conv) / len(rep.runs)
    out.summary.update(rep.to_dict())
    out.summary.update(
        rank=r,
        rank_threshold=rank_threshold(K, N),
        KN=K * N,
        rank_deficient=deficient,
        converged_fraction=converged_frac,
        final_losses={str(x.seed): x.regularized_risk for x in rep.runs},
    )
    return out.finish(rep.passed and deficient and converged_frac >= 0.95)


def cmd_gen_bound(args, cfg, out: Output) -> int:
    spec = BoundSpec(args.outputs, args.feature_bound, args.samples, cfg.eta, cfg.slack_eps, args.nuc_true,
                     args.nuc_lambda, args.lipschitz)
    lam = lambda_from_bound(spec)
    budget = perturbation_budget(spec, lam) if args.nuc_lambda is not None else None
    print(f"lambda = {lam!r}")
    print(f"excess_risk_bound = {excess_risk_bound(spec)!r}")
    print(f"perturbation_budget = {budget!r}" if budget is not None else "perturbation_budget = (needs --nuc-lambda)")
    out.summary.update(lam=lam, bound=excess_risk_bound(spec), perturbation_budget=budget, spec=spec.__dict__)
    passed = True
    if args.monte_carlo:
        sizes = tuple(int(s) for s in args.sizes.split(","))
        task = SyntheticTask(_parse_blocks(args.blocks), args.outputs, R=args.feature_bound, nuc_true=args.nuc_true,
                             loss=args.loss, n_pop=cfg.n_pop, seed=cfg.seed)
        rep = monte_carlo_gap(task, sizes, args.monte_carlo, cfg.eta, cfg.slack_eps, budget_cap=cfg.perturb_eps,
                              train_config=cfg.train_config())
        out.trace(["N", "trial", "lam", "bound", "excess", "excess_se", "violated"],
                  ([t.N, t.trial, repr(t.lam), repr(t.bound), repr(t.excess), repr(t.excess_se), int(t.violated)]
                   for t in rep.trials))
        d = rep.to_dict()
        d.pop("trials")
        out.summary["monte_carlo"] = d
        out.summary["final_losses"] = {f"{t.N}/{t.trial}": t.excess for t in rep.trials}
        passed = rep.violation_rate <= rep.violation_threshold()
        print(f"violation_rate = {rep.violation_rate!r} (threshold {rep.violation_threshold()!r})")
        print(f"loglog_slope = {rep.slope!r}")
    else:
        out.trace(["key", "value"], [["lambda", repr(lam)], ["bound", repr(excess_risk_bound(spec))]])
        out.summary["final_losses"] = {"lambda": lam, "bound": excess_risk_bound(spec)}
    return out.finish(passed)


def _compare_losses(a: dict, b: dict, tol: float):
    bad = []
    for k, v in a.items():
        w = b.get(k)
        if w is None or not (abs(v - w) <= tol or (v == w)):
            bad.append((k, v, w))
    return bad


def cmd_report(args) -> int:
    status = EXIT_PASS
    for path in args.summaries:
        summary = json.loads(Path(path).read_text())
        print(f"{path}: {summary['command']} seed={summary.get('seed')} verdict={summary.get('verdict')}")
        for k, v in (summary.get("final_losses") or {}).items():
            print(f"  {k} = {v!r}")
        if summary.get("verdict") == "fail":
            status = EXIT_FAIL
        if args.verify:
            with tempfile.TemporaryDirectory() as tmp:
                argv = list(summary["argv"]) + ["--out-dir", tmp]
                if summary["command"] == "gen-data":
                    argv = _replace_arg(argv, "--out", str(Path(tmp) / "data.lntk"))
                prev = os.getcwd()
                try:
                    os.chdir(summary.get("cwd", prev))
                    main(argv)
                finally:
                    os.chdir(prev)
                stem = summary["command"].replace("-", "_")
                again = json.loads((Path(tmp) / f"{stem}_summary.json").read_text())
                if summary["command"] == "gen-data":
                    same = (Path(tmp) / "data.lntk").read_bytes() == Path(summary["dataset"]).read_bytes()
                    bad = [] if same else [("dataset bytes", "differ", "")]
                else:
                    bad = _compare_losses(summary.get("final_losses") or {}, again.get("final_losses") or {}, REPRO_TOL)
            if bad:
                status = EXIT_FAIL
                for k, v, w in bad:
                    print(f"  MISMATCH {k}: {v!r} vs {w!r}")
            else:
                print(f"  reproduced to {REPRO_TOL:g}")
    return status


def _replace_arg(argv, flag, value):
    out = list(argv)
    for i, a in enumerate(out[:-1]):
        if a == flag:
            out[i + 1] = value
    return out


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "toy": cmd_toy,
    "train-lora": cmd_train_lora,
    "train-prox": cmd_train_prox,
    "reduce-rank": cmd_reduce_rank,
    "landscape": cmd_landscape,
    "gen-bound": cmd_gen_bound,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = resolve_config(args)
        out = Output(args.command, cfg.out_dir, _abs_argv(argv), cfg)
        t0 = time.perf_counter()
        code = _COMMANDS[args.command](args, cfg, out)
        logger.info("%s finished in %.2fs with exit code %d", args.command, time.perf_counter() - t0, code)
        print(f"{args.command}: {'pass' if code == EXIT_PASS else 'fail'} ({out.summary_path})")
        return code
    except (ConfigError, DatasetFormatError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
