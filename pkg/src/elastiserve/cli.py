"""Command-line entry point: ``elastiserve <subcommand> ...``.

Exit codes: 0 success, 1 a verification suite failed, 2 usage, 3 bad input,
4 malformed file, 5 calibration failure, 6 infeasible SLO.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import FormatError, load_checkpoint, save_checkpoint
from .elastifier import DEFAULT_FRACTIONS, ConfigurationError
from .model import InputError
from .pipeline import (
    LabelFormatError,
    build_bundle,
    default_batches,
    dense_checkpoint,
    elastify,
    fit_scorer,
    label_dataset,
    load_labels,
    sample_tasks,
    save_labels,
)
from .planner import (
    STANDARD_SLOS,
    BundleError,
    CalibrationError,
    DecisionGrid,
    InfeasibleSloError,
    LatencyModel,
    calibrate,
    load_bundle,
    save_bundle,
)
from .runtime import DeviceClock, ElasticRuntime, WallClock
from .service import ReplayReport, TraceFormatError, TraceSpec, read_trace, render_report, replay, synth_trace, write_trace
from .training import answer_accuracy, toy_config, train_toy

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_FORMAT = 4
EXIT_CALIBRATION = 5
EXIT_INFEASIBLE = 6

LATENCY_FORMAT = "elastiserve-latency"

log = logging.getLogger("elastiserve")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _floats(text))


def _make_clock(name: str, seed: int):
    return DeviceClock(seed=seed) if name == "device" else WallClock()


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# --- subcommands -----------------------------------------------------------------

def cmd_train_toy(args) -> int:
    cfg = toy_config(n_layers=args.n_layers, n_heads=args.n_heads, head_dim=args.head_dim, d_ff=args.d_ff,
                     seed=args.seed)
    res = train_toy(cfg, steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    acc = answer_accuracy(res.model, sample_tasks(args.seed + 7919, args.eval_tasks))
    save_checkpoint(dense_checkpoint(res.model, {"train_steps": args.steps, "answer_accuracy": acc}), args.out)
    _emit({"out": str(args.out), "final_loss": res.losses[-1], "answer_accuracy": acc})
    return EXIT_OK


def cmd_elastify(args) -> int:
    model = load_checkpoint(args.model).model
    ckpt = elastify(
        model,
        default_batches(args.seed + 1, args.calibration_batches),
        default_batches(args.seed + 2, args.recovery_batches or max(1, args.adapter_steps)),
        fractions=args.fractions,
        anchor_fraction=args.anchor_fraction,
        rank=args.rank,
        adapter_steps=args.adapter_steps,
        adapter_lr=args.adapter_lr,
        validation_batches=default_batches(args.seed + 3, 2),
        seed=args.seed,
    )
    save_checkpoint(ckpt, args.out)
    _emit({"out": str(args.out), "levels": ckpt.levels.to_dict(), "anchors": sorted(ckpt.anchors.layers)})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rt = ElasticRuntime(ckpt, clock=_make_clock(args.clock, args.seed))
    lm = calibrate(rt, args.lengths, args.levels, repetitions=args.repetitions, seed=args.seed)
    Path(args.out).write_text(json.dumps(
        {"format": LATENCY_FORMAT, "clock": args.clock, "latency_model": lm.to_dict()}, indent=1, sort_keys=True))
    _emit({"out": str(args.out), "a": lm.a, "b": lm.b, "c": lm.c, "d": lm.d, "residual": lm.residual})
    return EXIT_OK


def _load_latency(path) -> tuple[LatencyModel, str]:
    try:
        body = json.loads(Path(path).read_text())
        if body.get("format") != LATENCY_FORMAT:
            raise ValueError("not a latency-model file")
        return LatencyModel.from_dict(body["latency_model"]), body.get("clock", "device")
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError, AttributeError) as exc:
        raise LabelFormatError(f"bad latency file {path}: {exc}") from exc


def cmd_label(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lm, clock = _load_latency(args.latency)
    grid = DecisionGrid(args.prompt_levels, tuple(l.fraction for l in ckpt.levels))
    rt = ElasticRuntime(ckpt, clock=_make_clock(clock, args.seed))
    scorer = fit_scorer(sample_tasks(args.seed + 1, args.scorer_tasks), seed=args.seed)
    tasks = sample_tasks(args.seed, args.n_tasks)
    examples = label_dataset(rt, scorer, lm, tasks, STANDARD_SLOS, grid, seed=args.seed)
    if not examples:
        raise InfeasibleSloError("no (task, SLO) pair admits a feasible decision")
    save_labels(args.out, examples, scorer, lm, grid, {"clock": clock, "seed": args.seed})
    _emit({"out": str(args.out), "n_examples": len(examples),
           "fallback_rate": float(np.mean([e.label.fallback for e in examples]))})
    return EXIT_OK


def cmd_train_policy(args) -> int:
    examples, scorer, lm, grid, meta = load_labels(args.labels)
    bundle = build_bundle(scorer, lm, examples, grid, seed=args.seed, meta=meta)
    save_bundle(bundle, args.out)
    _emit({"out": str(args.out), **bundle.policy.meta})
    return EXIT_OK


def cmd_synth_trace(args) -> int:
    spec = TraceSpec(n_requests=args.n, alpha=args.alpha, rate=args.rate, seed=args.seed)
    trace = synth_trace(spec)
    write_trace(trace, args.out)
    counts = [sum(r.slo_level == i for r in trace) for i in range(1, len(spec.slos) + 1)]
    _emit({"out": str(args.out), "n_requests": len(trace), "per_slo": counts})
    return EXIT_OK


def cmd_replay(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.bundle)
    clock = args.clock or bundle.meta.get("clock", "device")
    rt = ElasticRuntime(ckpt, clock=_make_clock(clock, args.seed))
    report = replay(read_trace(args.trace), rt, bundle, seed=args.seed)
    Path(args.out).write_text(json.dumps(report.to_dict(), sort_keys=True))
    print(render_report(report, "table"))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = ReplayReport.from_dict(json.loads(Path(args.report).read_text()))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise TraceFormatError(f"bad replay report: {exc}") from exc
    print(render_report(report, args.format))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    suites = ["permutation", "coupling", "zero-copy", "importance", "calibration"] if args.suite == "all" else [args.suite]
    results = {}
    for name in suites:
        if name == "permutation":
            results[name] = verify.permutation_suite(args.trials, seed=args.seed)
        elif name == "coupling":
            results[name] = verify.coupling_scan_suite(seed=args.seed)
        elif name == "importance":
            results[name] = verify.importance_suite(range(args.seed, args.seed + 5))
        elif name == "calibration":
            results[name] = verify.calibration_suite(seed=args.seed)
        elif name == "zero-copy":
            ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else verify.random_checkpoint(seed=args.seed)
            results[name] = verify.zero_copy_suite(ckpt, seed=args.seed)
    for name, res in results.items():
        print(f"{name:12s} {'PASS' if res['passed'] else 'FAIL'}")
    if args.json:
        _emit(results)
    return EXIT_OK if all(r["passed"] for r in results.values()) else EXIT_FAILED


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastiserve", description="Elastic prompt/model serving on a toy transformer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-toy", help="fit the toy transformer on the lookup task")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--steps", type=int, default=600)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--n-layers", type=int, default=2)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--head-dim", type=int, default=32)
    s.add_argument("--d-ff", type=int, default=256)
    s.add_argument("--eval-tasks", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("elastify", help="profile, reorder, build levels and fit adapters")
    s.add_argument("--model", type=Path, required=True, help="checkpoint written by train-toy")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--fractions", type=_floats, default=DEFAULT_FRACTIONS)
    s.add_argument("--anchor-fraction", type=float, default=0.0)
    s.add_argument("--rank", type=int, default=8)
    s.add_argument("--adapter-steps", type=int, default=300)
    s.add_argument("--adapter-lr", type=float, default=2e-3)
    s.add_argument("--calibration-batches", type=int, default=4)
    s.add_argument("--recovery-batches", type=int, default=None,
                   help="distinct recovery batches, cycled (default: one fresh batch per adapter step)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_elastify)

    s = sub.add_parser("calibrate", help="fit the latency model on the runtime")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--clock", choices=("device", "wall"), default="device")
    s.add_argument("--lengths", type=_ints, default=(8, 16, 32, 48))
    s.add_argument("--levels", type=_floats, default=(0.2, 0.6, 1.0))
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("label", help="self-induced labels over the decision grid")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--latency", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n-tasks", type=int, default=600)
    s.add_argument("--scorer-tasks", type=int, default=300)
    s.add_argument("--prompt-levels", type=_floats, default=DEFAULT_FRACTIONS)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_label)

    s = sub.add_parser("train-policy", help="train the decision policy and write a bundle")
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train_policy)

    s = sub.add_parser("synth-trace", help="synthesize a request trace")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("-n", "--n", type=int, default=600)
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--rate", type=float, default=1.0, help="Poisson arrivals per second")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth_trace)

    s = sub.add_parser("replay", help="serve a trace and write a replay report")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--bundle", type=Path, required=True)
    s.add_argument("--trace", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--clock", choices=("device", "wall"), default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_replay)

    s = sub.add_parser("report", help="render a replay report")
    s.add_argument("--report", type=Path, required=True)
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("verify", help="run the structural, importance and calibration oracles")
    s.add_argument("--suite", choices=("all", "permutation", "coupling", "zero-copy", "importance", "calibration"), default="all")
    s.add_argument("--checkpoint", type=Path, default=None, help="checkpoint for the zero-copy suite")
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", action="store_true", help="also print the full measurements")
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except InfeasibleSloError as exc:
        code, msg = EXIT_INFEASIBLE, f"infeasible SLO: {exc}"
    except CalibrationError as exc:
        code, msg = EXIT_CALIBRATION, f"calibration failed: {exc}"
    except (FormatError, BundleError, TraceFormatError, LabelFormatError) as exc:
        code, msg = EXIT_FORMAT, f"format error: {exc}"
    except (InputError, ConfigurationError, FileNotFoundError, ValueError) as exc:
        code, msg = EXIT_INPUT, f"input error: {exc}"
    print(f"elastiserve: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
