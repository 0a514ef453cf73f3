"""Command-line front end: ``diversim <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

from diversim import __version__
from diversim.bench import VARIANTS, get_benchmark
from diversim.coproc import CoProcessor, DiversityConfig
from diversim.errors import ExecutionError, IRSyntaxError
from diversim.harness import (
    ExperimentConfig,
    NoiseModel,
    compare_solutions,
    run_experiment,
    sweep_dl,
    table_csv,
)
from diversim.ir import parse_program, print_program
from diversim.leakage import TimingSamples, capacity_from_samples
from diversim.machine import CostModel, execute
from diversim.transforms import PASSES

SWEEP_COLUMNS = ("dl", "capacity_bits", "mean_cycles", "converged", "error")
COMPARE_COLUMNS = ("label", "variant", "dl", "capacity_bits", "mean_cycles", "capacity_reduction_percent", "overhead_percent")


def _int(text: str) -> int:
    """Integer in any Python literal base (``0x9D2B``, ``0b101``, ``42``)."""
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def _noise(text: str) -> NoiseModel:
    try:
        return NoiseModel.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ops(text: str) -> tuple[str, ...]:
    return tuple(op for op in text.split(",") if op)


def _dls(text: str) -> list[int]:
    """``0-7`` or ``0,2,5``."""
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x]


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _add_experiment_flags(p: argparse.ArgumentParser, variant: bool = True) -> None:
    p.add_argument("--benchmark", required=True, choices=sorted(VARIANTS))
    if variant:
        p.add_argument("--variant", required=True)
    p.add_argument("--dl", type=int, default=0, help="diversification level (default 0)")
    p.add_argument("--seed", type=_int, default=1, help="master seed (default 1)")
    p.add_argument("--samples", type=int, default=1000, help="samples per key (default 1000)")
    p.add_argument("--noise", type=_noise, default=NoiseModel(), help="bare | os | os:<mean>")
    p.add_argument("--keys", type=_int, nargs=2, metavar=("K0", "K1"), help="secret key pair")
    p.add_argument("--public", type=_int, nargs="+", metavar="N", help="public arguments")
    p.add_argument("--ops", type=_ops, help="comma-separated opcodes to diversify (Pr variants)")
    p.add_argument("--constant-costs", action="store_true", help="turn off operand-dependent mul/div costs")
    p.add_argument("--workers", type=int, default=1, help="worker processes for trials")
    p.add_argument("--out", help="write output here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def _config(args, variant: str | None = None) -> ExperimentConfig:
    return ExperimentConfig(
        benchmark=args.benchmark,
        variant=variant or args.variant,
        key_pair=tuple(args.keys) if args.keys else None,
        public_args=tuple(args.public) if args.public else None,
        samples_per_key=args.samples,
        dl=args.dl,
        master_seed=args.seed,
        noise=args.noise,
        mul_operand_dependent=not args.constant_costs,
        div_operand_dependent=not args.constant_costs,
        ops_filter=args.ops,
    )


# -- commands -------------------------------------------------------------------


def cmd_run(args) -> int:
    if args.program:
        program = parse_program(Path(args.program).read_text(encoding="utf-8"))
        call_args = args.args or []
    else:
        if not (args.benchmark and args.variant and args.key is not None):
            raise ValueError("give an IR file or --benchmark, --variant and --key")
        spec = get_benchmark(args.benchmark, args.variant, args.ops)
        program = spec.program
        call_args = spec.args_for(args.key, args.args)
    cost = CostModel(mul_operand_dependent=not args.constant_costs, div_operand_dependent=not args.constant_costs)
    coproc = CoProcessor(DiversityConfig(args.dl, args.seed))
    res = execute(program, call_args, cost, coproc)
    out = {
        "return_value": res.return_value,
        "total_cycles": res.total_cycles,
        "instruction_count": res.instruction_count,
        "ci_calls": coproc.calls,
        "ci_stall_cycles": coproc.stall_cycles,
    }
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    return 0


def cmd_transform(args) -> int:
    program = parse_program(Path(args.program).read_text(encoding="utf-8"))
    fn = PASSES[args.pass_name]
    if args.pass_name == "diversify":
        if not args.ops:
            raise ValueError("diversify needs --ops")
        result, report = fn(program, args.ops)
    else:
        result, report = fn(program)
    _emit(print_program(result), args.out)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    else:
        print(json.dumps(report.to_dict()), file=sys.stderr)
    return 0


def cmd_experiment(args) -> int:
    config = _config(args)
    baseline = None
    if args.baseline:
        baseline = run_experiment(_config(args, "BL"), workers=args.workers)
    report = run_experiment(config, baseline, workers=args.workers)
    if args.samples_out:
        Path(args.samples_out).write_text(report.samples_csv(), encoding="utf-8")
    _emit(report.histogram_csv() if args.format == "csv" else report.to_json(), args.out)
    return 0


def cmd_sweep(args) -> int:
    table = sweep_dl(_config(args), args.dls, workers=args.workers)
    if args.format == "csv":
        _emit(table_csv(table["rows"], SWEEP_COLUMNS), args.out)
    else:
        _emit(json.dumps(table, indent=2) + "\n", args.out)
    return 0


def cmd_compare(args) -> int:
    variants = args.variants or list(VARIANTS[args.benchmark])
    if "BL" not in variants:
        variants = ["BL", *variants]
    # the diversification level only matters for the Pr variants
    configs = {}
    for v in variants:
        cfg = _config(args, v)
        if not v.startswith("Pr"):
            cfg = replace(cfg, dl=0, ops_filter=None)
        configs[v] = cfg
    table = compare_solutions(args.benchmark, configs, workers=args.workers)
    if args.format == "csv":
        _emit(table_csv(table["rows"], COMPARE_COLUMNS), args.out)
    else:
        _emit(json.dumps(table, indent=2) + "\n", args.out)
    return 0


def read_samples_csv(path: str) -> TimingSamples:
    """Read ``label,cycles`` samples or a ``label,cycles,count`` histogram."""
    samples: dict[str, list[int]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"label", "cycles"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected a header with label,cycles[,count]")
        weighted = "count" in reader.fieldnames
        for row in reader:
            n = int(row["count"]) if weighted else 1
            samples[row["label"]].extend([int(row["cycles"])] * n)
    return TimingSamples.from_mapping(samples)


def cmd_capacity(args) -> int:
    result = capacity_from_samples(read_samples_csv(args.samples_file))
    _emit(json.dumps(result.to_dict(), indent=2) + "\n", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diversim", description="Timing-leakage workbench for latency diversification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one program once and report its cycles")
    p.add_argument("program", nargs="?", help="IR file (or use --benchmark/--variant/--key)")
    p.add_argument("--args", type=_int, nargs="*", help="entry arguments (public arguments with --benchmark)")
    p.add_argument("--benchmark", choices=sorted(VARIANTS))
    p.add_argument("--variant")
    p.add_argument("--key", type=_int)
    p.add_argument("--ops", type=_ops)
    p.add_argument("--dl", type=int, default=0)
    p.add_argument("--seed", type=_int, default=1, help="co-processor seed")
    p.add_argument("--constant-costs", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("transform", help="apply a compiler pass to an IR file")
    p.add_argument("program")
    p.add_argument("--pass", dest="pass_name", required=True, choices=sorted(PASSES))
    p.add_argument("--ops", type=_ops, help="opcodes for diversify, e.g. mul,rem")
    p.add_argument("--out", help="write transformed IR here")
    p.add_argument("--report", help="write the pass report (JSON) here instead of stderr")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("experiment", help="two-key distinguishing experiment")
    _add_experiment_flags(p)
    p.add_argument("--baseline", action="store_true", help="also run BL and report reduction and overhead")
    p.add_argument("--samples-out", help="write raw label,cycles samples here")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep", help="capacity and cycles across diversification levels")
    _add_experiment_flags(p)
    p.add_argument("--dls", type=_dls, default=list(range(8)), help="e.g. 0-7 or 0,2,5 (default 0-7)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="compare countermeasures against BL")
    _add_experiment_flags(p, variant=False)
    p.add_argument("--variants", nargs="+", help="variants to include (default: all)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("capacity", help="capacity of a samples or histogram CSV")
    p.add_argument("samples_file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_capacity)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IRSyntaxError as exc:
        for d in exc.diagnostics:
            print(f"error: line {d.line}, column {d.column}: {d.message}", file=sys.stderr)
        return 2
    except (ExecutionError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
