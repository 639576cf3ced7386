import argparse
import sys
from pathlib import Path

from loguru import logger

from src.benchmarks import get_benchmark
from src.core.errors import ReduxionError
from src.core.interpreter import CompareReport, TensorComparison, compare, interpret, quantize_f32
from src.core.ir_parser import parse_loop_ir
from src.core.loop_ir import print_loop_ir
from src.core.repair_solver import check_tag_update
from src.core.schedule_script import run_schedule
from src.core.tile_ir import print_tile, print_tile_pseudo, translate
from src.utils.config_loader import EMIT_MODES, ORACLES, ConfigLoader
from src.utils.logging import configure_logging
from src.utils.rng import make_rng, random_inputs

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_IDENTITY = 2
EXIT_USAGE = 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as an exception so they map to the usage exit code."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = ArgumentParser(prog="reduxion", description="Schedule, verify and tensorize reduction programs.")
    parser.add_argument("command", choices=("verify", "emit", "dump"), help="What to do with the scheduled program.")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--benchmark", help="Built-in benchmark, e.g. softmax_denom or causal_attn.")
    source.add_argument("--ir", dest="ir_path", help="Loop IR text file to schedule.")
    parser.add_argument("--shape", help="rows,cols for softmax_denom or B,N,Sq,Skv,H for attention.")
    parser.add_argument("--schedule", dest="schedule_path", help="Schedule script; builtins fall back to their default schedule.")
    parser.add_argument("--trials", type=int, help="Random-input comparisons run by verify.")
    parser.add_argument("--seed", type=int, help="Seed of the input generator.")
    parser.add_argument("--tol-rel", dest="tol_rel", type=float, help="Relative tolerance.")
    parser.add_argument("--tol-abs", dest="tol_abs", type=float, help="Absolute tolerance.")
    parser.add_argument("--dump-dir", dest="dump_dir", help="Directory written by dump.")
    parser.add_argument("--emit", choices=EMIT_MODES, help="Rendering printed by emit.")
    parser.add_argument("--f32", action="store_true", default=None, help="Round inputs of the scheduled run to f32.")
    parser.add_argument("--oracle", choices=ORACLES, help="Compare against the unscheduled program or the dense reference.")
    parser.add_argument("--check-repair", dest="check_repair", action="store_true", default=None,
                        help="Also run the brute-force tag-update check on every repair function.")
    parser.add_argument("--log-level", dest="log_level", help="Log level of the stderr sink.")
    parser.add_argument("--config", help="YAML configuration file.")
    return parser


def load_program(cfg):
    """Return (program, benchmark or None)."""
    if cfg.ir_path:
        return parse_loop_ir(Path(cfg.ir_path).read_text()), None
    if not cfg.benchmark:
        raise ReduxionError("pass --benchmark or --ir")
    bench = get_benchmark(cfg.benchmark, cfg.shape)
    return bench.program(), bench


def load_script(cfg, bench):
    if cfg.schedule_path:
        return Path(cfg.schedule_path).read_text()
    if bench is not None:
        return bench.default_schedule()
    return ""


def schedule(cfg):
    program, bench = load_program(cfg)
    run = run_schedule(program, load_script(cfg, bench))
    for diagnostic in run.diagnostics:
        logger.warning("identity transform: {}", diagnostic.format())
    return program, bench, run


def _worst(reports):
    """Fold per-trial reports into one entry per tensor holding the largest errors."""
    merged = {}
    for report in reports:
        for e in report.entries:
            prev = merged.get(e.name)
            if prev is None:
                merged[e.name] = e
                continue
            note = prev.note or e.note
            merged[e.name] = TensorComparison(
                e.name, max(prev.max_abs, e.max_abs), max(prev.max_rel, e.max_rel), prev.passed and e.passed, note
            )
    first = reports[0]
    return CompareReport(tuple(merged[n] for n in sorted(merged)), first.tol_rel, first.tol_abs)


def cmd_verify(cfg):
    """
    Compare the scheduled program with the oracle on ``cfg.trials`` random inputs.

    Returns:
        int: Exit code; identity transforms take precedence over tolerance results.
    """
    program, bench, run = schedule(cfg)
    tol_rel, tol_abs = cfg.tolerances
    for cert in run.certificates:
        print(cert.format())
    reports = []
    for trial in range(cfg.trials):
        inputs = random_inputs(program, make_rng(cfg.seed, trial))
        if cfg.oracle == "dense":
            expected = bench.oracle(inputs)
        else:
            expected = interpret(program, inputs)
        scheduled_inputs = {k: quantize_f32(v) for k, v in inputs.items()} if cfg.f32 else inputs
        actual = interpret(run.program, scheduled_inputs)
        reports.append(compare(actual, expected, tol_rel, tol_abs))
    report = _worst(reports)
    print(report.format())
    repair_failures = 0
    if cfg.check_repair:
        for cert in run.certificates:
            failures = check_tag_update(cert, reduce_domain=cfg.reduce_domain, trials=cfg.repair_samples, seed=cfg.seed)
            print(f"tag-update check {cert.signature()}: {failures} failures in {cfg.repair_samples} cases")
            repair_failures += failures
    if run.is_identity:
        for diagnostic in run.diagnostics:
            print(f"identity: {diagnostic.format()}")
        print(f"IDENTITY ({cfg.trials} trials, max_rel={report.max_rel:.3e})")
        return EXIT_IDENTITY
    if not report.passed or repair_failures:
        print(f"FAIL ({cfg.trials} trials, max_rel={report.max_rel:.3e})")
        return EXIT_TOLERANCE
    print(f"PASS ({cfg.trials} trials, max_rel={report.max_rel:.3e})")
    return EXIT_OK


def render(program, mode):
    if mode == "loop":
        return print_loop_ir(program)
    tiled = translate(program)
    return print_tile(tiled) if mode == "tile" else print_tile_pseudo(tiled)


def cmd_emit(cfg):
    _, _, run = schedule(cfg)
    sys.stdout.write(render(run.program, cfg.emit))
    return EXIT_IDENTITY if run.is_identity else EXIT_OK


def cmd_dump(cfg):
    """Write ``NN_<primitive>.ir`` per schedule stage and the final tile program."""
    _, _, run = schedule(cfg)
    out = Path(cfg.dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stage in run.stages:
        path = out / stage.filename
        path.write_text(stage.text())
        print(path)
    tile_path = out / f"{len(run.stages):02d}_tile.tir"
    tile_path.write_text(print_tile(translate(run.program)))
    print(tile_path)
    return EXIT_IDENTITY if run.is_identity else EXIT_OK


COMMANDS = {"verify": cmd_verify, "emit": cmd_emit, "dump": cmd_dump}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"reduxion: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = ConfigLoader(args.config).run_config(overrides)
        configure_logging(cfg.log_level)
        return COMMANDS[args.command](cfg)
    except (ReduxionError, OSError) as e:
        print(f"reduxion: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
