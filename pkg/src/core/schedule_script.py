"""
Line-oriented schedule scripts.

One primitive per line, whitespace separated arguments, comma separated lists
and ``key=value`` options; ``#`` starts a comment::

    rolling_update s_sum s_max.j
    tile s_max j 2
    privatize_reduce s_max,s_sum s_max.j 2 j1,j2
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from loguru import logger

from src.core import scheduler
from src.core.errors import ExprError, IRError, ParseError, ScheduleError
from src.core.loop_ir import print_loop_ir


def _name(token):
    return token


def _names(token):
    names = tuple(t for t in token.split(",") if t)
    if not names:
        raise ValueError("empty list")
    return names


def _int(token):
    return int(token)


def _ints(token):
    return tuple(int(t) for t in _names(token))


def _pair(token):
    names = _names(token)
    if len(names) != 2:
        raise ValueError("expected two comma separated names")
    return names


def _tensor_or_index(token):
    return int(token) if token.isdigit() else token


@dataclass(frozen=True)
class Signature:
    required: tuple
    optional: tuple = ()
    options: tuple = ()
    apply: Callable = None


COMMANDS = {
    "rolling_update": Signature((_name, _name), options=(("factor_axis", _int),), apply=scheduler.rolling_update),
    "split_k_update": Signature((_name, _name), apply=scheduler.split_k_update),
    "privatize_reduce": Signature(
        (_names, _name, _int), (_pair,), apply=lambda s, blocks, h, k, names=None: scheduler.privatize_reduce(s, list(blocks), h, k, names)
    ),
    "fuse": Signature((_name, _name), apply=scheduler.naive_loop_fusion),
    "fuse_and_privatize": Signature((_name, _name), apply=lambda s, b, h: scheduler.fuse_and_privatize(s, b, h)[0]),
    "compute_at": Signature((_name, _name), apply=scheduler.compute_at),
    "reverse_compute_at": Signature((_name, _name), apply=scheduler.reverse_compute_at),
    "inline": Signature((_name, _name), apply=scheduler.inline),
    "tile": Signature((_name, _names, _ints), apply=lambda s, b, vs, sizes: scheduler.tile(s, b, list(vs), list(sizes))),
    "decompose_reduction": Signature((_name, _name), apply=scheduler.decompose_reduction),
    "cache_read": Signature((_name, _tensor_or_index, _name), apply=scheduler.cache_read),
    "set_scope": Signature((_name, _name, _name), apply=scheduler.set_scope),
    "bind_block_idx": Signature((_names, _names), apply=lambda s, hs, ns: scheduler.bind_block_idx(s, list(hs), list(ns))),
    "split_scan_buffer": Signature((_name, _name), (_int,), apply=scheduler.split_scan_buffer),
}


@dataclass(frozen=True)
class Command:
    primitive: str
    args: tuple = ()
    options: tuple = ()
    line: int = 0

    def format(self):
        def token(a):
            return ",".join(str(x) for x in a) if isinstance(a, tuple) else str(a)

        parts = [self.primitive] + [token(a) for a in self.args] + [f"{k}={v}" for k, v in self.options]
        return " ".join(parts)


def parse_command(line, lineno=None):
    tokens = line.split()
    primitive, rest = tokens[0], tokens[1:]
    signature = COMMANDS.get(primitive)
    if signature is None:
        raise ParseError(f"unknown schedule primitive {primitive}", lineno)
    positional = [t for t in rest if "=" not in t]
    keyed = [t.split("=", 1) for t in rest if "=" in t]
    count = len(signature.required)
    if not count <= len(positional) <= count + len(signature.optional):
        raise ParseError(f"{primitive} takes {count} to {count + len(signature.optional)} arguments, got {len(positional)}", lineno)
    converters = dict(signature.options)
    try:
        args = tuple(conv(t) for conv, t in zip(signature.required + signature.optional, positional))
        options = []
        for key, value in keyed:
            if key not in converters:
                raise ParseError(f"{primitive} has no option {key}", lineno)
            options.append((key, converters[key](value)))
    except ValueError as e:
        raise ParseError(f"{primitive}: {e}", lineno) from None
    return Command(primitive, args, tuple(options), lineno or 0)


def parse_schedule(text):
    """
    Parse a schedule script.

    Returns:
        list: Commands in script order.

    Raises:
        ParseError: With the offending line number.
    """
    commands = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            commands.append(parse_command(line, lineno))
    return commands


def load_schedule(path):
    return parse_schedule(Path(path).read_text())


@dataclass(frozen=True)
class Stage:
    """The program after ``index`` schedule lines; stage 0 is the input program."""

    index: int
    label: str
    program: object
    diagnostics: tuple = ()
    certificates: tuple = ()

    @property
    def filename(self):
        return f"{self.index:02d}_{self.label}.ir"

    def text(self):
        """Loop IR text headed by comment lines for the certificates and diagnostics of this stage."""
        notes = [f"# {c.format()}" for c in self.certificates]
        notes += [f"# identity: {d.format()}" for d in self.diagnostics]
        return "\n".join(notes + [print_loop_ir(self.program)]) if notes else print_loop_ir(self.program)


@dataclass(frozen=True)
class ScheduleRun:
    state: object
    stages: tuple

    @property
    def program(self):
        return self.state.program

    @property
    def diagnostics(self):
        return self.state.diagnostics

    @property
    def certificates(self):
        return self.state.certificates

    @property
    def is_identity(self):
        return bool(self.state.diagnostics)


def apply_command(state, command):
    """Apply one command; a failing primitive leaves the program as it was and records a Diagnostic."""
    signature = COMMANDS[command.primitive]
    try:
        return signature.apply(state, *command.args, **dict(command.options))
    except (ScheduleError, IRError, ExprError) as e:
        return scheduler.fail_as_identity(state, command.primitive, command.args, e)


def run_schedule(program, script):
    """
    Apply a schedule to ``program``.

    Args:
        program (Program): Loop-scalar program.
        script (str | list): Script text or parsed commands.

    Returns:
        ScheduleRun: Final state and one Stage per line plus the input stage.
    """
    commands = parse_schedule(script) if isinstance(script, str) else list(script)
    state = scheduler.initial_state(program)
    stages = [Stage(0, "input", program)]
    for n, command in enumerate(commands, start=1):
        before, solved = len(state.diagnostics), len(state.certificates)
        state = apply_command(state, command)
        fresh = state.diagnostics[before:]
        logger.info("line {}: {}{}", command.line, command.format(), " (identity)" if fresh else "")
        stages.append(Stage(n, command.primitive, state.program, fresh, state.certificates[solved:]))
    return ScheduleRun(state, tuple(stages))
