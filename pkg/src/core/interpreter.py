"""
Reference interpreter for loop-scalar programs.

Tensors are numpy float64 arrays. Execution is sequential in program order
with loops in increasing index order; loop bindings and scopes are ignored.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from loguru import logger

from src.core.errors import InterpretError, OutOfBounds, ShapeMismatch, UninitializedRead
from src.core.expr import compile_scalar
from src.core.loop_ir import For, has_explicit_init, iter_blocks

# A tensor value is a dense float64 ndarray.
TensorValue = np.ndarray


@dataclass(frozen=True)
class TraceRecord:
    tensor: str
    index: tuple
    iteration: tuple
    value: float


@dataclass
class ExecutionTrace:
    """Write log in execution order; ``iteration`` pairs each enclosing loop var with its value."""

    records: list = field(default_factory=list)

    def record(self, tensor, index, iteration, value):
        self.records.append(TraceRecord(tensor, index, iteration, value))

    def history(self, tensor, index):
        index = tuple(index)
        return [r.value for r in self.records if r.tensor == tensor and r.index == index]

    def writes(self, tensor):
        return [r for r in self.records if r.tensor == tensor]


def quantize_f32(value):
    return np.asarray(value, dtype=np.float32).astype(np.float64)


class Interpreter:
    """
    Executes one program.

    Args:
        program (Program): Program to run.
        trace (ExecutionTrace): Optional write log filled during ``run``.
    """

    def __init__(self, program, trace=None):
        self.program = program
        self.trace = trace
        self.auto_init = {
            site.store.block: not has_explicit_init(program, site.store.tensor)
            for site in iter_blocks(program.body)
            if site.store.is_reduce
        }

    def run(self, inputs, quantize=False, outputs_only=True):
        """
        Args:
            inputs (dict): Name to array for every input tensor.
            quantize (bool): Round inputs to f32 before execution; arithmetic stays f64.
            outputs_only (bool): Return only output-role tensors.

        Returns:
            dict: Name to float64 array.
        """
        self.storage, self.masks = {}, {}
        for decl in self.program.tensors:
            if decl.role == "input":
                if decl.name not in inputs:
                    raise InterpretError(f"missing input tensor {decl.name}")
                value = np.asarray(inputs[decl.name], dtype=np.float64)
                if value.shape != tuple(decl.shape):
                    raise ShapeMismatch(f"input {decl.name} has shape {value.shape}, expected {tuple(decl.shape)}")
                self.storage[decl.name] = quantize_f32(value) if quantize else value.copy()
            else:
                self.storage[decl.name] = np.zeros(decl.shape, dtype=np.float64)
                self.masks[decl.name] = np.zeros(decl.shape, dtype=bool)
        run_body = self._compile_body(self.program.body, ())
        run_body({})
        names = [d.name for d in self.program.tensors if not outputs_only or d.role == "output"]
        result = {name: self.storage[name] for name in names}
        nans = [name for name, value in result.items() if np.isnan(value).any()]
        if nans:
            logger.warning("NaN values in {}", ", ".join(nans))
        return result

    def _reader(self, tensor):
        if tensor not in self.storage:
            raise InterpretError(f"read of undeclared tensor {tensor}")
        data, mask = self.storage[tensor], self.masks.get(tensor)
        shape = data.shape

        def read(index):
            for k, n in zip(index, shape):
                if k < 0 or k >= n:
                    raise OutOfBounds(f"{tensor}{list(index)} outside shape {list(shape)}")
            if mask is not None and not mask[index]:
                raise UninitializedRead(f"{tensor}{list(index)} read before any write")
            return data.item(index)

        return read

    def _compile_body(self, body, loop_vars):
        steps = [self._compile_stmt(stmt, loop_vars) for stmt in body]

        def run(env):
            for step in steps:
                step(env)

        return run

    def _compile_stmt(self, stmt, loop_vars):
        if isinstance(stmt, For):
            inner = self._compile_body(stmt.body, loop_vars + (stmt.var,))
            var, extent = stmt.var, stmt.extent

            def run_loop(env):
                for k in range(extent):
                    env[var] = k
                    inner(env)
                del env[var]

            return run_loop
        return self._compile_store(stmt, loop_vars)

    def _compile_store(self, store, loop_vars):
        data, mask = self.storage[store.tensor], self.masks.get(store.tensor)
        shape = data.shape
        index_fns = tuple(compile_scalar(i, self._reader) for i in store.indices)
        value_fn = compile_scalar(store.value, self._reader)
        reducer = store.reducer
        indexed = store.index_vars()
        reduce_vars = tuple(v for v in loop_vars if v not in indexed)
        init = reducer is not None and self.auto_init.get(store.block, True)
        carry_fn = compile_scalar(store.carry if store.carry is not None else store.target, self._reader) if reducer else None
        trace, tensor = self.trace, store.tensor

        def run_store(env):
            index = tuple(int(fn(env)) for fn in index_fns)
            for k, n in zip(index, shape):
                if k < 0 or k >= n:
                    raise OutOfBounds(f"store {tensor}{list(index)} outside shape {list(shape)}")
            if reducer is None:
                value = value_fn(env)
            else:
                if init and all(env[v] == 0 for v in reduce_vars):
                    data[index] = reducer.identity
                    mask[index] = True
                value = reducer.apply(carry_fn(env), value_fn(env))
            data[index] = value
            if mask is not None:
                mask[index] = True
            if trace is not None:
                trace.record(tensor, index, tuple((v, env[v]) for v in loop_vars), value)

        return run_store


def interpret(program, inputs, quantize=False, trace=None, outputs_only=True):
    """Run ``program`` on ``inputs`` and return its output tensors."""
    return Interpreter(program, trace).run(inputs, quantize=quantize, outputs_only=outputs_only)


# ---------------------------------------------------------------------------
# Comparison


@dataclass(frozen=True)
class TensorComparison:
    name: str
    max_abs: float
    max_rel: float
    passed: bool
    note: str = ""


@dataclass(frozen=True)
class CompareReport:
    entries: tuple
    tol_rel: float
    tol_abs: float

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_abs(self):
        return max((e.max_abs for e in self.entries), default=0.0)

    @property
    def max_rel(self):
        return max((e.max_rel for e in self.entries), default=0.0)

    def format(self):
        lines = []
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            line = f"{e.name}: max_abs={e.max_abs:.3e} max_rel={e.max_rel:.3e} [{status}]"
            if e.note:
                line += f" ({e.note})"
            lines.append(line)
        return "\n".join(lines)


def compare_tensor(name, actual, expected, tol_rel, tol_abs):
    actual, expected = np.asarray(actual, dtype=np.float64), np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeMismatch(f"{name}: shape {actual.shape} vs {expected.shape}")
    nan_a, nan_e = np.isnan(actual), np.isnan(expected)
    same = (actual == expected) | (nan_a & nan_e)
    with np.errstate(invalid="ignore", over="ignore"):
        diff = np.where(same, 0.0, np.abs(actual - expected))
        diff = np.where(np.isnan(diff), np.inf, diff)
        rel = diff / np.maximum(np.abs(expected), np.finfo(np.float64).tiny)
        rel = np.where(same, 0.0, np.where(np.isnan(rel), np.inf, rel))
        within = same | (np.isfinite(diff) & (diff <= tol_abs + tol_rel * np.abs(expected)))
    notes = []
    if nan_a.any() or nan_e.any():
        notes.append(f"NaN in {int(nan_a.sum())} actual / {int(nan_e.sum())} expected elements")
    max_abs = float(diff.max()) if diff.size else 0.0
    max_rel = float(rel.max()) if rel.size else 0.0
    return TensorComparison(name, max_abs, max_rel, bool(within.all()), "; ".join(notes))


def compare(actual, expected, tol_rel=1e-10, tol_abs=1e-12):
    """
    Compare two tensor maps elementwise with ``|a - b| <= tol_abs + tol_rel * |b|``.

    Raises:
        ShapeMismatch: When the key sets or any shapes differ.
    """
    if set(actual) != set(expected):
        raise ShapeMismatch(f"tensor sets differ: {sorted(actual)} vs {sorted(expected)}")
    entries = tuple(compare_tensor(n, actual[n], expected[n], tol_rel, tol_abs) for n in sorted(expected))
    return CompareReport(entries, tol_rel, tol_abs)


# ---------------------------------------------------------------------------
# Tensor files


def save_tensor(path, value):
    """Write a tensor: ``.txt`` as text, anything else as the binary format."""
    path = Path(path)
    value = np.asarray(value, dtype=np.float64)
    if path.suffix == ".txt":
        path.write_text(format_tensor_text(value))
        return
    header = np.array([value.ndim], dtype="<u4").tobytes() + np.array(value.shape, dtype="<u8").tobytes()
    path.write_bytes(header + value.astype("<f8").tobytes())


def load_tensor(path):
    path = Path(path)
    if path.suffix == ".txt":
        return parse_tensor_text(path.read_text())
    raw = path.read_bytes()
    if len(raw) < 4:
        raise InterpretError(f"{path}: truncated header")
    rank = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    dims = tuple(int(d) for d in np.frombuffer(raw[4:4 + 8 * rank], dtype="<u8"))
    payload = raw[4 + 8 * rank:]
    count = int(np.prod(dims)) if dims else 1
    if len(payload) != 8 * count:
        raise ShapeMismatch(f"{path}: payload holds {len(payload) // 8} values, header says {count}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def format_tensor_text(value):
    value = np.asarray(value, dtype=np.float64)
    lines = ["shape: " + " ".join(str(d) for d in value.shape)]
    rows = value.reshape(-1, value.shape[-1]) if value.ndim else value.reshape(1, 1)
    lines.extend(" ".join(repr(float(x)) for x in row) for row in rows)
    return "\n".join(lines) + "\n"


def parse_tensor_text(text):
    lines = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not lines or not lines[0].startswith("shape:"):
        raise InterpretError("tensor text must start with a 'shape:' line")
    dims = tuple(int(d) for d in lines[0][len("shape:"):].split())
    values = [float(x) for line in lines[1:] for x in line.split()]
    count = int(np.prod(dims)) if dims else 1
    if len(values) != count:
        raise ShapeMismatch(f"tensor text holds {len(values)} values for shape {dims}")
    return np.array(values, dtype=np.float64).reshape(dims)
