"""
Tensor-expression builder, lowering to loop-scalar IR and built-in benchmarks.

A graph is a list of placeholder and compute nodes in creation order. Compute
bodies are Python callables over index variables; arithmetic on the wrapped
values builds ScalarExpr trees::

    g = TensorExprGraph()
    inp = g.placeholder("inp", (2, 4))
    j = g.reduce_axis(4, "j")
    xmax = g.compute("xmax", (2,), lambda i: g.max(inp[i, j], axis=j), block="s_max")
"""

import inspect
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger

from src.core.errors import InvalidShape, ShapeMismatch, UnboundReduceAxis, UnknownBenchmark
from src.core.expr import ADD, MAX, MIN, MUL, NEG_INF, Binary, Const, Load, Select, Unary, Var, walk
from src.core.loop_ir import For, Program, Store, TensorDecl, validate

_AXIS_NAMES = {1: ("i",), 2: ("i", "j"), 3: ("b", "n", "i"), 4: ("b", "n", "i", "j")}


def _lift(value):
    if isinstance(value, TE):
        return value.expr
    if isinstance(value, (int, float)):
        return Const(float(value))
    raise TypeError(f"cannot use {value!r} in a tensor expression")


class TE:
    """A scalar expression under construction."""

    __slots__ = ("expr",)

    def __init__(self, expr):
        self.expr = expr

    def _bin(self, op, other, swap=False):
        a, b = _lift(self), _lift(other)
        return TE(Binary(op, b, a) if swap else Binary(op, a, b))

    def __add__(self, other):
        return self._bin("+", other)

    def __radd__(self, other):
        return self._bin("+", other, swap=True)

    def __sub__(self, other):
        return self._bin("-", other)

    def __rsub__(self, other):
        return self._bin("-", other, swap=True)

    def __mul__(self, other):
        return self._bin("*", other)

    def __rmul__(self, other):
        return self._bin("*", other, swap=True)

    def __truediv__(self, other):
        return self._bin("/", other)

    def __rtruediv__(self, other):
        return self._bin("/", other, swap=True)

    def __neg__(self):
        if isinstance(self.expr, Const):
            return TE(Const(-self.expr.value))
        return TE(Unary("neg", self.expr))

    def __lt__(self, other):
        return self._bin("<", other)

    def __le__(self, other):
        return self._bin("<=", other)

    def __gt__(self, other):
        return self._bin(">", other)

    def __ge__(self, other):
        return self._bin(">=", other)

    def __repr__(self):
        return f"TE({self.expr})"


class ReduceAxis(TE):
    __slots__ = ("name", "extent")

    def __init__(self, name, extent):
        super().__init__(Var(name))
        self.name = name
        self.extent = extent


def exp(x):
    return TE(Unary("exp", _lift(x)))


def log(x):
    return TE(Unary("log", _lift(x)))


def tanh(x):
    return TE(Unary("tanh", _lift(x)))


def maximum(a, b):
    return TE(Binary("max", _lift(a), _lift(b)))


def minimum(a, b):
    return TE(Binary("min", _lift(a), _lift(b)))


def equal(a, b):
    return TE(Binary("==", _lift(a), _lift(b)))


def if_then_else(cond, then, otherwise):
    return TE(Select(_lift(cond), _lift(then), _lift(otherwise)))


@dataclass(frozen=True)
class Reduction:
    reducer: object
    expr: object
    axes: tuple


@dataclass
class TensorNode:
    name: str
    shape: tuple
    kind: str
    dtype: str = "f32"
    block: Optional[str] = None
    index_vars: tuple = ()
    body: object = None
    reduction: Optional[Reduction] = None
    output: bool = False

    @property
    def rank(self):
        return len(self.shape)

    def __getitem__(self, indices):
        if not isinstance(indices, tuple):
            indices = (indices,)
        if len(indices) != self.rank:
            raise ShapeMismatch(f"{self.name} has rank {self.rank}, indexed with {len(indices)} indices")
        return TE(Load(self.name, tuple(_lift(i) for i in indices)))

    def __call__(self, *indices):
        return self[indices]


@dataclass
class TensorExprGraph:
    nodes: list = field(default_factory=list)
    axes: dict = field(default_factory=dict)

    def _add(self, node):
        if any(n.name == node.name for n in self.nodes):
            raise InvalidShape(f"tensor {node.name} is defined twice")
        if any(d < 1 for d in node.shape):
            raise InvalidShape(f"tensor {node.name} has a non-positive dimension in {node.shape}")
        self.nodes.append(node)
        return node

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def placeholder(self, name, shape, dtype="f32"):
        return self._add(TensorNode(name, tuple(shape), "placeholder", dtype))

    def reduce_axis(self, extent, name):
        axis = ReduceAxis(name, extent)
        self.axes[name] = axis
        return axis

    def _reduction(self, reducer, value, axis):
        axes = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
        return Reduction(reducer, _lift(value), axes)

    def sum(self, value, axis):
        return self._reduction(ADD, value, axis)

    def prod(self, value, axis):
        return self._reduction(MUL, value, axis)

    def max(self, value, axis):
        return self._reduction(MAX, value, axis)

    def min(self, value, axis):
        return self._reduction(MIN, value, axis)

    def compute(self, name, shape, fn, block=None, dtype="f32", output=False, axes=None):
        """
        Define ``name[idx] = fn(*idx)``.

        ``fn`` returns a TE, a number or a Reduction from ``sum``/``max``/...;
        its parameter names (or ``axes``) become the loop variables.
        """
        shape = tuple(shape)
        params = inspect.signature(fn).parameters.values()
        if axes is not None:
            names = tuple(axes)
        elif any(p.kind == p.VAR_POSITIONAL for p in params):
            names = _AXIS_NAMES.get(len(shape)) or tuple(f"ax{k}" for k in range(len(shape)))
        else:
            names = tuple(p.name for p in params)
        if len(names) != len(shape):
            raise ShapeMismatch(f"{name} has rank {len(shape)} but its body takes {len(names)} indices")
        result = fn(*(TE(Var(n)) for n in names))
        node = TensorNode(name, shape, "compute", dtype, block or f"T_{name}", names, output=output)
        if isinstance(result, Reduction):
            node.reduction = result
            node.body = result.expr
        else:
            node.body = _lift(result)
        self._check_vars(node)
        return self._add(node)

    def cast(self, source, name, dtype="f16", output=False):
        """Dtype conversion, lowered as an identity copy."""
        logger.info("{}: cast to {} lowered as an identity copy", name, dtype)
        axes = source.index_vars or None
        return self.compute(name, source.shape, lambda *ax: source[ax], dtype=dtype, output=output, axes=axes)

    def _check_vars(self, node):
        allowed = set(node.index_vars)
        reduce_names = {a.name for a in node.reduction.axes} if node.reduction else set()
        used = {n.name for n in walk(node.body) if isinstance(n, Var)}
        unbound = used - allowed - reduce_names
        if unbound:
            raise UnboundReduceAxis(f"{node.name} uses undeclared axes {sorted(unbound)}")
        clash = reduce_names & allowed
        if clash:
            raise UnboundReduceAxis(f"{node.name} reduces over its own index {sorted(clash)}")
        for name in reduce_names:
            if name not in self.axes:
                raise UnboundReduceAxis(f"{node.name} reduces over {name}, which is not a declared reduce axis")
        defined = {n.name for n in self.nodes}
        for ld in (n for n in walk(node.body) if isinstance(n, Load)):
            if ld.tensor not in defined:
                raise ShapeMismatch(f"{node.name} reads {ld.tensor}, which is not defined before it")


def batch_matmul(g, lhs, rhs, trans_b=False, name="batch_matmul", block=None):
    """
    ``lhs @ rhs`` over rank-4 ``(B, N, rows, cols)`` operands (``lhs @ rhs^T`` with ``trans_b``).

    The contraction axis is ``d`` for ``lhs @ rhs^T`` and ``j`` otherwise, so a
    score matmul reads ``q[b, n, i, d] * k[b, n, j, d]`` and the value matmul
    ``p[b, n, i, j] * v[b, n, j, d]``. Loop variables never reuse a tensor name.
    """
    if lhs.rank != 4 or rhs.rank != 4:
        raise ShapeMismatch(f"batch_matmul takes rank-4 operands, got {lhs.name}{lhs.shape} and {rhs.name}{rhs.shape}")
    inner = lhs.shape[3]
    other, width = (rhs.shape[3], rhs.shape[2]) if trans_b else (rhs.shape[2], rhs.shape[3])
    if other != inner or rhs.shape[:2] != lhs.shape[:2]:
        raise ShapeMismatch(f"cannot multiply {lhs.name}{lhs.shape} by {rhs.name}{rhs.shape}")
    axis = g.reduce_axis(inner, "d" if trans_b else "j")
    if trans_b:
        axes = ("b", "n", "i", "j")
        fn = lambda *ix: g.sum(lhs[ix[0], ix[1], ix[2], axis] * rhs[ix[0], ix[1], ix[3], axis], axis=axis)
    else:
        axes = ("b", "n", "i", "d")
        fn = lambda *ix: g.sum(lhs[ix[0], ix[1], ix[2], axis] * rhs[ix[0], ix[1], axis, ix[3]], axis=axis)
    return g.compute(name, lhs.shape[:3] + (width,), fn, block=block, axes=axes)


def lower(g):
    """
    Lower a graph to a loop-scalar Program, one nest per compute node.

    Map loops come first in index order, reduce loops innermost. The last
    compute node is the output unless nodes are marked ``output=True``.
    """
    computes = [n for n in g.nodes if n.kind == "compute"]
    outputs = {n.name for n in computes if n.output} or ({computes[-1].name} if computes else set())
    decls, body = [], []
    for node in g.nodes:
        role = "input" if node.kind == "placeholder" else ("output" if node.name in outputs else "intermediate")
        decls.append(TensorDecl(node.name, node.shape, role, node.dtype))
        if node.kind == "placeholder":
            continue
        index = tuple(Var(v) for v in node.index_vars)
        if node.reduction is not None:
            stmt = Store(node.block, node.name, index, node.body, node.reduction.reducer)
            for axis in reversed(node.reduction.axes):
                stmt = For(axis.name, axis.extent, (stmt,))
        else:
            stmt = Store(node.block, node.name, index, node.body)
        for var, extent in reversed(list(zip(node.index_vars, node.shape))):
            stmt = For(var, extent, (stmt,))
        body.append(stmt)
    program = validate(Program(tuple(decls), tuple(body)))
    logger.debug("lowered {} compute nodes", len(computes))
    return program


# ---------------------------------------------------------------------------
# Builtins

ATTENTION_BENCHMARKS = ("global_attn", "causal_attn", "alibi_attn", "softcap_attn", "window_attn", "decode_attn")
BENCHMARKS = ("softmax_denom",) + ATTENTION_BENCHMARKS
SOFTCAP = 20.0


@dataclass(frozen=True)
class AttentionParams:
    B: int = 1
    N: int = 2
    Sq: int = 16
    Skv: int = 16
    H: int = 8
    scale: Optional[float] = None
    softcap: float = SOFTCAP
    window: Optional[int] = None

    @property
    def score_scale(self):
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.H)

    @property
    def window_size(self):
        return self.window if self.window is not None else max(1, self.Skv // 4)

    @property
    def offset(self):
        """Query row ``i`` sits at key position ``i + offset``."""
        return self.Skv - self.Sq

    def slope(self, head):
        return 2.0 ** (-8.0 * (head + 1) / self.N)


def params_for(name, shape=None, **extra):
    """
    Build the parameter object of a builtin from a shape tuple or keywords.

    ``softmax_denom`` takes ``(rows, cols)``; attention takes ``(B, N, Sq, Skv, H)``.
    """
    if name not in BENCHMARKS:
        raise UnknownBenchmark(f"unknown benchmark {name}; choose one of {', '.join(BENCHMARKS)}")
    if name == "softmax_denom":
        if shape is not None and len(shape) != 2:
            raise InvalidShape(f"softmax_denom takes rows,cols; got {tuple(shape)}")
        rows, cols = shape if shape is not None else (extra.get("rows", 2), extra.get("cols", 4))
        return {"rows": int(rows), "cols": int(cols)}
    if shape is not None:
        if len(shape) != 5:
            raise InvalidShape(f"{name} takes B,N,Sq,Skv,H; got {tuple(shape)}")
        extra = dict(zip(("B", "N", "Sq", "Skv", "H"), (int(s) for s in shape)), **extra)
    elif name == "decode_attn":
        extra = {"Sq": 1, **extra}
    params = AttentionParams(**extra)
    if name == "decode_attn" and params.Sq != 1:
        raise InvalidShape(f"decode_attn needs Sq = 1, got {params.Sq}")
    return params


def _shift(x, k):
    if k > 0:
        return x + k
    return x - (-k) if k < 0 else x


def _score(g, name, params, p):
    """Scaled scores with the variant's modification; masked entries are -inf."""
    scale = params.score_scale

    def body(b, n, i, j):
        s = p[b, n, i, j] * scale
        row = _shift(i, params.offset)
        if name == "softcap_attn":
            return params.softcap * tanh(s / params.softcap)
        if name == "alibi_attn":
            slope = exp((n + 1) * (-8.0 * math.log(2.0) / params.N))
            return if_then_else(j <= row, s + slope * (j - row), NEG_INF)
        if name == "causal_attn":
            return if_then_else(j <= row, s, NEG_INF)
        if name == "window_attn":
            start = _shift(i, params.offset - params.window_size)
            return if_then_else(j <= row, if_then_else(j > start, s, NEG_INF), NEG_INF)
        return s

    return g.compute("score_mod", p.shape, body)


def _attention(name, params):
    if name in ("causal_attn", "alibi_attn", "window_attn") and params.Sq > params.Skv:
        raise InvalidShape(f"{name} needs Sq <= Skv, got Sq={params.Sq} Skv={params.Skv}")
    g = TensorExprGraph()
    B, N, Sq, Skv, H = params.B, params.N, params.Sq, params.Skv, params.H
    q = g.placeholder("q", (B, N, Sq, H), "f16")
    k = g.placeholder("k", (B, N, Skv, H), "f16")
    v = g.placeholder("v", (B, N, Skv, H), "f16")
    p = batch_matmul(g, q, k, trans_b=True, name="batch_matmul", block="batch_matmul")
    score = _score(g, name, params, p)
    j = g.reduce_axis(Skv, "j")
    s_max = g.compute("softmax_maxelem", (B, N, Sq), lambda b, n, i: g.max(score[b, n, i, j], axis=j))
    s_exp = g.compute("softmax_exp", (B, N, Sq, Skv), lambda b, n, i, j: exp(score[b, n, i, j] - s_max[b, n, i]))
    s_sum = g.compute("softmax_expsum", (B, N, Sq), lambda b, n, i: g.sum(s_exp[b, n, i, j], axis=j))
    s_exp16 = g.cast(s_exp, "softmax_exp_f16")
    sv = batch_matmul(g, s_exp16, v, name="batch_matmul_NN")
    norm = g.compute("softmax_norm", sv.shape, lambda b, n, i, d: sv[b, n, i, d] / s_sum[b, n, i])
    g.cast(norm, "cast", output=True)
    return g


def _softmax_denom(params):
    rows, cols = params["rows"], params["cols"]
    if rows < 1 or cols < 1:
        raise InvalidShape(f"softmax_denom needs a positive shape, got {rows}x{cols}")
    g = TensorExprGraph()
    inp = g.placeholder("inp", (rows, cols))
    j = g.reduce_axis(cols, "j")
    xmax = g.compute("xmax", (rows,), lambda i: g.max(inp[i, j], axis=j), block="s_max")
    xexp = g.compute("xexp", (rows, cols), lambda i, j: exp(inp[i, j] - xmax[i]), block="s_exp")
    g.compute("xsum", (rows,), lambda i: g.sum(xexp[i, j], axis=j), block="s_sum", output=True)
    return g


def builtin(name, params=None):
    """
    Args:
        name (str): One of BENCHMARKS.
        params: Result of ``params_for``, a shape tuple or None for the defaults.

    Returns:
        TensorExprGraph: The benchmark graph.
    """
    if params is None or isinstance(params, (tuple, list)):
        params = params_for(name, params)
    if name not in BENCHMARKS:
        raise UnknownBenchmark(f"unknown benchmark {name}")
    if name == "softmax_denom":
        return _softmax_denom(params)
    return _attention(name, params)


def output_name(name):
    return "xsum" if name == "softmax_denom" else "cast"


# ---------------------------------------------------------------------------
# Dense oracle


def _dense_softmax(scores):
    with np.errstate(invalid="ignore", divide="ignore"):
        peak = np.max(scores, axis=-1, keepdims=True)
        weights = np.exp(scores - peak)
        return weights / np.sum(weights, axis=-1, keepdims=True)


def reference_attention(name, inputs, params=None):
    """
    Dense numpy evaluation of a builtin: ``softmax(mask(score(q k^T))) v``.

    Returns:
        dict: Output tensor name to array.
    """
    if params is None or isinstance(params, (tuple, list)):
        params = params_for(name, params)
    if name == "softmax_denom":
        x = np.asarray(inputs["inp"], dtype=np.float64)
        return {"xsum": np.sum(np.exp(x - np.max(x, axis=1, keepdims=True)), axis=1)}
    q, k, v = (np.asarray(inputs[t], dtype=np.float64) for t in ("q", "k", "v"))
    s = np.einsum("bnik,bnjk->bnij", q, k) * params.score_scale
    rows = np.arange(params.Sq)[:, None] + params.offset
    cols = np.arange(params.Skv)[None, :]
    if name == "softcap_attn":
        s = params.softcap * np.tanh(s / params.softcap)
    if name == "alibi_attn":
        slopes = np.array([params.slope(n) for n in range(params.N)])
        s = s + slopes[None, :, None, None] * (cols - rows)[None, None]
    visible = np.ones((params.Sq, params.Skv), dtype=bool)
    if name in ("causal_attn", "alibi_attn", "window_attn"):
        visible &= cols <= rows
    if name == "window_attn":
        visible &= cols > rows - params.window_size
    s = np.where(visible[None, None], s, NEG_INF)
    return {"cast": np.einsum("bnij,bnjk->bnik", _dense_softmax(s), v)}


# ---------------------------------------------------------------------------
# Default schedules

ROLLING_SOFTMAX = "rolling_update s_sum s_max.j\n"

PREFILL_ATTENTION = """\
rolling_update T_softmax_expsum T_softmax_maxelem.j
rolling_update T_batch_matmul_NN T_softmax_maxelem.j
compute_at T_score_mod T_softmax_maxelem.j
compute_at batch_matmul T_score_mod.j
reverse_compute_at T_softmax_norm T_softmax_maxelem.i
reverse_compute_at T_cast T_softmax_maxelem.i
"""


def decode_schedule(skv):
    size = next(d for d in (4, 2, 1) if skv % d == 0)
    return (
        f"tile T_softmax_maxelem j {size}\n"
        "split_k_update T_softmax_expsum T_softmax_maxelem.j0\n"
        "split_k_update T_batch_matmul_NN T_softmax_maxelem_local.j0\n"
    )


def default_schedule(name, params=None):
    """Rolling-update script for prefill shapes, split-k script when ``Sq == 1``."""
    if params is None or isinstance(params, (tuple, list)):
        params = params_for(name, params)
    if name == "softmax_denom":
        return ROLLING_SOFTMAX
    if params.Sq == 1:
        return decode_schedule(params.Skv)
    return PREFILL_ATTENTION
