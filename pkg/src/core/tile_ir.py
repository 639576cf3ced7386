"""
Tile IR and the loop-to-tile translator.

Translation partitions every store into outer loops and a perfectly nested
inner part, relaxes each access over the inner loops into a tile (points,
slices and inserted ``None`` axes), reconciles operand dimension orders
against the stored tile and replaces the inner loops by one tile store.

Tile axes are the slice and ``None`` entries of an access in index order;
point indices do not produce an axis. ``reduce(op, x, dim=d)`` numbers ``d``
over every index of the leading access of ``x``, points included, so
``reduce(max, inp[i, 0 : 4], dim=1)`` reduces the slice.
"""

import ast
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from einops import rearrange
from einops import reduce as einops_reduce
from loguru import logger

from src.core.errors import DomainError, InterpretError, IrreconcilableDims, NonAffine, OutOfBounds, ParseError, ShapeMismatch
from src.core.expr import (
    COMPARE_OPS,
    MINMAX_OPS,
    NEG_INF,
    UNARY_OPS,
    Binary,
    Const,
    Load,
    Select,
    Unary,
    Var,
    eval_scalar,
    from_ast,
    print_expr,
    reducer_for,
    subscript_items,
    walk,
)
from src.core.ir_parser import BodyParser, scan_source
from src.core.loop_ir import INDENT, AffineAccess, For, Store, affine_of, format_decl, format_loop_header, iter_blocks

# ---------------------------------------------------------------------------
# Tile accesses


def _affine_term(var, c):
    return Var(var) if c == 1 else Binary("*", Var(var), Const(float(c)))


def affine_expr(coeffs, offset):
    """
    Rebuild ``sum(c * v) + offset`` in the shape the printer and parser agree on.

    Negative coefficients are subtracted, so a reversed index prints as ``3-i``.
    """
    expr = None
    for var, c in coeffs.items():
        if c > 0:
            expr = _affine_term(var, c) if expr is None else Binary("+", expr, _affine_term(var, c))
    negative = [(var, -c) for var, c in coeffs.items() if c < 0]
    if expr is None and negative and offset > 0:
        expr, offset = Const(float(offset)), 0
    for var, c in negative:
        expr = Unary("neg", _affine_term(var, c)) if expr is None else Binary("-", expr, _affine_term(var, c))
    if expr is None:
        return Const(float(offset))
    if offset > 0:
        return Binary("+", expr, Const(float(offset)))
    if offset < 0:
        return Binary("-", expr, Const(float(-offset)))
    return expr


def shift(e, k):
    coeffs, offset = affine_of(e)
    return affine_expr(coeffs, offset + k)


@dataclass(frozen=True)
class Point:
    expr: object


@dataclass(frozen=True)
class Slice:
    """``lo : lo + step*(extent-1) + 1 : step``; ``var`` is the inner loop it came from."""

    lo: object
    extent: int
    step: int = 1
    var: Optional[str] = field(default=None, compare=False)

    @property
    def hi(self):
        return shift(self.lo, self.step * (self.extent - 1) + 1)


@dataclass(frozen=True)
class NewAxis:
    pass


NEW_AXIS = NewAxis()


@dataclass(frozen=True)
class TileAccess:
    tensor: str
    indices: tuple

    @property
    def labels(self):
        return tuple(ix.var if isinstance(ix, Slice) else None for ix in self.indices if not isinstance(ix, Point))

    @property
    def shape(self):
        return tuple(ix.extent if isinstance(ix, Slice) else 1 for ix in self.indices if not isinstance(ix, Point))

    @property
    def is_scalar(self):
        return all(isinstance(ix, Point) for ix in self.indices)


@dataclass(frozen=True)
class Shrink:
    """Inner loops that must move outward before the access is a tile."""

    vars: tuple


def _one_sparse(access, inner):
    for row in access.matrix:
        nonzero = [c for v, c in zip(access.vars, row) if v in inner and c != 0]
        if len(nonzero) > 1 or any(c < 0 for c in nonzero):
            return False
    for v in inner:
        if sum(1 for c in access.column(v) if c != 0) > 1:
            return False
    return True


def relax_access(access, inner):
    """
    Relax an affine access over the inner loops.

    Args:
        access (AffineAccess): Access over outer and inner loop variables.
        inner (tuple): ``(var, extent)`` pairs of the inner loops, outermost first.

    Returns:
        TileAccess | Shrink: The tile, or the shortest outermost prefix of
        inner loops to move outward for the access to become a tile.
    """
    inner = tuple(inner)
    names = [v for v, _ in inner]
    extents = dict(inner)
    if not _one_sparse(access, set(names)):
        for k in range(1, len(names) + 1):
            if _one_sparse(access, set(names[k:])):
                return Shrink(tuple(names[:k]))
    indices = []
    for row, offset in zip(access.matrix, access.offset):
        outer = {v: c for v, c in zip(access.vars, row) if c != 0 and v not in extents}
        lo = affine_expr(outer, offset)
        slot = [(v, c) for v, c in zip(access.vars, row) if c != 0 and v in extents]
        if slot:
            var, step = slot[0]
            indices.append(Slice(lo, extents[var], step, var))
        else:
            indices.append(Point(lo))
    return TileAccess(access.tensor, tuple(indices))


# ---------------------------------------------------------------------------
# Tile expressions


class TileExpr:
    def __str__(self):
        return print_tile_expr(self)


@dataclass(frozen=True)
class TileScalar(TileExpr):
    """A constant or an outer loop variable."""

    expr: object


@dataclass(frozen=True)
class TileRef(TileExpr):
    access: TileAccess


@dataclass(frozen=True)
class TileUnary(TileExpr):
    op: str
    arg: TileExpr


@dataclass(frozen=True)
class TileBinary(TileExpr):
    op: str
    lhs: TileExpr
    rhs: TileExpr


@dataclass(frozen=True)
class TileSelect(TileExpr):
    cond: TileExpr
    then: TileExpr
    otherwise: TileExpr


@dataclass(frozen=True)
class TileReduce(TileExpr):
    op: str
    arg: TileExpr
    dim: int


@dataclass(frozen=True)
class TilePermute(TileExpr):
    arg: TileExpr
    order: tuple


@dataclass(frozen=True)
class TileStore:
    """
    ``tensor[access] = value``, or ``= carry f value`` with a reducer.

    A reduce store initializes its tile to the reducer identity when all its
    enclosing loops that do not index the tile are at 0, unless a plain store
    writes the same tensor.
    """

    block: str
    access: TileAccess
    value: TileExpr
    reducer: Optional[object] = None
    carry: Optional[TileExpr] = None

    @property
    def tensor(self):
        return self.access.tensor

    @property
    def target(self):
        return TileRef(self.access)


@dataclass(frozen=True)
class TileProgram:
    tensors: tuple = ()
    body: tuple = ()

    def stores(self):
        return list(_iter_tile_stores(self.body))


def _iter_tile_stores(body):
    for stmt in body:
        if isinstance(stmt, For):
            yield from _iter_tile_stores(stmt.body)
        else:
            yield stmt


def tile_refs(e):
    if isinstance(e, TileRef):
        return [e]
    if isinstance(e, TileScalar):
        return []
    out = []
    for child in _tile_children(e):
        out.extend(tile_refs(child))
    return out


def _tile_children(e):
    if isinstance(e, TileUnary):
        return (e.arg,)
    if isinstance(e, TileBinary):
        return (e.lhs, e.rhs)
    if isinstance(e, TileSelect):
        return (e.cond, e.then, e.otherwise)
    if isinstance(e, (TileReduce, TilePermute)):
        return (e.arg,)
    return ()


def reduce_slots(e):
    """
    Index slots that hold the tile axes of ``e``, counted in its leading access.

    The leading access is the reference with the most tile axes, the first one
    on ties. Point indices keep their slot, so the axis of ``inp[i, 0 : 4]`` sits
    in slot 1. A permute reorders axes within the slots; a reduce frees its slot.
    """
    if isinstance(e, TileRef):
        return tuple(k for k, ix in enumerate(e.access.indices) if not isinstance(ix, Point))
    if isinstance(e, TileReduce):
        return tuple(k for k in reduce_slots(e.arg) if k != e.dim)
    return max((reduce_slots(child) for child in _tile_children(e)), key=len, default=())


def reduce_dim(arg, axis):
    """Slot number of tile axis ``axis`` of ``arg``, as printed in ``reduce(..., dim=d)``."""
    slots = reduce_slots(arg)
    return slots[axis] if axis < len(slots) else axis


def reduce_axis(arg, dim, ndim):
    """
    Tile axis of ``arg`` that ``dim`` names, or None when no axis sits in that slot.
    """
    slots = reduce_slots(arg)
    if len(slots) != ndim:
        return dim if 0 <= dim < ndim else None
    return slots.index(dim) if dim in slots else None


# ---------------------------------------------------------------------------
# Partitioning and reconciliation


@dataclass(frozen=True)
class Partition:
    block: str
    outer: tuple
    inner: tuple

    @property
    def inner_vars(self):
        return tuple(l.var for l in self.inner)


def partition_ast(program):
    """
    For every store, the longest chain of enclosing loops that wraps nothing
    but the store and carries no annotation.

    Returns:
        list: Partition per store, in program order.
    """
    partitions = []
    for site in iter_blocks(program.body):
        k = len(site.loops)
        while k > 0 and not site.loops[k - 1].annotation and len(site.loops[k - 1].body) == 1:
            k -= 1
        partitions.append(Partition(site.store.block, site.loops[:k], site.loops[k:]))
    return partitions


@dataclass(frozen=True)
class DimPlan:
    """Trailing ``None`` axes to append, the permutation after them and the reduce dims."""

    new_axes: int
    order: Optional[tuple]
    reduce_dims: tuple


def align(labels, target):
    """
    Returns:
        tuple: (number of ``None`` axes appended, permutation or None)

    Raises:
        IrreconcilableDims: When a label repeats or does not occur in ``target``.
    """
    labels = list(labels)
    if len(set(labels)) != len(labels):
        raise IrreconcilableDims(f"dimension repeated in {labels}")
    unknown = [l for l in labels if l not in target]
    if unknown:
        raise IrreconcilableDims(f"dimensions {unknown} occur on neither side of {list(target)}")
    missing = [t for t in target if t not in labels]
    extended = labels + missing
    order = tuple(extended.index(t) for t in target)
    return len(missing), (None if order == tuple(range(len(order))) else order)


def parse_einops(spec):
    source, _, dest = spec.partition("->")
    return tuple(source.split()), tuple(dest.split())


def reconcile_dims(source, lhs=None, reduced=None):
    """
    Plan broadcast, then permute, then reduce for one operand.

    ``source`` may be an einops string (``"c r -> r c"``); otherwise it is the
    operand's axis labels and ``lhs`` the stored tile's labels.
    """
    if isinstance(source, str):
        source, lhs = parse_einops(source)
    if reduced is None:
        reduced = tuple(l for l in source if l not in lhs)
    target = tuple(lhs) + tuple(reduced)
    new_axes, order = align(source, target)
    return DimPlan(new_axes, order, (len(lhs),) * len(reduced))


def _aligned_ref(access, target):
    if access.is_scalar:
        return TileRef(access)
    new_axes, order = align(access.labels, target)
    expr = TileRef(replace(access, indices=access.indices + (NEW_AXIS,) * new_axes))
    return TilePermute(expr, order) if order else expr


def _to_tile(e, relaxed, target):
    if isinstance(e, Load):
        return _aligned_ref(relaxed[e], target)
    if isinstance(e, (Var, Const)):
        return TileScalar(e)
    if isinstance(e, Unary):
        return TileUnary(e.op, _to_tile(e.arg, relaxed, target))
    if isinstance(e, Binary):
        return TileBinary(e.op, _to_tile(e.lhs, relaxed, target), _to_tile(e.rhs, relaxed, target))
    if isinstance(e, Select):
        return TileSelect(*(_to_tile(x, relaxed, target) for x in (e.cond, e.then, e.otherwise)))
    raise TypeError(f"not an expression: {e!r}")


def _bare_vars(e):
    """Loop variables used as values rather than inside load indices."""
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, (Load, Const)):
        return set()
    if isinstance(e, Unary):
        return _bare_vars(e.arg)
    if isinstance(e, Binary):
        return _bare_vars(e.lhs) | _bare_vars(e.rhs)
    return _bare_vars(e.cond) | _bare_vars(e.then) | _bare_vars(e.otherwise)


def _value_loads(store):
    found = [n for n in walk(store.value) if isinstance(n, Load)]
    if store.carry is not None:
        found += [n for n in walk(store.carry) if isinstance(n, Load)]
    return found


def _overlaps(lhs_access, lhs_tile, outer_loops):
    """True when two iterations of one outer loop store into intersecting tiles."""
    slots = lhs_tile.indices
    for loop in outer_loops:
        if loop.extent < 2 or loop.var not in lhs_access.vars:
            continue
        col = lhs_access.column(loop.var)
        if not any(col):
            continue
        hit = True
        for c, ix in zip(col, slots):
            if isinstance(ix, Point):
                hit = hit and c == 0
            else:
                hit = hit and c % ix.step == 0 and abs(c) < ix.step * ix.extent
        if hit:
            return True
    return False


def _tile_store(store, outer, inner, explicit_init):
    """
    Build the tile store for ``store`` with the given inner loops.

    Returns:
        TileStore | Shrink
    """
    loop_vars = tuple(l.var for l in outer + inner)
    pairs = tuple((l.var, l.extent) for l in inner)
    names = [v for v, _ in pairs]
    need = set(_bare_vars(store.value)) & set(names)
    if store.carry is not None:
        need |= _bare_vars(store.carry) & set(names)
    lhs_affine = AffineAccess.of(store.tensor, store.indices, loop_vars)
    lhs = relax_access(lhs_affine, pairs)
    if isinstance(lhs, Shrink):
        need |= set(lhs.vars)
    relaxed = {}
    for ld in _value_loads(store):
        tile = relax_access(AffineAccess.of(ld.tensor, ld.indices, loop_vars), pairs)
        if isinstance(tile, Shrink):
            need |= set(tile.vars)
        relaxed[ld] = tile
    if need:
        cut = max(names.index(v) for v in need) + 1
        return Shrink(tuple(names[:cut]))
    lhs_labels = lhs.labels
    used = set()
    for tile in relaxed.values():
        used |= {l for l in tile.labels if l is not None}
    reduced = tuple(v for v in names if v in used and v not in lhs_labels)
    if store.reducer is not None:
        idle = [v for v in names if v not in used and v not in lhs_labels]
        if idle:
            return Shrink(tuple(names[: names.index(idle[-1]) + 1]))
    if reduced and (store.reducer is None or store.carry is not None):
        cut = max(names.index(v) for v in reduced) + 1
        return Shrink(tuple(names[:cut]))
    if _overlaps(lhs_affine, lhs, outer):
        logger.warning("{}: stored tiles overlap across outer iterations; kept as scalar stores", store.block)
        return Shrink(tuple(names))
    target = tuple(lhs_labels) + reduced
    value = _to_tile(store.value, relaxed, target)
    for _ in reduced:
        value = TileReduce(store.reducer.op, value, reduce_dim(value, len(lhs_labels)))
    carry = _to_tile(store.carry, relaxed, tuple(lhs_labels)) if store.carry is not None else None
    reducer = store.reducer
    indexed = set()
    for index in store.indices:
        indexed |= {n.name for n in walk(index) if isinstance(n, Var)}
    outer_reduce = [l.var for l in outer if l.var not in indexed]
    if reducer is not None and carry is None and reduced and not outer_reduce and not explicit_init:
        reducer = None
    return TileStore(store.block, lhs, value, reducer, carry)


def translate(program):
    """
    Replace every tensorizable inner nest by a tile store.

    A TileProgram is returned unchanged.
    """
    if isinstance(program, TileProgram):
        return program
    plain = {s.store.tensor for s in iter_blocks(program.body) if not s.store.is_reduce}
    cuts, stores = {}, {}
    for part, site in zip(partition_ast(program), iter_blocks(program.body)):
        outer, inner = tuple(part.outer), tuple(part.inner)
        while True:
            result = _tile_store(site.store, outer, inner, site.store.tensor in plain)
            if not isinstance(result, Shrink):
                break
            k = len(result.vars)
            outer, inner = outer + inner[:k], inner[k:]
        cuts[part.block] = len(outer)
        stores[part.block] = result

    def rebuild(body, depth):
        out = []
        for stmt in body:
            if isinstance(stmt, Store):
                out.append(stores[stmt.block])
                continue
            inside = [s.store.block for s in iter_blocks(stmt.body)]
            if len(inside) == 1 and cuts[inside[0]] == depth:
                out.append(stores[inside[0]])
            else:
                out.append(replace(stmt, body=rebuild(stmt.body, depth + 1)))
        return tuple(out)

    tiled = TileProgram(program.tensors, rebuild(program.body, 0))
    logger.debug("translated {} stores, {} tensorized", len(stores), sum(1 for s in stores.values() if not s.access.is_scalar))
    return tiled


# ---------------------------------------------------------------------------
# Printing

_TILE_PREC = {
    "<": 0, "<=": 0, ">": 0, ">=": 0, "==": 0, "!=": 0,
    "+": 1, "-": 1,
    "*": 2, "/": 2,
}


def _prec(e):
    if isinstance(e, TileBinary) and e.op in _TILE_PREC:
        return _TILE_PREC[e.op]
    if isinstance(e, TileUnary) and e.op == "neg":
        return 3
    if isinstance(e, TileScalar) and isinstance(e.expr, Const) and e.expr.value < 0:
        return 3
    return 4


def format_index(ix):
    if isinstance(ix, Point):
        return print_expr(ix.expr, compact=True)
    if isinstance(ix, NewAxis):
        return "None"
    text = f"{print_expr(ix.lo, compact=True)} : {print_expr(ix.hi, compact=True)}"
    return text + (f" : {ix.step}" if ix.step != 1 else "")


def format_access(access):
    if not access.indices:
        return f"{access.tensor}[()]"
    return f"{access.tensor}[{', '.join(format_index(ix) for ix in access.indices)}]"


def print_tile_expr(e):
    if isinstance(e, TileScalar):
        return print_expr(e.expr)
    if isinstance(e, TileRef):
        return format_access(e.access)
    if isinstance(e, TileUnary):
        if e.op == "neg":
            inner = print_tile_expr(e.arg)
            return f"-({inner})" if _prec(e.arg) <= 3 else f"-{inner}"
        return f"{e.op}({print_tile_expr(e.arg)})"
    if isinstance(e, TileSelect):
        return f"select({print_tile_expr(e.cond)}, {print_tile_expr(e.then)}, {print_tile_expr(e.otherwise)})"
    if isinstance(e, TileReduce):
        return f"reduce({e.op}, {print_tile_expr(e.arg)}, dim={e.dim})"
    if isinstance(e, TilePermute):
        return f"permute({print_tile_expr(e.arg)}, order=({', '.join(str(o) for o in e.order)}))"
    if isinstance(e, TileBinary):
        if e.op in MINMAX_OPS:
            return f"{e.op}({print_tile_expr(e.lhs)}, {print_tile_expr(e.rhs)})"
        prec = _TILE_PREC[e.op]
        left, right = print_tile_expr(e.lhs), print_tile_expr(e.rhs)
        if _prec(e.lhs) < prec or (prec == 0 and _prec(e.lhs) == 0):
            left = f"({left})"
        if _prec(e.rhs) <= prec:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    raise TypeError(f"not a tile expression: {e!r}")


def format_tile_store(store):
    target = format_access(store.access)
    if store.reducer is None:
        return f"{target} = {print_tile_expr(store.value)}"
    if store.carry is None and store.reducer.op in ("+", "*"):
        return f"{target} {store.reducer.op}= {print_tile_expr(store.value)}"
    carry = store.carry if store.carry is not None else store.target
    return f"{target} = {print_tile_expr(TileBinary(store.reducer.op, carry, store.value))}"


def _emit(body, depth, lines, leaf, header):
    for stmt in body:
        if isinstance(stmt, For):
            loop_header, inner = header(stmt)
            lines.append(INDENT * depth + loop_header)
            _emit(inner, depth + 1, lines, leaf, header)
        else:
            lines.append(INDENT * depth + leaf(stmt))


def print_tile(program):
    """Render a tile program: declarations, a blank line, then loops and tile stores."""
    lines = [format_decl(d) for d in program.tensors]
    if program.body:
        lines.append("")
        _emit(program.body, 0, lines, lambda s: f"{format_tile_store(s)}  # {s.block}", lambda l: (format_loop_header(l), l.body))
    return "\n".join(lines) + "\n"


def _grid_header(loop):
    if loop.annotation:
        return format_loop_header(loop), loop.body
    chain = [loop]
    while len(chain[-1].body) == 1 and isinstance(chain[-1].body[0], For) and not chain[-1].body[0].annotation:
        chain.append(chain[-1].body[0])
    if len(chain) == 1:
        return format_loop_header(loop), loop.body
    names = ", ".join(l.var for l in chain)
    extents = ", ".join(str(l.extent) for l in chain)
    return f"for {names} in grid({extents}):", chain[-1].body


def print_tile_pseudo(program):
    """Pseudo-Python rendering with perfectly nested loops collapsed into ``grid(...)``."""
    lines = []
    _emit(program.body, 0, lines, format_tile_store, _grid_header)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Parsing

_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}
_CMPOPS = {ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">=", ast.Eq: "==", ast.NotEq: "!="}
_REDUCE_OP = re.compile(r"reduce\(\s*(\+|\*|max|min)\s*,")


def _parse_index(node, lineno):
    if isinstance(node, ast.Constant) and node.value is None:
        return NEW_AXIS
    if isinstance(node, ast.Slice):
        if node.lower is None or node.upper is None:
            raise ParseError("tile slices need both bounds", lineno)
        lo, hi = from_ast(node.lower), from_ast(node.upper)
        step = 1
        if node.step is not None:
            step = node.step.value if isinstance(node.step, ast.Constant) and isinstance(node.step.value, int) else 0
        try:
            (lo_c, lo_k), (hi_c, hi_k) = affine_of(lo), affine_of(hi)
        except NonAffine as e:
            raise ParseError(str(e), lineno) from None
        if lo_c != hi_c or step <= 0 or hi_k <= lo_k:
            raise ParseError("slice bounds must differ by a positive constant", lineno)
        return Slice(affine_expr(lo_c, lo_k), (hi_k - lo_k - 1) // step + 1, step)
    return Point(from_ast(node))


def tile_from_ast(node, lineno=None):
    if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name):
        items = subscript_items(node)
        if len(items) == 1 and isinstance(items[0], ast.Tuple) and not items[0].elts:
            return TileRef(TileAccess(node.value.id, ()))
        return TileRef(TileAccess(node.value.id, tuple(_parse_index(i, lineno) for i in items)))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        name = node.func.id
        keywords = {k.arg: k.value for k in node.keywords}
        if name == "reduce":
            op, arg, dim = node.args[0].value, tile_from_ast(node.args[1], lineno), int(keywords["dim"].value)
            slots = reduce_slots(arg)
            if slots and dim not in slots:
                raise ParseError(f"reduce dim {dim} is not a tile axis of its operand", lineno)
            return TileReduce(op, arg, dim)
        if name == "permute":
            order = tuple(int(e.value) for e in keywords["order"].elts)
            return TilePermute(tile_from_ast(node.args[0], lineno), order)
        args = [tile_from_ast(a, lineno) for a in node.args]
        if name in UNARY_OPS and len(args) == 1:
            return TileUnary(name, args[0])
        if name in MINMAX_OPS and len(args) == 2:
            return TileBinary(name, *args)
        if name == "select" and len(args) == 3:
            return TileSelect(*args)
        raise ParseError(f"unknown tile operation {name}", lineno)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return TileBinary(_BINOPS[type(node.op)], tile_from_ast(node.left, lineno), tile_from_ast(node.right, lineno))
    if isinstance(node, ast.Compare) and len(node.ops) == 1 and type(node.ops[0]) in _CMPOPS:
        return TileBinary(_CMPOPS[type(node.ops[0])], tile_from_ast(node.left, lineno), tile_from_ast(node.comparators[0], lineno))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        operand = node.operand
        if isinstance(operand, ast.Constant) or (isinstance(operand, ast.Name) and operand.id == "inf"):
            return TileScalar(from_ast(node))
        return TileUnary("neg", tile_from_ast(operand, lineno))
    return TileScalar(from_ast(node))


def _reads(e, tensor):
    return any(ref.access.tensor == tensor for ref in tile_refs(e))


class _TileBodyParser(BodyParser):
    def tile_target(self, node):
        ref = tile_from_ast(node, node.lineno)
        if not isinstance(ref, TileRef):
            raise ParseError("store target must be a subscripted tensor", node.lineno)
        return ref.access

    def assign(self, node):
        access = self.tile_target(node.targets[0])
        value = tile_from_ast(node.value, node.lineno)
        block = self.block_name(node, access.tensor)
        if isinstance(value, TileBinary) and reducer_for(value.op) is not None:
            if _reads(value.lhs, access.tensor) and not _reads(value.rhs, access.tensor):
                carry = None if value.lhs == TileRef(access) else value.lhs
                return TileStore(block, access, value.rhs, reducer_for(value.op), carry)
        return TileStore(block, access, value)

    def aug_assign(self, node, reducer):
        access = self.tile_target(node.target)
        return TileStore(self.block_name(node, access.tensor), access, tile_from_ast(node.value, node.lineno), reducer)


def parse_tile(text):
    """Parse the text written by ``print_tile``."""
    decls, source, labels = scan_source(text)
    try:
        tree = ast.parse(_REDUCE_OP.sub(lambda m: f'reduce("{m.group(1)}",', source))
    except SyntaxError as e:
        raise ParseError(e.msg, e.lineno) from e
    return TileProgram(tuple(decls), _TileBodyParser(labels).statements(tree.body))


# ---------------------------------------------------------------------------
# Tile interpreter


def _v_sub(a, b):
    with np.errstate(invalid="ignore"):
        out = np.subtract(a, b)
    return np.where((np.asarray(a) == NEG_INF) & (np.asarray(b) == NEG_INF), NEG_INF, out)


def _v_div(a, b):
    if np.any(np.asarray(b) == 0):
        raise DomainError("division by zero in a tile")
    return np.divide(a, b)


def _v_log(a):
    if np.any(np.asarray(a) <= 0):
        raise DomainError("log of a non-positive tile element")
    return np.log(a)


def _v_exp(a):
    with np.errstate(over="ignore"):
        return np.exp(a)


_V_UNARY = {"exp": _v_exp, "log": _v_log, "neg": np.negative, "tanh": np.tanh}
_V_BINARY = {
    "+": np.add,
    "-": _v_sub,
    "*": np.multiply,
    "/": _v_div,
    "max": lambda a, b: np.where(np.asarray(a) >= b, a, b),
    "min": lambda a, b: np.where(np.asarray(a) <= b, a, b),
}
def _compare(fn):
    return lambda a, b: np.asarray(fn(a, b), dtype=np.float64)


_V_BINARY.update(zip(COMPARE_OPS, map(_compare, (np.less, np.less_equal, np.greater, np.greater_equal, np.equal, np.not_equal))))
_EINOPS_REDUCTIONS = {"+": "sum", "*": "prod", "max": "max", "min": "min"}
# Branches of a select are evaluated for the whole tile; lanes the condition
# discards may divide by zero or take the log of zero.
_V_MASKED = {"/": np.divide, "log": np.log}


def _axes(n):
    return [f"a{k}" for k in range(n)]


class TileInterpreter:
    """Executes a TileProgram on float64 arrays."""

    def __init__(self, program):
        self.program = program
        self.plain = {s.tensor for s in program.stores() if s.reducer is None}
        self.masked = 0

    def run(self, inputs, outputs_only=True):
        self.storage = {}
        for decl in self.program.tensors:
            if decl.role == "input":
                if decl.name not in inputs:
                    raise InterpretError(f"missing input tensor {decl.name}")
                value = np.array(inputs[decl.name], dtype=np.float64)
                if value.shape != tuple(decl.shape):
                    raise ShapeMismatch(f"input {decl.name} has shape {value.shape}, expected {tuple(decl.shape)}")
                self.storage[decl.name] = value
            else:
                self.storage[decl.name] = np.zeros(decl.shape, dtype=np.float64)
        self._body(self.program.body, {}, ())
        return {d.name: self.storage[d.name] for d in self.program.tensors if not outputs_only or d.role == "output"}

    def _body(self, body, env, loop_vars):
        for stmt in body:
            if isinstance(stmt, For):
                for k in range(stmt.extent):
                    env[stmt.var] = k
                    self._body(stmt.body, env, loop_vars + (stmt.var,))
                del env[stmt.var]
            else:
                self._store(stmt, env, loop_vars)

    def _index(self, access, env):
        if access.tensor not in self.storage:
            raise InterpretError(f"access to undeclared tensor {access.tensor}")
        shape = self.storage[access.tensor].shape
        index, dims = [], iter(shape)
        for ix in access.indices:
            if isinstance(ix, NewAxis):
                index.append(None)
                continue
            n = next(dims)
            if isinstance(ix, Point):
                k = int(eval_scalar(ix.expr, env))
                if not 0 <= k < n:
                    raise OutOfBounds(f"{access.tensor} index {k} outside [0, {n})")
                index.append(k)
            else:
                lo = int(eval_scalar(ix.lo, env))
                hi = lo + ix.step * (ix.extent - 1)
                if lo < 0 or hi >= n:
                    raise OutOfBounds(f"{access.tensor} slice [{lo}, {hi}] outside [0, {n})")
                index.append(slice(lo, hi + 1, ix.step))
        return tuple(index)

    def _op(self, table, op):
        if self.masked and op in _V_MASKED:
            return _V_MASKED[op]
        return table[op]

    def eval(self, e, env):
        if isinstance(e, TileScalar):
            return np.float64(eval_scalar(e.expr, env))
        if isinstance(e, TileRef):
            return np.array(self.storage[e.access.tensor][self._index(e.access, env)], dtype=np.float64)
        if isinstance(e, TileUnary):
            return self._op(_V_UNARY, e.op)(self.eval(e.arg, env))
        if isinstance(e, TileBinary):
            return self._op(_V_BINARY, e.op)(self.eval(e.lhs, env), self.eval(e.rhs, env))
        if isinstance(e, TileSelect):
            cond = self.eval(e.cond, env) != 0
            self.masked += 1
            try:
                with np.errstate(all="ignore"):
                    then, otherwise = self.eval(e.then, env), self.eval(e.otherwise, env)
            finally:
                self.masked -= 1
            return np.where(cond, then, otherwise)
        if isinstance(e, TileReduce):
            x = self.eval(e.arg, env)
            axis = reduce_axis(e.arg, e.dim, x.ndim)
            if axis is None:
                raise InterpretError(f"reduce dim {e.dim} names no axis of its operand")
            names = _axes(x.ndim)
            kept = [n for k, n in enumerate(names) if k != axis]
            return einops_reduce(x, f"{' '.join(names)} -> {' '.join(kept)}", _EINOPS_REDUCTIONS[e.op])
        if isinstance(e, TilePermute):
            x = self.eval(e.arg, env)
            names = _axes(x.ndim)
            return rearrange(x, f"{' '.join(names)} -> {' '.join(names[o] for o in e.order)}")
        raise TypeError(f"not a tile expression: {e!r}")

    def _store(self, store, env, loop_vars):
        data = self.storage[store.tensor]
        index = self._index(store.access, env)
        region_shape = np.shape(data[index])
        value = np.broadcast_to(self.eval(store.value, env), region_shape)
        if store.reducer is None:
            data[index] = value
            return
        indexed = set()
        for ix in store.access.indices:
            expr = ix.expr if isinstance(ix, Point) else getattr(ix, "lo", None)
            if expr is not None:
                indexed |= {n.name for n in walk(expr) if isinstance(n, Var)}
        reduce_vars = [v for v in loop_vars if v not in indexed]
        if store.tensor not in self.plain and all(env[v] == 0 for v in reduce_vars):
            data[index] = store.reducer.identity
        carry = self.eval(store.carry, env) if store.carry is not None else np.array(data[index])
        data[index] = np.broadcast_to(_V_BINARY[store.reducer.op](carry, value), region_shape)


def interpret_tile(program, inputs, outputs_only=True):
    return TileInterpreter(program).run(inputs, outputs_only=outputs_only)
