"""
Loop-scalar IR: tensor declarations, loops and named store blocks.

A store is a *block*; its name is the handle schedule primitives use. A loop
nest in the unscheduled program is one top-level loop tree around one block;
after fusion several blocks share loops. A loop handle is ``<block>.<var>``,
the loop with that variable enclosing the block.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import networkx as nx
from loguru import logger

from src.core.errors import CyclicDataflow, NonAffine, NotInlinable, UnknownHandle, ValidationError
from src.core.expr import (
    Binary,
    Const,
    Load,
    Reducer,
    ScalarExpr,
    Unary,
    Var,
    free_vars,
    loads,
    print_expr,
    reads_tensor,
    replace_loads,
    substitute,
)

ROLES = ("input", "intermediate", "output")


@dataclass(frozen=True)
class TensorDecl:
    name: str
    shape: tuple
    role: str = "intermediate"
    dtype: str = "f32"
    scope: Optional[str] = None

    @property
    def rank(self):
        return len(self.shape)


@dataclass(frozen=True)
class For:
    var: str
    extent: int
    body: tuple = ()
    annotation: Optional[str] = None


@dataclass(frozen=True)
class Store:
    """
    A named store ``tensor[indices] = value``.

    With a reducer the store accumulates: ``X = carry f value`` where ``carry``
    defaults to the stored location itself. A carry other than the location is
    the repaired form produced by rolling update.
    """

    block: str
    tensor: str
    indices: tuple
    value: ScalarExpr
    reducer: Optional[Reducer] = None
    carry: Optional[ScalarExpr] = None

    @property
    def target(self):
        return Load(self.tensor, self.indices)

    @property
    def is_reduce(self):
        return self.reducer is not None

    def rhs(self):
        """The full right-hand side as one expression."""
        if self.reducer is None:
            return self.value
        carry = self.carry if self.carry is not None else self.target
        return self.reducer.combine(carry, self.value)

    def reads(self):
        found = {ld.tensor for ld in loads(self.value)}
        if self.reducer is not None:
            found |= {ld.tensor for ld in loads(self.carry if self.carry is not None else self.target)}
        return found

    def index_vars(self):
        out = set()
        for index in self.indices:
            out |= free_vars(index)
        return out


@dataclass(frozen=True)
class Program:
    tensors: tuple = ()
    body: tuple = ()

    def tensor(self, name):
        for decl in self.tensors:
            if decl.name == name:
                return decl
        raise ValidationError(f"tensor {name} is not declared")

    def has_tensor(self, name):
        return any(decl.name == name for decl in self.tensors)

    def inputs(self):
        return [d for d in self.tensors if d.role == "input"]

    def outputs(self):
        return [d for d in self.tensors if d.role == "output"]

    def with_body(self, body):
        return replace(self, body=tuple(body))

    def with_tensors(self, tensors):
        return replace(self, tensors=tuple(tensors))

    def blocks(self):
        return list(iter_blocks(self.body))

    def block_names(self):
        return [site.store.block for site in iter_blocks(self.body)]

    def site(self, name):
        for site in iter_blocks(self.body):
            if site.store.block == name:
                return site
        raise UnknownHandle(f"no block named {name}")

    def store(self, name):
        return self.site(name).store

    def nest(self, name):
        return LoopNest.of(self.site(name))


@dataclass(frozen=True)
class BlockSite:
    """A block with its enclosing loops (outermost first) and their tree paths."""

    store: Store
    loops: tuple
    loop_paths: tuple
    path: tuple
    position: int

    @property
    def loop_vars(self):
        return tuple(loop.var for loop in self.loops)

    def loop(self, var):
        for loop, path in zip(self.loops, self.loop_paths):
            if loop.var == var:
                return loop, path
        raise UnknownHandle(f"block {self.store.block} has no enclosing loop {var}")

    def reduce_vars(self):
        indexed = self.store.index_vars()
        return tuple(v for v in self.loop_vars if v not in indexed)

    def map_vars(self):
        indexed = self.store.index_vars()
        return tuple(v for v in self.loop_vars if v in indexed)


@dataclass(frozen=True)
class LoopNest:
    """View of one block as a loop nest: map loops, reduce loops, annotations."""

    name: str
    map_loops: tuple
    reduce_loops: tuple
    annotations: dict = field(default_factory=dict)
    store: Optional[Store] = None

    @classmethod
    def of(cls, site):
        reduce_vars = set(site.reduce_vars())
        map_loops = tuple((l.var, l.extent) for l in site.loops if l.var not in reduce_vars)
        reduce_loops = tuple((l.var, l.extent) for l in site.loops if l.var in reduce_vars)
        annotations = {l.var: l.annotation for l in site.loops if l.annotation}
        return cls(site.store.block, map_loops, reduce_loops, annotations, site.store)

    @property
    def is_reduce(self):
        return self.store.is_reduce


# ---------------------------------------------------------------------------
# Tree utilities


def iter_blocks(body, loops=(), loop_paths=(), prefix=(), counter=None):
    """Yield a BlockSite for every store in program order."""
    counter = counter if counter is not None else [0]
    for index, stmt in enumerate(body):
        path = prefix + (index,)
        if isinstance(stmt, Store):
            yield BlockSite(stmt, loops, loop_paths, path, counter[0])
            counter[0] += 1
        else:
            yield from iter_blocks(stmt.body, loops + (stmt,), loop_paths + (path,), path, counter)


def iter_loops(body, prefix=()):
    for index, stmt in enumerate(body):
        if isinstance(stmt, For):
            path = prefix + (index,)
            yield path, stmt
            yield from iter_loops(stmt.body, path)


def get_at(body, path):
    node = body[path[0]]
    for index in path[1:]:
        node = node.body[index]
    return node


def update_at(body, path, fn):
    """Replace the statement at ``path`` by the list ``fn(stmt)``; empty loops are pruned."""
    body = list(body)
    index = path[0]
    if len(path) == 1:
        replacement = list(fn(body[index]))
    else:
        loop = body[index]
        inner = update_at(loop.body, path[1:], fn)
        replacement = [replace(loop, body=inner)] if inner else []
    return tuple(body[:index] + replacement + body[index + 1:])


def map_stores(body, fn):
    """Rebuild the tree with ``fn(store) -> Store`` applied to every store."""
    out = []
    for stmt in body:
        if isinstance(stmt, Store):
            out.append(fn(stmt))
        else:
            out.append(replace(stmt, body=map_stores(stmt.body, fn)))
    return tuple(out)


def remove_block(body, name):
    out = []
    for stmt in body:
        if isinstance(stmt, Store):
            if stmt.block != name:
                out.append(stmt)
        else:
            inner = remove_block(stmt.body, name)
            if inner:
                out.append(replace(stmt, body=inner))
    return tuple(out)


def map_store_exprs(store, fn):
    """Apply ``fn`` to every expression of a store (indices, value, carry)."""
    return replace(
        store,
        indices=tuple(fn(i) for i in store.indices),
        value=fn(store.value),
        carry=fn(store.carry) if store.carry is not None else None,
    )


def rename_vars_in_store(store, mapping):
    if not mapping:
        return store
    exprs = {k: Var(v) if isinstance(v, str) else v for k, v in mapping.items()}
    return map_store_exprs(store, lambda e: substitute(e, exprs))


def rename_tensor(program, old, new):
    """Rename a tensor in its declaration and in every load and store."""

    def fix_expr(e):
        return replace_loads(e, lambda ld: Load(new, ld.indices) if ld.tensor == old else None)

    def fix_store(store):
        store = map_store_exprs(store, fix_expr)
        if store.tensor == old:
            store = replace(store, tensor=new)
        return store

    tensors = [replace(d, name=new) if d.name == old else d for d in program.tensors]
    return Program(tuple(tensors), map_stores(program.body, fix_store))


def fresh_name(base, taken):
    if base not in taken:
        return base
    k = 0
    while f"{base}{k}" in taken:
        k += 1
    return f"{base}{k}"


def all_loop_vars(program):
    return {loop.var for _, loop in iter_loops(program.body)}


def writers_of(program, tensor):
    return [site for site in iter_blocks(program.body) if site.store.tensor == tensor]


def readers_of(program, tensor):
    return [site for site in iter_blocks(program.body) if tensor in site.store.reads()]


def has_explicit_init(program, tensor):
    """True when some plain store writes ``tensor`` (e.g. a decomposed reduction init)."""
    return any(site.store.tensor == tensor and not site.store.is_reduce for site in iter_blocks(program.body))


# ---------------------------------------------------------------------------
# Affine accesses


def affine_of(e):
    """
    Decompose an index expression into integer coefficients.

    Returns:
        tuple: (dict var -> coefficient, constant offset)
    """
    if isinstance(e, Const):
        if e.value != int(e.value):
            raise NonAffine(f"non-integer index constant {e.value}")
        return {}, int(e.value)
    if isinstance(e, Var):
        return {e.name: 1}, 0
    if isinstance(e, Binary) and e.op in ("+", "-"):
        (ca, ka), (cb, kb) = affine_of(e.lhs), affine_of(e.rhs)
        sign = 1 if e.op == "+" else -1
        coeffs = dict(ca)
        for var, c in cb.items():
            coeffs[var] = coeffs.get(var, 0) + sign * c
        return {v: c for v, c in coeffs.items() if c != 0}, ka + sign * kb
    if isinstance(e, Binary) and e.op == "*":
        (ca, ka), (cb, kb) = affine_of(e.lhs), affine_of(e.rhs)
        if ca and cb:
            raise NonAffine(f"product of loop variables in {print_expr(e)}")
        scale, (coeffs, offset) = (kb, (ca, ka)) if not cb else (ka, (cb, kb))
        return {v: c * scale for v, c in coeffs.items() if c * scale != 0}, offset * scale
    if isinstance(e, Unary) and e.op == "neg":
        coeffs, offset = affine_of(e.arg)
        return {v: -c for v, c in coeffs.items()}, -offset
    raise NonAffine(f"index {print_expr(e)} is not affine")


@dataclass(frozen=True)
class AffineAccess:
    """
    The access ``phi(i) = A i + b`` of one tensor.

    Args:
        tensor (str): Accessed tensor.
        vars (tuple): Loop variables, one per column of ``matrix``.
        matrix (tuple): Rows of integer coefficients, one row per tensor dimension.
        offset (tuple): Constant offset per tensor dimension.
    """

    tensor: str
    vars: tuple
    matrix: tuple
    offset: tuple

    @classmethod
    def of(cls, tensor, indices, loop_vars):
        rows, offsets = [], []
        for index in indices:
            coeffs, k = affine_of(index)
            unknown = set(coeffs) - set(loop_vars)
            if unknown:
                raise NonAffine(f"index {print_expr(index)} uses variables {sorted(unknown)} outside the loop scope")
            rows.append(tuple(coeffs.get(v, 0) for v in loop_vars))
            offsets.append(k)
        return cls(tensor, tuple(loop_vars), tuple(rows), tuple(offsets))

    @property
    def rank(self):
        return len(self.matrix)

    def column(self, var):
        j = self.vars.index(var)
        return tuple(row[j] for row in self.matrix)

    def split(self, inner):
        """Return (U, V, b): the outer columns, the inner columns and the offset."""
        outer = [v for v in self.vars if v not in inner]
        u = tuple(tuple(row[self.vars.index(v)] for v in outer) for row in self.matrix)
        v = tuple(tuple(row[self.vars.index(x)] for x in inner) for row in self.matrix)
        return u, v, self.offset

    def evaluate(self, env):
        return tuple(
            sum(c * env[v] for c, v in zip(row, self.vars)) + b for row, b in zip(self.matrix, self.offset)
        )

    def bounds(self, extents):
        """Interval of each dimension over the box ``0 <= var < extents[var]``."""
        out = []
        for row, b in zip(self.matrix, self.offset):
            lo = hi = b
            for c, v in zip(row, self.vars):
                span = c * (extents[v] - 1)
                lo += min(0, span)
                hi += max(0, span)
            out.append((lo, hi))
        return tuple(out)


# ---------------------------------------------------------------------------
# Validation


def validate(program):
    """
    Check declarations, scoping, ranks and in-bounds affine accesses.

    Raises:
        ValidationError: On the first violation found.
    """
    seen = set()
    for decl in program.tensors:
        if decl.name in seen:
            raise ValidationError(f"tensor {decl.name} declared twice")
        seen.add(decl.name)
        if decl.role not in ROLES:
            raise ValidationError(f"tensor {decl.name} has unknown role {decl.role}")
        if not decl.shape or any(int(d) != d or d <= 0 for d in decl.shape):
            raise ValidationError(f"tensor {decl.name} must have a static positive shape, got {decl.shape}")
    for _, loop in iter_loops(program.body):
        if int(loop.extent) != loop.extent or loop.extent <= 0:
            raise ValidationError(f"loop {loop.var} has non-positive extent {loop.extent}")
    names = set()
    for site in iter_blocks(program.body):
        store = site.store
        if store.block in names:
            raise ValidationError(f"block name {store.block} is used twice")
        names.add(store.block)
        if len(set(site.loop_vars)) != len(site.loop_vars):
            raise ValidationError(f"block {store.block} is nested in loops that reuse a variable")
        extents = {loop.var: loop.extent for loop in site.loops}
        decl = program.tensor(store.tensor)
        if decl.role == "input":
            raise ValidationError(f"block {store.block} writes input tensor {store.tensor}")
        accesses = [store.target] + loads(store.value)
        if store.carry is not None:
            accesses += loads(store.carry)
        for ld in accesses:
            _check_access(program, store.block, ld, extents)
        scope_vars = set(extents)
        for e in (store.value, store.carry) if store.carry is not None else (store.value,):
            stray = free_vars(e) - scope_vars
            if stray:
                raise ValidationError(f"block {store.block} uses unbound variables {sorted(stray)}")
    return program


def _check_access(program, block, ld, extents):
    decl = program.tensor(ld.tensor)
    if len(ld.indices) != decl.rank:
        raise ValidationError(f"block {block}: {ld.tensor} has rank {decl.rank}, accessed with {len(ld.indices)} indices")
    try:
        access = AffineAccess.of(ld.tensor, ld.indices, tuple(extents))
    except NonAffine as e:
        raise ValidationError(f"block {block}: {e}") from e
    for dim, (lo, hi) in enumerate(access.bounds(extents)):
        if lo < 0 or hi >= decl.shape[dim]:
            raise ValidationError(
                f"block {block}: {print_expr(ld)} dimension {dim} spans [{lo}, {hi}] outside [0, {decl.shape[dim] - 1}]"
            )


# ---------------------------------------------------------------------------
# Dataflow


class DataflowGraph:
    """Producer/consumer graph over blocks, kept in program order."""

    def __init__(self, program, graph, rolled=frozenset()):
        self.program = program
        self.graph = graph
        self.rolled = frozenset(rolled)

    def nodes(self):
        return sorted(self.graph.nodes, key=lambda n: self.graph.nodes[n]["position"])

    def edges(self):
        return sorted(self.graph.edges, key=lambda e: (self.graph.nodes[e[0]]["position"], self.graph.nodes[e[1]]["position"]))

    def producers(self, name):
        return sorted(self.graph.predecessors(name), key=lambda n: self.graph.nodes[n]["position"])

    def consumers(self, name):
        return sorted(self.graph.successors(name), key=lambda n: self.graph.nodes[n]["position"])

    def site(self, name):
        if name not in self.graph:
            raise UnknownHandle(f"no block named {name}")
        return self.graph.nodes[name]["site"]

    def is_reduce(self, name):
        return self.site(name).store.is_reduce or name in self.rolled


def _shares_loop(a, b):
    return bool(set(a.loop_paths) & set(b.loop_paths))


def build_dataflow(program, rolled=frozenset()):
    """
    Build the producer/consumer graph of ``program``.

    An edge P -> Q exists when Q reads a tensor P writes. A read of a tensor
    written later inside a shared loop is loop-carried and not an edge.

    Raises:
        CyclicDataflow: When the graph has a cycle.
    """
    graph = nx.DiGraph()
    sites = list(iter_blocks(program.body))
    for site in sites:
        graph.add_node(site.store.block, site=site, position=site.position)
    for producer in sites:
        for consumer in sites:
            if producer is consumer or producer.store.tensor not in consumer.store.reads():
                continue
            if producer.position > consumer.position and _shares_loop(producer, consumer):
                continue
            graph.add_edge(producer.store.block, consumer.store.block, tensor=producer.store.tensor)
    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        raise CyclicDataflow(f"dataflow cycle through {[u for u, _ in cycle]}")
    return DataflowGraph(program, graph, rolled)


def _inlinable_map(site):
    """Substitution from a map block's index variables to positions, or None."""
    names = []
    for index in site.store.indices:
        if not isinstance(index, Var) or index.name in names:
            return None
        names.append(index.name)
    if set(names) != set(site.loop_vars):
        return None
    return names


def trace_reads(g, name):
    """
    Follow the reads of a block back through map blocks.

    Yields:
        tuple: (producer block, load expressed in the variables of ``name``)
        for every non-map producer reached and every map producer that cannot
        be traced through.
    """
    site = g.site(name)
    frontier = [(ld, name) for ld in loads(site.store.value)]
    seen = set()
    while frontier:
        ld, consumer = frontier.pop()
        for producer in g.producers(consumer):
            psite = g.site(producer)
            if psite.store.tensor != ld.tensor or (producer, ld) in seen:
                continue
            seen.add((producer, ld))
            names = _inlinable_map(psite) if not g.is_reduce(producer) else None
            if names is None:
                yield producer, ld
                continue
            mapping = dict(zip(names, ld.indices))
            for inner in loads(psite.store.value):
                frontier.append((Load(inner.tensor, tuple(substitute(i, mapping) for i in inner.indices)), producer))


def reduce_predecessors(g, target, rolled=None):
    """
    Reduce blocks reachable from ``target`` through map blocks only, whose
    results reach ``target`` indexed by its map variables.

    Returns:
        list: Block names in program order.
    """
    if rolled is not None:
        g = DataflowGraph(g.program, g.graph, rolled)
    site = g.site(target)
    map_vars = set(site.map_vars())
    found = set()
    for producer, ld in trace_reads(g, target):
        if not g.is_reduce(producer):
            continue
        used = set()
        for index in ld.indices:
            used |= free_vars(index)
        if used <= map_vars:
            found.add(producer)
        else:
            logger.debug("{} reads {} through reduce variables; treated as a constant input", target, producer)
    return sorted(found, key=lambda n: g.graph.nodes[n]["position"])


def map_ancestors(g, target):
    """Map blocks reachable backwards from ``target`` through map blocks only."""
    out, stack = [], list(g.producers(target))
    while stack:
        name = stack.pop()
        if name in out or g.is_reduce(name):
            continue
        out.append(name)
        stack.extend(g.producers(name))
    return sorted(out, key=lambda n: g.graph.nodes[n]["position"])


def inline_nest(program, producer, consumer):
    """
    Replace the consumer's loads of the producer's tensor by the producer's expression.

    The producer block and its tensor are removed when nothing else reads them.

    Raises:
        NotInlinable: If the producer is a reduction or its store is not indexed
            by its own loop variables.
    """
    psite, csite = program.site(producer), program.site(consumer)
    pstore = psite.store
    if pstore.is_reduce:
        raise NotInlinable(f"{producer} is a reduce nest")
    names = _inlinable_map(psite)
    if names is None:
        raise NotInlinable(f"{producer} is not indexed by exactly its own loop variables")
    if reads_tensor(pstore.value, pstore.tensor):
        raise NotInlinable(f"{producer} reads its own output")

    def inline(ld):
        if ld.tensor != pstore.tensor:
            return None
        return substitute(pstore.value, {n: i for n, i in zip(names, ld.indices)})

    cstore = csite.store
    new_store = replace(
        cstore,
        value=replace_loads(cstore.value, inline),
        carry=replace_loads(cstore.carry, inline) if cstore.carry is not None else None,
    )
    body = update_at(program.body, csite.path, lambda _: [new_store])
    result = program.with_body(body)
    still_read = readers_of(result, pstore.tensor)
    if not still_read and program.tensor(pstore.tensor).role != "output":
        result = result.with_body(remove_block(result.body, producer))
        result = result.with_tensors(d for d in result.tensors if d.name != pstore.tensor)
        logger.debug("inlined {} into {} and removed it", producer, consumer)
    else:
        logger.debug("inlined {} into {}; kept for {} other readers", producer, consumer, len(still_read))
    return result


# ---------------------------------------------------------------------------
# Printing


INDENT = "  "


def format_decl(decl):
    dims = ", ".join(str(d) for d in decl.shape)
    text = f"tensor {decl.name}: {decl.dtype}[{dims}] {decl.role}"
    if decl.scope:
        text += f" @{decl.scope}"
    return text


def format_store(store):
    target = print_expr(store.target)
    if store.reducer is None:
        return f"{target} = {print_expr(store.value)}"
    if store.carry is None and store.reducer.op in ("+", "*"):
        return f"{target} {store.reducer.op}= {print_expr(store.value)}"
    return f"{target} = {print_expr(store.rhs())}"


def format_loop_header(loop):
    if loop.annotation:
        return f'for {loop.var} in range({loop.extent}, "{loop.annotation}"):'
    return f"for {loop.var} in range({loop.extent}):"


def _print_body(body, depth, lines, format_leaf):
    for stmt in body:
        if isinstance(stmt, For):
            lines.append(INDENT * depth + format_loop_header(stmt))
            _print_body(stmt.body, depth + 1, lines, format_leaf)
        else:
            lines.append(INDENT * depth + format_leaf(stmt))


def print_loop_ir(program):
    """
    Render a program as text: declarations, a blank line, then the loop tree.

    Each store line ends with ``# <block>``.
    """
    lines = [format_decl(d) for d in program.tensors]
    if program.body:
        lines.append("")
        _print_body(program.body, 0, lines, lambda s: f"{format_store(s)}  # {s.block}")
    return "\n".join(lines) + "\n"
