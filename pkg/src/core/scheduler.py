"""
Schedule primitives over the loop-scalar IR.

Every primitive maps a ScheduleState to a new ScheduleState. Nest handles are
block names and loop handles are ``<block>.<var>``. The two reduction fusions
(rolling update and split-k update) never raise: when any of their steps
fails they return the input program with a Diagnostic attached.
"""

from dataclasses import dataclass, replace

from loguru import logger

from src.core.errors import (
    ExprError,
    FusionIllegal,
    InvalidTile,
    IRError,
    NoReducePredecessor,
    NonAffine,
    NotCommuting,
    NotInlinable,
    PatternMismatch,
    RollingLoopMismatch,
    ScheduleError,
    UnknownHandle,
)
from src.core.expr import (
    REDUCERS,
    Binary,
    Const,
    Load,
    Select,
    Unary,
    Var,
    free_vars,
    loads,
    print_expr,
    reads_tensor,
    replace_loads,
    substitute,
    walk,
)
from src.core.loop_ir import (
    AffineAccess,
    For,
    Store,
    TensorDecl,
    build_dataflow,
    fresh_name,
    inline_nest,
    iter_blocks,
    map_ancestors,
    map_store_exprs,
    map_stores,
    reduce_predecessors,
    remove_block,
    rename_tensor,
    update_at,
    validate,
)
from src.core.repair_solver import derive, primed


@dataclass(frozen=True)
class Diagnostic:
    primitive: str
    step: str
    reason: str

    def format(self):
        return f"{self.primitive}: failed at step '{self.step}': {self.reason}"


@dataclass(frozen=True)
class RepairBinding:
    """Cached previous/current buffers of a reduce predecessor rolled under ``loop``."""

    block: str
    prev: str
    curr: str
    reducer: object
    loop: str
    roll: str = ""


@dataclass(frozen=True)
class PrivatizedPair:
    block: str
    local: str
    global_: str
    partial: str
    tensor: str
    var: str


@dataclass(frozen=True)
class ScheduleState:
    program: object
    bindings: tuple = ()
    pairs: tuple = ()
    aliases: tuple = ()
    certificates: tuple = ()
    log: tuple = ()
    diagnostics: tuple = ()
    annotations: tuple = ()

    def resolve(self, name):
        """Follow handle renames until a block of the current program is reached."""
        table = dict(self.aliases)
        seen = set()
        while name not in seen and not self._has_block(name) and name in table:
            seen.add(name)
            name = table[name]
        return name

    def _has_block(self, name):
        return any(site.store.block == name for site in iter_blocks(self.program.body))

    def binding(self, block):
        for b in self.bindings:
            if b.block == block:
                return b
        return None

    def pair(self, block):
        for pair in self.pairs:
            if block in (pair.block, pair.local, pair.global_):
                return pair
        return None

    def rolled(self):
        return frozenset(b.block for b in self.bindings)

    def with_program(self, program, entry=None, **changes):
        log = self.log + ((entry,) if entry else ())
        return replace(self, program=program, log=log, **changes)


def initial_state(program):
    return ScheduleState(program)


# ---------------------------------------------------------------------------
# Handles and tree helpers


def split_handle(handle):
    block, sep, var = handle.rpartition(".")
    if not sep or not block or not var:
        raise UnknownHandle(f"loop handle {handle!r} must look like <block>.<var>")
    return block, var


def loop_site(state, handle):
    """Return (host site, loop, loop path) for a loop handle."""
    block, var = split_handle(handle)
    site = state.program.site(state.resolve(block))
    loop, path = site.loop(var)
    return site, loop, path


def block_site(state, name):
    return state.program.site(state.resolve(name))


def subtree_stores(stmt):
    if isinstance(stmt, Store):
        return [stmt]
    return [site.store for site in iter_blocks(stmt.body)]


def _writes(stmt):
    return {s.tensor for s in subtree_stores(stmt)}


def _reads(stmt):
    out = set()
    for s in subtree_stores(stmt):
        out |= s.reads() - ({s.tensor} if s.is_reduce and s.carry is None else set())
    return out


def _uses_var(stmt, var):
    for s in subtree_stores(stmt):
        exprs = list(s.indices) + [s.value] + ([s.carry] if s.carry is not None else [])
        if any(var in free_vars(e) for e in exprs):
            return True
    return False


def nest(loops, stmt):
    for loop in reversed(loops):
        stmt = replace(loop, body=(stmt,))
    return stmt


def _value_loads(store):
    found = loads(store.value)
    if store.carry is not None:
        found += [ld for ld in loads(store.carry) if ld != store.target]
    return found


def _normalize_carry(store):
    if store.carry is not None and store.carry == store.target:
        return replace(store, carry=None)
    return store


def _add_tensor(program, decl):
    return program.with_tensors(program.tensors + (decl,))


def _tensor_names(program):
    return {d.name for d in program.tensors}


def _block_names(program):
    return set(program.block_names())


def _is_reduce_site(state, site):
    return site.store.is_reduce or state.binding(site.store.block) is not None


# ---------------------------------------------------------------------------
# Fusion


def _match_loops(site, host, path_loops, taken, reduce_var=None):
    """
    Map the block's loops onto the host path.

    ``reduce_var`` names a host loop that must pair with a reduce loop of the
    block even when it indexes the host's own store.

    Returns:
        tuple: (substitution for the block's variables, remaining inner loops)
    """
    block_loops = list(site.loops)
    block_reduce = set(site.reduce_vars())
    host_reduce = set(host.reduce_vars())
    matched = {}
    substitution = {}
    for h in path_loops:
        role = h.var in host_reduce or h.var == reduce_var

        def candidates():
            free = [n for n in range(len(block_loops)) if n not in matched]
            same_role = [n for n in free if (block_loops[n].var in block_reduce) == role]
            yield from (n for n in free if block_loops[n].var == h.var and block_loops[n].extent % h.extent == 0)
            yield from (n for n in same_role if block_loops[n].extent == h.extent)
            yield from (n for n in same_role if block_loops[n].extent % h.extent == 0)
            yield from (n for n in free if block_loops[n].extent == h.extent)
            yield from (n for n in free if block_loops[n].extent % h.extent == 0)

        pick = next(candidates(), None)
        if pick is None:
            raise FusionIllegal(f"{site.store.block} has no loop matching {h.var} (extent {h.extent})")
        b = block_loops[pick]
        if b.extent == h.extent:
            substitution[b.var] = Var(h.var)
            matched[pick] = None
        else:
            q = b.extent // h.extent
            inner = fresh_name(f"{b.var}1", taken)
            taken.add(inner)
            substitution[b.var] = Binary("+", Binary("*", Var(h.var), Const(float(q))), Var(inner))
            matched[pick] = For(inner, q, (), b.annotation)
    host_vars = {h.var for h in path_loops}
    remaining = []
    for n, b in enumerate(block_loops):
        if n in matched:
            if matched[n] is not None:
                remaining.append(matched[n])
            continue
        var = b.var
        if var in host_vars:
            var = fresh_name(var, taken)
            taken.add(var)
            substitution[b.var] = Var(var)
        remaining.append(For(var, b.extent, (), b.annotation))
    return substitution, remaining


def _access_ok(write, write_loops, load, read_loops, shared):
    """Memory-location check: equal shared coefficients and read range inside write range."""
    w_vars = tuple(l.var for l in write_loops)
    r_vars = tuple(l.var for l in read_loops)
    try:
        wa = AffineAccess.of(write.tensor, write.indices, w_vars)
        ra = AffineAccess.of(load.tensor, load.indices, r_vars)
    except NonAffine:
        return False
    w_ext = {l.var: l.extent for l in write_loops}
    r_ext = {l.var: l.extent for l in read_loops}
    for dim in range(wa.rank):
        w_row = dict(zip(w_vars, wa.matrix[dim]))
        r_row = dict(zip(r_vars, ra.matrix[dim]))
        for s in shared:
            if w_row.get(s, 0) != r_row.get(s, 0):
                return False
        w_lo = w_hi = wa.offset[dim]
        for v, c in w_row.items():
            if v not in shared:
                w_lo += min(0, c * (w_ext[v] - 1))
                w_hi += max(0, c * (w_ext[v] - 1))
        r_lo = r_hi = ra.offset[dim]
        for v, c in r_row.items():
            if v not in shared:
                r_lo += min(0, c * (r_ext[v] - 1))
                r_hi += max(0, c * (r_ext[v] - 1))
        if r_lo < w_lo or r_hi > w_hi:
            return False
    return True


def _fuse(state, block, handle, temporal, direction=None, rewrite=None, primitive="fuse", reduce_var=None):
    """
    Move ``block`` under the loop ``handle``.

    Args:
        temporal (bool): Also reject producers that reduce over a shared loop and
            consumers of such reductions.
        direction (str): ``producer``/``consumer`` to require a placement side.
        rewrite (callable): Applied to the renamed store before the legality checks.

    Returns:
        Program: The fused program (unchanged when the block is already under the loop).
    """
    program = state.program
    site = block_site(state, block)
    host, l_loop, l_path = loop_site(state, handle)
    if site.store.block == host.store.block or l_path in site.loop_paths:
        logger.debug("{} is already under {}", site.store.block, handle)
        return program
    k = host.loop_paths.index(l_path)
    path_loops = host.loops[: k + 1]
    shared = [l.var for l in path_loops]
    taken = set(shared) | set(site.loop_vars)
    substitution, remaining = _match_loops(site, host, path_loops, taken, reduce_var)
    store = map_store_exprs(site.store, lambda e: substitute(e, substitution))
    if rewrite is not None:
        store = rewrite(store)
    new_loops = list(path_loops) + remaining
    under = list(iter_blocks(l_loop.body, host.loops[: k + 1], host.loop_paths[: k + 1], l_path))
    positions = [s.position for s in iter_blocks(program.body) if l_path in s.loop_paths]
    first, last = min(positions), max(positions)
    producer = site.position < first
    if direction == "producer" and not producer:
        raise FusionIllegal(f"{site.store.block} does not precede {handle}")
    if direction == "consumer" and producer:
        raise FusionIllegal(f"{site.store.block} does not follow {handle}")

    reads = {ld.tensor for ld in _value_loads(store)}
    window = (site.position, first) if producer else (last, site.position)
    for other in iter_blocks(program.body):
        if not window[0] < other.position < window[1] or l_path in other.loop_paths:
            continue
        o = other.store
        if store.tensor in o.reads() or o.tensor in reads or o.tensor == store.tensor:
            raise FusionIllegal(f"{o.block} between {site.store.block} and {handle} touches its data")

    body = list(l_loop.body)
    rolls = {b.roll for b in state.bindings}
    roll_at = next((n for n, stmt in enumerate(body) if isinstance(stmt, Store) and stmt.block in rolls), len(body))
    if producer:
        index = next((n for n, stmt in enumerate(body) if store.tensor in _reads(stmt)), len(body))
        index = min(index, roll_at)
        for stmt in body:
            if _writes(stmt) & (reads | {store.tensor}):
                raise FusionIllegal(f"statements under {handle} write data {site.store.block} uses")
        for reader in under:
            for ld in _value_loads(reader.store):
                if ld.tensor == store.tensor and not _access_ok(store, new_loops, ld, reader.loops, shared):
                    raise FusionIllegal(f"{reader.store.block} reads {store.tensor} outside what one iteration writes")
        if temporal and store.is_reduce:
            reduce_vars = {l.var for l in new_loops} - set().union(*(free_vars(i) for i in store.indices))
            if reduce_vars & set(shared):
                raise FusionIllegal(f"{site.store.block} reduces over a loop it would share with {handle}")
    else:
        index = 0
        for n, stmt in enumerate(body):
            if _writes(stmt) & reads:
                index = n + 1
        index = min(index, roll_at)
        for stmt in body[index:]:
            if _writes(stmt) & reads:
                raise FusionIllegal(f"{site.store.block} would read values written later in {handle}")
        for stmt in body:
            if store.tensor in _reads(stmt) or store.tensor in _writes(stmt):
                raise FusionIllegal(f"statements under {handle} use {store.tensor}")
        for writer in under:
            for ld in _value_loads(store):
                if ld.tensor != writer.store.tensor:
                    continue
                if not _access_ok(writer.store, writer.loops, ld, new_loops, shared):
                    raise FusionIllegal(f"{site.store.block} reads {ld.tensor} outside what one iteration writes")
                if temporal and _is_reduce_site(state, writer) and set(writer.reduce_vars()) & set(shared):
                    raise FusionIllegal(f"{writer.store.block} is still reducing over a loop of {handle}")

    moved = nest(remaining, store)
    pruned = program.with_body(remove_block(program.body, site.store.block))
    _, _, new_l_path = loop_site(replace(state, program=pruned), f"{host.store.block}.{l_loop.var}")

    def insert(loop):
        new_body = loop.body[:index] + (moved,) + loop.body[index:]
        return [replace(loop, body=new_body)]

    result = pruned.with_body(update_at(pruned.body, new_l_path, insert))
    logger.debug("{} {} under {} at position {}", primitive, site.store.block, handle, index)
    return result


def naive_loop_fusion(state, block, handle):
    """Fuse ``block`` under ``handle`` checking memory locations only."""
    program = _fuse(state, block, handle, temporal=False)
    return state.with_program(program, ("fuse", (block, handle)))


def compute_at(state, block, handle):
    program = _fuse(state, block, handle, temporal=True, direction="producer", primitive="compute_at")
    return state.with_program(program, ("compute_at", (block, handle)))


def reverse_compute_at(state, block, handle):
    program = _fuse(state, block, handle, temporal=True, direction="consumer", primitive="reverse_compute_at")
    return state.with_program(program, ("reverse_compute_at", (block, handle)))


def inline(state, producer, consumer):
    program = inline_nest(state.program, state.resolve(producer), state.resolve(consumer))
    return state.with_program(program, ("inline", (producer, consumer)))


# ---------------------------------------------------------------------------
# Basic primitives


def tile(state, block, loop_vars, sizes, names=None):
    """
    Split perfectly nested loops by inner tile sizes and order outer loops first.

    ``tile(s, b, ["i", "j"], [4, 2])`` on an 8x8 nest gives loops i0:2, j0:4, i1:4, j1:2.
    """
    if len(loop_vars) != len(sizes) or not loop_vars:
        raise InvalidTile("tile needs one size per loop")
    site = block_site(state, block)
    chain = [site.loop(v) for v in loop_vars]
    for (outer, _), (inner, inner_path) in zip(chain, chain[1:]):
        if outer.body != (inner,):
            raise InvalidTile(f"loops {outer.var} and {inner.var} are not perfectly nested")
    taken = {l.var for l in site.loops} | {l.var for s in iter_blocks(state.program.body) for l in s.loops}
    outers, inners, substitution = [], [], {}
    for n, ((loop, _), size) in enumerate(zip(chain, sizes)):
        if size <= 0 or size > loop.extent or loop.extent % size:
            raise InvalidTile(f"tile size {size} does not divide loop {loop.var} of extent {loop.extent}")
        outer_name, inner_name = names[n] if names else (fresh_name(f"{loop.var}0", taken), fresh_name(f"{loop.var}1", taken))
        taken |= {outer_name, inner_name}
        if size == loop.extent:
            inner_name = loop.var
        else:
            substitution[loop.var] = Binary(
                "+", Binary("*", Var(outer_name), Const(float(size))), Var(inner_name)
            )
        outers.append(For(outer_name, loop.extent // size, (), loop.annotation))
        inners.append(For(inner_name, size))
    innermost = chain[-1][0]
    body = map_stores(innermost.body, lambda s: map_store_exprs(s, lambda e: substitute(e, substitution)))
    new_stmt = body
    for loop in reversed(outers + inners):
        new_stmt = (replace(loop, body=new_stmt),)
    program = state.program.with_body(update_at(state.program.body, chain[0][1], lambda _: list(new_stmt)))
    logger.debug("tile {} {} {}", block, loop_vars, sizes)
    return state.with_program(program, ("tile", (block, tuple(loop_vars), tuple(sizes))))


def decompose_reduction(state, block, var):
    """Hoist the identity initialization of a reduce block in front of loop ``var``."""
    site = block_site(state, block)
    store = site.store
    if not store.is_reduce:
        raise ScheduleError(f"{block} is not a reduce nest", step="decompose")
    loop, path = site.loop(var)
    depth = site.loop_vars.index(var)
    reduce_vars = site.reduce_vars()
    if any(site.loop_vars.index(v) < depth for v in reduce_vars):
        raise ScheduleError(f"loop {var} is nested inside a reduce loop of {block}", step="decompose")
    map_inside = [l for l in site.loops[depth:] if l.var not in reduce_vars]
    name = fresh_name(f"{store.block}_init", _block_names(state.program))
    init = nest([For(l.var, l.extent) for l in map_inside], Store(name, store.tensor, store.indices, Const(store.reducer.identity)))
    program = state.program.with_body(update_at(state.program.body, path, lambda l: [init, l]))
    logger.debug("decompose_reduction {} at {}", block, var)
    return state.with_program(program, ("decompose_reduction", (block, var)))


def cache_read(state, block, tensor, scope):
    """Copy ``tensor`` into a scope-tagged buffer right before the nest that holds ``block``."""
    site = block_site(state, block)
    if isinstance(tensor, int):
        ordered = []
        for ld in _value_loads(site.store):
            if ld.tensor not in ordered:
                ordered.append(ld.tensor)
        if not 0 <= tensor < len(ordered):
            raise UnknownHandle(f"{block} has no read buffer {tensor}")
        tensor = ordered[tensor]
    if tensor not in {ld.tensor for ld in _value_loads(site.store)}:
        raise UnknownHandle(f"{block} does not read {tensor}")
    program = state.program
    top = site.path[0]
    start = sum(1 for _ in iter_blocks(program.body[:top]))
    for other in iter_blocks(program.body):
        if other.store.tensor == tensor and start <= other.position < site.position:
            raise ScheduleError(f"{tensor} is written inside the nest of {block}", step="cache")
    decl = program.tensor(tensor)
    name = fresh_name(f"{tensor}_{scope}", _tensor_names(program))
    taken = set()
    axes = []
    for d in decl.shape:
        axes.append(For(fresh_name(f"ax{len(axes)}", taken), d))
        taken.add(axes[-1].var)
    index = tuple(Var(a.var) for a in axes)
    copy_name = fresh_name(f"{site.store.block}_{name}", _block_names(program))
    copy = nest(axes, Store(copy_name, name, index, Load(tensor, index)))

    def redirect(store):
        if store.block != site.store.block:
            return store
        swap = lambda e: replace_loads(e, lambda ld: Load(name, ld.indices) if ld.tensor == tensor else None)
        return replace(store, value=swap(store.value), carry=swap(store.carry) if store.carry is not None else None)

    body = map_stores(program.body, redirect)
    body = body[:top] + (copy,) + body[top:]
    program = _add_tensor(program.with_body(body), TensorDecl(name, decl.shape, "intermediate", decl.dtype, scope))
    logger.debug("cache_read {} {} {}", block, tensor, scope)
    return state.with_program(program, ("cache_read", (block, tensor, scope)))


def set_scope(state, block, tensor, scope):
    block_site(state, block)
    program = state.program
    program.tensor(tensor)
    tensors = [replace(d, scope=scope) if d.name == tensor else d for d in program.tensors]
    return state.with_program(program.with_tensors(tensors), ("set_scope", (block, tensor, scope)))


def bind_block_idx(state, handles, names):
    if len(handles) != len(names):
        raise UnknownHandle("bind_block_idx needs one binding name per loop")
    program = state.program
    for handle, name in zip(handles, names):
        _, _, path = loop_site(replace(state, program=program), handle)
        program = program.with_body(update_at(program.body, path, lambda l, n=name: [replace(l, annotation=n)]))
    return state.with_program(program, ("bind_block_idx", (tuple(handles), tuple(names))))


def split_scan_buffer(state, block, var, axis=0):
    block_site(state, block)
    logger.info("split_scan_buffer {} {} {} recorded as an annotation", block, var, axis)
    note = ("split_scan_buffer", block, var, axis)
    return replace(state, annotations=state.annotations + (note,), log=state.log + (("split_scan_buffer", (block, var, axis)),))


# ---------------------------------------------------------------------------
# Privatization


def _privatize(state, blocks, handle, split=None, names=None):
    """
    Split reductions over the loop ``handle`` into local partials and a global combine.

    Args:
        blocks (list): Blocks to privatize jointly; each must reduce over the loop.
        split (int): Outer extent when the loop is split first; ``None`` privatizes at the loop itself.
        names (tuple): Optional (outer, inner) names of the split loops.
    """
    program = state.program
    host, l_loop, l_path = loop_site(state, handle)
    v, n = l_loop.var, l_loop.extent
    blocks = [state.resolve(b) for b in blocks]
    sites = {b: program.site(b) for b in blocks}
    for b, site in sites.items():
        if l_path not in site.loop_paths:
            raise ScheduleError(f"{b} is not under {handle}", step="privatize")
        if not _is_reduce_site(state, site) or v not in site.reduce_vars():
            raise ScheduleError(f"{v} is not a reduce loop of {b}", step="privatize")

    if split is not None:
        if split <= 0 or split > n or n % split:
            raise InvalidTile(f"privatization size {split} does not divide loop {v} of extent {n}")
        taken = {l.var for s in iter_blocks(program.body) for l in s.loops}
        outer, inner = names or (fresh_name(f"{v}0", taken - {v}), fresh_name(f"{v}1", taken - {v} | {f'{v}0'}))
        q = n // split
        index_expr = Binary("+", Binary("*", Var(outer), Const(float(q))), Var(inner)) if q > 1 else Var(outer)
        if q == 1:
            inner = None
        outer_extent = split
    else:
        outer, inner, index_expr, outer_extent = v, None, Var(v), n

    def subst(stmt):
        if index_expr == Var(v):
            return stmt
        fix = lambda s: map_store_exprs(s, lambda e: substitute(e, {v: index_expr}))
        return fix(stmt) if isinstance(stmt, Store) else replace(stmt, body=map_stores(stmt.body, fix))

    def wrap(stmts):
        return [For(inner, n // split, tuple(stmts))] if inner is not None else list(stmts)

    depth = host.loop_paths.index(l_path)
    tensor_names = _tensor_names(program)
    block_names = _block_names(program)
    new_decls, pairs, bindings = [], [], list(state.bindings)
    new_body, run = [], []

    def flush():
        if run:
            new_body.extend(wrap(run))
            run.clear()

    for child in l_loop.body:
        inside = [s for s in subtree_stores(child) if s.block in sites]
        if not inside:
            for s in subtree_stores(child):
                if s.block in sites:
                    continue
                probe = program.site(s.block)
                if split is not None and _is_reduce_site(state, probe) and v in probe.reduce_vars():
                    raise ScheduleError(f"{s.block} also reduces over {v}; privatize it jointly", step="privatize")
            if split is not None and _uses_var(child, v):
                run.append(subst(child))
            else:
                flush()
                new_body.append(child)
            continue
        if len(subtree_stores(child)) != 1:
            raise ScheduleError(f"{inside[0].block} shares loops with other blocks under {handle}", step="privatize")
        flush()
        site = sites[inside[0].block]
        store = site.store
        binding = state.binding(store.block)
        if store.is_reduce:
            reducer, value, carry = store.reducer, store.value, store.carry
        else:
            reducer = binding.reducer
            if not (isinstance(store.value, Binary) and store.value.op == reducer.op):
                raise ScheduleError(f"{store.block} is not in rolled form", step="privatize")
            value, carry = store.value.rhs, None
        if index_expr != Var(v):
            value = substitute(value, {v: index_expr})
        decl = program.tensor(store.tensor)
        partial = fresh_name(f"{store.tensor}p", tensor_names)
        tensor_names.add(partial)
        new_decls.append(TensorDecl(partial, decl.shape + (outer_extent,), "intermediate", decl.dtype))
        local_name = fresh_name(f"{store.block}_local", block_names)
        global_name = fresh_name(f"{store.block}_global", block_names | {local_name})
        block_names |= {local_name, global_name}
        partial_index = store.indices + (Var(outer),)
        local = Store(local_name, partial, partial_index, value, reducer)
        combine = Store(global_name, store.tensor, store.indices, Load(partial, partial_index), reducer, carry)
        inner_loops = list(site.loops[depth + 1:])
        indexed = store.index_vars()
        new_body.extend(wrap([nest(inner_loops, local)]))
        new_body.append(nest([l for l in inner_loops if l.var in indexed], combine))
        pairs.append(PrivatizedPair(store.block, local_name, global_name, partial, store.tensor, outer))
        bindings = [replace(b, block=global_name, loop=outer) if b.block == store.block else b for b in bindings]
    flush()

    new_loop = replace(l_loop, var=outer, extent=outer_extent, body=tuple(new_body))
    program = program.with_body(update_at(program.body, l_path, lambda _: [new_loop]))
    program = program.with_tensors(program.tensors + tuple(new_decls))
    aliases = state.aliases + tuple((p.block, p.local) for p in pairs)
    logger.debug("privatized {} over {}", [p.block for p in pairs], handle)
    return replace(
        state,
        program=program,
        pairs=state.pairs + tuple(pairs),
        bindings=tuple(bindings),
        aliases=aliases,
    ), pairs


def privatize_reduce(state, blocks, handle, k, names=None):
    """
    Split loop ``handle`` into an outer loop of extent ``k`` and privatize ``blocks`` over it.

    The local and global handles are recorded in ``state.pairs``.
    """
    if isinstance(blocks, str):
        blocks = [blocks]
    state, _ = _privatize(state, blocks, handle, split=k, names=names)
    return replace(state, log=state.log + (("privatize_reduce", (tuple(blocks), handle, k)),))


def fuse_and_privatize(state, block, handle, rewrite=None):
    """Naively fuse ``block`` under ``handle`` and privatize it over that loop."""
    _, var = split_handle(handle)
    program = _fuse(
        state, block, handle, temporal=False, rewrite=rewrite, primitive="fuse_and_privatize", reduce_var=var
    )
    state = replace(state, program=program)
    state, pairs = _privatize(state, [block], handle)
    return replace(state, log=state.log + (("fuse_and_privatize", (block, handle)),)), pairs[0]


# ---------------------------------------------------------------------------
# Rolling update


def inline_map_return_reduce(state, target):
    """
    Inline every map nest feeding ``target`` through maps only.

    Returns:
        tuple: (new state, reduce predecessor block names)

    Raises:
        NoReducePredecessor: When no reduce nest feeds ``target`` through maps.
    """
    target = state.resolve(target)
    program = state.program
    if not _is_reduce_site(state, program.site(target)):
        raise ScheduleError(f"{target} is not a reduce nest", step="inline")
    graph = build_dataflow(program, state.rolled())
    preds = reduce_predecessors(graph, target)
    if not preds:
        raise NoReducePredecessor(f"{target} does not depend on a reduce nest")
    for name in reversed(map_ancestors(graph, target)):
        if not any(s.store.block == name for s in iter_blocks(program.body)):
            continue
        if program.store(name).tensor not in program.store(target).reads():
            continue
        try:
            program = inline_nest(program, name, target)
        except NotInlinable as e:
            logger.debug("{} stays a separate nest: {}", name, e)
    graph = build_dataflow(program, state.rolled())
    preds = reduce_predecessors(graph, target)
    logger.debug("{} has reduce predecessors {}", target, preds)
    return replace(state, program=program), preds


@dataclass(frozen=True)
class ReducePattern:
    """``X_t = X_t f g(r..., c...)`` with the loads bound to each argument."""

    f: object
    g: object
    r_loads: tuple
    r_blocks: tuple
    c_exprs: tuple

    @property
    def r_args(self):
        return tuple(r for r, _ in self.r_loads)

    @property
    def c_args(self):
        return tuple(c for c, _ in self.c_exprs)


def match_reduce_pattern(program, target, preds):
    """
    Extract the reducer and the body ``g`` of ``target``.

    Loads of predecessor outputs become r-arguments; maximal subtrees free of
    them become c-arguments.

    Raises:
        PatternMismatch: On a self-read, a predecessor read through reduce
            variables, a missing predecessor read or an unsupported reducer.
    """
    site = program.site(target)
    store = site.store
    if not store.is_reduce or store.reducer.op not in REDUCERS:
        raise PatternMismatch(f"{target} is not a reduction with a supported reducer")
    if store.carry is not None:
        raise PatternMismatch(f"{target} already carries a repair term")
    if reads_tensor(store.value, store.tensor):
        raise PatternMismatch(f"{target} reads its own output inside the reduced expression")
    pred_tensors = {program.store(p).tensor: p for p in preds}
    map_vars = set(site.map_vars())
    r_loads = []
    for ld in loads(store.value):
        if ld.tensor not in pred_tensors or ld in r_loads:
            continue
        used = set().union(*(free_vars(i) for i in ld.indices)) if ld.indices else set()
        if not used <= map_vars:
            raise PatternMismatch(f"{print_expr(ld)} is indexed by reduce variables of {target}")
        r_loads.append(ld)
    if not r_loads:
        raise PatternMismatch(f"{target} reads no reduce predecessor output")
    r_names = ["r"] if len(r_loads) == 1 else [f"r{n + 1}" for n in range(len(r_loads))]
    # placeholders keep loop variables named r or c apart from the arguments
    r_slots = {ld: f"\x01{n}" for n, ld in enumerate(r_loads)}
    with_r = replace_loads(store.value, lambda ld: Var(r_slots[ld]) if ld in r_slots else None)
    c_exprs = []

    def carve(e):
        if not any(isinstance(node, Var) and node.name.startswith("\x01") for node in walk(e)):
            if not free_vars(e) and not loads(e):
                return e
            if e not in c_exprs:
                c_exprs.append(e)
            return Var(f"\x00{c_exprs.index(e)}")
        if isinstance(e, Var):
            return e
        if isinstance(e, Unary):
            return replace(e, arg=carve(e.arg))
        if isinstance(e, Binary):
            return replace(e, lhs=carve(e.lhs), rhs=carve(e.rhs))
        return replace(e, cond=carve(e.cond), then=carve(e.then), otherwise=carve(e.otherwise))

    carved = carve(with_r)
    c_names = ["c"] if len(c_exprs) == 1 else [f"c{n + 1}" for n in range(len(c_exprs))]
    names = {f"\x01{n}": Var(r) for n, r in enumerate(r_names)}
    names.update({f"\x00{n}": Var(c) for n, c in enumerate(c_names)})
    g = substitute(carved, names)
    pattern = ReducePattern(
        store.reducer,
        g,
        tuple(zip(r_names, r_loads)),
        tuple(pred_tensors[ld.tensor] for ld in r_loads),
        tuple(zip(c_names, c_exprs)),
    )
    logger.debug("{}: f = {}, g = {}", target, store.reducer.op, print_expr(g))
    return pattern


def solve_repair_func(pattern, samples=1000):
    """
    Returns:
        RepairCertificate: With ``commutes`` True.

    Raises:
        NotInvertible: When ``g`` cannot be inverted in a constant argument.
        NotCommuting: When ``h`` does not distribute over ``f``.
    """
    cert = derive(pattern.f, pattern.g, pattern.r_args, pattern.c_args, samples=samples)
    if not cert.commutes:
        raise NotCommuting(f"h = {print_expr(cert.h)} does not commute with {pattern.f.op}")
    return cert


def cache_reduce_prev_result(state, block, handle):
    """
    Cache the previous iteration's result of a reduce block rolled under ``handle``.

    The block is rewritten to ``x_curr = x_prev f G``; ``x_prev`` is set to the
    reducer identity before the loop and to ``x_curr`` at the end of each iteration.
    """
    existing = state.binding(block)
    if existing is not None:
        return state, existing
    program = state.program
    site = program.site(block)
    store = site.store
    host, l_loop, l_path = loop_site(state, handle)
    if not store.is_reduce or store.carry is not None:
        raise ScheduleError(f"{block} is not a plain reduction", step="cache")
    depth = site.loop_paths.index(l_path)
    if store.index_vars() - {l.var for l in site.loops[:depth]}:
        raise ScheduleError(f"{block} has map loops inside the rolling loop", step="cache")
    decl = program.tensor(store.tensor)
    names = _tensor_names(program)
    prev = fresh_name(f"{decl.name}_0", names)
    curr = decl.name if decl.role == "output" else fresh_name(f"{decl.name}_1", names | {prev})
    if curr != decl.name:
        program = rename_tensor(program, decl.name, curr)
    program = _add_tensor(program, TensorDecl(prev, decl.shape, "intermediate", decl.dtype))
    reducer = store.reducer
    rolled = Store(block, curr, store.indices, reducer.combine(Load(prev, store.indices), store.value))
    blocks = _block_names(program)
    init = Store(fresh_name(f"{block}_prev", blocks), prev, store.indices, Const(reducer.identity))
    roll = Store(fresh_name(f"{block}_roll", blocks), prev, store.indices, Load(curr, store.indices))

    def rewrite(s):
        return rolled if s.block == block else s

    body = map_stores(program.body, rewrite)
    body = update_at(body, l_path, lambda loop: [init, replace(loop, body=loop.body + (roll,))])
    program = program.with_body(body)
    binding = RepairBinding(block, prev, curr, reducer, l_loop.var, roll.block)
    logger.debug("cached {}: prev {} curr {}", block, prev, curr)
    return replace(state, program=program, bindings=state.bindings + (binding,)), binding


def guard_repair(t, h, reducer):
    """
    ``h`` applied only once ``t`` holds a contribution.

    While ``t`` is still the identity of ``reducer`` nothing needs repairing and
    the predecessors may still be at their own identity (``-inf`` for max), where
    ``h`` is undefined.
    """
    return Select(Binary("==", t, Const(reducer.identity)), t, h)


def apply_repair_term(state, target, cert, pattern):
    """Rewrite ``target`` to ``X_t = h(X_t, x_prev..., x_curr...) f G``."""
    program = state.program
    store = program.store(target)
    mapping = {"t": store.target}
    for (r, ld), pred in zip(pattern.r_loads, pattern.r_blocks):
        binding = state.binding(state.resolve(pred))
        mapping[r] = Load(binding.prev, ld.indices)
        mapping[primed(r)] = Load(binding.curr, ld.indices)
    carry = guard_repair(store.target, substitute(cert.h, mapping), store.reducer)
    new = _normalize_carry(replace(store, carry=carry))
    body = map_stores(program.body, lambda s: new if s.block == target else s)
    return replace(state, program=program.with_body(body))


def fail_as_identity(state, primitive, args, error):
    """Return ``state`` with its program untouched and a Diagnostic for ``error`` attached."""
    step = getattr(error, "step", None) or ("solve" if isinstance(error, ExprError) else "apply")
    reason = getattr(error, "reason", None) or str(error)
    diagnostic = Diagnostic(primitive, step, reason)
    logger.warning("{} returns the original program: {}", primitive, diagnostic.format())
    return replace(
        state,
        diagnostics=state.diagnostics + (diagnostic,),
        log=state.log + ((primitive, args),),
    )


def _rolling_update(state, target, handle):
    target = state.resolve(target)
    state, preds = inline_map_return_reduce(state, target)
    host, l_loop, _ = loop_site(state, handle)
    handle = f"{host.store.block}.{l_loop.var}"
    for pred in preds:
        binding = state.binding(pred)
        if binding is not None:
            _, _, b_path = loop_site(state, f"{pred}.{binding.loop}")
            _, _, l_path = loop_site(state, handle)
            if b_path != l_path:
                raise RollingLoopMismatch(f"{pred} is rolled under a different loop")
            continue
        state = replace(state, program=_fuse(state, pred, handle, temporal=False, reduce_var=l_loop.var))
        if l_loop.var not in state.program.site(pred).reduce_vars():
            raise RollingLoopMismatch(f"{l_loop.var} is not a reduce loop of {pred}")
    state = replace(state, program=_fuse(state, target, handle, temporal=False, reduce_var=l_loop.var))
    if l_loop.var not in state.program.site(target).reduce_vars():
        raise RollingLoopMismatch(f"{l_loop.var} is not a reduce loop of {target}")
    pattern = match_reduce_pattern(state.program, target, preds)
    cert = solve_repair_func(pattern)
    for pred in preds:
        state, _ = cache_reduce_prev_result(state, pred, handle)
    state = apply_repair_term(state, target, cert, pattern)
    return state, cert


def rolling_update(state, target, handle, factor_axis=None):
    """
    Fuse the reduction ``target`` under the rolling loop ``handle`` and repair it.

    On failure the original program is returned with a Diagnostic.
    """
    args = (target, handle) if factor_axis is None else (target, handle, factor_axis)
    if factor_axis is not None:
        logger.info("rolling_update factor_axis={} recorded as an annotation", factor_axis)
    try:
        new_state, cert = _rolling_update(state, target, handle)
        validate(new_state.program)
    except (ScheduleError, ExprError, IRError) as e:
        return fail_as_identity(state, "rolling_update", args, e)
    annotations = new_state.annotations + ((("factor_axis", target, factor_axis),) if factor_axis is not None else ())
    logger.debug("rolling_update {} {}: {}", target, handle, cert.format())
    return replace(
        new_state,
        certificates=state.certificates + (cert,),
        log=state.log + (("rolling_update", args),),
        diagnostics=state.diagnostics,
        annotations=annotations,
    )


# ---------------------------------------------------------------------------
# Split-k update


def _distribute_globals(program, l_path, global_names):
    """Move global nests out of the loop tree at ``l_path`` into top-level nests after it."""
    for name in global_names:
        site = program.site(name)
        depth = len(l_path)
        if site.loop_paths[: depth] != tuple(l_path[:k + 1] for k in range(depth)):
            raise ScheduleError(f"{name} is not under the split loop", step="distribute")
        copy = nest([For(l.var, l.extent, (), l.annotation) for l in site.loops], site.store)
        program = program.with_body(remove_block(program.body, name))
        root = l_path[0]
        reads = _reads(copy)
        index = root + 1
        for n, stmt in enumerate(program.body):
            if n > root and _writes(stmt) & reads:
                index = max(index, n + 1)
        program = program.with_body(program.body[:index] + (copy,) + program.body[index:])
    return program


def _split_k_update(state, target, handle):
    target = state.resolve(target)
    state, preds = inline_map_return_reduce(state, target)
    host, l_loop, _ = loop_site(state, handle)
    l_var = l_loop.var
    anchor = host.store.block
    created = []
    redirect = {}
    for pred in preds:
        pair = state.pair(pred)
        if pair is None:
            state, pair = fuse_and_privatize(state, pred, f"{anchor}.{l_var}")
            created.append(pair.global_)
            if anchor == pred:
                anchor = pair.local
        elif pair.var != l_var:
            raise RollingLoopMismatch(f"{pred} was privatized over {pair.var}, not {l_var}")
        redirect[pair.tensor] = pair

    def read_locals(store):
        def swap(ld):
            pair = redirect.get(ld.tensor)
            if pair is None:
                return None
            return Load(pair.partial, ld.indices + (Var(pair.var),))

        return replace(store, value=replace_loads(store.value, swap))

    handle = f"{anchor}.{l_var}"
    state = replace(state, program=_fuse(state, target, handle, temporal=False, rewrite=read_locals, reduce_var=l_var))
    if l_var not in state.program.site(target).reduce_vars():
        raise RollingLoopMismatch(f"{l_var} is not a reduce loop of {target}")
    state, pairs = _privatize(state, [target], handle)
    pair = pairs[0]
    local_preds = [state.pair(p).local for p in preds]
    pattern = match_reduce_pattern(state.program, pair.local, local_preds)
    cert = solve_repair_func(pattern)
    program = state.program
    glob = program.store(pair.global_)
    mapping = {"t": program.store(pair.local).target}
    for (r, ld), pred_local in zip(pattern.r_loads, pattern.r_blocks):
        ppair = state.pair(pred_local)
        mapping[r] = ld
        mapping[primed(r)] = Load(ppair.tensor, ld.indices[:-1])
    local = program.store(pair.local)
    repaired = replace(glob, value=guard_repair(local.target, substitute(cert.h, mapping), local.reducer))
    program = program.with_body(map_stores(program.body, lambda s: repaired if s.block == glob.block else s))
    _, _, l_path = loop_site(replace(state, program=program), handle)
    program = _distribute_globals(program, l_path, created + [pair.global_])
    return replace(state, program=program), cert


def split_k_update(state, target, handle):
    """
    Privatize the reduce predecessors and ``target`` over ``handle`` and repair
    the global combine of ``target``.

    On failure the original program is returned with a Diagnostic.
    """
    try:
        new_state, cert = _split_k_update(state, target, handle)
        validate(new_state.program)
    except (ScheduleError, ExprError, IRError) as e:
        return fail_as_identity(state, "split_k_update", (target, handle), e)
    logger.debug("split_k_update {} {}: {}", target, handle, cert.format())
    return replace(
        new_state,
        certificates=state.certificates + (cert,),
        log=state.log + (("split_k_update", (target, handle)),),
        diagnostics=state.diagnostics,
    )
