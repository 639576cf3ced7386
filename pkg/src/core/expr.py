"""
Scalar expression AST used for loop bodies, index arithmetic and repair functions.

Besides the node types this module holds the pieces the repair solver builds on:
the surface syntax printer/parser, closure compilation for evaluation, a
canonicalizer over a small rewrite theory, single-occurrence equation inversion
and the distributivity prover.
"""

import ast
import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy
from loguru import logger

from src.core.errors import DomainError, NotInvertible, ParseError, UnboundVariable


# ---------------------------------------------------------------------------
# Nodes


class ScalarExpr:
    """Base class of the expression nodes. Nodes are immutable and hashable."""

    def __str__(self):
        return print_expr(self)


@dataclass(frozen=True)
class Const(ScalarExpr):
    value: float


@dataclass(frozen=True)
class Var(ScalarExpr):
    name: str


@dataclass(frozen=True)
class Load(ScalarExpr):
    tensor: str
    indices: tuple = ()


@dataclass(frozen=True)
class Unary(ScalarExpr):
    op: str
    arg: ScalarExpr


@dataclass(frozen=True)
class Binary(ScalarExpr):
    op: str
    lhs: ScalarExpr
    rhs: ScalarExpr


@dataclass(frozen=True)
class Select(ScalarExpr):
    cond: ScalarExpr
    then: ScalarExpr
    otherwise: ScalarExpr


UNARY_OPS = ("exp", "log", "neg", "tanh")
ARITH_OPS = ("+", "-", "*", "/")
MINMAX_OPS = ("max", "min")
COMPARE_OPS = ("<", "<=", ">", ">=", "==", "!=")
BINARY_OPS = ARITH_OPS + MINMAX_OPS + COMPARE_OPS

NEG_INF = -math.inf
POS_INF = math.inf


def const(value):
    return Const(float(value))


def add(a, b):
    return Binary("+", a, b)


def sub(a, b):
    return Binary("-", a, b)


def mul(a, b):
    return Binary("*", a, b)


def div(a, b):
    return Binary("/", a, b)


def exp(a):
    return Unary("exp", a)


def log(a):
    return Unary("log", a)


def neg(a):
    return Unary("neg", a)


# ---------------------------------------------------------------------------
# Reducers


@dataclass(frozen=True)
class Reducer:
    """
    Associative and commutative reduction operator with its identity element.

    Args:
        op (str): One of ``+``, ``*``, ``max``, ``min``.
        identity (float): Value ``e`` with ``f(e, x) = x`` for every finite ``x``.
    """

    op: str
    identity: float

    def combine(self, a, b):
        return Binary(self.op, a, b)

    def apply(self, a, b):
        return _BINARY_FN[self.op](a, b)

    def __str__(self):
        return self.op


ADD = Reducer("+", 0.0)
MUL = Reducer("*", 1.0)
MAX = Reducer("max", NEG_INF)
MIN = Reducer("min", POS_INF)

REDUCERS = {r.op: r for r in (ADD, MUL, MAX, MIN)}


def reducer_for(op):
    """Return the Reducer for ``op`` or ``None`` if ``op`` is not a supported reducer."""
    return REDUCERS.get(op)


# ---------------------------------------------------------------------------
# Traversal helpers


def children(e):
    if isinstance(e, Load):
        return e.indices
    if isinstance(e, Unary):
        return (e.arg,)
    if isinstance(e, Binary):
        return (e.lhs, e.rhs)
    if isinstance(e, Select):
        return (e.cond, e.then, e.otherwise)
    return ()


def walk(e):
    """Yield every node of ``e`` in pre-order."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def map_expr(e, fn):
    """
    Rebuild ``e`` bottom-up, replacing each rebuilt node by ``fn(node)``.

    Replacements are not traversed again, which makes substitutions simultaneous.
    """
    if isinstance(e, Load):
        node = Load(e.tensor, tuple(map_expr(i, fn) for i in e.indices))
    elif isinstance(e, Unary):
        node = Unary(e.op, map_expr(e.arg, fn))
    elif isinstance(e, Binary):
        node = Binary(e.op, map_expr(e.lhs, fn), map_expr(e.rhs, fn))
    elif isinstance(e, Select):
        node = Select(map_expr(e.cond, fn), map_expr(e.then, fn), map_expr(e.otherwise, fn))
    else:
        node = e
    replaced = fn(node)
    return node if replaced is None else replaced


def substitute(e, mapping):
    """Substitute variables simultaneously; ``mapping`` maps names to expressions."""
    if not mapping:
        return e

    def replace(node):
        if isinstance(node, Var):
            return mapping.get(node.name)
        return None

    return map_expr(e, replace)


def replace_loads(e, fn):
    """Replace loads: ``fn(load)`` returns the replacement or ``None`` to keep it."""

    def replace(node):
        if isinstance(node, Load):
            return fn(node)
        return None

    return map_expr(e, replace)


def free_vars(e):
    return frozenset(n.name for n in walk(e) if isinstance(n, Var))


def loads(e):
    return [n for n in walk(e) if isinstance(n, Load)]


def count_var(e, name):
    return sum(1 for n in walk(e) if isinstance(n, Var) and n.name == name)


def contains_var(e, name):
    return any(isinstance(n, Var) and n.name == name for n in walk(e))


def reads_tensor(e, tensor):
    return any(isinstance(n, Load) and n.tensor == tensor for n in walk(e))


# ---------------------------------------------------------------------------
# Printing


_PREC = {
    "<": 0, "<=": 0, ">": 0, ">=": 0, "==": 0, "!=": 0,
    "+": 1, "-": 1,
    "*": 2, "/": 2,
}
_ATOM_PREC = 4


def format_number(value):
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def _prec(e):
    if isinstance(e, Binary) and e.op in _PREC:
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return 3
    if isinstance(e, Const) and e.value < 0:
        return 3
    return _ATOM_PREC


def print_expr(e, compact=False):
    """
    Render an expression in the Python-like surface syntax, e.g. ``exp(inp[i, j] - xmax[i])``.

    Args:
        e (ScalarExpr): Expression to render.
        compact (bool): Drop the spaces around arithmetic operators (tile slice bounds).

    Returns:
        str: Text that ``parse_expr`` maps back to a structurally equal tree.
    """
    if isinstance(e, Const):
        return format_number(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Load):
        if not e.indices:
            return f"{e.tensor}[()]"
        return f"{e.tensor}[{', '.join(print_expr(i, compact) for i in e.indices)}]"
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = print_expr(e.arg, compact)
            if isinstance(e.arg, Const):
                return f"neg({inner})"
            if _prec(e.arg) <= 3:
                inner = f"({inner})"
            return f"-{inner}"
        return f"{e.op}({print_expr(e.arg, compact)})"
    if isinstance(e, Select):
        parts = (print_expr(e.cond, compact), print_expr(e.then, compact), print_expr(e.otherwise, compact))
        return f"select({', '.join(parts)})"
    if isinstance(e, Binary):
        if e.op in MINMAX_OPS:
            return f"{e.op}({print_expr(e.lhs, compact)}, {print_expr(e.rhs, compact)})"
        prec = _PREC[e.op]
        left = print_expr(e.lhs, compact)
        right = print_expr(e.rhs, compact)
        if _prec(e.lhs) < prec or (prec == 0 and _prec(e.lhs) == 0):
            left = f"({left})"
        if _prec(e.rhs) <= prec:
            right = f"({right})"
        sep = e.op if compact and prec > 0 else f" {e.op} "
        return f"{left}{sep}{right}"
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Parsing


_PRIME = re.compile(r"([A-Za-z_][A-Za-z_0-9]*)'")
_PRIME_SUFFIX = "__prime"

_AST_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}
_AST_CMPOPS = {ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">=", ast.Eq: "==", ast.NotEq: "!="}
_CONSTANT_NAMES = {"inf": POS_INF, "nan": math.nan}


def subscript_items(node):
    """Return the index nodes of an ``ast.Subscript`` across Python versions."""
    index = node.slice
    if hasattr(ast, "Index") and isinstance(index, getattr(ast, "Index")):
        index = index.value
    if isinstance(index, ast.Tuple):
        return list(index.elts)
    return [index]


def _var_name(identifier):
    if identifier.endswith(_PRIME_SUFFIX):
        return identifier[: -len(_PRIME_SUFFIX)] + "'"
    return identifier


def from_ast(node):
    """Convert a Python expression AST node into a ScalarExpr."""
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return Const(float(node.value))
    if isinstance(node, ast.Name):
        if node.id in _CONSTANT_NAMES:
            return Const(_CONSTANT_NAMES[node.id])
        return Var(_var_name(node.id))
    if isinstance(node, ast.UnaryOp):
        if isinstance(node.op, ast.UAdd):
            return from_ast(node.operand)
        if isinstance(node.op, ast.USub):
            operand = node.operand
            if isinstance(operand, ast.Constant) and isinstance(operand.value, (int, float)):
                return Const(-float(operand.value))
            if isinstance(operand, ast.Name) and operand.id == "inf":
                return Const(NEG_INF)
            return Unary("neg", from_ast(operand))
    if isinstance(node, ast.BinOp) and type(node.op) in _AST_BINOPS:
        return Binary(_AST_BINOPS[type(node.op)], from_ast(node.left), from_ast(node.right))
    if isinstance(node, ast.Compare):
        if len(node.ops) != 1 or type(node.ops[0]) not in _AST_CMPOPS:
            raise ParseError("chained or unsupported comparison", getattr(node, "lineno", None))
        return Binary(_AST_CMPOPS[type(node.ops[0])], from_ast(node.left), from_ast(node.comparators[0]))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
        name, args = node.func.id, [from_ast(a) for a in node.args]
        if name in UNARY_OPS and len(args) == 1:
            return Unary(name, args[0])
        if name in MINMAX_OPS and len(args) >= 2:
            result = args[0]
            for arg in args[1:]:
                result = Binary(name, result, arg)
            return result
        if name == "select" and len(args) == 3:
            return Select(*args)
    if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name):
        items = subscript_items(node)
        if len(items) == 1 and isinstance(items[0], ast.Tuple) and not items[0].elts:
            return Load(node.value.id, ())
        return Load(node.value.id, tuple(from_ast(i) for i in items))
    raise ParseError(f"unsupported expression syntax: {ast.dump(node)}", getattr(node, "lineno", None))


def prepare_source(text):
    """Rewrite primed names (``r'``) into identifiers the Python parser accepts."""
    return _PRIME.sub(lambda m: m.group(1) + _PRIME_SUFFIX, text)


def parse_expr(text):
    try:
        tree = ast.parse(prepare_source(text.strip()), mode="eval")
    except SyntaxError as e:
        raise ParseError(f"cannot parse expression {text!r}: {e.msg}") from e
    return from_ast(tree.body)


# ---------------------------------------------------------------------------
# Evaluation


def _exp_fn(x):
    try:
        return math.exp(x)
    except OverflowError:
        return POS_INF


def _log_fn(x):
    if x <= 0:
        raise DomainError(f"log of non-positive value {x}")
    return math.log(x)


def _sub_fn(a, b):
    # a fully masked prefix stays masked
    if a == NEG_INF and b == NEG_INF:
        return NEG_INF
    return a - b


def _div_fn(a, b):
    if b == 0:
        raise DomainError(f"division of {a} by zero")
    return a / b


_UNARY_FN = {
    "exp": _exp_fn,
    "log": _log_fn,
    "neg": lambda x: -x,
    "tanh": math.tanh,
}

_BINARY_FN = {
    "+": lambda a, b: a + b,
    "-": _sub_fn,
    "*": lambda a, b: a * b,
    "/": _div_fn,
    "max": lambda a, b: a if a >= b else b,
    "min": lambda a, b: a if a <= b else b,
    "<": lambda a, b: 1.0 if a < b else 0.0,
    "<=": lambda a, b: 1.0 if a <= b else 0.0,
    ">": lambda a, b: 1.0 if a > b else 0.0,
    ">=": lambda a, b: 1.0 if a >= b else 0.0,
    "==": lambda a, b: 1.0 if a == b else 0.0,
    "!=": lambda a, b: 1.0 if a != b else 0.0,
}


def unary_fn(op):
    return _UNARY_FN[op]


def binary_fn(op):
    return _BINARY_FN[op]


def compile_scalar(e, resolve=None):
    """
    Compile an expression into a closure ``fn(env) -> float``.

    Args:
        e (ScalarExpr): Expression to compile.
        resolve (callable): ``resolve(tensor) -> read(index_tuple) -> float``; called
            once per load at compile time. Without it loads raise UnboundVariable.

    Returns:
        callable: Evaluates ``e`` under a mapping from variable names to floats.
    """
    if isinstance(e, Const):
        value = e.value
        return lambda env: value
    if isinstance(e, Var):
        name = e.name

        def read_var(env):
            try:
                return env[name]
            except KeyError:
                raise UnboundVariable(f"variable {name} is not bound") from None

        return read_var
    if isinstance(e, Load):
        index_fns = tuple(compile_scalar(i, resolve) for i in e.indices)
        if resolve is None:
            tensor = e.tensor

            def unresolved(env):
                raise UnboundVariable(f"tensor {tensor} has no value source")

            return unresolved
        read = resolve(e.tensor)
        return lambda env: read(tuple(int(fn(env)) for fn in index_fns))
    if isinstance(e, Unary):
        arg, fn = compile_scalar(e.arg, resolve), _UNARY_FN[e.op]
        return lambda env: fn(arg(env))
    if isinstance(e, Binary):
        lhs, rhs, fn = compile_scalar(e.lhs, resolve), compile_scalar(e.rhs, resolve), _BINARY_FN[e.op]
        return lambda env: fn(lhs(env), rhs(env))
    if isinstance(e, Select):
        cond = compile_scalar(e.cond, resolve)
        then = compile_scalar(e.then, resolve)
        otherwise = compile_scalar(e.otherwise, resolve)
        return lambda env: then(env) if cond(env) != 0.0 else otherwise(env)
    raise TypeError(f"not an expression: {e!r}")


def eval_scalar(e, env, lookup=None):
    """
    Evaluate ``e`` in IEEE doubles with exp(-inf) = 0 and max(-inf, x) = x.

    Args:
        e (ScalarExpr): Expression to evaluate.
        env (dict): Variable bindings.
        lookup (callable): Optional ``lookup(tensor, index_tuple) -> float`` for loads.

    Returns:
        float: The value of ``e``.
    """
    resolve = None
    if lookup is not None:
        def resolve(tensor):
            return lambda index: lookup(tensor, index)
    return compile_scalar(e, resolve)(env)


# ---------------------------------------------------------------------------
# Canonicalization
#
# The normal form is a sum of terms; a term is a tuple of (atom, exponent)
# pairs sorted by the atom key and mapped to its coefficient. The empty tuple
# holds the constant. Atoms are canonical non-arithmetic nodes.


_KIND_RANK = {Const: 0, Unary: 1, Select: 2, Binary: 3, Load: 4, Var: 5}


@lru_cache(maxsize=8192)
def sort_key(e):
    return (_KIND_RANK[type(e)], print_expr(e))


def _term_key(term):
    return tuple((sort_key(atom), k) for atom, k in term)


def _atom(e):
    return {((e, 1),): 1.0}


def _is_exp(e):
    return isinstance(e, Unary) and e.op == "exp"


def _is_log(e):
    return isinstance(e, Unary) and e.op == "log"


def _is_minmax(e):
    return isinstance(e, Binary) and e.op in MINMAX_OPS


def _is_sum_atom(e):
    if isinstance(e, Unary) and e.op == "neg":
        return True
    return isinstance(e, Binary) and e.op in ("+", "-")


def _sum_add(a, b):
    out = dict(a)
    for term, c in b.items():
        value = out.get(term, 0.0) + c
        if value == 0.0:
            out.pop(term, None)
        else:
            out[term] = value
    return out


def _sum_scale(s, k):
    if k == 0:
        return {}
    return {t: c * k for t, c in s.items()}


def _term_product(t1, t2):
    powers = {}
    for atom, k in t1 + t2:
        powers[atom] = powers.get(atom, 0) + k
    exps = [a for a in powers if _is_exp(a)]
    if len(exps) > 1 or (exps and powers[exps[0]] != 1):
        combined = {}
        for a in exps:
            combined = _sum_add(combined, _sum_scale(_norm(a.arg), powers.pop(a)))
        rest = tuple(sorted(((a, k) for a, k in powers.items() if k != 0), key=lambda ak: sort_key(ak[0])))
        return _sum_mul(_exp_norm(combined), {rest: 1.0})
    term = tuple(sorted(((a, k) for a, k in powers.items() if k != 0), key=lambda ak: sort_key(ak[0])))
    return {term: 1.0}


def _sum_mul(a, b):
    out = {}
    for t1, c1 in a.items():
        for t2, c2 in b.items():
            out = _sum_add(out, _sum_scale(_term_product(t1, t2), c1 * c2))
    return out


def _sum_power(s, k):
    if k < 0:
        return _reciprocal(_sum_power(s, -k))
    out = {(): 1.0}
    for _ in range(k):
        out = _sum_mul(out, s)
    return out


def _reciprocal(s):
    if len(s) == 1:
        (term, c), = s.items()
        if term == ():
            if c == 0:
                return {((Const(0.0), -1),): 1.0}
            return {(): 1.0 / c}
        out = {(): 1.0 / c}
        for a, k in term:
            if -k > 0 and _is_sum_atom(a):
                out = _sum_mul(out, _sum_power(_norm(a), -k))
            else:
                out = _sum_mul(out, {((a, -k),): 1.0})
        return out
    if not s:
        return {((Const(0.0), -1),): 1.0}
    return {((_rebuild(s), -1),): 1.0}


def _exp_norm(s):
    factors = {(): 1.0}
    rest = {}
    for term, c in s.items():
        if term == ():
            continue
        if len(term) == 1 and term[0][1] == 1 and _is_log(term[0][0]) and c == int(c):
            factors = _sum_mul(factors, _sum_power(_norm(term[0][0].arg), int(c)))
        else:
            rest[term] = c
    constant = s.get((), 0.0)
    if rest:
        if constant != 0.0:
            rest[()] = constant
        part = _atom(Unary("exp", _rebuild(rest)))
    else:
        value = _exp_fn(constant)
        part = {(): value} if value != 0.0 else {}
    return _sum_mul(factors, part)


def _log_norm(s):
    if len(s) == 1:
        (term, c), = s.items()
        if term == () and c > 0:
            return {(): math.log(c)} if c != 1.0 else {}
        if c == 1.0 and len(term) == 1 and term[0][1] == 1 and _is_exp(term[0][0]):
            return _norm(term[0][0].arg)
    return _atom(Unary("log", _rebuild(s)))


def _flatten_minmax(op, e, out):
    if isinstance(e, Binary) and e.op == op:
        _flatten_minmax(op, e.lhs, out)
        _flatten_minmax(op, e.rhs, out)
    else:
        out.append(e)


def _minmax_expr(op, args):
    flat = []
    for a in args:
        _flatten_minmax(op, canonicalize(a), flat)
    identity = NEG_INF if op == "max" else POS_INF
    pick = max if op == "max" else min
    consts = [a.value for a in flat if isinstance(a, Const)]
    others = {sort_key(a): a for a in flat if not isinstance(a, Const)}
    members = [others[k] for k in sorted(others)]
    if consts:
        folded = pick(consts)
        if folded != identity or not members:
            members.insert(0, Const(folded))
    if len(members) == 1:
        return members[0]
    result = members[0]
    for m in members[1:]:
        result = Binary(op, result, m)
    return result


def _minmax_members(e):
    out = []
    _flatten_minmax(e.op, e, out)
    return out


def _is_positive_atom(atom, k):
    return _is_exp(atom) or (k % 2 == 0)


def _push_minmax(s):
    """Move positive factors and additive terms inside max/min chains."""
    out = {}
    for term, c in s.items():
        idx = [n for n, (a, k) in enumerate(term) if _is_minmax(a) and k == 1]
        if len(idx) == 1 and len(term) > 0:
            others = term[: idx[0]] + term[idx[0] + 1:]
            if all(_is_positive_atom(a, k) for a, k in others) and (others or c != 1.0):
                atom = term[idx[0]][0]
                op = atom.op if c > 0 else ("min" if atom.op == "max" else "max")
                scale = _rebuild({others: c})
                members = [Binary("*", scale, m) for m in _minmax_members(atom)]
                out = _sum_add(out, _norm(_minmax_expr(op, members)))
                continue
        out = _sum_add(out, {term: c})
    minmax_terms = sorted(
        (t for t, c in out.items() if c == 1.0 and len(t) == 1 and t[0][1] == 1 and _is_minmax(t[0][0])),
        key=_term_key,
    )
    if minmax_terms and len(out) > 1:
        head = minmax_terms[0]
        rest = {t: c for t, c in out.items() if t != head}
        rest_expr = _rebuild(rest)
        atom = head[0][0]
        members = [Binary("+", m, rest_expr) for m in _minmax_members(atom)]
        return _norm(_minmax_expr(atom.op, members))
    return out


def _norm(e):
    if isinstance(e, Const):
        return {(): e.value} if e.value != 0.0 else {}
    if isinstance(e, Var):
        return _atom(e)
    if isinstance(e, Load):
        return _atom(Load(e.tensor, tuple(canonicalize(i) for i in e.indices)))
    if isinstance(e, Unary):
        arg = _norm(e.arg)
        if e.op == "neg":
            return _sum_scale(arg, -1.0)
        if e.op == "exp":
            return _exp_norm(arg)
        if e.op == "log":
            return _log_norm(arg)
        rebuilt = _rebuild(arg)
        if isinstance(rebuilt, Const):
            return _norm(Const(_UNARY_FN[e.op](rebuilt.value)))
        return _atom(Unary(e.op, rebuilt))
    if isinstance(e, Select):
        cond = canonicalize(e.cond)
        if isinstance(cond, Const):
            return _norm(e.then if cond.value != 0.0 else e.otherwise)
        then, otherwise = canonicalize(e.then), canonicalize(e.otherwise)
        if then == otherwise:
            return _norm(then)
        return _atom(Select(cond, then, otherwise))
    if isinstance(e, Binary):
        if e.op == "+":
            return _sum_add(_norm(e.lhs), _norm(e.rhs))
        if e.op == "-":
            return _sum_add(_norm(e.lhs), _sum_scale(_norm(e.rhs), -1.0))
        if e.op == "*":
            return _sum_mul(_norm(e.lhs), _norm(e.rhs))
        if e.op == "/":
            return _sum_mul(_norm(e.lhs), _reciprocal(_norm(e.rhs)))
        if e.op in MINMAX_OPS:
            reduced = _minmax_expr(e.op, (e.lhs, e.rhs))
            if _is_minmax(reduced):
                return _atom(reduced)
            return _norm(reduced)
        lhs, rhs = canonicalize(e.lhs), canonicalize(e.rhs)
        if isinstance(lhs, Const) and isinstance(rhs, Const):
            return _norm(Const(_BINARY_FN[e.op](lhs.value, rhs.value)))
        return _atom(Binary(e.op, lhs, rhs))
    raise TypeError(f"not an expression: {e!r}")


def _product(atoms):
    result = None
    for atom in atoms:
        result = atom if result is None else Binary("*", result, atom)
    return result


def _rebuild_term(term, magnitude):
    numerator, denominator = [], []
    for atom, k in term:
        (numerator if k > 0 else denominator).extend([atom] * abs(k))
    num = _product(numerator)
    if magnitude != 1.0 or num is None:
        num = Const(magnitude) if num is None else Binary("*", Const(magnitude), num)
    den = _product(denominator)
    return num if den is None else Binary("/", num, den)


def _rebuild(s):
    terms = sorted(((t, c) for t, c in s.items() if t != ()), key=lambda tc: _term_key(tc[0]))
    constant = s.get((), 0.0)
    ordered = [tc for tc in terms if tc[1] > 0] + [tc for tc in terms if not tc[1] > 0]
    result = None
    for term, c in ordered:
        piece = _rebuild_term(term, abs(c))
        if result is None:
            result = piece if c > 0 else Unary("neg", piece)
        else:
            result = Binary("+" if c > 0 else "-", result, piece)
    if result is None:
        return Const(constant)
    if constant > 0 or math.isnan(constant):
        result = Binary("+", result, Const(constant))
    elif constant < 0:
        result = Binary("-", result, Const(-constant))
    return result


@lru_cache(maxsize=4096)
def canonicalize(e):
    """
    Return the normal form of ``e``.

    Associative-commutative chains are flattened and sorted, constants folded,
    ``exp(log x)`` and ``log(exp x)`` collapsed and products of exponentials merged.
    """
    return _rebuild(_push_minmax(_norm(e)))


def equivalent(a, b):
    return canonicalize(a) == canonicalize(b)


# ---------------------------------------------------------------------------
# Inversion


def invert_with_conditions(g, target="c", result="y"):
    """
    Solve ``result = g`` for the single occurrence of ``target``.

    Args:
        g (ScalarExpr): Expression mentioning ``target`` exactly once.
        target (str): Variable to isolate.
        result (str): Name of the variable standing for the value of ``g``.

    Returns:
        tuple: (inverse expression, tuple of unproven domain conditions).
    """
    occurrences = count_var(g, target)
    if occurrences != 1:
        raise NotInvertible(f"{target} occurs {occurrences} times in {print_expr(g)}")
    node, rhs, conditions = g, Var(result), []
    while node != Var(target):
        if isinstance(node, Unary):
            if node.op == "exp":
                conditions.append(f"{print_expr(rhs)} > 0")
                rhs = Unary("log", rhs)
            elif node.op == "log":
                rhs = Unary("exp", rhs)
            elif node.op == "neg":
                rhs = Unary("neg", rhs)
            else:
                raise NotInvertible(f"{node.op} has no supported inverse")
            node = node.arg
        elif isinstance(node, Binary) and node.op in ARITH_OPS:
            in_left = contains_var(node.lhs, target)
            other = node.rhs if in_left else node.lhs
            if node.op == "+":
                rhs = Binary("-", rhs, other)
            elif node.op == "-":
                rhs = Binary("+", rhs, other) if in_left else Binary("-", other, rhs)
            elif node.op == "*":
                conditions.append(f"{print_expr(other)} != 0")
                rhs = Binary("/", rhs, other)
            elif in_left:
                rhs = Binary("*", rhs, other)
            else:
                conditions.append(f"{print_expr(rhs)} != 0")
                rhs = Binary("/", other, rhs)
            node = node.lhs if in_left else node.rhs
        else:
            raise NotInvertible(f"{target} occurs under {print_expr(node)}")
    return canonicalize(rhs), tuple(conditions)


def invert_in_arg(g, target="c", result="y"):
    """Return ``g_c^-1`` such that ``g`` with ``target`` replaced by it canonicalizes to ``result``."""
    inverse, _ = invert_with_conditions(g, target, result)
    return inverse


# ---------------------------------------------------------------------------
# Distributivity


def to_sympy(e):
    """Translate an expression into sympy; loads become opaque real symbols."""
    if isinstance(e, Const):
        if math.isnan(e.value):
            return sympy.nan
        if math.isinf(e.value):
            return sympy.oo if e.value > 0 else -sympy.oo
        return sympy.Float(e.value) if e.value != int(e.value) else sympy.Integer(int(e.value))
    if isinstance(e, Var):
        return sympy.Symbol(e.name, real=True)
    if isinstance(e, Load):
        return sympy.Symbol(print_expr(e), real=True)
    if isinstance(e, Unary):
        arg = to_sympy(e.arg)
        return {"exp": sympy.exp, "log": sympy.log, "tanh": sympy.tanh, "neg": lambda a: -a}[e.op](arg)
    if isinstance(e, Select):
        return sympy.Piecewise((to_sympy(e.then), to_sympy(e.cond) != 0), (to_sympy(e.otherwise), True))
    a, b = to_sympy(e.lhs), to_sympy(e.rhs)
    ops = {
        "+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b, "/": lambda: a / b,
        "max": lambda: sympy.Max(a, b), "min": lambda: sympy.Min(a, b),
        "<": lambda: sympy.Lt(a, b), "<=": lambda: sympy.Le(a, b),
        ">": lambda: sympy.Gt(a, b), ">=": lambda: sympy.Ge(a, b),
        "==": lambda: sympy.Eq(a, b), "!=": lambda: sympy.Ne(a, b),
    }
    return ops[e.op]()


def _sympy_equal(lhs, rhs):
    try:
        return sympy.simplify(to_sympy(lhs) - to_sympy(rhs)) == 0
    except (TypeError, ValueError, AttributeError, RecursionError) as e:
        logger.debug("sympy could not compare expressions: {}", e)
        return False


def _fresh(name, taken):
    candidate = name
    while candidate in taken:
        candidate += "_"
    return candidate


def find_counterexample(lhs, rhs, samples=1000, seed=0, low=-3.0, high=3.0, rel_tol=1e-9):
    """
    Search random points for ``lhs != rhs``.

    Points where either side leaves its domain are skipped.

    Returns:
        dict or None: The offending variable binding, if any.
    """
    names = sorted(free_vars(lhs) | free_vars(rhs))
    left, right = compile_scalar(lhs), compile_scalar(rhs)
    rng = np.random.default_rng(seed)
    values = rng.uniform(low, high, size=(samples, len(names)))
    for row in values:
        env = dict(zip(names, (float(v) for v in row)))
        try:
            a, b = left(env), right(env)
        except (DomainError, UnboundVariable, OverflowError, ZeroDivisionError):
            continue
        if not (math.isfinite(a) and math.isfinite(b)):
            continue
        if abs(a - b) > rel_tol * max(1.0, abs(a), abs(b)):
            return env
    return None


def prove_distributes(h, f, t="t", samples=1000, seed=0):
    """
    Decide whether ``h(x f y) = h(x) f h(y)`` in the argument ``t``.

    A symbolic pass (canonical forms, then sympy) must succeed; a numeric
    counterexample always forces ``False``.

    Args:
        h (ScalarExpr): Candidate repair function.
        f (Reducer): The reducer.
        t (str): Name of the argument that carries the partial result.
        samples (int): Number of random points for the falsifier.
        seed (int): Seed of the falsifier.

    Returns:
        bool: True when the property was proven and not refuted.
    """
    taken = free_vars(h)
    x, y = Var(_fresh("x", taken)), Var(_fresh("y", taken | {"x"}))
    lhs = substitute(h, {t: f.combine(x, y)})
    rhs = f.combine(substitute(h, {t: x}), substitute(h, {t: y}))
    counterexample = find_counterexample(lhs, rhs, samples=samples, seed=seed)
    if counterexample is not None:
        logger.debug("h = {} does not distribute over {}: counterexample {}", print_expr(h), f.op, counterexample)
        return False
    if canonicalize(lhs) == canonicalize(rhs):
        return True
    return _sympy_equal(lhs, rhs)
