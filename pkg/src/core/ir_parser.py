"""Parser for the textual loop-scalar IR produced by ``print_loop_ir``."""

import ast
import re

from loguru import logger

from src.core.errors import ParseError
from src.core.expr import ADD, MUL, Binary, Load, from_ast, prepare_source, reads_tensor, reducer_for, subscript_items
from src.core.loop_ir import For, Program, Store, TensorDecl, validate

_DECL = re.compile(
    r"^tensor\s+(?P<name>[A-Za-z_]\w*)\s*:\s*(?P<dtype>\w+)\[(?P<dims>[^\]]*)\]\s+(?P<role>\w+)(?:\s+@(?P<scope>\w+))?\s*$"
)
_LABEL = re.compile(r"#\s*(?P<name>[A-Za-z_][\w.]*)\s*$")
_AUG_REDUCERS = {ast.Add: ADD, ast.Mult: MUL}


def parse_decl(line, lineno=None):
    match = _DECL.match(line.strip())
    if not match:
        raise ParseError(f"malformed tensor declaration {line.strip()!r}", lineno)
    dims = [d.strip() for d in match["dims"].split(",") if d.strip()]
    try:
        shape = tuple(int(d) for d in dims)
    except ValueError:
        raise ParseError(f"tensor {match['name']} has a non-integer dimension", lineno) from None
    return TensorDecl(match["name"], shape, match["role"], match["dtype"], match["scope"])


def split_store(target, value, block):
    """
    Classify an assignment ``target = value`` as a plain or a reduce store.

    A top-level reducer whose left operand reads the stored location, and whose
    right operand does not, is a reduce store; a left operand other than the
    location itself becomes the carry.
    """
    if isinstance(value, Binary) and reducer_for(value.op) is not None:
        lhs_reads = reads_tensor(value.lhs, target.tensor)
        if lhs_reads and not reads_tensor(value.rhs, target.tensor):
            carry = None if value.lhs == target else value.lhs
            return Store(block, target.tensor, target.indices, value.rhs, reducer_for(value.op), carry)
    return Store(block, target.tensor, target.indices, value)


class BodyParser:
    """Builds the loop tree from a Python AST; subclasses choose how stores are read."""

    def __init__(self, labels):
        self.labels = labels
        self.names = set()
        self.counter = 0

    def block_name(self, node, tensor):
        name = self.labels.get(node.lineno)
        if name is None:
            name = f"{tensor}_s{self.counter}"
            self.counter += 1
            while name in self.names:
                name = f"{tensor}_s{self.counter}"
                self.counter += 1
        if name in self.names:
            raise ParseError(f"block name {name} is used twice", node.lineno)
        self.names.add(name)
        return name

    def statements(self, nodes):
        out = []
        for node in nodes:
            out.extend(self.statement(node))
        return tuple(out)

    def statement(self, node):
        if isinstance(node, ast.For):
            return [self.loop(node)]
        if isinstance(node, ast.Assign):
            if len(node.targets) != 1:
                raise ParseError("chained assignment", node.lineno)
            return [self.assign(node)]
        if isinstance(node, ast.AugAssign):
            reducer = _AUG_REDUCERS.get(type(node.op))
            if reducer is None:
                raise ParseError("only += and *= are reductions", node.lineno)
            return [self.aug_assign(node, reducer)]
        if isinstance(node, ast.Pass):
            return []
        raise ParseError(f"unsupported statement {type(node).__name__}", getattr(node, "lineno", None))

    def assign(self, node):
        target = self.target(node.targets[0])
        value = from_ast(node.value)
        return split_store(target, value, self.block_name(node, target.tensor))

    def aug_assign(self, node, reducer):
        target = self.target(node.target)
        block = self.block_name(node, target.tensor)
        return Store(block, target.tensor, target.indices, from_ast(node.value), reducer)

    def target(self, node):
        if not isinstance(node, ast.Subscript) or not isinstance(node.value, ast.Name):
            raise ParseError("store target must be a subscripted tensor", node.lineno)
        items = subscript_items(node)
        if len(items) == 1 and isinstance(items[0], ast.Tuple) and not items[0].elts:
            return Load(node.value.id, ())
        return Load(node.value.id, tuple(from_ast(i) for i in items))

    def loop(self, node):
        call = node.iter
        if node.orelse or not isinstance(call, ast.Call) or not isinstance(call.func, ast.Name):
            raise ParseError("loops must iterate over range(...) or grid(...)", node.lineno)
        body = self.statements(node.body)
        if call.func.id == "range":
            var = self._name(node.target, node.lineno)
            extent, annotation = self._range_args(call, node.lineno)
            return For(var, extent, body, annotation)
        if call.func.id == "grid":
            targets = node.target.elts if isinstance(node.target, ast.Tuple) else [node.target]
            if len(targets) != len(call.args):
                raise ParseError("grid arity does not match its loop variables", node.lineno)
            for target, arg in reversed(list(zip(targets, call.args))):
                body = (For(self._name(target, node.lineno), self._int(arg, node.lineno), body),)
            return body[0]
        raise ParseError(f"unknown loop iterator {call.func.id}", node.lineno)

    def _range_args(self, call, lineno):
        args = call.args
        if len(args) == 1:
            return self._int(args[0], lineno), None
        if len(args) == 2 and isinstance(args[1], ast.Constant) and isinstance(args[1].value, str):
            return self._int(args[0], lineno), args[1].value
        raise ParseError("range takes an extent and an optional binding name", lineno)

    @staticmethod
    def _name(node, lineno):
        if not isinstance(node, ast.Name):
            raise ParseError("loop variable must be a name", lineno)
        return node.id

    @staticmethod
    def _int(node, lineno):
        if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
            return node.value
        raise ParseError("loop extents must be integer literals", lineno)


def scan_source(text):
    """
    Split program text into declarations, Python-parsable loop source and block labels.

    Declaration lines are blanked in the returned source so AST line numbers
    still point at the original text.

    Returns:
        tuple: (list of TensorDecl, source text, dict line number -> block name)
    """
    decls, source, labels = [], [], {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("tensor "):
            decls.append(parse_decl(stripped, lineno))
            source.append("")
            continue
        source.append(line)
        label = _LABEL.search(line)
        if label and not stripped.startswith("#"):
            labels[lineno] = label["name"]
    return decls, prepare_source("\n".join(source)), labels


def parse_loop_ir(text, check=True):
    """
    Parse a program in the loop-scalar surface syntax.

    Args:
        text (str): Declarations (``tensor inp: f32[2, 4] input``) followed by loops.
        check (bool): Run ``validate`` on the result.

    Returns:
        Program: The parsed program.
    """
    decls, source, labels = scan_source(text)
    try:
        tree = ast.parse(source)
    except SyntaxError as e:
        raise ParseError(e.msg, e.lineno) from e
    body = BodyParser(labels).statements(tree.body)
    program = Program(tuple(decls), body)
    logger.debug("parsed {} tensors, {} blocks", len(decls), len(program.block_names()))
    return validate(program) if check else program
