import unittest

from src.core.errors import ParseError, ValidationError
from src.core.expr import ADD, MAX, MUL, parse_expr
from src.core.frontend import builtin, lower
from src.core.ir_parser import parse_decl, parse_loop_ir
from src.core.loop_ir import TensorDecl
from tests.fixtures import DECOMPOSED_SUM, SOFTMAX_DENOM


class TestParseLoopIR(unittest.TestCase):

    def test_softmax_matches_lowered_builtin(self):
        """
        Test that the textual softmax program equals the lowered builtin graph.
        """
        self.assertEqual(parse_loop_ir(SOFTMAX_DENOM), lower(builtin("softmax_denom", (2, 4))))

    def test_store_kinds(self):
        """
        Test that max, += and *= stores become reductions and plain stores stay plain.
        """
        text = (
            "tensor a: f32[3] input\n"
            "tensor m: f32[1] output\n"
            "tensor s: f32[1] output\n"
            "tensor p: f32[1] output\n"
            "tensor c: f32[3] output\n"
            "for i in range(3):\n"
            "  m[0] = max(m[0], a[i])  # mx\n"
            "  s[0] += a[i]  # sm\n"
            "  p[0] *= a[i]  # pr\n"
            "  c[i] = a[i] * 2  # cp\n"
        )
        program = parse_loop_ir(text)
        self.assertIs(program.store("mx").reducer, MAX)
        self.assertIs(program.store("sm").reducer, ADD)
        self.assertIs(program.store("pr").reducer, MUL)
        self.assertIsNone(program.store("cp").reducer)

    def test_carry_form(self):
        """
        Test that a reducer whose left side is not the stored location keeps it as the carry.
        """
        text = (
            "tensor a: f32[4] input\n"
            "tensor m: f32[1] intermediate\n"
            "tensor s: f32[1] output\n"
            "for j in range(4):\n"
            "  s[0] = s[0] * exp(m[0] - a[j]) + exp(a[j])  # s_sum\n"
        )
        store = parse_loop_ir(text).store("s_sum")
        self.assertIs(store.reducer, ADD)
        self.assertEqual(store.carry, parse_expr("s[0] * exp(m[0] - a[j])"))
        self.assertEqual(store.value, parse_expr("exp(a[j])"))

    def test_unlabelled_blocks_get_names(self):
        text = "tensor a: f32[2] input\ntensor b: f32[2] output\nfor i in range(2):\n  b[i] = a[i]\n"
        self.assertEqual(parse_loop_ir(text).block_names(), ["b_s0"])

    def test_grid_loops(self):
        """
        Test that grid(...) expands into perfectly nested loops.
        """
        text = "tensor b: f32[2, 3] output\nfor i, j in grid(2, 3):\n  b[i, j] = i + j  # g\n"
        site = parse_loop_ir(text).site("g")
        self.assertEqual(site.loop_vars, ("i", "j"))
        self.assertEqual([l.extent for l in site.loops], [2, 3])

    def test_decomposed_reduction(self):
        program = parse_loop_ir(DECOMPOSED_SUM)
        self.assertEqual(program.block_names(), ["init", "acc"])
        self.assertIsNone(program.store("init").reducer)

    def test_scalar_tensor_access(self):
        text = "tensor a: f32[2] input\ntensor t: f32[1] output\nfor i in range(2):\n  t[0] += a[i]  # s\n"
        self.assertEqual(parse_loop_ir(text).store("s").indices, (parse_expr("0"),))


class TestParseErrors(unittest.TestCase):

    def test_bad_declaration(self):
        with self.assertRaises(ParseError):
            parse_decl("tensor a f32[2] input")
        with self.assertRaises(ParseError):
            parse_decl("tensor a: f32[n] input")

    def test_declaration_with_scope(self):
        self.assertEqual(parse_decl("tensor a: f16[2, 3] intermediate @shared"), TensorDecl("a", (2, 3), "intermediate", "f16", "shared"))

    def test_syntax_error_has_line(self):
        """
        Test that Python syntax errors carry the offending line number.
        """
        text = "tensor b: f32[2] output\nfor i in range(2):\n  b[i] = = 1\n"
        with self.assertRaises(ParseError) as ctx:
            parse_loop_ir(text)
        self.assertEqual(ctx.exception.line, 3)

    def test_unsupported_statements(self):
        for body in ("  b[i] -= 1\n", "  if i:\n    b[i] = 1\n", "  b[i] = b[i] = 1\n"):
            text = "tensor b: f32[2] output\nfor i in range(2):\n" + body
            with self.assertRaises(ParseError):
                parse_loop_ir(text)

    def test_non_literal_extent(self):
        with self.assertRaises(ParseError):
            parse_loop_ir("tensor b: f32[2] output\nfor i in range(n):\n  b[i] = 1\n")

    def test_duplicate_label(self):
        text = "tensor b: f32[2] output\nfor i in range(2):\n  b[i] = 1  # s\nfor i in range(2):\n  b[i] = 2  # s\n"
        with self.assertRaises(ParseError):
            parse_loop_ir(text)

    def test_validation_runs_by_default(self):
        text = "tensor a: f32[2] input\ntensor b: f32[2] output\nfor i in range(2):\n  b[i] = a[i + 1]  # s\n"
        with self.assertRaises(ValidationError):
            parse_loop_ir(text)
        self.assertEqual(parse_loop_ir(text, check=False).block_names(), ["s"])


if __name__ == "__main__":
    unittest.main()
