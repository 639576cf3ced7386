import math
import unittest

import numpy as np

from src.core.errors import InvalidShape, ShapeMismatch, UnboundReduceAxis, UnknownBenchmark
from src.core.expr import Binary, Const, Load, Var
from src.core.frontend import (
    ATTENTION_BENCHMARKS,
    PREFILL_ATTENTION,
    ROLLING_SOFTMAX,
    AttentionParams,
    ReduceAxis,
    TensorExprGraph,
    batch_matmul,
    builtin,
    decode_schedule,
    default_schedule,
    exp,
    lower,
    output_name,
    params_for,
    reference_attention,
)
from src.core.interpreter import interpret
from src.core.loop_ir import iter_blocks
from src.utils.rng import make_rng, random_inputs


class TestTensorExprGraph(unittest.TestCase):

    def test_arithmetic_builds_expressions(self):
        """
        Test that operators on wrapped values build scalar expression trees.
        """
        g = TensorExprGraph()
        x = g.placeholder("x", (3,))
        node = g.compute("y", (3,), lambda i: 2 - x[i] * 0.5)
        self.assertEqual(node.body, Binary("-", Const(2.0), Binary("*", Load("x", (Var("i"),)), Const(0.5))))
        self.assertEqual(node.block, "T_y")
        self.assertEqual(node.index_vars, ("i",))

    def test_custom_reduction_lowers_and_runs(self):
        g = TensorExprGraph()
        inp = g.placeholder("inp", (3, 5))
        j = g.reduce_axis(5, "j")
        g.compute("rmin", (3,), lambda i: g.min(inp[i, j] * 2, axis=j), block="s_min")
        program = lower(g)
        site = program.site("s_min")
        self.assertEqual(site.loop_vars, ("i", "j"))
        self.assertEqual([d.name for d in program.outputs()], ["rmin"])
        x = np.arange(15.0).reshape(3, 5) - 7.0
        np.testing.assert_array_equal(interpret(program, {"inp": x})["rmin"], 2 * x.min(axis=1))

    def test_unbound_axes(self):
        """
        Test that a body using an axis it neither indexes nor reduces is rejected.
        """
        g = TensorExprGraph()
        inp = g.placeholder("inp", (2, 4))
        j = g.reduce_axis(4, "j")
        with self.assertRaises(UnboundReduceAxis):
            g.compute("bad", (2,), lambda i: inp[i, j])
        stray = ReduceAxis("q", 4)
        with self.assertRaises(UnboundReduceAxis):
            g.compute("bad", (2,), lambda i: g.sum(inp[i, stray], axis=stray))
        with self.assertRaises(UnboundReduceAxis):
            g.compute("bad", (2, 4), lambda i, j: g.sum(inp[i, j], axis=j), axes=("i", "j"))

    def test_shape_errors(self):
        g = TensorExprGraph()
        inp = g.placeholder("inp", (2, 4))
        with self.assertRaises(ShapeMismatch):
            g.compute("bad", (2,), lambda i: inp[i])
        with self.assertRaises(ShapeMismatch):
            g.compute("bad", (2, 4), lambda i: inp[i, i])
        with self.assertRaises(InvalidShape):
            g.placeholder("inp", (2, 4))
        with self.assertRaises(InvalidShape):
            g.placeholder("empty", (0, 4))

    def test_batch_matmul_shapes(self):
        """
        Test both matmul orientations and their shape checks.
        """
        g = TensorExprGraph()
        q = g.placeholder("q", (1, 2, 3, 4))
        k = g.placeholder("k", (1, 2, 5, 4))
        v = g.placeholder("v", (1, 2, 5, 6))
        scores = batch_matmul(g, q, k, trans_b=True, name="s")
        self.assertEqual(scores.shape, (1, 2, 3, 5))
        out = batch_matmul(g, scores, v, name="o")
        self.assertEqual(out.shape, (1, 2, 3, 6))
        with self.assertRaises(ShapeMismatch):
            batch_matmul(g, q, v, name="bad")
        flat = g.placeholder("flat", (3, 4))
        with self.assertRaises(ShapeMismatch):
            batch_matmul(g, flat, k, trans_b=True, name="bad2")

    def test_batch_matmul_values(self):
        g = TensorExprGraph()
        a = g.placeholder("a", (1, 1, 2, 3))
        b = g.placeholder("b", (1, 1, 3, 2))
        batch_matmul(g, a, b, name="c")
        program = lower(g)
        inputs = random_inputs(program, make_rng(4))
        expected = np.einsum("bnij,bnjk->bnik", inputs["a"], inputs["b"])
        np.testing.assert_allclose(interpret(program, inputs)["c"], expected, rtol=1e-12)


class TestParams(unittest.TestCase):

    def test_defaults_and_derived_values(self):
        params = params_for("causal_attn", (1, 2, 4, 8, 2))
        self.assertEqual(params, AttentionParams(B=1, N=2, Sq=4, Skv=8, H=2))
        self.assertEqual(params.offset, 4)
        self.assertEqual(params.window_size, 2)
        self.assertAlmostEqual(params.score_scale, 1 / math.sqrt(2))
        self.assertAlmostEqual(params.slope(1), 2.0 ** -8)
        self.assertEqual(params_for("softmax_denom"), {"rows": 2, "cols": 4})

    def test_errors(self):
        """
        Test unknown names, wrong shape arity and invalid decode or causal shapes.
        """
        with self.assertRaises(UnknownBenchmark):
            params_for("flash_attn")
        with self.assertRaises(InvalidShape):
            params_for("softmax_denom", (2, 4, 1))
        with self.assertRaises(InvalidShape):
            params_for("causal_attn", (1, 2, 4, 4))
        with self.assertRaises(InvalidShape):
            params_for("decode_attn", (1, 2, 2, 4, 2))
        with self.assertRaises(InvalidShape):
            builtin("causal_attn", (1, 2, 8, 4, 2))
        with self.assertRaises(InvalidShape):
            builtin("softmax_denom", (0, 4))


class TestBuiltins(unittest.TestCase):

    def test_attention_blocks(self):
        """
        Test the block and tensor names schedules refer to.
        """
        program = lower(builtin("global_attn", (1, 2, 4, 4, 2)))
        self.assertEqual(
            program.block_names(),
            [
                "batch_matmul",
                "T_score_mod",
                "T_softmax_maxelem",
                "T_softmax_exp",
                "T_softmax_expsum",
                "T_softmax_exp_f16",
                "T_batch_matmul_NN",
                "T_softmax_norm",
                "T_cast",
            ],
        )
        self.assertEqual([d.name for d in program.inputs()], ["q", "k", "v"])
        self.assertEqual([d.name for d in program.outputs()], ["cast"])
        self.assertEqual(program.tensor("softmax_exp_f16").dtype, "f16")

    def test_loop_vars_do_not_shadow_tensors(self):
        program = lower(builtin("causal_attn", (1, 2, 4, 4, 2)))
        loop_vars = {l.var for site in iter_blocks(program.body) for l in site.loops}
        self.assertEqual(loop_vars & {d.name for d in program.tensors}, set())
        self.assertIn("d", loop_vars)
        self.assertEqual([l.var for l in program.site("T_batch_matmul_NN").loops], ["b", "n", "i", "d", "j"])

    def test_attention_matches_dense_reference(self):
        """
        Test every unscheduled attention variant against the numpy reference.
        """
        for name in ATTENTION_BENCHMARKS:
            shape = (1, 2, 1, 5, 2) if name == "decode_attn" else (1, 2, 3, 5, 2)
            params = params_for(name, shape)
            program = lower(builtin(name, params))
            inputs = random_inputs(program, make_rng(2))
            actual = interpret(program, inputs)["cast"]
            expected = reference_attention(name, inputs, params)["cast"]
            np.testing.assert_allclose(actual, expected, rtol=1e-9, atol=1e-12, err_msg=name)

    def test_softmax_reference(self):
        x = np.array([[0.0, 1.0], [2.0, 2.0]])
        out = reference_attention("softmax_denom", {"inp": x})["xsum"]
        np.testing.assert_allclose(out, [1.0 + math.exp(-1.0), 2.0])

    def test_output_names(self):
        self.assertEqual(output_name("softmax_denom"), "xsum")
        self.assertEqual(output_name("alibi_attn"), "cast")

    def test_default_schedules(self):
        """
        Test that prefill shapes get the rolling script and Sq = 1 the split-k script.
        """
        self.assertEqual(default_schedule("softmax_denom"), ROLLING_SOFTMAX)
        self.assertEqual(default_schedule("causal_attn", (1, 2, 4, 4, 2)), PREFILL_ATTENTION)
        self.assertEqual(default_schedule("decode_attn", (1, 2, 1, 8, 2)), decode_schedule(8))
        self.assertIn("split_k_update", decode_schedule(8))

    def test_exp_helper(self):
        self.assertEqual(exp(1.0).expr.op, "exp")


if __name__ == "__main__":
    unittest.main()
