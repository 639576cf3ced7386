import unittest

import numpy as np

from src.core.errors import FusionIllegal, InvalidTile, ScheduleError, UnknownHandle
from src.core.expr import MAX, Const, Select, loads, parse_expr
from src.core.interpreter import ExecutionTrace, interpret
from src.core.ir_parser import parse_loop_ir
from src.core.loop_ir import For, has_explicit_init, print_loop_ir
from src.core.scheduler import (
    Diagnostic,
    bind_block_idx,
    cache_read,
    compute_at,
    decompose_reduction,
    initial_state,
    inline,
    loop_site,
    naive_loop_fusion,
    privatize_reduce,
    reverse_compute_at,
    rolling_update,
    set_scope,
    split_handle,
    split_scan_buffer,
    tile,
)
from src.core.tile_ir import interpret_tile, translate
from src.utils.rng import make_rng, random_inputs
from tests.fixtures import DECOMPOSED_SUM, ROW_SUM, SHIFTED_PRODUCT, SOFTMAX_DENOM, SQUARED_DEVIATION, reduction_chain


def assert_same_outputs(test, original, scheduled, trials=3, seed=0):
    for trial in range(trials):
        inputs = random_inputs(original, make_rng(seed, trial))
        expected = interpret(original, inputs)
        actual = interpret(scheduled, inputs)
        test.assertEqual(set(actual), set(expected))
        for name in expected:
            np.testing.assert_allclose(actual[name], expected[name], rtol=1e-10, atol=1e-12)


class TestRollingUpdate(unittest.TestCase):

    def setUp(self):
        self.program = parse_loop_ir(SOFTMAX_DENOM)
        self.state = rolling_update(initial_state(self.program), "s_sum", "s_max.j")

    def test_fuses_into_one_nest(self):
        """
        Test that the row sum moves under the max loop with cached previous and current maxima.
        """
        program = self.state.program
        self.assertEqual(self.state.diagnostics, ())
        self.assertEqual(len(program.body), 1)
        self.assertEqual(program.block_names(), ["s_max_prev", "s_max", "s_sum", "s_max_roll"])
        self.assertEqual([d.name for d in program.tensors], ["inp", "xmax_1", "xsum", "xmax_0"])
        self.assertFalse(program.has_tensor("xexp"))

    def test_partial_sums_differ_until_the_last_step(self):
        """
        Test that the rolled sum is rescaled every step and only meets the original at the end.
        """
        inp = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
        original, rolled = ExecutionTrace(), ExecutionTrace()
        interpret(self.program, {"inp": inp}, trace=original)
        interpret(self.state.program, {"inp": inp}, trace=rolled)
        before = original.history("xsum", (0,))
        after = rolled.history("xsum", (0,))
        np.testing.assert_allclose(before, np.cumsum(np.exp(inp[0] - 4.0)))
        np.testing.assert_allclose(after, np.cumsum(np.exp(-np.arange(4.0))))
        for step in range(3):
            self.assertGreater(abs(after[step] - before[step]), 0.1)
        self.assertAlmostEqual(after[-1], before[-1], places=12)

    def test_binding_and_certificate(self):
        binding = self.state.binding("s_max")
        self.assertEqual((binding.prev, binding.curr, binding.loop, binding.roll), ("xmax_0", "xmax_1", "j", "s_max_roll"))
        self.assertIs(binding.reducer, MAX)
        self.assertEqual(len(self.state.certificates), 1)
        self.assertTrue(self.state.certificates[0].commutes)

    def test_rolled_stores(self):
        """
        Test the init, rolled max, repaired sum and roll-forward stores.
        """
        program = self.state.program
        self.assertEqual(program.store("s_max_prev").value, Const(-np.inf))
        self.assertIn("max(xmax_0[i], inp[i, j])", print_loop_ir(program))
        s_sum = program.store("s_sum")
        self.assertIsNotNone(s_sum.carry)
        self.assertEqual({ld.tensor for ld in loads(s_sum.carry)}, {"xmax_0", "xmax_1", "xsum"})
        roll = program.store("s_max_roll")
        self.assertEqual((roll.tensor, roll.value.tensor), ("xmax_0", "xmax_1"))

    def test_numerically_equivalent(self):
        assert_same_outputs(self, self.program, self.state.program)

    def test_printed_program_parses_back(self):
        """
        Test that the rolled program survives a print/parse cycle.
        """
        program = self.state.program
        self.assertEqual(parse_loop_ir(print_loop_ir(program)), program)

    def test_factor_axis_is_recorded(self):
        state = rolling_update(initial_state(self.program), "s_sum", "s_max.j", factor_axis=1)
        self.assertIn(("factor_axis", "s_sum", 1), state.annotations)
        self.assertEqual(state.program, self.state.program)


class TestFirstIterationRepair(unittest.TestCase):
    """Rolled reductions whose repair is undefined while the predecessors are at their identity."""

    CASES = (
        ("max", "exp(xr[i] - inp[i, j])", -3.0),
        ("max", "inp[i, j] / xr[i]", 0.5),
        ("min", "exp(inp[i, j] - xr[i])", -3.0),
        ("min", "inp[i, j] / xr[i]", 0.5),
        ("min", "exp(inp[i, j] - xr[i]) * w[i, j]", -3.0),
        ("+", "inp[i, j] * xr[i]", 0.5),
    )

    def test_rolled_chains_match(self):
        """
        Test that the first rolled iteration keeps the accumulator instead of repairing it.
        """
        for pred, body, low in self.CASES:
            with self.subTest(pred=pred, body=body):
                program = parse_loop_ir(reduction_chain(pred, body))
                state = rolling_update(initial_state(program), "s_out", "s_r.j")
                self.assertEqual(state.diagnostics, ())
                for trial in range(3):
                    inputs = random_inputs(program, make_rng(13, trial), low=low)
                    expected = interpret(program, inputs)["out"]
                    self.assertTrue(np.all(np.isfinite(expected)))
                    np.testing.assert_allclose(interpret(state.program, inputs)["out"], expected, rtol=1e-10)
                    tiled = interpret_tile(translate(state.program), inputs)["out"]
                    np.testing.assert_allclose(tiled, expected, rtol=1e-10)

    def test_repair_is_guarded_by_the_identity(self):
        program = parse_loop_ir(reduction_chain("max", "exp(xr[i] - inp[i, j])"))
        carry = rolling_update(initial_state(program), "s_out", "s_r.j").program.store("s_out").carry
        self.assertIsInstance(carry, Select)
        self.assertEqual(carry.cond, parse_expr("out[i] == 0"))
        self.assertEqual(carry.then, parse_expr("out[i]"))
        self.assertEqual({ld.tensor for ld in loads(carry.otherwise)}, {"out", "xr_0", "xr_1"})

    def test_guard_uses_the_target_identity(self):
        """
        Test that a max accumulator is guarded by -inf.
        """
        program = parse_loop_ir(reduction_chain("max", "inp[i, j] - xr[i]", target="max"))
        state = rolling_update(initial_state(program), "s_out", "s_r.j")
        self.assertEqual(state.diagnostics, ())
        self.assertEqual(state.program.store("s_out").carry.cond, parse_expr("out[i] == -inf"))
        assert_same_outputs(self, program, state.program)


class TestRollingUpdateFailures(unittest.TestCase):

    def _check_identity(self, text, target, handle, step):
        program = parse_loop_ir(text)
        state = rolling_update(initial_state(program), target, handle)
        self.assertEqual(state.program, program)
        self.assertEqual(len(state.diagnostics), 1)
        diagnostic = state.diagnostics[0]
        self.assertEqual((diagnostic.primitive, diagnostic.step), ("rolling_update", step))
        self.assertTrue(diagnostic.format().startswith(f"rolling_update: failed at step '{step}': "))
        self.assertEqual(state.certificates, ())
        return state

    def test_non_invertible_body(self):
        """
        Test that a squared deviation from the row max cannot be repaired.
        """
        self._check_identity(SQUARED_DEVIATION, "s_sq", "s_max.j", "solve")

    def test_repair_that_does_not_commute(self):
        self._check_identity(SHIFTED_PRODUCT, "s_prod", "s_max.j", "validate")

    def test_no_reduce_predecessor(self):
        """
        Test that a plain row sum has nothing to roll against.
        """
        self._check_identity(ROW_SUM, "s_sum", "s_sum.j", "inline")

    def test_unknown_handle(self):
        self._check_identity(SOFTMAX_DENOM, "s_sum", "nope.j", "lookup")

    def test_diagnostic_format(self):
        diagnostic = Diagnostic("rolling_update", "solve", "g is not invertible")
        self.assertEqual(diagnostic.format(), "rolling_update: failed at step 'solve': g is not invertible")


class TestHandles(unittest.TestCase):

    def test_split_handle(self):
        self.assertEqual(split_handle("T_softmax_maxelem.j"), ("T_softmax_maxelem", "j"))
        for bad in ("s_max", ".j", "s_max."):
            with self.assertRaises(UnknownHandle):
                split_handle(bad)

    def test_loop_site(self):
        state = initial_state(parse_loop_ir(SOFTMAX_DENOM))
        site, loop, path = loop_site(state, "s_sum.j")
        self.assertEqual(site.store.block, "s_sum")
        self.assertEqual((loop.var, loop.extent, path), ("j", 4, (2, 0)))
        with self.assertRaises(UnknownHandle):
            loop_site(state, "s_sum.k")


class TestBasicPrimitives(unittest.TestCase):

    def setUp(self):
        self.program = parse_loop_ir(SOFTMAX_DENOM)
        self.state = initial_state(self.program)

    def test_tile_splits_loop(self):
        """
        Test that tiling j by 2 gives j0:2, j1:2 and rewrites the index.
        """
        state = tile(self.state, "s_max", ["j"], [2])
        site = state.program.site("s_max")
        self.assertEqual([(l.var, l.extent) for l in site.loops], [("i", 2), ("j0", 2), ("j1", 2)])
        self.assertIn("inp[i, j0 * 2 + j1]", print_loop_ir(state.program))
        assert_same_outputs(self, self.program, state.program)

    def test_tile_full_extent_keeps_name(self):
        state = tile(self.state, "s_max", ["j"], [4])
        site = state.program.site("s_max")
        self.assertEqual([(l.var, l.extent) for l in site.loops], [("i", 2), ("j0", 1), ("j", 4)])

    def test_tile_two_loops(self):
        """
        Test that tiling two loops puts both outer loops first.
        """
        state = tile(self.state, "s_exp", ["i", "j"], [1, 2])
        site = state.program.site("s_exp")
        self.assertEqual(site.loop_vars, ("i0", "j0", "i1", "j1"))
        assert_same_outputs(self, self.program, state.program)

    def test_tile_rejects_bad_sizes(self):
        with self.assertRaises(InvalidTile):
            tile(self.state, "s_max", ["j"], [3])
        with self.assertRaises(InvalidTile):
            tile(self.state, "s_max", ["i", "j"], [1])
        decomposed = initial_state(parse_loop_ir(DECOMPOSED_SUM))
        with self.assertRaises(InvalidTile):
            tile(decomposed, "acc", ["i", "j"], [1, 2])

    def test_decompose_reduction(self):
        """
        Test that the hoisted init makes the reduction explicit without changing results.
        """
        state = decompose_reduction(self.state, "s_sum", "j")
        self.assertIn("s_sum_init", state.program.block_names())
        self.assertTrue(has_explicit_init(state.program, "xsum"))
        assert_same_outputs(self, self.program, state.program)
        outer = decompose_reduction(self.state, "s_sum", "i")
        self.assertIsInstance(outer.program.body[2], For)
        self.assertEqual(outer.program.site("s_sum_init").loop_vars, ("i",))

    def test_decompose_requires_reduction(self):
        with self.assertRaises(ScheduleError):
            decompose_reduction(self.state, "s_exp", "j")

    def test_cache_read(self):
        """
        Test that reads of xexp go through a scope-tagged copy placed before the nest.
        """
        state = cache_read(self.state, "s_sum", "xexp", "shared")
        program = state.program
        self.assertEqual(program.tensor("xexp_shared").scope, "shared")
        self.assertIn("xexp_shared", program.store("s_sum").reads())
        self.assertNotIn("xexp", program.store("s_sum").reads())
        self.assertEqual(program.block_names()[2], "s_sum_xexp_shared")
        assert_same_outputs(self, self.program, program)

    def test_cache_read_by_index(self):
        by_index = cache_read(self.state, "s_sum", 0, "shared")
        by_name = cache_read(self.state, "s_sum", "xexp", "shared")
        self.assertEqual(by_index.program, by_name.program)
        with self.assertRaises(UnknownHandle):
            cache_read(self.state, "s_sum", "inp", "shared")
        with self.assertRaises(UnknownHandle):
            cache_read(self.state, "s_sum", 3, "shared")

    def test_set_scope(self):
        state = set_scope(self.state, "s_max", "xmax", "local")
        self.assertIn("tensor xmax: f32[2] intermediate @local", print_loop_ir(state.program))

    def test_bind_block_idx(self):
        """
        Test that binding annotates the loop without moving statements.
        """
        state = bind_block_idx(self.state, ["s_max.i"], ["blockIdx.x"])
        self.assertEqual(state.program.site("s_max").loops[0].annotation, "blockIdx.x")
        self.assertEqual(state.program.block_names(), self.program.block_names())
        with self.assertRaises(UnknownHandle):
            bind_block_idx(self.state, ["s_max.i", "s_max.j"], ["blockIdx.x"])

    def test_split_scan_buffer_is_an_annotation(self):
        state = split_scan_buffer(self.state, "s_sum", "j")
        self.assertEqual(state.program, self.program)
        self.assertIn(("split_scan_buffer", "s_sum", "j", 0), state.annotations)

    def test_log_records_primitives(self):
        state = tile(self.state, "s_max", ["j"], [2])
        state = set_scope(state, "s_max", "xmax", "local")
        self.assertEqual([entry[0] for entry in state.log], ["tile", "set_scope"])


class TestFusion(unittest.TestCase):

    def setUp(self):
        self.program = parse_loop_ir(SOFTMAX_DENOM)
        self.state = initial_state(self.program)

    def test_compute_at_map_producer(self):
        """
        Test that the exp nest can be computed inside the sum's j loop.
        """
        state = compute_at(self.state, "s_exp", "s_sum.j")
        self.assertEqual(len(state.program.body), 2)
        self.assertEqual(state.program.site("s_exp").loop_vars, ("i", "j"))
        assert_same_outputs(self, self.program, state.program)

    def test_compute_at_rejects_reducing_producer(self):
        with self.assertRaises(FusionIllegal):
            compute_at(self.state, "s_max", "s_exp.j")

    def test_reverse_compute_at_rejects_partial_reads(self):
        """
        Test that a consumer of a reduction still in progress cannot move under its loop.
        """
        with self.assertRaises(FusionIllegal):
            reverse_compute_at(self.state, "s_exp", "s_max.j")

    def test_reverse_compute_at_rejects_intervening_writer(self):
        with self.assertRaises(FusionIllegal):
            reverse_compute_at(self.state, "s_sum", "s_max.j")

    def test_naive_fusion_changes_results(self):
        """
        Test that fusion checking memory locations only reads a partial maximum.
        """
        state = naive_loop_fusion(self.state, "s_exp", "s_max.j")
        inp = np.array([[1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0]])
        fused = interpret(state.program, {"inp": inp})["xsum"]
        expected = interpret(self.program, {"inp": inp})["xsum"]
        self.assertFalse(np.isclose(fused[0], expected[0]))
        self.assertAlmostEqual(fused[1], expected[1])

    def test_direction_is_checked(self):
        with self.assertRaises(FusionIllegal):
            compute_at(self.state, "s_sum", "s_max.j")
        with self.assertRaises(FusionIllegal):
            reverse_compute_at(self.state, "s_max", "s_sum.j")

    def test_unknown_names(self):
        with self.assertRaises(UnknownHandle):
            naive_loop_fusion(self.state, "nope", "s_max.j")
        with self.assertRaises(UnknownHandle):
            naive_loop_fusion(self.state, "s_exp", "s_max")

    def test_inline(self):
        state = inline(self.state, "s_exp", "s_sum")
        self.assertEqual(state.program.block_names(), ["s_max", "s_sum"])
        assert_same_outputs(self, self.program, state.program)


class TestPrivatizeReduce(unittest.TestCase):

    def test_privatize_rolled_softmax(self):
        """
        Test joint privatization of the rolled max and sum over two slices of j.
        """
        program = parse_loop_ir(SOFTMAX_DENOM)
        state = rolling_update(initial_state(program), "s_sum", "s_max.j")
        state = privatize_reduce(state, ["s_max", "s_sum"], "s_max.j", 2, ("j1", "j2"))
        blocks = state.program.block_names()
        for name in ("s_max_local", "s_max_global", "s_sum_local", "s_sum_global", "s_max_roll"):
            self.assertIn(name, blocks)
        self.assertTrue(state.program.has_tensor("xmax_1p"))
        self.assertTrue(state.program.has_tensor("xsump"))
        self.assertEqual(state.program.tensor("xsump").shape, (2, 2))
        self.assertEqual(state.resolve("s_max"), "s_max_local")
        self.assertEqual(state.binding("s_max_global").loop, "j1")
        assert_same_outputs(self, program, state.program)

    def test_privatize_requires_reduce_loop(self):
        state = initial_state(parse_loop_ir(SOFTMAX_DENOM))
        with self.assertRaises(ScheduleError):
            privatize_reduce(state, ["s_exp"], "s_exp.j", 2)
        with self.assertRaises(InvalidTile):
            privatize_reduce(state, ["s_max"], "s_max.j", 3)

    def test_privatize_plain_reduction(self):
        """
        Test that a row sum split into two partial sums keeps its result.
        """
        program = parse_loop_ir(ROW_SUM)
        state = privatize_reduce(initial_state(program), "s_sum", "s_sum.j", 1)
        self.assertEqual(state.program.block_names(), ["s_sum_local", "s_sum_global"])
        assert_same_outputs(self, program, state.program)


if __name__ == "__main__":
    unittest.main()
