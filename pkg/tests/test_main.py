import io
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

from src.main import EXIT_IDENTITY, EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, main
from tests.fixtures import SOFTMAX_DENOM, SQUARED_DEVIATION


class TestMain(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.config = str(self.dir / "missing.yaml")

    def tearDown(self):
        self.tmp.cleanup()

    def run_main(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = main(list(argv) + ["--config", self.config])
        return code, out.getvalue()

    def write(self, name, text):
        path = self.dir / name
        path.write_text(text)
        return str(path)

    def test_verify_softmax(self):
        """
        Test that the default softmax schedule verifies and prints its repair function.
        """
        code, out = self.run_main("verify", "--benchmark", "softmax_denom", "--trials", "3")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("h(t,r,r') = ", out)
        self.assertIn("xsum: max_abs=", out)
        self.assertTrue(out.rstrip().splitlines()[-1].startswith("PASS (3 trials"))

    def test_verify_with_repair_check_and_dense_oracle(self):
        code, out = self.run_main(
            "verify", "--benchmark", "softmax_denom", "--shape", "3,6", "--trials", "2", "--oracle", "dense", "--check-repair"
        )
        self.assertEqual(code, EXIT_OK)
        self.assertIn("tag-update check h(t,r,r'): 0 failures in 1000 cases", out)

    def test_verify_f32(self):
        code, out = self.run_main("verify", "--benchmark", "softmax_denom", "--trials", "2", "--f32")
        self.assertEqual(code, EXIT_OK)

    def test_verify_naive_fusion_fails(self):
        """
        Test that a schedule computing a different value reports a tolerance failure.
        """
        ir = self.write("softmax.ir", SOFTMAX_DENOM)
        sched = self.write("naive.sched", "fuse s_exp s_max.j\n")
        code, out = self.run_main("verify", "--ir", ir, "--schedule", sched)
        self.assertEqual(code, EXIT_TOLERANCE)
        self.assertIn("FAIL", out)

    def test_identity_exit_code(self):
        """
        Test that an unrepairable rolling update leaves the program unchanged and exits 2.
        """
        ir = self.write("sq.ir", SQUARED_DEVIATION)
        sched = self.write("sq.sched", "rolling_update s_sq s_max.j\n")
        code, out = self.run_main("verify", "--ir", ir, "--schedule", sched, "--trials", "2")
        self.assertEqual(code, EXIT_IDENTITY)
        self.assertIn("identity: rolling_update: failed at step 'solve'", out)
        self.assertIn("IDENTITY (2 trials", out)
        code, out = self.run_main("emit", "--ir", ir, "--schedule", sched, "--emit", "loop")
        self.assertEqual(code, EXIT_IDENTITY)
        self.assertIn("xsq[i] += ", out)

    def test_shifted_sum_is_rejected(self):
        """
        Test that a sum of shifted values is left unchanged with a validate diagnostic.
        """
        ir = self.write(
            "shift.ir",
            "tensor inp: f32[2, 4] input\n"
            "tensor xmax: f32[2] intermediate\n"
            "tensor xsum: f32[2] output\n\n"
            "for i in range(2):\n"
            "  for j in range(4):\n"
            "    xmax[i] = max(xmax[i], inp[i, j])  # s_max\n"
            "for i in range(2):\n"
            "  for j in range(4):\n"
            "    xsum[i] += inp[i, j] - xmax[i]  # s_sum\n",
        )
        sched = self.write("shift.sched", "rolling_update s_sum s_max.j\n")
        code, out = self.run_main("verify", "--ir", ir, "--schedule", sched, "--trials", "2")
        self.assertEqual(code, EXIT_IDENTITY)
        self.assertIn("identity: rolling_update: failed at step 'validate'", out)
        self.assertIn("does not commute with +", out)

    def test_emit_modes(self):
        for mode in ("loop", "tile", "tile-pseudo-python"):
            code, out = self.run_main("emit", "--benchmark", "softmax_denom", "--emit", mode)
            self.assertEqual(code, EXIT_OK, mode)
            self.assertIn("xsum", out)

    def test_emit_ir_without_schedule(self):
        ir = self.write("softmax.ir", SOFTMAX_DENOM)
        code, out = self.run_main("emit", "--ir", ir, "--emit", "loop")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(out, SOFTMAX_DENOM)

    def test_dump(self):
        """
        Test that dump writes one file per stage and the final tile program.
        """
        dump_dir = self.dir / "dumps"
        code, out = self.run_main("dump", "--benchmark", "softmax_denom", "--dump-dir", str(dump_dir))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(sorted(os.listdir(dump_dir)), ["00_input.ir", "01_rolling_update.ir", "02_tile.tir"])
        self.assertEqual((dump_dir / "00_input.ir").read_text(), SOFTMAX_DENOM)
        self.assertTrue((dump_dir / "01_rolling_update.ir").read_text().startswith("# h(t,r,r') = "))
        self.assertEqual(len(out.splitlines()), 3)

    def test_usage_errors(self):
        """
        Test that bad commands, unknown benchmarks and bad shapes exit with the usage code.
        """
        self.assertEqual(self.run_main("compile")[0], EXIT_USAGE)
        self.assertEqual(self.run_main("verify", "--benchmark", "flash_attn")[0], EXIT_USAGE)
        self.assertEqual(self.run_main("verify", "--shape", "2,4,1")[0], EXIT_USAGE)
        self.assertEqual(self.run_main("verify", "--trials", "0")[0], EXIT_USAGE)
        self.assertEqual(self.run_main("verify", "--ir", str(self.dir / "nope.ir"))[0], EXIT_USAGE)

    def test_schedule_syntax_error(self):
        sched = self.write("bad.sched", "rolling_update s_sum\n")
        self.assertEqual(self.run_main("verify", "--schedule", sched)[0], EXIT_USAGE)


if __name__ == "__main__":
    unittest.main()
