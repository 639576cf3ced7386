import unittest

import numpy as np

from src.core.errors import NotInvertible
from src.core.expr import ADD, MAX, MUL, compile_scalar, equivalent, free_vars, parse_expr, substitute
from src.core.repair_solver import check_tag_update, derive, primed, recurrent_vs_explicit, split_args


class TestDerive(unittest.TestCase):

    def test_softmax_sum(self):
        """
        Test that f = + with g = exp(c - r) gives the rescaling repair t * exp(r - r').
        """
        cert = derive(ADD, parse_expr("exp(c - r)"))
        self.assertTrue(cert.commutes)
        self.assertTrue(equivalent(cert.h, parse_expr("t * exp(r - r')")))
        self.assertTrue(equivalent(cert.g_inverse, parse_expr("log(t) + r")))
        self.assertEqual(cert.domain_flags, ("t > 0",))
        self.assertEqual(cert.c_arg, "c")
        self.assertEqual(cert.signature(), "h(t,r,r')")
        self.assertTrue(cert.format().endswith("[commutes: yes]"))

    def test_weighted_sum_cancels_second_constant(self):
        """
        Test that the value matmul body exp(c1 - r) * c2 inverts in c1 and drops c2.
        """
        cert = derive(ADD, parse_expr("exp(c1 - r) * c2"))
        self.assertTrue(cert.commutes)
        self.assertEqual(cert.c_arg, "c1")
        self.assertTrue(equivalent(cert.h, parse_expr("t * exp(r - r')")))

    def test_multiple_predecessors(self):
        cert = derive(ADD, parse_expr("exp(c - r1) / r2"))
        self.assertEqual(cert.r_args, ("r1", "r2"))
        self.assertEqual(cert.signature(), "h(t,r1,r1',r2,r2')")
        self.assertTrue(cert.commutes)
        self.assertEqual(check_tag_update(cert, trials=200), 0)

    def test_product_of_shifts_does_not_commute(self):
        """
        Test that f = * with g = c - r yields a repair that is rejected.
        """
        cert = derive(MUL, parse_expr("c - r"))
        self.assertFalse(cert.commutes)
        self.assertTrue(cert.format().endswith("[commutes: no]"))

    def test_shifted_sum_does_not_commute(self):
        cert = derive(ADD, parse_expr("c - r"))
        self.assertTrue(equivalent(cert.h, parse_expr("t + r - r'")))
        self.assertFalse(cert.commutes)

    def test_not_invertible(self):
        with self.assertRaises(NotInvertible):
            derive(ADD, parse_expr("(c - r) * (c - r)"))
        with self.assertRaises(NotInvertible):
            derive(ADD, parse_expr("exp(r)"))

    def test_explicit_argument_names(self):
        cert = derive(ADD, parse_expr("exp(x - m)"), r_args=("m",), c_args=("x",))
        self.assertEqual(cert.r_args, ("m",))
        self.assertTrue(equivalent(cert.h, parse_expr("t * exp(m - m')")))

    def test_split_args(self):
        self.assertEqual(split_args(parse_expr("exp(c1 - r) * c2")), (("r",), ("c1", "c2")))
        self.assertEqual(primed("r"), "r'")


class TestInverse(unittest.TestCase):
    """g evaluated at its own inverse gives back the partial result."""

    # (reducer, body, range of t, range of the remaining arguments)
    BODIES = (
        (ADD, "exp(c - r)", (0.1, 10.0), (-3.0, 3.0)),
        (ADD, "exp(r - c)", (0.1, 10.0), (-3.0, 3.0)),
        (ADD, "c - r", (-5.0, 5.0), (-3.0, 3.0)),
        (MAX, "c - r", (-5.0, 5.0), (-3.0, 3.0)),
        (ADD, "c * r", (-5.0, 5.0), (0.5, 3.0)),
        (ADD, "c / r", (-5.0, 5.0), (0.5, 3.0)),
        (ADD, "exp(c1 - r) * c2", (0.1, 10.0), (0.5, 3.0)),
    )

    def test_round_trip(self):
        rng = np.random.default_rng(4)
        for f, body, t_range, arg_range in self.BODIES:
            with self.subTest(body=body):
                g = parse_expr(body)
                cert = derive(f, g)
                composed = compile_scalar(substitute(g, {cert.c_arg: cert.g_inverse}))
                others = sorted(free_vars(g) - {cert.c_arg})
                for _ in range(1000):
                    env = {name: float(rng.uniform(*arg_range)) for name in others}
                    env["t"] = float(rng.uniform(*t_range))
                    self.assertTrue(np.isclose(composed(env), env["t"], rtol=1e-9, atol=1e-12), env)


class TestEmpiricalChecks(unittest.TestCase):

    def test_tag_update_passes_for_softmax(self):
        """
        Test that repairing a partial sum with new maxima equals recomputing it.
        """
        cert = derive(ADD, parse_expr("exp(c - r)"))
        self.assertEqual(check_tag_update(cert, reduce_domain=8, trials=1000, seed=1), 0)
        self.assertEqual(recurrent_vs_explicit(cert, reduce_domain=8, trials=1000, seed=2), 0)

    def test_tag_update_fails_for_rejected_repair(self):
        cert = derive(MUL, parse_expr("c - r"))
        self.assertGreater(check_tag_update(cert, trials=200), 0)

    def test_max_with_shift(self):
        """
        Test that a running max over shifted values repairs by the shift difference.
        """
        cert = derive(MAX, parse_expr("c - r"))
        self.assertTrue(equivalent(cert.h, parse_expr("t + r - r'")))
        self.assertEqual(check_tag_update(cert, trials=1000), 0)
        self.assertEqual(recurrent_vs_explicit(cert, trials=1000, seed=3), 0)


if __name__ == "__main__":
    unittest.main()
