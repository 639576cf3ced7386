"""
Derivation of repair functions.

Given the reducer ``f`` of a target reduction and the body ``g`` written over
reduce-predecessor arguments (``r``...) and constant arguments (``c``...), the
repair function is ``h(t, r, r') = g(r', g_c^-1(r, t))``: it rewrites a partial
result computed with the old predecessor values ``r`` as if it had been
computed with the new values ``r'``.
"""

import re
from dataclasses import dataclass

import numpy as np
from loguru import logger

from src.core.errors import NotInvertible
from src.core.expr import (
    Var,
    canonicalize,
    compile_scalar,
    contains_var,
    free_vars,
    invert_with_conditions,
    print_expr,
    prove_distributes,
    substitute,
)

_C_ARG = re.compile(r"^c\d*$")


def primed(name):
    return name + "'"


@dataclass(frozen=True)
class RepairCertificate:
    """
    A derived repair function together with its validation verdict.

    ``domain_flags`` lists the conditions the inversion assumed but did not prove.
    """

    f: object
    g: object
    g_inverse: object
    h: object
    commutes: bool
    domain_flags: tuple = ()
    r_args: tuple = ("r",)
    c_arg: str = "c"

    def signature(self):
        args = ["t"]
        for r in self.r_args:
            args += [r, primed(r)]
        return f"h({','.join(args)})"

    def format(self):
        verdict = "yes" if self.commutes else "no"
        return f"{self.signature()} = {print_expr(self.h)}  [commutes: {verdict}]"

    def __str__(self):
        return self.format()


def split_args(g):
    """Partition the free variables of ``g`` into (r-arguments, c-arguments)."""
    names = sorted(free_vars(g))
    c_args = tuple(n for n in names if _C_ARG.match(n))
    r_args = tuple(n for n in names if n not in c_args)
    return r_args, c_args


def solve_h(g, r_args, c_arg, t="t"):
    """
    Build ``h`` by inverting ``g`` in ``c_arg``.

    Returns:
        tuple: (canonical h, canonical inverse, domain conditions)
    """
    inverse, conditions = invert_with_conditions(g, target=c_arg, result=t)
    mapping = {r: Var(primed(r)) for r in r_args}
    mapping[c_arg] = inverse
    h = canonicalize(substitute(g, mapping))
    return h, inverse, conditions


def derive(f, g, r_args=None, c_args=None, samples=1000, seed=0):
    """
    Derive and validate the repair function for the pair (f, g).

    Args:
        f (Reducer): Reducer of the target reduction.
        g (ScalarExpr): Body over r-arguments and c-arguments.
        r_args (tuple): Reduce-predecessor argument names; inferred when omitted.
        c_args (tuple): Constant argument names, tried in order; inferred when omitted.
        samples (int): Falsifier sample count for the distributivity check.
        seed (int): Falsifier seed.

    Returns:
        RepairCertificate: ``commutes`` is False when ``h`` does not distribute over ``f``.

    Raises:
        NotInvertible: When no c-argument can be isolated into an ``h`` free of c-arguments.
    """
    inferred_r, inferred_c = split_args(g)
    r_args = tuple(r_args) if r_args is not None else inferred_r
    c_args = tuple(c_args) if c_args is not None else inferred_c
    if not c_args:
        raise NotInvertible(f"g = {print_expr(g)} has no constant argument to invert")
    last_error = None
    for c in c_args:
        try:
            h, inverse, conditions = solve_h(g, r_args, c)
        except NotInvertible as e:
            last_error = e
            continue
        leftover = [other for other in c_args if contains_var(h, other)]
        if leftover:
            logger.debug("inverting in {} leaves {} in h = {}", c, leftover, print_expr(h))
            last_error = NotInvertible(f"h still depends on {', '.join(leftover)} after inverting in {c}")
            continue
        commutes = prove_distributes(h, f, samples=samples, seed=seed)
        cert = RepairCertificate(f, g, inverse, h, commutes, tuple(conditions), r_args, c)
        logger.debug("derived {}", cert.format())
        return cert
    raise last_error


# ---------------------------------------------------------------------------
# Empirical checks


def _reduce(f, values):
    acc = f.identity
    for v in values:
        acc = f.apply(acc, v)
    return acc


def _draw(rng, names, low, high):
    return {n: float(v) for n, v in zip(names, rng.uniform(low, high, size=len(names)))}


def check_tag_update(cert, reduce_domain=8, trials=1000, seed=0, rel_tol=1e-10, low=-3.0, high=3.0):
    """
    Brute-force tag-updating check.

    For random predecessor values at consecutive tags and random constant
    inputs per reduce index, repairing the partial reduction computed with
    the old values must give the partial reduction computed with the new ones.

    Returns:
        int: Number of failing cases (0 when the certificate is sound).
    """
    f, g, h = cert.f, cert.g, cert.h
    g_fn, h_fn = compile_scalar(g), compile_scalar(h)
    _, c_args = split_args(g)
    rng = np.random.default_rng(seed)
    failures = 0
    for trial in range(trials):
        j = int(rng.integers(0, reduce_domain))
        old = _draw(rng, cert.r_args, low, high)
        new = _draw(rng, cert.r_args, low, high)
        columns = [_draw(rng, c_args, low, high) for _ in range(j + 1)]
        before = _reduce(f, (g_fn({**old, **c}) for c in columns))
        after = _reduce(f, (g_fn({**new, **c}) for c in columns))
        env = {"t": before, **old, **{primed(r): v for r, v in new.items()}}
        repaired = h_fn(env)
        if not np.isclose(repaired, after, rtol=rel_tol, atol=rel_tol):
            failures += 1
            logger.debug("tag update fails at trial {}: {} != {}", trial, repaired, after)
    return failures


def recurrent_vs_explicit(cert, reduce_domain=8, trials=1000, seed=0, rel_tol=1e-10, low=-3.0, high=3.0):
    """
    Compare the repaired running reduction with the reduction recomputed from scratch.

    The predecessor arguments follow a running reduction of their own (a
    running max of random data), as they do after fusion; the recurrent form
    repairs the accumulator at every step while the explicit form reduces all
    terms with the final predecessor values.

    Returns:
        int: Number of failing cases.
    """
    f, g, h = cert.f, cert.g, cert.h
    g_fn, h_fn = compile_scalar(g), compile_scalar(h)
    _, c_args = split_args(g)
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(trials):
        size = int(rng.integers(1, reduce_domain + 1))
        steps = [_draw(rng, cert.r_args, low, high) for _ in range(size)]
        columns = [_draw(rng, c_args, low, high) for _ in range(size)]
        prev = {r: steps[0][r] for r in cert.r_args}
        acc = None
        history = []
        for step, column in zip(steps, columns):
            curr = {r: max(prev[r], step[r]) for r in cert.r_args}
            term = g_fn({**curr, **column})
            if acc is None:
                acc = term
            else:
                acc = f.apply(h_fn({"t": acc, **prev, **{primed(r): v for r, v in curr.items()}}), term)
            history.append(column)
            prev = curr
        explicit = _reduce(f, (g_fn({**prev, **c}) for c in history))
        if not np.isclose(acc, explicit, rtol=rel_tol, atol=rel_tol):
            failures += 1
    return failures
