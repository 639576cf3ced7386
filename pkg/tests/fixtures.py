"""Shared program texts for the test suite."""

SOFTMAX_DENOM = """\
tensor inp: f32[2, 4] input
tensor xmax: f32[2] intermediate
tensor xexp: f32[2, 4] intermediate
tensor xsum: f32[2] output

for i in range(2):
  for j in range(4):
    xmax[i] = max(xmax[i], inp[i, j])  # s_max
for i in range(2):
  for j in range(4):
    xexp[i, j] = exp(inp[i, j] - xmax[i])  # s_exp
for i in range(2):
  for j in range(4):
    xsum[i] += xexp[i, j]  # s_sum
"""

SOFTMAX_DENOM_TILE = """\
tensor inp: f32[2, 4] input
tensor xmax: f32[2] intermediate
tensor xexp: f32[2, 4] intermediate
tensor xsum: f32[2] output

xmax[0 : 2] = reduce(max, inp[0 : 2, 0 : 4], dim=1)  # s_max
xexp[0 : 2, 0 : 4] = exp(inp[0 : 2, 0 : 4] - xmax[0 : 2, None])  # s_exp
xsum[0 : 2] = reduce(+, xexp[0 : 2, 0 : 4], dim=1)  # s_sum
"""

SOFTMAX_DENOM_PSEUDO = """\
xmax[0 : 2] = reduce(max, inp[0 : 2, 0 : 4], dim=1)
xexp[0 : 2, 0 : 4] = exp(inp[0 : 2, 0 : 4] - xmax[0 : 2, None])
xsum[0 : 2] = reduce(+, xexp[0 : 2, 0 : 4], dim=1)
"""

# Row sum of squares over the row max: g = (c - r) * (c - r) has no inverse in c.
SQUARED_DEVIATION = """\
tensor inp: f32[2, 4] input
tensor xmax: f32[2] intermediate
tensor xsq: f32[2] output

for i in range(2):
  for j in range(4):
    xmax[i] = max(xmax[i], inp[i, j])  # s_max
for i in range(2):
  for j in range(4):
    xsq[i] += (inp[i, j] - xmax[i]) * (inp[i, j] - xmax[i])  # s_sq
"""

# Plain row sum with no reduce predecessor.
ROW_SUM = """\
tensor inp: f32[3, 5] input
tensor out: f32[3] output

for i in range(3):
  for j in range(5):
    out[i] += inp[i, j]  # s_sum
"""

# Row product of max-shifted values; its repair t + r - r' does not distribute over *
SHIFTED_PRODUCT = """\
tensor inp: f32[2, 4] input
tensor xmax: f32[2] intermediate
tensor xprod: f32[2] output

for i in range(2):
  for j in range(4):
    xmax[i] = max(xmax[i], inp[i, j])  # s_max
for i in range(2):
  for j in range(4):
    xprod[i] *= inp[i, j] - xmax[i]  # s_prod
"""

MATMUL = """\
tensor a: f32[4, 3] input
tensor b: f32[3, 2] input
tensor c: f32[4, 2] output

for i in range(4):
  for j in range(2):
    for k in range(3):
      c[i, j] += a[i, k] * b[k, j]  # mm
"""

TRANSPOSE = """\
tensor a: f32[3, 2] input
tensor t: f32[2, 3] output

for i in range(2):
  for j in range(3):
    t[i, j] = a[j, i]  # tr
"""

DIAGONAL = """\
tensor a: f32[4, 4] input
tensor d: f32[4] output

for i in range(4):
  d[i] = a[i, i] * 2  # diag
"""

REVERSED = """\
tensor a: f32[4] input
tensor rev: f32[4] output

for i in range(4):
  rev[i] = a[3 - i]  # rev
"""

RAMP = """\
tensor a: f32[4] input
tensor r: f32[4] output

for i in range(4):
  r[i] = a[i] + i  # ramp
"""

STRIDED = """\
tensor a: f32[8] input
tensor evens: f32[4] output

for i in range(4):
  evens[i] = a[2 * i]  # even
"""

COUNT = """\
tensor a: f32[2] input
tensor n: f32[2] output

for i in range(2):
  for j in range(3):
    n[i] += 1  # count
"""

DECOMPOSED_SUM = """\
tensor inp: f32[2, 4] input
tensor out: f32[2] output

for i in range(2):
  out[i] = 0  # init
  for j in range(4):
    out[i] += inp[i, j]  # acc
"""

_PRED_LINES = {
    "max": "xr[i] = max(xr[i], inp[i, j])",
    "min": "xr[i] = min(xr[i], inp[i, j])",
    "+": "xr[i] += inp[i, j]",
}


def reduction_chain(pred, body, target="+", rows=2, cols=4):
    """
    Two-nest program: ``xr`` reduces ``inp`` rows with ``pred`` (block ``s_r``)
    and ``out`` reduces ``body`` with ``target`` (block ``s_out``).

    ``body`` may read ``inp[i, j]``, ``w[i, j]`` and ``xr[i]``.
    """
    decls = [f"tensor inp: f32[{rows}, {cols}] input"]
    if "w[" in body:
        decls.append(f"tensor w: f32[{rows}, {cols}] input")
    decls += [f"tensor xr: f32[{rows}] intermediate", f"tensor out: f32[{rows}] output"]
    if target in ("+", "*"):
        out_line = f"out[i] {target}= {body}"
    else:
        out_line = f"out[i] = {target}(out[i], {body})"
    nests = [
        f"for i in range({rows}):\n  for j in range({cols}):\n    {_PRED_LINES[pred]}  # s_r",
        f"for i in range({rows}):\n  for j in range({cols}):\n    {out_line}  # s_out",
    ]
    return "\n".join(decls) + "\n\n" + "\n".join(nests) + "\n"

# SOFTMAX_DENOM after ``rolling_update s_sum s_max.j``; ``{repair}`` stands for h(t, r, r').
ROLLED_SOFTMAX = """\
tensor inp: f32[2, 4] input
tensor xmax_1: f32[2] intermediate
tensor xsum: f32[2] output
tensor xmax_0: f32[2] intermediate

for i in range(2):
  xmax_0[i] = -inf  # s_max_prev
  for j in range(4):
    xmax_1[i] = max(xmax_0[i], inp[i, j])  # s_max
    xsum[i] = select(xsum[i] == 0, xsum[i], {repair}) + exp(inp[i, j] - xmax_1[i])  # s_sum
    xmax_0[i] = xmax_1[i]  # s_max_roll
"""

# ROLLED_SOFTMAX after ``privatize_reduce s_max,s_sum s_max.j 2 j1,j2``.
PRIVATIZED_SOFTMAX = """\
tensor inp: f32[2, 4] input
tensor xmax_1: f32[2] intermediate
tensor xsum: f32[2] output
tensor xmax_0: f32[2] intermediate
tensor xmax_1p: f32[2, 2] intermediate
tensor xsump: f32[2, 2] intermediate

for i in range(2):
  xmax_0[i] = -inf  # s_max_prev
  for j1 in range(2):
    for j2 in range(2):
      xmax_1p[i, j1] = max(xmax_1p[i, j1], inp[i, j1 * 2 + j2])  # s_max_local
    xmax_1[i] = max(xmax_1[i], xmax_1p[i, j1])  # s_max_global
    for j2 in range(2):
      xsump[i, j1] += exp(inp[i, j1 * 2 + j2] - xmax_1[i])  # s_sum_local
    xsum[i] = select(xsum[i] == 0, xsum[i], {repair}) + xsump[i, j1]  # s_sum_global
    xmax_0[i] = xmax_1[i]  # s_max_roll
"""

PRIVATIZED_SOFTMAX_TILE = """\
tensor inp: f32[2, 4] input
tensor xmax_1: f32[2] intermediate
tensor xsum: f32[2] output
tensor xmax_0: f32[2] intermediate
tensor xmax_1p: f32[2, 2] intermediate
tensor xsump: f32[2, 2] intermediate

for i in range(2):
  xmax_0[i] = -inf  # s_max_prev
  for j1 in range(2):
    xmax_1p[i, j1] = reduce(max, inp[i, j1*2 : j1*2+2], dim=1)  # s_max_local
    xmax_1[i] = max(xmax_1[i], xmax_1p[i, j1])  # s_max_global
    xsump[i, j1] = reduce(+, exp(inp[i, j1*2 : j1*2+2] - xmax_1[i]), dim=1)  # s_sum_local
    xsum[i] = select(xsum[i] == 0, xsum[i], {repair}) + xsump[i, j1]  # s_sum_global
    xmax_0[i] = xmax_1[i]  # s_max_roll
"""
