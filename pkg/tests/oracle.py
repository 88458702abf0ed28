"""Independent reference arithmetic, written without the package's helpers.

Parameter counts enumerate every weight matrix by name; times use exact
fractions. The unit tests freeze this module's outputs as literals, and
``test_oracles.py`` checks the oracle still reproduces them.
"""

from fractions import Fraction
from itertools import product
from math import ceil, log


def loop_gemm_flops(m, k, n):
    """Count multiply-accumulates over the full loop nest (small shapes only)."""
    macs = sum(1 for _ in product(range(m), range(k), range(n)))
    return 2 * macs


def block_gemm_flops(m, k, n, block=256):
    """Tile the loop nest into blocks and count each block's MACs; for large shapes."""
    total = 0
    for i0 in range(0, m, block):
        for k0 in range(0, k, block):
            for j0 in range(0, n, block):
                total += min(block, m - i0) * min(block, k - k0) * min(block, n - j0)
    return 2 * total


def layer_params(d_model, heads, kv_heads, head_dim, d_ff):
    mats = {
        "wq": (d_model, heads * head_dim),
        "wk": (d_model, kv_heads * head_dim),
        "wv": (d_model, kv_heads * head_dim),
        "wo": (heads * head_dim, d_model),
        "w_gate": (d_model, d_ff),
        "w_up": (d_model, d_ff),
        "w_down": (d_ff, d_model),
    }
    return sum(r * c for r, c in mats.values())


def model_bytes(layers, vocab, d_model, heads, kv_heads, head_dim, d_ff, b):
    return b * (layers * layer_params(d_model, heads, kv_heads, head_dim, d_ff) + 2 * vocab * d_model)


def kv_layer_bytes(tokens, kv_heads, head_dim, b):
    per_token = 0
    for _tensor in ("k", "v"):
        per_token += kv_heads * head_dim * b
    return tokens * per_token


def attention_flops(q, kv, heads, head_dim):
    scores = 2 * q * kv * head_dim  # QK^T per head
    mix = 2 * q * kv * head_dim  # PV per head
    return heads * (scores + mix)


def padded_time(m, k, n, tm, tn, td, peak):
    pm, pn, pk = ceil(m / tm) * tm, ceil(n / tn) * tn, ceil(k / td) * td
    return Fraction(2 * pm * pn * pk) / Fraction(peak)


def clock(peak, tm, tn, td):
    return Fraction(peak) / (2 * tm * tn * td)


def lognormal_fit(median, p90, z90=Fraction(1281551565545, 10 ** 12)):
    return log(median), log(p90 / median) / float(z90)


V6E = dict(peak=918 * 10 ** 12, systolic=(128, 128, 16), vector=(128, 16, 16), bw=Fraction(164, 100) * 10 ** 12)
LLAMA8B = dict(layers=32, vocab=128256, d_model=4096, heads=32, kv_heads=8, head_dim=128, d_ff=14336, b=2)
