"""BER and Q-factor, multiplication counts, bit-operation bounds and memory.

Bit-operation (BO) bounds take zeta = 1, so an addition of two b-bit
integers costs b and a b1 x b2 product costs b1*b2. ``bit_adder_sim`` is
the ripple-carry reference that costs 5 BO per bit; the bit-serial
inner-product oracle divides its adder cost by five to compare against the
bounds on the same footing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import qam16_demap

FP32_BITS = 32
ADDER_ZETA = 5


class MetricsError(ValueError):
    pass


class IncompleteBitmapError(MetricsError):
    pass


# --------------------------------------------------------------------------
# BER and Q-factor
# --------------------------------------------------------------------------

def erfcinv(y: float, tol: float = 1e-12) -> float:
    """Inverse complementary error function by bisection then Newton.

    Works on log(erfc) so tiny arguments keep full relative accuracy.
    """
    y = float(y)
    if not 0.0 < y < 2.0:
        raise MetricsError(f"erfcinv needs 0 < y < 2, got {y}")
    if y > 1.0:
        return -erfcinv(2.0 - y, tol)
    if y == 1.0:
        return 0.0
    lo, hi = 0.0, 27.0  # erfc(27) underflows to ~5e-319
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if math.erfc(mid) > y:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    ly = math.log(y)
    for _ in range(50):
        e = math.erfc(x)
        f = math.log(e) - ly
        df = -2.0 / math.sqrt(math.pi) * math.exp(-x * x) / e
        step = f / df
        x -= step
        if abs(step) <= tol * max(1.0, abs(x)):
            break
    return x


def qfactor(ber: float) -> float:
    """10 log10(2 erfcinv(2 BER)^2) in dB."""
    ber = float(ber)
    if not 0.0 < ber < 0.5:
        raise MetricsError(f"BER must lie in (0, 0.5), got {ber}")
    return 10.0 * math.log10(2.0 * erfcinv(2.0 * ber) ** 2)


def count_bit_errors(tx_x, tx_y, est_x, est_y) -> tuple[int, int]:
    """Hard-decision bit errors over both polarizations; returns (errors, bits)."""
    tx = np.concatenate([np.asarray(tx_x), np.asarray(tx_y)])
    est = np.concatenate([np.asarray(est_x), np.asarray(est_y)])
    a, b = qam16_demap(tx), qam16_demap(est)
    return int(np.count_nonzero(a != b)), int(a.size)


def ber_from_counts(errors: int, bits: int) -> float:
    """Error ratio, floored at half an error so the Q-factor stays finite."""
    if bits <= 0:
        raise MetricsError("no bits to count")
    return max(errors, 0.5) / bits


def ber(tx_x, tx_y, est_x, est_y) -> float:
    return ber_from_counts(*count_bit_errors(tx_x, tx_y, est_x, est_y))


# --------------------------------------------------------------------------
# Multiplication counts (real multiplications per symbol per polarization)
# --------------------------------------------------------------------------

def _num(x):
    return int(x) if float(x).is_integer() else float(x)


def mult_count_convfc(n_i: int, K: int, n_h: int, n_o: int = 4):
    """4 n_i K + 2 n_i n_h + n_h n_o / 2."""
    if min(n_i, K, n_h, n_o) < 1:
        raise MetricsError("all sizes must be >= 1")
    return _num(4 * n_i * K + 2 * n_i * n_h + n_h * n_o / 2)


def mult_count_bilstm(n_h: int, n_i: int, n_o: int = 4) -> int:
    """n_h (4 n_h + 16 n_i + 3 + n_o)."""
    if min(n_h, n_i, n_o) < 1:
        raise MetricsError("all sizes must be >= 1")
    return n_h * (4 * n_h + 16 * n_i + 3 + n_o)


# --------------------------------------------------------------------------
# Bit-operation bounds (zeta = 1)
# --------------------------------------------------------------------------

def clog2(n: int) -> int:
    """ceil(log2 n); exact log2 for powers of two."""
    if n < 1:
        raise MetricsError("n must be >= 1")
    return (int(n) - 1).bit_length()


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def bo_inner(n: int, b1: int, b2: int) -> int:
    """n b1 b2 + (n-1)(b1 + b2 + log2 n); log2 rounds up for general n."""
    if n < 1 or b1 < 1 or b2 < 1:
        raise MetricsError("n and bit-widths must be >= 1")
    return n * b1 * b2 + (n - 1) * (b1 + b2 + clog2(n))


def bo_sum(n: int, b: int) -> tuple[int, int]:
    """(exact level-by-level cost, closed-form bound) of a pairwise sum of n b-bit terms."""
    if not is_pow2(n):
        raise MetricsError(f"n={n} is not a power of two")
    if b < 1:
        raise MetricsError("bit-width must be >= 1")
    L = clog2(n)
    exact = sum((b + k - 1) * (n >> k) for k in range(1, L + 1))
    return exact, (b + L) * (n - 1)


def bo_fc(n_i: int, n_o: int, b_i: int, b_w: int) -> int:
    return n_o * bo_inner(n_i, b_i, b_w)


def bo_conv(n_i: int, n_w: int, b_i: int, b_w: int) -> int:
    return n_i * bo_inner(n_w, b_i, b_w)


def bo_lstm(n_i: int, n_h: int, b_i: int, b_w: int, b_a: int) -> int:
    n = n_h + n_i + 1
    return 4 * n_h * (n * (b_i + b_a) * b_w + (n_h + n_i) * (b_w + b_i + b_a + clog2(n)))


def bo_bilstm(n_i: int, n_h: int, b_i: int, b_w: int, b_a: int) -> int:
    return 2 * bo_lstm(n_i, n_h, b_i, b_w, b_a)


# --------------------------------------------------------------------------
# Bit-level oracles
# --------------------------------------------------------------------------

def bit_adder_sim(x: int, y: int, b: int) -> tuple[int, int]:
    """Ripple-carry addition of two b-bit unsigned integers.

    Per bit: t = x_i ^ y_i, z_i = t ^ c_i, c_{i+1} = (x_i & y_i) | (t & c_i),
    five operations. Returns (sum, BO count = 5 b).
    """
    if b < 1:
        raise MetricsError("bit-width must be >= 1")
    if not (0 <= x < 2**b and 0 <= y < 2**b):
        raise MetricsError(f"operands must lie in [0, 2^{b})")
    carry, z, ops = 0, 0, 0
    for i in range(b):
        xi, yi = (x >> i) & 1, (y >> i) & 1
        t = xi ^ yi
        z |= (t ^ carry) << i
        carry = (xi & yi) | (t & carry)
        ops += 5
    z |= carry << b
    return z, ops


def _add_cost(x: int, y: int) -> tuple[int, int]:
    b = max(x.bit_length(), y.bit_length(), 1)
    z, ops = bit_adder_sim(x, y, b)
    return z, ops // ADDER_ZETA


def _shift_add_multiply(x: int, y: int, b1: int, b2: int) -> tuple[int, int]:
    """x * y as a sum of shifted copies of y, one per set bit of x.

    Each copy has at most b2 set bits and costs b2 BO (zeta = 1); the
    partial products are merged with bit-serial additions whose cost is
    already covered by the b1 b2 multiplication budget.
    """
    partial = [y << i for i in range(b1) if (x >> i) & 1]
    prod = sum(partial)
    return prod, len(partial) * b2


def inner_product_oracle(w, x, b1: int, b2: int) -> tuple[int, int]:
    """Exact bit-level cost of sum_i w_i x_i for unsigned integer vectors.

    Products by shift-and-add, then a pairwise reduction tree with ripple-carry
    adders sized to the wider operand. Returns (value, BO with zeta = 1).
    """
    w = [int(v) for v in w]
    x = [int(v) for v in x]
    if len(w) != len(x) or not w:
        raise MetricsError("vectors must be non-empty and of equal length")
    if any(not 0 <= v < 2**b1 for v in w) or any(not 0 <= v < 2**b2 for v in x):
        raise MetricsError("operands exceed their bit-widths")
    cost = 0
    terms = []
    for wi, xi in zip(w, x):
        p, c = _shift_add_multiply(wi, xi, b1, b2)
        terms.append(p)
        cost += c
    while len(terms) > 1:
        nxt = []
        for i in range(0, len(terms) - 1, 2):
            s, c = _add_cost(terms[i], terms[i + 1])
            nxt.append(s)
            cost += c
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0], cost


# --------------------------------------------------------------------------
# Memory and complexity reports
# --------------------------------------------------------------------------

def memory_reduction(avg_bits: float) -> float:
    """1 - b / 32."""
    return 1.0 - avg_bits / FP32_BITS


@dataclass
class LayerCost:
    name: str
    mults_per_pol: float
    bo_bound: int
    memory_bits: int
    n_weights: int


@dataclass
class ComplexityReport:
    real_mults_per_pol: float
    bo_bound_total: int
    memory_bits: int
    memory_reduction_vs_fp32: float
    avg_bits_w: float
    bits_a: int | None
    bo_reduction_vs_fp32: float
    layers: list[LayerCost] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [("layer", "mults/pol", "BO bound", "memory bits", "weights")]
        for l in self.layers:
            rows.append((l.name, f"{l.mults_per_pol:g}", str(l.bo_bound), str(l.memory_bits), str(l.n_weights)))
        rows.append(("total", f"{self.real_mults_per_pol:g}", str(self.bo_bound_total), str(self.memory_bits),
                     str(sum(l.n_weights for l in self.layers))))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.append(f"average weight bits {self.avg_bits_w:.4g}, memory reduction "
                     f"{100 * self.memory_reduction_vs_fp32:.2f}%, BO reduction {100 * self.bo_reduction_vs_fp32:.2f}%")
        return "\n".join(lines)


def element_bits(model, bitmap, plan=None) -> dict[str, np.ndarray]:
    """Per-element storage width of every quantizable tensor of ``model``.

    ``bitmap.weight_bits(name)`` gives the tensor width; a partition plan with
    per-group widths overrides it group by group.
    """
    out = {}
    for name in model.weight_names():
        size = model.params[name].value.size
        w = bitmap.weight_bits(name)
        if w is None:
            raise IncompleteBitmapError(f"bit map has no width for {name!r}")
        bits = np.full(size, int(w))
        if plan is not None and plan.bits is not None and name in plan.groups:
            for g, idx in enumerate(plan.groups[name]):
                bits[idx] = plan.bits[g]
        out[name] = bits
    return out


def element_bits_from_quant(model) -> dict[str, np.ndarray]:
    """Per-element widths read off a quantized model's grids; unmapped elements count 32 bits."""
    out = {}
    for name in model.weight_names():
        bits = np.full(model.params[name].value.size, FP32_BITS)
        for idx, grid in model.quant.weights.get(name, []):
            bits[idx] = grid.bits
        out[name] = bits
    return out


def memory_report(model, bitmap, plan=None) -> ComplexityReport:
    """Weight storage at the mapped widths; biases are kept out, as in the cost model."""
    return complexity_report(model, bitmap, plan)


def _layer_bits(ebits: dict[str, np.ndarray], names) -> tuple[int, int, int]:
    """(memory bits, weight count, widest width) over ``names``."""
    mem = sum(int(ebits[n].sum()) for n in names)
    cnt = sum(int(ebits[n].size) for n in names)
    wmax = max(int(ebits[n].max()) for n in names)
    return mem, cnt, wmax


def complexity_report(model, bitmap, plan=None, ebits: dict[str, np.ndarray] | None = None) -> ComplexityReport:
    """Multiplications, BO bounds and memory of ``model`` under ``bitmap``.

    BO bounds cover one output symbol on both polarizations and use the widest
    weight width of each layer. Unquantized activations count as 32 bits.
    ``ebits`` replaces the per-element widths derived from ``bitmap`` and ``plan``.
    """
    if ebits is None:
        ebits = element_bits(model, bitmap, plan)
    hp = model.hyper()

    def act(point):
        b = bitmap.act_bits(point)
        return FP32_BITS if b is None else int(b)

    layers = []
    if model.kind == "convfc":
        n_i, K, n_h, n_o = hp["M"] + 1, hp["K"], hp["n_h"], hp["n_o"]
        mem, cnt, bw = _layer_bits(ebits, ["conv.re", "conv.im"])
        layers.append(LayerCost("conv", 4 * n_i * K, 8 * bo_conv(n_i, K, act("input"), bw), mem, cnt))
        mem, cnt, bw = _layer_bits(ebits, ["dense.weight"])
        layers.append(LayerCost("dense", 2 * n_i * n_h, bo_fc(4 * n_i, n_h, act("conv"), bw), mem, cnt))
        mem, cnt, bw = _layer_bits(ebits, ["out.weight"])
        layers.append(LayerCost("out", _num(n_h * n_o / 2), bo_fc(n_h, n_o, act("hidden"), bw), mem, cnt))
        fp = (8 * bo_conv(n_i, K, 32, 32) + bo_fc(4 * n_i, n_h, 32, 32) + bo_fc(n_h, n_o, 32, 32))
    elif model.kind == "bilstm":
        n_i, n_h, n_o = hp["M"] + 1, hp["n_h"], hp["n_o"]
        n_x = 4 * n_i
        cells = [n for n in model.weight_names() if n != "out.weight"]
        mem, cnt, bw = _layer_bits(ebits, cells)
        lstm_mults = n_h * (4 * n_h + 4 * n_x + 3)
        layers.append(LayerCost("bilstm", lstm_mults, bo_bilstm(n_x, n_h, act("input"), bw, act("lstm")), mem, cnt))
        mem, cnt, bw = _layer_bits(ebits, ["out.weight"])
        layers.append(LayerCost("out", n_h * n_o, bo_fc(2 * n_h, n_o, act("lstm"), bw), mem, cnt))
        fp = bo_bilstm(n_x, n_h, 32, 32, 32) + bo_fc(2 * n_h, n_o, 32, 32)
    else:
        raise MetricsError(f"unknown model kind {model.kind!r}")
    mem = sum(l.memory_bits for l in layers)
    cnt = sum(l.n_weights for l in layers)
    bo = sum(l.bo_bound for l in layers)
    avg = mem / cnt
    return ComplexityReport(
        real_mults_per_pol=_num(sum(l.mults_per_pol for l in layers)),
        bo_bound_total=int(bo),
        memory_bits=int(mem),
        memory_reduction_vs_fp32=memory_reduction(avg),
        avg_bits_w=avg,
        bits_a=bitmap.act_bits(None) if hasattr(bitmap, "act_bits") else None,
        bo_reduction_vs_fp32=1.0 - bo / fp,
        layers=layers,
    )


__all__ = [
    "ComplexityReport", "IncompleteBitmapError", "LayerCost", "MetricsError", "ber", "ber_from_counts",
    "bit_adder_sim", "bo_bilstm", "bo_conv", "bo_fc", "bo_inner", "bo_lstm", "bo_sum", "clog2",
    "complexity_report", "count_bit_errors", "element_bits", "element_bits_from_quant", "erfcinv",
    "inner_product_oracle",
    "is_pow2", "memory_reduction", "memory_report", "mult_count_bilstm", "mult_count_convfc", "qfactor",
]
