"""Quantization grids, clipping-range calibration and the scalar quantizer.

Grids are immutable. ``QuantGrid.quantize`` works elementwise on arrays and
always returns members of ``grid.symbols``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

KINDS = ("uniform", "uniform-symmetric", "pot", "apot", "companded")
CalibrationMode = Literal["minmax", "mean-sigma", "fixed", "mse"]
PASS_THROUGH_BITS = 32


class QuantizationError(ValueError):
    pass


class DegenerateRangeError(QuantizationError):
    pass


@dataclass(frozen=True)
class ClippingRange:
    lo: float
    hi: float
    mode: str = "fixed"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DegenerateRangeError(f"clipping range [{self.lo}, {self.hi}] is empty")


@dataclass(frozen=True, eq=False)
class QuantGrid:
    """Sorted symbol table plus the rule that maps reals onto it.

    For the uniform kinds ``quantize`` uses clip(round(w/s) + z; 0, N);
    companded grids go through the mu-law compressor and an inner uniform
    grid on [-1, 1]; the remaining kinds use nearest-symbol search with ties
    broken toward the smaller magnitude.
    """

    symbols: np.ndarray
    bits: int
    kind: str
    scale: float = 1.0
    zero_point: float = 0
    clip_lo: float = None
    clip_hi: float = None
    mu: float | None = None
    # companded only: the uniform grid used in the compressed domain
    inner: "QuantGrid | None" = field(default=None, repr=False)

    def __post_init__(self):
        sym = np.asarray(self.symbols, dtype=np.float64)
        if sym.ndim != 1 or sym.size == 0:
            raise QuantizationError("grid needs a non-empty 1-D symbol table")
        if np.any(np.diff(sym) <= 0):
            raise QuantizationError("grid symbols must be strictly increasing")
        if self.kind not in KINDS:
            raise QuantizationError(f"unknown grid kind {self.kind!r}")
        sym.setflags(write=False)
        object.__setattr__(self, "symbols", sym)
        if self.clip_lo is None:
            object.__setattr__(self, "clip_lo", float(sym[0]))
        if self.clip_hi is None:
            object.__setattr__(self, "clip_hi", float(sym[-1]))

    @property
    def n_levels(self) -> int:
        return self.symbols.size

    def __len__(self):
        return self.symbols.size

    def __contains__(self, w) -> bool:
        return bool(np.isin(w, self.symbols).all())

    def codes(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "uniform":
            return _uniform_codes(w, self.scale, self.zero_point, self.symbols.size - 1)
        if self.kind == "uniform-symmetric":
            # codes count from the most negative level
            return _uniform_codes(w, self.scale, self.symbols.size // 2, self.symbols.size - 1)
        if self.kind == "companded":
            u = normalize(w, self.clip_lo, self.clip_hi)
            return self.inner.codes(mu_compress(u, self.mu))
        return _nearest_codes(w, self.symbols)

    def quantize(self, w):
        """Return ``(w_hat, code)``; both have the shape of ``w``."""
        c = self.codes(w)
        return self.symbols[c], c

    def __call__(self, w) -> np.ndarray:
        return self.symbols[self.codes(w)]

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "bits": self.bits,
            "scale": self.scale,
            "zero_point": self.zero_point,
            "clip_lo": self.clip_lo,
            "clip_hi": self.clip_hi,
            "mu": self.mu,
            "symbols": self.symbols.tolist(),
        }
        if self.inner is not None:
            d["inner"] = self.inner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantGrid":
        inner = cls.from_dict(d["inner"]) if d.get("inner") else None
        return cls(np.array(d["symbols"]), d["bits"], d["kind"], d["scale"], d["zero_point"],
                   d["clip_lo"], d["clip_hi"], d.get("mu"), inner)


def _uniform_codes(w: np.ndarray, s: float, z: float, n: int) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        q = w / s
        # keep +-inf finite so rint/clip behave
        q = np.nan_to_num(q, nan=0.0, posinf=n + abs(z) + 1.0, neginf=-(n + abs(z) + 1.0))
        if float(z).is_integer():
            c = np.rint(q) + z
        else:
            c = np.rint(q + z)
    return np.clip(c, 0, n).astype(np.int64)


def _nearest_codes(w: np.ndarray, sym: np.ndarray) -> np.ndarray:
    # clip first: far outside the grid the two distances can round to a false tie
    w = np.clip(np.nan_to_num(w, nan=0.0), sym[0], sym[-1])
    hi = np.clip(np.searchsorted(sym, w, side="left"), 1, sym.size - 1) if sym.size > 1 else np.zeros(w.shape, int)
    if sym.size == 1:
        return hi
    lo = hi - 1
    d_lo = np.abs(w - sym[lo])
    d_hi = np.abs(sym[hi] - w)
    tie = d_lo == d_hi
    pick_hi = d_hi < d_lo
    # ties go to the symbol of smaller magnitude
    pick_hi = np.where(tie, np.abs(sym[hi]) < np.abs(sym[lo]), pick_hi)
    return np.where(pick_hi, hi, lo).astype(np.int64)


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

def calibrate(values, mode: str = "minmax", kappa: float = 4.0, bits: int = 8,
              fixed: tuple[float, float] | None = None):
    """Clipping range plus uniform step and zero point for ``bits``.

    Returns ``(ClippingRange, s, z)`` with s = (beta - alpha)/N and
    z = floor(-alpha/s), N = 2**bits - 1. Mode ``mse`` searches the
    mean-sigma width that minimizes the uniform-quantization MSE of ``values``.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise QuantizationError("calibration needs at least one value")
    if bits < 1:
        raise QuantizationError("bit-width must be >= 1")
    n = 2**bits - 1
    if mode == "minmax":
        lo, hi = float(v.min()), float(v.max())
        if lo == hi:
            raise DegenerateRangeError("min equals max; cannot calibrate")
    elif mode == "mean-sigma":
        if kappa <= 0:
            raise QuantizationError("kappa must be positive")
        mu, sd = float(v.mean()), float(v.std())
        if sd == 0:
            raise DegenerateRangeError("zero standard deviation; cannot calibrate")
        lo, hi = mu - kappa * sd, mu + kappa * sd
    elif mode == "fixed":
        if fixed is None:
            raise QuantizationError("fixed mode needs an explicit (lo, hi)")
        lo, hi = map(float, fixed)
    elif mode == "mse":
        return _calibrate_mse(v, bits)
    else:
        raise QuantizationError(f"unknown calibration mode {mode!r}")
    rng = ClippingRange(lo, hi, mode)
    s = (hi - lo) / n
    z = int(np.floor(-lo / s))
    return rng, s, z


def _calibrate_mse(v: np.ndarray, bits: int):
    best = None
    mu, sd = float(v.mean()), float(v.std())
    if sd == 0:
        raise DegenerateRangeError("zero standard deviation; cannot calibrate")
    for kappa in np.linspace(0.5, 6.0, 45):
        rng, s, z = calibrate(v, "mean-sigma", kappa, bits)
        d = distortion(uniform_grid(s, z, bits), v)
        if best is None or d < best[0]:
            best = (d, ClippingRange(rng.lo, rng.hi, "mse"), s, z)
    return best[1:]


# --------------------------------------------------------------------------
# Grid constructors
# --------------------------------------------------------------------------

def uniform_grid(s: float, z: float, bits: int, clip: ClippingRange | None = None) -> QuantGrid:
    """{-z s, -z s + s, ..., -z s + s N} with N = 2**bits - 1."""
    if not s > 0:
        raise QuantizationError("scale must be positive")
    if bits < 1:
        raise QuantizationError("bit-width must be >= 1")
    n = 2**bits - 1
    sym = s * (np.arange(n + 1) - z)
    return QuantGrid(sym, bits, "uniform", float(s), z,
                     clip.lo if clip else None, clip.hi if clip else None)


def symmetric_signed_grid(s: float, bits: int, clip: ClippingRange | None = None) -> QuantGrid:
    """{k s : k = -(N+1)/2, ..., (N-1)/2}; always contains zero."""
    if not s > 0:
        raise QuantizationError("scale must be positive")
    if bits < 1:
        raise QuantizationError("bit-width must be >= 1")
    half = 2 ** (bits - 1)
    sym = s * np.arange(-half, half)
    return QuantGrid(sym, bits, "uniform-symmetric", float(s), 0,
                     clip.lo if clip else None, clip.hi if clip else None)


def _pot_magnitudes(r: int, bits: int) -> np.ndarray:
    exps = np.arange(2 ** (bits - 1))
    return np.concatenate([[0.0], 2.0 ** (-r * exps)])


def pot_grid(s: float, r: int, bits: int) -> QuantGrid:
    """+-s {0, 2^0, 2^-r, ..., 2^(-r (2^(b-1) - 1))}, zero counted once."""
    if not s > 0:
        raise QuantizationError("scale must be positive")
    if r < 1 or bits < 1:
        raise QuantizationError("need r >= 1 and bits >= 1")
    mag = s * _pot_magnitudes(r, bits)
    sym = np.unique(np.concatenate([-mag, mag]))
    return QuantGrid(sym, bits, "pot", float(s), 0)


def apot_grid(s: float, bits: int, b0: int, shift: float = 0.0) -> QuantGrid:
    """Additive powers-of-two: +-s (sum_i 2^-i |PoT(1, n, b0+1)|) + shift, n = bits/b0.

    Duplicate sums are merged, so the symbol count can fall short of 2**bits.
    """
    if not s > 0:
        raise QuantizationError("scale must be positive")
    if b0 < 1 or bits < b0 or bits % b0:
        raise QuantizationError(f"bits={bits} must be a positive multiple of b0={b0}")
    n = bits // b0
    base = _pot_magnitudes(n, b0 + 1)
    sums = {0.0}
    for i in range(n):
        sums = {a + 2.0**-i * b for a in sums for b in base}
    mag = s * np.array(sorted(sums))
    sym = np.unique(np.concatenate([-mag, mag])) + shift
    return QuantGrid(sym, bits, "apot", float(s), 0)


def minkowski_sum(*sets) -> np.ndarray:
    """Sorted distinct pairwise sums; used as an enumeration oracle."""
    out = {sum(t) for t in itertools.product(*sets)}
    return np.array(sorted(out))


# --------------------------------------------------------------------------
# Companding
# --------------------------------------------------------------------------

def _check_mu(mu: float) -> None:
    if not mu > 0:
        raise QuantizationError("mu must be positive")


def mu_compress(w, mu: float):
    """sign(w) log(1 + mu |w|) / log(1 + mu)."""
    _check_mu(mu)
    w = np.asarray(w, dtype=np.float64)
    return np.sign(w) * np.log1p(mu * np.abs(w)) / np.log1p(mu)


def mu_expand(wc, mu: float):
    """Inverse of :func:`mu_compress`."""
    _check_mu(mu)
    wc = np.asarray(wc, dtype=np.float64)
    return np.sign(wc) * np.expm1(np.abs(wc) * np.log1p(mu)) / mu


def normalize(w, lo: float, hi: float):
    """Affine map [lo, hi] -> [-1, 1], clipped."""
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        u = 2 * (w - lo) / (hi - lo) - 1
    return np.clip(np.nan_to_num(u, nan=0.0), -1.0, 1.0)


def denormalize(u, lo: float, hi: float):
    return lo + (np.asarray(u, dtype=np.float64) + 1) * (hi - lo) / 2


def unit_uniform_grid(bits: int) -> QuantGrid:
    """Symmetric signed grid with step 2**(1-bits): 2**bits levels in [-1, 1), zero included."""
    return symmetric_signed_grid(2.0 ** (1 - bits), bits, ClippingRange(-1.0, 1.0))


def companded_grid(mu: float, bits: int, clip: ClippingRange) -> QuantGrid:
    """Effective grid of compress -> uniform quantize on [-1, 1] -> expand over ``clip``."""
    _check_mu(mu)
    inner = unit_uniform_grid(bits)
    sym = denormalize(mu_expand(inner.symbols, mu), clip.lo, clip.hi)
    # float round trip may nudge the end point; pin it
    sym[0] = clip.lo
    return QuantGrid(sym, bits, "companded", inner.scale, inner.zero_point, clip.lo, clip.hi, float(mu), inner)


def companding_quantize(w, mu: float, inner: QuantGrid, clip: ClippingRange):
    """normalize -> compress -> quantize on ``inner`` -> expand -> denormalize."""
    u = mu_compress(normalize(w, clip.lo, clip.hi), mu)
    return denormalize(mu_expand(inner(u), mu), clip.lo, clip.hi)


def distortion(grid: QuantGrid, samples) -> float:
    """Empirical mean squared quantization error."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise QuantizationError("distortion needs samples")
    return float(np.mean((x - grid(x)) ** 2))


# --------------------------------------------------------------------------
# Spec -> grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizerSpec:
    kind: str = "uniform"
    calibration: str = "minmax"
    kappa: float = 4.0
    mu: float = 255.0
    pot_r: int = 1
    apot_b0: int = 2
    apot_shift: float = 0.0
    # fixed clipping range, only for calibration == "fixed"
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise QuantizationError(f"unknown quantizer kind {self.kind!r}")
        if self.calibration not in ("minmax", "mean-sigma", "fixed", "mse"):
            raise QuantizationError(f"unknown calibration mode {self.calibration!r}")

    @property
    def symmetric(self) -> bool:
        return self.kind == "uniform-symmetric"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "calibration": self.calibration, "kappa": self.kappa, "mu": self.mu,
            "pot_r": self.pot_r, "apot_b0": self.apot_b0, "apot_shift": self.apot_shift,
            "clip": list(self.clip) if self.clip else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerSpec":
        d = dict(d)
        if d.get("clip") is not None:
            d["clip"] = tuple(d["clip"])
        return cls(**d)

    def build(self, values, bits: int) -> QuantGrid:
        """Calibrate on ``values`` and construct the grid for ``bits``."""
        clip, s, z = calibrate(values, self.calibration, self.kappa, bits, self.clip)
        if self.kind == "uniform":
            return uniform_grid(s, z, bits, clip)
        if self.kind == "uniform-symmetric":
            amax = max(abs(clip.lo), abs(clip.hi))
            return symmetric_signed_grid(amax / 2 ** (bits - 1), bits, clip)
        if self.kind == "companded":
            # centre the compressor on zero so the dense region sits at w = 0
            amax = max(abs(clip.lo), abs(clip.hi))
            return companded_grid(self.mu, bits, ClippingRange(-amax, amax, clip.mode))
        amax = max(abs(clip.lo), abs(clip.hi))
        if self.kind == "pot":
            return pot_grid(amax, self.pot_r, bits)
        # apot: fall back to a single term when bits is not a multiple of b0
        b0 = self.apot_b0 if bits % self.apot_b0 == 0 else bits
        n = bits // b0
        return apot_grid(amax / (2 - 2.0 ** (1 - n)), bits, b0, self.apot_shift)
