"""Training loop and the quantization strategies.

All strategies take a model, return a quantized copy and leave the input
untouched. Weights are quantized tensor by tensor, or group by group when a
:class:`PartitionPlan` is given; activations use static uniform grids
calibrated on a fixed calibration batch. Biases stay in full precision.

Strategies:

* :func:`ptq` quantizes a trained model without retraining.
* :func:`qat_ste_train` trains through the quantizer with a clipped-identity
  (straight-through) derivative.
* :func:`ab_train` anneals the blend (1 - a) w + a Q(w) from a = 0 to 1.
* :func:`sptq` quantizes partition groups one at a time and retrains the rest.
* :func:`sab` blends one group at a time while retraining the rest; the last
  group is trained with alpha-blending.
* :func:`companding_sab` runs :func:`sab` on mu-law companded grids, blending
  in the compressed domain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import SymbolFrame
from .metrics import ber_from_counts, count_bit_errors, qfactor
from .models import Equalizer, QuantState, outputs_to_symbols
from .quantizers import (PASS_THROUGH_BITS, QuantGrid, QuantizationError, QuantizerSpec, denormalize,
                         mu_compress, mu_expand, normalize)
from .tensor import Adam, CustomGradientNode, NumericError, Tensor, grad, mse_loss

log = logging.getLogger(__name__)

DEFAULT_ACT_SPEC = QuantizerSpec(kind="uniform", calibration="minmax")


class TrainingDiverged(NumericError):
    pass


# --------------------------------------------------------------------------
# Configuration objects
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    # SPTQ retraining epochs after each group is fixed
    retrain_epochs: int = 10
    # epochs per alpha step in AB and SAB
    epochs_per_alpha: int = 1
    calib_size: int = 10_000

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class BitMap:
    """Bit-widths per tensor and per activation point.

    ``overrides`` keys are parameter names (``dense.weight``), layer prefixes
    (``dense``) or activation points prefixed with ``act.`` (``act.hidden``).
    A width of 32 or more means the tensor is left in full precision; an
    activation width of ``None`` leaves activations unquantized.
    """

    weights: int | None = 8
    acts: int | None = None
    overrides: dict[str, int | None] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in [("weights", self.weights), ("acts", self.acts), *self.overrides.items()]:
            if v is not None and int(v) < 1:
                raise QuantizationError(f"bit-width for {k!r} must be >= 1")

    def weight_bits(self, name: str) -> int | None:
        if name in self.overrides:
            return self.overrides[name]
        layer = name.split(".")[0]
        if layer in self.overrides:
            return self.overrides[layer]
        return self.weights

    def act_bits(self, point: str | None) -> int | None:
        if point is not None and f"act.{point}" in self.overrides:
            return self.overrides[f"act.{point}"]
        return self.acts

    def to_dict(self) -> dict:
        return {"weights": self.weights, "acts": self.acts, "overrides": dict(self.overrides)}

    @classmethod
    def from_dict(cls, d: dict) -> "BitMap":
        return cls(d.get("weights", 8), d.get("acts"), dict(d.get("overrides", {})))


@dataclass
class PartitionPlan:
    """Disjoint, exhaustive index groups per weight tensor.

    Group g of every tensor is processed in stage g; ``bits[g]`` (if given)
    overrides the bit map for that group.
    """

    groups: dict[str, list[np.ndarray]]
    bits: list[int] | None = None
    mode: str = "random"

    def __post_init__(self):
        sizes = {len(g) for g in self.groups.values()}
        if len(sizes) > 1:
            raise QuantizationError("every tensor needs the same number of groups")
        if not self.groups or 0 in sizes:
            raise QuantizationError("empty partition plan")
        if self.bits is not None:
            if len(self.bits) != self.n_groups:
                raise QuantizationError("one bit-width per group expected")
            if min(self.bits) < 1:
                raise QuantizationError("bit-widths must be >= 1")

    @property
    def n_groups(self) -> int:
        return len(next(iter(self.groups.values())))

    @classmethod
    def build(cls, model: Equalizer, n_groups: int, mode: str = "random", seed: int = 0,
              bits: list[int] | None = None) -> "PartitionPlan":
        """Equal-size groups: random (seeded), by descending magnitude or by ascending magnitude."""
        if n_groups < 1:
            raise QuantizationError("need at least one group")
        rng = np.random.default_rng(seed)
        groups = {}
        for name in model.weight_names():
            w = model.params[name].value.ravel()
            if mode == "random":
                order = rng.permutation(w.size)
            elif mode == "magnitude":
                order = np.argsort(-np.abs(w), kind="stable")
            elif mode == "magnitude-asc":
                # smallest weights first, so the last (often widest) group holds the largest
                order = np.argsort(np.abs(w), kind="stable")
            else:
                raise QuantizationError(f"unknown grouping mode {mode!r}")
            groups[name] = [np.sort(g) for g in np.array_split(order, n_groups)]
        return cls(groups, list(bits) if bits is not None else None, mode)

    def check(self, model: Equalizer) -> None:
        for name, gs in self.groups.items():
            size = model.params[name].value.size
            allidx = np.concatenate(gs)
            if allidx.size != size or np.unique(allidx).size != size:
                raise QuantizationError(f"groups of {name!r} are not a partition")

    def group_bits(self, g: int, name: str, bitmap: BitMap) -> int | None:
        return self.bits[g] if self.bits is not None else bitmap.weight_bits(name)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n_groups": self.n_groups, "bits": self.bits}


@dataclass(frozen=True)
class AlphaSchedule:
    k1: int = 0
    k2: int = 10
    exponent: int = 3

    def __post_init__(self):
        if not self.k1 < self.k2:
            raise QuantizationError("alpha schedule needs k1 < k2")

    def alpha(self, j: int) -> float:
        return alpha_schedule(j, self.k1, self.k2, self.exponent)

    def steps(self) -> range:
        return range(self.k1, self.k2 + 1)


def alpha_schedule(j: int, k1: int, k2: int, exponent: int = 3) -> float:
    """0 up to k1, ((j - k1)/(k2 - k1))**3 in between, 1 from k2 on."""
    if not k1 < k2:
        raise QuantizationError("alpha schedule needs k1 < k2")
    if j <= k1:
        return 0.0
    if j >= k2:
        return 1.0
    return ((j - k1) / (k2 - k1)) ** exponent


# --------------------------------------------------------------------------
# Elementwise weight maps with hand-written derivatives
# --------------------------------------------------------------------------

def ab_blend(w, alpha: float, grid: QuantGrid):
    """(1 - alpha) w + alpha Q(w); exact at both end points."""
    if not 0.0 <= alpha <= 1.0:
        raise QuantizationError("alpha must lie in [0, 1]")
    w = np.asarray(w, dtype=np.float64)
    if alpha == 0.0:
        return w.copy()
    if alpha == 1.0:
        return grid(w)
    return (1.0 - alpha) * w + alpha * grid(w)


def companded_blend(w, alpha: float, grid: QuantGrid):
    """Blend in the compressed domain, then expand back."""
    if not 0.0 <= alpha <= 1.0:
        raise QuantizationError("alpha must lie in [0, 1]")
    w = np.asarray(w, dtype=np.float64)
    if alpha == 0.0:
        return w.copy()
    if alpha == 1.0:
        return grid(w)
    lo, hi, mu = grid.clip_lo, grid.clip_hi, grid.mu
    c = mu_compress(normalize(w, lo, hi), mu)
    cb = (1.0 - alpha) * c + alpha * grid.inner(c)
    return denormalize(mu_expand(cb, mu), lo, hi)


def _companded_blend_slope(w, alpha: float, grid: QuantGrid):
    lo, hi, mu = grid.clip_lo, grid.clip_hi, grid.mu
    inside = (w >= lo) & (w <= hi)
    u = normalize(w, lo, hi)
    c = mu_compress(u, mu)
    cb = (1.0 - alpha) * c + alpha * grid.inner(c)
    # expander slope at cb times compressor slope at u
    return inside * (1.0 - alpha) * (1.0 + mu) ** np.abs(cb) / (1.0 + mu * np.abs(u))


def blend_values(w, alpha: float, grid: QuantGrid):
    return companded_blend(w, alpha, grid) if grid.kind == "companded" else ab_blend(w, alpha, grid)


def ste_mask(w, grid: QuantGrid) -> np.ndarray:
    """Clipped-identity derivative: 1 on [alpha, beta], 0 outside."""
    return ((w >= grid.clip_lo) & (w <= grid.clip_hi)).astype(np.float64)


@dataclass
class _GroupOp:
    idx: np.ndarray
    grid: QuantGrid
    mode: str  # "ste" or "blend"
    alpha: float = 1.0


def weight_node(ops: list[_GroupOp]) -> CustomGradientNode:
    """Custom-gradient node applying per-group quantization to one tensor."""

    def fwd(w):
        y = w.ravel().copy()
        flat = w.ravel()
        for op in ops:
            v = flat[op.idx]
            y[op.idx] = op.grid(v) if op.mode == "ste" else blend_values(v, op.alpha, op.grid)
        return y.reshape(w.shape)

    def bwd(w, g):
        gx = g.ravel().copy()
        flat = w.ravel()
        for op in ops:
            v = flat[op.idx]
            if op.mode == "ste":
                gx[op.idx] *= ste_mask(v, op.grid)
            elif op.grid.kind == "companded":
                gx[op.idx] *= _companded_blend_slope(v, op.alpha, op.grid)
            else:
                gx[op.idx] *= 1.0 - op.alpha
        return gx.reshape(w.shape)

    return CustomGradientNode(fwd, bwd)


def ste_quantize(x: Tensor, grid: QuantGrid) -> Tensor:
    """Q(x) forward, clipped identity backward."""
    return CustomGradientNode(grid, lambda v, g: g * ste_mask(v, grid))(x)


def ab_blend_node(x: Tensor, alpha: float, grid: QuantGrid) -> Tensor:
    """Blend forward, (1 - alpha) backward."""
    return weight_node([_GroupOp(np.arange(x.size), grid, "blend", alpha)])(x)


def _transform(ops: dict[str, list[_GroupOp]]):
    nodes = {n: weight_node(o) for n, o in ops.items() if o}

    def apply(leaves: dict[str, Tensor]) -> dict[str, Tensor]:
        return {n: nodes[n](t) if n in nodes else t for n, t in leaves.items()}

    return apply


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def _batches(n: int, bs: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, bs):
        yield perm[s:s + bs]


def run_epochs(model: Equalizer, data, cfg: TrainConfig, n_epochs: int, opt: Adam, rng: np.random.Generator,
               wfn=None, history: list | None = None, tag: dict | None = None) -> float:
    """Mini-batch Adam over shuffled rows; returns the mean loss of the last epoch."""
    X, Y = data
    last = float("nan")
    for ep in range(n_epochs):
        tot = 0.0
        for idx in _batches(len(X), cfg.batch_size, rng):
            leaves = model.params.leaves()
            w = wfn(leaves) if wfn else leaves
            # overflow surfaces as a non-finite gradient below, so numpy's warnings add nothing
            with np.errstate(over="ignore", invalid="ignore"):
                loss = mse_loss(model.forward(X[idx], w), Y[idx])
                try:
                    grad(loss, leaves, model.params)
                except NumericError as e:
                    raise TrainingDiverged(str(e)) from e
            opt.step()
            tot += loss.item() * len(idx)
        last = tot / len(X)
        if not np.isfinite(last):
            raise TrainingDiverged("non-finite epoch loss")
        if history is not None:
            history.append({**(tag or {}), "epoch": ep, "loss": last})
        log.debug("epoch %d loss %.6g %s", ep, last, tag or "")
    return last


def train(model: Equalizer, data, cfg: TrainConfig, history: list | None = None) -> Equalizer:
    """Full-precision training of a copy of ``model``."""
    m = model.clone()
    rng = np.random.default_rng(cfg.seed)
    run_epochs(m, data, cfg, cfg.epochs, Adam(m.params, cfg.lr), rng, history=history)
    return m


# --------------------------------------------------------------------------
# Grid helpers
# --------------------------------------------------------------------------

def _quantized(bits: int | None) -> bool:
    return bits is not None and bits < PASS_THROUGH_BITS


def _layout(model: Equalizer, bitmap: BitMap, plan: PartitionPlan | None) -> dict[str, list[tuple[np.ndarray, int]]]:
    """Per tensor: (flat indices, bits) per group; full-precision groups are dropped."""
    out = {}
    for name in model.weight_names():
        size = model.params[name].value.size
        if plan is None:
            groups = [(np.arange(size), bitmap.weight_bits(name))]
        else:
            groups = [(idx, plan.group_bits(g, name, bitmap)) for g, idx in enumerate(plan.groups[name])]
        out[name] = groups
    return out


def _grid(spec: QuantizerSpec, values: np.ndarray, bits: int) -> QuantGrid:
    return spec.build(values, bits)


def _calib(data, cfg: TrainConfig | None, calib):
    if calib is not None:
        return calib
    n = cfg.calib_size if cfg is not None else 10_000
    return data[0][:n]


def calibrate_acts(model: Equalizer, calib: np.ndarray, bitmap: BitMap, act_spec: QuantizerSpec = DEFAULT_ACT_SPEC,
                   wfn=None) -> dict[str, QuantGrid]:
    """Static activation grids from one float pass over ``calib``."""
    points = [p for p in model.act_points if _quantized(bitmap.act_bits(p))]
    if not points:
        return {}
    seen: dict[str, list[np.ndarray]] = {p: [] for p in points}

    def record(point, t):
        if point in seen:
            seen[point].append(t.data.ravel())
        return t

    leaves = {n: Tensor(p.value) for n, p in model.params.items()}
    w = wfn(leaves) if wfn else leaves
    for s in range(0, len(calib), 4096):
        model.forward(calib[s:s + 4096], w, act=record)
    return {p: act_spec.build(np.concatenate(v), bitmap.act_bits(p)) for p, v in seen.items()}


def _set_acts(model, calib, bitmap, act_spec, wfn=None) -> None:
    model.quant.acts = {}
    model.quant.acts = calibrate_acts(model, calib, bitmap, act_spec, wfn)


def _finish(model: Equalizer) -> Equalizer:
    model.params.unfreeze_all()
    # a pure pass-through result stays bit-identical to its input
    if model.quant.weights or model.quant.acts:
        model.round_to_storage()
    return model


# --------------------------------------------------------------------------
# Strategies
# --------------------------------------------------------------------------

def ptq(model: Equalizer, spec: QuantizerSpec, bitmap: BitMap, calib=None, act_spec: QuantizerSpec = DEFAULT_ACT_SPEC,
        plan: PartitionPlan | None = None) -> Equalizer:
    """Round every mapped weight to a grid calibrated on the trained weights."""
    m = model.clone()
    m.quant = QuantState()
    for name, groups in _layout(m, bitmap, plan).items():
        p = m.params[name]
        flat = p.value.ravel().copy()
        entries = []
        for idx, bits in groups:
            if not _quantized(bits) or idx.size == 0:
                continue
            grid = _grid(spec, p.value, bits)
            flat[idx] = grid(flat[idx])
            entries.append((idx, grid))
        p.value = flat.reshape(p.value.shape)
        if entries:
            m.quant.weights[name] = entries
    if any(_quantized(bitmap.act_bits(pt)) for pt in m.act_points):
        if calib is None or len(calib) == 0:
            raise QuantizationError("activation quantization needs a calibration batch")
        _set_acts(m, calib, bitmap, act_spec)
    return _finish(m)


def _ste_ops(m: Equalizer, spec: QuantizerSpec, bitmap: BitMap) -> dict[str, list[_GroupOp]]:
    ops = {}
    for name, groups in _layout(m, bitmap, None).items():
        v = m.params[name].value
        ops[name] = [_GroupOp(idx, _grid(spec, v, b), "ste") for idx, b in groups if _quantized(b)]
    return ops


def _commit(m: Equalizer, ops: dict[str, list[_GroupOp]]) -> None:
    """Write Q(master) into the store and record the grids."""
    for name, gops in ops.items():
        if not gops:
            continue
        p = m.params[name]
        flat = p.value.ravel().copy()
        for op in gops:
            flat[op.idx] = op.grid(flat[op.idx])
        p.value = flat.reshape(p.value.shape)
        m.quant.weights[name] = [(op.idx, op.grid) for op in gops]


def qat_ste_train(model: Equalizer, data, spec: QuantizerSpec, bitmap: BitMap, epochs: int,
                  cfg: TrainConfig = TrainConfig(), calib=None, act_spec: QuantizerSpec = DEFAULT_ACT_SPEC,
                  history: list | None = None) -> Equalizer:
    """Quantization-aware training with the straight-through estimator.

    Weight grids are recalibrated on the master weights and activation grids
    on the quantized network at the start of every epoch.
    """
    m = model.clone()
    m.quant = QuantState()
    calib = _calib(data, cfg, calib)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(m.params, cfg.lr)
    for ep in range(epochs):
        ops = _ste_ops(m, spec, bitmap)
        wfn = _transform(ops)
        _set_acts(m, calib, bitmap, act_spec, wfn)
        run_epochs(m, data, cfg, 1, opt, rng, wfn, history, {"strategy": "qat-ste", "step": ep})
    ops = _ste_ops(m, spec, bitmap)
    _commit(m, ops)
    _set_acts(m, calib, bitmap, act_spec)
    return _finish(m)


def ab_train(model: Equalizer, data, spec: QuantizerSpec, bitmap: BitMap, schedule: AlphaSchedule = AlphaSchedule(),
             cfg: TrainConfig = TrainConfig(), calib=None, act_spec: QuantizerSpec = DEFAULT_ACT_SPEC,
             history: list | None = None) -> Equalizer:
    """Alpha-blending: grids fixed from the initial weights, alpha annealed over the schedule."""
    m = model.clone()
    m.quant = QuantState()
    calib = _calib(data, cfg, calib)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(m.params, cfg.lr)
    ops = _ste_ops(m, spec, bitmap)
    for j in schedule.steps():
        a = schedule.alpha(j)
        for gops in ops.values():
            for op in gops:
                op.mode, op.alpha = "blend", a
        wfn = _transform(ops)
        _set_acts(m, calib, bitmap, act_spec, wfn)
        run_epochs(m, data, cfg, cfg.epochs_per_alpha, opt, rng, wfn, history, {"strategy": "ab", "alpha": a})
    _commit(m, ops)
    _set_acts(m, calib, bitmap, act_spec)
    return _finish(m)


def _freeze(p, idx: np.ndarray) -> None:
    mask = p.frozen_mask().copy().ravel()
    mask[idx] = True
    p.frozen = mask.reshape(p.value.shape)


def _stage_grids(m: Equalizer, layout, g: int, spec: QuantizerSpec) -> dict[str, tuple[np.ndarray, QuantGrid]]:
    """Grid for group g of every tensor, calibrated on the tensor's current values."""
    out = {}
    for name, groups in layout.items():
        idx, bits = groups[g]
        if _quantized(bits) and idx.size:
            out[name] = (idx, _grid(spec, m.params[name].value, bits))
    return out


def _record(m: Equalizer, name: str, idx: np.ndarray, grid: QuantGrid) -> None:
    m.quant.weights.setdefault(name, []).append((idx, grid))


def _set_group(m: Equalizer, name: str, idx: np.ndarray, values: np.ndarray) -> None:
    p = m.params[name]
    flat = p.value.ravel().copy()
    flat[idx] = values
    p.value = flat.reshape(p.value.shape)


def _check_plan(m: Equalizer, plan: PartitionPlan) -> None:
    if plan is None or plan.n_groups < 1:
        raise QuantizationError("a non-empty partition plan is required")
    missing = set(m.weight_names()) - set(plan.groups)
    if missing:
        raise QuantizationError(f"partition plan misses {sorted(missing)}")
    plan.check(m)


def sptq(model: Equalizer, data, plan: PartitionPlan, spec: QuantizerSpec, bitmap: BitMap = BitMap(),
         cfg: TrainConfig = TrainConfig(), calib=None, act_spec: QuantizerSpec = DEFAULT_ACT_SPEC,
         history: list | None = None) -> Equalizer:
    """Successive PTQ: fix group i on its grid, retrain the later groups, repeat."""
    m = model.clone()
    m.quant = QuantState()
    _check_plan(m, plan)
    calib = _calib(data, cfg, calib)
    rng = np.random.default_rng(cfg.seed)
    layout = _layout(m, bitmap, plan)
    for g in range(plan.n_groups):
        for name, (idx, grid) in _stage_grids(m, layout, g, spec).items():
            _set_group(m, name, idx, grid(m.params[name].value.ravel()[idx]))
            _freeze(m.params[name], idx)
            _record(m, name, idx, grid)
        if g < plan.n_groups - 1 and cfg.retrain_epochs > 0:
            _set_acts(m, calib, bitmap, act_spec)
            run_epochs(m, data, cfg, cfg.retrain_epochs, Adam(m.params, cfg.lr), rng, None, history,
                       {"strategy": "sptq", "stage": g})
    _set_acts(m, calib, bitmap, act_spec)
    return _finish(m)


def sab(model: Equalizer, data, plan: PartitionPlan, schedule: AlphaSchedule, spec: QuantizerSpec,
        bitmap: BitMap = BitMap(), cfg: TrainConfig = TrainConfig(), calib=None,
        act_spec: QuantizerSpec = DEFAULT_ACT_SPEC, history: list | None = None) -> Equalizer:
    """Successive alpha-blending.

    Stage i calibrates grids for group i, then for every alpha step sets the
    group to the blend of its stage-start values, freezes it and retrains the
    other free weights. The last group is instead trained through the blend
    and rounded at the end.
    """
    m = model.clone()
    m.quant = QuantState()
    _check_plan(m, plan)
    calib = _calib(data, cfg, calib)
    rng = np.random.default_rng(cfg.seed)
    layout = _layout(m, bitmap, plan)
    G = plan.n_groups
    for g in range(G):
        grids = _stage_grids(m, layout, g, spec)
        opt = Adam(m.params, cfg.lr)
        if g < G - 1:
            w0 = {n: m.params[n].value.ravel()[idx].copy() for n, (idx, _) in grids.items()}
            for j in schedule.steps():
                a = schedule.alpha(j)
                for name, (idx, grid) in grids.items():
                    _set_group(m, name, idx, blend_values(w0[name], a, grid))
                    _freeze(m.params[name], idx)
                _set_acts(m, calib, bitmap, act_spec)
                run_epochs(m, data, cfg, cfg.epochs_per_alpha, opt, rng, None, history,
                           {"strategy": "sab", "stage": g, "alpha": a})
            for name, (idx, grid) in grids.items():
                _record(m, name, idx, grid)
        else:
            ops = {n: [_GroupOp(idx, grid, "blend", 0.0)] for n, (idx, grid) in grids.items()}
            for j in schedule.steps():
                a = schedule.alpha(j)
                for gops in ops.values():
                    gops[0].alpha = a
                wfn = _transform(ops)
                _set_acts(m, calib, bitmap, act_spec, wfn)
                run_epochs(m, data, cfg, cfg.epochs_per_alpha, opt, rng, wfn, history,
                           {"strategy": "sab", "stage": g, "alpha": a})
            for name, (idx, grid) in grids.items():
                _set_group(m, name, idx, grid(m.params[name].value.ravel()[idx]))
                _freeze(m.params[name], idx)
                _record(m, name, idx, grid)
    _set_acts(m, calib, bitmap, act_spec)
    return _finish(m)


def companding_sab(model: Equalizer, data, plan: PartitionPlan, schedule: AlphaSchedule, mu: float,
                   spec: QuantizerSpec | None = None, bitmap: BitMap = BitMap(), cfg: TrainConfig = TrainConfig(),
                   calib=None, act_spec: QuantizerSpec = DEFAULT_ACT_SPEC, history: list | None = None) -> Equalizer:
    """SAB on mu-law companded grids; blending happens in the compressed domain."""
    base = spec or QuantizerSpec(calibration="minmax")
    cspec = replace(base, kind="companded", mu=float(mu))
    return sab(model, data, plan, schedule, cspec, bitmap, cfg, calib, act_spec, history)


STRATEGIES = ("ptq", "qat-ste", "ab", "sptq", "sab", "companding-sab")


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def evaluate(model: Equalizer, frame: SymbolFrame) -> dict:
    """Loss, BER and Q-factor of ``model`` on ``frame``."""
    X, Y = model.prepare_frame(frame)
    out = model.predict(X)
    loss = float(np.mean((out - Y) ** 2))
    ex, ey = outputs_to_symbols(out)
    tx, ty = outputs_to_symbols(Y)
    errors, bits = count_bit_errors(tx, ty, ex, ey)
    b = ber_from_counts(errors, bits)
    return {"loss": loss, "ber": b, "q_db": qfactor(b), "bit_errors": errors, "bits": bits}


def evaluate_linear(frame: SymbolFrame, M: int = 0) -> dict:
    """Q-factor of the linear-DSP symbols, on the same symbol span an M-window model scores."""
    from .models import target_offset
    c = target_offset(M)
    n = len(frame) - M
    sl = slice(c, c + n)
    errors, bits = count_bit_errors(frame.tx_x[sl], frame.tx_y[sl], frame.rx_x[sl], frame.rx_y[sl])
    b = ber_from_counts(errors, bits)
    return {"ber": b, "q_db": qfactor(b), "bit_errors": errors, "bits": bits}


def average_weight_bits(model: Equalizer) -> float:
    """Storage-weighted mean bit-width over the quantizable tensors (32 for float ones)."""
    tot = cnt = 0
    for name in model.weight_names():
        size = model.params[name].value.size
        bits = np.full(size, PASS_THROUGH_BITS)
        for idx, grid in model.quant.weights.get(name, []):
            bits[idx] = grid.bits
        tot += int(bits.sum())
        cnt += size
    return tot / cnt


__all__ = [
    "AlphaSchedule", "BitMap", "DEFAULT_ACT_SPEC", "PartitionPlan", "STRATEGIES", "TrainConfig",
    "TrainingDiverged", "ab_blend", "ab_blend_node", "ab_train", "alpha_schedule", "average_weight_bits",
    "blend_values", "calibrate_acts", "companded_blend", "companding_sab", "evaluate", "evaluate_linear",
    "ptq", "qat_ste_train", "run_epochs", "sab", "sptq", "ste_mask", "ste_quantize", "train", "weight_node",
]
