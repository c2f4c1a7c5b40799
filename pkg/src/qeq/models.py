"""Conv-FC and BiLSTM-FC equalizers, input windowing and checkpoints.

Both models map windows of linearly equalized dual-polarization symbols to
one corrected symbol per polarization, returned as four reals
(Re x, Im x, Re y, Im y). Weights live in a :class:`ParameterStore`;
``forward`` accepts substitute weight tensors so quantization strategies can
splice custom-gradient nodes between the master weights and the layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .quantizers import QuantGrid
from .tensor import (CustomGradientNode, ParameterStore, ShapeError, Tensor, as_tensor, concat,
                     conv1d_same, dense_forward, glorot_uniform, sigmoid, stack, tanh)

CHECKPOINT_VERSION = 1

ActHook = Callable[[str, Tensor], Tensor]


class InsufficientDataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# Windowing
# --------------------------------------------------------------------------

@dataclass
class WindowedBatch:
    inputs: np.ndarray   # (rows, 4(M+1)): [Re x | Im x | Re y | Im y] windows
    targets: np.ndarray  # (rows, 4)


def target_offset(M: int) -> int:
    """Position of the target symbol inside a window of M+1 symbols."""
    return math.ceil(M / 2)


def window_symbols(sx, sy, tx_x=None, tx_y=None, M: int = 8) -> WindowedBatch:
    """Slide a window of M+1 symbols over both polarizations.

    Row t holds symbols [t, t+M] of each real channel; its target is the
    transmitted symbol at t + ceil(M/2). Without ``tx_*`` the targets are
    taken from ``sx``/``sy`` themselves.
    """
    sx, sy = np.asarray(sx), np.asarray(sy)
    L = sx.shape[0]
    if sy.shape[0] != L:
        raise ShapeError("polarizations differ in length")
    if L <= M:
        raise InsufficientDataError(f"need more than M={M} symbols, got {L}")
    n = M + 1
    chans = [sx.real, sx.imag, sy.real, sy.imag]
    wins = [np.lib.stride_tricks.sliding_window_view(c.astype(np.float64), n) for c in chans]
    inputs = np.concatenate(wins, axis=1)
    tx_x = sx if tx_x is None else np.asarray(tx_x)
    tx_y = sy if tx_y is None else np.asarray(tx_y)
    c = target_offset(M)
    sel = slice(c, c + L - M)
    targets = np.stack([tx_x.real[sel], tx_x.imag[sel], tx_y.real[sel], tx_y.imag[sel]], axis=1)
    return WindowedBatch(np.ascontiguousarray(inputs), targets.astype(np.float64))


def outputs_to_symbols(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.asarray(out).reshape(-1, 4)
    return out[:, 0] + 1j * out[:, 1], out[:, 2] + 1j * out[:, 3]


def estimate_memory(s, threshold: float = 0.05, max_lag: int | None = None) -> int:
    """Largest lag whose normalized autocorrelation magnitude exceeds ``threshold``.

    ``s`` is one complex sequence or a pair (x, y); the result is the maximum
    over the polarizations.
    """
    seqs = list(s) if isinstance(s, (tuple, list)) else [s]
    best = 0
    for q in seqs:
        q = np.asarray(q, dtype=np.complex128)
        n = q.size
        if n < 1000:
            raise InsufficientDataError("memory estimate needs at least 1000 symbols")
        q = q - q.mean()
        nfft = 1 << (2 * n - 1).bit_length()
        f = np.fft.fft(q, nfft)
        r = np.fft.ifft(f * np.conj(f))[:n]
        mag = np.abs(r) / np.abs(r[0])
        lim = max_lag if max_lag is not None else n // 4
        lags = np.nonzero(mag[1:lim + 1] > threshold)[0]
        if lags.size:
            best = max(best, int(lags[-1]) + 1)
    return best


# --------------------------------------------------------------------------
# Quantization state carried by a model
# --------------------------------------------------------------------------

@dataclass
class QuantState:
    """Grids attached to a model by a quantization strategy.

    ``weights`` maps a parameter name to (flat index array, grid) pairs, one
    per partition group; ``acts`` maps an activation point to its grid.
    """

    weights: dict[str, list[tuple[np.ndarray, QuantGrid]]] = field(default_factory=dict)
    acts: dict[str, QuantGrid] = field(default_factory=dict)

    def on_grid(self, store: ParameterStore) -> bool:
        for name, groups in self.weights.items():
            flat = store[name].value.ravel()
            for idx, grid in groups:
                if not grid.__contains__(flat[idx]):
                    return False
        return True

    def snap(self, store: ParameterStore) -> None:
        """Move every mapped weight onto its grid (used after f32 storage)."""
        for name, groups in self.weights.items():
            p = store[name]
            flat = p.value.ravel().copy()
            for idx, grid in groups:
                flat[idx] = grid(flat[idx])
            p.value = flat.reshape(p.value.shape)


def ste_act_node(grid: QuantGrid) -> CustomGradientNode:
    """Quantize in the forward pass, clipped identity in the backward pass."""
    lo, hi = grid.clip_lo, grid.clip_hi
    return CustomGradientNode(grid, lambda x, g: g * ((x >= lo) & (x <= hi)))


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------

class Equalizer:
    """Shared plumbing; subclasses define the layers."""

    kind: str = ""
    act_points: tuple[str, ...] = ()

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params = ParameterStore()
        self.quant = QuantState()

    # subclasses -----------------------------------------------------------
    def hyper(self) -> dict:
        raise NotImplementedError

    def weight_names(self) -> list[str]:
        """Quantizable tensors; biases of the dense layers are excluded."""
        raise NotImplementedError

    def forward(self, x, weights: dict[str, Tensor] | None = None, act: ActHook | None = None) -> Tensor:
        raise NotImplementedError

    def prepare(self, rx_x, rx_y, tx_x, tx_y) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def mult_count(self) -> int:
        raise NotImplementedError

    # shared ---------------------------------------------------------------
    @property
    def M(self) -> int:
        return self.hyper()["M"]

    def _weights(self, weights):
        if weights is None:
            return {n: Tensor(p.value) for n, p in self.params.items()}
        return weights

    def _act(self, act: ActHook | None) -> ActHook:
        if act is not None:
            return act
        grids = self.quant.acts

        def hook(point, t):
            g = grids.get(point)
            return ste_act_node(g)(t) if g is not None else t

        return hook

    def prepare_frame(self, frame) -> tuple[np.ndarray, np.ndarray]:
        return self.prepare(frame.rx_x, frame.rx_y, frame.tx_x, frame.tx_y)

    def predict(self, inputs: np.ndarray, batch: int = 8192) -> np.ndarray:
        """Forward pass without graph bookkeeping beyond one batch."""
        w = self._weights(None)
        outs = [self.forward(inputs[i:i + batch], w).data for i in range(0, len(inputs), batch)]
        return np.concatenate(outs, axis=0)

    def n_params(self, names=None) -> int:
        names = self.params.names() if names is None else names
        return int(sum(self.params[n].value.size for n in names))

    def to_spec(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, **self.hyper()}

    def clone(self) -> "Equalizer":
        other = model_from_spec(self.to_spec())
        other.params.load(self.params.snapshot())
        other.quant = QuantState({n: [(i.copy(), g) for i, g in gs] for n, gs in self.quant.weights.items()},
                                 dict(self.quant.acts))
        return other

    def round_to_storage(self) -> None:
        """Round parameters to float32 storage precision, keeping grid members on grid."""
        for p in self.params.params.values():
            p.value = p.value.astype(np.float32).astype(np.float64)
        self.quant.snap(self.params)


@dataclass(frozen=True)
class ConvFCSpec:
    M: int = 8
    K: int = 8
    n_h: int = 32
    n_o: int = 4

    def __post_init__(self):
        if self.K < 1 or self.n_h < 1 or self.M < 0:
            raise ValueError("ConvFC needs K >= 1, n_h >= 1, M >= 0")
        if self.K > self.M + 1:
            raise ShapeError(f"kernel K={self.K} longer than the window M+1={self.M + 1}")

    @property
    def n_i(self) -> int:
        return self.M + 1


class ConvFC(Equalizer):
    """Complex 1-D convolution, one tanh dense layer and a linear output layer.

    The complex kernel h is stored as ``conv.re`` and ``conv.im``; each
    polarization is filtered with four real convolutions:
    Re(s*h) = Re s * Re h - Im s * Im h and Im(s*h) = Re s * Im h + Im s * Re h.
    """

    kind = "convfc"
    act_points = ("input", "conv", "hidden")

    def __init__(self, spec: ConvFCSpec = ConvFCSpec(), seed: int = 0):
        super().__init__(seed)
        self.spec = spec
        rng = np.random.default_rng(seed)
        n_i, K, n_h, n_o = spec.n_i, spec.K, spec.n_h, spec.n_o
        self.params.add("conv.re", glorot_uniform(rng, 1, K, (K,)))
        self.params.add("conv.im", glorot_uniform(rng, 1, K, (K,)))
        self.params.add("dense.weight", glorot_uniform(rng, n_h, 4 * n_i))
        self.params.add("dense.bias", np.zeros(n_h))
        self.params.add("out.weight", glorot_uniform(rng, n_o, n_h))
        self.params.add("out.bias", np.zeros(n_o))

    def hyper(self) -> dict:
        return asdict(self.spec)

    def weight_names(self) -> list[str]:
        return ["conv.re", "conv.im", "dense.weight", "out.weight"]

    def conv_stage(self, x, hr, hi) -> Tensor:
        """Eq.-style complex filtering of the four real channels of ``x``."""
        x = as_tensor(x)
        n = self.spec.n_i
        chans = x.reshape(x.shape[0], 4, n)
        a = conv1d_same(chans, hr)  # each channel * Re h
        b = conv1d_same(chans, hi)  # each channel * Im h
        re_x = a[:, 0] - b[:, 1]
        im_x = b[:, 0] + a[:, 1]
        re_y = a[:, 2] - b[:, 3]
        im_y = b[:, 2] + a[:, 3]
        return concat([re_x, im_x, re_y, im_y], axis=-1)

    def forward(self, x, weights=None, act=None) -> Tensor:
        w = self._weights(weights)
        hook = self._act(act)
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != 4 * self.spec.n_i:
            raise ShapeError(f"ConvFC expects (batch, {4 * self.spec.n_i}), got {x.shape}")
        x = hook("input", x)
        c = hook("conv", self.conv_stage(x, w["conv.re"], w["conv.im"]))
        h = hook("hidden", dense_forward(c, w["dense.weight"], w["dense.bias"], "tanh"))
        return dense_forward(h, w["out.weight"], w["out.bias"])

    def prepare(self, rx_x, rx_y, tx_x, tx_y):
        wb = window_symbols(rx_x, rx_y, tx_x, tx_y, self.spec.M)
        return wb.inputs, wb.targets

    def mult_count(self) -> int:
        from .metrics import mult_count_convfc
        s = self.spec
        return mult_count_convfc(s.n_i, s.K, s.n_h, s.n_o)


@dataclass(frozen=True)
class BiLSTMFCSpec:
    M: int = 8
    n_h: int = 16
    n_o: int = 4
    # consecutive windows processed as one bidirectional sequence
    seq_len: int = 16

    def __post_init__(self):
        if self.n_h < 1 or self.M < 0 or self.seq_len < 1:
            raise ValueError("BiLSTM needs n_h >= 1, M >= 0, seq_len >= 1")

    @property
    def n_i(self) -> int:
        return self.M + 1

    @property
    def n_x(self) -> int:
        return 4 * self.n_i


GATES = ("f", "i", "o", "g")


def _gate_matrix(params, n_x: int | None = None) -> Tensor:
    W = {k: as_tensor(params[k]) for k in GATES}
    n_h = W["f"].shape[0]
    for k in GATES:
        if W[k].ndim != 2 or W[k].shape[0] != n_h or (n_x is not None and W[k].shape[1] != n_x + n_h + 1):
            raise ShapeError(f"gate {k}: bad augmented matrix shape {W[k].shape}")
    return concat([W[k] for k in GATES], axis=0)  # (4 n_h, n_x + n_h + 1)


def _cell(z: Tensor, c_prev: Tensor, n_h: int) -> tuple[Tensor, Tensor]:
    f = sigmoid(z[..., :n_h])
    i = sigmoid(z[..., n_h:2 * n_h])
    o = sigmoid(z[..., 2 * n_h:3 * n_h])
    g = tanh(z[..., 3 * n_h:])
    c = f * c_prev + i * g
    return o * tanh(c), c


def lstm_cell_step(x_t, h_prev, c_prev, params) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    ``params`` maps gate names ``f``, ``i``, ``o`` (sigmoid) and ``g`` (tanh
    candidate) to augmented matrices of shape (n_h, n_x + n_h + 1) whose last
    column is the bias. Leading axes of ``x_t`` are batch axes.
    """
    x_t, h_prev, c_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev)
    n_x = x_t.shape[-1]
    big = _gate_matrix(params, n_x)
    n_h = big.shape[0] // 4
    if h_prev.shape[-1] != n_h or c_prev.shape[-1] != n_h:
        raise ShapeError("state width does not match the gate matrices")
    z = x_t @ big[:, :n_x].T + h_prev @ big[:, n_x:n_x + n_h].T + big[:, n_x + n_h]
    return _cell(z, c_prev, n_h)


class BiLSTMFC(Equalizer):
    """Bidirectional LSTM over a sequence of windows plus a linear output layer.

    Step t of a sequence consumes the full window of symbol t (4(M+1) reals)
    and emits that symbol's estimate from the concatenated forward and
    backward hidden states.
    """

    kind = "bilstm"
    act_points = ("input", "lstm")

    def __init__(self, spec: BiLSTMFCSpec = BiLSTMFCSpec(), seed: int = 0):
        super().__init__(seed)
        self.spec = spec
        rng = np.random.default_rng(seed)
        n_h, n_x = spec.n_h, spec.n_x
        for d in ("fwd", "bwd"):
            for k in GATES:
                W = np.zeros((n_h, n_x + n_h + 1))
                W[:, :n_x + n_h] = glorot_uniform(rng, n_h, n_x + n_h)
                if k == "f":
                    W[:, -1] = 1.0  # forget-gate bias
                self.params.add(f"{d}.W{k}", W)
        self.params.add("out.weight", glorot_uniform(rng, spec.n_o, 2 * n_h))
        self.params.add("out.bias", np.zeros(spec.n_o))

    def hyper(self) -> dict:
        return asdict(self.spec)

    def weight_names(self) -> list[str]:
        return [f"{d}.W{k}" for d in ("fwd", "bwd") for k in GATES] + ["out.weight"]

    def _scan(self, x: Tensor, gates: dict, reverse: bool) -> list[Tensor]:
        # same arithmetic as lstm_cell_step, with the input projection hoisted
        B, T, n_x = x.shape
        n_h = self.spec.n_h
        big = _gate_matrix(gates, n_x)
        zx = x @ big[:, :n_x].T + big[:, n_x + n_h]
        wh = big[:, n_x:n_x + n_h].T
        h = Tensor(np.zeros((B, n_h)))
        c = Tensor(np.zeros((B, n_h)))
        out = [None] * T
        order = range(T - 1, -1, -1) if reverse else range(T)
        for t in order:
            h, c = _cell(zx[:, t] + h @ wh, c, n_h)
            out[t] = h
        return out

    def forward(self, x, weights=None, act=None) -> Tensor:
        w = self._weights(weights)
        hook = self._act(act)
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.spec.n_x:
            raise ShapeError(f"BiLSTM expects (batch, T, {self.spec.n_x}), got {x.shape}")
        x = hook("input", x)
        hf = self._scan(x, {k: w[f"fwd.W{k}"] for k in GATES}, reverse=False)
        hb = self._scan(x, {k: w[f"bwd.W{k}"] for k in GATES}, reverse=True)
        hs = stack([concat([a, b], axis=-1) for a, b in zip(hf, hb)], axis=1)  # (B, T, 2 n_h)
        hs = hook("lstm", hs)
        return dense_forward(hs, w["out.weight"], w["out.bias"])

    def prepare(self, rx_x, rx_y, tx_x, tx_y):
        wb = window_symbols(rx_x, rx_y, tx_x, tx_y, self.spec.M)
        T = self.spec.seq_len
        n = (len(wb.inputs) // T) * T
        if n == 0:
            raise InsufficientDataError(f"need at least seq_len={T} windows")
        return (wb.inputs[:n].reshape(-1, T, self.spec.n_x), wb.targets[:n].reshape(-1, T, 4))

    def mult_count(self) -> int:
        from .metrics import mult_count_bilstm
        s = self.spec
        return mult_count_bilstm(s.n_h, s.n_i, s.n_o)


MODELS = {"convfc": (ConvFC, ConvFCSpec), "bilstm": (BiLSTMFC, BiLSTMFCSpec)}


def model_from_spec(d: dict) -> Equalizer:
    d = dict(d)
    kind = d.pop("kind", "convfc")
    seed = int(d.pop("seed", 0))
    try:
        cls, spec_cls = MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    return cls(spec_cls(**d), seed=seed)


# --------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float32 sidecar
# --------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_checkpoint(model: Equalizer, path, extra: dict | None = None) -> Path:
    """Write ``path`` (JSON manifest) and ``path.bin`` (float32 data in manifest order).

    Group index arrays of quantized tensors are stored as extra records with
    data-type tag ``index``.
    """
    path = Path(path)
    records, blobs = [], []
    for name, p in model.params.items():
        records.append({"name": name, "shape": list(p.value.shape), "dtype": "f32"})
        blobs.append(p.value.ravel())
    quant_w = {}
    for name, groups in model.quant.weights.items():
        entries = []
        for g, (idx, grid) in enumerate(groups):
            rec = f"{name}#group{g}"
            records.append({"name": rec, "shape": [int(idx.size)], "dtype": "index"})
            blobs.append(idx.astype(np.float64))
            entries.append({"index_record": rec, "grid": grid.to_dict()})
        quant_w[name] = entries
    manifest = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model": model.to_spec(),
        "seed": model.seed,
        "params": records,
        "quant": {"weights": quant_w, "acts": {k: g.to_dict() for k, g in model.quant.acts.items()}},
    }
    if extra:
        manifest["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    body = np.concatenate(blobs).astype("<f4") if blobs else np.zeros(0, "<f4")
    _sidecar(path).write_bytes(body.tobytes())
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Equalizer:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        body = np.frombuffer(_sidecar(path).read_bytes(), dtype="<f4")
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version")
    model = model_from_spec(manifest["model"])
    off = 0
    arrays = {}
    for rec in manifest["params"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        if off + n > body.size:
            raise CheckpointError("sidecar shorter than the manifest")
        arrays[rec["name"]] = body[off:off + n].astype(np.float64).reshape(rec["shape"])
        off += n
    if off != body.size:
        raise CheckpointError("sidecar longer than the manifest")
    model.params.load({k: v for k, v in arrays.items() if k in model.params})
    q = manifest.get("quant", {})
    for name, entries in q.get("weights", {}).items():
        model.quant.weights[name] = [
            (arrays[e["index_record"]].astype(np.int64), QuantGrid.from_dict(e["grid"])) for e in entries]
    model.quant.acts = {k: QuantGrid.from_dict(g) for k, g in q.get("acts", {}).items()}
    model.quant.snap(model.params)
    return model


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


__all__ = [
    "ActHook", "BiLSTMFC", "BiLSTMFCSpec", "CheckpointError", "ConvFC", "ConvFCSpec", "Equalizer",
    "InsufficientDataError", "MODELS", "QuantState", "WindowedBatch", "estimate_memory",
    "lstm_cell_step", "load_checkpoint", "model_from_spec", "outputs_to_symbols", "read_manifest",
    "save_checkpoint", "ste_act_node", "target_offset", "window_symbols",
]
