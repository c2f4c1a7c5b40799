"""Synthetic dual-polarization fiber link.

Transmitter (Gray 16-QAM, root-raised-cosine shaping), split-step Fourier
propagation of the Manakov equation with lumped EDFA amplification, and a
receiver front end made of frequency-domain CD compensation, matched filtering
and a one-tap complex normalization. The output stands in for the linearly
equalized symbols fed to the neural equalizers.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

SPEED_OF_LIGHT = 299_792_458.0  # m/s
PLANCK = 6.62607015e-34  # J s

# per-axis Gray map: bit pair -> level
_GRAY_LEVELS = {(0, 0): -3.0, (0, 1): -1.0, (1, 1): 1.0, (1, 0): 3.0}
_LEVELS = np.array([-3.0, -1.0, 1.0, 3.0])
_LEVEL_BITS = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=np.uint8)
QAM16_NORM = np.sqrt(10.0)

DATASET_SCHEMA_VERSION = 1


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class LinkSpec:
    """Physical parameters of a straight-line multi-span link.

    Units: span length in km, loss in dB/km, dispersion in ps/(nm km),
    nonlinearity in 1/(W km), PMD in ps/sqrt(km), noise figure in dB,
    wavelength in nm, symbol rate in GBaud.
    """

    name: str = "custom"
    span_km: float = 110.0
    n_spans: int = 9
    alpha_db_km: float = 0.22
    dispersion: float = 18.0
    gamma: float = 1.4
    pmd: float = 0.08  # carried for reference only, not simulated
    nf_db: float = 5.0
    wavelength_nm: float = 1550.0
    baud_g: float = 34.4
    rolloff: float = 0.1
    sps: int = 4
    trx_snr_db: float | None = 20.0
    # fraction of the accumulated dispersion the receiver leaves uncompensated
    residual_cd: float = 0.002

    def __post_init__(self):
        for name in ("span_km", "baud_g", "wavelength_nm"):
            if getattr(self, name) <= 0:
                raise ChannelError(f"{name} must be positive")
        for name in ("alpha_db_km", "dispersion", "gamma", "nf_db", "pmd"):
            if getattr(self, name) < 0:
                raise ChannelError(f"{name} must be non-negative")
        if self.n_spans < 1:
            raise ChannelError("n_spans must be >= 1")
        if self.sps < 2:
            raise ChannelError("sps must be >= 2")
        if not 0 <= self.rolloff <= 1:
            raise ChannelError("rolloff must lie in [0, 1]")

    @property
    def fs(self) -> float:
        return self.baud_g * 1e9 * self.sps

    @property
    def beta2(self) -> float:
        """Group-velocity dispersion in s^2/m."""
        lam = self.wavelength_nm * 1e-9
        d = self.dispersion * 1e-6  # ps/(nm km) -> s/m^2
        return -d * lam**2 / (2 * np.pi * SPEED_OF_LIGHT)

    @property
    def alpha_np(self) -> float:
        """Power attenuation in 1/m."""
        return self.alpha_db_km * np.log(10) / 10 / 1e3

    @property
    def total_length_m(self) -> float:
        return self.span_km * 1e3 * self.n_spans

    def replace(self, **kw) -> "LinkSpec":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinkSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ChannelError(f"unknown link fields: {sorted(unknown)}")
        return cls(**d)


TWC = LinkSpec("twc", span_km=50, n_spans=9, alpha_db_km=0.21, dispersion=5.5, gamma=2.8, pmd=0.02)
SMF = LinkSpec("smf", span_km=110, n_spans=9, alpha_db_km=0.22, dispersion=18.0, gamma=1.4, pmd=0.08)
LEAF = LinkSpec("leaf", span_km=70, n_spans=17, alpha_db_km=0.19, dispersion=4.0, gamma=2.1, pmd=0.04)
LINKS = {"twc": TWC, "smf": SMF, "leaf": LEAF}


def get_link(name: str) -> LinkSpec:
    try:
        return LINKS[name.lower()]
    except KeyError:
        raise ChannelError(f"unknown link preset {name!r}; choose from {sorted(LINKS)}") from None


# --------------------------------------------------------------------------
# 16-QAM
# --------------------------------------------------------------------------

def qam16_constellation() -> np.ndarray:
    """The 16 unit-energy points, indexed by the integer value of their 4 bits."""
    pts = np.empty(16, dtype=complex)
    for v in range(16):
        b = [(v >> (3 - k)) & 1 for k in range(4)]
        pts[v] = (_GRAY_LEVELS[b[0], b[1]] + 1j * _GRAY_LEVELS[b[2], b[3]]) / QAM16_NORM
    return pts


def qam16_modulate(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size % 4:
        raise ChannelError("bit count must be divisible by 4")
    b = bits.reshape(-1, 4).astype(np.int64)
    # Gray index along one axis: 00->0, 01->1, 11->2, 10->3
    i_idx = 2 * b[:, 0] + (b[:, 0] ^ b[:, 1])
    q_idx = 2 * b[:, 2] + (b[:, 2] ^ b[:, 3])
    return (_LEVELS[i_idx] + 1j * _LEVELS[q_idx]) / QAM16_NORM


def _slice_axis(v: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(v * QAM16_NORM / 2 + 2), 0, 3).astype(np.int64)


def qam16_demap(symbols) -> np.ndarray:
    """Hard-decision demapping to bits (4 per symbol)."""
    s = np.asarray(symbols, dtype=complex).ravel()
    bi = _LEVEL_BITS[_slice_axis(s.real)]
    bq = _LEVEL_BITS[_slice_axis(s.imag)]
    return np.concatenate([bi, bq], axis=1).ravel()


# --------------------------------------------------------------------------
# Pulse shaping
# --------------------------------------------------------------------------

def rrc_taps(rolloff: float, sps: int, span: int = 32) -> np.ndarray:
    """Root-raised-cosine taps over ``span`` symbols, normalized to unit energy."""
    n = np.arange(-span * sps // 2, span * sps // 2 + 1)
    t = n / sps
    beta = rolloff
    h = np.empty(t.size)
    for k, tk in enumerate(t):
        if tk == 0:
            h[k] = 1 - beta + 4 * beta / np.pi
        elif beta > 0 and np.isclose(abs(tk), 1 / (4 * beta)):
            h[k] = beta / np.sqrt(2) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
            )
        else:
            num = np.sin(np.pi * tk * (1 - beta)) + 4 * beta * tk * np.cos(np.pi * tk * (1 + beta))
            h[k] = num / (np.pi * tk * (1 - (4 * beta * tk) ** 2))
    return h / np.sqrt(np.sum(h**2))


def _circular_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # taps are centered; circular convolution keeps the frame length and alignment
    n = x.size
    if taps.size > n:
        raise ChannelError("frame shorter than the shaping filter")
    c = taps.size // 2
    kernel = np.zeros(n, dtype=complex)
    kernel[: taps.size - c] = taps[c:]
    kernel[n - c:] = taps[:c]
    return sfft.ifft(sfft.fft(x) * sfft.fft(kernel))


def rrc_response(n: int, rolloff: float, sps: int) -> np.ndarray:
    """Untruncated RRC frequency response on an n-point DFT grid.

    Scaled so that shaping plus matched filtering has unit gain at the symbol
    instants; the equivalent impulse response has unit energy.
    """
    f = np.abs(np.fft.fftfreq(n) * sps)  # cycles per symbol
    lo, hi = (1 - rolloff) / 2, (1 + rolloff) / 2
    rc = np.where(f <= lo, 1.0, 0.0)
    if rolloff > 0:
        band = (f > lo) & (f <= hi)
        rc[band] = 0.5 * (1 + np.cos(np.pi / rolloff * (f[band] - lo)))
    return np.sqrt(sps * rc)


def _shape_filter(x: np.ndarray, rolloff: float, sps: int, span: int | None) -> np.ndarray:
    if span is None:
        return sfft.ifft(sfft.fft(x) * rrc_response(x.size, rolloff, sps))
    return _circular_filter(x, rrc_taps(rolloff, sps, span))


def rrc_shape(symbols, rolloff: float, sps: int, span: int | None = None) -> np.ndarray:
    """Upsample by ``sps`` and RRC-filter (circularly).

    ``span=None`` applies the exact frequency response; an integer uses the
    FIR truncated to ``span`` symbols.
    """
    if sps < 2:
        raise ChannelError("sps must be >= 2")
    symbols = np.asarray(symbols, dtype=complex)
    up = np.zeros(symbols.size * sps, dtype=complex)
    up[::sps] = symbols
    return _shape_filter(up, rolloff, sps, span)


def matched_filter_downsample(waveform, rolloff: float, sps: int, span: int | None = None) -> np.ndarray:
    y = _shape_filter(np.asarray(waveform, dtype=complex), rolloff, sps, span)
    return y[::sps]


# --------------------------------------------------------------------------
# Propagation
# --------------------------------------------------------------------------

def ase_variance(link: LinkSpec) -> float:
    """Complex ASE variance per sample and polarization added by one EDFA (W)."""
    gain = 10 ** (link.alpha_db_km * link.span_km / 10)
    if gain <= 1:
        return 0.0
    nf = 10 ** (link.nf_db / 10)
    n_sp = (nf * gain - 1) / (2 * (gain - 1))
    nu = SPEED_OF_LIGHT / (link.wavelength_nm * 1e-9)
    return n_sp * PLANCK * nu * (gain - 1) * link.fs


def _omega(n: int, fs: float) -> np.ndarray:
    return 2 * np.pi * np.fft.fftfreq(n, d=1 / fs)


def kerr_step(ex: np.ndarray, ey: np.ndarray, k_nl: float) -> tuple[np.ndarray, np.ndarray]:
    """Manakov nonlinear phase rotation; ``k_nl`` already holds 8/9 gamma L_eff."""
    rot = np.exp(1j * k_nl * (ex.real**2 + ex.imag**2 + ey.real**2 + ey.imag**2))
    return ex * rot, ey * rot


def ssfm_propagate(
    wx,
    wy,
    link: LinkSpec,
    power_dbm: float | None,
    steps_per_span: int = 100,
    rng: np.random.Generator | None = None,
    ase: bool = True,
):
    """Symmetric split-step propagation of both polarizations over all spans.

    If ``power_dbm`` is given the input is rescaled so that the mean total
    power over both polarizations equals the launch power; otherwise the
    field is taken as already in sqrt(W). After every span an amplifier
    restores the span loss and (if ``ase``) adds circular Gaussian noise.
    """
    if steps_per_span < 1:
        raise ChannelError("steps_per_span must be >= 1")
    ex = np.array(wx, dtype=complex)
    ey = np.array(wy, dtype=complex)
    if ex.shape != ey.shape:
        raise ChannelError("polarization waveforms differ in length")
    if power_dbm is not None:
        p = 1e-3 * 10 ** (power_dbm / 10)
        cur = np.mean(np.abs(ex) ** 2 + np.abs(ey) ** 2)
        ex *= np.sqrt(p / cur)
        ey *= np.sqrt(p / cur)
    if ase and rng is None:
        raise ChannelError("rng required when ase is enabled")

    dz = link.span_km * 1e3 / steps_per_span
    a = link.alpha_np
    w = _omega(ex.size, link.fs)
    half = np.exp((-a / 2 + 0.5j * link.beta2 * w**2) * dz / 2)
    l_eff = dz if a == 0 else (1 - np.exp(-a * dz)) / a
    k_nl = 8 / 9 * link.gamma * 1e-3 * l_eff
    gain_amp = np.exp(a * link.span_km * 1e3 / 2)
    sigma2 = ase_variance(link)

    fx, fy = sfft.fft(ex), sfft.fft(ey)
    for _ in range(link.n_spans):
        for _ in range(steps_per_span):
            fx *= half
            fy *= half
            if k_nl:
                ex, ey = kerr_step(sfft.ifft(fx), sfft.ifft(fy), k_nl)
                fx, fy = sfft.fft(ex), sfft.fft(ey)
            fx *= half
            fy *= half
        fx *= gain_amp
        fy *= gain_amp
        if ase and sigma2 > 0:
            # white noise has the same variance in time and (scaled) frequency domain
            n = ex.size
            s = np.sqrt(sigma2 * n / 2)
            fx += s * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
            fy += s * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return sfft.ifft(fx), sfft.ifft(fy)


def cd_compensate(waveform, link: LinkSpec, length_m: float | None = None) -> np.ndarray:
    """Undo the accumulated dispersion of the whole link in the frequency domain."""
    x = np.asarray(waveform, dtype=complex)
    length = link.total_length_m if length_m is None else length_m
    w = _omega(x.size, link.fs)
    return sfft.ifft(sfft.fft(x) * np.exp(-0.5j * link.beta2 * w**2 * length))


def evm(rx, tx) -> float:
    """RMS error vector magnitude relative to the reference power."""
    rx, tx = np.asarray(rx), np.asarray(tx)
    return float(np.sqrt(np.mean(np.abs(rx - tx) ** 2) / np.mean(np.abs(tx) ** 2)))


# --------------------------------------------------------------------------
# Frames
# --------------------------------------------------------------------------

@dataclass
class SymbolFrame:
    tx_x: np.ndarray
    tx_y: np.ndarray
    rx_x: np.ndarray
    rx_y: np.ndarray
    power_dbm: float
    seed: int
    link: LinkSpec = field(default_factory=lambda: SMF)
    trim: int = 0

    def __post_init__(self):
        n = len(self.tx_x)
        if not (len(self.tx_y) == len(self.rx_x) == len(self.rx_y) == n):
            raise ChannelError("frame sequences must have equal length")

    def __len__(self):
        return len(self.tx_x)

    @property
    def tx_bits(self) -> np.ndarray:
        return np.concatenate([qam16_demap(self.tx_x), qam16_demap(self.tx_y)])

    def slice(self, start: int, stop: int) -> "SymbolFrame":
        return dataclasses.replace(
            self,
            tx_x=self.tx_x[start:stop], tx_y=self.tx_y[start:stop],
            rx_x=self.rx_x[start:stop], rx_y=self.rx_y[start:stop],
        )


def _one_tap(rx: np.ndarray, tx: np.ndarray) -> np.ndarray:
    # least-squares complex gain: removes the mean nonlinear phase and the power scale
    g = np.vdot(rx, tx) / np.vdot(rx, rx)
    return rx * g


def generate_frame(
    link: LinkSpec,
    power_dbm: float,
    n_symbols: int,
    seed: int,
    steps_per_span: int = 100,
    trim: int = 64,
    ase: bool = True,
) -> SymbolFrame:
    """Simulate one frame: random bits -> link -> CD-compensated symbols.

    ``n_symbols`` is the length after at least ``trim`` symbols are dropped
    from both ends of the frame.
    """
    if n_symbols < 1 or trim < 0:
        raise ChannelError("n_symbols must be positive and trim non-negative")
    rng = np.random.default_rng(seed)
    # pad the frame to an FFT-friendly length; the surplus is trimmed off the end
    n = sfft.next_fast_len(n_symbols + 2 * trim)
    bits = rng.integers(0, 2, size=(2, 4 * n), dtype=np.uint8)
    sx, sy = qam16_modulate(bits[0]), qam16_modulate(bits[1])
    wx = rrc_shape(sx, link.rolloff, link.sps)
    wy = rrc_shape(sy, link.rolloff, link.sps)
    ox, oy = ssfm_propagate(wx, wy, link, power_dbm, steps_per_span, rng=rng if ase else None, ase=ase)
    # the receiver's dispersion estimate leaves a fraction of the CD in place
    comp = link.total_length_m * (1 - link.residual_cd)
    ox, oy = cd_compensate(ox, link, comp), cd_compensate(oy, link, comp)
    rx = matched_filter_downsample(ox, link.rolloff, link.sps)
    ry = matched_filter_downsample(oy, link.rolloff, link.sps)
    if ase and link.trx_snr_db is not None:
        # transceiver noise floor, relative to the received symbol power
        for r in (rx, ry):
            p = np.mean(np.abs(r) ** 2) / 10 ** (link.trx_snr_db / 10)
            r += np.sqrt(p / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    rx, ry = _one_tap(rx, sx), _one_tap(ry, sy)
    sl = slice(trim, trim + n_symbols)
    return SymbolFrame(sx[sl], sy[sl], rx[sl], ry[sl], power_dbm, seed, link, trim)


# --------------------------------------------------------------------------
# Dataset file: JSON header line + little-endian float32 body
# --------------------------------------------------------------------------

def _interleave(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.stack([x.real, x.imag, y.real, y.imag], axis=1).ravel()


def save_frame(frame: SymbolFrame, path) -> None:
    """Write ``frame`` as a JSON header, a newline, then the float32 body.

    The body holds the tx block followed by the rx block, each interleaved
    per symbol as [Re x, Im x, Re y, Im y].
    """
    header = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "link": frame.link.to_dict(),
        "power_dbm": frame.power_dbm,
        "n_symbols": len(frame),
        "seed": frame.seed,
        "trim": frame.trim,
    }
    body = np.concatenate([_interleave(frame.tx_x, frame.tx_y), _interleave(frame.rx_x, frame.rx_y)])
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(body.astype("<f4").tobytes())


def load_frame(path) -> SymbolFrame:
    raw = Path(path).read_bytes()
    (n_head,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + n_head])
    if header.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise ChannelError(f"unsupported dataset schema {header.get('schema_version')}")
    n = header["n_symbols"]
    body = np.frombuffer(raw[4 + n_head:], dtype="<f4").astype(np.float64)
    if body.size != 8 * n:
        raise ChannelError(f"dataset body has {body.size} floats, expected {8 * n}")
    tx, rx = body[: 4 * n].reshape(n, 4), body[4 * n:].reshape(n, 4)
    return SymbolFrame(
        tx[:, 0] + 1j * tx[:, 1], tx[:, 2] + 1j * tx[:, 3],
        rx[:, 0] + 1j * rx[:, 1], rx[:, 2] + 1j * rx[:, 3],
        header["power_dbm"], header["seed"], LinkSpec.from_dict(header["link"]), header["trim"],
    )
