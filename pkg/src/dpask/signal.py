"""Waveform containers, PRBS sources, RRC design, resampling and PSD estimation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.signal as ss

CARRIER_FREQ = 193.4e12
SYMBOL_RATE = 64e9

# feedback taps (1-based) of the Fibonacci LFSR per order
_PRBS_TAPS = {
    5: (5, 3),
    7: (7, 6),
    9: (9, 5),
    11: (11, 9),
    15: (15, 14),
    23: (23, 18),
    31: (31, 28),
}


@dataclass
class Waveform:
    """Uniformly sampled complex baseband field (or real voltage stored as complex).

    Power in mW is the mean squared magnitude of ``samples``.
    """

    samples: np.ndarray
    sample_rate: float
    center_freq: float = CARRIER_FREQ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    @property
    def power_dbm(self) -> float:
        return 10 * np.log10(self.power)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    def time(self) -> np.ndarray:
        return np.arange(len(self)) / self.sample_rate

    def freqs(self) -> np.ndarray:
        return np.fft.fftfreq(len(self), 1.0 / self.sample_rate)

    def with_samples(self, samples) -> "Waveform":
        return replace(self, samples=np.asarray(samples, dtype=complex))


@dataclass
class NoiseRecord:
    """Exact bookkeeping of noiseless signal power and white ASE density.

    ``noise_psd`` is the one-sided-equivalent density summed over both
    polarizations, in mW/Hz.
    """

    signal_power: float
    noise_psd: float = 0.0

    def scaled(self, power_gain: float) -> "NoiseRecord":
        return NoiseRecord(self.signal_power * power_gain, self.noise_psd * power_gain)


@dataclass
class DualPolWaveform:
    pol_x: Waveform
    pol_y: Waveform
    record: NoiseRecord | None = field(default=None)

    def __post_init__(self):
        if self.pol_x.sample_rate != self.pol_y.sample_rate:
            raise ValueError("polarizations must share a sample rate")
        if len(self.pol_x) != len(self.pol_y):
            raise ValueError("polarizations must have equal length")

    @classmethod
    def from_array(cls, arr, sample_rate, center_freq=CARRIER_FREQ, record=None):
        arr = np.asarray(arr)
        return cls(
            Waveform(arr[0], sample_rate, center_freq),
            Waveform(arr[1], sample_rate, center_freq),
            record,
        )

    def as_array(self) -> np.ndarray:
        return np.vstack([self.pol_x.samples, self.pol_y.samples])

    def with_array(self, arr, record=None) -> "DualPolWaveform":
        return DualPolWaveform.from_array(arr, self.sample_rate, self.center_freq, record)

    @property
    def sample_rate(self) -> float:
        return self.pol_x.sample_rate

    @property
    def center_freq(self) -> float:
        return self.pol_x.center_freq

    def __len__(self):
        return len(self.pol_x)

    @property
    def power(self) -> float:
        """Total power of both polarizations in mW."""
        return self.pol_x.power + self.pol_y.power

    @property
    def power_dbm(self) -> float:
        return 10 * np.log10(self.power)

    def freqs(self) -> np.ndarray:
        return self.pol_x.freqs()


@dataclass
class Spectrum:
    freq_bins: np.ndarray
    psd: np.ndarray
    in_db: bool = False

    def linear(self) -> np.ndarray:
        return 10 ** (self.psd / 10) if self.in_db else np.asarray(self.psd)

    def to_db(self) -> "Spectrum":
        if self.in_db:
            return self
        return Spectrum(self.freq_bins, 10 * np.log10(self.psd), True)

    @property
    def resolution(self) -> float:
        return float(self.freq_bins[1] - self.freq_bins[0])

    def total_power(self) -> float:
        return float(np.sum(self.linear()) * self.resolution)


def generate_prbs(order: int = 5, seed_state: int | None = None, length: int | None = None) -> np.ndarray:
    """Maximal-length pseudo-random bit sequence from a Fibonacci LFSR.

    Parameters
    ----------
    order : int
        Register length; the sequence repeats every ``2**order - 1`` bits.
    seed_state : int, optional
        Initial register content, nonzero. Defaults to all ones.
    length : int, optional
        Number of bits to emit. Defaults to one period.

    Returns
    -------
    np.ndarray
        uint8 array of bits.
    """
    if order not in _PRBS_TAPS:
        raise ValueError(f"unsupported PRBS order {order}")
    mask = (1 << order) - 1
    state = mask if seed_state is None else int(seed_state) & mask
    if state == 0:
        raise ValueError("PRBS seed must be nonzero")
    if length is None:
        length = mask
    a, b = _PRBS_TAPS[order]
    out = np.empty(length, dtype=np.uint8)
    for k in range(length):
        out[k] = state & 1
        fb = ((state >> (a - 1)) ^ (state >> (b - 1))) & 1
        state = ((state << 1) | fb) & mask
    return out


def design_rrc(rolloff: float = 0.1, span_symbols: int = 64, samples_per_symbol: int = 2) -> np.ndarray:
    """Unit-energy root-raised-cosine taps, ``span_symbols * sps + 1`` long."""
    if not 0 < rolloff <= 1:
        raise ValueError("rolloff must lie in (0, 1]")
    if span_symbols % 2 or span_symbols <= 0:
        raise ValueError("span_symbols must be a positive even number")
    if samples_per_symbol < 2:
        raise ValueError("samples_per_symbol must be >= 2")
    b = rolloff
    n = span_symbols * samples_per_symbol
    t = (np.arange(n + 1) - n / 2) / samples_per_symbol
    h = np.empty_like(t)
    zero = np.isclose(t, 0.0)
    sing = np.isclose(np.abs(t), 1 / (4 * b))
    reg = ~(zero | sing)
    tr = t[reg]
    h[reg] = (np.sin(np.pi * tr * (1 - b)) + 4 * b * tr * np.cos(np.pi * tr * (1 + b))) / (
        np.pi * tr * (1 - (4 * b * tr) ** 2)
    )
    h[zero] = 1 + b * (4 / np.pi - 1)
    h[sing] = (b / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
    )
    return h / np.sqrt(np.sum(h**2))


def resample(w: Waveform, new_rate: float) -> Waveform:
    """FFT resampling of a (periodic, band-limited) waveform to ``new_rate``."""
    if new_rate <= 0:
        raise ValueError("new_rate must be positive")
    if new_rate == w.sample_rate:
        return w.with_samples(w.samples.copy())
    n_out = int(round(len(w) * new_rate / w.sample_rate))
    out = ss.resample(w.samples, n_out)
    return Waveform(out, new_rate, w.center_freq)


def resample_array(x: np.ndarray, old_rate: float, new_rate: float) -> np.ndarray:
    """Resample along the last axis; same rule as :func:`resample`."""
    if new_rate == old_rate:
        return np.array(x, copy=True)
    n_out = int(round(x.shape[-1] * new_rate / old_rate))
    return ss.resample(x, n_out, axis=-1)


def estimate_psd(w: Waveform, resolution_bw: float = 100e6) -> Spectrum:
    """Welch PSD (Hann, 50 % overlap), two-sided, centered, linear mW/Hz."""
    nperseg = int(round(w.sample_rate / resolution_bw))
    if nperseg < 2:
        raise ValueError("resolution_bw too coarse for this sample rate")
    if nperseg > len(w):
        raise ValueError("waveform shorter than one resolution cell")
    f, p = ss.welch(
        w.samples,
        fs=w.sample_rate,
        window="hann",
        nperseg=nperseg,
        noverlap=nperseg // 2,
        return_onesided=False,
        detrend=False,
        scaling="density",
    )
    return Spectrum(np.fft.fftshift(f), np.fft.fftshift(p))


def clip_quantize(x: np.ndarray, enob: float | None, clip_sigma: float, rng=None) -> np.ndarray:
    """Clip a real signal at ``clip_sigma`` RMS and quantize it to ``enob`` bits.

    ``enob=None`` (or inf) is the transparent converter: no clipping either.
    Uniform mid-rise quantizer spanning the clip range. A fractional ENOB
    quantizes with ``ceil(enob)`` bits and tops up the error with white
    Gaussian noise to the ENOB-equivalent step. Exact zero sits on a
    decision boundary and is rounded up to +1/2 LSB; an all-zero input is
    returned unchanged.
    """
    x = np.asarray(x, dtype=float)
    if enob is None or not np.isfinite(enob):
        return x.copy()
    rms = np.sqrt(np.mean(x**2))
    if rms == 0:
        return np.zeros_like(x)
    full = clip_sigma * rms
    y = np.clip(x, -full, full)
    if enob <= 1:
        raise ValueError("enob must exceed 1")
    bits = int(np.ceil(enob))
    step = 2 * full / 2**bits
    idx = np.floor(y / step)
    idx = np.clip(idx, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    y = (idx + 0.5) * step
    extra = (2 * full / 2**enob) ** 2 / 12 - step**2 / 12
    if extra > 1e-15 * full**2:
        if rng is None:
            raise ValueError("fractional ENOB needs an rng")
        y = y + rng.normal(0.0, np.sqrt(extra), x.shape)
    return y


def save_waveform(path, w: Waveform | DualPolWaveform) -> None:
    """Dump samples as little-endian float64 (re, im) pairs plus a JSON sidecar."""
    path = Path(path)
    if isinstance(w, DualPolWaveform):
        data = w.as_array()
        meta = {"sample_rate": w.sample_rate, "center_freq": w.center_freq, "pols": 2}
    else:
        data = w.samples[None, :]
        meta = {"sample_rate": w.sample_rate, "center_freq": w.center_freq, "pols": 1}
    inter = np.empty(data.shape + (2,), dtype="<f8")
    inter[..., 0] = data.real
    inter[..., 1] = data.imag
    path.write_bytes(inter.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_waveform(path) -> Waveform | DualPolWaveform:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["pols"], -1, 2)
    data = raw[..., 0] + 1j * raw[..., 1]
    if meta["pols"] == 1:
        return Waveform(data[0], meta["sample_rate"], meta["center_freq"])
    return DualPolWaveform.from_array(data, meta["sample_rate"], meta["center_freq"])
