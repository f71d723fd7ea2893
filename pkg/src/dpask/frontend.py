"""Electro-optic transmitter: driver/MZM response, sine field transfer, laser, PolMux."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .signal import CARRIER_FREQ, SYMBOL_RATE, DualPolWaveform, Waveform
from .txdsp import minimum_phase_spectrum

MAX_DRIVER_GAIN_DB = 14.5


class FreqResponse:
    """Complex transfer function sampled on a nonnegative frequency grid.

    Magnitude is interpolated monotone-cubically in log-frequency, phase
    linearly. Beyond the grid the magnitude follows the last log-log slope.
    """

    def __init__(self, freq_grid, complex_gain, min_phase: bool = True):
        f = np.asarray(freq_grid, dtype=float)
        g = np.asarray(complex_gain, dtype=complex)
        if f.ndim != 1 or f.size != g.size or f.size == 0:
            raise ValueError("grid and gain must be 1-D and equal length")
        if f[0] < 0 or np.any(np.diff(f) <= 0):
            raise ValueError("frequency grid must be nonnegative, ascending and unique")
        self.freq_grid = f
        self.complex_gain = g
        self.min_phase = min_phase
        self._eps = f[1] * 1e-3 if f.size > 1 else 1.0
        mag_db = 20 * np.log10(np.maximum(np.abs(g), 1e-300))
        self._phase = np.unwrap(np.angle(g))
        if f.size > 1:
            self._mag = PchipInterpolator(np.log10(f + self._eps), mag_db, extrapolate=False)
            x1, x0 = np.log10(f[-1]), np.log10(f[-2])
            self._tail_slope = (mag_db[-1] - mag_db[-2]) / (x1 - x0) if f[-2] > 0 else 0.0
        self._mag_db = mag_db

    @classmethod
    def unity(cls) -> "FreqResponse":
        return cls([0.0], [1.0 + 0j])

    def magnitude_db(self, f) -> np.ndarray:
        f = np.abs(np.asarray(f, dtype=float))
        if self.freq_grid.size == 1:
            return np.full(f.shape, self._mag_db[0])
        out = np.empty(f.shape)
        inside = f <= self.freq_grid[-1]
        out[inside] = self._mag(np.log10(f[inside] + self._eps))
        fo = f[~inside]
        out[~inside] = self._mag_db[-1] + self._tail_slope * np.log10(fo / self.freq_grid[-1])
        return out

    def phase(self, f) -> np.ndarray:
        f = np.abs(np.asarray(f, dtype=float))
        if self.freq_grid.size == 1:
            return np.full(f.shape, self._phase[0])
        slope = (self._phase[-1] - self._phase[-2]) / (self.freq_grid[-1] - self.freq_grid[-2])
        out = np.interp(f, self.freq_grid, self._phase)
        far = f > self.freq_grid[-1]
        out[far] = self._phase[-1] + slope * (f[far] - self.freq_grid[-1])
        return out

    def evaluate(self, f) -> np.ndarray:
        """Complex gain at frequencies ``|f|`` (caller conjugates negative bins)."""
        return 10 ** (self.magnitude_db(f) / 20) * np.exp(1j * self.phase(f))

    def cascade(self, other: "FreqResponse") -> "FreqResponse":
        grid = np.union1d(self.freq_grid, other.freq_grid)
        return FreqResponse(grid, self.evaluate(grid) * other.evaluate(grid), self.min_phase and other.min_phase)

    def inverse(self) -> "FreqResponse":
        return FreqResponse(self.freq_grid, 1 / self.complex_gain, self.min_phase)

    def impulse_response(self) -> np.ndarray:
        """Impulse response on the grid's implied uniform time axis (grid must be uniform from DC)."""
        g = self.complex_gain
        full = np.concatenate([g, np.conj(g[-2:0:-1])])
        return np.fft.ifft(full)


def _minimum_phase_on_grid(freqs: np.ndarray, mag: np.ndarray) -> np.ndarray:
    """Minimum-phase gain on a uniform grid from DC to Nyquist."""
    full = np.concatenate([mag, mag[-2:0:-1]])
    return minimum_phase_spectrum(full)[: mag.size]


def chip_response_model(anchors, f_max: float = 1.024e12, n_points: int = 16385) -> FreqResponse:
    """Smooth minimum-phase response through ``(freq_hz, mag_db)`` anchors.

    The magnitude is a monotone cubic in ``log10(f + 1 GHz)`` through the
    anchors, continued beyond the last anchor at the final log-log slope.
    """
    anchors = sorted((float(f), float(m)) for f, m in anchors)
    if not anchors or anchors[0][0] != 0.0:
        raise ValueError("anchors must include DC")
    mags = [m for _, m in anchors]
    if any(b > a for a, b in zip(mags, mags[1:])):
        raise ValueError("anchor magnitudes must be non-increasing")
    if len(anchors) == 1:
        return FreqResponse.unity()
    fa = np.array([a[0] for a in anchors])
    ma = np.array(mags) - mags[0]
    f = np.linspace(0, f_max, n_points)
    ref = 1e9
    interp = PchipInterpolator(np.log10(fa + ref), ma)
    mag_db = np.empty_like(f)
    inside = f <= fa[-1]
    mag_db[inside] = interp(np.log10(f[inside] + ref))
    lo = fa[-2] if fa[-2] > 0 else ref
    slope = (ma[-1] - ma[-2]) / np.log10(fa[-1] / lo)
    mag_db[~inside] = ma[-1] + slope * np.log10(f[~inside] / fa[-1])
    gain = _minimum_phase_on_grid(f, 10 ** (mag_db / 20))
    return FreqResponse(f, gain, min_phase=True)


CHIP_ANCHORS = ((0.0, 0.0), (11e9, -3.0), (35e9, -6.0))


def load_s21_csv(path) -> FreqResponse:
    """Read ``freq_hz,mag_db[,phase_deg]`` rows; without phase, reconstruct minimum phase."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fields = reader.fieldnames or []
    if "freq_hz" not in fields or "mag_db" not in fields:
        raise ValueError(f"{path}: header must start with freq_hz,mag_db")
    f = np.array([float(r["freq_hz"]) for r in rows])
    m = np.array([float(r["mag_db"]) for r in rows])
    if "phase_deg" in fields and all(r.get("phase_deg") not in (None, "") for r in rows):
        ph = np.deg2rad([float(r["phase_deg"]) for r in rows])
        return FreqResponse(f, 10 ** (m / 20) * np.exp(1j * ph), min_phase=False)
    measured = FreqResponse(f, 10 ** (m / 20) + 0j)
    grid = np.linspace(0, max(1.024e12, f[-1]), 16385)
    return FreqResponse(grid, _minimum_phase_on_grid(grid, 10 ** (measured.magnitude_db(grid) / 20)))


def filter_waveform(w: Waveform, resp: FreqResponse) -> Waveform:
    f = w.freqs()
    h = resp.evaluate(f)
    h = np.where(f < 0, np.conj(h), h)
    out = np.fft.ifft(np.fft.fft(w.samples) * h)
    if np.all(w.samples.imag == 0):
        out = out.real
    return w.with_samples(out)


@dataclass(frozen=True)
class MzmParams:
    v_pi: float = 4.5
    bias: str = "null"
    insertion_loss_db: float = 18.0
    coupler_loss_db: float = 8.0
    chirp_alpha: float = 0.0
    drive_gain_db: float = MAX_DRIVER_GAIN_DB
    swing_v: float | None = None
    input_rms_v: float = 0.3
    transfer: str = "sine"

    def __post_init__(self):
        if self.v_pi <= 0:
            raise ValueError("v_pi must be positive")
        if self.insertion_loss_db < 0:
            raise ValueError("insertion loss must be nonnegative")
        if self.drive_gain_db > MAX_DRIVER_GAIN_DB:
            raise ValueError(f"driver gain limited to {MAX_DRIVER_GAIN_DB} dB")
        if self.bias not in ("null", "quadrature"):
            raise ValueError("bias must be 'null' or 'quadrature'")
        if self.transfer not in ("sine", "linear"):
            raise ValueError("transfer must be 'sine' or 'linear'")

    @property
    def peak_drive(self) -> float:
        return self.v_pi / 2 if self.swing_v is None else self.swing_v


@dataclass(frozen=True)
class LaserModel:
    center_freq: float = CARRIER_FREQ
    power_dbm: float = 16.0
    linewidth_hz: float = 100e3
    freq_offset_hz: float = 0.0

    def __post_init__(self):
        if self.linewidth_hz < 0:
            raise ValueError("linewidth must be nonnegative")

    def phase_noise(self, n: int, sample_rate: float, rng) -> np.ndarray:
        if self.linewidth_hz == 0:
            return np.zeros(n)
        if rng is None:
            raise ValueError("phase noise needs an rng")
        var = 2 * np.pi * self.linewidth_hz / sample_rate
        return np.cumsum(rng.normal(0.0, np.sqrt(var), n))

    def field(self, n: int, sample_rate: float, rng=None) -> np.ndarray:
        t = np.arange(n) / sample_rate
        phi = 2 * np.pi * self.freq_offset_hz * t + self.phase_noise(n, sample_rate, rng)
        return np.sqrt(10 ** (self.power_dbm / 10)) * np.exp(1j * phi)


def apply_driver(w: Waveform, p: MzmParams, chip: FreqResponse | None = None) -> Waveform:
    """Filter by the chip response and scale to the configured peak drive (volts)."""
    x = filter_waveform(w, chip) if chip is not None else w.with_samples(w.samples.copy())
    peak = np.max(np.abs(x.samples))
    if peak == 0:
        raise ValueError("cannot drive with an all-zero waveform")
    gain = p.peak_drive / peak
    gain_db = 20 * np.log10(gain / p.input_rms_v)
    if gain_db > p.drive_gain_db:
        raise ValueError(f"swing needs {gain_db:.1f} dB driver gain, limit {p.drive_gain_db} dB")
    return x.with_samples(x.samples * gain)


def mzm_modulate(drive: Waveform, laser: LaserModel, p: MzmParams, rng=None) -> Waveform:
    """Push-pull MZM field transfer ``sin(pi v / (2 V_pi))`` times the laser field."""
    v = drive.samples.real
    arg = np.pi * v / (2 * p.v_pi)
    if p.bias == "quadrature":
        warnings.warn("quadrature bias with bipolar drive gives a unipolar field", stacklevel=2)
        arg = arg + np.pi / 4
    t = np.sin(arg) if p.transfer == "sine" else arg
    if p.chirp_alpha:
        t = t * np.exp(1j * p.chirp_alpha * np.pi * v / (2 * p.v_pi))
    carrier = laser.field(v.size, drive.sample_rate, rng)
    out = carrier * t * 10 ** (-p.insertion_loss_db / 20)
    return Waveform(out, drive.sample_rate, laser.center_freq)


def polmux(field: Waveform, delay_symbols: int = 1094, split_loss_db: float = 3.0, symbol_rate: float = SYMBOL_RATE) -> DualPolWaveform:
    """Emulate dual polarization by a circularly delayed copy on the orthogonal axis."""
    shift = delay_symbols * field.sample_rate / symbol_rate
    if abs(shift - round(shift)) > 1e-9:
        raise ValueError("delay is not an integer number of samples; resample first")
    a = 10 ** (-split_loss_db / 20)
    x = field.samples * a
    y = np.roll(x, int(round(shift)))
    return DualPolWaveform(field.with_samples(x), field.with_samples(y))
