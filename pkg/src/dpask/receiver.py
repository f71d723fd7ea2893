"""Coherent receiver front end: optical filter, SOP rotation, 90-degree hybrid, ADC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.constants as const
import scipy.signal as ss

from .frontend import LaserModel
from .signal import DualPolWaveform, clip_quantize, resample_array


def nm_to_hz(bw_nm: float, center_freq: float) -> float:
    lam = const.c / center_freq
    return const.c * bw_nm * 1e-9 / lam**2


@dataclass(frozen=True)
class AdcParams:
    sample_rate: float = 80e9
    analog_bw_hz: float | None = 33e9
    enob: float | None = 5.5
    clip_sigma: float = 3.3
    channels: int = 4
    capture_samples: int | None = 2**20  # record memory per channel

    def __post_init__(self):
        if self.channels != 4:
            raise ValueError("the receiver digitizes exactly four streams")
        if self.capture_samples is not None and self.capture_samples <= 0:
            raise ValueError("capture_samples must be positive")


@dataclass
class Capture:
    """Four real detector streams ``(XI, XQ, YI, YQ)`` sharing one sample rate."""

    streams: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.streams = np.asarray(self.streams, dtype=float)
        if self.streams.shape[0] != 4:
            raise ValueError("expected four streams")

    def complex_pols(self) -> np.ndarray:
        s = self.streams
        return np.vstack([s[0] + 1j * s[1], s[2] + 1j * s[3]])

    @classmethod
    def from_complex(cls, arr, sample_rate) -> "Capture":
        arr = np.asarray(arr)
        return cls(np.vstack([arr[0].real, arr[0].imag, arr[1].real, arr[1].imag]), sample_rate)


def random_jones(rng) -> np.ndarray:
    """Haar-random 2x2 unitary."""
    z = (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def rotation_jones(theta: float, phase: float = 0.0) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s * np.exp(-1j * phase)], [s * np.exp(1j * phase), c]])


def optical_bandpass(sig: DualPolWaveform, bw_nm: float = 1.4, shape: str = "ideal", order: int = 3) -> DualPolWaveform:
    """Band-pass centred on the carrier; ``shape`` is ``ideal`` or ``supergauss``."""
    bw = nm_to_hz(bw_nm, sig.center_freq)
    f = sig.freqs()
    if shape == "ideal":
        h = (np.abs(f) <= bw / 2).astype(float)
    elif shape == "supergauss":
        h = np.exp(-np.log(2) * (2 * f / bw) ** (2 * order))
    else:
        raise ValueError(f"unknown filter shape {shape!r}")
    arr = np.fft.ifft(np.fft.fft(sig.as_array(), axis=-1) * h, axis=-1)
    # in-band OSNR bookkeeping is unaffected by the filter
    return sig.with_array(arr, sig.record)


def rotate_polarization(sig: DualPolWaveform, J, extra_delay_ps: float = 0.0) -> DualPolWaveform:
    J = np.asarray(J, dtype=complex)
    if J.shape != (2, 2) or not np.allclose(J @ J.conj().T, np.eye(2), atol=1e-9):
        raise ValueError("Jones matrix must be 2x2 unitary")
    arr = J @ sig.as_array()
    if extra_delay_ps:
        f = sig.freqs()
        arr[1] = np.fft.ifft(np.fft.fft(arr[1]) * np.exp(-2j * np.pi * f * extra_delay_ps * 1e-12))
    return sig.with_array(arr, sig.record)


def coherent_detect(sig: DualPolWaveform, lo: LaserModel, rng=None, gain: float | None = None, thermal_rms: float = 0.0) -> Capture:
    """Ideal polarization-diverse homodyne detection against ``lo``.

    ``XI + jXQ`` is proportional to ``Ex * conj(LO)``. With ``gain=None`` the
    outputs are normalized to unit RMS per complex polarization pair on
    average; a fixed ``gain`` keeps detection linear in the field.
    """
    n = len(sig)
    lo_phase = 2 * np.pi * lo.freq_offset_hz * np.arange(n) / sig.sample_rate
    lo_phase = lo_phase + lo.phase_noise(n, sig.sample_rate, rng)
    mix = sig.as_array() * np.exp(-1j * lo_phase)
    if gain is None:
        rms = np.sqrt(np.mean(np.abs(mix) ** 2))
        gain = 1.0 / rms if rms > 0 else 1.0
    mix = mix * gain
    if thermal_rms:
        mix = mix + rng.normal(0, thermal_rms, mix.shape) + 1j * rng.normal(0, thermal_rms, mix.shape)
    return Capture.from_complex(mix, sig.sample_rate)


def bessel_response(f: np.ndarray, bw_hz: float, order: int = 4) -> np.ndarray:
    b, a = ss.bessel(order, 2 * np.pi * bw_hz, btype="low", analog=True, norm="mag")
    _, h = ss.freqs(b, a, worN=2 * np.pi * np.abs(f))
    return np.where(f < 0, np.conj(h), h)


def adc_capture(cap: Capture, p: AdcParams, rng=None) -> Capture:
    """Bessel anti-alias filter, resample to the ADC clock, clip and quantize."""
    if cap.sample_rate < p.sample_rate:
        raise ValueError("input rate below the ADC rate")
    x = cap.streams
    if p.analog_bw_hz is not None and np.isfinite(p.analog_bw_hz):
        f = np.fft.fftfreq(x.shape[-1], 1 / cap.sample_rate)
        x = np.fft.ifft(np.fft.fft(x, axis=-1) * bessel_response(f, p.analog_bw_hz), axis=-1).real
    x = resample_array(x, cap.sample_rate, p.sample_rate)
    if p.capture_samples is not None and x.shape[-1] > p.capture_samples:
        raise ValueError(f"{x.shape[-1]} samples exceed the {p.capture_samples}-sample record; capture in pieces")
    if p.enob is not None and np.isfinite(p.enob):
        x = np.vstack([clip_quantize(row, p.enob, p.clip_sigma, rng) for row in x])
    return Capture(x, p.sample_rate)
