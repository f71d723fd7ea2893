import numpy as np
import pytest

from dpask.signal import design_rrc
from dpask.txdsp import ModFormat, circular_filter, random_frame, shape_pulse

SPS = 2
RATE = 64e9
DELAY = 1094


def synth_rx(m=8, seed=0, J=None, snr_db=None, freq_hz=0.0, phase=0.0, shift=0, matched=False):
    """Dual-pol field at 2 samples/symbol built straight from the frame.

    ``snr_db`` is the per-symbol SNR after a unit-energy matched filter,
    noise counted in both quadratures.
    """
    rng = np.random.default_rng(seed)
    fr = random_frame(ModFormat(m), rng)
    h = design_rrc(0.1, 64, SPS)
    w = shape_pulse(fr.symbols.astype(complex), SPS, h).samples
    x = np.vstack([w, np.roll(w, DELAY * SPS)])
    if J is not None:
        x = np.asarray(J) @ x
    n = x.shape[1]
    x = x * np.exp(1j * (2 * np.pi * freq_hz * np.arange(n) / (SPS * RATE) + phase))
    if snr_db is not None:
        var = 10 ** (-snr_db / 10)
        x = x + np.sqrt(var / 2) * (rng.normal(size=x.shape) + 1j * rng.normal(size=x.shape))
    x = np.roll(x, shift, axis=1)
    if matched:
        x = circular_filter(x, h)
    return fr, x


def as_streams(x):
    return np.vstack([x[0].real, x[0].imag, x[1].real, x[1].imag])


@pytest.fixture
def synth():
    return synth_rx
