"""Offline receiver DSP for dual-polarization bipolar m-ASK."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcinv

from . import _kernels
from .channel import compensate_cd
from .signal import SYMBOL_RATE, DualPolWaveform, design_rrc, resample_array
from .txdsp import ModFormat, SymbolFrame, circular_filter

__all__ = [
    "ConvergenceError",
    "SyncError",
    "DspConfig",
    "EqualizerState",
    "DspReport",
    "SyncResult",
    "compensate_cd",
    "frame_sync",
    "mimo_equalize_da",
    "bps_cpe",
    "dd_equalize_4x4",
    "decide_inphase",
    "count_ber",
    "ber_to_q2",
    "run_receiver",
]


class SyncError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DspConfig:
    sps: int = 2
    symbol_rate: float = SYMBOL_RATE
    rolloff: float = 0.1
    rrc_span: int = 64
    matched_filter: bool = True
    cd_D: float = 0.0
    cd_length_km: float = 0.0
    pol_delay_symbols: int = 1094
    sync_psr_min: float = 2.0
    mimo_taps: int = 31
    mimo_mu: float = 1e-3
    mimo_epochs: int = 30
    mse_threshold: float = 0.1
    mimo_track_mu: float = 3e-5
    mimo_track_passes: int = 3
    bps_phases: int = 32
    bps_block: int = 64
    dd_enabled: bool = True
    dd_taps: int = 15
    dd_mu: float = 1e-4
    dd_passes: int = 2


@dataclass
class EqualizerState:
    mode: str
    taps: np.ndarray
    step_size: float
    converged: bool = False
    final_mse: float = float("nan")
    mse_history: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class SyncResult:
    offset: int
    polarity: int
    phase: float
    freq_offset_hz: float
    psr: float
    gain: np.ndarray


def _block_correlations(streams: np.ndarray, frame: SymbolFrame, sps: int):
    """Circular correlation of each stream with each training block, per lag."""
    L = streams.shape[-1]
    R = np.fft.fft(streams, axis=-1)
    out = []
    tmpl = frame.symbols
    for off, ln in frame.header_map:
        g = np.zeros(L)
        g[(np.arange(off, off + ln) * sps) % L] = tmpl[off : off + ln]
        G = np.conj(np.fft.fft(g))
        out.append(np.fft.ifft(R * G, axis=-1) / np.sum(tmpl[off : off + ln] ** 2))
    return np.array(out)  # (blocks, streams, lags)


def frame_sync(
    streams,
    frame: SymbolFrame,
    sps: int = 2,
    pol_delay_symbols: int | None = None,
    symbol_rate: float = SYMBOL_RATE,
    psr_min: float = 2.0,
) -> SyncResult:
    """Locate the frame start in one or two received streams.

    With two streams and ``pol_delay_symbols`` the metric is the summed
    ``|det|`` of the 2x2 block correlation matrix for the hypotheses
    "X tributary at lag k, Y tributary at lag k + delay", which is
    insensitive to the unknown polarization state. The block sum is
    weighted by the preamble term to suppress sidelobes at the block
    pitch. Frequency offset comes
    from the preamble phase slope refined across all training blocks.
    """
    s = np.atleast_2d(np.asarray(streams, dtype=complex))
    L = s.shape[-1]
    c = _block_correlations(s, frame, sps)
    dual = s.shape[0] == 2 and pol_delay_symbols is not None
    if dual:
        d = pol_delay_symbols * sps
        c2 = np.roll(c, -d, axis=-1)
        det = c[:, 0] * c2[:, 1] - c2[:, 0] * c[:, 1]
        per_block = np.abs(det)
    else:
        per_block = np.abs(c[:, 0])
    # equally spaced blocks cut from a short PRBS are near-shifted copies of
    # each other, so the block sum alone has sidelobes at the block pitch;
    # weighting by the preamble term removes them
    metric = np.sum(per_block, axis=0) * per_block[0]
    k = int(np.argmax(metric))
    guard = np.ones(L, dtype=bool)
    guard[(k + np.arange(-2 * sps, 2 * sps + 1)) % L] = False
    side = metric[guard].max() if guard.any() else 0.0
    psr = float(metric[k] / side) if side > 0 else float("inf")
    if psr < psr_min:
        raise SyncError(f"frame sync failed: peak-to-sidelobe {psr:.2f} < {psr_min}")

    if dual:
        mats = np.stack([np.stack([c[:, 0, k], c2[:, 0, k]], -1), np.stack([c[:, 1, k], c2[:, 1, k]], -1)], 1)
    else:
        mats = c[:, 0, k][:, None, None]
    freq = _estimate_freq_offset(s, frame, k, sps, symbol_rate, mats, dual, pol_delay_symbols)
    gain = mats[0]
    # polarity of the X tributary: its strongest received component
    col = gain[:, 0]
    ref = col[np.argmax(np.abs(col))]
    phase = float(np.angle(ref))
    polarity = 1 if np.cos(phase) >= 0 else -1
    return SyncResult(k, polarity, phase, freq, psr, gain)


def _estimate_freq_offset(s, frame, k, sps, symbol_rate, mats, dual, delay):
    """Coarse slope inside the preamble, then unwrapped regression over blocks."""
    off, ln = frame.header_map[0]
    half = ln // 2
    L = s.shape[-1]
    tmpl = frame.symbols

    def seg_matrix(start, n):
        idx = (k + (np.arange(start, start + n)) * sps) % L
        t = tmpl[start : start + n]
        cols = [s[:, idx] @ t / np.sum(t**2)]
        if dual:
            idx2 = (idx + delay * sps) % L
            cols.append(s[:, idx2] @ t / np.sum(t**2))
        return np.stack(cols, -1)

    m1 = seg_matrix(off, half)
    m2 = seg_matrix(off + half, ln - half)
    z = np.vdot(m1, m2)
    if z == 0:
        return 0.0
    dt = (ln / 2) / symbol_rate
    f0 = np.angle(z) / (2 * np.pi * dt)
    t_blocks = np.array([(o + n / 2) / symbol_rate for o, n in frame.header_map])
    ref = mats[0]
    ph = np.array([np.angle(np.vdot(ref, m)) for m in mats])
    resid = np.angle(np.exp(1j * (ph - 2 * np.pi * f0 * (t_blocks - t_blocks[0]))))
    order = np.argsort(t_blocks)
    unwrapped = np.unwrap(resid[order])
    tb = t_blocks[order] - t_blocks[0]
    if tb.size < 3:
        return float(f0)
    weights = np.array([n for _, n in frame.header_map])[order].astype(float)
    slope = np.polyfit(tb, unwrapped, 1, w=np.sqrt(weights))[0]
    return float(f0 + slope / (2 * np.pi))


def _training_targets(frame: SymbolFrame, pol_delay: int):
    N = len(frame)
    mask = frame.training_mask
    pos_x = np.flatnonzero(mask)
    pos_y = np.sort((pos_x + pol_delay) % N)
    sym_y = np.roll(frame.symbols, pol_delay)
    pos = np.vstack([pos_x, pos_y]).astype(np.int64)
    tgt = np.vstack([frame.symbols[pos_x], sym_y[pos_y]])
    # phase groups are contiguous runs of training symbols
    grp = np.vstack([np.concatenate([[0], np.cumsum(np.diff(row) != 1)]) for row in pos]).astype(np.int64)
    return pos, tgt, grp


def mimo_equalize_da(x, frame: SymbolFrame, cfg: DspConfig = DspConfig(), taps: np.ndarray | None = None):
    """Data-aided 2x2 complex butterfly, T/2-spaced in, T-spaced out.

    ``x`` holds the two received polarizations at ``cfg.sps`` samples per
    symbol, aligned so sample 0 is the first symbol of the X tributary.
    Training uses the known header blocks of both tributaries. An optional
    slow decision-directed pass (``mimo_track_mu``) then refines the taps
    over the whole frame before they are frozen and applied. Returns
    ``(symbols, state)``.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=complex))
    N = len(frame)
    if x.shape != (2, N * cfg.sps):
        raise ValueError(f"expected shape (2, {N * cfg.sps}), got {x.shape}")
    if taps is None:
        taps = np.zeros((2, 2, cfg.mimo_taps), dtype=complex)
        c = (cfg.mimo_taps - 1) // 2
        taps[0, 0, c] = taps[1, 1, c] = 1.0
        # start from the least-squares centre-tap mixing so LMS only refines
        pos, tgt, _ = _training_targets(frame, cfg.pol_delay_symbols)
        taps[:, :, c] = _centre_tap_init(x, pos, tgt, cfg.sps)
    pos, tgt, grp = _training_targets(frame, cfg.pol_delay_symbols)
    mse = _kernels.mimo_da_train(x, taps, pos, tgt, grp, cfg.mimo_mu, cfg.mimo_epochs, cfg.sps)
    final = float(mse[-1] / np.mean(tgt**2)) if mse.size else float("nan")
    state = EqualizerState("complex-2x2", taps, cfg.mimo_mu, final < cfg.mse_threshold, final, mse)
    if not np.isfinite(final) or not state.converged:
        raise ConvergenceError(f"2x2 training MSE {final:.3g} above threshold {cfg.mse_threshold:.3g}")
    if cfg.mimo_track_passes > 0 and cfg.mimo_track_mu > 0:
        # the training budget alone leaves noticeable tap noise; a slow
        # decision-directed pass over the whole frame averages it out
        D = cfg.pol_delay_symbols
        ref = np.vstack([frame.symbols, np.roll(frame.symbols, D)])
        known = np.vstack([frame.training_mask, np.roll(frame.training_mask, D)])
        levels = np.asarray(frame.format.levels, dtype=float)
        _kernels.mimo_dd_track(x, taps, ref, known, levels, cfg.mimo_track_mu, cfg.mimo_track_passes, cfg.sps, cfg.bps_block)
    y = _kernels.mimo_apply(x, taps, N, cfg.sps)
    rms = np.sqrt(np.mean(np.abs(y) ** 2, axis=1, keepdims=True))
    return y / rms, state


def _centre_tap_init(x, pos, tgt, sps):
    """Per-block-phase-free least-squares 2x2 mixing from the preamble only."""
    w = np.zeros((2, 2), dtype=complex)
    for p in range(2):
        # first contiguous training run of this output
        run = np.flatnonzero(np.diff(pos[p]) != 1)
        end = run[0] + 1 if run.size else pos.shape[1]
        idx = pos[p, :end] * sps
        A = x[:, idx].T
        sol, *_ = np.linalg.lstsq(A, tgt[p, :end].astype(complex), rcond=None)
        w[p] = sol
    return w


def bps_cpe(symbols, levels, n_phases: int = 32, block_len: int = 64):
    """Blind phase search over ``[-pi/2, pi/2)`` for a real-axis constellation.

    Returns the rotated symbols and the unwrapped per-block phase.
    """
    s = np.asarray(symbols, dtype=complex)
    levels = np.asarray(levels, dtype=float)
    n = s.size
    nb = -(-n // block_len)
    phases = -np.pi / 2 + np.pi * np.arange(n_phases) / n_phases
    rot = np.exp(-1j * phases)[:, None] * s[None, :]
    thr = (levels[1:] + levels[:-1]) / 2
    near = levels[np.searchsorted(thr, rot.real)]
    dist = (rot.real - near) ** 2 + rot.imag**2
    pad = nb * block_len - n
    if pad:
        dist = np.concatenate([dist, np.zeros((n_phases, pad))], axis=1)
    cost = dist.reshape(n_phases, nb, block_len).sum(axis=2)
    raw = phases[np.argmin(cost, axis=0)]
    track = np.empty(nb)
    track[0] = raw[0]
    for b in range(1, nb):
        track[b] = raw[b] + np.pi * np.round((track[b - 1] - raw[b]) / np.pi)
    per_symbol = np.repeat(track, block_len)[:n]
    return s * np.exp(-1j * per_symbol), track


def dd_equalize_4x4(streams, levels, taps: int = 15, mu: float = 1e-4, passes: int = 2, h0=None, reference=None, known=None):
    """T-spaced real 4x4 decision-directed LMS on ``(XI, XQ, YI, YQ)``.

    ``reference``/``known`` (both shape ``(2, N)``) optionally supply the
    in-phase targets of known symbols, e.g. training blocks. Returns
    ``(refined_streams, state)``; raises ``ConvergenceError`` when the
    squared error grows tenfold from the first to the last block.
    """
    x = np.ascontiguousarray(np.asarray(streams, dtype=float))
    if x.shape[0] != 4:
        raise ValueError("expected four real streams")
    if known is None:
        known = np.zeros((2, x.shape[1]), dtype=bool)
        reference = np.zeros((2, x.shape[1]))
    known = np.ascontiguousarray(known, dtype=np.bool_)
    reference = np.ascontiguousarray(reference, dtype=float)
    if h0 is None:
        h = np.zeros((4, 4, taps))
        for k in range(4):
            h[k, k, (taps - 1) // 2] = 1.0
    else:
        h = np.array(h0, dtype=float)
    out, err = _kernels.dd_lms_4x4(x, h, np.asarray(levels, dtype=float), mu, passes, reference, known)
    blk = min(1000, x.shape[1])
    start = err[0, :blk].mean()
    end = err[-1, -blk:].mean()
    state = EqualizerState("real-4x4", h, mu, True, float(err[-1].mean()), err.mean(axis=1))
    if start > 0 and end > 10 * start:
        state.converged = False
        raise ConvergenceError(f"4x4 DD equalizer diverged (MSE {start:.3g} -> {end:.3g})")
    return out, state


def decide_inphase(symbols, fmt: ModFormat) -> np.ndarray:
    """Nearest-level decision on the real part; midpoints go to the lower level."""
    return fmt.gray_table[level_index(np.real(symbols), fmt)].reshape(-1)


def level_index(values, fmt: ModFormat) -> np.ndarray:
    thr = (fmt.levels[1:] + fmt.levels[:-1]) / 2
    return np.searchsorted(thr, np.asarray(values, dtype=float), side="left")


def count_ber(decided_bits, reference_bits, mask=None) -> tuple[float, int, int]:
    """Return ``(ber, errors, bits_counted)`` over the bits selected by ``mask``."""
    d = np.asarray(decided_bits, dtype=np.uint8)
    r = np.asarray(reference_bits, dtype=np.uint8)
    if d.shape != r.shape:
        raise ValueError(f"length mismatch: {d.shape} vs {r.shape}")
    if mask is not None:
        d = d[mask]
        r = r[mask]
    total = int(d.size)
    if total == 0:
        raise ValueError("no bits to count")
    errors = int(np.count_nonzero(d != r))
    return errors / total, errors, total


def ber_to_q2(ber) -> float | np.ndarray:
    """Q^2 in dB: ``20 log10(sqrt(2) erfcinv(2 BER))`` for ``0 < BER < 0.5``."""
    b = np.asarray(ber, dtype=float)
    if np.any(b <= 0) or np.any(b >= 0.5):
        raise ValueError("BER must lie in (0, 0.5); report error-free runs separately")
    q2 = 20 * np.log10(np.sqrt(2) * erfcinv(2 * b))
    return float(q2) if q2.ndim == 0 else q2


@dataclass
class DspReport:
    ber: float
    q2_db: float | None
    bits_counted: int
    errors: int
    per_level_histograms: dict = field(default_factory=dict)
    phase_track: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    symbols: np.ndarray = field(default_factory=lambda: np.zeros((2, 0), dtype=complex), repr=False)
    tx_levels: np.ndarray = field(default_factory=lambda: np.zeros((2, 0), dtype=int), repr=False)
    sync: SyncResult | None = field(default=None, repr=False)
    mimo: EqualizerState | None = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "ber": self.ber,
                "q2_db": self.q2_db,
                "bits_counted": self.bits_counted,
                "errors": self.errors,
                "per_level_histograms": self.per_level_histograms,
                "phase_track": [float(v) for v in np.ravel(self.phase_track)],
            },
            sort_keys=True,
        )

    def constellation_csv(self, fmt: ModFormat) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pol", "symbol_index", "I", "Q", "decided_level"])
        for p, name in enumerate("xy"):
            dec = level_index(self.symbols[p].real, fmt)
            for i, (v, d) in enumerate(zip(self.symbols[p], dec)):
                w.writerow([name, i, f"{v.real:.6f}", f"{v.imag:.6f}", int(d)])
        return buf.getvalue()


def _histograms(symbols, tx_idx, fmt, bins=64):
    out = {}
    edges = np.linspace(fmt.levels[0] - 1, fmt.levels[-1] + 1, bins + 1)
    for i in range(fmt.m):
        v = symbols.real[tx_idx == i]
        counts, _ = np.histogram(v, edges)
        out[str(i)] = {"mean": float(v.mean()) if v.size else None, "std": float(v.std()) if v.size else None, "counts": counts.tolist()}
    out["edges"] = edges.tolist()
    return out


def run_receiver(capture, frame: SymbolFrame, cfg: DspConfig = DspConfig(), capture_rate: float | None = None) -> DspReport:
    """Complete offline chain from four detector streams to BER and Q^2.

    ``capture`` is a ``receiver.Capture`` (or an array of four real streams
    with ``capture_rate``). Both tributaries are counted; training blocks
    are excluded from the error count.
    """
    if hasattr(capture, "streams"):
        streams, rate = capture.streams, capture.sample_rate
    else:
        streams, rate = np.asarray(capture), capture_rate
    fmt = frame.format
    N = len(frame)
    x = np.vstack([streams[0] + 1j * streams[1], streams[2] + 1j * streams[3]])
    x = resample_array(x, rate, cfg.sps * cfg.symbol_rate)
    if x.shape[1] != N * cfg.sps:
        raise ValueError("capture does not hold exactly one frame period")
    x = x / np.sqrt(np.mean(np.abs(x) ** 2))
    if cfg.cd_D * cfg.cd_length_km:
        dp = DualPolWaveform.from_array(x, cfg.sps * cfg.symbol_rate)
        x = compensate_cd(dp, cfg.cd_D, cfg.cd_length_km).as_array()
    if cfg.matched_filter:
        x = circular_filter(x, design_rrc(cfg.rolloff, cfg.rrc_span, cfg.sps))

    sync = frame_sync(x, frame, cfg.sps, cfg.pol_delay_symbols, cfg.symbol_rate, cfg.sync_psr_min)
    x = np.roll(x, -sync.offset, axis=1)
    t = np.arange(x.shape[1]) / (cfg.sps * cfg.symbol_rate)
    x = x * np.exp(-2j * np.pi * sync.freq_offset_hz * t)

    y, mimo = mimo_equalize_da(x, frame, cfg)

    D = cfg.pol_delay_symbols
    tx_idx = np.vstack([level_index(frame.symbols, fmt), np.roll(level_index(frame.symbols, fmt), D)])
    train = np.vstack([frame.training_mask, np.roll(frame.training_mask, D)])
    ref_sym = np.vstack([frame.symbols, np.roll(frame.symbols, D)])

    tracks = []
    for p in range(2):
        z, track = bps_cpe(y[p], fmt.levels, cfg.bps_phases, cfg.bps_block)
        # bipolar ASK is pi-symmetric; the known training fixes the sign
        corr = np.sum(z.real[train[p]] * ref_sym[p, train[p]])
        if corr < 0:
            track = track + np.pi
        # unit-RMS output still carries the noise power; rescale so the
        # training levels land on the slicer grid
        y[p] = z * (np.sum(ref_sym[p, train[p]] ** 2) / corr)
        tracks.append(track)

    if cfg.dd_enabled:
        s4 = np.vstack([y[0].real, y[0].imag, y[1].real, y[1].imag])
        s4, _ = dd_equalize_4x4(s4, fmt.levels, cfg.dd_taps, cfg.dd_mu, cfg.dd_passes, reference=ref_sym, known=train)
        y = np.vstack([s4[0] + 1j * s4[1], s4[2] + 1j * s4[3]])
        for p in range(2):
            y[p] *= np.sum(ref_sym[p, train[p]] ** 2) / np.sum(y[p].real[train[p]] * ref_sym[p, train[p]])

    errors = 0
    total = 0
    for p in range(2):
        payload = ~train[p]
        dec = decide_inphase(y[p, payload], fmt)
        ref = fmt.gray_table[tx_idx[p, payload]].reshape(-1)
        _, e, n = count_ber(dec, ref)
        errors += e
        total += n
    ber = errors / total
    q2 = ber_to_q2(ber) if 0 < ber < 0.5 else None
    hist = {name: _histograms(y[p, ~train[p]], tx_idx[p, ~train[p]], fmt) for p, name in enumerate("xy")}
    return DspReport(ber, q2, total, errors, hist, np.array(tracks), y, tx_idx, sync, mimo)
