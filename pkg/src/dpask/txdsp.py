"""Transmit DSP: Gray-mapped bipolar m-ASK, framing, pulse shaping, pre-distortion, DAC."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .signal import SYMBOL_RATE, Waveform, clip_quantize, generate_prbs, resample

FAST_RADICES = (2, 3, 5, 7)


@dataclass(frozen=True)
class ModFormat:
    """Bipolar m-ASK alphabet with a binary-reflected Gray labelling."""

    m: int

    def __post_init__(self):
        if self.m not in (2, 4, 8):
            raise ValueError("m must be 2, 4 or 8")

    @property
    def bits_per_symbol(self) -> int:
        return int(np.log2(self.m))

    @cached_property
    def levels(self) -> np.ndarray:
        raw = np.arange(-(self.m - 1), self.m, 2, dtype=float)
        return raw / np.sqrt(np.mean(raw**2))

    @property
    def outer(self) -> float:
        return float(self.levels[-1])

    @cached_property
    def gray_table(self) -> np.ndarray:
        """Row ``i`` holds the bit pattern (MSB first) of level index ``i``."""
        idx = np.arange(self.m)
        code = idx ^ (idx >> 1)
        shifts = np.arange(self.bits_per_symbol - 1, -1, -1)
        return ((code[:, None] >> shifts) & 1).astype(np.uint8)

    @cached_property
    def _index_of_code(self) -> np.ndarray:
        inv = np.empty(self.m, dtype=int)
        idx = np.arange(self.m)
        inv[idx ^ (idx >> 1)] = idx
        return inv

    @property
    def name(self) -> str:
        return f"{self.m}ask"

    @classmethod
    def parse(cls, s) -> "ModFormat":
        if isinstance(s, ModFormat):
            return s
        s = str(s).lower().removesuffix("ask")
        return cls(int(s))


def map_bits_to_ask(bits, fmt: ModFormat) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    k = fmt.bits_per_symbol
    if bits.size % k:
        raise ValueError(f"bit count {bits.size} not divisible by {k}")
    words = bits.reshape(-1, k)
    code = words @ (1 << np.arange(k - 1, -1, -1))
    return fmt.levels[fmt._index_of_code[code]]


def levels_to_bits(index: np.ndarray, fmt: ModFormat) -> np.ndarray:
    return fmt.gray_table[np.asarray(index)].reshape(-1)


@dataclass(frozen=True)
class HeaderConfig:
    """Training layout: a preamble, then one block after every ``block_spacing`` payload symbols.

    The frame is padded with further known symbols so its length is a
    multiple of ``length_multiple`` with only small prime factors, which
    keeps DAC/ADC rate conversions exact and FFTs fast.
    """

    payload_symbols: int = 34676
    preamble_len: int = 64
    block_len: int = 32
    block_spacing: int = 2048
    length_multiple: int = 16
    prbs_order: int = 5
    prbs_seed: int = 0b11111
    training_level: str = "outer"  # "outer" or "unit" (+-1)

    def layout(self) -> tuple[list[tuple[int, int]], int]:
        """Return the training ``(offset, length)`` list and the frame length."""
        if min(self.preamble_len, self.block_len, self.block_spacing, self.payload_symbols) <= 0:
            raise ValueError("header layout sizes must be positive")
        blocks = [(0, self.preamble_len)]
        pos = self.preamble_len
        left = self.payload_symbols
        while left > self.block_spacing:
            pos += self.block_spacing
            left -= self.block_spacing
            blocks.append((pos, self.block_len))
            pos += self.block_len
        pos += left
        total = _next_smooth(pos, self.length_multiple)
        if total > pos:
            blocks.append((pos, total - pos))
        return blocks, total


def _next_smooth(n: int, multiple: int) -> int:
    k = -(-n // multiple) * multiple
    while True:
        r = k
        for p in FAST_RADICES:
            while r % p == 0:
                r //= p
        if r == 1:
            return k
        k += multiple


def check_layout(header_map, total: int) -> None:
    spans = sorted(header_map)
    end = 0
    for off, ln in spans:
        if ln <= 0 or off < end or off + ln > total:
            raise ValueError(f"invalid or overlapping header block at {off}")
        end = off + ln


@dataclass
class SymbolFrame:
    payload_symbols: np.ndarray
    payload_bits: np.ndarray
    header_map: list
    training_symbols: np.ndarray
    format: ModFormat
    symbols: np.ndarray = field(repr=False)
    seed: int | None = None
    prbs_seed: int = 0b11111

    def __len__(self):
        return self.symbols.size

    @property
    def training_level(self) -> str:
        return "outer" if np.isclose(abs(self.training_symbols[0]), self.format.outer) else "unit"

    @cached_property
    def training_mask(self) -> np.ndarray:
        mask = np.zeros(self.symbols.size, dtype=bool)
        for off, ln in self.header_map:
            mask[off : off + ln] = True
        return mask

    @property
    def payload_index(self) -> np.ndarray:
        return np.flatnonzero(~self.training_mask)

    def template(self) -> np.ndarray:
        """Frame-length sequence holding training symbols and zeros elsewhere."""
        out = np.zeros(self.symbols.size)
        out[self.training_mask] = self.symbols[self.training_mask]
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": self.format.name,
                "seed": self.seed,
                "prbs_seed": self.prbs_seed,
                "frame_symbols": int(self.symbols.size),
                "header_map": [[int(o), int(n)] for o, n in self.header_map],
                "payload_bits": np.packbits(self.payload_bits).tobytes().hex(),
                "payload_bit_count": int(self.payload_bits.size),
                "training_level": self.training_level,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SymbolFrame":
        d = json.loads(text)
        fmt = ModFormat.parse(d["format"])
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(d["payload_bits"]), dtype=np.uint8))
        bits = bits[: d["payload_bit_count"]]
        return _assemble(
            bits, fmt, [tuple(b) for b in d["header_map"]], d["frame_symbols"], d["prbs_seed"], d["seed"],
            training_level=d.get("training_level", "outer"),
        )


def build_frame(payload_bits, fmt: ModFormat, header_cfg: HeaderConfig | None = None, seed=None) -> SymbolFrame:
    """Interleave payload symbols with binary PRBS training blocks (outer levels by default)."""
    cfg = header_cfg or HeaderConfig()
    payload_bits = np.asarray(payload_bits, dtype=np.uint8)
    if payload_bits.size != cfg.payload_symbols * fmt.bits_per_symbol:
        raise ValueError(
            f"expected {cfg.payload_symbols * fmt.bits_per_symbol} payload bits, got {payload_bits.size}"
        )
    header_map, total = cfg.layout()
    return _assemble(payload_bits, fmt, header_map, total, cfg.prbs_seed, seed, cfg.prbs_order, cfg.training_level)


def _assemble(bits, fmt, header_map, total, prbs_seed, seed, prbs_order=5, training_level="outer") -> SymbolFrame:
    check_layout(header_map, total)
    n_train = sum(n for _, n in header_map)
    if (total - n_train) * fmt.bits_per_symbol != bits.size:
        raise ValueError("payload bits do not fill the frame")
    # one continuous PRBS stream feeds the training blocks in order
    train_bits = generate_prbs(prbs_order, prbs_seed, n_train)
    # "unit" (+-1) keeps the header at the payload's mean power; the outer
    # levels raise frame power slightly above payload power
    if training_level == "outer":
        amp = fmt.outer
    elif training_level == "unit":
        amp = 1.0
    else:
        raise ValueError(f"unknown training level {training_level!r}")
    train = np.where(train_bits == 1, amp, -amp)
    payload = map_bits_to_ask(bits, fmt)
    symbols = np.empty(total)
    mask = np.zeros(total, dtype=bool)
    for off, ln in header_map:
        mask[off : off + ln] = True
    order = sorted(range(len(header_map)), key=lambda i: header_map[i][0])
    pos = 0
    for i in order:
        off, ln = header_map[i]
        symbols[off : off + ln] = train[pos : pos + ln]
        pos += ln
    symbols[~mask] = payload
    return SymbolFrame(payload, bits, list(header_map), train, fmt, symbols, seed, prbs_seed)


def random_frame(fmt: ModFormat, rng, header_cfg: HeaderConfig | None = None, seed=None) -> SymbolFrame:
    cfg = header_cfg or HeaderConfig()
    bits = rng.integers(0, 2, cfg.payload_symbols * fmt.bits_per_symbol, dtype=np.uint8)
    return build_frame(bits, fmt, cfg, seed)


def shape_pulse(frame: SymbolFrame | np.ndarray, sps: int, rrc: np.ndarray, symbol_rate: float = SYMBOL_RATE) -> Waveform:
    """Circular RRC pulse shaping; pulse ``k`` is centred on sample ``k * sps``."""
    if sps < 2:
        raise ValueError("sps must be >= 2")
    symbols = frame.symbols if isinstance(frame, SymbolFrame) else np.asarray(frame)
    n = symbols.size * sps
    up = np.zeros(n, dtype=complex)
    up[::sps] = symbols
    kernel = np.zeros(n)
    half = (rrc.size - 1) // 2
    kernel[: half + 1] = rrc[half:]
    kernel[n - half :] = rrc[:half]
    out = np.fft.ifft(np.fft.fft(up) * np.fft.fft(kernel))
    if np.isrealobj(symbols):
        out = out.real
    return Waveform(out, sps * symbol_rate)


def circular_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase circular FIR filtering along the last axis (odd, centred taps)."""
    n = x.shape[-1]
    half = (taps.size - 1) // 2
    kernel = np.zeros(n)
    kernel[: half + 1] = taps[half:]
    kernel[n - half :] = taps[:half]
    return np.fft.ifft(np.fft.fft(x, axis=-1) * np.fft.fft(kernel), axis=-1)


def predistort(w: Waveform, cascade, max_boost_db: float | None = 20.0) -> Waveform:
    """Zero-forcing inverse of ``cascade`` with a magnitude cap and minimum phase.

    ``cascade`` is any object exposing ``evaluate(freqs)`` (e.g. a
    ``FreqResponse``); the response of a real electrical path is assumed, so
    negative frequencies see the conjugate.
    """
    f = w.freqs()
    h = cascade.evaluate(np.abs(f))
    h = np.where(f < 0, np.conj(h), h)
    mag = np.abs(h)
    if max_boost_db is None:
        if np.any(mag < 1e-12):
            raise ValueError("cascade has in-band zeros and no boost cap")
        inv = 1 / mag
    else:
        with np.errstate(divide="ignore"):
            inv = np.minimum(np.where(mag > 0, 1 / np.maximum(mag, 1e-300), np.inf), 10 ** (max_boost_db / 20))
    g = minimum_phase_spectrum(inv)
    out = np.fft.ifft(np.fft.fft(w.samples) * g)
    if np.all(w.samples.imag == 0):
        out = out.real
    return w.with_samples(out)


def minimum_phase_spectrum(mag: np.ndarray) -> np.ndarray:
    """Minimum-phase spectrum with magnitude ``mag`` on a full FFT grid (cepstral method)."""
    n = mag.size
    ceps = np.fft.ifft(np.log(np.maximum(mag, 1e-300))).real
    fold = np.zeros(n)
    fold[0] = ceps[0]
    half = n // 2
    if n % 2 == 0:
        fold[1:half] = 2 * ceps[1:half]
        fold[half] = ceps[half]
    else:
        fold[1 : half + 1] = 2 * ceps[1 : half + 1]
    return np.exp(np.fft.fft(fold))


@dataclass(frozen=True)
class DacParams:
    sample_rate: float = 84e9
    enob: float | None = 5.0
    clip_sigma: float = 3.3
    include_zoh: bool = True

    def __post_init__(self):
        if self.enob is not None and np.isfinite(self.enob) and self.enob <= 1:
            raise ValueError("enob must exceed 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def response(self):
        """Zero-order-hold response of the converter as a ``FreqResponse``."""
        from .frontend import FreqResponse

        f = np.linspace(0, 4 * self.sample_rate, 4097)
        g = np.sinc(f / self.sample_rate) if self.include_zoh else np.ones_like(f)
        return FreqResponse(f, g.astype(complex), min_phase=False)


def dac_convert(w: Waveform, p: DacParams, rng=None) -> Waveform:
    """Resample to the DAC clock, clip, quantize, and apply the ZOH droop."""
    out = resample(w, p.sample_rate)
    x = out.samples
    real = np.all(x.imag == 0)
    y = clip_quantize(x.real, p.enob, p.clip_sigma, rng)
    if not real:
        y = y + 1j * clip_quantize(x.imag, p.enob, p.clip_sigma, rng)
    if p.include_zoh:
        f = np.fft.fftfreq(y.size, 1 / p.sample_rate)
        y = np.fft.ifft(np.fft.fft(y) * np.sinc(f / p.sample_rate))
        if real:
            y = y.real
    return out.with_samples(y)


def gross_rate(fmt: ModFormat, symbol_rate: float = SYMBOL_RATE) -> float:
    return symbol_rate * fmt.bits_per_symbol * 2
