"""Experiment orchestration: link configuration, sweeps, AWGN theory and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from scipy.stats import norm

from . import __version__
from .channel import (
    OSNR_REF_BW,
    AmpParams,
    FiberParams,
    amplify_with_ase,
    load_noise_to_osnr,
    measure_osnr,
    propagate_ssmf,
    set_power,
)
from .frontend import (
    CHIP_ANCHORS,
    FreqResponse,
    LaserModel,
    MzmParams,
    apply_driver,
    chip_response_model,
    load_s21_csv,
    mzm_modulate,
    polmux,
)
from .receiver import AdcParams, adc_capture, coherent_detect, optical_bandpass, random_jones, rotate_polarization
from .rxdsp import DspConfig, DspReport, ber_to_q2, decide_inphase, run_receiver
from .signal import SYMBOL_RATE, Waveform, design_rrc, estimate_psd, resample
from .txdsp import DacParams, HeaderConfig, ModFormat, dac_convert, predistort, random_frame, shape_pulse

log = logging.getLogger(__name__)

SD_FEC_Q2 = 6.25
HD_FEC_Q2 = 8.53
MAX_TX_OSNR_DB = {2: 34.0, 4: 32.5, 8: 32.9}
# measured hardware results, kept as metadata only (fiber parameters unknown)
HARDWARE_REFERENCE = {
    "optimum_launch_dbm": 7.4,
    "peak_q2_db": 8.9,
    "b2b_penalties_db": {"2": 0.2, "4": 1.4, "8": 3.2},
    "max_tx_osnr_db": {"2": 34.0, "4": 32.5, "8": 32.9},
}
CSV_COLUMNS = ["sweep_value", "osnr_db", "launch_dbm", "ber", "q2_db", "errors", "bits_counted", "seed"]
CSV_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class SweepPointError(RuntimeError):
    def __init__(self, value, seed, cause):
        super().__init__(f"sweep point {value} (seed {seed}) failed: {cause}")
        self.value = value
        self.seed = seed


@dataclass
class SweepSpec:
    kind: str = "osnr"  # "osnr" or "launch"
    values: list = field(default_factory=list)
    seed: int = 1
    min_bits: int = 100_000
    min_errors: int = 100
    max_bits: int = 10_000_000
    max_frames: int | None = None


@dataclass
class LinkConfig:
    """Every tunable of one experiment; nested parameter blocks mirror the modules."""

    format: int = 8
    symbol_rate: float = SYMBOL_RATE
    header: HeaderConfig = field(default_factory=HeaderConfig)
    rolloff: float = 0.1
    rrc_span: int = 64
    dsp_sps: int = 2
    sim_sps: int = 4
    predistort: bool = True
    max_boost_db: float = 20.0
    dac: DacParams = field(default_factory=DacParams)
    chip_anchors: list = field(default_factory=lambda: [list(a) for a in CHIP_ANCHORS])
    chip_csv: str | None = None
    mzm: MzmParams = field(default_factory=MzmParams)
    laser: LaserModel = field(default_factory=LaserModel)
    lo: LaserModel = field(default_factory=LaserModel)
    pol_delay_symbols: int = 1094
    split_loss_db: float = 3.0
    tx_osnr_db: dict = field(default_factory=lambda: dict(MAX_TX_OSNR_DB))
    random_sop: bool = True
    rx_filter_nm: float = 1.4
    fiber: FiberParams = field(default_factory=FiberParams)
    preamp: AmpParams = field(default_factory=AmpParams)
    adc: AdcParams = field(default_factory=AdcParams)
    dsp: DspConfig = field(default_factory=DspConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    @property
    def fmt(self) -> ModFormat:
        return ModFormat(self.format)

    def validate(self) -> "LinkConfig":
        ModFormat(self.format)
        if not self.sweep.values:
            raise ConfigError("sweep list is empty")
        if any(b <= a for a, b in zip(self.sweep.values, self.sweep.values[1:])):
            raise ConfigError("sweep values must be strictly ascending")
        if self.sweep.kind not in ("osnr", "launch"):
            raise ConfigError(f"unknown sweep kind {self.sweep.kind!r}")
        self.header.layout()
        return self

    def max_tx_osnr(self) -> float:
        v = self.tx_osnr_db.get(self.format, self.tx_osnr_db.get(str(self.format)))
        return float("inf") if v is None else float(v)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinkConfig":
        return _from_dict(cls, d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def ideal(self) -> "LinkConfig":
        """Copy with every hardware impairment disabled (ASE and fiber remain)."""
        return dataclasses.replace(
            self,
            predistort=False,
            dac=dataclasses.replace(self.dac, enob=None, include_zoh=False),
            chip_anchors=[[0.0, 0.0]],
            chip_csv=None,
            mzm=dataclasses.replace(self.mzm, transfer="linear", chirp_alpha=0.0),
            laser=dataclasses.replace(self.laser, linewidth_hz=0.0),
            lo=dataclasses.replace(self.lo, linewidth_hz=0.0, freq_offset_hz=0.0),
            tx_osnr_db={},
            adc=dataclasses.replace(self.adc, enob=None, analog_bw_hz=None),
        )


def _from_dict(cls, d):
    if not dataclasses.is_dataclass(cls):
        return d
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in d.items():
        if k not in hints:
            raise ConfigError(f"unknown config key {cls.__name__}.{k}")
        ftype = _FIELD_TYPES.get((cls, k))
        kwargs[k] = _from_dict(ftype, v) if ftype and isinstance(v, dict) else v
    if cls is LinkConfig and "tx_osnr_db" in kwargs:
        kwargs["tx_osnr_db"] = {int(k): v for k, v in kwargs["tx_osnr_db"].items()}
    return cls(**kwargs)


_FIELD_TYPES = {
    (LinkConfig, "header"): HeaderConfig,
    (LinkConfig, "dac"): DacParams,
    (LinkConfig, "mzm"): MzmParams,
    (LinkConfig, "laser"): LaserModel,
    (LinkConfig, "lo"): LaserModel,
    (LinkConfig, "fiber"): FiberParams,
    (LinkConfig, "preamp"): AmpParams,
    (LinkConfig, "adc"): AdcParams,
    (LinkConfig, "dsp"): DspConfig,
    (LinkConfig, "sweep"): SweepSpec,
}


def load_config(path) -> LinkConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    return LinkConfig.from_dict(data)


# ----------------------------------------------------------------------------
# simulation of one frame


def _rng(cfg: LinkConfig, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.sweep.seed, spawn_key=tuple(int(k) for k in key)))


def chip_response(cfg: LinkConfig) -> FreqResponse:
    if cfg.chip_csv:
        return load_s21_csv(cfg.chip_csv)
    return chip_response_model([tuple(a) for a in cfg.chip_anchors])


@dataclass
class TxResult:
    frame: object
    optical: object
    electrical: Waveform


def transmit(cfg: LinkConfig, frame_seed: int) -> TxResult:
    """Bits to the dual-polarization optical field at the transmitter OSNR."""
    fmt = cfg.fmt
    rng_bits, rng_dac, rng_laser, rng_noise = (_rng(cfg, frame_seed, 0, i) for i in range(4))
    frame = random_frame(fmt, rng_bits, cfg.header, seed=frame_seed)
    rrc = design_rrc(cfg.rolloff, cfg.rrc_span, cfg.dsp_sps)
    w = shape_pulse(frame, cfg.dsp_sps, rrc, cfg.symbol_rate)
    chip = chip_response(cfg)
    if cfg.predistort:
        w = predistort(w, cfg.dac.response().cascade(chip), cfg.max_boost_db)
    w = w.with_samples(w.samples / np.sqrt(w.power))
    electrical = dac_convert(w, cfg.dac, rng_dac)
    sim = resample(electrical, cfg.sim_sps * cfg.symbol_rate)
    sim = sim.with_samples(sim.samples.real / np.sqrt(sim.power))
    drive = apply_driver(sim, cfg.mzm, chip)
    field_ = mzm_modulate(drive, cfg.laser, cfg.mzm, rng_laser)
    dp = polmux(field_, cfg.pol_delay_symbols, cfg.split_loss_db, cfg.symbol_rate)
    dp = load_noise_to_osnr(dp, cfg.max_tx_osnr(), rng_noise)
    return TxResult(frame, dp, electrical)


def receive(cfg: LinkConfig, optical, frame, frame_seed: int, point_index: int, cd_length_km: float = 0.0) -> DspReport:
    rng_sop, rng_lo, rng_adc = (_rng(cfg, frame_seed, 1, point_index, i) for i in range(3))
    sig = optical_bandpass(optical, cfg.rx_filter_nm)
    J = random_jones(rng_sop) if cfg.random_sop else np.eye(2)
    sig = rotate_polarization(sig, J)
    cap = coherent_detect(sig, cfg.lo, rng_lo)
    cap = adc_capture(cap, cfg.adc, rng_adc)
    # the training MSE cannot fall below the ASE floor; widen the
    # convergence threshold by the expected noise-limited MSE
    snr = 10 ** (osnr_to_snr_db(measure_osnr(optical), cfg.symbol_rate) / 10)
    dsp = dataclasses.replace(
        cfg.dsp,
        mse_threshold=cfg.dsp.mse_threshold + 1.5 / snr,
        sps=cfg.dsp_sps,
        symbol_rate=cfg.symbol_rate,
        rolloff=cfg.rolloff,
        pol_delay_symbols=cfg.pol_delay_symbols,
        cd_D=cfg.fiber.dispersion_D if cd_length_km else 0.0,
        cd_length_km=cd_length_km,
    )
    return run_receiver(cap, frame, dsp)


def simulate_b2b_point(cfg: LinkConfig, osnr_db: float, frame_seed: int, point_index: int, tx: TxResult | None = None):
    tx = tx or transmit(cfg, frame_seed)
    if osnr_db > cfg.max_tx_osnr() + 1e-9:
        raise ConfigError(f"OSNR {osnr_db} dB above the transmitter maximum {cfg.max_tx_osnr()} dB")
    sig = load_noise_to_osnr(tx.optical, osnr_db, _rng(cfg, frame_seed, 2, point_index))
    rep = receive(cfg, sig, tx.frame, frame_seed, point_index)
    return rep, measure_osnr(sig), sig.power_dbm


def simulate_link_point(cfg: LinkConfig, launch_dbm: float, frame_seed: int, point_index: int, tx: TxResult | None = None):
    tx = tx or transmit(cfg, frame_seed)
    sig = set_power(tx.optical, launch_dbm)
    sig = propagate_ssmf(sig, cfg.fiber)
    span_loss = cfg.fiber.alpha_db_km * cfg.fiber.length_km
    amp = dataclasses.replace(cfg.preamp, gain_db=max(cfg.preamp.gain_db, span_loss))
    sig = amplify_with_ase(sig, amp, _rng(cfg, frame_seed, 2, point_index))
    rep = receive(cfg, sig, tx.frame, frame_seed, point_index, cd_length_km=cfg.fiber.length_km)
    return rep, measure_osnr(sig), launch_dbm


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def points(self) -> list:
        return sorted({r["sweep_value"] for r in self.rows})

    def aggregate(self) -> list[dict]:
        """Pool errors and bits of all seeds per sweep point."""
        out = []
        for v in self.points():
            rs = [r for r in self.rows if r["sweep_value"] == v]
            errors = sum(r["errors"] for r in rs)
            bits = sum(r["bits_counted"] for r in rs)
            ber = errors / bits
            out.append(
                {
                    "sweep_value": v,
                    "osnr_db": float(np.mean([r["osnr_db"] for r in rs])),
                    "launch_dbm": float(np.mean([r["launch_dbm"] for r in rs])),
                    "ber": ber,
                    "q2_db": ber_to_q2(ber) if 0 < ber < 0.5 else None,
                    "errors": errors,
                    "bits_counted": bits,
                    "seeds": len(rs),
                    "below_resolution": errors < self.metadata.get("min_errors", 100),
                }
            )
        return out

    def q2_curve(self) -> tuple[np.ndarray, np.ndarray]:
        agg = [a for a in self.aggregate() if a["q2_db"] is not None]
        key = "osnr_db" if self.metadata.get("kind", "osnr") == "osnr" else "launch_dbm"
        return np.array([a[key] for a in agg]), np.array([a["q2_db"] for a in agg])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in sorted(self.rows, key=lambda r: (r["sweep_value"], r["seed"])):
            w.writerow([_fmt_cell(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _row(value, seed, rep: DspReport, osnr, launch):
    return {
        "sweep_value": float(value),
        "osnr_db": float(osnr),
        "launch_dbm": float(launch),
        "ber": float(rep.ber),
        "q2_db": None if rep.q2_db is None else float(rep.q2_db),
        "errors": int(rep.errors),
        "bits_counted": int(rep.bits_counted),
        "seed": int(seed),
    }


def _point_task(args):
    cfg, kind, value, seed, index = args
    sim = simulate_b2b_point if kind == "osnr" else simulate_link_point
    try:
        rep, osnr, launch = sim(cfg, value, seed, index)
    except Exception as exc:  # annotate and propagate
        raise SweepPointError(value, seed, exc) from exc
    return _row(value, seed, rep, osnr, launch)


def _run_sweep(cfg: LinkConfig, kind: str, workers: int = 1) -> MetricsTable:
    cfg.validate()
    if cfg.sweep.kind != kind:
        cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, kind=kind))
    sw = cfg.sweep
    table = MetricsTable(
        metadata={
            "config_hash": cfg.config_hash(),
            "tool_version": __version__,
            "kind": kind,
            "format": cfg.format,
            "min_errors": sw.min_errors,
            "csv_schema": CSV_SCHEMA_VERSION,
            "hardware_reference": HARDWARE_REFERENCE,
        }
    )
    simulate = simulate_b2b_point if kind == "osnr" else simulate_link_point
    tx_cache: dict[int, TxResult] = {}
    pending = list(enumerate(sw.values))
    seed = 0
    state = {i: [0, 0] for i, _ in pending}  # errors, bits
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while pending:
            if sw.max_frames is not None and seed >= sw.max_frames:
                break
            if pool is None:
                if seed not in tx_cache:
                    tx_cache.clear()
                    tx_cache[seed] = transmit(cfg, seed)
                results = []
                for i, v in pending:
                    try:
                        rep, osnr, launch = simulate(cfg, v, seed, i, tx_cache[seed])
                    except Exception as exc:
                        raise SweepPointError(v, seed, exc) from exc
                    results.append((i, _row(v, seed, rep, osnr, launch)))
            else:
                rows = pool.map(_point_task, [(cfg, kind, v, seed, i) for i, v in pending])
                results = list(zip([i for i, _ in pending], rows))
            for i, row in results:
                table.rows.append(row)
                state[i][0] += row["errors"]
                state[i][1] += row["bits_counted"]
                log.info("%s=%s seed=%d ber=%.3g", kind, row["sweep_value"], seed, row["ber"])
            seed += 1
            pending = [
                (i, v)
                for i, v in pending
                if state[i][1] < sw.max_bits
                and (state[i][1] < sw.min_bits or state[i][0] < sw.min_errors)
            ]
    finally:
        if pool is not None:
            pool.shutdown()
    return table


def run_b2b_sweep(cfg: LinkConfig, workers: int = 1) -> MetricsTable:
    """Back-to-back Q^2 versus OSNR; noise loading replaces the fiber."""
    return _run_sweep(cfg, "osnr", workers)


def run_link_sweep(cfg: LinkConfig, workers: int = 1) -> MetricsTable:
    """Q^2 versus launch power over the configured fiber span."""
    return _run_sweep(cfg, "launch", workers)


# ----------------------------------------------------------------------------
# theory, penalties and rates


def osnr_to_snr_db(osnr_db, symbol_rate: float = SYMBOL_RATE):
    """Per-polarization SNR for a dual-pol signal: ``OSNR * 12.5 GHz / R_s``."""
    return np.asarray(osnr_db) + 10 * np.log10(OSNR_REF_BW / symbol_rate)


def theory_ber(osnr_db, fmt: ModFormat, symbol_rate: float = SYMBOL_RATE):
    m = fmt.m
    snr = 10 ** (osnr_to_snr_db(osnr_db, symbol_rate) / 10)
    return 2 * (m - 1) / (m * np.log2(m)) * norm.sf(np.sqrt(6 * snr / (m**2 - 1)))


def theory_q2(osnr_db, fmt: ModFormat, symbol_rate: float = SYMBOL_RATE):
    """AWGN Q^2 (dB) of Gray-coded bipolar m-ASK with in-phase-only decisions."""
    ber = theory_ber(osnr_db, fmt, symbol_rate)
    return ber_to_q2(ber)


def required_osnr(q2_db: float, fmt: ModFormat, symbol_rate: float = SYMBOL_RATE) -> float:
    """OSNR at which the AWGN theory reaches ``q2_db``."""
    f = lambda o: theory_q2(o, fmt, symbol_rate) - q2_db
    lo = -5.0
    hi = lo
    while f(hi) < 0:
        hi += 1.0
        if theory_ber(hi, fmt, symbol_rate) <= 1e-300:
            raise ValueError(f"{q2_db} dB-Q is beyond the numeric range of the theory curve")
    return brentq(f, lo, hi, xtol=1e-10)


def monte_carlo_q2(osnr_db: float, fmt: ModFormat, rng, n_symbols: int = 1_000_000, symbol_rate: float = SYMBOL_RATE):
    """Symbol-level AWGN simulation: map, add complex noise, decide on I only."""
    k = fmt.bits_per_symbol
    bits = rng.integers(0, 2, n_symbols * k, dtype=np.uint8)
    from .txdsp import map_bits_to_ask

    s = map_bits_to_ask(bits, fmt)
    snr = 10 ** (osnr_to_snr_db(osnr_db, symbol_rate) / 10)
    sigma = np.sqrt(1 / (2 * snr))
    r = s + sigma * (rng.standard_normal(s.size) + 1j * rng.standard_normal(s.size))
    errors = int(np.count_nonzero(decide_inphase(r, fmt) != bits))
    ber = errors / bits.size
    return ber_to_q2(ber), ber, errors


def compute_penalty(measured: MetricsTable | tuple, fmt: ModFormat, threshold_q2_db: float = SD_FEC_Q2, symbol_rate: float = SYMBOL_RATE) -> float:
    """OSNR penalty at ``threshold_q2_db`` relative to AWGN theory.

    ``measured`` is a ``MetricsTable`` or an ``(osnr_db, q2_db)`` pair of
    arrays. The crossing is found by monotone interpolation of OSNR versus
    Q^2 over the bracketing points.
    """
    if isinstance(measured, MetricsTable):
        osnr, q2 = measured.q2_curve()
    else:
        osnr, q2 = (np.asarray(a, dtype=float) for a in measured)
    order = np.argsort(osnr)
    osnr, q2 = osnr[order], q2[order]
    above = np.flatnonzero(q2 >= threshold_q2_db)
    below = np.flatnonzero(q2 < threshold_q2_db)
    if above.size == 0 or below.size == 0:
        raise ValueError(f"measured curve does not bracket {threshold_q2_db} dB-Q")
    hi = above[0]
    lo = hi - 1
    if lo < 0:
        raise ValueError(f"measured curve does not bracket {threshold_q2_db} dB-Q")
    # local monotone segment around the crossing
    a, b = max(lo - 1, 0), min(hi + 2, osnr.size)
    qs, os_ = q2[a:b], osnr[a:b]
    if np.all(np.diff(qs) > 0) and qs.size >= 3:
        x = float(PchipInterpolator(qs, os_)(threshold_q2_db))
    else:
        t = (threshold_q2_db - q2[lo]) / (q2[hi] - q2[lo])
        x = float(osnr[lo] + t * (osnr[hi] - osnr[lo]))
    return x - required_osnr(threshold_q2_db, fmt, symbol_rate)


def rate_accounting(fmt: ModFormat, symbol_rate: float = SYMBOL_RATE, overhead_pct: float = 0.0) -> dict:
    if overhead_pct < 0:
        raise ValueError("overhead must be nonnegative")
    gross = symbol_rate * fmt.bits_per_symbol * 2
    return {"gross": gross, "net": gross / (1 + overhead_pct / 100)}


def q_margins(q2_db: float) -> dict:
    return {"sd_fec_margin_db": q2_db - SD_FEC_Q2, "hd_fec_margin_db": q2_db - HD_FEC_Q2}


# ----------------------------------------------------------------------------
# reports


def emit_reports(table: MetricsTable | None, out_dir, constellations=None, spectra=None, name: str = "sweep", summary: dict | None = None) -> list[Path]:
    """Write the sweep CSV, a JSON summary, constellation and PSD CSVs.

    Output is a pure function of its inputs so identical runs give
    byte-identical files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []

    def put(fname, text):
        p = out / fname
        try:
            p.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        written.append(p)

    doc = dict(summary or {})
    if table is not None:
        if not table.rows:
            raise ConfigError("refusing to report an empty sweep")
        put(f"{name}.csv", table.to_csv())
        agg = table.aggregate()
        doc.update({"metadata": table.metadata, "points": agg})
        peak = [a for a in agg if a["q2_db"] is not None]
        if peak:
            best = max(peak, key=lambda a: a["q2_db"])
            doc["best"] = {"sweep_value": best["sweep_value"], "q2_db": best["q2_db"], **q_margins(best["q2_db"])}
    put(f"{name}_summary.json", json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    for key, (rep, fmt) in sorted((constellations or {}).items()):
        put(f"constellation_{key}.csv", rep.constellation_csv(fmt))
    for key, spec in sorted((spectra or {}).items()):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["freq_hz", "psd_dbm_per_hz"])
        db = spec.to_db()
        for f, p in zip(db.freq_bins, db.psd):
            w.writerow([f"{f:.6e}", f"{p:.6f}"])
        put(f"psd_{key}.csv", buf.getvalue())
    return written


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def tx_spectrum(cfg: LinkConfig, resolution_bw: float = 100e6):
    """Optical PSD of the X polarization at the transmitter."""
    tx = transmit(cfg, 0)
    return estimate_psd(tx.optical.pol_x, resolution_bw)
