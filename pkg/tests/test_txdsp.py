import itertools
import json

import numpy as np
import pytest

from dpask.frontend import CHIP_ANCHORS, FreqResponse, chip_response_model
from dpask.rxdsp import decide_inphase
from dpask.signal import Waveform, design_rrc, estimate_psd, resample
from dpask.txdsp import (
    DacParams,
    HeaderConfig,
    ModFormat,
    SymbolFrame,
    build_frame,
    circular_filter,
    dac_convert,
    gross_rate,
    map_bits_to_ask,
    predistort,
    random_frame,
    shape_pulse,
)

FORMATS = [ModFormat(m) for m in (2, 4, 8)]


@pytest.mark.parametrize("fmt", FORMATS, ids=lambda f: f.name)
def test_levels_have_unit_mean_power(fmt):
    assert abs(np.mean(fmt.levels**2) - 1) < 1e-12
    assert np.allclose(fmt.levels, -fmt.levels[::-1])


def test_mapping_examples():
    assert np.array_equal(map_bits_to_ask([0, 1], ModFormat(2)), [-1.0, 1.0])
    out4 = map_bits_to_ask([0, 0, 0, 1, 1, 1, 1, 0], ModFormat(4))
    assert np.allclose(out4, np.array([-3, -1, 1, 3]) / np.sqrt(5), atol=1e-15)
    out8 = map_bits_to_ask([0, 0, 0, 1, 0, 0], ModFormat(8))
    assert np.allclose(out8, np.array([-7, 7]) / np.sqrt(21), atol=1e-15)


def test_mapping_rejects_ragged_bits():
    with pytest.raises(ValueError):
        map_bits_to_ask([0, 1, 1], ModFormat(4))


@pytest.mark.parametrize("fmt", FORMATS, ids=lambda f: f.name)
def test_gray_neighbours_differ_in_one_bit(fmt):
    t = fmt.gray_table
    assert np.all(np.sum(t[1:] != t[:-1], axis=1) == 1)
    assert len({tuple(r) for r in t}) == fmt.m


@pytest.mark.parametrize("fmt", FORMATS, ids=lambda f: f.name)
def test_map_then_decide_round_trip_exhaustive(fmt):
    k = fmt.bits_per_symbol
    bits = np.array(list(itertools.product([0, 1], repeat=k)), dtype=np.uint8).reshape(-1)
    assert np.array_equal(decide_inphase(map_bits_to_ask(bits, fmt), fmt), bits)


def test_default_frame_layout():
    fr = random_frame(ModFormat(8), np.random.default_rng(0))
    assert fr.payload_symbols.size == 34676
    assert len(fr) == 35280
    assert fr.header_map[0] == (0, 64)
    assert fr.header_map[-1] == (35252, 28)
    assert fr.training_mask.sum() == 35280 - 34676
    assert fr.payload_bits.size == 34676 * 3


@pytest.mark.parametrize("fmt", FORMATS, ids=lambda f: f.name)
def test_training_uses_only_outer_levels(fmt):
    fr = random_frame(fmt, np.random.default_rng(1))
    vals = np.unique(fr.symbols[fr.training_mask])
    assert np.allclose(vals, [-fmt.outer, fmt.outer])
    assert fr.training_level == "outer"


def test_training_blocks_follow_one_prbs_stream():
    fr = random_frame(ModFormat(4), np.random.default_rng(2))
    t = fr.training_symbols > 0
    # a maximal-length sequence of period 31 repeats through every block
    assert np.array_equal(t[31:], t[:-31])


def test_unit_training_option():
    fr = random_frame(ModFormat(8), np.random.default_rng(3), HeaderConfig(training_level="unit"))
    assert np.allclose(np.unique(fr.symbols[fr.training_mask]), [-1, 1])
    with pytest.raises(ValueError):
        random_frame(ModFormat(8), np.random.default_rng(3), HeaderConfig(training_level="inner"))


def test_frame_is_deterministic_and_json_round_trips():
    bits = np.random.default_rng(4).integers(0, 2, 34676 * 2, dtype=np.uint8)
    a = build_frame(bits, ModFormat(4), seed=4)
    b = build_frame(bits, ModFormat(4), seed=4)
    assert np.array_equal(a.symbols, b.symbols)
    c = SymbolFrame.from_json(a.to_json())
    assert np.array_equal(c.symbols, a.symbols)
    assert c.header_map == a.header_map
    assert json.loads(a.to_json())["frame_symbols"] == 35280


def test_frame_rejects_wrong_bit_count_and_overlaps():
    with pytest.raises(ValueError):
        build_frame(np.zeros(100, np.uint8), ModFormat(2))
    from dpask.txdsp import _assemble

    with pytest.raises(ValueError):
        _assemble(np.zeros(10, np.uint8), ModFormat(2), [(0, 4), (2, 4)], 20, 31, None)


def test_small_layout_is_consistent():
    cfg = HeaderConfig(payload_symbols=5000, block_spacing=1000)
    blocks, total = cfg.layout()
    assert sum(n for _, n in blocks) + 5000 == total
    assert total % 16 == 0


def test_shaped_impulse_equals_rrc_taps():
    h = design_rrc(0.1, 64, 2)
    sym = np.zeros(200)
    sym[100] = 1.0
    w = shape_pulse(sym, 2, h)
    assert w.sample_rate == 128e9
    assert np.allclose(w.samples[200 - 64 : 200 + 65], h, atol=1e-12)


def _loopback(span):
    fr = random_frame(ModFormat(8), np.random.default_rng(5))
    h = design_rrc(0.1, span, 2)
    rx = circular_filter(shape_pulse(fr, 2, h).samples, h).real[::2]
    return fr.symbols, rx, h


@pytest.mark.xfail(strict=True, reason="span-64 truncation tails accumulate to ~4e-3 over a full frame")
def test_shape_then_matched_filter_recovers_symbols_to_1e_3():
    sym, rx, _ = _loopback(64)
    assert np.max(np.abs(rx - sym)) < 1e-3


def test_loopback_residual_is_truncation_isi():
    sym, rx, h = _loopback(64)
    rc = np.convolve(h, h)[::2]  # symbol-spaced cascade, centre at index 64
    isi = rc.copy()
    isi[64] = 0.0
    predicted = circular_filter(sym, isi).real
    assert abs(rc[64] - 1) < 1e-3
    assert np.max(np.abs(rx - sym * rc[64] - predicted)) < 1e-9
    err = rx - sym
    assert np.max(np.abs(err)) < 5e-3 and np.sqrt(np.mean(err**2)) < 1.5e-3


def test_shape_rejects_single_sample_per_symbol():
    with pytest.raises(ValueError):
        shape_pulse(np.ones(8), 1, design_rrc(0.1, 8, 1 + 1))


def test_occupied_bandwidth_at_minus_20_db():
    fr = random_frame(ModFormat(8), np.random.default_rng(6))
    w = shape_pulse(fr, 4, design_rrc(0.1, 64, 4))
    sp = estimate_psd(w, 200e6)
    db = 10 * np.log10(sp.psd / sp.psd.max())
    occupied = sp.freq_bins[db > -20]
    bw = occupied.max() - occupied.min()
    assert abs(bw - 70.4e9) < 1.5e9


def test_predistort_with_unity_cascade_is_identity():
    rng = np.random.default_rng(7)
    w = Waveform(rng.normal(size=1024), 128e9)
    assert np.allclose(predistort(w, FreqResponse.unity()).samples, w.samples, atol=1e-12)


def _tone(f0, fs=128e9, n=12800):
    return Waveform(np.cos(2 * np.pi * f0 * np.arange(n) / fs), fs)


def test_predistort_boosts_single_pole_corner_by_3_db():
    f = np.linspace(0, 500e9, 5001)
    pole = FreqResponse(f, 1 / np.sqrt(1 + (f / 11e9) ** 2) + 0j, min_phase=False)
    out = predistort(_tone(11e9), pole)
    gain_db = 20 * np.log10(np.std(out.samples) / np.std(_tone(11e9).samples))
    assert abs(gain_db - 10 * np.log10(2)) < 0.05


def test_predistort_caps_boost():
    f = np.linspace(0, 500e9, 5001)
    steep = FreqResponse(f, 10 ** (-f / 1e9 / 20) + 0j, min_phase=False)
    out = predistort(_tone(40e9), steep, max_boost_db=20.0)
    assert abs(20 * np.log10(np.std(out.samples) / np.std(_tone(40e9).samples)) - 20.0) < 0.05


def test_predistort_without_cap_rejects_zeros():
    f = np.linspace(0, 500e9, 501)
    g = np.where(f < 20e9, 1.0, 0.0) + 0j
    with pytest.raises(ValueError):
        predistort(_tone(1e9), FreqResponse(f, g, min_phase=False), max_boost_db=None)


@pytest.mark.parametrize("f0", [2e9, 11e9, 25e9, 33e9])
def test_predistort_then_cascade_restores_tones(f0):
    chip = chip_response_model(CHIP_ANCHORS)
    w = _tone(f0)
    from dpask.frontend import filter_waveform

    back = filter_waveform(predistort(w, chip), chip)
    assert abs(20 * np.log10(np.std(back.samples) / np.std(w.samples))) < 0.05


def test_predistorted_signal_ripple_below_1_db():
    fr = random_frame(ModFormat(8), np.random.default_rng(8))
    w = shape_pulse(fr, 2, design_rrc(0.1, 64, 2))
    dac = DacParams()
    cascade = chip_response_model(CHIP_ANCHORS).cascade(dac.response())
    from dpask.frontend import filter_waveform

    out = filter_waveform(predistort(w, cascade), cascade)
    a = estimate_psd(w, 500e6)
    b = estimate_psd(out, 500e6)
    band = np.abs(a.freq_bins) <= 35.2e9
    # only bins carrying signal (the RRC skirt reaches zero at 35.2 GHz)
    band &= a.psd > a.psd.max() * 1e-2
    ratio = 10 * np.log10(b.psd[band] / a.psd[band])
    assert ratio.max() - ratio.min() < 1.0


def test_dac_transparent_mode_equals_resample():
    rng = np.random.default_rng(9)
    w = Waveform(rng.normal(size=1280), 128e9)
    p = DacParams(enob=None, include_zoh=False)
    assert np.allclose(dac_convert(w, p).samples, resample(w, 84e9).samples, atol=1e-12)


def test_dac_zero_input_gives_zero():
    w = Waveform(np.zeros(1280), 128e9)
    assert np.all(dac_convert(w, DacParams()).samples == 0)


def test_dac_sndr_for_five_effective_bits():
    fr = random_frame(ModFormat(8), np.random.default_rng(10))
    w = shape_pulse(fr, 2, design_rrc(0.1, 64, 2))
    ref = resample(w, 84e9).samples.real
    p = DacParams(include_zoh=False)
    out = dac_convert(w, p, np.random.default_rng(11)).samples.real
    noise = np.mean((out - ref) ** 2)
    # referred to a full-scale sine at the clip level, as converter ENOB is specified
    full_scale = p.clip_sigma**2 * np.mean(ref**2) / 2
    sndr_fs = 10 * np.log10(full_scale / noise)
    assert 26 <= sndr_fs <= 34
    assert abs(sndr_fs - (6.02 * 5 + 1.76)) < 0.5
    # signal-referred value sits lower by the crest back-off
    sndr_sig = 10 * np.log10(np.mean(ref**2) / noise)
    assert abs(sndr_fs - sndr_sig - 10 * np.log10(p.clip_sigma**2 / 2)) < 1e-9


def test_dac_rejects_low_enob():
    with pytest.raises(ValueError):
        DacParams(enob=1.0)


def test_gross_rates():
    assert [gross_rate(f) for f in FORMATS] == [128e9, 256e9, 384e9]
