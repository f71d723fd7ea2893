import dataclasses
import json

import numpy as np
import pytest

from dpask import cli
from dpask.harness import (
    CSV_COLUMNS,
    HD_FEC_Q2,
    MAX_TX_OSNR_DB,
    SD_FEC_Q2,
    ConfigError,
    LinkConfig,
    MetricsTable,
    SweepSpec,
    compute_penalty,
    emit_reports,
    load_config,
    monte_carlo_q2,
    osnr_to_snr_db,
    q_margins,
    rate_accounting,
    required_osnr,
    run_b2b_sweep,
    simulate_b2b_point,
    theory_ber,
    theory_q2,
)
from dpask.txdsp import ModFormat

F2, F4, F8 = (ModFormat(m) for m in (2, 4, 8))


def _small_b2b(m=2, values=(8.0, 10.0), seed=3, frames=1):
    cfg = LinkConfig(format=m, sweep=SweepSpec(values=list(values), seed=seed, max_frames=frames)).ideal()
    return cfg


# ---------------------------------------------------------------- config


def test_config_dict_round_trip_and_hash():
    cfg = LinkConfig(format=4, sweep=SweepSpec(values=[10.0, 12.0]))
    back = LinkConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    other = dataclasses.replace(cfg, rx_filter_nm=1.2)
    assert other.config_hash() != cfg.config_hash()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        LinkConfig.from_dict({"formatt": 8})
    with pytest.raises(ConfigError):
        LinkConfig.from_dict({"fiber": {"lenght_km": 80}})


@pytest.mark.parametrize(
    "values, kind",
    [([], "osnr"), ([12.0, 10.0], "osnr"), ([1.0, 1.0], "launch"), ([1.0], "power")],
)
def test_config_validation(values, kind):
    cfg = LinkConfig(sweep=SweepSpec(kind=kind, values=values))
    with pytest.raises(ConfigError):
        cfg.validate()


def test_load_json_and_yaml(tmp_path):
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"format": 4, "fiber": {"length_km": 80.0}, "tx_osnr_db": {"4": 30.0}}))
    cfg = load_config(j)
    assert cfg.format == 4 and cfg.fiber.length_km == 80.0 and cfg.max_tx_osnr() == 30.0
    pytest.importorskip("yaml")
    y = tmp_path / "c.yaml"
    y.write_text("format: 2\nsweep:\n  kind: launch\n  values: [0, 2]\n")
    cfg = load_config(y)
    assert cfg.sweep.values == [0, 2] and cfg.fmt == F2


def test_default_transmitter_osnr_limits():
    assert MAX_TX_OSNR_DB == {2: 34.0, 4: 32.5, 8: 32.9}
    assert LinkConfig(format=4).max_tx_osnr() == 32.5
    assert LinkConfig(format=8).ideal().max_tx_osnr() == np.inf


def test_ideal_mode_disables_hardware():
    cfg = LinkConfig().ideal()
    assert cfg.dac.enob is None and not cfg.dac.include_zoh
    assert cfg.adc.enob is None and cfg.adc.analog_bw_hz is None
    assert cfg.laser.linewidth_hz == 0 and cfg.lo.linewidth_hz == 0
    assert cfg.mzm.transfer == "linear" and not cfg.predistort


def test_point_above_transmitter_osnr_rejected():
    cfg = LinkConfig(format=2)
    with pytest.raises(ConfigError):
        simulate_b2b_point(cfg, 35.0, 0, 0)


# ---------------------------------------------------------------- theory


def test_snr_convention():
    assert abs(osnr_to_snr_db(0.0) - 10 * np.log10(12.5 / 64)) < 1e-12


@pytest.mark.parametrize("fmt, osnr", [(F2, 10.3324), (F4, 16.7921), (F8, 22.5107)])
def test_required_osnr_anchors(fmt, osnr):
    assert abs(required_osnr(SD_FEC_Q2, fmt) - osnr) < 1e-3
    assert abs(theory_q2(osnr, fmt) - SD_FEC_Q2) < 1e-3


def test_theory_curve_spacing():
    o = [required_osnr(SD_FEC_Q2, f) for f in (F2, F4, F8)]
    assert abs(o[1] - o[0] - 6.46) < 0.1
    assert abs(o[2] - o[1] - 5.72) < 0.1


def test_binary_theory_closed_form():
    # m = 2: BER = Q(sqrt(2 SNR)) = erfc(sqrt(SNR)) / 2
    from scipy.special import erfc

    for o in (8.0, 10.0, 13.0):
        snr = 10 ** (osnr_to_snr_db(o) / 10)
        assert abs(theory_ber(o, F2) / (0.5 * erfc(np.sqrt(snr))) - 1) < 1e-12


@pytest.mark.parametrize("fmt", [F2, F8], ids=lambda f: f.name)
def test_monte_carlo_agrees_with_theory(fmt):
    o = required_osnr(8.0, fmt)
    q, _, errors = monte_carlo_q2(o, fmt, np.random.default_rng(0), 400_000)
    assert errors > 500
    assert abs(q - 8.0) < 0.1


def test_required_osnr_out_of_range():
    with pytest.raises(ValueError):
        required_osnr(60.0, F2)


def test_penalty_of_theory_is_zero():
    for fmt in (F2, F4, F8):
        o = np.arange(5.0, 30.0, 1.0)
        q = theory_q2(o, fmt)
        assert abs(compute_penalty((o, q), fmt)) < 0.05


def test_penalty_of_shifted_curve():
    o = np.arange(5.0, 30.0, 1.0)
    q = theory_q2(o - 1.4, F4)
    assert abs(compute_penalty((o, q), F4) - 1.4) < 0.05


def test_penalty_needs_bracket():
    o = np.arange(20.0, 30.0)
    with pytest.raises(ValueError):
        compute_penalty((o, theory_q2(o, F2)), F2)


def test_rate_accounting():
    r0 = rate_accounting(F8)
    assert r0["gross"] == 384e9 and r0["net"] == 384e9
    assert rate_accounting(F8, overhead_pct=28.0)["net"] == 300e9
    hd = rate_accounting(F8, overhead_pct=12.0)["net"]
    assert abs(hd - 384e9 / 1.12) < 1 and int(hd // 1e9) == 342
    assert rate_accounting(F2)["net"] == 128e9
    with pytest.raises(ValueError):
        rate_accounting(F2, overhead_pct=-1)


def test_q_margins():
    m = q_margins(8.9)
    assert abs(m["sd_fec_margin_db"] - 2.65) < 1e-9
    assert abs(m["hd_fec_margin_db"] - 0.37) < 1e-9
    assert (SD_FEC_Q2, HD_FEC_Q2) == (6.25, 8.53)


# ---------------------------------------------------------------- sweeps and reports


@pytest.fixture(scope="module")
def small_table():
    return run_b2b_sweep(_small_b2b())


def test_sweep_rows_and_schema(small_table):
    assert small_table.points() == [8.0, 10.0]
    assert all(set(r) == set(CSV_COLUMNS) for r in small_table.rows)
    assert small_table.to_csv().splitlines()[0] == ",".join(CSV_COLUMNS)
    for r in small_table.rows:
        assert r["bits_counted"] == 2 * 34676
        assert (r["q2_db"] is None) == (not 0 < r["ber"] < 0.5)


def test_sweep_tracks_theory(small_table):
    for a in small_table.aggregate():
        assert abs(a["osnr_db"] - a["sweep_value"]) < 1e-9
        assert abs(a["q2_db"] - theory_q2(a["osnr_db"], F2)) < 0.3


def test_sweep_is_byte_identical(small_table):
    again = run_b2b_sweep(_small_b2b())
    assert again.to_csv() == small_table.to_csv()
    other = run_b2b_sweep(_small_b2b(seed=4))
    assert other.to_csv() != small_table.to_csv()


def test_sweep_stops_once_resolved():
    cfg = dataclasses.replace(_small_b2b(values=[6.0]), sweep=SweepSpec(values=[6.0], seed=1, min_bits=100_000, max_frames=5))
    t = run_b2b_sweep(cfg)
    # one frame holds 69352 bits, so a second is needed for 1e5; then errors suffice
    assert len(t.rows) == 2


def test_parallel_sweep_matches_serial(small_table):
    par = run_b2b_sweep(_small_b2b(), workers=2)
    assert par.to_csv() == small_table.to_csv()


def test_aggregate_pools_seeds():
    rows = [
        {"sweep_value": 1.0, "osnr_db": 1.0, "launch_dbm": 0.0, "ber": 0.01, "q2_db": None, "errors": 10, "bits_counted": 1000, "seed": 0},
        {"sweep_value": 1.0, "osnr_db": 1.0, "launch_dbm": 0.0, "ber": 0.03, "q2_db": None, "errors": 30, "bits_counted": 1000, "seed": 1},
    ]
    a = MetricsTable(rows, {"min_errors": 100}).aggregate()[0]
    assert a["ber"] == 0.02 and a["seeds"] == 2 and a["below_resolution"]


def test_reports_written(small_table, tmp_path):
    paths = emit_reports(small_table, tmp_path / "r", name="b2b", summary={"note": "x"})
    names = sorted(p.name for p in paths)
    assert names == ["b2b.csv", "b2b_summary.json"]
    doc = json.loads((tmp_path / "r" / "b2b_summary.json").read_text())
    assert doc["metadata"]["config_hash"] == _small_b2b().config_hash()
    assert doc["best"]["sweep_value"] == 10.0
    ref = doc["metadata"]["hardware_reference"]
    assert (ref["optimum_launch_dbm"], ref["peak_q2_db"]) == (7.4, 8.9)


def test_reports_reject_empty_table(tmp_path):
    with pytest.raises(ConfigError):
        emit_reports(MetricsTable(), tmp_path)


def test_reports_name_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit_reports(None, blocker / "sub", summary={})


# ---------------------------------------------------------------- CLI


def test_cli_theory(tmp_path, capsys):
    assert cli.main(["theory", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "10.33" in out and "16.79" in out and "22.51" in out
    assert (tmp_path / "theory.csv").exists()


def test_cli_report(tmp_path, capsys):
    assert cli.main(["report", "--format", "8ask", "--q2", "8.9", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report_summary.json").read_text())
    assert doc["rates_bps"]["28.0"]["net"] == 300e9
    assert abs(doc["margins_db"]["sd_fec_margin_db"] - 2.65) < 1e-9


def test_cli_b2b_then_penalty(tmp_path, capsys):
    args = ["b2b", "--ideal", "--format", "2ask", "--values", "8:12:2", "--frames", "1", "--seed", "3", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    table = tmp_path / "b2b.csv"
    assert table.exists()
    capsys.readouterr()
    assert cli.main(["penalty", str(table), "--format", "2ask", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out
    p = float(line.split("=")[1].split()[0])
    assert abs(p) < 0.3


def test_cli_failures_exit_nonzero(tmp_path):
    assert cli.main(["b2b", "--format", "2ask", "--values", "40", "--frames", "1", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"nonsense": 1}')
    assert cli.main(["b2b", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert cli.main(["b2b", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1


def test_cli_config_file(tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"format": 2, "sweep": {"values": [9.0], "max_frames": 1}}))
    assert cli.main(["b2b", "--config", str(c), "--ideal", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "b2b.csv").read_text().splitlines()
    assert len(rows) == 2
