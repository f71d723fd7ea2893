"""Command line front end: ``dpask {b2b,link,theory,penalty,report}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (
    SD_FEC_Q2,
    LinkConfig,
    MetricsTable,
    SweepPointError,
    compute_penalty,
    emit_reports,
    load_config,
    q_margins,
    rate_accounting,
    required_osnr,
    run_b2b_sweep,
    run_link_sweep,
    theory_q2,
    tx_spectrum,
)
from .txdsp import ModFormat


def _base_config(args) -> LinkConfig:
    cfg = load_config(args.config) if args.config else LinkConfig()
    if args.format:
        cfg = dataclasses.replace(cfg, format=ModFormat.parse(args.format).m)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, seed=args.seed))
    if args.ideal:
        cfg = cfg.ideal()
    return cfg


def _values(text: str | None):
    if not text:
        return None
    if ":" in text:
        a, b, s = (float(v) for v in text.split(":"))
        return [float(v) for v in np.round(np.arange(a, b + s / 2, s), 9)]
    return [float(v) for v in text.split(",")]


def _sweep(args, kind):
    cfg = _base_config(args)
    vals = _values(args.values)
    sw = dataclasses.replace(cfg.sweep, kind=kind, **({"values": vals} if vals else {}))
    if args.frames:
        sw = dataclasses.replace(sw, max_frames=args.frames)
    cfg = dataclasses.replace(cfg, sweep=sw)
    run = run_b2b_sweep if kind == "osnr" else run_link_sweep
    table = run(cfg, workers=args.workers)
    summary = {"config": cfg.to_dict()}
    if kind == "osnr":
        try:
            summary["penalty_db"] = compute_penalty(table, cfg.fmt)
        except ValueError as exc:
            summary["penalty_db"] = None
            summary["penalty_note"] = str(exc)
    emit_reports(table, args.out, name=kind == "osnr" and "b2b" or "link", summary=summary)
    for a in table.aggregate():
        q = "error-free" if a["q2_db"] is None else f"{a['q2_db']:.3f} dB"
        print(f"{a['sweep_value']:8.2f}  osnr {a['osnr_db']:6.2f} dB  Q2 {q}  ({a['errors']}/{a['bits_counted']})")
    return 0


def cmd_theory(args):
    fmts = [ModFormat.parse(args.format)] if args.format else [ModFormat(m) for m in (2, 4, 8)]
    vals = _values(args.values) or list(np.arange(5.0, 30.01, 0.5))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "theory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["format", "osnr_db", "q2_db"])
        for fmt in fmts:
            for o in vals:
                try:
                    q = f"{theory_q2(o, fmt):.6f}"
                except ValueError:
                    q = ""
                w.writerow([fmt.name, f"{o:.4f}", q])
    for fmt in fmts:
        print(f"{fmt.name}: OSNR at {SD_FEC_Q2} dB-Q = {required_osnr(SD_FEC_Q2, fmt):.2f} dB")
    return 0


def cmd_penalty(args):
    rows = list(csv.DictReader(open(args.table)))
    table = MetricsTable(
        rows=[{k: (float(v) if v not in ("",) else None) for k, v in r.items()} for r in rows],
        metadata={"kind": "osnr"},
    )
    for r in table.rows:
        r["errors"] = int(r["errors"])
        r["bits_counted"] = int(r["bits_counted"])
    fmt = ModFormat.parse(args.format or "8ask")
    p = compute_penalty(table, fmt, args.threshold)
    print(f"{fmt.name}: OSNR penalty at {args.threshold} dB-Q = {p:.3f} dB")
    return 0


def cmd_report(args):
    cfg = _base_config(args)
    fmt = cfg.fmt
    rates = {str(o): rate_accounting(fmt, cfg.symbol_rate, o) for o in (0.0, 12.0, 28.0)}
    summary = {"format": fmt.name, "rates_bps": rates}
    if args.q2 is not None:
        summary["margins_db"] = q_margins(args.q2)
    spectra = {"tx": tx_spectrum(cfg)} if args.spectrum else None
    paths = emit_reports(None, args.out, spectra=spectra, name="report", summary=summary)
    print(json.dumps(summary, indent=2))
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpask", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or YAML file with LinkConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="out")
        p.add_argument("--ideal", action="store_true", help="disable all hardware impairments")
        p.add_argument("--format", choices=["2ask", "4ask", "8ask"])
        return p

    for name, help_ in (("b2b", "back-to-back OSNR sweep"), ("link", "launch-power sweep over fiber")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--values", help="comma list or start:stop:step")
        p.add_argument("--frames", type=int, help="cap on frames per point")
        p.add_argument("--workers", type=int, default=1)
    p = common(sub.add_parser("theory", help="AWGN theory curves"))
    p.add_argument("--values", help="OSNR list, comma list or start:stop:step")
    p = common(sub.add_parser("penalty", help="OSNR penalty of a b2b CSV"))
    p.add_argument("table")
    p.add_argument("--threshold", type=float, default=SD_FEC_Q2)
    p = common(sub.add_parser("report", help="rates, margins and spectra"))
    p.add_argument("--q2", type=float, help="Q^2 in dB to compute FEC margins for")
    p.add_argument("--spectrum", action="store_true", help="write the transmitter PSD")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.cmd == "b2b":
            return _sweep(args, "osnr")
        if args.cmd == "link":
            return _sweep(args, "launch")
        return {"theory": cmd_theory, "penalty": cmd_penalty, "report": cmd_report}[args.cmd](args)
    except (SweepPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
