"""Command-line entry point.

    qkd-sim run    --duration 1.0 --seed <hex> --out run.csv [--otp pad.otp]
    qkd-sim sweep  --sweep background --values 0,5000,10000 --reps 3 ...
    qkd-sim sweep  --sweep gate --values 3,5,7 --backgrounds 0,20000,40000 ...
    qkd-sim otp    {init,status,ledger} --otp pad.otp [--size N] [--seed hex]

A config file (--config, line-oriented key=value, '#' comments) supplies
defaults for any flag or SystemParams field; explicit flags win.
"""

import argparse
import dataclasses
import sys

from qkdsim.otp_store import OtpStore
from qkdsim.params import SystemParams
from qkdsim.runner import (
    RunConfig,
    attach_store,
    run_once,
    sweep_background,
    sweep_gate,
    write_reports_csv,
)
from qkdsim.seeds import np_rng, parse_seed

_PARAM_FIELDS = {f.name for f in dataclasses.fields(SystemParams)}


def load_config(path) -> dict:
    """Parse a line-oriented key=value config file."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def _parse_values(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _build_params(args, file_cfg: dict) -> SystemParams:
    overrides = {}
    for name in _PARAM_FIELDS:
        if name in file_cfg:
            caster = int if name == "safety_margin_bits" else float
            overrides[name] = caster(file_cfg[name])
    if args.background is not None:
        overrides["background_rate_cps"] = args.background
    if args.gate_ns is not None:
        overrides["gate_width_s"] = args.gate_ns * 1e-9
    return SystemParams(**overrides)


def _add_common(parser):
    parser.add_argument("--config", help="key=value defaults file")
    parser.add_argument("--duration", type=float, default=None, help="seconds per run")
    parser.add_argument("--reps", type=int, default=None, help="repetitions per point")
    parser.add_argument("--seed", default=None, help="hex master seed (up to 32 bytes)")
    parser.add_argument("--out", default=None, help="CSV output path")
    parser.add_argument("--otp", default=None, help="OTP store path")
    parser.add_argument("--background", type=float, default=None,
                        help="per-channel background rate (counts/s)")
    parser.add_argument("--gate-ns", type=float, default=None, help="gate width in ns")
    parser.add_argument("--phase-hist", default=None,
                        help="write the residual-phase histogram CSV here")


def _make_config(args) -> RunConfig:
    file_cfg = load_config(args.config) if args.config else {}

    def pick(flag_value, key, cast, default):
        if flag_value is not None:
            return flag_value
        if key in file_cfg:
            return cast(file_cfg[key])
        return default

    seed_text = pick(args.seed, "seed", str, "00")
    cfg = RunConfig(
        params=_build_params(args, file_cfg),
        duration_s=pick(args.duration, "duration", float, 1.0),
        repetitions=pick(args.reps, "reps", int, 1),
        master_seed=parse_seed(seed_text),
        sweep_axis=getattr(args, "sweep", None),
        axis_values=_parse_values(args.values) if getattr(args, "values", None) else (),
        out_path=pick(args.out, "out", str, None),
        otp_path=pick(args.otp, "otp", str, None),
        phase_hist_path=args.phase_hist,
    )
    if getattr(args, "backgrounds", None):
        cfg.background_values = _parse_values(args.backgrounds)
    return cfg


def _cmd_run(args) -> int:
    cfg = _make_config(args)
    otp = attach_store(cfg)
    try:
        report = run_once(
            cfg.params, cfg.duration_s, cfg.master_seed, "run", 0, otp, cfg=cfg
        )
    finally:
        if otp:
            otp.close()
    if cfg.out_path:
        write_reports_csv(cfg.out_path, [report])
    if report.succeeded:
        print(
            f"n_rec={report.n_rec} error={report.error_rate:.4f} "
            f"e_ec={report.ec_efficiency:.4f} n_fin={report.n_fin} "
            f"secret_bits_per_s={report.secret_bits_per_s:.1f}"
        )
        return 0
    print(f"FAILED at {report.failure_stage}: {report.failure_kind}")
    return 1


def _cmd_sweep(args) -> int:
    cfg = _make_config(args)
    if cfg.sweep_axis == "background":
        reports = sweep_background(cfg)
    else:
        reports = sweep_gate(cfg)
    ok = sum(r.succeeded for r in reports)
    print(f"{ok}/{len(reports)} runs succeeded" + (f" -> {cfg.out_path}" if cfg.out_path else ""))
    return 0


def _cmd_otp(args) -> int:
    if args.action == "init":
        rng = np_rng(parse_seed(args.seed or "00"))
        pad = rng.integers(0, 256, size=args.size, dtype="uint8").tobytes()
        store = OtpStore.create(args.otp, pad)
        print(f"created {args.otp}: {store.remaining} pad bytes")
        store.close()
        return 0
    store = OtpStore(args.otp)
    try:
        if args.action == "status":
            print(f"pad bytes remaining: {store.remaining}")
            print(f"consumed offset:     {store.consumed_offset}")
            print(f"ledger entries:      {len(store.ledger)}")
        else:  # ledger
            for entry in store.ledger:
                print(
                    f"{entry.purpose:8s} offset={entry.offset:<10d} "
                    f"length={entry.length:<6d} t={entry.timestamp:.3f}"
                )
    finally:
        store.close()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qkd-sim",
        description="Free-space BB84 link simulator and post-processing pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="single end-to-end key exchange")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="parameter sweep, one CSV row per run")
    _add_common(p_sweep)
    p_sweep.add_argument("--sweep", choices=["background", "gate"], required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values (cps, or ns for gates)")
    p_sweep.add_argument("--backgrounds", default=None,
                         help="background grid for gate sweeps (cps)")

    p_otp = sub.add_parser("otp", help="inspect or create an OTP store")
    p_otp.add_argument("action", choices=["init", "status", "ledger"])
    p_otp.add_argument("--otp", required=True, help="store path")
    p_otp.add_argument("--size", type=int, default=65536, help="initial pad bytes")
    p_otp.add_argument("--seed", default=None, help="hex seed for the initial pad")

    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "sweep":
        return _cmd_sweep(args)
    return _cmd_otp(args)


if __name__ == "__main__":
    sys.exit(main())
