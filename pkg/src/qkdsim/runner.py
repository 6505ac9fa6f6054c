"""End-to-end runs and parameter sweeps.

One run executes the whole chain: generate -> simulate -> background ->
multiplex -> detect_start -> lock_clock -> sparse_align -> sift ->
estimate_error -> reconcile -> privacy-compress -> report. Failures of
any stage become structured rows rather than exceptions, so a sweep over
hostile conditions (bright background, injected errors) keeps its
partial results.

Background convention: ``background_rate_cps`` is the per-channel rate
seen on each multiplexed input line, the same quantity the closed-form
model and all reported sweeps use. The simulation realizes it as half
that rate on each of the two physical detectors feeding a line.

Seeding: the master seed fans out through labeled derivation per stage
and per sweep point, so identical master seeds give byte-identical CSVs.
When an OTP store is attached, the factor-graph and privacy-amplification
seeds come out of the pad (32 bytes each, plus a 32-byte authentication
budget per session) and the finished key tops the pad back up.
"""

import csv
import dataclasses
import os
from dataclasses import dataclass, field, replace

import numpy as np

from qkdsim import privacy, rate_model
from qkdsim.errors import QkdError
from qkdsim.otp_store import OtpStore, session_budget
from qkdsim.params import SystemParams
from qkdsim.photonics import (
    add_background,
    generate_alice_record,
    multiplex_two_channel,
    simulate_detections,
)
from qkdsim.reconcile import reconcile_keys
from qkdsim.seeds import derive_seed, np_rng
from qkdsim.sifting import (
    ClassicalChannel,
    estimate_error,
    log_pa_seed_reference,
    sift,
)
from qkdsim.sync import SyncConfig, detect_start, lock_clock, sparse_align

AUTH_BYTES_PER_SESSION = 32
SEED_BYTES_PER_PURPOSE = 32
SESSION_PAD_COST = AUTH_BYTES_PER_SESSION + 2 * SEED_BYTES_PER_PURPOSE


@dataclass
class RunReport:
    """One CSV row: outcome plus the complete parameter set that made it."""

    background_cps: float = 0.0
    gate_ns: float = 0.0
    n_rec: int = 0
    error_rate: float = 0.0
    ec_efficiency: float = 0.0
    secure_fraction: float = 0.0
    n_fin: int = 0
    seconds: float = 0.0
    secret_bits_per_s: float = 0.0
    e_pred_eta_low: float = 0.0
    e_pred_eta_high: float = 0.0
    best_gate_ns: float = 0.0
    rep: int = 0
    run_label: str = ""
    master_seed_hex: str = ""
    repetition_rate_hz: float = 0.0
    mean_photon_number: float = 0.0
    channel_transmission: float = 0.0
    detection_efficiency: float = 0.0
    pulse_period_ns: float = 0.0
    jitter_rms_ps: float = 0.0
    clock_skew_ppm: float = 0.0
    dead_time_ns: float = 0.0
    injected_error_rate: float = 0.0
    base_error_rate: float = 0.0
    safety_margin_bits: int = 0
    lead_in_s: float = 0.0
    subset_fraction: float = 0.0
    code_rate: float = 0.0
    n_err: int = 0
    n_syn: int = 0
    start_offset_pulses: int = 0
    alignment_score: float = 0.0
    final_keys_match: bool = False
    failure_stage: str = ""
    failure_kind: str = ""

    @property
    def succeeded(self) -> bool:
        return self.failure_stage == ""


REPORT_COLUMNS = [f.name for f in dataclasses.fields(RunReport)]


@dataclass
class RunConfig:
    """Sweep description: parameter overrides plus axis and bookkeeping."""

    params: SystemParams = field(default_factory=SystemParams)
    duration_s: float = 1.0
    repetitions: int = 1
    master_seed: bytes = bytes(32)
    sweep_axis: str | None = None  # "background" | "gate"
    axis_values: tuple = ()
    background_values: tuple = (0.0, 10000.0, 20000.0, 30000.0, 40000.0)
    out_path: str | None = None
    otp_path: str | None = None
    lead_in_s: float = 0.05
    subset_fraction: float = 0.25
    # 400 revealed events keep the true-offset score clear of the extreme
    # order statistic of ~2e5 random offsets even at 6-8% error rates
    alignment_subset: int = 400
    search_range: int = 100_000
    phase_hist_path: str | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("need at least one repetition")
        for v in self.axis_values:
            if not np.isfinite(v) or v < 0:
                raise ValueError("axis values must be finite and non-negative")


def _base_report(params: SystemParams, duration_s, label, master_seed, rep, cfg=None):
    hi, lo = rate_model.error_band(params, [params.background_rate_cps])
    return RunReport(
        background_cps=params.background_rate_cps,
        gate_ns=round(params.gate_width_s * 1e9, 6),
        seconds=duration_s,
        e_pred_eta_low=float(hi[0]),
        e_pred_eta_high=float(lo[0]),
        rep=rep,
        run_label=label,
        master_seed_hex=master_seed.hex(),
        repetition_rate_hz=params.repetition_rate_hz,
        mean_photon_number=params.mean_photon_number,
        channel_transmission=params.channel_transmission,
        detection_efficiency=params.detection_efficiency,
        pulse_period_ns=round(params.pulse_period_s * 1e9, 6),
        jitter_rms_ps=round(params.pulse_jitter_rms_s * 1e12, 6),
        clock_skew_ppm=params.clock_skew_ppm,
        dead_time_ns=round(params.dead_time_s * 1e9, 6),
        injected_error_rate=params.injected_error_rate,
        base_error_rate=params.base_error_rate,
        safety_margin_bits=params.safety_margin_bits,
        lead_in_s=cfg.lead_in_s if cfg else 0.0,
        subset_fraction=cfg.subset_fraction if cfg else 0.0,
    )


def run_once(
    params: SystemParams,
    duration_s: float,
    master_seed: bytes,
    label: str = "run",
    rep: int = 0,
    otp: OtpStore | None = None,
    sync_cfg: SyncConfig | None = None,
    cfg: RunConfig | None = None,
) -> RunReport:
    """Execute one full key exchange and report the yield.

    Protocol-stage failures (no start jump, lost lock, ambiguous
    alignment, error rate above threshold, decode failure, depleted pad)
    come back as a report with ``failure_stage``/``failure_kind`` set.
    """
    cfg = cfg or RunConfig(params=params, duration_s=duration_s, master_seed=master_seed)
    if sync_cfg is None:
        sync_cfg = SyncConfig(
            period_s=params.pulse_period_s, gate_width_s=params.gate_width_s
        )
    report = _base_report(params, duration_s, label, master_seed, rep, cfg)

    def seed(stage):
        return derive_seed(master_seed, f"{label}/{stage}")

    stage = "budget"
    try:
        if otp is not None:
            if not session_budget(otp, 0, SESSION_PAD_COST):
                raise QkdError("pad below the per-attempt reserve")
            otp.consume(AUTH_BYTES_PER_SESSION, "auth")
            fg_seed = otp.consume(SEED_BYTES_PER_PURPOSE, "fg_seed")
            pa_offset = otp.consumed_offset
            pa_seed = otp.consume(SEED_BYTES_PER_PURPOSE, "pa_seed")
        else:
            fg_seed = seed("fg")
            pa_seed = seed("pa")
            pa_offset = 0

        stage = "photonics"
        n_pulses = int(round(duration_s * params.repetition_rate_hz))
        total_duration = cfg.lead_in_s + n_pulses * params.pulse_period_s
        record = generate_alice_record(
            params, n_pulses, seed("alice"), start_time_s=cfg.lead_in_s
        )
        events = simulate_detections(record, params, seed("detect"))
        events = add_background(events, params, total_duration, seed("background"))
        stream = multiplex_two_channel(
            events,
            delay_s=sync_cfg.demux_delay_s,
            clock_skew_ppm=params.clock_skew_ppm,
            dead_time_s=params.dead_time_s,
            duration_s=total_duration,
            pulse_period_s=params.pulse_period_s,
        )

        stage = "detect_start"
        start = detect_start(stream, sync_cfg)

        stage = "lock_clock"
        gated = lock_clock(stream, start, sync_cfg)
        if cfg.phase_hist_path:
            gated.write_phase_histogram(cfg.phase_hist_path)

        stage = "sparse_align"
        rng = np_rng(seed("subset"))
        k = min(cfg.alignment_subset, gated.n_events)
        chosen = rng.choice(gated.n_events, size=k, replace=False) if k else np.empty(0, int)
        alignment = sparse_align(
            gated.slots[chosen],
            (gated.detectors[chosen] & 1).astype(np.uint8),
            (gated.detectors[chosen] >> 1).astype(np.uint8),
            record,
            search_range=cfg.search_range,
            margin=sync_cfg.alignment_margin,
            min_subset=min(sync_cfg.min_alignment_subset, cfg.alignment_subset),
        )
        report.start_offset_pulses = alignment.start_offset_pulses
        report.alignment_score = alignment.match_score

        stage = "sift"
        channel = ClassicalChannel()
        alice_key, bob_key = sift(gated, alignment, record, channel)

        stage = "estimate_error"
        error, n_est, alice_key, bob_key = estimate_error(
            alice_key, bob_key, cfg.subset_fraction, seed("estimate"), channel
        )
        report.n_rec = alice_key.n_rec
        report.n_err = alice_key.n_err
        report.error_rate = error

        stage = "reconcile"
        bob_corrected, n_syn, code_rate = reconcile_keys(
            alice_key.bits, bob_key.bits, error, fg_seed, subset_size=n_est, channel=channel
        )
        report.n_syn = n_syn
        report.code_rate = code_rate
        ec_efficiency = 1.0 - n_syn / alice_key.n_rec
        report.ec_efficiency = ec_efficiency

        stage = "privacy"
        inputs = privacy.YieldInputs(
            n_rec=alice_key.n_rec,
            n_err=alice_key.n_err,
            error_rate=error,
            ec_efficiency=ec_efficiency,
            mean_photon_number=params.mean_photon_number,
            channel_transmission=params.channel_transmission,
            safety_margin_bits=params.safety_margin_bits,
        )
        report.secure_fraction = privacy.secure_fraction(
            params.mean_photon_number, params.channel_transmission
        )
        n_fin = min(privacy.final_length(inputs), int(alice_key.bits.size))
        log_pa_seed_reference(channel, pa_offset, SEED_BYTES_PER_PURPOSE)
        final_alice = privacy.compress(alice_key.bits, n_fin, pa_seed)
        final_bob = privacy.compress(bob_corrected, n_fin, pa_seed)
        report.final_keys_match = bool(np.array_equal(final_alice, final_bob))
        report.n_fin = n_fin
        report.secret_bits_per_s = n_fin / duration_s

        if otp is not None and report.final_keys_match and n_fin >= 8:
            usable = (n_fin // 8) * 8
            otp.top_up(np.packbits(final_alice[:usable]).tobytes())
    except QkdError as exc:
        report.failure_stage = stage
        report.failure_kind = type(exc).__name__
    return report


def _open_writer(path):
    fh = open(path, "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
    writer.writeheader()
    return fh, writer


def _write_row(fh, writer, report: RunReport) -> None:
    writer.writerow(dataclasses.asdict(report))
    fh.flush()


def write_reports_csv(path, reports) -> None:
    """Write finished reports to a CSV with the standard column set."""
    fh, writer = _open_writer(path)
    try:
        for report in reports:
            _write_row(fh, writer, report)
    finally:
        fh.close()


def attach_store(cfg: RunConfig):
    if cfg.otp_path is None:
        return None
    if os.path.exists(cfg.otp_path):
        return OtpStore(cfg.otp_path)
    # fresh store gets a pad bootstrapped from the master seed
    rng = np_rng(derive_seed(cfg.master_seed, "initial-pad"))
    pad = rng.integers(0, 256, size=64 * 1024, dtype=np.uint8).tobytes()
    return OtpStore.create(cfg.otp_path, pad)


def sweep_background(cfg: RunConfig):
    """One run per (background value, repetition); emits CSV if configured."""
    values = cfg.axis_values or (0.0, 5000.0, 10000.0, 15000.0, 20000.0, 26000.0)
    otp = attach_store(cfg)
    fh = writer = None
    if cfg.out_path:
        fh, writer = _open_writer(cfg.out_path)
    reports = []
    try:
        for b in values:
            for rep in range(cfg.repetitions):
                params = replace(cfg.params, background_rate_cps=float(b))
                label = f"B{b:g}/rep{rep}"
                report = run_once(
                    params, cfg.duration_s, cfg.master_seed, label, rep, otp, cfg=cfg
                )
                reports.append(report)
                if writer:
                    _write_row(fh, writer, report)
    finally:
        if fh:
            fh.close()
        if otp:
            otp.close()
    return reports


def sweep_gate(cfg: RunConfig):
    """Full pipeline per (gate width, background, repetition).

    The ``best_gate_ns`` column carries, for every row of a background
    group, the gate whose mean secret rate won at that background.
    """
    gates_ns = cfg.axis_values or (3.0, 5.0, 7.0)
    otp = attach_store(cfg)
    fh = writer = None
    if cfg.out_path:
        fh, writer = _open_writer(cfg.out_path)
    reports = []
    try:
        for b in cfg.background_values:
            group = []
            for gate_ns in gates_ns:
                for rep in range(cfg.repetitions):
                    params = replace(
                        cfg.params,
                        background_rate_cps=float(b),
                        gate_width_s=float(gate_ns) * 1e-9,
                    )
                    label = f"B{b:g}/g{gate_ns:g}/rep{rep}"
                    group.append(
                        run_once(
                            params, cfg.duration_s, cfg.master_seed, label, rep, otp, cfg=cfg
                        )
                    )
            means = {
                g: float(np.mean([r.secret_bits_per_s for r in group if r.gate_ns == g]))
                for g in {r.gate_ns for r in group}
            }
            best = max(sorted(means), key=lambda g: means[g])
            for report in group:
                report.best_gate_ns = best
                if writer:
                    _write_row(fh, writer, report)
            reports.extend(group)
    finally:
        if fh:
            fh.close()
        if otp:
            otp.close()
    return reports
