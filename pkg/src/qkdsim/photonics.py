"""Faint-pulse transmitter, free-space channel and grating receiver model.

The transmitter fires one of four LEDs per clock period behind sheet
polarizers at 0/45/90/135 degrees. The receiver splits incoming light
four ways with a diffraction grating; a polarizer in one of the same
four orientations sits in front of each detector. States and detectors
share one index convention:

    index    0      1      2      3
    angle    0      45     90     135   (degrees)
    bit      0      0      1      1
    basis    rect   diag   rect   diag

A photon routed to a conjugate-basis detector registers with probability
1/2. A photon routed to its matching detector always registers, but
relocates onto the orthogonal detector of the same basis with that
destination channel's measured wrong-bit rate, which reproduces the
per-channel error rates observed during key exchange.

Ground-truth ``origin``/``pulse`` labels ride along for test oracles
only; protocol code must consume nothing beyond tag times and line
labels.
"""

from dataclasses import dataclass

import numpy as np

from qkdsim.params import SystemParams
from qkdsim.seeds import np_rng

ORIGIN_SIGNAL = 0
ORIGIN_BACKGROUND = 1

# Same-line tags closer than this are unresolvable even with zero dead time.
MERGE_RESOLUTION_S = 1e-12


def state_bits(states: np.ndarray) -> np.ndarray:
    """Bit encoding: 0/45 deg carry 0, 90/135 deg carry 1."""
    return (states >> 1).astype(np.uint8)


def state_bases(states: np.ndarray) -> np.ndarray:
    """Basis encoding: 0 = rectilinear (0/90), 1 = diagonal (45/135)."""
    return (states & 1).astype(np.uint8)


@dataclass
class AliceRecord:
    """Transmitter-side record of one run: which state fired on each pulse."""

    states: np.ndarray  # uint8 in 0..3, one per pulse
    start_time_s: float
    pulse_period_s: float
    seed: bytes

    @property
    def n_pulses(self) -> int:
        return int(self.states.size)

    @property
    def bits(self) -> np.ndarray:
        return state_bits(self.states)

    @property
    def bases(self) -> np.ndarray:
        return state_bases(self.states)


@dataclass
class DetectionEvents:
    """Detector click list with ground-truth labels for oracles."""

    times_s: np.ndarray
    detectors: np.ndarray  # uint8 in 0..3
    origins: np.ndarray  # ORIGIN_SIGNAL / ORIGIN_BACKGROUND
    pulses: np.ndarray  # emitting pulse index, -1 for background

    @property
    def n_events(self) -> int:
        return int(self.times_s.size)

    def sorted_by_time(self) -> "DetectionEvents":
        order = np.argsort(self.times_s, kind="stable")
        return DetectionEvents(
            self.times_s[order],
            self.detectors[order],
            self.origins[order],
            self.pulses[order],
        )


@dataclass
class TagStream:
    """Two-line time-tag stream, the wire between the detectors and software.

    ``truth_origins``/``truth_pulses`` are oracle-only side tables; they are
    never serialized and protocol code must not read them.
    """

    times_s: np.ndarray
    lines: np.ndarray  # uint8 in {0, 1}
    clock_skew_ppm: float
    duration_s: float
    dropped_collisions: int = 0
    truth_origins: np.ndarray | None = None
    truth_pulses: np.ndarray | None = None

    @property
    def n_tags(self) -> int:
        return int(self.times_s.size)

    def to_text(self, path) -> None:
        """Write "time_ps<TAB>line" rows, 64-bit picoseconds, strictly increasing.

        Sub-picosecond ties are bumped forward by 1 ps; that is the wire
        format's resolution.
        """
        ps = np.round(self.times_s * 1e12).astype(np.int64)
        while True:
            clash = ps[1:] <= ps[:-1]
            if not clash.any():
                break
            ps[1:][clash] = ps[:-1][clash] + 1
        with open(path, "w") as fh:
            for t, line in zip(ps, self.lines):
                fh.write(f"{t}\t{line}\n")

    @classmethod
    def from_text(cls, path, clock_skew_ppm: float = 0.0) -> "TagStream":
        ps = []
        lines = []
        with open(path) as fh:
            for row in fh:
                if not row.strip():
                    continue
                t, line = row.split("\t")
                ps.append(int(t))
                lines.append(int(line))
        times = np.asarray(ps, dtype=np.int64) * 1e-12
        duration = float(times[-1]) if len(ps) else 0.0
        return cls(
            times_s=times.astype(np.float64),
            lines=np.asarray(lines, dtype=np.uint8),
            clock_skew_ppm=clock_skew_ppm,
            duration_s=duration,
        )


def generate_alice_record(
    params: SystemParams,
    n_pulses: int,
    seed: bytes,
    start_time_s: float = 0.0,
) -> AliceRecord:
    """Draw a uniformly random state per pulse, reproducible from the seed."""
    if n_pulses <= 0:
        raise ValueError("need at least one pulse")
    rng = np_rng(seed)
    states = rng.integers(0, 4, size=n_pulses, dtype=np.uint8)
    return AliceRecord(
        states=states,
        start_time_s=start_time_s,
        pulse_period_s=params.pulse_period_s,
        seed=seed,
    )


def simulate_detections(
    record: AliceRecord, params: SystemParams, seed: bytes
) -> DetectionEvents:
    """Monte-Carlo detection of one transmission.

    Per pulse the photon number is Poisson with the configured mean; each
    photon survives the lumped channel transmission times the detection
    efficiency, is routed by the grating to a uniformly random detector,
    and registers according to the polarizer in front of it. Multi-photon
    pulses can therefore fire several detectors in one period.
    """
    rng = np_rng(seed)
    n = record.n_pulses
    p_survive = params.channel_transmission * params.detection_efficiency

    photons = rng.poisson(params.mean_photon_number, n)
    survivors = rng.binomial(photons, p_survive)
    pulse_idx = np.repeat(np.arange(n, dtype=np.int64), survivors)
    k = pulse_idx.size
    if k == 0:
        empty = np.empty(0)
        return DetectionEvents(
            empty,
            np.empty(0, np.uint8),
            np.empty(0, np.uint8),
            np.empty(0, np.int64),
        )

    states = record.states[pulse_idx]
    port = rng.integers(0, 4, size=k, dtype=np.uint8)  # grating output port
    matched = port == states
    conjugate = ((port ^ states) & 1) == 1
    registers = matched | (conjugate & (rng.random(k) < 0.5))

    # Relocation onto the orthogonal same-basis channel, governed by the
    # destination channel's wrong-bit rate.
    ber = np.asarray(params.base_ber_per_channel, dtype=np.float64)
    orthogonal = states ^ 2
    flip = matched & (rng.random(k) < ber[orthogonal])
    detectors = np.where(flip, orthogonal, port).astype(np.uint8)

    if params.injected_error_rate > 0:
        inject = matched & registers & (rng.random(k) < params.injected_error_rate)
        detectors = np.where(inject, detectors ^ 2, detectors).astype(np.uint8)

    times = (
        record.start_time_s
        + pulse_idx * record.pulse_period_s
        + rng.normal(0.0, params.pulse_jitter_rms_s, k)
    )

    events = DetectionEvents(
        times_s=times[registers],
        detectors=detectors[registers],
        origins=np.full(int(registers.sum()), ORIGIN_SIGNAL, dtype=np.uint8),
        pulses=pulse_idx[registers],
    )
    return events.sorted_by_time()


def add_background(
    events: DetectionEvents,
    params: SystemParams,
    duration_s: float,
    seed: bytes,
) -> DetectionEvents:
    """Merge in a homogeneous Poisson background on every detector.

    The rate per physical detector is taken from
    ``params.background_rate_cps / 2``: the configured figure is the
    per-line rate after two detectors are multiplexed onto each input.
    Use :func:`add_background_per_detector` to state the physical rate
    directly.
    """
    return add_background_per_detector(
        events, params.background_rate_cps / 2.0, duration_s, seed
    )


def add_background_per_detector(
    events: DetectionEvents,
    rate_per_detector_cps: float,
    duration_s: float,
    seed: bytes,
) -> DetectionEvents:
    """Append per-detector Poisson background at the given physical rate."""
    if rate_per_detector_cps < 0:
        raise ValueError("background rate cannot be negative")
    if events.n_events and events.times_s[-1] > duration_s + 1e-9:
        raise ValueError("duration does not cover the existing event span")
    if rate_per_detector_cps == 0:
        return events

    rng = np_rng(seed)
    counts = rng.poisson(rate_per_detector_cps * duration_s, 4)
    total = int(counts.sum())
    times = rng.random(total) * duration_s
    detectors = np.repeat(np.arange(4, dtype=np.uint8), counts)

    merged = DetectionEvents(
        times_s=np.concatenate([events.times_s, times]),
        detectors=np.concatenate([events.detectors, detectors]),
        origins=np.concatenate(
            [events.origins, np.full(total, ORIGIN_BACKGROUND, dtype=np.uint8)]
        ),
        pulses=np.concatenate([events.pulses, np.full(total, -1, dtype=np.int64)]),
    )
    return merged.sorted_by_time()


def _keep_after_dead_time(times: np.ndarray, resolution: float) -> np.ndarray:
    """Greedy survivor mask: drop any tag closer than `resolution` to the
    previously kept tag on the same line."""
    keep = np.ones(times.size, dtype=bool)
    if times.size < 2:
        return keep
    if not (np.diff(times) < resolution).any():
        return keep
    last = -np.inf
    for i, t in enumerate(times):
        if t - last >= resolution:
            last = t
        else:
            keep[i] = False
    return keep


def multiplex_two_channel(
    events: DetectionEvents,
    delay_s: float = 40e-9,
    clock_skew_ppm: float = 0.0,
    dead_time_s: float = 0.0,
    duration_s: float | None = None,
    pulse_period_s: float = 200e-9,
) -> TagStream:
    """Combine four detectors onto two recorder lines with a fixed delay.

    Detectors 2 and 3 are delayed by ``delay_s`` and land on lines 0 and 1
    respectively, so each line carries two phase-separated channels (and
    twice the background). The receiver clock skew is applied here as a
    linear dilation of all tag times. Same-line tags inside the dead-time
    resolution collapse onto the earlier tag and are counted as dropped.
    """
    if not delay_s < pulse_period_s / 2:
        raise ValueError("demux delay must stay below half the pulse period")

    times = events.times_s.astype(np.float64).copy()
    delayed = events.detectors >= 2
    times[delayed] += delay_s
    times *= 1.0 + clock_skew_ppm * 1e-6
    lines = (events.detectors & 1).astype(np.uint8)

    order = np.argsort(times, kind="stable")
    times = times[order]
    lines = lines[order]
    origins = events.origins[order]
    pulses = events.pulses[order]

    resolution = max(dead_time_s, MERGE_RESOLUTION_S)
    keep = np.ones(times.size, dtype=bool)
    for line in (0, 1):
        on_line = np.flatnonzero(lines == line)
        keep[on_line] = _keep_after_dead_time(times[on_line], resolution)
    dropped = int(times.size - keep.sum())

    if duration_s is None:
        duration_s = float(times[-1]) if times.size else 0.0

    return TagStream(
        times_s=times[keep],
        lines=lines[keep],
        clock_skew_ppm=clock_skew_ppm,
        duration_s=duration_s,
        dropped_collisions=dropped,
        truth_origins=origins[keep],
        truth_pulses=pulses[keep],
    )
