"""Sifting exchange, subset error estimation and channel framing."""

import numpy as np
import pytest

from qkdsim.errors import QberAboveThreshold
from qkdsim.params import SystemParams
from qkdsim.photonics import (
    add_background,
    add_background_per_detector,
    generate_alice_record,
    multiplex_two_channel,
    simulate_detections,
)
from qkdsim.rate_model import error_band
from qkdsim.seeds import derive_seed
from qkdsim.sifting import (
    MSG_BASIS_ANNOUNCE,
    MSG_MATCH_REPLY,
    MSG_SUBSET_REVEAL,
    ClassicalChannel,
    SiftedKey,
    estimate_error,
    sift,
)
from qkdsim.sync import AlignmentResult, GatedEvents, SyncConfig, detect_start, lock_clock

MASTER = derive_seed(bytes(32), "sifting-tests")


def seed(label):
    return derive_seed(MASTER, label)


def manual_alignment(offset, slots=()):
    slots = np.asarray(slots, dtype=np.int64)
    return AlignmentResult(
        start_offset_pulses=offset,
        match_score=1.0,
        runner_up_score=0.0,
        subset_slots=slots,
        subset_bases=np.zeros(slots.size, np.uint8),
        subset_bits=np.zeros(slots.size, np.uint8),
    )


def manual_gated(slots, detectors):
    slots = np.asarray(slots, dtype=np.int64)
    return GatedEvents(
        slots=slots,
        detectors=np.asarray(detectors, dtype=np.uint8),
        tag_indices=np.arange(slots.size),
        recovered_period_s=200e-9,
        phase_bin_s=1.25e-9,
        phase_histogram=np.zeros(160, dtype=np.int64),
    )


def gated_run(label, background_cps=0.0, n_pulses=1_500_000, injected=0.0):
    params = SystemParams(
        background_rate_cps=background_cps, injected_error_rate=injected
    )
    total = 0.05 + n_pulses * params.pulse_period_s
    rec = generate_alice_record(params, n_pulses, seed(label + "r"), start_time_s=0.05)
    ev = simulate_detections(rec, params, seed(label + "d"))
    ev = add_background(ev, params, total, seed(label + "b"))
    stream = multiplex_two_channel(ev, clock_skew_ppm=10.0, duration_s=total)
    cfg = SyncConfig()
    gated = lock_clock(stream, detect_start(stream, cfg), cfg)
    truth = stream.truth_pulses[gated.tag_indices]
    sig = truth >= 0
    offsets = gated.slots[sig] - truth[sig]
    vals, counts = np.unique(offsets, return_counts=True)
    true_offset = -int(vals[np.argmax(counts)])
    return rec, gated, stream, true_offset


def test_sift_single_matching_event():
    rec = generate_alice_record(SystemParams(), 100, seed("one"))
    state = int(rec.states[10])
    alice_key, bob_key = sift(
        manual_gated([10], [state]), manual_alignment(0), rec, ClassicalChannel()
    )
    assert len(alice_key) == len(bob_key) == 1
    assert alice_key.bits[0] == bob_key.bits[0] == rec.bits[10]
    assert alice_key.n_rec == 1 and alice_key.n_err == 0


def test_sift_discards_conjugate_basis_and_unfired_slots():
    rec = generate_alice_record(SystemParams(), 100, seed("disc"))
    rec.states[20] = 0  # rectilinear pulse
    gated = manual_gated([20, 20_000], [1, 0])  # diagonal detector; out of range
    alice_key, bob_key = sift(gated, manual_alignment(0), rec, None)
    assert len(alice_key) == 0
    assert len(bob_key) == 0


def test_sift_discards_double_fire_slots():
    rec = generate_alice_record(SystemParams(), 100, seed("dbl"))
    rec.states[5] = 0
    rec.states[6] = 0
    gated = manual_gated([5, 5, 6], [0, 2, 0])  # slot 5 fired two detectors
    alice_key, _ = sift(gated, manual_alignment(0), rec, None)
    assert list(alice_key.pulse_slots) == [6]


def test_sift_keeps_half_of_gated_signal():
    # conjugate-basis detections are half of everything the receiver gates
    rec, gated, stream, offset = gated_run("half", n_pulses=16_000_000)
    assert gated.n_events >= 100_000
    alignment = manual_alignment(offset)
    alice_key, bob_key = sift(gated, alignment, rec, ClassicalChannel())
    kept = len(alice_key) / gated.n_events
    assert abs(kept - 0.5) < 0.01
    assert np.array_equal(alice_key.pulse_slots, bob_key.pulse_slots)


def test_sift_zero_error_without_noise_sources():
    params = SystemParams(
        base_ber_per_channel=(0.0, 0.0, 0.0, 0.0), clock_skew_ppm=0.0
    )
    rec = generate_alice_record(params, 1_000_000, seed("cleanr"), start_time_s=0.05)
    ev = simulate_detections(rec, params, seed("cleand"))
    stream = multiplex_two_channel(ev, duration_s=0.25)
    cfg = SyncConfig()
    gated = lock_clock(stream, detect_start(stream, cfg), cfg)
    truth = stream.truth_pulses[gated.tag_indices]
    offs = gated.slots - truth
    offset = -int(np.bincount((offs - offs.min())).argmax() + offs.min())
    alice_key, bob_key = sift(gated, manual_alignment(offset), rec, None)
    assert len(alice_key) > 1000
    assert np.array_equal(alice_key.bits, bob_key.bits)


def test_sift_background_only_events_are_coin_flips():
    rec = generate_alice_record(SystemParams(), 200_000, seed("bgr"))
    empty = simulate_detections(
        generate_alice_record(SystemParams(mean_photon_number=1e-9), 10, seed("e")),
        SystemParams(mean_photon_number=1e-9),
        seed("f"),
    )
    ev = add_background_per_detector(empty, 20000.0, 0.04, seed("bgb"))
    gated = manual_gated(
        np.arange(ev.n_events), ev.detectors
    )  # pretend each landed in its own slot
    alice_key, bob_key = sift(gated, manual_alignment(0), rec, None)
    assert len(alice_key) > 500
    disagreement = (alice_key.bits != bob_key.bits).mean()
    assert abs(disagreement - 0.5) < 3 * np.sqrt(0.25 / len(alice_key))


def test_sift_full_key_disagreement_inside_efficiency_band():
    # end-to-end error convergence against the closed-form band
    b = 20000.0
    rec, gated, stream, offset = gated_run("band", background_cps=b)
    alice_key, bob_key = sift(gated, manual_alignment(offset), rec, None)
    disagreement = (alice_key.bits != bob_key.bits).mean()
    params = SystemParams(background_rate_cps=b)
    hi, lo = error_band(params, [b])
    sigma = np.sqrt(disagreement * (1 - disagreement) / len(alice_key))
    assert lo[0] - 3 * sigma <= disagreement <= hi[0] + 3 * sigma


def test_sift_excludes_revealed_alignment_subset():
    rec, gated, stream, offset = gated_run("excl")
    revealed = gated.slots[:50]
    alignment = manual_alignment(offset, slots=revealed)
    alice_key, _ = sift(gated, alignment, rec, None)
    assert not np.isin(alice_key.pulse_slots, revealed).any()
    assert alice_key.n_err > 0  # matched revealed events are spent bits
    assert alice_key.n_rec == len(alice_key) + alice_key.n_err


def test_estimate_error_identical_keys():
    bits = np.ones(2000, dtype=np.uint8)
    slots = np.arange(2000, dtype=np.int64)
    a = SiftedKey(bits.copy(), slots.copy(), 2000)
    b = SiftedKey(bits.copy(), slots.copy(), 2000)
    error, k, a2, b2 = estimate_error(a, b, 0.25, seed("est0"), ClassicalChannel())
    assert error == 0.0
    assert k == 500
    assert len(a2) == 1500
    assert a2.n_rec == 2000 and a2.n_err == 500


def test_estimate_error_matches_injected_rate():
    rng = np.random.default_rng(31)
    n = 8000
    bits = rng.integers(0, 2, n).astype(np.uint8)
    flips = np.zeros(n, dtype=np.uint8)
    flips[: int(0.08 * n)] = 1
    rng.shuffle(flips)
    slots = np.arange(n, dtype=np.int64)
    a = SiftedKey(bits, slots.copy(), n)
    b = SiftedKey(bits ^ flips, slots.copy(), n)
    error, k, a2, b2 = estimate_error(a, b, 0.25, seed("est8"))
    sigma = np.sqrt(0.08 * 0.92 / k)
    assert abs(error - 0.08) < 3 * sigma
    # the subset is destroyed: remaining keys contain none of it
    assert len(a2) == n - k


def test_estimate_error_aborts_above_threshold():
    rng = np.random.default_rng(37)
    n = 4000
    bits = rng.integers(0, 2, n).astype(np.uint8)
    flips = (rng.random(n) < 0.2).astype(np.uint8)
    slots = np.arange(n, dtype=np.int64)
    a = SiftedKey(bits, slots.copy(), n)
    b = SiftedKey(bits ^ flips, slots.copy(), n)
    with pytest.raises(QberAboveThreshold):
        estimate_error(a, b, 0.25, seed("abort"))


def test_estimate_error_requires_minimum_length():
    bits = np.ones(100, dtype=np.uint8)
    slots = np.arange(100, dtype=np.int64)
    with pytest.raises(ValueError):
        estimate_error(
            SiftedKey(bits.copy(), slots.copy(), 100),
            SiftedKey(bits.copy(), slots.copy(), 100),
            0.25,
            seed("short"),
        )


def test_channel_logs_and_frames_messages():
    channel = ClassicalChannel()
    frame = channel.send("bob", MSG_BASIS_ANNOUNCE, b"\x01\x02\x03")
    msg_type, payload = ClassicalChannel.parse_frame(frame)
    assert msg_type == MSG_BASIS_ANNOUNCE
    assert payload == b"\x01\x02\x03"
    assert channel.bytes_logged == 8


def test_sift_and_estimate_log_protocol_messages():
    rec, gated, stream, offset = gated_run("log")
    channel = ClassicalChannel()
    alice_key, bob_key = sift(gated, manual_alignment(offset), rec, channel)
    estimate_error(alice_key, bob_key, 0.25, seed("log2"), channel)
    types = [t for _, t, _ in channel.log]
    assert MSG_BASIS_ANNOUNCE in types
    assert MSG_MATCH_REPLY in types
    assert MSG_SUBSET_REVEAL in types
