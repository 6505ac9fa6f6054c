"""One-way error reconciliation with seeded sparse parity-check codes.

Both parties expand a shared secret seed into the same random factor
graph, Alice transmits the syndrome of her key, and Bob runs belief
propagation until his key's syndrome matches. An eavesdropper who does
not hold the seed faces 2^256 candidate graphs.

Graph construction (byte-exact contract, see README): lay out the edge
slots [0,0,0,1,1,1,...,n-1,n-1,n-1] (every variable has degree 3),
Fisher-Yates shuffle them with draws from the seed's HashStream, split
the shuffled list into near-equal contiguous runs, one per check, then
sweep duplicate (check, variable) pairs forward into the first later
check that lacks the variable ("spill and refill"). The result is a
regular column-weight-3, near-regular row-weight code, deterministic in
(n, rate, seed).
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from qkdsim.errors import (
    DecodeFailure,
    ErrorTooHigh,
    HashMismatch,
    LengthMismatch,
    RateInfeasible,
)
from qkdsim.seeds import HashStream, derive_seed

VARIABLE_DEGREE = 3
MIN_BLOCK_BITS = 256
MAX_BLOCK_BITS = 1 << 16
QBER_CEILING = 0.11
LLR_CLIP = 30.0

# (highest design error rate, code rate): calibrated empirically at
# n = 10^4 so that decoding succeeds in >= 99% of blocks at the bound
# itself (scripts/calibrate_rates.py regenerates the measurements).
RATE_TABLE = (
    (0.005, 0.85),
    (0.010, 0.80),
    (0.016, 0.74),
    (0.024, 0.68),
    (0.034, 0.60),
    (0.046, 0.53),
    (0.060, 0.46),
    (0.075, 0.32),
    (0.090, 0.26),
    (0.105, 0.22),
    (0.115, 0.20),
)


@dataclass
class FactorGraph:
    """Sparse parity-check structure, reproducible from (n, rate, seed)."""

    n: int
    m: int
    check_index: np.ndarray  # per edge, grouped by check
    var_index: np.ndarray  # per edge
    check_ptr: np.ndarray  # edge range of check c is [ptr[c], ptr[c+1])
    seed: bytes

    @property
    def n_edges(self) -> int:
        return int(self.var_index.size)

    def adjacency_digest(self) -> bytes:
        canon = np.stack([self.check_index, self.var_index]).astype("<i8").tobytes()
        return hashlib.sha256(canon).digest()


@dataclass
class Syndrome:
    bits: np.ndarray
    n: int
    rate: float
    seed_fingerprint: bytes

    def __post_init__(self):
        if self.bits.size and self.bits.max() > 1:
            raise ValueError("syndrome bits must be binary")


def build_factor_graph(n: int, target_rate: float, seed: bytes) -> FactorGraph:
    """Deterministic column-weight-3 graph with m = round(n * (1 - rate)) checks."""
    if n < MIN_BLOCK_BITS:
        raise ValueError(f"block too short: {n} < {MIN_BLOCK_BITS}")
    if not 0 < target_rate < 1:
        raise RateInfeasible(f"target rate {target_rate} outside (0, 1)")
    m = int(round(n * (1.0 - target_rate)))
    if m < VARIABLE_DEGREE + 1 or m >= n:
        raise RateInfeasible(f"rate {target_rate} gives {m} checks for {n} bits")

    stream = HashStream(seed)
    slots = np.repeat(np.arange(n, dtype=np.int64), VARIABLE_DEGREE)
    n_edges = slots.size
    for i in range(n_edges - 1, 0, -1):  # Fisher-Yates over edge slots
        j = stream.below(i + 1)
        slots[i], slots[j] = slots[j], slots[i]

    bounds = (np.arange(m + 1, dtype=np.int64) * n_edges) // m
    members = [set() for _ in range(m)]
    spilled = []
    for c in range(m):
        for p in range(bounds[c], bounds[c + 1]):
            v = int(slots[p])
            if v in members[c]:
                spilled.append((c, v))
            else:
                members[c].add(v)
    # Spill and refill: each duplicate moves to the next check (cyclically
    # from where it collided) that lacks the variable. A variable belongs
    # to at most 3 checks, so this always lands.
    for c0, v in spilled:
        for step in range(1, m + 1):
            c = (c0 + step) % m
            if v not in members[c]:
                members[c].add(v)
                break

    check_index = []
    var_index = []
    for c in range(m):
        for v in sorted(members[c]):
            check_index.append(c)
            var_index.append(v)
    check_index = np.asarray(check_index, dtype=np.int64)
    var_index = np.asarray(var_index, dtype=np.int64)
    counts = np.bincount(check_index, minlength=m)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return FactorGraph(
        n=n, m=m, check_index=check_index, var_index=var_index, check_ptr=ptr, seed=seed
    )


def rate_for_error(error_estimate: float, subset_size: int | None = None) -> float:
    """Pick a committed code rate for a pessimistic design error rate.

    The design point is the estimate plus three binomial sigmas of the
    estimation subset; without a subset size, a fixed pessimism of
    max(25% relative, 0.005 absolute) stands in.
    """
    if error_estimate < 0:
        raise ValueError("error estimate cannot be negative")
    if error_estimate >= QBER_CEILING:
        raise ErrorTooHigh(f"error estimate {error_estimate:.4f} >= {QBER_CEILING}")
    if subset_size:
        margin = 3.0 * math.sqrt(
            error_estimate * (1.0 - error_estimate) / subset_size
        )
    else:
        margin = max(0.25 * error_estimate, 0.005)
    design = error_estimate + margin
    for bound, rate in RATE_TABLE:
        if design <= bound:
            return rate
    return RATE_TABLE[-1][1]


def compute_syndrome(key_bits: np.ndarray, graph: FactorGraph) -> Syndrome:
    """Parity of the key bits on every check."""
    key_bits = np.asarray(key_bits)
    if key_bits.size != graph.n:
        raise LengthMismatch(f"key has {key_bits.size} bits, graph expects {graph.n}")
    sums = np.bincount(
        graph.check_index,
        weights=key_bits[graph.var_index].astype(np.float64),
        minlength=graph.m,
    )
    bits = (sums.astype(np.int64) & 1).astype(np.uint8)
    return Syndrome(
        bits=bits,
        n=graph.n,
        rate=1.0 - graph.m / graph.n,
        seed_fingerprint=hashlib.sha256(graph.seed).digest()[:8],
    )


def _syndrome_of(bits: np.ndarray, graph: FactorGraph) -> np.ndarray:
    sums = np.bincount(
        graph.check_index,
        weights=bits[graph.var_index].astype(np.float64),
        minlength=graph.m,
    )
    return (sums.astype(np.int64) & 1).astype(np.uint8)


def decode(
    bob_key: np.ndarray,
    syndrome: Syndrome,
    graph: FactorGraph,
    error_rate: float,
    max_iters: int = 100,
) -> np.ndarray:
    """Sum-product decoding of Bob's key toward Alice's syndrome.

    Works on the error pattern e with H e = (syndrome XOR syndrome(bob)),
    channel prior P(e_i = 1) = error_rate, and returns bob_key XOR e_hat
    once the syndrome matches.
    """
    bob_key = np.asarray(bob_key, dtype=np.uint8)
    if bob_key.size != graph.n:
        raise LengthMismatch(f"key has {bob_key.size} bits, graph expects {graph.n}")
    if not 0 <= error_rate < 0.5:
        raise ValueError("error rate must lie in [0, 0.5)")

    delta = np.bitwise_xor(syndrome.bits, _syndrome_of(bob_key, graph))
    if not delta.any():
        return bob_key.copy()

    eps = min(max(error_rate, 1e-4), 0.499)
    prior = math.log((1.0 - eps) / eps)  # LLR that an error bit is 0
    check_sign = 1.0 - 2.0 * delta[graph.check_index]

    msg_vc = np.full(graph.n_edges, prior)
    for _ in range(max_iters):
        half = np.tanh(np.clip(msg_vc, -LLR_CLIP, LLR_CLIP) / 2.0)
        half = np.where(np.abs(half) < 1e-12, np.sign(half) * 1e-12 + 1e-15, half)
        prod = np.multiply.reduceat(half, graph.check_ptr[:-1])
        msg_cv = 2.0 * np.arctanh(
            np.clip(check_sign * prod[graph.check_index] / half, -0.999999999, 0.999999999)
        )
        totals = prior + np.bincount(
            graph.var_index, weights=msg_cv, minlength=graph.n
        )
        e_hat = (totals[graph.var_index] < 0).astype(np.uint8)
        errors = (totals < 0).astype(np.uint8)
        if np.array_equal(_syndrome_of(errors, graph), delta):
            return np.bitwise_xor(bob_key, errors)
        msg_vc = totals[graph.var_index] - msg_cv
    raise DecodeFailure(f"no syndrome match after {max_iters} iterations")


def key_digest(bits: np.ndarray) -> bytes:
    """64-bit verification digest exchanged after decoding."""
    packed = np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()
    return hashlib.blake2b(packed, digest_size=8).digest()


def reconcile_keys(
    alice_bits: np.ndarray,
    bob_bits: np.ndarray,
    error_estimate: float,
    seed: bytes,
    subset_size: int | None = None,
    channel=None,
    max_iters: int = 100,
):
    """Run the full one-way reconciliation over one key pair.

    Keys are processed in blocks of at most 2^16 bits; a short block is
    padded with publicly known zeros which never enter the output.
    Returns (corrected bob key, syndrome bits spent, code rate used).

    Raises HashMismatch if the corrected keys differ despite matching
    syndromes, which the 64-bit digest exchange catches.
    """
    alice_bits = np.asarray(alice_bits, dtype=np.uint8)
    bob_bits = np.asarray(bob_bits, dtype=np.uint8)
    if alice_bits.size != bob_bits.size:
        raise LengthMismatch("key lengths differ")

    rate = rate_for_error(error_estimate, subset_size)
    corrected = []
    n_syn = 0
    total = alice_bits.size
    n_blocks = max(1, math.ceil(total / MAX_BLOCK_BITS))
    for i in range(n_blocks):
        a = alice_bits[i * MAX_BLOCK_BITS : (i + 1) * MAX_BLOCK_BITS]
        b = bob_bits[i * MAX_BLOCK_BITS : (i + 1) * MAX_BLOCK_BITS]
        pad = max(MIN_BLOCK_BITS - a.size, 0)
        if pad:
            a = np.concatenate([a, np.zeros(pad, dtype=np.uint8)])
            b = np.concatenate([b, np.zeros(pad, dtype=np.uint8)])
        graph = build_factor_graph(a.size, rate, derive_seed(seed, f"block{i}"))
        syn = compute_syndrome(a, graph)
        if channel is not None:
            from qkdsim import sifting

            sifting.log_syndrome(channel, syn)
        fixed = decode(b, syn, graph, error_estimate, max_iters)
        n_syn += graph.m
        corrected.append(fixed[: fixed.size - pad] if pad else fixed)

    bob_corrected = np.concatenate(corrected) if corrected else np.empty(0, np.uint8)
    digest_a = key_digest(alice_bits)
    digest_b = key_digest(bob_corrected)
    if channel is not None:
        from qkdsim import sifting

        sifting.log_key_hash(channel, "alice", digest_a)
        sifting.log_key_hash(channel, "bob", digest_b)
    if digest_a != digest_b:
        raise HashMismatch("corrected keys differ despite matching syndromes")
    return bob_corrected, n_syn, rate
