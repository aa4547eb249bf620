"""Pseudo-randomized traffic authentication.

Instead of authenticating every block, the sender draws gaps uniformly from
[0, 2N] out of a shared seed and attaches a real tag only at the scheduled
positions; every other block carries a dummy tag of identical size, so an
observer cannot tell which blocks are protected. Receivers, who know the
seed, verify each real-tagged block only with probability f drawn from their
own private stream, and throttle the channel after an unpredictable number
of discrepancies. High-priority blocks are always tagged and always checked.

The expected authenticated fraction is 1/(N+1) and a single tampered block
is caught with probability f/(N+1); `detection_probability` gives the
closed form for k independent modifications. Tag computation is charged per
block whether real or dummy, modeling an always-running crypto engine.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import crypto

TAG_SIZE = 16

PRIORITY_NORMAL = "normal"
PRIORITY_HIGH = "high"
_PRIORITY_CODE = {PRIORITY_NORMAL: 0, PRIORITY_HIGH: 1}
_PRIORITY_NAME = {0: PRIORITY_NORMAL, 1: PRIORITY_HIGH}

OUTCOME_ACCEPTED = "accepted"  # passed through unchecked
OUTCOME_VERIFIED = "verified"  # checked and authentic
OUTCOME_DISCREPANCY = "discrepancy"

DEFAULT_THROTTLE_MAX = 4


def _draw_int(seed: bytes, label: bytes, index: int, bound: int) -> int:
    """Deterministic uniform draw on [0, bound) from (seed, label, index)."""
    raw = crypto.derive(seed, label, index.to_bytes(8, "big"))
    return int.from_bytes(raw[:8], "big") % bound


def _draw_unit(seed: bytes, label: bytes, index: int) -> float:
    raw = crypto.derive(seed, label, index.to_bytes(8, "big"))
    return int.from_bytes(raw[:8], "big") / 2**64


class AuthSchedule:
    """Seeded gap sequence deciding which block positions carry real tags."""

    def __init__(self, seed: bytes, n_gap: int):
        if n_gap < 0:
            raise ValueError("gap parameter must be non-negative")
        self.seed = seed
        self.n_gap = n_gap
        self.cursor = 0  # draw index
        self.next_real = self._gap_at(0)
        self.cursor = 1

    def _gap_at(self, index: int) -> int:
        return _draw_int(self.seed, b"gap", index, 2 * self.n_gap + 1)

    def next_gap(self) -> int:
        """Draw the next gap: uniform on [0, 2N], deterministic per index."""
        gap = self._gap_at(self.cursor)
        self.cursor += 1
        return gap

    def advance_past(self, index: int) -> None:
        """Move next_real beyond `index` (consuming gaps in order)."""
        while self.next_real <= index:
            self.next_real += 1 + self.next_gap()

    def is_scheduled(self, index: int) -> bool:
        """True when `index` is a scheduled real-tag position.

        Indices must be presented in non-decreasing order.
        """
        self.advance_past(index - 1)
        return index == self.next_real

    @staticmethod
    def real_positions(seed: bytes, n_gap: int, upto: int) -> set[int]:
        """All scheduled positions below `upto` (fresh replica, no state)."""
        sched = AuthSchedule(seed, n_gap)
        positions: set[int] = set()
        while sched.next_real < upto:
            positions.add(sched.next_real)
            sched.next_real += 1 + sched.next_gap()
        return positions


def expected_fraction(n_gap: int) -> float:
    """Expected fraction of real-tagged blocks for gap parameter N."""
    return 1.0 / (n_gap + 1)


def detection_probability(n_gap: int, check_fraction: float, k_modified: int) -> float:
    """Chance that at least one of k independent modifications is caught."""
    if k_modified < 1:
        raise ValueError("k_modified must be at least 1")
    if not 0.0 <= check_fraction <= 1.0:
        raise ValueError("check_fraction must be in [0, 1]")
    per_block = check_fraction / (n_gap + 1)
    return 1.0 - (1.0 - per_block) ** k_modified


@dataclass(frozen=True)
class TaggedBlock:
    """Wire block: payload plus a fixed-size tag that may be real or dummy."""

    index: int
    payload: bytes
    tag: bytes
    priority: str = PRIORITY_NORMAL

    def __post_init__(self):
        if len(self.tag) != TAG_SIZE:
            raise ValueError("tag must be 16 bytes")

    def encode(self) -> bytes:
        return (
            struct.pack(">BQI", _PRIORITY_CODE[self.priority], self.index, len(self.payload))
            + self.payload
            + self.tag
        )

    @classmethod
    def decode(cls, data: bytes) -> "TaggedBlock":
        if len(data) < 13 + TAG_SIZE:
            raise ValueError("tagged block too short")
        prio, index, length = struct.unpack(">BQI", data[:13])
        if len(data) != 13 + length + TAG_SIZE or prio not in _PRIORITY_NAME:
            raise ValueError("malformed tagged block")
        payload = data[13 : 13 + length]
        return cls(index, payload, data[13 + length :], _PRIORITY_NAME[prio])


def _real_tag(aead: AESGCM, index: int, priority: str, payload: bytes) -> bytes:
    # GMAC over priority || index || payload; empty plaintext leaves only the tag.
    nonce = b"\x00\x00\x00\x01" + index.to_bytes(8, "big")
    aad = bytes([_PRIORITY_CODE[priority]]) + index.to_bytes(8, "big") + payload
    return aead.encrypt(nonce, b"", aad)


def _dummy_tag(dummy_seed: bytes, index: int) -> bytes:
    return crypto.derive(dummy_seed, b"dummy-tag", index.to_bytes(8, "big"))[:TAG_SIZE]


class Sender:
    """Emits tagged blocks according to the schedule.

    `min_spacing` models limited crypto-engine capacity under bursts: a
    scheduled tag within that many blocks of the previous real tag is
    downgraded to a dummy. Spacing is measured in block positions, which the
    receiver can mirror deterministically. The default of 0 disables
    skipping so baseline statistics match 1/(N+1).
    """

    def __init__(self, key: bytes, seed: bytes, n_gap: int, min_spacing: int = 0):
        self.schedule = AuthSchedule(seed, n_gap)
        self.min_spacing = min_spacing
        self.block_index = 0
        self.last_real: int | None = None
        self.crypto_work = 0  # constant per block: engine always running
        self._aead = AESGCM(key)
        self._dummy_seed = crypto.derive(seed, b"sender-dummy")

    def _too_close(self, index: int) -> bool:
        return (
            self.min_spacing > 0
            and self.last_real is not None
            and index - self.last_real < self.min_spacing
        )

    def emit(self, payload: bytes, priority: str = PRIORITY_NORMAL) -> TaggedBlock:
        index = self.block_index
        self.block_index += 1
        scheduled = self.schedule.is_scheduled(index)
        real = priority == PRIORITY_HIGH or (scheduled and not self._too_close(index))
        if real:
            tag = _real_tag(self._aead, index, priority, payload)
            self.last_real = index
        else:
            tag = _dummy_tag(self._dummy_seed, index)
        self.crypto_work += 1
        return TaggedBlock(index, payload, tag, priority)


@dataclass
class ReceiverPolicy:
    """Receiver-side verification policy and throttle state."""

    check_fraction: float
    throttle_max: int = DEFAULT_THROTTLE_MAX
    discrepancies: int = 0
    throttled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.check_fraction <= 1.0:
            raise ValueError("check fraction must be in [0, 1]")


class Receiver:
    """Verifies a subsample of real-tagged blocks and throttles on failures.

    The check decision for each block comes from a receiver-private seed, so
    a sender-side observer cannot predict which blocks will be checked. The
    discrepancy count that triggers throttling is itself drawn uniformly
    from [1, throttle_max], so a canary device cannot learn a fixed
    threshold.
    """

    def __init__(
        self,
        key: bytes,
        seed: bytes,
        n_gap: int,
        policy: ReceiverPolicy,
        policy_seed: bytes,
        min_spacing: int = 0,
    ):
        self.schedule = AuthSchedule(seed, n_gap)
        self.policy = policy
        self.policy_seed = policy_seed
        self.min_spacing = min_spacing
        self.last_real: int | None = None
        self.rate_factor = 1.0
        self.crypto_work = 0
        self._aead = AESGCM(key)
        self._throttle_after = 1 + _draw_int(policy_seed, b"throttle", 0, policy.throttle_max)

    def would_check(self, index: int) -> bool:
        return _draw_unit(self.policy_seed, b"check", index) < self.policy.check_fraction

    def _too_close(self, index: int) -> bool:
        return (
            self.min_spacing > 0
            and self.last_real is not None
            and index - self.last_real < self.min_spacing
        )

    def _note_discrepancy(self) -> None:
        self.policy.discrepancies += 1
        if not self.policy.throttled and self.policy.discrepancies >= self._throttle_after:
            self.policy.throttled = True
            self.rate_factor *= 0.5

    def process(self, block: TaggedBlock) -> str:
        """accept, verify, or flag one block (in index order)."""
        self.crypto_work += 1
        scheduled = self.schedule.is_scheduled(block.index)
        is_real = block.priority == PRIORITY_HIGH or (
            scheduled and not self._too_close(block.index)
        )
        if is_real:
            self.last_real = block.index
        must_check = block.priority == PRIORITY_HIGH
        if not is_real:
            return OUTCOME_ACCEPTED
        if not must_check and not self.would_check(block.index):
            return OUTCOME_ACCEPTED
        expected = _real_tag(self._aead, block.index, block.priority, block.payload)
        if expected != block.tag:
            self._note_discrepancy()
            return OUTCOME_DISCREPANCY
        return OUTCOME_VERIFIED


def throttle_threshold(policy_seed: bytes, throttle_max: int = DEFAULT_THROTTLE_MAX) -> int:
    """The (seed-dependent) discrepancy count at which throttling starts."""
    return 1 + _draw_int(policy_seed, b"throttle", 0, throttle_max)


def empirical_gap_mean(seed: bytes, n_gap: int, draws: int) -> float:
    """Mean of `draws` consecutive gaps; used for calibration checks."""
    sched = AuthSchedule(seed, n_gap)
    total = sched.next_real  # first gap was drawn in the constructor
    for _ in range(draws - 1):
        total += sched.next_gap()
    return total / draws


def measure_stream(
    seed: bytes,
    n_gap: int,
    check_fraction: float,
    policy_seed: bytes,
    n_blocks: int,
) -> tuple[float, float]:
    """(real-tag fraction, single-tamper detection rate) over one stream.

    Detection is measured over every possible single-block tamper position:
    a tampered block is caught exactly when its position is real-tagged and
    the receiver's private draw selects it for checking.
    """
    positions = AuthSchedule.real_positions(seed, n_gap, n_blocks)
    caught = sum(
        1
        for i in positions
        if _draw_unit(policy_seed, b"check", i) < check_fraction
    )
    return len(positions) / n_blocks, caught / n_blocks
