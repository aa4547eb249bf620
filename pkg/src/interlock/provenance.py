"""Causal FLOP accounting for interlock nodes.

Every node keeps a log with one entry per compute session that could have
causally influenced its local state, storing the highest FLOP count seen for
each. Outbound data carries a snapshot of the whole log (a prefix); inbound
prefixes are merged with per-source maximum semantics, which makes the merge
idempotent, commutative and associative, and makes the causal total (the sum
over sources) immune to double counting when data flows in cycles.

External data entering the cluster is tracked separately by digest: entries
backed by an audit or a sufficiently old timestamp are always admitted, while
unexplained bytes accumulate against a per-session budget.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from . import crypto

FLOP_COUNT_BITS = 96
MAX_FLOP_COUNT = 2**FLOP_COUNT_BITS - 1

MAGIC = b"FHEG"
FORMAT_VERSION = 1
HEADER_SIZE = 16
ACCEL_ENTRY_TAG = 0x01
EXTERNAL_ENTRY_TAG = 0x02
ACCEL_ENTRY_SIZE = 29  # tag + 16-byte session id + 12-byte count
EXTERNAL_ENTRY_SIZE = 41  # tag + 32-byte digest + 8-byte amount

DEFAULT_UNEXPLAINED_BUDGET = 1 << 20  # 1 MiB per session
DEFAULT_ATTESTATION_DELAY_DAYS = 90

ATTESTATION_AUDITED = "audited"
ATTESTATION_DELAYED = "delayed"

GUARD_OK = "ok"
GUARD_HALT = "halt"


class CounterExhausted(Exception):
    """Local FLOP counter would exceed its 96-bit range; session must end."""


class DecodeError(Exception):
    """Serialized FLOP log is malformed."""


class UnexplainedDataError(Exception):
    """Unattested external data would exceed the unexplained-data budget."""


class AttestationError(Exception):
    """External-data attestation is invalid or not yet usable."""


class CertificateError(Exception):
    """A FLOP certificate failed signature verification."""


class StreamHalted(Exception):
    """Data was pushed to an output stream after its guard halted."""


@dataclass(frozen=True, order=True)
class SessionId:
    """16-byte per-power-cycle identifier under which local FLOPs accrue."""

    id: bytes

    def __post_init__(self):
        if len(self.id) != 16:
            raise ValueError("session id must be 16 bytes")

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "SessionId":
        return cls(crypto.rand_bytes(rng, 16))

    @property
    def hex(self) -> str:
        return self.id.hex()

    def __repr__(self) -> str:
        return f"SessionId({self.id.hex()[:8]}…)"


def _check_count(value: int) -> int:
    if not 0 <= value <= MAX_FLOP_COUNT:
        raise CounterExhausted(f"FLOP count {value} outside 96-bit range")
    return value


@dataclass(frozen=True)
class Attestation:
    """Authority statement about one external-data digest.

    For kind "audited" the authority inspected the data itself; for kind
    "delayed" it only asserts having first seen the digest at `timestamp`
    (days, on the simulation clock).
    """

    kind: str
    authority: str
    timestamp: int

    def __post_init__(self):
        if self.kind not in (ATTESTATION_AUDITED, ATTESTATION_DELAYED):
            raise ValueError(f"unknown attestation kind {self.kind!r}")


@dataclass(frozen=True)
class ExternalDataEntry:
    """Hash and size of data admitted from outside the cluster."""

    digest: bytes
    amount: int
    attestation: Attestation | None = None

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError("external-data digest must be 32 bytes")
        if self.amount <= 0:
            raise ValueError("external-data amount must be positive")


@dataclass(frozen=True)
class Prefix:
    """Immutable log snapshot prepended to outbound data.

    `stream_buffer` is the allotment of additional local FLOPs permitted
    while the data is still streaming out after the snapshot was taken.
    """

    log: "FlopLog"
    stream_buffer: int = 0

    def __post_init__(self):
        _check_count(self.stream_buffer)


class FlopLog:
    """Per-source maximum FLOP counts plus external-data entries."""

    def __init__(
        self,
        local_session: SessionId,
        per_source: Mapping[SessionId, int] | None = None,
        externals: Iterable[ExternalDataEntry] = (),
    ):
        self.local_session = local_session
        self.per_source: dict[SessionId, int] = {local_session: 0}
        if per_source:
            for sid, count in per_source.items():
                self.per_source[sid] = _check_count(count)
        self.externals: dict[bytes, ExternalDataEntry] = {}
        for entry in externals:
            self._merge_external(entry)

    # -- local accounting -------------------------------------------------

    def record_local_flops(self, delta: int) -> "FlopLog":
        """Add `delta` local FLOPs; raises CounterExhausted on overflow."""
        if delta < 0:
            raise ValueError("delta must be non-negative")
        new = self.per_source[self.local_session] + delta
        self.per_source[self.local_session] = _check_count(new)
        return self

    @property
    def local_count(self) -> int:
        return self.per_source[self.local_session]

    def causal_total(self) -> int:
        """Sum of FLOPs over every source that could have influenced us."""
        return sum(self.per_source.values())

    def unattested_bytes(self) -> int:
        return sum(e.amount for e in self.externals.values() if e.attestation is None)

    # -- merging ----------------------------------------------------------

    def merge_prefix(self, incoming: Prefix) -> "FlopLog":
        """Fold an inbound prefix into this log (per-source maximum)."""
        return self.merge_log(incoming.log)

    def merge_log(self, other: "FlopLog") -> "FlopLog":
        for sid, count in other.per_source.items():
            _check_count(count)
            if count > self.per_source.get(sid, 0):
                self.per_source[sid] = count
            else:
                self.per_source.setdefault(sid, count)
        for entry in other.externals.values():
            self._merge_external(entry)
        return self

    def _merge_external(self, entry: ExternalDataEntry) -> None:
        # Duplicate digests are the same data: keep the larger declared
        # amount and prefer whichever copy carries an attestation.
        have = self.externals.get(entry.digest)
        if have is None:
            self.externals[entry.digest] = entry
            return
        amount = max(have.amount, entry.amount)
        attestation = have.attestation or entry.attestation
        self.externals[entry.digest] = replace(
            have, amount=amount, attestation=attestation
        )

    # -- snapshots ---------------------------------------------------------

    def copy(self) -> "FlopLog":
        return FlopLog(self.local_session, dict(self.per_source), self.externals.values())

    def make_prefix(self, stream_buffer: int = 0) -> Prefix:
        """Snapshot the current log; later local mutation never leaks in."""
        return Prefix(self.copy(), stream_buffer)

    # -- external data ----------------------------------------------------

    def register_external_data(
        self,
        entry: ExternalDataEntry,
        budget: int = DEFAULT_UNEXPLAINED_BUDGET,
        now: int | None = None,
        min_delay_days: int = DEFAULT_ATTESTATION_DELAY_DAYS,
    ) -> "FlopLog":
        """Admit external data.

        Attested entries are always admitted (a delayed attestation must be
        at least `min_delay_days` old at `now`); unattested entries count
        against the unexplained-data `budget` for the whole session.
        """
        att = entry.attestation
        if att is None:
            if self.unattested_bytes() + entry.amount > budget:
                raise UnexplainedDataError(
                    f"unexplained data budget exceeded: "
                    f"{self.unattested_bytes()} + {entry.amount} > {budget}"
                )
        elif att.kind == ATTESTATION_DELAYED:
            if now is None:
                raise AttestationError("delayed attestation requires current time")
            age = now - att.timestamp
            if age < min_delay_days:
                raise AttestationError(
                    f"digest first seen {age} days ago; {min_delay_days} required"
                )
        self._merge_external(entry)
        return self

    # -- equality / repr ----------------------------------------------------

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FlopLog):
            return NotImplemented
        return (
            self.local_session == other.local_session
            and self.per_source == other.per_source
            and self.externals == other.externals
        )

    def __repr__(self) -> str:
        return (
            f"FlopLog(local={self.local_session!r}, sources={len(self.per_source)}, "
            f"total={self.causal_total()})"
        )


def new_session(rng: random.Random | None = None) -> tuple[SessionId, FlopLog]:
    """Start a fresh session: new id, log containing only {self: 0}."""
    sid = SessionId.generate(rng)
    return sid, FlopLog(sid)


# -- streaming guard --------------------------------------------------------


def stream_guard(prefix: Prefix, local_flops_since_emit: int) -> str:
    """GUARD_OK while growth stays within the declared buffer, else halt.

    The boundary is inclusive: growth equal to the buffer is still ok; only
    strictly exceeding it halts the stream.
    """
    if local_flops_since_emit <= prefix.stream_buffer:
        return GUARD_OK
    return GUARD_HALT


class OutputStream:
    """One streaming emission: tracks local growth and stages inbound data.

    Incoming prefixes that arrive while the stream is open are staged rather
    than merged, so they cannot influence bytes already promised under the
    emitted prefix; `complete` hands them back for merging.
    """

    def __init__(self, prefix: Prefix):
        self.prefix = prefix
        self.flops_since_emit = 0
        self.halted = False
        self.bytes_emitted = 0
        self._staged: list[Prefix] = []

    def note_local_flops(self, delta: int) -> str:
        self.flops_since_emit += delta
        if stream_guard(self.prefix, self.flops_since_emit) == GUARD_HALT:
            self.halted = True
        return GUARD_HALT if self.halted else GUARD_OK

    def emit(self, nbytes: int) -> None:
        if self.halted:
            raise StreamHalted("stream guard has halted this stream")
        self.bytes_emitted += nbytes

    def stage_incoming(self, prefix: Prefix) -> None:
        self._staged.append(prefix)

    def complete(self) -> list[Prefix]:
        """Close the stream and return staged prefixes for merging."""
        staged, self._staged = self._staged, []
        return staged


# -- binary codec ------------------------------------------------------------


def encoded_size(n_sources: int, n_externals: int = 0) -> int:
    return HEADER_SIZE + n_sources * ACCEL_ENTRY_SIZE + n_externals * EXTERNAL_ENTRY_SIZE


def encode_log(log: FlopLog) -> bytes:
    """Serialize to the wire format (big-endian throughout).

    Header: magic "FHEG", format version u16, entry count u32, 6 reserved
    bytes. The local session is always the first accelerator entry so the
    decoder can recover it; remaining sources and externals follow in sorted
    order for a canonical encoding. Attestations are auditor-side records
    and are not carried on the wire.
    """
    out = bytearray()
    n_entries = len(log.per_source) + len(log.externals)
    out += MAGIC
    out += struct.pack(">HI", FORMAT_VERSION, n_entries)
    out += b"\x00" * 6

    def accel_entry(sid: SessionId, count: int) -> bytes:
        return bytes([ACCEL_ENTRY_TAG]) + sid.id + count.to_bytes(12, "big")

    out += accel_entry(log.local_session, log.per_source[log.local_session])
    for sid in sorted(s for s in log.per_source if s != log.local_session):
        out += accel_entry(sid, log.per_source[sid])
    for digest in sorted(log.externals):
        entry = log.externals[digest]
        out += bytes([EXTERNAL_ENTRY_TAG]) + entry.digest + entry.amount.to_bytes(8, "big")
    return bytes(out)


def decode_log(data: bytes) -> FlopLog:
    """Inverse of encode_log; raises DecodeError on malformed input."""
    if len(data) < HEADER_SIZE:
        raise DecodeError("truncated header")
    if data[:4] != MAGIC:
        raise DecodeError(f"bad magic {data[:4]!r}")
    version, n_entries = struct.unpack(">HI", data[4:10])
    if version != FORMAT_VERSION:
        raise DecodeError(f"unsupported format version {version}")

    pos = HEADER_SIZE
    local: SessionId | None = None
    per_source: dict[SessionId, int] = {}
    externals: list[ExternalDataEntry] = []
    for _ in range(n_entries):
        if pos >= len(data):
            raise DecodeError("truncated entry list")
        tag = data[pos]
        if tag == ACCEL_ENTRY_TAG:
            if pos + ACCEL_ENTRY_SIZE > len(data):
                raise DecodeError("truncated accelerator entry")
            sid = SessionId(data[pos + 1 : pos + 17])
            count = int.from_bytes(data[pos + 17 : pos + 29], "big")
            if sid in per_source:
                raise DecodeError(f"duplicate source id {sid.hex}")
            per_source[sid] = count
            if local is None:
                local = sid
            pos += ACCEL_ENTRY_SIZE
        elif tag == EXTERNAL_ENTRY_TAG:
            if pos + EXTERNAL_ENTRY_SIZE > len(data):
                raise DecodeError("truncated external entry")
            digest = data[pos + 1 : pos + 33]
            amount = int.from_bytes(data[pos + 33 : pos + 41], "big")
            externals.append(ExternalDataEntry(digest, amount))
            pos += EXTERNAL_ENTRY_SIZE
        else:
            raise DecodeError(f"unknown entry tag 0x{tag:02x}")
    if pos != len(data):
        raise DecodeError("trailing bytes after entry list")
    if local is None:
        raise DecodeError("log has no accelerator entries")
    return FlopLog(local, per_source, externals)


def encode_prefix(prefix: Prefix) -> bytes:
    return prefix.stream_buffer.to_bytes(12, "big") + encode_log(prefix.log)


def decode_prefix(data: bytes) -> Prefix:
    if len(data) < 12:
        raise DecodeError("truncated prefix")
    buffer = int.from_bytes(data[:12], "big")
    return Prefix(decode_log(data[12:]), buffer)


# -- certificates -------------------------------------------------------------


@dataclass(frozen=True)
class FlopCertificate:
    """Signed FLOP log exported with output data."""

    log: FlopLog
    signer: bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        return crypto.derive(b"flop-certificate", self.signer, encode_log(self.log))


def sign_log(log: FlopLog, signer: bytes, key: crypto.SigningKey) -> FlopCertificate:
    cert = FlopCertificate(log.copy(), signer, b"")
    return replace(cert, signature=key.sign(cert.signed_payload()))


def combine_certificates(
    certs: Iterable[FlopCertificate],
    directory: Mapping[bytes, crypto.VerifyKey],
) -> int:
    """Total FLOPs across certificates without double counting.

    Verifies every signature, then takes the per-source maximum across all
    logs before summing, so overlapping sources are counted once.
    """
    combined: dict[SessionId, int] = {}
    for i, cert in enumerate(certs):
        key = directory.get(cert.signer)
        if key is None or not key.verify(cert.signed_payload(), cert.signature):
            raise CertificateError(
                f"certificate {i} from signer {cert.signer.hex()} failed verification"
            )
        for sid, count in cert.log.per_source.items():
            if count > combined.get(sid, 0):
                combined[sid] = count
    return sum(combined.values())
