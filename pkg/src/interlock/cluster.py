"""Encrypted cluster formation and the per-channel AEAD data path.

Formation follows a fixed sequence: a directed communication graph is
declared up front; each node derives its send list from the graph, obtains
endpoint public keys either from a governance service (which also issues an
approval certificate) or from local lookup tables, generates one symmetric
session key for all of its outbound traffic, wraps that key to each approved
endpoint, and installs inbound keys only for sources it is allowed to hear
from. Data blocks are sealed with AES-GCM under a strictly increasing nonce
counter; receivers keep a sliding replay window and periodically check an
identity-signed checkpoint over the hashes of transmitted blocks, which
bounds how long a stolen session key can be used to forge traffic.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import crypto

SESSION_KEY_SIZE = 32
NONCE_BITS = 96
MAX_NONCE = 2**NONCE_BITS - 1
REPLAY_WINDOW = 2**16
DEFAULT_CHECKPOINT_INTERVAL = 1024

ROLE_OUTBOUND = "outbound"
ROLE_INBOUND = "inbound"

MODE_GOVERNANCE = "governance"
MODE_DECENTRALIZED = "decentralized"

WRAP_PROTOCOL = 1


class ConfigurationError(Exception):
    """Cluster plan or device registry is inconsistent."""


class LookupFailure(Exception):
    """A requested device has no key directory entry."""


class DirectoryMismatch(Exception):
    """Independent key tables disagree about a device's keys."""


class ApprovalDenied(Exception):
    """Governance refused communication with an endpoint."""


class ChannelRefused(Exception):
    """Inbound channel rejected: source not authorized."""


class AuthenticationFailure(Exception):
    """A sealed block failed tag verification and was discarded."""


class ReplayDetected(Exception):
    """A block's nonce was already accepted or fell below the window."""


class ChannelExhausted(Exception):
    """Nonce counter ran out; the channel must be re-established."""


class ChainMismatch(Exception):
    """Received traffic disagrees with the sender's signed checkpoint."""


@dataclass(frozen=True, order=True)
class DeviceId:
    """16-byte device identifier, stable across power cycles."""

    id: bytes

    def __post_init__(self):
        if len(self.id) != 16:
            raise ValueError("device id must be 16 bytes")

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "DeviceId":
        return cls(crypto.rand_bytes(rng, 16))

    @property
    def hex(self) -> str:
        return self.id.hex()

    def __repr__(self) -> str:
        return f"DeviceId({self.id.hex()[:8]}…)"


@dataclass(frozen=True)
class EdgeLimits:
    """Optional bandwidth/time caps attached to a plan edge or approval.

    Limits are recorded and reported; enforcement is out of scope.
    """

    max_bytes: int | None = None
    max_ticks: int | None = None


@dataclass(frozen=True)
class ClusterPlan:
    """Declared directed graph of permitted communication pairs."""

    devices: frozenset[DeviceId]
    edges: frozenset[tuple[DeviceId, DeviceId]]
    limits: Mapping[tuple[DeviceId, DeviceId], EdgeLimits] | None = None

    def __post_init__(self):
        for src, dst in self.edges:
            if src == dst:
                raise ConfigurationError(f"self-edge on {src}")
            if src not in self.devices or dst not in self.devices:
                raise ConfigurationError(f"edge {src}->{dst} uses unregistered device")

    @classmethod
    def all_to_all(cls, devices: Iterable[DeviceId]) -> "ClusterPlan":
        devs = frozenset(devices)
        edges = frozenset((a, b) for a in devs for b in devs if a != b)
        return cls(devs, edges)

    def allows(self, src: DeviceId, dst: DeviceId) -> bool:
        return (src, dst) in self.edges


def build_send_list(plan: ClusterPlan, self_id: DeviceId) -> set[DeviceId]:
    """Endpoints this node must send to: {dst | (self, dst) in edges}."""
    if self_id not in plan.devices:
        raise ConfigurationError(f"{self_id} not registered in the cluster plan")
    return {dst for (src, dst) in plan.edges if src == self_id}


# -- key lookup (step 3) ------------------------------------------------------


@dataclass(frozen=True)
class DeviceKeys:
    """Public half of a device's key material."""

    sig: crypto.VerifyKey
    enc: crypto.KemPublicKey


@dataclass
class KeyDirectory:
    """Device-id to public-key table with a recorded provenance."""

    entries: dict[DeviceId, DeviceKeys]
    provenance: str = "local"

    def lookup(self, want: Iterable[DeviceId]) -> tuple[dict[DeviceId, DeviceKeys], set[DeviceId]]:
        found, missing = {}, set()
        for dev in want:
            if dev in self.entries:
                found[dev] = self.entries[dev]
            else:
                missing.add(dev)
        return found, missing


def check_directory_consistency(
    tables: Sequence[KeyDirectory], want: Iterable[DeviceId]
) -> dict[DeviceId, DeviceKeys]:
    """Cross-check several independently maintained tables.

    All tables must agree on every requested device; any disagreement is a
    hard failure since it implies at least one table is compromised.
    """
    if not tables:
        raise LookupFailure("no key tables provided")
    result: dict[DeviceId, DeviceKeys] = {}
    for dev in want:
        seen: list[DeviceKeys] = []
        for table in tables:
            entry = table.entries.get(dev)
            if entry is None:
                raise LookupFailure(f"{dev} missing from table {table.provenance!r}")
            seen.append(entry)
        if any(entry != seen[0] for entry in seen[1:]):
            raise DirectoryMismatch(f"key tables disagree on {dev}")
        result[dev] = seen[0]
    return result


@dataclass(frozen=True)
class ApprovalCertificate:
    """Governance-signed list of endpoints a requester may send to."""

    requester: DeviceId
    endpoints: frozenset[DeviceId]
    limits: EdgeLimits | None
    signature: bytes

    def signed_payload(self) -> bytes:
        body = self.requester.id + b"".join(d.id for d in sorted(self.endpoints))
        if self.limits is not None:
            body += struct.pack(
                ">qq",
                -1 if self.limits.max_bytes is None else self.limits.max_bytes,
                -1 if self.limits.max_ticks is None else self.limits.max_ticks,
            )
        return crypto.derive(b"approval-certificate", body)

    def authorizes(self, src: DeviceId, dst: DeviceId) -> bool:
        return src == self.requester and dst in self.endpoints


class GovernanceService:
    """External approval service for option "governance" key lookup.

    Single-threaded actor owning the authoritative key directory and an
    edge policy; grants produce a signed ApprovalCertificate plus the
    public keys of the approved endpoints.
    """

    def __init__(
        self,
        directory: KeyDirectory,
        allowed_edges: frozenset[tuple[DeviceId, DeviceId]],
        signing_key: crypto.SigningKey,
    ):
        self.directory = directory
        self.allowed_edges = allowed_edges
        self.signing_key = signing_key

    @property
    def verify_key(self) -> crypto.VerifyKey:
        return self.signing_key.verify_key

    def request_approval(
        self, requester: DeviceId, want: Iterable[DeviceId], limits: EdgeLimits | None = None
    ) -> tuple[ApprovalCertificate, dict[DeviceId, DeviceKeys], set[DeviceId], set[DeviceId]]:
        """Returns (certificate, keys for approved endpoints, denied, missing)."""
        want = set(want)
        found, missing = self.directory.lookup(want)
        approved = {d for d in found if (requester, d) in self.allowed_edges}
        denied = set(found) - approved
        cert = ApprovalCertificate(requester, frozenset(approved), limits, b"")
        cert = ApprovalCertificate(
            requester, frozenset(approved), limits, self.signing_key.sign(cert.signed_payload())
        )
        keys = {d: found[d] for d in approved}
        return cert, keys, denied, missing


@dataclass
class KeyAcquisition:
    """Outcome of endpoint key lookup: keys plus reported denials/misses."""

    keys: dict[DeviceId, DeviceKeys]
    certificate: ApprovalCertificate | None
    denied: set[DeviceId] = field(default_factory=set)
    missing: set[DeviceId] = field(default_factory=set)


def acquire_endpoint_keys(
    mode: str,
    want: Iterable[DeviceId],
    *,
    requester: DeviceId | None = None,
    service: GovernanceService | None = None,
    tables: Sequence[KeyDirectory] | None = None,
) -> KeyAcquisition:
    """Step-3 key lookup in either governance or decentralized mode.

    Governance mode asks `service` for approval and returns its certificate;
    decentralized mode consults the local `tables`, cross-checking them for
    consistency when more than one is given. Denied and unknown endpoints
    are reported in the result rather than silently dropped.
    """
    want = set(want)
    if mode == MODE_GOVERNANCE:
        if service is None or requester is None:
            raise ConfigurationError("governance mode needs a service and requester")
        cert, keys, denied, missing = service.request_approval(requester, want)
        return KeyAcquisition(keys, cert, denied, missing)
    if mode == MODE_DECENTRALIZED:
        if not tables:
            raise ConfigurationError("decentralized mode needs at least one key table")
        if len(tables) == 1:
            found, missing = tables[0].lookup(want)
            return KeyAcquisition(found, None, set(), missing)
        try:
            found = check_directory_consistency(tables, want)
            return KeyAcquisition(found, None, set(), set())
        except LookupFailure:
            # Fall back to per-device reporting when some table lacks entries.
            found, missing = tables[0].lookup(want)
            check_directory_consistency(tables, set(found))
            return KeyAcquisition(found, None, set(), missing)
    raise ConfigurationError(f"unknown key lookup mode {mode!r}")


# -- channels (steps 4-7) -----------------------------------------------------


@dataclass
class ChannelState:
    """Per-source AEAD state: one key, one strictly increasing nonce counter."""

    source: DeviceId
    role: str
    session_key: bytes
    nonce_counter: int = 0
    # inbound replay tracking
    highest_nonce: int = -1
    _window: set[int] = field(default_factory=set)

    def __post_init__(self):
        if len(self.session_key) != SESSION_KEY_SIZE:
            raise ValueError("session key must be 32 bytes")
        self._aead = AESGCM(self.session_key)

    def _admit_nonce(self, nonce: int) -> None:
        """Sliding-window replay check; call only after tag verification."""
        if nonce > self.highest_nonce:
            self.highest_nonce = nonce
            self._window.add(nonce)
            floor = self.highest_nonce - REPLAY_WINDOW
            if len(self._window) > REPLAY_WINDOW:
                self._window = {n for n in self._window if n > floor}
            return
        if nonce <= self.highest_nonce - REPLAY_WINDOW or nonce in self._window:
            raise ReplayDetected(f"nonce {nonce} replayed on channel from {self.source}")
        self._window.add(nonce)

    def peek_replay(self, nonce: int) -> bool:
        """True if the nonce would be rejected as a replay."""
        if nonce > self.highest_nonce:
            return False
        return nonce <= self.highest_nonce - REPLAY_WINDOW or nonce in self._window


def _wrap_header(src: DeviceId, dst: DeviceId) -> bytes:
    return struct.pack(">B", WRAP_PROTOCOL) + src.id + dst.id


def establish_outbound(
    self_id: DeviceId,
    endpoints: Iterable[DeviceId],
    keys: Mapping[DeviceId, DeviceKeys],
    rng: random.Random | None = None,
    schedule_seed: bytes | None = None,
) -> tuple[ChannelState, dict[DeviceId, bytes]]:
    """Steps 4-5: one fresh session key, wrapped separately to each endpoint.

    The wrapped payload carries the session key plus the randomized-auth
    schedule seed for this source, so receivers can tell real from dummy
    tags. Missing endpoint keys abort the whole establishment; there is no
    plaintext fallback.
    """
    endpoints = set(endpoints)
    missing = endpoints - set(keys)
    if missing:
        raise LookupFailure(f"no keys for endpoints: {sorted(d.hex for d in missing)}")
    session_key = crypto.rand_bytes(rng, SESSION_KEY_SIZE)
    if schedule_seed is None:
        schedule_seed = crypto.rand_bytes(rng, 32)
    channel = ChannelState(self_id, ROLE_OUTBOUND, session_key)
    messages = {}
    for dst in sorted(endpoints):
        header = _wrap_header(self_id, dst)
        blob = crypto.wrap_key(keys[dst].enc, session_key + schedule_seed, header, rng)
        messages[dst] = header + struct.pack(">H", len(blob)) + blob
    return channel, messages


def parse_wrapped_message(data: bytes) -> tuple[DeviceId, DeviceId, bytes]:
    """Split a wrapped-key message into (src, dst, key blob)."""
    if len(data) < 35 or data[0] != WRAP_PROTOCOL:
        raise ChannelRefused("malformed wrapped-key message")
    src = DeviceId(data[1:17])
    dst = DeviceId(data[17:33])
    (blob_len,) = struct.unpack(">H", data[33:35])
    blob = data[35 : 35 + blob_len]
    if len(blob) != blob_len:
        raise ChannelRefused("truncated wrapped-key message")
    return src, dst, blob


def accept_inbound(
    self_id: DeviceId,
    wrapped: bytes,
    kem_key: crypto.KemPrivateKey,
    plan: ClusterPlan | None = None,
    cert: ApprovalCertificate | None = None,
    governance_key: crypto.VerifyKey | None = None,
    require_certificate: bool = False,
) -> tuple[ChannelState, bytes]:
    """Steps 6-7: unwrap a source's session key and activate the input path.

    Returns (inbound channel, schedule seed). In governance mode
    (`require_certificate`) the source must present a certificate signed by
    the governance service that authorizes the src->self edge; in either
    mode a declared plan is honored if given.
    """
    src, dst, blob = parse_wrapped_message(wrapped)
    if dst != self_id:
        raise ChannelRefused("wrapped key not addressed to this device")
    if plan is not None and not plan.allows(src, self_id):
        raise ChannelRefused(f"{src} -> {self_id} absent from the cluster plan")
    if require_certificate:
        if cert is None or governance_key is None:
            raise ChannelRefused(f"{src} presented no approval certificate")
        if not governance_key.verify(cert.signed_payload(), cert.signature):
            raise ChannelRefused(f"approval certificate from {src} failed verification")
        if not cert.authorizes(src, self_id):
            raise ChannelRefused(f"certificate does not authorize {src} -> {self_id}")
    try:
        secret = crypto.unwrap_key(kem_key, blob, _wrap_header(src, dst))
    except crypto.UnwrapError as exc:
        raise ChannelRefused(f"could not unwrap session key from {src}") from exc
    session_key, schedule_seed = secret[:SESSION_KEY_SIZE], secret[SESSION_KEY_SIZE:]
    return ChannelState(src, ROLE_INBOUND, session_key), schedule_seed


# -- sealed data path ---------------------------------------------------------


def seal_block(channel: ChannelState, plaintext: bytes, associated_data: bytes = b"") -> bytes:
    """AEAD-seal one block under the next nonce; never reuses a nonce."""
    if channel.role != ROLE_OUTBOUND:
        raise ConfigurationError("seal_block needs an outbound channel")
    if channel.nonce_counter > MAX_NONCE:
        raise ChannelExhausted("nonce counter exhausted; re-establish the channel")
    nonce = channel.nonce_counter
    channel.nonce_counter += 1
    nonce_bytes = nonce.to_bytes(12, "big")
    aad = channel.source.id + associated_data
    sealed = channel._aead.encrypt(nonce_bytes, plaintext, aad)
    ciphertext, tag = sealed[:-16], sealed[-16:]
    return (
        channel.source.id
        + nonce_bytes
        + struct.pack(">I", len(associated_data))
        + associated_data
        + ciphertext
        + tag
    )


def parse_block(block: bytes) -> tuple[DeviceId, int, bytes, bytes]:
    """Split a wire block into (src, nonce, associated data, ciphertext+tag)."""
    if len(block) < 32 + 16:
        raise AuthenticationFailure("block too short")
    src = DeviceId(block[:16])
    nonce = int.from_bytes(block[16:28], "big")
    (ad_len,) = struct.unpack(">I", block[28:32])
    if len(block) < 32 + ad_len + 16:
        raise AuthenticationFailure("block truncated")
    ad = block[32 : 32 + ad_len]
    body = block[32 + ad_len :]
    return src, nonce, ad, body


def open_block(channel: ChannelState, block: bytes) -> tuple[bytes, bytes]:
    """Verify and decrypt one block; returns (plaintext, associated data).

    Tag failure discards the block; replayed nonces are rejected even when
    the tag verifies. Callers merge provenance prefixes only from plaintext
    returned here.
    """
    if channel.role != ROLE_INBOUND:
        raise ConfigurationError("open_block needs an inbound channel")
    src, nonce, ad, body = parse_block(block)
    if src != channel.source:
        raise ChannelRefused(f"block from {src} on channel for {channel.source}")
    if channel.peek_replay(nonce):
        raise ReplayDetected(f"nonce {nonce} replayed on channel from {src}")
    try:
        plaintext = channel._aead.decrypt(nonce.to_bytes(12, "big"), body, src.id + ad)
    except InvalidTag as exc:
        raise AuthenticationFailure(f"block from {src} failed authentication") from exc
    channel._admit_nonce(nonce)
    return plaintext, ad


# -- checkpoint signatures ----------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    """Identity-signed digest of the blocks a source sent in a nonce range.

    Limits the value of a stolen session key: forged blocks make the
    receiver's record disagree with the next checkpoint.
    """

    source: DeviceId
    index: int
    nonces: tuple[int, ...]
    chain_hash: bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        body = self.source.id + struct.pack(">Q", self.index)
        body += struct.pack(">I", len(self.nonces))
        body += b"".join(n.to_bytes(12, "big") for n in self.nonces)
        body += self.chain_hash
        return crypto.derive(b"checkpoint", body)


def _chain_hash(records: Sequence[tuple[int, bytes]]) -> bytes:
    h = b"\x00" * 32
    for nonce, block_hash in records:
        h = crypto.derive(b"chain", h, nonce.to_bytes(12, "big"), block_hash)
    return h


class CheckpointSender:
    """Accumulates sent-block hashes and signs a checkpoint every K blocks."""

    def __init__(self, identity_key: crypto.SigningKey, source: DeviceId,
                 interval: int = DEFAULT_CHECKPOINT_INTERVAL):
        self.identity_key = identity_key
        self.source = source
        self.interval = interval
        self.index = 0
        self._records: list[tuple[int, bytes]] = []

    def note_sent(self, nonce: int, block: bytes) -> Checkpoint | None:
        self._records.append((nonce, crypto.digest(block)))
        if len(self._records) >= self.interval:
            return self.flush()
        return None

    def flush(self) -> Checkpoint | None:
        if not self._records:
            return None
        records, self._records = self._records, []
        nonces = tuple(n for n, _ in records)
        cp = Checkpoint(self.source, self.index, nonces, _chain_hash(records), b"")
        cp = Checkpoint(
            self.source, self.index, nonces, cp.chain_hash,
            self.identity_key.sign(cp.signed_payload()),
        )
        self.index += 1
        return cp


CHECKPOINT_OK = "ok"
CHECKPOINT_SKIPPED = "skipped"


class CheckpointReceiver:
    """Verifies sender checkpoints against the blocks actually received.

    Gaps caused by dropped blocks make a range unverifiable and are skipped;
    extra or altered blocks in a covered range are definitive evidence of
    forgery and raise ChainMismatch.
    """

    def __init__(self, identity_key: crypto.VerifyKey, source: DeviceId):
        self.identity_key = identity_key
        self.source = source
        self._received: dict[int, bytes] = {}

    def note_received(self, nonce: int, block: bytes) -> None:
        self._received[nonce] = crypto.digest(block)

    def verify(self, cp: Checkpoint) -> str:
        if cp.source != self.source:
            raise ChainMismatch("checkpoint source mismatch")
        if not self.identity_key.verify(cp.signed_payload(), cp.signature):
            raise ChainMismatch("checkpoint signature invalid")
        covered = set(cp.nonces)
        if covered:
            lo, hi = min(covered), max(covered)
            extras = [n for n in self._received if lo <= n <= hi and n not in covered]
            if extras:
                raise ChainMismatch(
                    f"received blocks the sender never sent: nonces {sorted(extras)}"
                )
        missing = [n for n in cp.nonces if n not in self._received]
        if missing:
            # Dropped packets: cannot recompute the chain, skip this range.
            for n in covered:
                self._received.pop(n, None)
            return CHECKPOINT_SKIPPED
        records = [(n, self._received[n]) for n in cp.nonces]
        ok = _chain_hash(records) == cp.chain_hash
        for n in covered:
            self._received.pop(n, None)
        if not ok:
            raise ChainMismatch("checkpoint hash chain mismatch; traffic was forged")
        return CHECKPOINT_OK
