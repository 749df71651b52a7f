"""GMAC-authenticated payloads: creation, wire coding, and verification.

The tag covers a canonical, length-prefixed serialization of
(message, topic, key serial, timestamp). On the wire a payload is six
dash-separated ASCII fields::

    base64(m) - topic - serial - ts_ms - base64(iv) - base64(mac)
"""

from __future__ import annotations

import base64
import binascii
import enum
import hmac
import re
import struct
import threading
from dataclasses import dataclass, field
from typing import NamedTuple

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from qgrid.errors import (
    AlreadyConsumed,
    BadIVLength,
    BadKeyLength,
    IVExhausted,
    UnknownSerial,
)
from qgrid.ivstore import IV_LEN
from qgrid.keystore import KeyStore, PartyRole, PoolPolicy, SigningKey

TAG_LEN = 16
DELIMITER = "-"
DEFAULT_DELTA_MS = 2000

_DEC = re.compile(r"(0|[1-9][0-9]*)\Z")
_B64 = re.compile(r"[A-Za-z0-9+/]*={0,2}\Z")


def gmac_tag(key: bytes, iv: bytes, data: bytes) -> bytes:
    """128-bit GMAC: AES-GCM over empty plaintext with ``data`` as AAD."""
    if len(key) not in (16, 24, 32):
        raise BadKeyLength("GMAC key must be 16, 24 or 32 bytes", length=len(key))
    if len(iv) != IV_LEN and len(iv) != 12:
        raise BadIVLength("GMAC IV must be 12 or 16 bytes", length=len(iv))
    enc = Cipher(algorithms.AES(key), modes.GCM(iv)).encryptor()
    enc.authenticate_additional_data(data)
    enc.finalize()
    return enc.tag


@dataclass(frozen=True)
class TotalMessage:
    message: bytes
    topic: str
    key_serial: int
    timestamp: int

    def canonical(self) -> bytes:
        topic = self.topic.encode("utf-8")
        return b"".join(
            (
                struct.pack(">I", len(self.message)),
                self.message,
                struct.pack(">I", len(topic)),
                topic,
                struct.pack(">IQ", 8, self.key_serial),
                struct.pack(">IQ", 8, self.timestamp),
            )
        )


@dataclass(frozen=True)
class AuthPayload:
    total: TotalMessage
    iv: bytes
    mac: bytes

    def __post_init__(self):
        if len(self.iv) != IV_LEN:
            raise ValueError("iv must be 16 bytes")
        if len(self.mac) != TAG_LEN:
            raise ValueError("mac must be 16 bytes")


class Reason(enum.Enum):
    OK = "OK"
    MAC_MISMATCH = "MAC_MISMATCH"
    TOPIC_MISMATCH = "TOPIC_MISMATCH"
    STALE_TIMESTAMP = "STALE_TIMESTAMP"
    KEY_REPLAYED = "KEY_REPLAYED"
    UNKNOWN_KEY = "UNKNOWN_KEY"
    MALFORMED = "MALFORMED"


@dataclass(frozen=True)
class VerificationVerdict:
    reason: Reason
    serial: int | None = None
    ts_regressed: bool = False

    @property
    def accepted(self) -> bool:
        return self.reason is Reason.OK


@dataclass(frozen=True)
class FreshnessPolicy:
    delta_ms: int = DEFAULT_DELTA_MS

    def __post_init__(self):
        if self.delta_ms <= 0:
            raise ValueError("delta_ms must be positive")


class Malformed(ValueError):
    pass


def _check_topic(topic: str) -> None:
    if not topic or DELIMITER in topic or not topic.isprintable():
        raise ValueError(f"topic {topic!r} must be non-empty printable text without {DELIMITER!r}")


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    if not _B64.match(text) or len(text) % 4:
        raise Malformed("bad base64")
    try:
        raw = base64.b64decode(text, validate=True)
    except binascii.Error as exc:
        raise Malformed("bad base64") from exc
    if _b64(raw) != text:  # reject non-canonical padding bits
        raise Malformed("non-canonical base64")
    return raw


def _undec(text: str) -> int:
    if not _DEC.match(text) or len(text) > 20:
        raise Malformed("bad decimal field")
    value = int(text)
    if value >= 1 << 64:
        raise Malformed("integer field out of range")
    return value


def encode_payload(p: AuthPayload) -> bytes:
    t = p.total
    _check_topic(t.topic)
    fields = (_b64(t.message), t.topic, str(t.key_serial), str(t.timestamp), _b64(p.iv), _b64(p.mac))
    return DELIMITER.join(fields).encode("utf-8")


def decode_payload(data: bytes) -> AuthPayload:
    """Inverse of :func:`encode_payload`; raises :class:`Malformed`."""
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise Malformed("payload is not UTF-8") from exc
    parts = text.split(DELIMITER)
    if len(parts) != 6:
        raise Malformed(f"expected 6 fields, got {len(parts)}")
    m, topic, n, ts, iv, mac = parts
    if not topic or not topic.isprintable():
        raise Malformed("bad topic field")
    iv_raw, mac_raw = _unb64(iv), _unb64(mac)
    if len(iv_raw) != IV_LEN or len(mac_raw) != TAG_LEN:
        raise Malformed("wrong iv or mac length")
    total = TotalMessage(_unb64(m), topic, _undec(n), _undec(ts))
    return AuthPayload(total, iv_raw, mac_raw)


def create_payload(
    message: bytes,
    topic: str,
    keystore: KeyStore,
    ivstore,
    clock,
    role: PartyRole,
    pool: PoolPolicy = PoolPolicy(),
) -> tuple[AuthPayload, SigningKey]:
    """Authenticate one outgoing message.

    Returns the payload and the key selection (serial, fresh flag, unused
    count seen before selection). Propagates ``NoKeyEver`` and
    ``IVExhausted``. IV availability is checked before a key is taken so an
    empty IV pool does not burn a fresh key.
    """
    _check_topic(topic)
    if ivstore.available == 0:
        raise IVExhausted("no unused initialization vectors")
    key = keystore.next_signing_key(role, pool)
    iv = ivstore.next_iv()
    total = TotalMessage(bytes(message), topic, key.serial, clock.now_ms())
    mac = gmac_tag(key.secret, iv.value, total.canonical())
    return AuthPayload(total, iv.value, mac), key


class Creation(NamedTuple):
    serial: int
    iv: bytes
    fresh: bool
    unused_before: int
    t_ms: int


class Signer:
    """Creates payloads for one node and keeps the (serial, iv) audit trail."""

    def __init__(self, keystore: KeyStore, ivstore, clock, role: PartyRole, pool: PoolPolicy = PoolPolicy()):
        self.keystore = keystore
        self.ivstore = ivstore
        self.clock = clock
        self.role = role
        self.pool = pool
        self.history: list[Creation] = []
        self._lock = threading.Lock()

    def create(self, message: bytes, topic: str) -> AuthPayload:
        with self._lock:
            payload, key = create_payload(
                message, topic, self.keystore, self.ivstore, self.clock, self.role, self.pool
            )
            self.history.append(
                Creation(key.serial, payload.iv, key.fresh, key.unused_before, payload.total.timestamp)
            )
        return payload

    def encode(self, message: bytes, topic: str) -> bytes:
        return encode_payload(self.create(message, topic))


@dataclass
class _Watermark:
    serial: int | None = None
    ivs: set[bytes] = field(default_factory=set)
    last_ts: int | None = None


class Verifier:
    """Checks payloads from a single counterpart.

    Checks run in a fixed order: key replay, freshness, topic, MAC. The first
    failing check names the verdict. The verifier remembers the last accepted
    serial: older serials are replays, the current serial may repeat (the
    sender is reusing it below the reserve threshold) but never with an IV
    already seen.
    """

    def __init__(
        self,
        keystore: KeyStore,
        role: PartyRole,
        clock,
        policy: FreshnessPolicy = FreshnessPolicy(),
        stats=None,
    ):
        self.keystore = keystore
        self.role = role
        self.clock = clock
        self.policy = policy
        self.stats = stats
        self.ts_anomalies = 0
        self._mark = _Watermark()
        self._lock = threading.Lock()

    @property
    def watermark(self) -> int | None:
        return self._mark.serial

    def verify(self, p: AuthPayload, expected_topic: str) -> VerificationVerdict:
        with self._lock:
            verdict = self._verify(p, expected_topic)
        self._count(verdict)
        return verdict

    def verify_bytes(self, data: bytes, expected_topic: str) -> VerificationVerdict:
        try:
            p = decode_payload(data)
        except Malformed:
            verdict = VerificationVerdict(Reason.MALFORMED)
            self._count(verdict)
            return verdict
        return self.verify(p, expected_topic)

    def _count(self, verdict: VerificationVerdict) -> None:
        if self.stats is None:
            return
        if verdict.accepted:
            self.stats.record("verify_ok")
        else:
            self.stats.record("verify_fail", reason=verdict.reason.value)

    def _verify(self, p: AuthPayload, expected_topic: str) -> VerificationVerdict:
        t = p.total
        serial = t.key_serial
        mark = self._mark

        def reject(reason: Reason) -> VerificationVerdict:
            return VerificationVerdict(reason, serial)

        # 1. key replay
        if self.role.owns(serial):
            return reject(Reason.KEY_REPLAYED)
        if mark.serial is not None:
            if serial < mark.serial:
                return reject(Reason.KEY_REPLAYED)
            if serial == mark.serial and p.iv in mark.ivs:
                return reject(Reason.KEY_REPLAYED)
        try:
            key = self.keystore.lookup_for_verify(serial, current=mark.serial)
        except UnknownSerial:
            return reject(Reason.UNKNOWN_KEY)
        except AlreadyConsumed:
            return reject(Reason.KEY_REPLAYED)

        # 2. freshness
        if abs(self.clock.now_ms() - t.timestamp) > self.policy.delta_ms:
            return reject(Reason.STALE_TIMESTAMP)

        # 3. topic
        if t.topic != expected_topic:
            return reject(Reason.TOPIC_MISMATCH)

        # 4. MAC
        expected = gmac_tag(key, p.iv, t.canonical())
        if not hmac.compare_digest(expected, p.mac):
            return reject(Reason.MAC_MISMATCH)

        self.keystore.mark_verified(serial)
        if serial != mark.serial:
            mark.serial = serial
            mark.ivs = set()
        mark.ivs.add(p.iv)
        regressed = mark.last_ts is not None and t.timestamp < mark.last_ts
        if regressed:
            self.ts_anomalies += 1
        mark.last_ts = t.timestamp if not regressed else mark.last_ts
        return VerificationVerdict(Reason.OK, serial, regressed)
