"""Keys, signatures, digests and short-lived pseudonym certificates."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .encoding import TAG_CERT, TAG_CERT_TBS, EncodingError, Reader, Writer

PSEUDONYM_LIFETIME = 300
DIGEST_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
PSEUDONYM_ID_SIZE = 16
ZERO_DIGEST = bytes(DIGEST_SIZE)


def digest(message: bytes) -> bytes:
    """SHA-256 of ``message``; the only producer of ledger digests."""
    return hashlib.sha256(message).digest()


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes = field(repr=False)


def generate_keypair(seed: bytes) -> KeyPair:
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(public_key=pk, secret_key=bytes(seed))


def derive_seed(*parts: bytes | str | int) -> bytes:
    """Stable 32-byte seed from labelled parts (used for reproducible keys)."""
    h = hashlib.sha256(b"b4f-seed")
    for p in parts:
        if isinstance(p, int):
            p = p.to_bytes(8, "big", signed=False)
        elif isinstance(p, str):
            p = p.encode("utf-8")
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return h.digest()


@lru_cache(maxsize=4096)
def _private(secret_key: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret_key)


@lru_cache(maxsize=4096)
def _public(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


def sign(secret_key: bytes, message: bytes) -> bytes:
    return _private(bytes(secret_key)).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Never raises: malformed keys or signatures simply fail."""
    try:
        if len(signature) != SIGNATURE_SIZE:
            return False
        _public(bytes(public_key)).verify(bytes(signature), message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


class CertVerdict(enum.Enum):
    VALID = "valid"
    BAD_SIGNATURE = "bad_signature"
    EXPIRED = "expired"
    NOT_YET_VALID = "not_yet_valid"


@dataclass(frozen=True)
class PseudonymCertificate:
    pseudonym_id: bytes
    subject_key: bytes
    valid_from: int
    valid_until: int
    ca_signature: bytes = field(repr=False)

    def validate(self) -> None:
        if len(self.pseudonym_id) != PSEUDONYM_ID_SIZE:
            raise EncodingError("pseudonym_id must be 16 bytes")
        if len(self.subject_key) != PUBLIC_KEY_SIZE:
            raise EncodingError("subject_key must be 32 bytes")
        if self.valid_from < 0 or self.valid_until - self.valid_from != PSEUDONYM_LIFETIME:
            raise EncodingError("certificate window must span exactly 300 s")

    def covers(self, t: int) -> bool:
        return self.valid_from <= t < self.valid_until

    def tbs_bytes(self) -> bytes:
        return _cert_fields(Writer(TAG_CERT_TBS), self).getvalue()

    def encode(self) -> bytes:
        self.validate()
        w = _cert_fields(Writer(TAG_CERT), self)
        return w.fixed(self.ca_signature, SIGNATURE_SIZE).getvalue()

    @classmethod
    def read(cls, r: Reader) -> PseudonymCertificate:
        r.expect_tag(TAG_CERT)
        cert = cls(
            pseudonym_id=r.fixed(PSEUDONYM_ID_SIZE),
            subject_key=r.fixed(PUBLIC_KEY_SIZE),
            valid_from=r.u64(),
            valid_until=r.u64(),
            ca_signature=r.fixed(SIGNATURE_SIZE),
        )
        cert.validate()
        return cert

    @classmethod
    def decode(cls, data: bytes) -> PseudonymCertificate:
        r = Reader(data)
        cert = cls.read(r)
        r.finish()
        return cert


def _cert_fields(w: Writer, c: PseudonymCertificate) -> Writer:
    return (
        w.fixed(c.pseudonym_id, PSEUDONYM_ID_SIZE)
        .fixed(c.subject_key, PUBLIC_KEY_SIZE)
        .u64(c.valid_from)
        .u64(c.valid_until)
    )


class CertificateAuthority:
    """Issues pseudonym batches and holds the provider key registry.

    Single-writer: callers serialize issuance. ``holders`` is the CA's
    private pseudonym-to-holder table, disclosed only for investigations.
    """

    def __init__(self, keypair: KeyPair):
        self.keypair = keypair
        self.issued: set[bytes] = set()
        self.holders: dict[bytes, str] = {}
        self.providers: dict[str, bytes] = {}
        self._counter = 0

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key

    def _next_pseudonym_id(self) -> bytes:
        while True:
            self._counter += 1
            pid = digest(b"pseudonym" + self.keypair.secret_key + self._counter.to_bytes(8, "big"))
            pid = pid[:PSEUDONYM_ID_SIZE]
            if pid not in self.issued:
                return pid

    def register_provider(self, provider_id: str, public_key: bytes) -> None:
        self.providers[provider_id] = public_key


def issue_pseudonym_batch(
    ca: CertificateAuthority,
    subject_keys: list[bytes],
    start_time: int,
    holder: str | None = None,
) -> list[PseudonymCertificate]:
    if not subject_keys:
        raise ValueError("subject_keys must be non-empty")
    if start_time < 0:
        raise ValueError("start_time must be >= 0")
    certs = []
    for i, key in enumerate(subject_keys):
        pid = ca._next_pseudonym_id()
        start = start_time + PSEUDONYM_LIFETIME * i
        unsigned = PseudonymCertificate(pid, bytes(key), start, start + PSEUDONYM_LIFETIME, b"")
        unsigned.validate()
        sig = sign(ca.keypair.secret_key, unsigned.tbs_bytes())
        ca.issued.add(pid)
        if holder is not None:
            ca.holders[pid] = holder
        certs.append(PseudonymCertificate(pid, bytes(key), start, start + PSEUDONYM_LIFETIME, sig))
    return certs


def verify_certificate(ca_public_key: bytes, cert: PseudonymCertificate, at_time: int) -> CertVerdict:
    try:
        cert.validate()
        ok = verify(ca_public_key, cert.tbs_bytes(), cert.ca_signature)
    except EncodingError:
        ok = False
    if not ok:
        return CertVerdict.BAD_SIGNATURE
    if at_time < cert.valid_from:
        return CertVerdict.NOT_YET_VALID
    if at_time >= cert.valid_until:
        return CertVerdict.EXPIRED
    return CertVerdict.VALID
