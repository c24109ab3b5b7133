"""Shared hash-chained ledger of digest transactions and per-role content fragments."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from . import crypto
from .crypto import DIGEST_SIZE, PSEUDONYM_ID_SIZE, SIGNATURE_SIZE, ZERO_DIGEST
from .encoding import TAG_BLOCK, TAG_BLOCK_TBS, TAG_TX, TAG_TX_TBS, EncodingError, Reader, Writer
from .records import RecordKind, SignedRecord

MAX_BLOCK_TXS = 1024
GENESIS_LEADER = "genesis"


class LinkError(ValueError):
    """A block does not extend the current tip."""


class CollisionError(RuntimeError):
    """Two different records share a digest (hash failure; abort)."""


@dataclass(frozen=True)
class HashTransaction:
    record_digest: bytes
    record_kind: RecordKind
    pseudonym_id: bytes
    submit_time: int
    signature: bytes = field(repr=False)

    def validate(self) -> None:
        if len(self.record_digest) != DIGEST_SIZE:
            raise EncodingError("record_digest must be 32 bytes")
        if len(self.pseudonym_id) != PSEUDONYM_ID_SIZE:
            raise EncodingError("pseudonym_id must be 16 bytes")
        if not isinstance(self.record_kind, RecordKind):
            raise EncodingError("unknown record kind")

    def _fields(self, w: Writer) -> Writer:
        return (
            w.fixed(self.record_digest, DIGEST_SIZE)
            .u8(int(self.record_kind))
            .fixed(self.pseudonym_id, PSEUDONYM_ID_SIZE)
            .u64(self.submit_time)
        )

    def tbs_bytes(self) -> bytes:
        self.validate()
        return self._fields(Writer(TAG_TX_TBS)).getvalue()

    def write(self, w: Writer) -> None:
        self.validate()
        self._fields(w.u8(TAG_TX)).fixed(self.signature, SIGNATURE_SIZE)

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> HashTransaction:
        r.expect_tag(TAG_TX)
        d = r.fixed(DIGEST_SIZE)
        try:
            kind = RecordKind(r.u8())
        except ValueError as exc:
            raise EncodingError("unknown record kind") from exc
        return cls(d, kind, r.fixed(PSEUDONYM_ID_SIZE), r.u64(), r.fixed(SIGNATURE_SIZE))

    @classmethod
    def decode(cls, data: bytes) -> HashTransaction:
        r = Reader(data)
        tx = cls.read(r)
        r.finish()
        return tx

    @property
    def order_key(self) -> tuple[int, bytes]:
        return (self.submit_time, self.record_digest)


# tag + digest + kind + pseudonym id + submit time + signature
HASH_TX_SIZE = 1 + DIGEST_SIZE + 1 + PSEUDONYM_ID_SIZE + 8 + SIGNATURE_SIZE


def make_transaction(sr: SignedRecord, secret_key: bytes) -> HashTransaction:
    """Commitment to ``sr`` signed by the same pseudonym that signed the record."""
    unsigned = HashTransaction(sr.digest, sr.kind, sr.pseudonym_id, sr.submit_time, b"")
    return HashTransaction(
        unsigned.record_digest,
        unsigned.record_kind,
        unsigned.pseudonym_id,
        unsigned.submit_time,
        crypto.sign(secret_key, unsigned.tbs_bytes()),
    )


@dataclass(frozen=True)
class Block:
    height: int
    prev_digest: bytes
    block_time: int
    leader_id: str
    transactions: tuple[HashTransaction, ...]
    block_digest: bytes

    def tbs_bytes(self) -> bytes:
        w = (
            Writer(TAG_BLOCK_TBS)
            .u64(self.height)
            .fixed(self.prev_digest, DIGEST_SIZE)
            .u64(self.block_time)
            .text(self.leader_id)
        )
        w.seq(self.transactions, lambda w, tx: tx.write(w))
        return w.getvalue()

    def compute_digest(self) -> bytes:
        return crypto.digest(self.tbs_bytes())

    def digest_ok(self) -> bool:
        try:
            return self.compute_digest() == self.block_digest
        except EncodingError:
            return False

    def write(self, w: Writer) -> None:
        (
            w.u8(TAG_BLOCK)
            .u64(self.height)
            .fixed(self.prev_digest, DIGEST_SIZE)
            .u64(self.block_time)
            .text(self.leader_id)
            .seq(self.transactions, lambda w, tx: tx.write(w))
            .fixed(self.block_digest, DIGEST_SIZE)
        )

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> Block:
        r.expect_tag(TAG_BLOCK)
        return cls(
            height=r.u64(),
            prev_digest=r.fixed(DIGEST_SIZE),
            block_time=r.u64(),
            leader_id=r.text(),
            transactions=tuple(r.seq(HashTransaction.read)),
            block_digest=r.fixed(DIGEST_SIZE),
        )

    @classmethod
    def decode(cls, data: bytes) -> Block:
        r = Reader(data)
        b = cls.read(r)
        r.finish()
        return b


def make_block(height: int, prev_digest: bytes, block_time: int, leader_id: str, transactions) -> Block:
    txs = tuple(transactions)
    if len(txs) > MAX_BLOCK_TXS:
        raise ValueError(f"block exceeds {MAX_BLOCK_TXS} transactions")
    draft = Block(height, prev_digest, block_time, leader_id, txs, ZERO_DIGEST)
    return Block(height, prev_digest, block_time, leader_id, txs, draft.compute_digest())


def genesis_block() -> Block:
    return make_block(0, ZERO_DIGEST, 0, GENESIS_LEADER, ())


class SharedLedger:
    def __init__(self):
        self.blocks: list[Block] = []
        self.index: dict[bytes, tuple[int, int]] = {}

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def height(self) -> int:
        """Height of the tip block, -1 when empty."""
        return len(self.blocks) - 1

    @property
    def tip_digest(self) -> bytes:
        return self.blocks[-1].block_digest if self.blocks else ZERO_DIGEST

    def append_block(self, block: Block) -> SharedLedger:
        if not block.digest_ok():
            raise LinkError(f"block {block.height}: digest does not recompute")
        if block.height != self.height + 1:
            raise LinkError(f"height gap: tip is {self.height}, block is {block.height}")
        if block.prev_digest != self.tip_digest:
            raise LinkError(f"block {block.height}: prev_digest does not match tip")
        for pos, tx in enumerate(block.transactions):
            self.index.setdefault(tx.record_digest, (block.height, pos))
        self.blocks.append(block)
        return self

    def contains_digest(self, d: bytes) -> tuple[int, int] | None:
        return self.index.get(bytes(d))

    def transaction_at(self, loc: tuple[int, int]) -> HashTransaction:
        h, pos = loc
        return self.blocks[h].transactions[pos]

    def transactions(self):
        for b in self.blocks:
            yield from b.transactions

    def dump(self) -> bytes:
        """Length-prefixed canonical blocks."""
        out = []
        for b in self.blocks:
            enc = b.encode()
            out.append(struct.pack(">I", len(enc)))
            out.append(enc)
        return b"".join(out)

    @classmethod
    def load(cls, data: bytes) -> SharedLedger:
        """Parse a dump without verifying links; use ``verify_chain`` afterwards."""
        ledger = cls()
        r = Reader(data)
        while r.remaining:
            n = r.u32()
            ledger.blocks.append(Block.decode(r.fixed(n)))
        for b in ledger.blocks:
            for pos, tx in enumerate(b.transactions):
                ledger.index.setdefault(tx.record_digest, (b.height, pos))
        return ledger


def verify_chain(ledger: SharedLedger) -> bool:
    prev = None
    for i, b in enumerate(ledger.blocks):
        if b.height != i or not b.digest_ok():
            return False
        expected_prev = ZERO_DIGEST if prev is None else prev.block_digest
        if b.prev_digest != expected_prev:
            return False
        prev = b
    return True


def verify_dump(data: bytes) -> bool:
    try:
        ledger = SharedLedger.load(data)
    except EncodingError:
        return False
    return verify_chain(ledger)


class Role(enum.Enum):
    INSURER = "insurer"
    MANUFACTURER = "manufacturer"
    MAINTENANCE_PROVIDER = "maintenance_provider"
    PERSONAL_STORE = "personal_store"

    def __str__(self) -> str:
        return self.value


class FragmentedLedger:
    def __init__(self, owner_role: Role, owner_id: str = ""):
        self.owner_role = owner_role
        self.owner_id = owner_id
        self.entries: dict[bytes, SignedRecord] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def store_fragment(self, rec: SignedRecord) -> FragmentedLedger:
        d = rec.digest
        existing = self.entries.get(d)
        if existing is not None and existing != rec:
            raise CollisionError(f"different record stored under digest {d.hex()}")
        self.entries[d] = rec
        return self

    def fetch_fragment(self, d: bytes) -> SignedRecord | None:
        return self.entries.get(bytes(d))

    def byte_size(self) -> int:
        return sum(len(r.encode()) for r in self.entries.values())


@dataclass(frozen=True)
class StorageStats:
    shared_bytes: int
    shared_tx_bytes: int
    tx_count: int
    per_tx_shared_bytes: float | None
    fragment_bytes: int


def storage_stats(shared: SharedLedger, frags) -> StorageStats:
    shared_bytes = sum(len(b.encode()) for b in shared.blocks)
    txs = list(shared.transactions())
    tx_bytes = sum(len(tx.encode()) for tx in txs)
    per_tx = tx_bytes / len(txs) if txs else None
    return StorageStats(
        shared_bytes=shared_bytes,
        shared_tx_bytes=tx_bytes,
        tx_count=len(txs),
        per_tx_shared_bytes=per_tx,
        fragment_bytes=sum(f.byte_size() for f in frags),
    )
