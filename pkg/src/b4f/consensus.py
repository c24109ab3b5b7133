"""Validator and monitor state machines for the permissioned shared ledger.

Three-phase agreement (pre-prepare, prepare, commit) with a leader drawn
from the hash of (tip digest, round). A stalled round is abandoned on
timeout instead of running a full view change; safety across rounds comes
from locking: once a validator has sent Commit for a block at some height
it prepares nothing else at that height unless it observes a prepare
quorum for another block in a later round.

All transitions are driven by the caller (``handle_message``,
``on_timeout``, ``maybe_propose``); nothing here reads a clock or spawns
threads.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Union

from . import crypto
from .crypto import DIGEST_SIZE, SIGNATURE_SIZE, PseudonymCertificate
from .encoding import (
    TAG_COMMIT,
    TAG_COMMITTED_BLOCK,
    TAG_NEW_ROUND,
    TAG_PRE_PREPARE,
    TAG_PREPARE,
    TAG_SYNC_REQUEST,
    TAG_TX_SUBMIT,
    TAG_VOTE_TBS,
    EncodingError,
    Reader,
    Writer,
)
from .ledger import MAX_BLOCK_TXS, Block, HashTransaction, LinkError, SharedLedger, make_block

CertLookup = Callable[[bytes], Union[PseudonymCertificate, None]]

SYNC_BATCH = 16


class ConfigError(ValueError):
    pass


def quorum(n: int) -> int:
    """Smallest integer strictly greater than 2n/3."""
    return 2 * n // 3 + 1


@dataclass(frozen=True)
class RoundConfig:
    validator_ids: tuple[str, ...]
    f: int
    block_time: float = 10
    round_timeout: float = 30

    def __post_init__(self):
        ids = tuple(sorted(self.validator_ids))
        object.__setattr__(self, "validator_ids", ids)
        if not ids:
            raise ConfigError("at least one validator is required")
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate validator id")
        if self.f < 0 or len(ids) < 3 * self.f + 1:
            raise ConfigError(f"n >= 3f+1 violated: n={len(ids)}, f={self.f}")
        if self.block_time <= 0 or self.round_timeout <= 0:
            raise ConfigError("block_time and round_timeout must be positive")

    @property
    def n(self) -> int:
        return len(self.validator_ids)

    @property
    def quorum(self) -> int:
        return quorum(self.n)


def elect_leader(config: RoundConfig, prev_block_digest: bytes, round: int) -> str:
    h = crypto.digest(bytes(prev_block_digest) + round.to_bytes(8, "big"))
    return config.validator_ids[int.from_bytes(h, "big") % config.n]


class TxVerdict(enum.Enum):
    ACCEPT = "accept"
    UNKNOWN_PSEUDONYM = "unknown_pseudonym"
    BAD_SIGNATURE = "bad_signature"
    OUTSIDE_VALIDITY_WINDOW = "outside_validity_window"
    DUPLICATE = "duplicate"


def validate_transaction(tx: HashTransaction, ca_public_key: bytes, cert_lookup: CertLookup, seen=()) -> TxVerdict:
    cert = cert_lookup(tx.pseudonym_id)
    if cert is None:
        return TxVerdict.UNKNOWN_PSEUDONYM
    if crypto.verify_certificate(ca_public_key, cert, cert.valid_from) is not crypto.CertVerdict.VALID:
        return TxVerdict.BAD_SIGNATURE
    try:
        tbs = tx.tbs_bytes()
    except EncodingError:
        return TxVerdict.BAD_SIGNATURE
    if not crypto.verify(cert.subject_key, tbs, tx.signature):
        return TxVerdict.BAD_SIGNATURE
    if not cert.covers(tx.submit_time):
        return TxVerdict.OUTSIDE_VALIDITY_WINDOW
    if tx.record_digest in seen:
        return TxVerdict.DUPLICATE
    return TxVerdict.ACCEPT


# -- messages -----------------------------------------------------------------


class VoteKind(enum.IntEnum):
    PREPARE = 1
    COMMIT = 2


def vote_payload(kind: VoteKind, round: int, block_digest: bytes, voter_id: str) -> bytes:
    return (
        Writer(TAG_VOTE_TBS)
        .u8(int(kind))
        .u64(round)
        .fixed(block_digest, DIGEST_SIZE)
        .text(voter_id)
        .getvalue()
    )


@dataclass(frozen=True)
class PrePrepare:
    round: int
    block: Block

    def write(self, w: Writer) -> None:
        w.u8(TAG_PRE_PREPARE).u64(self.round)
        self.block.write(w)

    @classmethod
    def read(cls, r: Reader) -> PrePrepare:
        r.expect_tag(TAG_PRE_PREPARE)
        return cls(r.u64(), Block.read(r))


@dataclass(frozen=True)
class _Vote:
    round: int
    block_digest: bytes
    voter_id: str
    signature: bytes = field(repr=False)

    KIND = VoteKind.PREPARE
    TAG = TAG_PREPARE

    def payload(self) -> bytes:
        return vote_payload(self.KIND, self.round, self.block_digest, self.voter_id)

    def write(self, w: Writer) -> None:
        (
            w.u8(self.TAG)
            .u64(self.round)
            .fixed(self.block_digest, DIGEST_SIZE)
            .text(self.voter_id)
            .fixed(self.signature, SIGNATURE_SIZE)
        )

    @classmethod
    def read(cls, r: Reader):
        r.expect_tag(cls.TAG)
        return cls(r.u64(), r.fixed(DIGEST_SIZE), r.text(), r.fixed(SIGNATURE_SIZE))

    @classmethod
    def make(cls, round: int, block_digest: bytes, voter_id: str, secret_key: bytes):
        sig = crypto.sign(secret_key, vote_payload(cls.KIND, round, block_digest, voter_id))
        return cls(round, block_digest, voter_id, sig)


class Prepare(_Vote):
    KIND = VoteKind.PREPARE
    TAG = TAG_PREPARE


class Commit(_Vote):
    KIND = VoteKind.COMMIT
    TAG = TAG_COMMIT


@dataclass(frozen=True)
class NewRound:
    round: int
    reason: str
    height: int = 0

    def write(self, w: Writer) -> None:
        w.u8(TAG_NEW_ROUND).u64(self.round).text(self.reason).u64(self.height)

    @classmethod
    def read(cls, r: Reader) -> NewRound:
        r.expect_tag(TAG_NEW_ROUND)
        return cls(r.u64(), r.text(), r.u64())


@dataclass(frozen=True)
class TxSubmit:
    tx: HashTransaction
    relayed: bool = False

    def write(self, w: Writer) -> None:
        w.u8(TAG_TX_SUBMIT)
        self.tx.write(w)
        w.boolean(self.relayed)

    @classmethod
    def read(cls, r: Reader) -> TxSubmit:
        r.expect_tag(TAG_TX_SUBMIT)
        return cls(HashTransaction.read(r), r.boolean())


@dataclass(frozen=True)
class CommittedBlock:
    """A block plus the commit quorum that finalized it."""

    round: int
    block: Block
    commits: tuple[Commit, ...]

    def write(self, w: Writer) -> None:
        w.u8(TAG_COMMITTED_BLOCK).u64(self.round)
        self.block.write(w)
        w.seq(self.commits, lambda w, c: c.write(w))

    @classmethod
    def read(cls, r: Reader) -> CommittedBlock:
        r.expect_tag(TAG_COMMITTED_BLOCK)
        return cls(r.u64(), Block.read(r), tuple(r.seq(Commit.read)))


@dataclass(frozen=True)
class SyncRequest:
    from_height: int

    def write(self, w: Writer) -> None:
        w.u8(TAG_SYNC_REQUEST).u64(self.from_height)

    @classmethod
    def read(cls, r: Reader) -> SyncRequest:
        r.expect_tag(TAG_SYNC_REQUEST)
        return cls(r.u64())


ConsensusMessage = Union[PrePrepare, Prepare, Commit, NewRound, TxSubmit, CommittedBlock, SyncRequest]

_MESSAGE_READERS = {
    TAG_PRE_PREPARE: PrePrepare.read,
    TAG_PREPARE: Prepare.read,
    TAG_COMMIT: Commit.read,
    TAG_NEW_ROUND: NewRound.read,
    TAG_TX_SUBMIT: TxSubmit.read,
    TAG_COMMITTED_BLOCK: CommittedBlock.read,
    TAG_SYNC_REQUEST: SyncRequest.read,
}


def encode_message(msg: ConsensusMessage) -> bytes:
    w = Writer()
    msg.write(w)
    return w.getvalue()


def decode_message(data: bytes) -> ConsensusMessage:
    r = Reader(data)
    tag = r.peek_tag()
    if tag not in _MESSAGE_READERS:
        raise EncodingError(f"unknown message tag 0x{tag:02x}")
    msg = _MESSAGE_READERS[tag](r)
    r.finish()
    return msg


# -- state machines -------------------------------------------------------------


class Phase(enum.Enum):
    IDLE = "idle"
    PRE_PREPARED = "pre_prepared"
    PREPARED = "prepared"
    COMMITTED = "committed"


@dataclass
class Step:
    """Outputs of one transition: addressed messages and newly committed blocks."""

    messages: list[tuple[str, ConsensusMessage]] = field(default_factory=list)
    committed: list[Block] = field(default_factory=list)
    events: list[tuple[str, int, bytes | None]] = field(default_factory=list)

    def send(self, targets, msg) -> None:
        for t in targets:
            self.messages.append((t, msg))

    def extend(self, other: Step) -> None:
        self.messages.extend(other.messages)
        self.committed.extend(other.committed)
        self.events.extend(other.events)


def verify_certificate_of_commit(cb: CommittedBlock, config: RoundConfig, validator_keys: dict[str, bytes]) -> bool:
    if not cb.block.digest_ok():
        return False
    voters = set()
    for c in cb.commits:
        if c.round != cb.round or c.block_digest != cb.block.block_digest:
            continue
        key = validator_keys.get(c.voter_id)
        if key is None or c.voter_id in voters:
            continue
        if crypto.verify(key, c.payload(), c.signature):
            voters.add(c.voter_id)
    return len(voters) >= config.quorum


class _Replica:
    """Shared ledger replica that accepts quorum-certified committed blocks."""

    def __init__(self, node_id: str, config: RoundConfig, validator_keys: dict[str, bytes], ledger: SharedLedger):
        self.node_id = node_id
        self.config = config
        self.validator_keys = dict(validator_keys)
        self.ledger = ledger
        self.certificates: dict[int, CommittedBlock] = {}
        self.pending: dict[int, CommittedBlock] = {}
        self.sync_requested: dict[int, float] = {}
        self.diagnostics: list[tuple[float, str]] = []

    def _drop(self, now: float, reason: str) -> None:
        self.diagnostics.append((now, reason))

    def _append_certified(self, cb: CommittedBlock, now: float, step: Step) -> bool:
        try:
            self.ledger.append_block(cb.block)
        except LinkError as exc:
            self._drop(now, f"link: {exc}")
            return False
        self.certificates[cb.block.height] = cb
        step.committed.append(cb.block)
        step.events.append(("commit", cb.round, cb.block.block_digest))
        return True

    def _on_committed_block(self, cb: CommittedBlock, now: float, sender: str, step: Step) -> None:
        h = cb.block.height
        if h <= self.ledger.height:
            return
        if not verify_certificate_of_commit(cb, self.config, self.validator_keys):
            self._drop(now, "bad commit certificate")
            return
        if h > self.ledger.height + 1:
            self.pending[h] = cb
            self._request_sync(sender, now, step)
            return
        self._apply_certified(cb, now, step)

    def _request_sync(self, peer: str, now: float, step: Step) -> None:
        want = self.ledger.height + 1
        asked = self.sync_requested.get(want)
        if asked is None or now - asked >= self.config.round_timeout / 2:
            self.sync_requested[want] = now
            step.send([peer], SyncRequest(want))

    def _apply_certified(self, cb: CommittedBlock, now: float, step: Step) -> None:
        self.sync_requested.pop(cb.block.height, None)
        if not self._append_certified(cb, now, step):
            return
        self._after_commit(cb, now, step)
        nxt = self.pending.pop(self.ledger.height + 1, None)
        while nxt is not None:
            if not self._append_certified(nxt, now, step):
                break
            self._after_commit(nxt, now, step)
            nxt = self.pending.pop(self.ledger.height + 1, None)
        for h in [h for h in self.pending if h <= self.ledger.height]:
            del self.pending[h]

    def _after_commit(self, cb: CommittedBlock, now: float, step: Step) -> None:
        pass


class Monitor(_Replica):
    """Non-voting replica: receives only committed blocks."""

    def handle_message(self, msg: ConsensusMessage, now: float, sender: str) -> Step:
        step = Step()
        if isinstance(msg, CommittedBlock):
            self._on_committed_block(msg, now, sender, step)
        else:
            self._drop(now, f"monitor ignores {type(msg).__name__}")
        return step


class Validator(_Replica):
    def __init__(
        self,
        node_id: str,
        keypair: crypto.KeyPair,
        config: RoundConfig,
        validator_keys: dict[str, bytes],
        ca_public_key: bytes,
        cert_lookup: CertLookup,
        ledger: SharedLedger,
        monitor_ids=(),
    ):
        super().__init__(node_id, config, validator_keys, ledger)
        if node_id not in config.validator_ids:
            raise ConfigError(f"{node_id} is not in the validator set")
        self.keypair = keypair
        self.ca_public_key = ca_public_key
        self.cert_lookup = cert_lookup
        self.monitor_ids = tuple(monitor_ids)
        self.mempool: dict[bytes, HashTransaction] = {}
        self.round = 0
        self.round_started_at = 0.0
        self.phase = Phase.IDLE
        self.rejections: Counter = Counter()
        self.rejected: list[tuple[bytes, TxVerdict]] = []
        self._tx_ok_cache: dict[HashTransaction, TxVerdict] = {}
        self._reset_height()

    def _reset_height(self) -> None:
        self.proposals: dict[tuple[int, bytes], Block] = {}
        self.accepted_round: dict[int, bytes] = {}
        self.prepare_sent: dict[int, bytes] = {}
        self.commit_sent: dict[int, bytes] = {}
        self.lock: tuple[int, Block] | None = None
        self.prepares: dict[tuple[int, bytes], dict[str, Prepare]] = {}
        self.commits: dict[tuple[int, bytes], dict[str, Commit]] = {}
        self.voted: set[tuple[VoteKind, int, str]] = set()
        self.new_round_claims: dict[str, int] = {}

    # -- helpers

    @property
    def others(self) -> list[str]:
        return [v for v in self.config.validator_ids if v != self.node_id]

    @property
    def leader(self) -> str:
        return elect_leader(self.config, self.ledger.tip_digest, self.round)

    def is_leader(self, round: int | None = None) -> bool:
        r = self.round if round is None else round
        return elect_leader(self.config, self.ledger.tip_digest, r) == self.node_id

    def _enter_round(self, r: int, now: float, step: Step) -> None:
        self.round = r
        self.round_started_at = now
        self.phase = Phase.IDLE
        step.events.append(("round", r, None))

    def _tx_verdict(self, tx: HashTransaction, seen) -> TxVerdict:
        v = self._tx_ok_cache.get(tx)
        if v is None:
            v = validate_transaction(tx, self.ca_public_key, self.cert_lookup)
            self._tx_ok_cache[tx] = v
        if v is TxVerdict.ACCEPT and tx.record_digest in seen:
            return TxVerdict.DUPLICATE
        return v

    def deadline(self) -> float:
        return self.round_started_at + self.config.round_timeout

    # -- client transactions

    def _on_tx(self, msg: TxSubmit, now: float, step: Step) -> None:
        tx = msg.tx
        seen = _Seen(self.ledger.index, self.mempool)
        verdict = self._tx_verdict(tx, seen)
        if verdict is not TxVerdict.ACCEPT:
            if verdict is not TxVerdict.DUPLICATE or not msg.relayed:
                self.rejections[verdict] += 1
                self.rejected.append((tx.record_digest, verdict))
                self._drop(now, f"tx {tx.record_digest.hex()[:8]}: {verdict.value}")
            return
        self.mempool[tx.record_digest] = tx
        step.events.append(("tx", self.round, tx.record_digest))
        if not msg.relayed:
            step.send(self.others, TxSubmit(tx, relayed=True))

    # -- proposal

    def propose_block(self, now: float) -> Block | None:
        """Build this round's proposal; ``None`` when there is nothing to propose."""
        if self.lock is not None:
            return self.lock[1]
        pending = sorted(
            (tx for d, tx in self.mempool.items() if d not in self.ledger.index),
            key=lambda tx: tx.order_key,
        )
        if not pending:
            return None
        return make_block(
            self.ledger.height + 1,
            self.ledger.tip_digest,
            int(now),
            self.node_id,
            pending[:MAX_BLOCK_TXS],
        )

    def maybe_propose(self, now: float) -> Step:
        step = Step()
        if not self.is_leader() or self.round in self.accepted_round:
            return step
        block = self.propose_block(now)
        if block is None:
            return step
        msg = PrePrepare(self.round, block)
        step.send(self.others, msg)
        step.events.append(("propose", self.round, block.block_digest))
        step.extend(self.handle_message(msg, now, self.node_id))
        return step

    def _block_valid(self, block: Block, now: float) -> bool:
        if len(block.transactions) > MAX_BLOCK_TXS:
            self._drop(now, "block over size cap")
            return False
        if block.leader_id not in self.config.validator_ids:
            self._drop(now, "block leader not a validator")
            return False
        seen = set(self.ledger.index)
        prev_key = None
        for tx in block.transactions:
            if prev_key is not None and tx.order_key <= prev_key:
                self._drop(now, "block transactions out of order")
                return False
            prev_key = tx.order_key
            v = self._tx_verdict(tx, seen)
            if v is not TxVerdict.ACCEPT:
                self._drop(now, f"block tx {tx.record_digest.hex()[:8]}: {v.value}")
                return False
            seen.add(tx.record_digest)
        return True

    # -- message handling

    def handle_message(self, msg: ConsensusMessage, now: float, sender: str) -> Step:
        step = Step()
        if isinstance(msg, TxSubmit):
            self._on_tx(msg, now, step)
        elif isinstance(msg, PrePrepare):
            self._on_pre_prepare(msg, now, sender, step)
        elif isinstance(msg, (Prepare, Commit)):
            self._on_vote(msg, now, step)
        elif isinstance(msg, NewRound):
            self._on_new_round(msg, now, sender, step)
        elif isinstance(msg, CommittedBlock):
            self._on_committed_block(msg, now, sender, step)
        elif isinstance(msg, SyncRequest):
            self._on_sync_request(msg, sender, step)
        else:
            self._drop(now, f"unknown message {type(msg).__name__}")
        return step

    def _on_pre_prepare(self, msg: PrePrepare, now: float, sender: str, step: Step) -> None:
        r, block = msg.round, msg.block
        if r < self.round:
            self._drop(now, f"stale pre-prepare round {r}")
            return
        if block.height > self.ledger.height + 1:
            self._request_sync(sender, now, step)
            self._drop(now, f"pre-prepare for future height {block.height}")
            return
        if sender != elect_leader(self.config, self.ledger.tip_digest, r):
            self._drop(now, f"pre-prepare from non-leader {sender} round {r}")
            return
        if block.height != self.ledger.height + 1 or block.prev_digest != self.ledger.tip_digest:
            self._drop(now, f"pre-prepare does not extend tip (height {block.height})")
            return
        if not block.digest_ok():
            self._drop(now, "pre-prepare block digest mismatch")
            return
        d = block.block_digest
        if r in self.accepted_round:
            if self.accepted_round[r] != d:
                self._drop(now, f"equivocating pre-prepare round {r} from {sender}")
            return
        if not self._block_valid(block, now):
            return
        if r > self.round:
            self._enter_round(r, now, step)
        self.accepted_round[r] = d
        self.proposals[(r, d)] = block
        self.phase = Phase.PRE_PREPARED
        if self.lock is not None and self.lock[1].block_digest != d:
            self._drop(now, f"locked on {self.lock[1].block_digest.hex()[:8]}, not preparing {d.hex()[:8]}")
        elif r not in self.prepare_sent:
            vote = Prepare.make(r, d, self.node_id, self.keypair.secret_key)
            self.prepare_sent[r] = d
            step.send(self.others, vote)
            step.events.append(("prepare", r, d))
            self._record_vote(vote)
        self._progress(now, step)

    def _on_vote(self, vote: Prepare | Commit, now: float, step: Step) -> None:
        key = self.validator_keys.get(vote.voter_id)
        if key is None:
            self._drop(now, f"vote from unknown voter {vote.voter_id}")
            return
        if (vote.KIND, vote.round, vote.voter_id) in self.voted:
            self._drop(now, f"duplicate {vote.KIND.name.lower()} from {vote.voter_id} round {vote.round}")
            return
        if not crypto.verify(key, vote.payload(), vote.signature):
            self._drop(now, f"bad vote signature from {vote.voter_id}")
            return
        self._record_vote(vote)
        self._progress(now, step)

    def _record_vote(self, vote: Prepare | Commit) -> None:
        self.voted.add((vote.KIND, vote.round, vote.voter_id))
        table = self.prepares if vote.KIND is VoteKind.PREPARE else self.commits
        table.setdefault((vote.round, vote.block_digest), {})[vote.voter_id] = vote

    def _progress(self, now: float, step: Step) -> None:
        q = self.config.quorum
        for (r, d), block in sorted(self.proposals.items()):
            # commit-votes only in the current round; voting in a round we
            # already left would let a lower-round lock undercut a higher one
            if r == self.round and len(self.prepares.get((r, d), ())) >= q and r not in self.commit_sent:
                lock_ok = self.lock is None or self.lock[1].block_digest == d or self.lock[0] < r
                if lock_ok:
                    self.lock = (r, block)
                    self.commit_sent[r] = d
                    self.phase = Phase.PREPARED
                    vote = Commit.make(r, d, self.node_id, self.keypair.secret_key)
                    step.send(self.others, vote)
                    step.events.append(("commit-vote", r, d))
                    self._record_vote(vote)
            votes = self.commits.get((r, d), {})
            if len(votes) >= q:
                cert = CommittedBlock(r, block, tuple(votes[v] for v in sorted(votes)[:q]))
                self.phase = Phase.COMMITTED
                self._apply_certified(cert, now, step)
                return

    def _after_commit(self, cb: CommittedBlock, now: float, step: Step) -> None:
        for tx in cb.block.transactions:
            self.mempool.pop(tx.record_digest, None)
        self._reset_height()
        self._enter_round(max(self.round, cb.round) + 1, now, step)
        step.send(self.monitor_ids, cb)

    def _on_new_round(self, msg: NewRound, now: float, sender: str, step: Step) -> None:
        if sender not in self.validator_keys:
            return
        if msg.height > self.ledger.height:
            self._request_sync(sender, now, step)
            return
        if msg.height < self.ledger.height:
            return
        self.new_round_claims[sender] = max(self.new_round_claims.get(sender, 0), msg.round)
        ahead = sorted((r for r in self.new_round_claims.values() if r > self.round), reverse=True)
        if len(ahead) >= self.config.f + 1:
            target = ahead[self.config.f]
            self._enter_round(target, now, step)
            step.send(self.others, NewRound(target, "join", self.ledger.height))

    def _on_sync_request(self, msg: SyncRequest, sender: str, step: Step) -> None:
        for h in range(msg.from_height, min(self.ledger.height, msg.from_height + SYNC_BATCH - 1) + 1):
            cb = self.certificates.get(h)
            if cb is not None:
                step.send([sender], cb)

    # -- timers

    def on_timeout(self, now: float) -> Step:
        step = Step()
        if now < self.deadline():
            return step
        self._enter_round(self.round + 1, now, step)
        step.events.append(("timeout", self.round, None))
        step.send(self.others, NewRound(self.round, "timeout", self.ledger.height))
        # lagging peers can only learn of missed heights from someone; re-announce the tip
        if self.ledger.height > 0 and self.ledger.height in self.certificates:
            step.send(self.monitor_ids, self.certificates[self.ledger.height])
        return step


class _Seen:
    """Membership view over the committed index and the mempool."""

    def __init__(self, *containers):
        self._containers = containers

    def __contains__(self, d) -> bool:
        return any(d in c for c in self._containers)
