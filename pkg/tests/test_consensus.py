from collections import deque

import pytest
from hypothesis import given
from hypothesis import strategies as st

from b4f import crypto
from b4f.consensus import (
    Commit,
    CommittedBlock,
    ConfigError,
    Monitor,
    NewRound,
    Prepare,
    PrePrepare,
    RoundConfig,
    SyncRequest,
    TxSubmit,
    TxVerdict,
    Validator,
    decode_message,
    elect_leader,
    encode_message,
    quorum,
    validate_transaction,
    verify_certificate_of_commit,
)
from b4f.crypto import generate_keypair
from b4f.ledger import SharedLedger, genesis_block, make_block, make_transaction
from b4f.records import DiagnosisReport, SignedRecord
from conftest import Fleet
from sha256_ref import sha256


class Cluster:
    """Validators wired through an instant FIFO network."""

    def __init__(self, n=4, f=1, monitors=("M1",), block_time=10, timeout=30):
        self.ids = [f"N{i}" for i in range(1, n + 1)]
        self.config = RoundConfig(tuple(self.ids), f, block_time, timeout)
        self.fleet = Fleet()
        self.keys = {v: generate_keypair(crypto.derive_seed("val", v)) for v in self.ids}
        pubs = {v: k.public_key for v, k in self.keys.items()}
        self.nodes = {}
        for v in self.ids:
            ledger = SharedLedger().append_block(genesis_block())
            self.nodes[v] = Validator(v, self.keys[v], self.config, pubs, self.fleet.ca.public_key,
                                      self.fleet.lookup, ledger, monitors)
        for m in monitors:
            self.nodes[m] = Monitor(m, self.config, pubs, SharedLedger().append_block(genesis_block()))
        self.queue = deque()
        self.down = set()
        self.committed = {v: [] for v in self.nodes}

    def absorb(self, node_id, step):
        self.committed[node_id].extend(step.committed)
        for target, msg in step.messages:
            self.queue.append((node_id, target, msg))

    def deliver(self, now=0.0, limit=10_000):
        while self.queue and limit:
            limit -= 1
            sender, target, msg = self.queue.popleft()
            if target in self.down:
                continue
            self.absorb(target, self.nodes[target].handle_message(msg, now, sender))

    def submit(self, tx, now=0.0, to=None):
        for v in to or self.ids:
            self.absorb(v, self.nodes[v].handle_message(TxSubmit(tx), now, "client"))
        self.deliver(now)

    def tick(self, now):
        for v in self.ids:
            if v not in self.down:
                self.absorb(v, self.nodes[v].maybe_propose(now))
        self.deliver(now)

    def timeout(self, now):
        for v in self.ids:
            if v not in self.down:
                self.absorb(v, self.nodes[v].on_timeout(now))
        self.deliver(now)

    def tx(self, t):
        sr = self.fleet.signed(DiagnosisReport(t, (f"T{t}",)), t)
        return make_transaction(sr, self.fleet.pair_at(t)[1])


def test_quorum_values():
    assert [quorum(n) for n in (1, 4, 7, 10)] == [1, 3, 5, 7]


@given(st.integers(1, 500))
def test_quorum_strictly_exceeds_two_thirds(n):
    q = quorum(n)
    assert 3 * q > 2 * n
    assert 3 * (q - 1) <= 2 * n


def test_config_rejects_too_many_faults():
    with pytest.raises(ConfigError, match="3f\\+1"):
        RoundConfig(("a", "b", "c"), 1)
    RoundConfig(("a", "b", "c", "d"), 1)


@given(st.binary(min_size=32, max_size=32), st.integers(0, 2**32))
def test_leader_election_matches_oracle(prev, r):
    cfg = RoundConfig(("N3", "N1", "N4", "N2"), 1)
    ids = sorted(cfg.validator_ids)
    expect = ids[int.from_bytes(sha256(prev + r.to_bytes(8, "big")), "big") % 4]
    assert elect_leader(cfg, prev, r) == expect


def test_happy_path_commits_everywhere():
    c = Cluster()
    tx = c.tx(5)
    c.submit(tx, 5)
    c.tick(10)
    for v in c.ids + ["M1"]:
        ledger = c.nodes[v].ledger
        assert ledger.height == 1, v
        assert ledger.blocks[1].transactions == (tx,)
    digests = {c.nodes[v].ledger.tip_digest for v in c.nodes}
    assert len(digests) == 1


def test_tx_relay_reaches_all_validators():
    c = Cluster()
    tx = c.tx(5)
    c.submit(tx, 5, to=["N1"])
    assert all(tx.record_digest in c.nodes[v].mempool for v in c.ids)
    c.tick(10)
    assert all(c.nodes[v].ledger.height == 1 for v in c.ids)


def test_no_empty_blocks():
    c = Cluster()
    c.tick(10)
    assert all(c.nodes[v].ledger.height == 0 for v in c.ids)


def test_commits_with_one_node_down():
    c = Cluster()
    tx = c.tx(5)
    c.submit(tx, 5)
    c.down.add(c.nodes["N1"].leader)
    t = 10
    for _ in range(5):
        c.tick(t)
        if all(c.nodes[v].ledger.height == 1 for v in c.ids if v not in c.down):
            break
        t += 30
        c.timeout(t)
    assert all(c.nodes[v].ledger.height == 1 for v in c.ids if v not in c.down)


def test_validate_transaction_window_boundary():
    f = Fleet()
    cert, sk = f.pair_at(0)
    ca = f.ca.public_key

    def tx_at(t):
        sr = SignedRecord(DiagnosisReport(t), t, cert.pseudonym_id, b"")
        sr = SignedRecord(sr.record, t, cert.pseudonym_id, crypto.sign(sk, sr.tbs_bytes()))
        return make_transaction(sr, sk)

    assert validate_transaction(tx_at(cert.valid_until - 1), ca, f.lookup) is TxVerdict.ACCEPT
    assert validate_transaction(tx_at(cert.valid_until), ca, f.lookup) is TxVerdict.OUTSIDE_VALIDITY_WINDOW
    assert validate_transaction(tx_at(cert.valid_until + 1), ca, f.lookup) is TxVerdict.OUTSIDE_VALIDITY_WINDOW


def test_validate_transaction_verdicts():
    c = Cluster()
    tx = c.tx(5)
    ca = c.fleet.ca.public_key
    assert validate_transaction(tx, ca, c.fleet.lookup) is TxVerdict.ACCEPT
    assert validate_transaction(tx, ca, lambda _: None) is TxVerdict.UNKNOWN_PSEUDONYM
    assert validate_transaction(tx, ca, c.fleet.lookup, {tx.record_digest}) is TxVerdict.DUPLICATE
    bad = type(tx)(tx.record_digest, tx.record_kind, tx.pseudonym_id, tx.submit_time + 1, tx.signature)
    assert validate_transaction(bad, ca, c.fleet.lookup) is TxVerdict.BAD_SIGNATURE


def test_rejected_tx_counted():
    c = Cluster()
    tx = c.tx(5)
    forged = type(tx)(tx.record_digest, tx.record_kind, tx.pseudonym_id, 6, tx.signature)
    c.submit(forged, 6)
    assert all(c.nodes[v].rejections[TxVerdict.BAD_SIGNATURE] == 1 for v in c.ids)
    assert not any(c.nodes[v].mempool for v in c.ids)


def test_non_leader_proposal_ignored():
    c = Cluster()
    node = c.nodes["N1"]
    leader = node.leader
    other = next(v for v in c.ids if v != leader)
    block = make_block(1, node.ledger.tip_digest, 10, other, [c.tx(5)])
    step = node.handle_message(PrePrepare(0, block), 10, other)
    assert not step.messages
    assert "non-leader" in node.diagnostics[-1][1]


def test_equivocating_proposal_second_dropped():
    c = Cluster()
    node = next(c.nodes[v] for v in c.ids if not c.nodes[v].is_leader())
    leader = node.leader
    tx = c.tx(5)
    a = make_block(1, node.ledger.tip_digest, 10, leader, [tx])
    b = make_block(1, node.ledger.tip_digest, 11, leader, [tx])
    first = node.handle_message(PrePrepare(0, a), 10, leader)
    second = node.handle_message(PrePrepare(0, b), 10, leader)
    assert any(isinstance(m, Prepare) for _, m in first.messages)
    assert not second.messages
    assert "equivocating" in node.diagnostics[-1][1]


def test_bad_vote_signature_not_counted():
    c = Cluster()
    node = c.nodes["N1"]
    vote = Prepare.make(0, b"\x01" * 32, "N2", c.keys["N3"].secret_key)
    node.handle_message(vote, 0, "N2")
    assert "bad vote signature" in node.diagnostics[-1][1]
    assert not node.prepares


def test_commit_certificate_checks():
    c = Cluster()
    block = make_block(1, genesis_block().block_digest, 10, "N1", [c.tx(5)])
    votes = tuple(Commit.make(0, block.block_digest, v, c.keys[v].secret_key) for v in c.ids[:3])
    assert verify_certificate_of_commit(CommittedBlock(0, block, votes), c.config, c.nodes["M1"].validator_keys)
    assert not verify_certificate_of_commit(CommittedBlock(0, block, votes[:2]), c.config, c.nodes["M1"].validator_keys)
    dup = (votes[0], votes[0], votes[1])
    assert not verify_certificate_of_commit(CommittedBlock(0, block, dup), c.config, c.nodes["M1"].validator_keys)


def test_monitor_rejects_uncertified_block():
    c = Cluster()
    mon = c.nodes["M1"]
    block = make_block(1, genesis_block().block_digest, 10, "N1", [c.tx(5)])
    votes = tuple(Commit.make(0, block.block_digest, v, c.keys[v].secret_key) for v in c.ids[:2])
    mon.handle_message(CommittedBlock(0, block, votes), 10, "N1")
    assert mon.ledger.height == 0
    mon.handle_message(PrePrepare(0, block), 10, "N1")
    assert mon.ledger.height == 0


def test_lagging_node_syncs():
    c = Cluster()
    c.down.add("N4")
    t = 5
    for i in range(3):
        c.submit(c.tx(t + i), t + i, to=[v for v in c.ids if v != "N4"])
        for _ in range(4):
            before = c.nodes["N1"].ledger.height
            c.tick(t + 10)
            if c.nodes["N1"].ledger.height > before:
                break
            t += 30
            c.timeout(t)
        t += 10
    assert c.nodes["N1"].ledger.height == 3
    c.down.clear()
    lagger = c.nodes["N4"]
    c.absorb("N4", lagger.handle_message(NewRound(c.nodes["N1"].round, "timeout", 3), t, "N1"))
    c.deliver(t)
    assert lagger.ledger.height == 3
    assert lagger.ledger.tip_digest == c.nodes["N1"].ledger.tip_digest


def test_locked_leader_reproposes_lock():
    c = Cluster()
    node = c.nodes["N1"]
    block = make_block(1, node.ledger.tip_digest, 10, "N1", [c.tx(5)])
    node.lock = (0, block)
    assert node.propose_block(50) == block


def test_message_roundtrip():
    c = Cluster()
    tx = c.tx(5)
    block = make_block(1, genesis_block().block_digest, 10, "N1", [tx])
    vote = Commit.make(2, block.block_digest, "N1", c.keys["N1"].secret_key)
    msgs = [
        PrePrepare(2, block),
        Prepare.make(2, block.block_digest, "N2", c.keys["N2"].secret_key),
        vote,
        NewRound(3, "timeout", 1),
        TxSubmit(tx, True),
        CommittedBlock(2, block, (vote,)),
        SyncRequest(4),
    ]
    for m in msgs:
        assert decode_message(encode_message(m)) == m


def test_vote_kinds_not_interchangeable():
    c = Cluster()
    sk = c.keys["N2"].secret_key
    p = Prepare.make(0, b"\x02" * 32, "N2", sk)
    forged = Commit(p.round, p.block_digest, p.voter_id, p.signature)
    assert not crypto.verify(c.keys["N2"].public_key, forged.payload(), forged.signature)
