"""Deterministic discrete-event harness for the whole pipeline.

One event loop owns simulated time (integer milliseconds). Every random
draw comes from a generator seeded by (scenario seed, actor id), so a
(scenario, seed) pair always yields the same trace, ledgers and metrics.
"""

from __future__ import annotations

import heapq
import math
import random
import statistics
from dataclasses import dataclass, field

from . import crypto
from .consensus import (
    Commit,
    CommittedBlock,
    ConfigError,
    Monitor,
    NewRound,
    Prepare,
    PrePrepare,
    RoundConfig,
    Step,
    TxSubmit,
    Validator,
)
from .crypto import CertificateAuthority, generate_keypair, issue_pseudonym_batch
from .daemon import (
    AirbagRule,
    DaemonConfig,
    ForensicDaemon,
    PeriodicRule,
    SpeedDeltaRule,
)
from .ledger import (
    FragmentedLedger,
    Role,
    SharedLedger,
    StorageStats,
    genesis_block,
    make_block,
    storage_stats,
)
from .records import (
    BsmMessage,
    LightState,
    MaintenanceRecord,
    RecordVerdict,
    SignedRecord,
    VehicleSample,
    sign_maintenance,
    to_fixed,
    verify_signed_record,
)

BEHAVIORS = ("honest", "withhold", "equivocate", "invalid_sign", "replay")
DEFAULT_RADIUS_M = 300
DEFAULT_SPEED_DELTA = 8
LIGHT_BEACON_INTERVAL_MS = 1000
REPLAY_HISTORY = 20


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class NetworkModel:
    base_latency_ms: int = 50
    jitter_ms: int = 0
    drop_probability: float = 0.0
    radius_m: float = DEFAULT_RADIUS_M

    def __post_init__(self):
        if self.base_latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("latency and jitter must be >= 0")
        if not 0 <= self.drop_probability < 1:
            raise ConfigError("drop probability must be in [0, 1)")


@dataclass(frozen=True)
class Fault:
    behavior: str
    active_from: float = 0.0
    active_to: float = math.inf

    def active(self, now_s: float) -> bool:
        return self.behavior != "honest" and self.active_from <= now_s < self.active_to


@dataclass
class FaultPlan:
    faults: dict[str, Fault] = field(default_factory=dict)

    def add(self, node_id: str, behavior: str, active_from: float = 0.0, active_to: float = math.inf) -> FaultPlan:
        if behavior not in BEHAVIORS:
            raise ConfigError(f"unknown behavior {behavior!r}")
        self.faults[node_id] = Fault(behavior, active_from, active_to)
        return self

    @property
    def byzantine(self) -> set[str]:
        return {k for k, v in self.faults.items() if v.behavior != "honest"}


@dataclass(frozen=True)
class SimEvent:
    deliver_at: int
    seq: int
    target: str
    kind: str
    payload: object = None
    sender: str = ""

    def __lt__(self, other: SimEvent) -> bool:
        return (self.deliver_at, self.seq) < (other.deliver_at, other.seq)


@dataclass
class VehicleSpec:
    vehicle_id: str
    certs: int
    start: int
    fanout: int = 3
    speed_delta: float = DEFAULT_SPEED_DELTA
    diag_interval: int = 0


@dataclass
class Metrics:
    t_end: float
    committed_block_count: int
    committed_tx_count: int
    emitted_tx_count: int
    latency_mean: float | None
    latency_p50: float | None
    latency_p95: float | None
    throughput_tps: float
    storage: StorageStats
    daemons: dict[str, dict[str, int]]
    messages_sent: int
    messages_dropped: int
    tx_rejections: int
    safety_violation: bool

    def to_text(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.3f}"

        lines = [
            f"t_end={self.t_end:.3f}",
            f"committed_blocks={self.committed_block_count}",
            f"committed_txs={self.committed_tx_count}",
            f"emitted_txs={self.emitted_tx_count}",
            f"latency_mean={fmt(self.latency_mean)}",
            f"latency_p50={fmt(self.latency_p50)}",
            f"latency_p95={fmt(self.latency_p95)}",
            f"throughput_tps={self.throughput_tps:.4f}",
            f"shared_bytes={self.storage.shared_bytes}",
            f"per_tx_shared_bytes={fmt(self.storage.per_tx_shared_bytes)}",
            f"fragment_bytes={self.storage.fragment_bytes}",
            f"messages_sent={self.messages_sent}",
            f"messages_dropped={self.messages_dropped}",
            f"tx_rejections={self.tx_rejections}",
            f"safety_violation={int(self.safety_violation)}",
        ]
        for vid in sorted(self.daemons):
            c = self.daemons[vid]
            lines.append(
                f"daemon={vid} emitted={c['emitted']} suppressed={c['suppressed']} gossiped={c['gossiped']}"
            )
        return "\n".join(lines) + "\n"


def _rng(seed: int, *labels) -> random.Random:
    return random.Random(int.from_bytes(crypto.derive_seed(seed, *labels)[:8], "big"))


class Simulation:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.validator_ids: list[str] = []
        self.monitor_ids: list[str] = []
        self.vehicle_specs: dict[str, VehicleSpec] = {}
        self.light_ids: list[str] = []
        self.light_positions: dict[str, tuple[int, int]] = {}
        self.network = NetworkModel()
        self.f: int | None = None
        self.block_time = 10.0
        self.round_timeout = 30.0
        self.fault_plan = FaultPlan()
        self.trace: list[str] = []
        self.now_ms = 0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._started = False
        self._built = False
        self._pending_inputs: list[tuple[int, str, str, object]] = []

        self.nodes: dict[str, Validator | Monitor] = {}
        self.daemons: dict[str, ForensicDaemon] = {}
        self.fragments: dict[tuple[Role, str], FragmentedLedger] = {}
        self.certs: dict[bytes, crypto.PseudonymCertificate] = {}
        self.emit_time_ms: dict[bytes, int] = {}
        self.commit_time_ms: dict[bytes, int] = {}
        self.committed_by_height: dict[int, set[bytes]] = {}
        self.safety_violation = False
        self.messages_sent = 0
        self.messages_dropped = 0
        self._net_rngs: dict[str, random.Random] = {}
        self._last_sample: dict[str, VehicleSample] = {}
        self._light_state: dict[str, dict[str, LightState]] = {}
        self._beacon_on: set[str] = set()
        self._timer_at: dict[str, float] = {}
        self._sent_votes: dict[str, list] = {}

    # -- construction

    @property
    def actor_count(self) -> int:
        return len(self.validator_ids) + len(self.monitor_ids) + len(self.vehicle_specs) + len(self.light_ids)

    def build(self) -> Simulation:
        """Instantiate keys, certificates, nodes and daemons; idempotent."""
        if self._built:
            return self
        if not self.validator_ids:
            raise ScenarioError("scenario declares no validators")
        f = self.f if self.f is not None else (len(self.validator_ids) - 1) // 3
        try:
            self.config = RoundConfig(tuple(self.validator_ids), f, self.block_time, self.round_timeout)
        except ConfigError as exc:
            raise ScenarioError(str(exc)) from exc
        self.ca = CertificateAuthority(generate_keypair(crypto.derive_seed(self.seed, "ca")))
        self.validator_keys = {
            v: generate_keypair(crypto.derive_seed(self.seed, "validator", v)) for v in self.validator_ids
        }
        pubs = {v: kp.public_key for v, kp in self.validator_keys.items()}
        self.provider_keys: dict[str, crypto.KeyPair] = {}
        horizon = max([t for t, *_ in self._pending_inputs] + [0]) // 1000 + 3600

        def lookup(pid):
            return self.certs.get(pid)

        for v in self.validator_ids:
            ledger = SharedLedger().append_block(genesis_block())
            self.nodes[v] = Validator(
                v, self.validator_keys[v], self.config, pubs, self.ca.public_key, lookup, ledger, self.monitor_ids
            )
        for m in self.monitor_ids:
            self.nodes[m] = Monitor(m, self.config, pubs, SharedLedger().append_block(genesis_block()))

        for vid, spec in self.vehicle_specs.items():
            keys = [generate_keypair(crypto.derive_seed(self.seed, "vehicle", vid, i)) for i in range(spec.certs)]
            rules = [AirbagRule(), SpeedDeltaRule(to_fixed(spec.speed_delta))]
            if spec.diag_interval:
                rules.append(PeriodicRule(spec.diag_interval))
            self.daemons[vid] = self._make_daemon(vid, keys, spec.start, rules, spec.fanout)
        for lid in self.light_ids:
            n = horizon // crypto.PSEUDONYM_LIFETIME + 1
            keys = [generate_keypair(crypto.derive_seed(self.seed, "light", lid, i)) for i in range(n)]
            self.daemons[lid] = self._make_daemon(lid, keys, 0, [], 3)

        for v in self.validator_ids:
            t = self.block_time
            self._schedule(int(t * 1000), v, "tick")
            self._arm_timer(v)
        for at, target, kind, payload in self._pending_inputs:
            self._schedule(at, target, kind, payload)
        self._built = True
        return self

    def _make_daemon(self, actor_id, keys, start, rules, fanout) -> ForensicDaemon:
        certs = issue_pseudonym_batch(self.ca, [k.public_key for k in keys], start, holder=actor_id)
        for c in certs:
            self.certs[c.pseudonym_id] = c
        cfg = DaemonConfig(
            rules=rules,
            certs=[(c, k.secret_key) for c, k in zip(certs, keys)],
            validator_ids=list(self.config.validator_ids),
            gossip_fanout=min(fanout, self.config.n),
            seed=int.from_bytes(crypto.derive_seed(self.seed, "daemon", actor_id)[:8], "big"),
        )
        return ForensicDaemon(cfg)

    def provider_keypair(self, provider_id: str) -> crypto.KeyPair:
        kp = self.provider_keys.get(provider_id)
        if kp is None:
            kp = generate_keypair(crypto.derive_seed(self.seed, "provider", provider_id))
            self.provider_keys[provider_id] = kp
            self.ca.register_provider(provider_id, kp.public_key)
        return kp

    def add_input(self, at_ms: int, target: str, kind: str, payload) -> None:
        if self._built:
            self._schedule(at_ms, target, kind, payload)
        else:
            self._pending_inputs.append((at_ms, target, kind, payload))

    def snapshot(self) -> bytes:
        """Canonical bytes of the initial/current state, for reproducibility checks."""
        self.build()
        parts = [self.ca.public_key]
        for nid in sorted(self.nodes):
            parts.append(nid.encode())
            parts.append(self.nodes[nid].ledger.dump())
        for pid in sorted(self.certs):
            parts.append(self.certs[pid].encode())
        for ev in sorted(self._queue):
            parts.append(f"{ev.deliver_at}|{ev.seq}|{ev.target}|{ev.kind}|{ev.payload!r}".encode())
        return b"\n".join(parts)

    # -- scheduling

    def _schedule(self, at_ms: int, target: str, kind: str, payload=None, sender: str = "") -> None:
        heapq.heappush(self._queue, SimEvent(max(at_ms, self.now_ms), self._seq, target, kind, payload, sender))
        self._seq += 1

    def _net_rng(self, sender: str) -> random.Random:
        r = self._net_rngs.get(sender)
        if r is None:
            r = self._net_rngs[sender] = _rng(self.seed, "net", sender)
        return r

    def _transmit(self, sender: str, target: str, kind: str, payload) -> None:
        rng = self._net_rng(sender)
        jitter = rng.randint(0, self.network.jitter_ms) if self.network.jitter_ms else 0
        dropped = rng.random() < self.network.drop_probability
        self.messages_sent += 1
        if dropped:
            self.messages_dropped += 1
            return
        self._schedule(self.now_ms + self.network.base_latency_ms + jitter, target, kind, payload, sender)

    def _log(self, node: str, ev: str, round_: int | None = None, d: bytes | None = None) -> None:
        r = "-" if round_ is None else str(round_)
        h = "-" if d is None else d.hex()[:8]
        self.trace.append(f"t={self.now_ms / 1000:.3f} node={node} ev={ev} round={r} digest={h}")

    # -- faults

    def inject_fault(self, plan: FaultPlan) -> Simulation:
        if self._started:
            raise ConfigError("faults must be injected before the run starts")
        for node_id, fault in plan.faults.items():
            if node_id not in self.validator_ids:
                raise ConfigError(f"unknown validator id {node_id!r}")
            self.fault_plan.faults[node_id] = fault
        return self

    def _fault(self, node_id: str) -> Fault | None:
        fault = self.fault_plan.faults.get(node_id)
        if fault is not None and fault.active(self.now_ms / 1000):
            return fault
        return None

    def is_honest(self, node_id: str) -> bool:
        return node_id not in self.fault_plan.byzantine

    def _emit_step(self, node_id: str, step: Step) -> None:
        now_s = self.now_ms / 1000
        for ev, r, d in step.events:
            self._log(node_id, ev, r, d)
        for block in step.committed:
            self._on_commit(node_id, block)
        messages = step.messages
        fault = self._fault(node_id)
        if fault is not None:
            messages = self._corrupt(node_id, fault, messages, now_s)
        for target, msg in messages:
            self._transmit(node_id, target, "msg", msg)
        if node_id in self.validator_ids:
            self._arm_timer(node_id)

    def _corrupt(self, node_id: str, fault: Fault, messages, now_s: float):
        b = fault.behavior
        if b == "withhold":
            return []
        if b == "invalid_sign":
            out = []
            for target, msg in messages:
                if isinstance(msg, (Prepare, Commit)):
                    sig = bytes([msg.signature[0] ^ 0xFF]) + msg.signature[1:]
                    msg = type(msg)(msg.round, msg.block_digest, msg.voter_id, sig)
                out.append((target, msg))
            return out
        if b == "replay":
            history = self._sent_votes.setdefault(node_id, [])
            out = list(messages)
            fresh = [(t, m) for t, m in messages if isinstance(m, (Prepare, Commit))]
            if fresh:
                out.extend(fresh)
                out.extend(history)
                history.extend(fresh)
                del history[:-REPLAY_HISTORY]
            return out
        if b == "equivocate":
            # double-vote: pre-commit whatever we prepared, without waiting for quorum
            out = list(messages)
            for target, msg in messages:
                if isinstance(msg, Prepare):
                    node = self.nodes[node_id]
                    out.append((target, Commit.make(msg.round, msg.block_digest, node_id, node.keypair.secret_key)))
            return out
        return messages

    def _equivocating_proposal(self, node: Validator) -> bool:
        """Send conflicting proposals to two halves of the honest validators."""
        a = node.propose_block(self.now_ms / 1000)
        if a is None:
            return True
        b = make_block(a.height, a.prev_digest, a.block_time + 1, a.leader_id, a.transactions)
        lo, hi = sorted([a, b], key=lambda blk: blk.block_digest)
        r = node.round
        colluders = sorted(
            v for v in self.fault_plan.byzantine
            if v != node.node_id and self.fault_plan.faults[v].behavior == "equivocate" and self._fault(v)
        )
        honest = [v for v in node.others if v not in colluders]
        half = (len(honest) + 1) // 2
        groups = [(lo, honest[:half]), (hi, honest[half:])]
        self._log(node.node_id, "equivocate", r, lo.block_digest)
        node.handle_message(PrePrepare(r, lo), self.now_ms / 1000, node.node_id)
        for v in colluders:
            self._transmit(node.node_id, v, "msg", PrePrepare(r, lo))
            self._transmit(node.node_id, v, "msg", PrePrepare(r, hi))
        for blk, group in groups:
            for voter in [node.node_id] + colluders:
                sk = self.nodes[voter].keypair.secret_key
                votes = [
                    Prepare.make(r, blk.block_digest, voter, sk),
                    Commit.make(r, blk.block_digest, voter, sk),
                ]
                for target in group:
                    if voter == node.node_id:
                        self._transmit(voter, target, "msg", PrePrepare(r, blk))
                    for vote in votes:
                        self._transmit(voter, target, "msg", vote)
        self._arm_timer(node.node_id)
        return True

    # -- event handlers

    def _arm_timer(self, node_id: str) -> None:
        node = self.nodes[node_id]
        deadline = node.deadline()
        if self._timer_at.get(node_id) != deadline:
            self._timer_at[node_id] = deadline
            self._schedule(math.ceil(deadline * 1000 - 1e-6), node_id, "timeout", deadline)

    def _on_commit(self, node_id: str, block) -> None:
        if not self.is_honest(node_id):
            return
        seen = self.committed_by_height.setdefault(block.height, set())
        seen.add(block.block_digest)
        if len(seen) > 1:
            self.safety_violation = True
        if node_id in self.validator_ids:
            for tx in block.transactions:
                self.commit_time_ms.setdefault(tx.record_digest, self.now_ms)

    def _dispatch(self, ev: SimEvent) -> None:
        now_s = ev.deliver_at / 1000
        if ev.kind == "msg":
            node = self.nodes[ev.target]
            self._emit_step(ev.target, node.handle_message(ev.payload, now_s, ev.sender))
        elif ev.kind == "tick":
            node = self.nodes[ev.target]
            fault = self._fault(ev.target)
            if fault is not None and fault.behavior == "equivocate" and node.is_leader() and node.round not in node.accepted_round:
                self._equivocating_proposal(node)
            else:
                self._emit_step(ev.target, node.maybe_propose(now_s))
            self._schedule(ev.deliver_at + int(self.block_time * 1000), ev.target, "tick")
        elif ev.kind == "timeout":
            node = self.nodes[ev.target]
            if ev.payload == node.deadline():
                self._timer_at.pop(ev.target, None)
                # the ms clock can land a hair before a float deadline
                self._emit_step(ev.target, node.on_timeout(max(now_s, ev.payload)))
        elif ev.kind == "sample":
            self._on_sample(ev.target, ev.payload)
        elif ev.kind == "bsm":
            self.daemons[ev.target].observe(ev.payload, int(now_s))
        elif ev.kind == "light":
            self._on_light(ev.target, ev.payload)
        elif ev.kind == "beacon":
            self._broadcast_light(ev.target)
            self._schedule(ev.deliver_at + LIGHT_BEACON_INTERVAL_MS, ev.target, "beacon")
        elif ev.kind == "content":
            self._on_content(*ev.payload)
        elif ev.kind == "maintenance":
            self._on_maintenance(ev.target, ev.payload)
        elif ev.kind == "diag":
            codes, failed = ev.payload
            self.daemons[ev.target].set_diagnostics(codes, failed)
        elif ev.kind == "submit":
            self._transmit(ev.sender or "client", ev.target, "msg", TxSubmit(ev.payload))
        else:
            raise RuntimeError(f"unknown event kind {ev.kind}")

    def _emit(self, actor: str, emission) -> None:
        if emission is None:
            self._log(actor, "suppress")
            return
        d = emission.transaction.record_digest
        self.emit_time_ms.setdefault(d, self.now_ms)
        self._log(actor, f"emit-{emission.record.kind}", None, d)
        for role, sr in emission.deliveries:
            owner = actor
            if role is Role.MAINTENANCE_PROVIDER:
                owner = sr.record.provider_id
            elif role in (Role.INSURER, Role.MANUFACTURER):
                owner = ""
            self._schedule(self.now_ms + self.network.base_latency_ms, actor, "content", (role, owner, sr))
        for vid, tx in emission.gossip:
            self._transmit(actor, vid, "msg", TxSubmit(tx))

    def _position_of(self, actor: str) -> tuple[int, int] | None:
        if actor in self.light_positions:
            return self.light_positions[actor]
        s = self._last_sample.get(actor)
        return (s.x_mm, s.y_mm) if s else None

    def _broadcast_bsm(self, sender: str, bsm: BsmMessage) -> None:
        radius_mm = self.network.radius_m * 1000
        for other in sorted(self.daemons):
            if other == sender:
                continue
            pos = self._position_of(other)
            if pos is None:
                continue
            if math.hypot(pos[0] - bsm.x_mm, pos[1] - bsm.y_mm) <= radius_mm:
                self._transmit(sender, other, "bsm", bsm)

    def _on_sample(self, vid: str, sample: VehicleSample) -> None:
        daemon = self.daemons[vid]
        prev = self._last_sample.get(vid)
        self._last_sample[vid] = sample
        for trig in daemon.observe(sample, sample.timestamp):
            self._emit(vid, daemon.on_trigger(trig, sample.timestamp))
        heading = 0
        if prev is not None and (prev.x_mm, prev.y_mm) != (sample.x_mm, sample.y_mm):
            ang = math.degrees(math.atan2(sample.x_mm - prev.x_mm, sample.y_mm - prev.y_mm)) % 360
            heading = int(round(ang * 100)) % 36000
        bsm = daemon.make_bsm(sample, heading)
        if bsm is not None:
            self._broadcast_bsm(vid, bsm)

    def _light_bsm(self, lid: str) -> BsmMessage | None:
        t = self.now_ms // 1000
        try:
            cert = self.daemons[lid].rotate_pseudonym(t)
        except LookupError:
            return None
        x, y = self.light_positions.get(lid, (0, 0))
        return BsmMessage(
            sender_pseudonym_id=cert.pseudonym_id,
            timestamp=t,
            x_mm=x,
            y_mm=y,
            speed_mms=0,
            traffic_light_state=dict(self._light_state[lid]),
        )

    def _broadcast_light(self, lid: str) -> None:
        bsm = self._light_bsm(lid)
        if bsm is not None:
            self._broadcast_bsm(lid, bsm)

    def _on_light(self, lid: str, states: dict[str, LightState]) -> None:
        self._light_state.setdefault(lid, {}).update(states)
        bsm = self._light_bsm(lid)
        if bsm is None:
            self._emit(lid, None)
            return
        self._emit(lid, self.daemons[lid].submit(bsm, bsm.timestamp))
        self._broadcast_bsm(lid, bsm)
        if lid not in self._beacon_on:
            self._beacon_on.add(lid)
            self._schedule(self.now_ms + LIGHT_BEACON_INTERVAL_MS, lid, "beacon")

    def _on_maintenance(self, vid: str, payload) -> None:
        provider, work, defects = payload
        daemon = self.daemons[vid]
        t = self.now_ms // 1000
        try:
            cert, sk = daemon._active(t)
        except LookupError:
            self._emit(vid, None)
            return
        rec = sign_maintenance(
            MaintenanceRecord(t, provider, tuple(work), tuple(defects)),
            sk,
            self.provider_keypair(provider).secret_key,
        )
        self._emit(vid, daemon.submit(rec, t))

    def _on_content(self, role: Role, owner: str, sr: SignedRecord) -> None:
        if verify_signed_record(sr, self.ca.public_key, self.certs.get) is not RecordVerdict.VALID:
            return
        frag = self.fragments.get((role, owner))
        if frag is None:
            frag = self.fragments[(role, owner)] = FragmentedLedger(role, owner)
        frag.store_fragment(sr)

    def submit_transaction(self, at_s: float, validator_ids, tx) -> None:
        """Hand-crafted client submission (bypasses the daemons)."""
        for v in validator_ids:
            self.add_input(int(round(at_s * 1000)), v, "submit", tx)

    # -- running

    def run_until(self, t_end: float) -> Metrics:
        self.build()
        self._started = True
        end_ms = int(round(t_end * 1000))
        while self._queue and self._queue[0].deliver_at <= end_ms:
            ev = heapq.heappop(self._queue)
            if ev.deliver_at < self.now_ms:
                raise RuntimeError("event scheduled in the past")
            self.now_ms = ev.deliver_at
            self._dispatch(ev)
        self.now_ms = max(self.now_ms, end_ms)
        return self.metrics()

    def honest_validators(self) -> list[Validator]:
        return [self.nodes[v] for v in self.validator_ids if self.is_honest(v)]

    def reference_ledger(self) -> SharedLedger:
        """Longest chain among honest validators (ties broken by id)."""
        best = None
        for node in self.honest_validators():
            if best is None or node.ledger.height > best.height:
                best = node.ledger
        return best if best is not None else self.nodes[self.validator_ids[0]].ledger

    def metrics(self) -> Metrics:
        ledger = self.reference_ledger()
        committed = [d for d in self.emit_time_ms if d in self.commit_time_ms]
        lat = sorted((self.commit_time_ms[d] - self.emit_time_ms[d]) / 1000 for d in committed)

        def pct(p):
            if not lat:
                return None
            return lat[min(len(lat) - 1, int(math.ceil(p * len(lat))) - 1)]

        n_tx = sum(len(b.transactions) for b in ledger.blocks)
        t_end = self.now_ms / 1000
        daemons = {
            vid: {"emitted": len(d.emitted), "suppressed": d.suppressed, "gossiped": d.gossiped}
            for vid, d in self.daemons.items()
        }
        rejections = sum(sum(n.rejections.values()) for n in self.honest_validators())
        return Metrics(
            t_end=t_end,
            committed_block_count=ledger.height,
            committed_tx_count=n_tx,
            emitted_tx_count=len(self.emit_time_ms),
            latency_mean=statistics.fmean(lat) if lat else None,
            latency_p50=pct(0.5),
            latency_p95=pct(0.95),
            throughput_tps=n_tx / t_end if t_end > 0 else 0.0,
            storage=storage_stats(ledger, [self.fragments[k] for k in sorted(self.fragments, key=_frag_key)]),
            daemons=daemons,
            messages_sent=self.messages_sent,
            messages_dropped=self.messages_dropped,
            tx_rejections=rejections,
            safety_violation=self.safety_violation,
        )

    def trace_text(self) -> str:
        return "\n".join(self.trace) + ("\n" if self.trace else "")

    def disclosures(self) -> list[tuple[str, SignedRecord]]:
        """Every stored fragment entry with the party holding it, in stable order."""
        out = []
        for key in sorted(self.fragments, key=_frag_key):
            frag = self.fragments[key]
            party = f"{frag.owner_role}:{frag.owner_id}" if frag.owner_id else str(frag.owner_role)
            for d in sorted(frag.entries):
                out.append((party, frag.entries[d]))
        return out


def _frag_key(k):
    return (k[0].value, k[1])


# -- scenario files -----------------------------------------------------------------


def _kv(tokens, lineno) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ScenarioError(f"expected key=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _num(s: str, lineno: int, what: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ScenarioError(f"invalid number for {what}: {s!r}", lineno) from None


def _int(s: str, lineno: int, what: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ScenarioError(f"invalid integer for {what}: {s!r}", lineno) from None


def _flag(s: str, lineno: int, what: str) -> bool:
    if s not in ("0", "1"):
        raise ScenarioError(f"{what} must be 0 or 1", lineno)
    return s == "1"


def _list(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


def load_scenario(text: str, seed: int | None = None) -> Simulation:
    """Parse a scenario file; ``seed`` overrides any ``seed`` line."""
    declared_seed = 0
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line.split()))
    for lineno, toks in lines:
        if toks[0] == "seed":
            if len(toks) != 2:
                raise ScenarioError("usage: seed <u64>", lineno)
            declared_seed = _int(toks[1], lineno, "seed")
            if not 0 <= declared_seed < 2**64:
                raise ScenarioError("seed must be an unsigned 64-bit integer", lineno)
    sim = Simulation(seed if seed is not None else declared_seed)
    plan = FaultPlan()
    fault_lines = []
    ids: set[str] = set()

    def declare(node_id, lineno):
        if node_id in ids:
            raise ScenarioError(f"duplicate id {node_id!r}", lineno)
        ids.add(node_id)

    for lineno, toks in lines:
        head, rest = toks[0], toks[1:]
        if head == "seed":
            continue
        if head in ("validator", "monitor", "vehicle", "light") and not rest:
            raise ScenarioError(f"{head} needs an id", lineno)
        if head == "validator":
            declare(rest[0], lineno)
            sim.validator_ids.append(rest[0])
        elif head == "monitor":
            declare(rest[0], lineno)
            sim.monitor_ids.append(rest[0])
        elif head == "vehicle":
            declare(rest[0], lineno)
            kv = _kv(rest[1:], lineno)
            unknown = set(kv) - {"certs", "start", "fanout", "delta", "diag"}
            if unknown:
                raise ScenarioError(f"unknown vehicle option(s): {', '.join(sorted(unknown))}", lineno)
            spec = VehicleSpec(
                rest[0],
                certs=_int(kv.get("certs", "12"), lineno, "certs"),
                start=_int(kv.get("start", "0"), lineno, "start"),
                fanout=_int(kv.get("fanout", "3"), lineno, "fanout"),
                speed_delta=_num(kv.get("delta", str(DEFAULT_SPEED_DELTA)), lineno, "delta"),
                diag_interval=_int(kv.get("diag", "0"), lineno, "diag"),
            )
            if spec.certs < 1 or spec.start < 0 or spec.fanout < 1 or spec.speed_delta <= 0 or spec.diag_interval < 0:
                raise ScenarioError("vehicle options out of range", lineno)
            sim.vehicle_specs[rest[0]] = spec
        elif head == "consensus":
            kv = _kv(rest, lineno)
            if "f" in kv:
                sim.f = _int(kv["f"], lineno, "f")
            if "block_time" in kv:
                sim.block_time = _num(kv["block_time"], lineno, "block_time")
            if "timeout" in kv:
                sim.round_timeout = _num(kv["timeout"], lineno, "timeout")
        elif head == "net":
            kv = _kv(rest, lineno)
            try:
                sim.network = NetworkModel(
                    base_latency_ms=_int(kv.get("latency", "50"), lineno, "latency"),
                    jitter_ms=_int(kv.get("jitter", "0"), lineno, "jitter"),
                    drop_probability=_num(kv.get("drop", "0"), lineno, "drop"),
                    radius_m=_num(kv.get("radius", str(DEFAULT_RADIUS_M)), lineno, "radius"),
                )
            except ConfigError as exc:
                raise ScenarioError(str(exc), lineno) from exc
        elif head == "fault":
            if len(rest) < 2:
                raise ScenarioError("usage: fault <id> <behavior> [from=<t> to=<t>]", lineno)
            kv = _kv(rest[2:], lineno)
            if rest[1] not in BEHAVIORS:
                raise ScenarioError(f"unknown behavior {rest[1]!r}", lineno)
            fault_lines.append((lineno, rest[0]))
            plan.add(
                rest[0],
                rest[1],
                _num(kv.get("from", "0"), lineno, "from"),
                _num(kv["to"], lineno, "to") if "to" in kv else math.inf,
            )
        elif head in ("sample", "light", "maintenance"):
            pass
        else:
            raise ScenarioError(f"unknown directive {head!r}", lineno)

    for lineno, toks in lines:
        head, rest = toks[0], toks[1:]
        if head == "sample":
            _parse_sample(sim, rest, lineno)
        elif head == "light":
            _parse_light(sim, rest, lineno)
        elif head == "maintenance":
            _parse_maintenance(sim, rest, lineno)

    try:
        sim.build()
    except ScenarioError:
        raise
    for lineno, node_id in fault_lines:
        if node_id not in sim.validator_ids:
            raise ScenarioError(f"fault on unknown validator {node_id!r}", lineno)
    sim.inject_fault(plan)
    return sim


def _time_ms(kv, lineno) -> int:
    if "t" not in kv:
        raise ScenarioError("missing t=<seconds>", lineno)
    t = _int(kv["t"], lineno, "t")
    if t < 0:
        raise ScenarioError("t must be >= 0", lineno)
    return t * 1000


def _parse_sample(sim: Simulation, rest, lineno) -> None:
    if not rest or rest[0] not in sim.vehicle_specs:
        raise ScenarioError(f"sample for undeclared vehicle {rest[0] if rest else ''!r}", lineno)
    vid = rest[0]
    kv = _kv(rest[1:], lineno)
    unknown = set(kv) - {"t", "x", "y", "v", "brake", "airbag", "autopilot", "steer", "dtc", "failed"}
    if unknown:
        raise ScenarioError(f"unknown sample field(s): {', '.join(sorted(unknown))}", lineno)
    for req in ("x", "y", "v"):
        if req not in kv:
            raise ScenarioError(f"missing {req}=", lineno)
    at = _time_ms(kv, lineno)
    try:
        sample = VehicleSample(
            timestamp=at // 1000,
            x_mm=to_fixed(kv["x"]),
            y_mm=to_fixed(kv["y"]),
            speed_mms=to_fixed(kv["v"]),
            brake=_flag(kv.get("brake", "0"), lineno, "brake"),
            steering_cdeg=to_fixed(kv.get("steer", "0"), 100),
            autopilot=_flag(kv.get("autopilot", "0"), lineno, "autopilot"),
            airbag=_flag(kv.get("airbag", "0"), lineno, "airbag"),
        )
        sample.validate()
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(f"invalid sample: {exc}", lineno) from None
    if "dtc" in kv or "failed" in kv:
        sim.add_input(at, vid, "diag", (_list(kv.get("dtc", "")), _list(kv.get("failed", ""))))
    sim.add_input(at, vid, "sample", sample)


def _parse_light(sim: Simulation, rest, lineno) -> None:
    if not rest:
        raise ScenarioError("light needs an id", lineno)
    lid = rest[0]
    kv = _kv(rest[1:], lineno)
    at = _time_ms(kv, lineno)
    if lid not in sim.light_ids:
        sim.light_ids.append(lid)
    if "x" in kv or "y" in kv:
        sim.light_positions[lid] = (to_fixed(kv.get("x", "0")), to_fixed(kv.get("y", "0")))
    states = {}
    for k, v in kv.items():
        if k in ("t", "x", "y"):
            continue
        try:
            states[k] = LightState.parse(v)
        except KeyError:
            raise ScenarioError(f"invalid light state {v!r}", lineno) from None
    if not states:
        raise ScenarioError("light line sets no approach", lineno)
    sim.add_input(at, lid, "light", states)


def _parse_maintenance(sim: Simulation, rest, lineno) -> None:
    if not rest or rest[0] not in sim.vehicle_specs:
        raise ScenarioError("maintenance for undeclared vehicle", lineno)
    kv = _kv(rest[1:], lineno)
    if "provider" not in kv:
        raise ScenarioError("missing provider=", lineno)
    at = _time_ms(kv, lineno)
    sim.add_input(at, rest[0], "maintenance", (kv["provider"], _list(kv.get("work", "")), _list(kv.get("defects", ""))))
