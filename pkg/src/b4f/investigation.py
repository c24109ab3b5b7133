"""Post-accident investigation: integrity checks, evidence assembly, scene rules.

Rules run in a fixed order and the first match wins:

    R1  a colliding vehicle entered the intersection on red
    R2  a third vehicle ran a red light and met a colliding vehicle's path
        shortly before the accident
    R3  two conflicting approaches were green at the same time
    R4  recent maintenance (or a post-maintenance trouble code) shows a
        braking/steering defect
    R5  autopilot engaged at the accident and a recent diagnosis reports a
        failed sensor
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from . import crypto
from .crypto import PseudonymCertificate
from .encoding import EncodingError
from .ledger import SharedLedger
from .records import (
    BsmMessage,
    DiagnosisReport,
    EdrEvent,
    LightState,
    MaintenanceRecord,
    MultisigVerdict,
    RecordVerdict,
    SignedRecord,
    verify_maintenance_multisig,
    verify_signed_record,
)

DAY = 86400
APPROACHES = ("N", "E", "S", "W")


@dataclass(frozen=True)
class DisclosedRecord:
    party: str
    raw: bytes


@dataclass
class Disclosure:
    records: list[DisclosedRecord] = field(default_factory=list)

    def add(self, party: str, record: SignedRecord | bytes) -> Disclosure:
        raw = record if isinstance(record, (bytes, bytearray)) else record.encode()
        self.records.append(DisclosedRecord(party, bytes(raw)))
        return self


@dataclass(frozen=True)
class RecordCheck:
    party: str
    digest: bytes
    record: SignedRecord | None
    decoded: bool
    on_chain: tuple[int, int] | None
    signature: str
    window: str
    multisig: str | None

    @property
    def passed(self) -> bool:
        return (
            self.decoded
            and self.on_chain is not None
            and self.signature == "ok"
            and self.window == "ok"
            and self.multisig in (None, MultisigVerdict.VALID.value)
        )

    def line(self) -> str:
        loc = "absent" if self.on_chain is None else f"{self.on_chain[0]}:{self.on_chain[1]}"
        kind = str(self.record.kind) if self.record is not None else "undecodable"
        return (
            f"record={self.digest.hex()[:16]} party={self.party} kind={kind} on_chain={loc} "
            f"signature={self.signature} window={self.window} multisig={self.multisig or 'n/a'} "
            f"pass={int(self.passed)}"
        )


@dataclass
class IntegrityReport:
    checks: list[RecordCheck]

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def passing(self) -> list[RecordCheck]:
        return [c for c in self.checks if c.passed]


def verify_disclosure(
    disc: Disclosure,
    ledger: SharedLedger,
    ca_public_key: bytes,
    cert_lookup,
    provider_keys: dict[str, bytes],
) -> IntegrityReport:
    checks = []
    for item in disc.records:
        d = crypto.digest(item.raw)
        loc = ledger.contains_digest(d)
        try:
            sr = SignedRecord.decode(item.raw)
        except EncodingError:
            checks.append(RecordCheck(item.party, d, None, False, loc, "undecodable", "undecodable", None))
            continue
        if loc is not None:
            tx = ledger.transaction_at(loc)
            if tx.pseudonym_id != sr.pseudonym_id or tx.submit_time != sr.submit_time or tx.record_kind != sr.kind:
                loc = None
        verdict = verify_signed_record(sr, ca_public_key, cert_lookup)
        if verdict is RecordVerdict.VALID:
            sig, win = "ok", "ok"
        elif verdict is RecordVerdict.OUTSIDE_WINDOW:
            sig, win = "ok", verdict.value
        else:
            sig, win = verdict.value, "unchecked"
        multisig = None
        if isinstance(sr.record, MaintenanceRecord):
            cert = cert_lookup(sr.pseudonym_id)
            if cert is None:
                multisig = MultisigVerdict.BOTH_BAD.value
            else:
                multisig = verify_maintenance_multisig(
                    sr.record, cert, provider_keys.get(sr.record.provider_id)
                ).value
        checks.append(RecordCheck(item.party, d, sr, True, loc, sig, win, multisig))
    return IntegrityReport(checks)


# -- evidence ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrackPoint:
    t: int
    x_mm: int
    y_mm: int
    autopilot: bool | None = None


@dataclass(frozen=True)
class MaintenanceEntry:
    service_time: int
    provider_id: str
    observed_defects: tuple[str, ...]
    ref: bytes


@dataclass(frozen=True)
class DiagnosisEntry:
    report_time: int
    trouble_codes: tuple[str, ...]
    failed_sensors: tuple[str, ...]
    ref: bytes


@dataclass
class EvidenceBundle:
    accident_time: int
    colliding: tuple[str, ...]
    trajectories: dict[str, list[TrackPoint]] = field(default_factory=dict)
    light_changes: dict[str, list[tuple[int, LightState]]] = field(default_factory=dict)
    maintenance: dict[str, list[MaintenanceEntry]] = field(default_factory=dict)
    diagnosis: dict[str, list[DiagnosisEntry]] = field(default_factory=dict)
    last_pre_event: dict[str, TrackPoint] = field(default_factory=dict)
    refs: dict[str, set[bytes]] = field(default_factory=dict)
    light_refs: set[bytes] = field(default_factory=set)

    @property
    def empty(self) -> bool:
        return not (self.trajectories or self.light_changes or self.maintenance or self.diagnosis)

    @property
    def has_lights(self) -> bool:
        return bool(self.light_changes)

    def light_at(self, approach: str, t: float) -> LightState | None:
        """Piecewise-constant state: the last reported value at or before ``t``."""
        state = None
        for when, s in self.light_changes.get(approach, ()):
            if when > t:
                break
            state = s
        return state


def build_evidence(report: IntegrityReport, accident_time: int, colliding, resolve) -> EvidenceBundle:
    """Assemble evidence from passing records only.

    ``resolve`` maps a pseudonym id to the holder label (CA disclosure);
    unresolvable senders are labelled by their pseudonym.
    """

    def who(pid: bytes) -> str:
        return resolve(pid) or f"pseudonym:{pid.hex()[:8]}"

    bundle = EvidenceBundle(accident_time, tuple(sorted(colliding)))
    points: dict[str, dict[int, TrackPoint]] = {}
    lights: dict[str, dict[int, LightState]] = {}
    last_edr: dict[str, tuple[EdrEvent, bytes]] = {}

    def point_key(p: TrackPoint):
        # total order so duplicates resolve the same way whatever the input order
        return (p.autopilot is None, bool(p.autopilot), p.x_mm, p.y_mm)

    def add_point(owner, p: TrackPoint, ref):
        existing = points.setdefault(owner, {}).get(p.t)
        if existing is None or point_key(p) < point_key(existing):
            points[owner][p.t] = p
        bundle.refs.setdefault(owner, set()).add(ref)

    def add_bsm(b: BsmMessage, ref):
        if b.traffic_light_state is not None:
            for approach, state in b.traffic_light_state.items():
                seen = lights.setdefault(approach, {})
                prev = seen.get(b.timestamp)
                seen[b.timestamp] = state if prev is None else max(prev, state)
            bundle.light_refs.add(ref)
        else:
            add_point(who(b.sender_pseudonym_id), TrackPoint(b.timestamp, b.x_mm, b.y_mm), ref)

    done: set[bytes] = set()
    for check in report.passing:
        # the same record is usually disclosed by more than one party
        if check.digest in done:
            continue
        done.add(check.digest)
        sr = check.record
        rec = sr.record
        ref = check.digest
        owner = who(sr.pseudonym_id)
        if isinstance(rec, BsmMessage):
            add_bsm(rec, ref)
        elif isinstance(rec, EdrEvent):
            for s in rec.pre_event_samples:
                add_point(owner, TrackPoint(s.timestamp, s.x_mm, s.y_mm, s.autopilot), ref)
            for b in rec.related_bsms:
                add_bsm(b, ref)
            if rec.event_time <= accident_time + 60:
                cur = last_edr.get(owner)
                if cur is None or (rec.event_time, ref) > (cur[0].event_time, cur[1]):
                    last_edr[owner] = (rec, ref)
        elif isinstance(rec, MaintenanceRecord):
            bundle.maintenance.setdefault(owner, []).append(
                MaintenanceEntry(rec.service_time, rec.provider_id, rec.observed_defects, ref)
            )
        elif isinstance(rec, DiagnosisReport):
            bundle.diagnosis.setdefault(owner, []).append(
                DiagnosisEntry(rec.report_time, rec.trouble_codes, tuple(rec.failed_sensors), ref)
            )

    bundle.trajectories = {k: [v[t] for t in sorted(v)] for k, v in sorted(points.items())}
    for approach in sorted(lights):
        changes = []
        for t in sorted(lights[approach]):
            s = lights[approach][t]
            if not changes or changes[-1][1] != s:
                changes.append((t, s))
        bundle.light_changes[approach] = changes
    for k in bundle.maintenance:
        bundle.maintenance[k].sort(key=lambda e: (e.service_time, e.ref))
    for k in bundle.diagnosis:
        bundle.diagnosis[k].sort(key=lambda e: (e.report_time, e.ref))
    for owner, (rec, ref) in last_edr.items():
        samples = [s for s in rec.pre_event_samples if s.timestamp <= accident_time]
        if samples:
            s = samples[-1]
            bundle.last_pre_event[owner] = TrackPoint(s.timestamp, s.x_mm, s.y_mm, s.autopilot)
    return bundle


# -- intersection config -------------------------------------------------------------


@dataclass
class Intersection:
    x0: int = -15000
    y0: int = -15000
    x1: int = 15000
    y1: int = 15000
    conflicts: set[frozenset[str]] = field(default_factory=set)
    interaction_window: int = 2
    signal_window: int = 5
    proximity_mm: int = 5000
    maintenance_lookback: int = 90 * DAY
    diagnosis_lookback: int = 7 * DAY
    defect_keywords: tuple[str, ...] = ("brake", "braking", "steering", "pulling")
    defect_codes: frozenset[str] = frozenset({"C0035", "C0040", "C0045", "C0050", "C0455", "C0460"})

    def inside(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def conflicting(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.conflicts

    @classmethod
    def parse(cls, text: str) -> Intersection:
        from .records import to_fixed

        ix = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            try:
                if head == "box":
                    kv = dict(t.split("=", 1) for t in rest)
                    ix.x0, ix.y0 = to_fixed(kv["x0"]), to_fixed(kv["y0"])
                    ix.x1, ix.y1 = to_fixed(kv["x1"]), to_fixed(kv["y1"])
                    if ix.x0 >= ix.x1 or ix.y0 >= ix.y1:
                        raise ValueError("empty box")
                elif head == "conflict":
                    if len(rest) != 2 or rest[0] == rest[1]:
                        raise ValueError("conflict needs two distinct approaches")
                    ix.conflicts.add(frozenset(rest))
                elif head == "window":
                    kv = dict(t.split("=", 1) for t in rest)
                    ix.interaction_window = int(kv.get("interaction", ix.interaction_window))
                    ix.signal_window = int(kv.get("signal", ix.signal_window))
                elif head == "lookback":
                    kv = dict(t.split("=", 1) for t in rest)
                    if "maintenance_days" in kv:
                        ix.maintenance_lookback = int(kv["maintenance_days"]) * DAY
                    if "diagnosis_days" in kv:
                        ix.diagnosis_lookback = int(kv["diagnosis_days"]) * DAY
                elif head == "proximity":
                    ix.proximity_mm = to_fixed(rest[0])
                elif head == "defect_keywords":
                    ix.defect_keywords = tuple(k.lower() for k in rest)
                elif head == "defect_codes":
                    ix.defect_codes = frozenset(rest)
                else:
                    raise ValueError(f"unknown directive {head!r}")
            except (KeyError, ValueError, IndexError) as exc:
                raise ValueError(f"intersection line {lineno}: {exc}") from None
        return ix


# -- classification ---------------------------------------------------------------------


class Verdict(enum.Enum):
    VEHICLE_FAULT = "vehicle_fault"
    THIRD_VEHICLE_FAULT = "third_vehicle_fault"
    INFRASTRUCTURE_FAULT = "infrastructure_fault"
    MAINTENANCE_PROVIDER_FAULT = "maintenance_provider_fault"
    MANUFACTURER_FAULT = "manufacturer_fault"
    UNDETERMINED = "undetermined"


@dataclass(frozen=True)
class SceneClassification:
    verdict: Verdict
    party: str | None
    rule: str
    evidence: tuple[bytes, ...] = ()

    def line(self) -> str:
        parts = [f"verdict={self.verdict.value}"]
        if self.party is not None:
            parts.append(f"id={self.party}")
        parts.append(f"rule={self.rule}")
        return " ".join(parts)


@dataclass(frozen=True)
class Entry:
    vehicle: str
    t: float
    approach: str
    light: LightState | None


def _entries(track: list[TrackPoint], ix: Intersection, bundle: EvidenceBundle, until: float) -> list[Entry]:
    """Times and sides at which a track crosses into the intersection box."""
    out = []
    for a, b in zip(track, track[1:]):
        if b.t > until:
            break
        if ix.inside(a.x_mm, a.y_mm) or not ix.inside(b.x_mm, b.y_mm):
            continue
        s, side = _entry_param(a, b, ix)
        t = a.t + s * (b.t - a.t)
        out.append(Entry("", t, side, bundle.light_at(side, t)))
    return out


def _entry_param(a: TrackPoint, b: TrackPoint, ix: Intersection) -> tuple[float, str]:
    dx, dy = b.x_mm - a.x_mm, b.y_mm - a.y_mm
    best = (1.0, "N")
    candidates = []
    if a.y_mm < ix.y0 and dy > 0:
        candidates.append(((ix.y0 - a.y_mm) / dy, "S"))
    if a.y_mm > ix.y1 and dy < 0:
        candidates.append(((ix.y1 - a.y_mm) / dy, "N"))
    if a.x_mm < ix.x0 and dx > 0:
        candidates.append(((ix.x0 - a.x_mm) / dx, "W"))
    if a.x_mm > ix.x1 and dx < 0:
        candidates.append(((ix.x1 - a.x_mm) / dx, "E"))
    # the boundary crossed last is the one that actually admits the track
    if candidates:
        best = max(candidates)
    return best


def _red_entry(vid: str, bundle: EvidenceBundle, ix: Intersection) -> Entry | None:
    for e in _entries(bundle.trajectories.get(vid, []), ix, bundle, bundle.accident_time):
        if e.light is LightState.RED:
            return Entry(vid, e.t, e.approach, e.light)
    return None


def _clip(track: list[TrackPoint], lo: float, hi: float) -> list[tuple[float, float]]:
    """Polyline of the track restricted to [lo, hi] by linear interpolation."""
    pts = []
    for a, b in zip(track, track[1:]):
        if b.t < lo or a.t > hi:
            continue
        for t in (max(a.t, lo), min(b.t, hi)):
            if b.t == a.t:
                p = (float(a.x_mm), float(a.y_mm))
            else:
                u = (t - a.t) / (b.t - a.t)
                p = (a.x_mm + u * (b.x_mm - a.x_mm), a.y_mm + u * (b.y_mm - a.y_mm))
            if not pts or pts[-1] != p:
                pts.append(p)
    if not pts:
        for p in track:
            if lo <= p.t <= hi:
                pts.append((float(p.x_mm), float(p.y_mm)))
    return pts


def _seg_dist(p, q, r, s) -> float:
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    d1, d2, d3, d4 = cross(r, s, p), cross(r, s, q), cross(p, q, r), cross(p, q, s)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4):
        return 0.0

    def pt_seg(pt, a, b):
        vx, vy = b[0] - a[0], b[1] - a[1]
        L = vx * vx + vy * vy
        u = 0.0 if L == 0 else max(0.0, min(1.0, ((pt[0] - a[0]) * vx + (pt[1] - a[1]) * vy) / L))
        return math.hypot(pt[0] - (a[0] + u * vx), pt[1] - (a[1] + u * vy))

    return min(pt_seg(p, r, s), pt_seg(q, r, s), pt_seg(r, p, q), pt_seg(s, p, q))


def _paths_meet(a: list[tuple[float, float]], b: list[tuple[float, float]], tol: float) -> bool:
    if not a or not b:
        return False
    sa = list(zip(a, a[1:])) or [(a[0], a[0])]
    sb = list(zip(b, b[1:])) or [(b[0], b[0])]
    return any(_seg_dist(p, q, r, s) <= tol for p, q in sa for r, s in sb)


def _is_defect(text: str, ix: Intersection) -> bool:
    low = text.lower()
    return any(k in low for k in ix.defect_keywords)


def reconstruct_scene(bundle: EvidenceBundle, ix: Intersection | None = None) -> SceneClassification:
    ix = ix or Intersection()
    acc = bundle.accident_time
    colliding = [v for v in bundle.colliding]
    if bundle.empty or not colliding:
        return SceneClassification(Verdict.UNDETERMINED, None, "none")

    light_refs = tuple(sorted(bundle.light_refs))

    def refs(*vids):
        out = set(light_refs)
        for v in vids:
            out |= bundle.refs.get(v, set())
        return tuple(sorted(out))

    light_violation = False
    if bundle.has_lights:
        # R1
        for vid in colliding:
            if _red_entry(vid, bundle, ix) is not None:
                return SceneClassification(Verdict.VEHICLE_FAULT, vid, "R1", refs(vid))
        # R2
        lo = acc - ix.interaction_window
        for vid in sorted(v for v in bundle.trajectories if v not in colliding):
            if _red_entry(vid, bundle, ix) is None:
                continue
            light_violation = True
            mine = _clip(bundle.trajectories[vid], lo, acc)
            for other in colliding:
                theirs = _clip(bundle.trajectories.get(other, []), lo, acc)
                if _paths_meet(mine, theirs, ix.proximity_mm):
                    return SceneClassification(Verdict.THIRD_VEHICLE_FAULT, vid, "R2", refs(vid, other))
        # R3
        lo = acc - ix.signal_window
        times = {float(lo)} | {
            float(t) for ch in bundle.light_changes.values() for t, _ in ch if lo <= t <= acc
        }
        for t in sorted(times):
            green = sorted(a for a in bundle.light_changes if bundle.light_at(a, t) is LightState.GREEN)
            for i, a in enumerate(green):
                for b in green[i + 1:]:
                    if ix.conflicting(a, b):
                        return SceneClassification(Verdict.INFRASTRUCTURE_FAULT, None, "R3", light_refs)

    if light_violation:
        return SceneClassification(Verdict.UNDETERMINED, None, "none")

    # R4
    for vid in colliding:
        history = [m for m in bundle.maintenance.get(vid, []) if acc - ix.maintenance_lookback <= m.service_time <= acc]
        for m in history:
            if any(_is_defect(d, ix) for d in m.observed_defects):
                return SceneClassification(Verdict.MAINTENANCE_PROVIDER_FAULT, m.provider_id, "R4", (m.ref,))
        for diag in bundle.diagnosis.get(vid, []):
            if diag.report_time > acc or not (set(diag.trouble_codes) & ix.defect_codes):
                continue
            before = [m for m in history if m.service_time <= diag.report_time]
            if before:
                m = before[-1]
                return SceneClassification(Verdict.MAINTENANCE_PROVIDER_FAULT, m.provider_id, "R4", (m.ref, diag.ref))

    # R5
    for vid in colliding:
        last = bundle.last_pre_event.get(vid)
        if last is None or not last.autopilot:
            continue
        for diag in bundle.diagnosis.get(vid, []):
            if acc - ix.diagnosis_lookback <= diag.report_time <= acc and diag.failed_sensors:
                return SceneClassification(Verdict.MANUFACTURER_FAULT, None, "R5", refs(vid) + (diag.ref,))

    return SceneClassification(Verdict.UNDETERMINED, None, "none")


def investigate(disc, ledger, ca_public_key, cert_lookup, provider_keys, resolve, accident_time, colliding, ix=None):
    report = verify_disclosure(disc, ledger, ca_public_key, cert_lookup, provider_keys)
    bundle = build_evidence(report, accident_time, colliding, resolve)
    return report, bundle, reconstruct_scene(bundle, ix)


# -- disclosure directories ---------------------------------------------------------------


@dataclass
class CaseFile:
    """Everything an investigator receives besides the ledger dump."""

    disclosure: Disclosure
    ca_public_key: bytes
    certs: dict[bytes, PseudonymCertificate]
    holders: dict[bytes, str]
    providers: dict[str, bytes]

    def resolve(self, pid: bytes) -> str | None:
        return self.holders.get(pid)


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line and not line.startswith("#"):
                yield line.split()


def write_case_dir(path, disclosed, ca_public_key, certs, holders, providers) -> None:
    """Write a disclosure directory; ``disclosed`` is ``[(party, SignedRecord | bytes)]``."""
    import os

    os.makedirs(path, exist_ok=True)

    def out(name, rows):
        with open(os.path.join(path, name), "w", encoding="utf-8") as fh:
            fh.writelines(" ".join(r) + "\n" for r in rows)

    out("records.txt", [(p, (r if isinstance(r, bytes) else r.encode()).hex()) for p, r in disclosed])
    out("certs.txt", [(certs[k].encode().hex(),) for k in sorted(certs)])
    out("pseudonyms.txt", [(k.hex(), holders[k]) for k in sorted(holders)])
    out("providers.txt", [(k, providers[k].hex()) for k in sorted(providers)])
    out("ca.pub", [(ca_public_key.hex(),)])


def read_case_dir(path) -> CaseFile:
    import os

    def p(name):
        return os.path.join(path, name)

    disc = Disclosure()
    for party, hexed in _lines(p("records.txt")):
        disc.add(party, bytes.fromhex(hexed))
    certs = {}
    for (hexed,) in _lines(p("certs.txt")):
        c = PseudonymCertificate.decode(bytes.fromhex(hexed))
        certs[c.pseudonym_id] = c
    holders = {}
    if os.path.exists(p("pseudonyms.txt")):
        holders = {bytes.fromhex(k): v for k, v in _lines(p("pseudonyms.txt"))}
    providers = {}
    if os.path.exists(p("providers.txt")):
        providers = {k: bytes.fromhex(v) for k, v in _lines(p("providers.txt"))}
    with open(p("ca.pub"), encoding="utf-8") as fh:
        ca_pk = bytes.fromhex(fh.read().strip())
    return CaseFile(disc, ca_pk, certs, holders, providers)
