"""Vehicle-side forensic daemon.

Buffers vehicle state and received BSMs, fires trigger rules, signs the
resulting records with the pseudonym active at that moment, routes full
content to counterparties and gossips the hash transaction to a random
subset of validators.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Union

from .crypto import PseudonymCertificate
from .ledger import HashTransaction, Role, make_transaction
from .records import (
    DEFAULT_BSM_WINDOW,
    BsmMessage,
    DiagnosisReport,
    EdrEvent,
    ForensicRecord,
    RecordKind,
    SensorStatus,
    SignedRecord,
    TriggerKind,
    VehicleSample,
    make_signed_record,
)

SAMPLE_HISTORY = 60

DEFAULT_ROUTING = {
    RecordKind.EDR: Role.INSURER,
    RecordKind.BSM: Role.INSURER,
    RecordKind.DIAGNOSIS: Role.MANUFACTURER,
    RecordKind.MAINTENANCE: Role.MAINTENANCE_PROVIDER,
}


class MonotonicityError(ValueError):
    """Input timestamp earlier than a previously observed one."""


class IdentityGapError(LookupError):
    """No pseudonym certificate covers the requested time."""


@dataclass(frozen=True)
class AirbagRule:
    pass


@dataclass(frozen=True)
class SpeedDeltaRule:
    threshold_mms: int

    def __post_init__(self):
        if self.threshold_mms <= 0:
            raise ValueError("speed_delta threshold must be > 0")


@dataclass(frozen=True)
class PeriodicRule:
    interval: int
    kind: RecordKind = RecordKind.DIAGNOSIS

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("periodic interval must be >= 1 s")
        if self.kind is not RecordKind.DIAGNOSIS:
            raise ValueError("periodic rules only produce diagnosis reports")


TriggerRule = Union[AirbagRule, SpeedDeltaRule, PeriodicRule]


@dataclass(frozen=True)
class Trigger:
    rule: TriggerRule
    time: int


@dataclass
class DaemonConfig:
    rules: list
    certs: list[tuple[PseudonymCertificate, bytes]]
    validator_ids: list[str]
    gossip_fanout: int = 3
    routing: dict = field(default_factory=lambda: dict(DEFAULT_ROUTING))
    bsm_window: int = DEFAULT_BSM_WINDOW
    seed: int = 0

    def __post_init__(self):
        self.certs = sorted(self.certs, key=lambda c: c[0].valid_from)
        for (a, _), (b, _) in zip(self.certs, self.certs[1:]):
            if a.valid_until != b.valid_from:
                raise ValueError("pseudonym windows must be contiguous")
        if self.gossip_fanout < 1:
            raise ValueError("gossip fanout must be >= 1")
        if self.validator_ids and self.gossip_fanout > len(self.validator_ids):
            raise ValueError("gossip fanout exceeds validator count")


@dataclass
class Emission:
    """What one trigger produced: content deliveries and gossip."""

    record: SignedRecord
    transaction: HashTransaction
    deliveries: list[tuple[Role, SignedRecord]]
    gossip: list[tuple[str, HashTransaction]]


class ForensicDaemon:
    def __init__(self, config: DaemonConfig):
        self.config = config
        self.samples: deque[VehicleSample] = deque()
        self.bsms: deque[BsmMessage] = deque()
        self.active_index = 0
        self.emitted: list[bytes] = []
        self.suppressed = 0
        self.gossiped = 0
        self.trouble_codes: tuple[str, ...] = ()
        self.sensor_status: dict[str, SensorStatus] = {}
        self._last_time: int | None = None
        self._last_periodic: dict[int, int] = {}
        self._rng = random.Random(config.seed)

    @property
    def last_sample(self) -> VehicleSample | None:
        return self.samples[-1] if self.samples else None

    def observe(self, item: VehicleSample | BsmMessage, now: int) -> list[Trigger]:
        if self._last_time is not None and now < self._last_time:
            raise MonotonicityError(f"time went backwards: {now} < {self._last_time}")
        self._last_time = now
        if isinstance(item, BsmMessage):
            self.bsms.append(item)
            while self.bsms and self.bsms[0].timestamp < now - self.config.bsm_window:
                self.bsms.popleft()
            return []

        prev = self.last_sample
        if prev is not None and item.timestamp <= prev.timestamp:
            raise MonotonicityError("vehicle samples must have increasing timestamps")
        self.samples.append(item)
        while self.samples and self.samples[0].timestamp < now - SAMPLE_HISTORY:
            self.samples.popleft()

        fired = []
        for rule in self.config.rules:
            if isinstance(rule, AirbagRule):
                if item.airbag and not (prev is not None and prev.airbag):
                    fired.append(Trigger(rule, now))
        for rule in self.config.rules:
            if isinstance(rule, SpeedDeltaRule) and prev is not None:
                if abs(item.speed_mms - prev.speed_mms) > rule.threshold_mms:
                    fired.append(Trigger(rule, now))
        for i, rule in enumerate(self.config.rules):
            if isinstance(rule, PeriodicRule):
                last = self._last_periodic.get(i)
                if last is None or now - last >= rule.interval:
                    self._last_periodic[i] = now
                    fired.append(Trigger(rule, now))
        return fired

    def set_diagnostics(self, trouble_codes=(), failed_sensors=(), ok_sensors=()) -> None:
        self.trouble_codes = tuple(trouble_codes)
        status = dict(self.sensor_status)
        for s in ok_sensors:
            status[s] = SensorStatus.OK
        for s in failed_sensors:
            status[s] = SensorStatus.FAILED
        self.sensor_status = status

    def rotate_pseudonym(self, now: int) -> PseudonymCertificate:
        return self._active(now)[0]

    def _active(self, now: int) -> tuple[PseudonymCertificate, bytes]:
        certs = self.config.certs
        if certs and certs[min(self.active_index, len(certs) - 1)][0].covers(now):
            return certs[self.active_index]
        for i, (cert, sk) in enumerate(certs):
            if cert.covers(now):
                self.active_index = i
                return cert, sk
        raise IdentityGapError(f"no pseudonym certificate covers t={now}")

    def build_record(self, trigger: Trigger) -> ForensicRecord:
        now = trigger.time
        rule = trigger.rule
        if isinstance(rule, PeriodicRule):
            last = self.last_sample
            return DiagnosisReport(
                report_time=now,
                trouble_codes=self.trouble_codes,
                sensor_status=dict(self.sensor_status),
                autopilot=bool(last and last.autopilot),
            )
        window = self.config.bsm_window
        samples = tuple(s for s in self.samples if now - SAMPLE_HISTORY <= s.timestamp <= now)
        related = tuple(b for b in self.bsms if now - window <= b.timestamp <= now)
        if isinstance(rule, SpeedDeltaRule):
            return EdrEvent(TriggerKind.SPEED_DELTA, now, samples, related, rule.threshold_mms, window)
        return EdrEvent(TriggerKind.AIRBAG, now, samples, related, None, window)

    def on_trigger(self, trigger: Trigger, now: int) -> Emission | None:
        return self.submit(self.build_record(trigger), now)

    def submit(self, record: ForensicRecord, now: int) -> Emission | None:
        """Sign ``record`` at ``now`` and fan it out; ``None`` on an identity gap."""
        try:
            cert, sk = self._active(now)
        except IdentityGapError:
            self.suppressed += 1
            return None
        sr = make_signed_record(record, cert, sk, now)
        tx = make_transaction(sr, sk)
        deliveries = [(self.config.routing[record.kind], sr)]
        if self.config.routing[record.kind] is not Role.PERSONAL_STORE:
            deliveries.append((Role.PERSONAL_STORE, sr))
        k = min(self.config.gossip_fanout, len(self.config.validator_ids))
        targets = self._rng.sample(list(self.config.validator_ids), k)
        self.emitted.append(tx.record_digest)
        self.gossiped += len(targets)
        return Emission(sr, tx, deliveries, [(v, tx) for v in targets])

    def make_bsm(self, sample: VehicleSample, heading_cdeg: int = 0) -> BsmMessage | None:
        """The BSM this vehicle broadcasts for ``sample`` (``None`` without a pseudonym)."""
        try:
            cert, _ = self._active(sample.timestamp)
        except IdentityGapError:
            return None
        return BsmMessage(
            sender_pseudonym_id=cert.pseudonym_id,
            timestamp=sample.timestamp,
            x_mm=sample.x_mm,
            y_mm=sample.y_mm,
            speed_mms=sample.speed_mms,
            heading_cdeg=heading_cdeg,
            brake=sample.brake,
            steering_cdeg=sample.steering_cdeg,
        )
