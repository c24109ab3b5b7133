"""Forensic record model: BSMs, EDR events, diagnosis and maintenance records.

Physical quantities are stored as integers in fixed-point units so that
encodings (and therefore digests and signatures) are bit-exact:
millimetres, millimetres per second and centidegrees.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Union

from . import crypto
from .crypto import (
    PSEUDONYM_ID_SIZE,
    SIGNATURE_SIZE,
    CertVerdict,
    PseudonymCertificate,
)
from .encoding import (
    TAG_BSM,
    TAG_DIAGNOSIS,
    TAG_EDR,
    TAG_MAINTENANCE,
    TAG_MAINTENANCE_TBS,
    TAG_SAMPLE,
    TAG_SIGNED_RECORD,
    TAG_SIGNED_RECORD_TBS,
    EncodingError,
    Reader,
    Writer,
)

DEFAULT_BSM_WINDOW = 30
MAX_STEERING_CDEG = 72000


class WindowError(ValueError):
    """Submit time falls outside the signing certificate's window."""


def to_fixed(value, scale: int = 1000) -> int:
    """Convert a decimal quantity (e.g. metres) to an integer fixed-point value."""
    q = Decimal(str(value)) * scale
    return int(q.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


class LightState(enum.IntEnum):
    RED = 0
    YELLOW = 1
    GREEN = 2

    @classmethod
    def parse(cls, s: str) -> LightState:
        return cls[s.upper()]

    def __str__(self) -> str:
        return self.name.lower()


class RecordKind(enum.IntEnum):
    BSM = 0
    EDR = 1
    DIAGNOSIS = 2
    MAINTENANCE = 3

    def __str__(self) -> str:
        return self.name.lower()


class TriggerKind(enum.IntEnum):
    AIRBAG = 0
    SPEED_DELTA = 1


class SensorStatus(enum.IntEnum):
    OK = 0
    FAILED = 1


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise EncodingError(msg)


def _w_light(w: Writer, v: LightState) -> None:
    w.u8(int(v))


def _r_light(r: Reader) -> LightState:
    try:
        return LightState(r.u8())
    except ValueError as exc:
        raise EncodingError("unknown light state") from exc


def _r_sensor(r: Reader) -> SensorStatus:
    try:
        return SensorStatus(r.u8())
    except ValueError as exc:
        raise EncodingError("unknown sensor status") from exc


@dataclass(frozen=True)
class BsmMessage:
    sender_pseudonym_id: bytes
    timestamp: int
    x_mm: int
    y_mm: int
    speed_mms: int
    heading_cdeg: int = 0
    length_mm: int = 4500
    width_mm: int = 1800
    brake: bool = False
    accuracy_mm: int = 1500
    steering_cdeg: int = 0
    traffic_light_state: dict[str, LightState] | None = None

    kind = RecordKind.BSM

    def validate(self) -> None:
        _check(len(self.sender_pseudonym_id) == PSEUDONYM_ID_SIZE, "sender id must be 16 bytes")
        _check(self.timestamp >= 0, "timestamp must be >= 0")
        _check(self.speed_mms >= 0, "speed must be >= 0")
        _check(0 <= self.heading_cdeg < 36000, "heading must be in [0, 360)")
        _check(self.length_mm > 0 and self.width_mm > 0, "size must be > 0")
        _check(self.accuracy_mm >= 0, "positional accuracy must be >= 0")
        _check(abs(self.steering_cdeg) <= MAX_STEERING_CDEG, "steering angle out of range")
        if self.traffic_light_state is not None:
            _check(self.speed_mms == 0, "infrastructure senders must report zero speed")
            _check(all(k for k in self.traffic_light_state), "empty approach name")

    @property
    def is_infrastructure(self) -> bool:
        return self.traffic_light_state is not None

    def write(self, w: Writer) -> None:
        self.validate()
        (
            w.u8(TAG_BSM)
            .fixed(self.sender_pseudonym_id, PSEUDONYM_ID_SIZE)
            .u64(self.timestamp)
            .i64(self.x_mm)
            .i64(self.y_mm)
            .u32(self.speed_mms)
            .u16(self.heading_cdeg)
            .u32(self.length_mm)
            .u32(self.width_mm)
            .boolean(self.brake)
            .u32(self.accuracy_mm)
            .i32(self.steering_cdeg)
            .optional(
                self.traffic_light_state,
                lambda w, m: w.mapping(m, Writer.text, _w_light),
            )
        )

    @classmethod
    def read(cls, r: Reader) -> BsmMessage:
        r.expect_tag(TAG_BSM)
        msg = cls(
            sender_pseudonym_id=r.fixed(PSEUDONYM_ID_SIZE),
            timestamp=r.u64(),
            x_mm=r.i64(),
            y_mm=r.i64(),
            speed_mms=r.u32(),
            heading_cdeg=r.u16(),
            length_mm=r.u32(),
            width_mm=r.u32(),
            brake=r.boolean(),
            accuracy_mm=r.u32(),
            steering_cdeg=r.i32(),
            traffic_light_state=r.optional(lambda r: r.mapping(Reader.text, _r_light, Writer.text)),
        )
        msg.validate()
        return msg


@dataclass(frozen=True)
class VehicleSample:
    """One row of vehicle state as seen by the on-board daemon."""

    timestamp: int
    x_mm: int
    y_mm: int
    speed_mms: int
    brake: bool = False
    steering_cdeg: int = 0
    autopilot: bool = False
    airbag: bool = False

    def validate(self) -> None:
        _check(self.timestamp >= 0, "timestamp must be >= 0")
        _check(self.speed_mms >= 0, "speed must be >= 0")
        _check(abs(self.steering_cdeg) <= MAX_STEERING_CDEG, "steering angle out of range")

    def write(self, w: Writer) -> None:
        self.validate()
        (
            w.u8(TAG_SAMPLE)
            .u64(self.timestamp)
            .i64(self.x_mm)
            .i64(self.y_mm)
            .u32(self.speed_mms)
            .boolean(self.brake)
            .i32(self.steering_cdeg)
            .boolean(self.autopilot)
            .boolean(self.airbag)
        )

    @classmethod
    def read(cls, r: Reader) -> VehicleSample:
        r.expect_tag(TAG_SAMPLE)
        s = cls(
            timestamp=r.u64(),
            x_mm=r.i64(),
            y_mm=r.i64(),
            speed_mms=r.u32(),
            brake=r.boolean(),
            steering_cdeg=r.i32(),
            autopilot=r.boolean(),
            airbag=r.boolean(),
        )
        s.validate()
        return s


@dataclass(frozen=True)
class EdrEvent:
    trigger: TriggerKind
    event_time: int
    pre_event_samples: tuple[VehicleSample, ...] = ()
    related_bsms: tuple[BsmMessage, ...] = ()
    threshold_mms: int | None = None
    bsm_window: int = DEFAULT_BSM_WINDOW

    kind = RecordKind.EDR

    def validate(self) -> None:
        _check(isinstance(self.trigger, TriggerKind), "unknown trigger")
        if self.trigger is TriggerKind.SPEED_DELTA:
            _check(self.threshold_mms is not None and self.threshold_mms > 0, "speed_delta needs a threshold > 0")
        else:
            _check(self.threshold_mms is None, "airbag trigger carries no threshold")
        _check(self.bsm_window >= 0, "bsm window must be >= 0")
        prev = None
        for s in self.pre_event_samples:
            _check(prev is None or s.timestamp > prev, "pre-event samples must be strictly increasing")
            _check(s.timestamp <= self.event_time, "pre-event sample after event time")
            prev = s.timestamp
        lo = self.event_time - self.bsm_window
        for b in self.related_bsms:
            _check(lo <= b.timestamp <= self.event_time, "related BSM outside the event window")

    def write(self, w: Writer) -> None:
        self.validate()
        w.u8(TAG_EDR).u8(int(self.trigger))
        if self.trigger is TriggerKind.SPEED_DELTA:
            w.u32(self.threshold_mms)
        (
            w.u64(self.event_time)
            .u32(self.bsm_window)
            .seq(self.pre_event_samples, lambda w, s: s.write(w))
            .seq(self.related_bsms, lambda w, b: b.write(w))
        )

    @classmethod
    def read(cls, r: Reader) -> EdrEvent:
        r.expect_tag(TAG_EDR)
        try:
            trigger = TriggerKind(r.u8())
        except ValueError as exc:
            raise EncodingError("unknown trigger") from exc
        threshold = r.u32() if trigger is TriggerKind.SPEED_DELTA else None
        ev = cls(
            trigger=trigger,
            threshold_mms=threshold,
            event_time=r.u64(),
            bsm_window=r.u32(),
            pre_event_samples=tuple(r.seq(VehicleSample.read)),
            related_bsms=tuple(r.seq(BsmMessage.read)),
        )
        ev.validate()
        return ev


@dataclass(frozen=True)
class DiagnosisReport:
    report_time: int
    trouble_codes: tuple[str, ...] = ()
    sensor_status: dict[str, SensorStatus] = field(default_factory=dict)
    autopilot: bool = False

    kind = RecordKind.DIAGNOSIS

    def validate(self) -> None:
        _check(self.report_time >= 0, "report_time must be >= 0")

    @property
    def failed_sensors(self) -> list[str]:
        return sorted(k for k, v in self.sensor_status.items() if v is SensorStatus.FAILED)

    def write(self, w: Writer) -> None:
        self.validate()
        (
            w.u8(TAG_DIAGNOSIS)
            .u64(self.report_time)
            .seq(self.trouble_codes, Writer.text)
            .mapping(self.sensor_status, Writer.text, lambda w, v: w.u8(int(v)))
            .boolean(self.autopilot)
        )

    @classmethod
    def read(cls, r: Reader) -> DiagnosisReport:
        r.expect_tag(TAG_DIAGNOSIS)
        d = cls(
            report_time=r.u64(),
            trouble_codes=tuple(r.seq(Reader.text)),
            sensor_status=r.mapping(Reader.text, _r_sensor, Writer.text),
            autopilot=r.boolean(),
        )
        d.validate()
        return d


@dataclass(frozen=True)
class MaintenanceRecord:
    service_time: int
    provider_id: str
    work_items: tuple[str, ...] = ()
    observed_defects: tuple[str, ...] = ()
    vehicle_signature: bytes = field(default=bytes(SIGNATURE_SIZE), repr=False)
    provider_signature: bytes = field(default=bytes(SIGNATURE_SIZE), repr=False)

    kind = RecordKind.MAINTENANCE

    def validate(self) -> None:
        _check(self.service_time >= 0, "service_time must be >= 0")
        _check(bool(self.provider_id), "provider_id must be non-empty")

    def tbs_bytes(self) -> bytes:
        """The unsigned portion both parties sign."""
        self.validate()
        return (
            Writer(TAG_MAINTENANCE_TBS)
            .u64(self.service_time)
            .text(self.provider_id)
            .seq(self.work_items, Writer.text)
            .seq(self.observed_defects, Writer.text)
            .getvalue()
        )

    def write(self, w: Writer) -> None:
        self.validate()
        (
            w.u8(TAG_MAINTENANCE)
            .u64(self.service_time)
            .text(self.provider_id)
            .seq(self.work_items, Writer.text)
            .seq(self.observed_defects, Writer.text)
            .fixed(self.vehicle_signature, SIGNATURE_SIZE)
            .fixed(self.provider_signature, SIGNATURE_SIZE)
        )

    @classmethod
    def read(cls, r: Reader) -> MaintenanceRecord:
        r.expect_tag(TAG_MAINTENANCE)
        m = cls(
            service_time=r.u64(),
            provider_id=r.text(),
            work_items=tuple(r.seq(Reader.text)),
            observed_defects=tuple(r.seq(Reader.text)),
            vehicle_signature=r.fixed(SIGNATURE_SIZE),
            provider_signature=r.fixed(SIGNATURE_SIZE),
        )
        m.validate()
        return m


ForensicRecord = Union[BsmMessage, EdrEvent, DiagnosisReport, MaintenanceRecord]

_RECORD_READERS = {
    TAG_BSM: BsmMessage.read,
    TAG_EDR: EdrEvent.read,
    TAG_DIAGNOSIS: DiagnosisReport.read,
    TAG_MAINTENANCE: MaintenanceRecord.read,
}


def read_record(r: Reader) -> ForensicRecord:
    tag = r.peek_tag()
    if tag not in _RECORD_READERS:
        raise EncodingError(f"unknown record tag 0x{tag:02x}")
    return _RECORD_READERS[tag](r)


def sign_maintenance(rec: MaintenanceRecord, vehicle_secret: bytes, provider_secret: bytes) -> MaintenanceRecord:
    tbs = rec.tbs_bytes()
    return MaintenanceRecord(
        service_time=rec.service_time,
        provider_id=rec.provider_id,
        work_items=rec.work_items,
        observed_defects=rec.observed_defects,
        vehicle_signature=crypto.sign(vehicle_secret, tbs),
        provider_signature=crypto.sign(provider_secret, tbs),
    )


class MultisigVerdict(enum.Enum):
    VALID = "valid"
    VEHICLE_SIG_BAD = "vehicle_sig_bad"
    PROVIDER_SIG_BAD = "provider_sig_bad"
    BOTH_BAD = "both_bad"


def verify_maintenance_multisig(
    rec: MaintenanceRecord,
    vehicle_cert: PseudonymCertificate,
    provider_public_key: bytes | None,
) -> MultisigVerdict:
    try:
        tbs = rec.tbs_bytes()
    except EncodingError:
        return MultisigVerdict.BOTH_BAD
    vehicle_ok = crypto.verify(vehicle_cert.subject_key, tbs, rec.vehicle_signature)
    provider_ok = provider_public_key is not None and crypto.verify(
        provider_public_key, tbs, rec.provider_signature
    )
    if vehicle_ok and provider_ok:
        return MultisigVerdict.VALID
    if provider_ok:
        return MultisigVerdict.VEHICLE_SIG_BAD
    if vehicle_ok:
        return MultisigVerdict.PROVIDER_SIG_BAD
    return MultisigVerdict.BOTH_BAD


@dataclass(frozen=True)
class SignedRecord:
    record: ForensicRecord
    submit_time: int
    pseudonym_id: bytes
    signature: bytes = field(repr=False)

    @property
    def kind(self) -> RecordKind:
        return self.record.kind

    def validate(self) -> None:
        _check(self.submit_time >= 0, "submit_time must be >= 0")
        _check(len(self.pseudonym_id) == PSEUDONYM_ID_SIZE, "pseudonym_id must be 16 bytes")

    def tbs_bytes(self) -> bytes:
        self.validate()
        w = Writer(TAG_SIGNED_RECORD_TBS)
        self.record.write(w)
        return w.u64(self.submit_time).fixed(self.pseudonym_id, PSEUDONYM_ID_SIZE).getvalue()

    def write(self, w: Writer) -> None:
        self.validate()
        w.u8(TAG_SIGNED_RECORD)
        self.record.write(w)
        (
            w.u64(self.submit_time)
            .fixed(self.pseudonym_id, PSEUDONYM_ID_SIZE)
            .fixed(self.signature, SIGNATURE_SIZE)
        )

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @property
    def digest(self) -> bytes:
        return crypto.digest(self.encode())

    @classmethod
    def read(cls, r: Reader) -> SignedRecord:
        r.expect_tag(TAG_SIGNED_RECORD)
        sr = cls(
            record=read_record(r),
            submit_time=r.u64(),
            pseudonym_id=r.fixed(PSEUDONYM_ID_SIZE),
            signature=r.fixed(SIGNATURE_SIZE),
        )
        sr.validate()
        return sr

    @classmethod
    def decode(cls, data: bytes) -> SignedRecord:
        r = Reader(data)
        sr = cls.read(r)
        r.finish()
        return sr


def make_signed_record(
    record: ForensicRecord,
    cert: PseudonymCertificate,
    secret_key: bytes,
    submit_time: int,
) -> SignedRecord:
    if not cert.covers(submit_time):
        raise WindowError(
            f"submit_time {submit_time} outside certificate window [{cert.valid_from}, {cert.valid_until})"
        )
    unsigned = SignedRecord(record, submit_time, cert.pseudonym_id, b"")
    return SignedRecord(record, submit_time, cert.pseudonym_id, crypto.sign(secret_key, unsigned.tbs_bytes()))


class RecordVerdict(enum.Enum):
    VALID = "valid"
    UNKNOWN_PSEUDONYM = "unknown_pseudonym"
    BAD_CERTIFICATE = "bad_certificate"
    BAD_SIGNATURE = "bad_signature"
    OUTSIDE_WINDOW = "outside_validity_window"


def verify_signed_record(sr: SignedRecord, ca_public_key: bytes, cert_lookup) -> RecordVerdict:
    """Certificate, signature and window check for one signed record."""
    cert = cert_lookup(sr.pseudonym_id)
    if cert is None:
        return RecordVerdict.UNKNOWN_PSEUDONYM
    if verify_certificate_signature(ca_public_key, cert) is False:
        return RecordVerdict.BAD_CERTIFICATE
    try:
        tbs = sr.tbs_bytes()
    except EncodingError:
        return RecordVerdict.BAD_SIGNATURE
    if not crypto.verify(cert.subject_key, tbs, sr.signature):
        return RecordVerdict.BAD_SIGNATURE
    if not cert.covers(sr.submit_time):
        return RecordVerdict.OUTSIDE_WINDOW
    return RecordVerdict.VALID


def verify_certificate_signature(ca_public_key: bytes, cert: PseudonymCertificate) -> bool:
    return crypto.verify_certificate(ca_public_key, cert, cert.valid_from) is CertVerdict.VALID


def encode_record(record: ForensicRecord) -> bytes:
    w = Writer()
    record.write(w)
    return w.getvalue()


def decode_record(data: bytes) -> ForensicRecord:
    r = Reader(data)
    rec = read_record(r)
    r.finish()
    return rec
