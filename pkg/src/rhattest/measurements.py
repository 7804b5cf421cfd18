"""Measurements, their canonical byte form, per-record encryption and the log.

The canonical form is what gets extended into the attestation PCR, so it has
to be injective: fields appear in a fixed order per kind and ``\\``, ``|``
and ``=`` inside values are backslash-escaped.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding, rsa

_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)
_OAEP_OVERHEAD = 2 * 32 + 2
_LEN = struct.Struct(">I")
MAX_U64 = 2**64 - 1


class MeasurementError(ValueError):
    pass


class PlaintextTooLarge(MeasurementError):
    pass


class DecryptionFailure(MeasurementError):
    pass


class StorageFailure(OSError):
    pass


class Kind(str, enum.Enum):
    MCE = "MCE"
    ABO = "ABO"


@dataclass(frozen=True)
class MceMeasurement:
    sequence_no: int
    timestamp: int
    error_type: str
    address: int

    kind = Kind.MCE

    def fields(self) -> list[tuple[str, str]]:
        return [("error_type", self.error_type), ("address", str(self.address))]


@dataclass(frozen=True)
class AboMeasurement:
    sequence_no: int
    timestamp: int
    rank: int
    bank: int
    row: int
    counter_value: int

    kind = Kind.ABO

    def fields(self) -> list[tuple[str, str]]:
        return [("rank", str(self.rank)), ("bank", str(self.bank)), ("row", str(self.row)),
                ("counter", str(self.counter_value))]


Measurement = Union[MceMeasurement, AboMeasurement]
_KEYS = {Kind.MCE: ("error_type", "address"), Kind.ABO: ("rank", "bank", "row", "counter")}


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("|", "\\|").replace("=", "\\=")


def _split_unescaped(text: str, sep: str) -> list[str]:
    parts, cur, i = [], [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if i + 1 >= len(text):
                raise MeasurementError("dangling escape")
            cur.append(text[i:i + 2])
            i += 2
            continue
        if ch == sep:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
        i += 1
    parts.append("".join(cur))
    return parts


def _unescape(value: str) -> str:
    out, i = [], 0
    while i < len(value):
        if value[i] == "\\":
            if i + 1 >= len(value) or value[i + 1] not in "\\|=":
                raise MeasurementError(f"bad escape in {value!r}")
            out.append(value[i + 1])
            i += 2
        else:
            out.append(value[i])
            i += 1
    return "".join(out)


def _nonneg(value: int, name: str, limit: int = MAX_U64) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= limit:
        raise MeasurementError(f"{name} must be an integer in 0..{limit}, got {value!r}")
    return value


def validate(m: Measurement) -> Measurement:
    _nonneg(m.sequence_no, "sequence_no")
    _nonneg(m.timestamp, "timestamp")
    if isinstance(m, MceMeasurement):
        if not isinstance(m.error_type, str) or not m.error_type:
            raise MeasurementError("error_type must be a non-empty string")
        _nonneg(m.address, "address")
    elif isinstance(m, AboMeasurement):
        for name in ("rank", "bank", "row", "counter_value"):
            _nonneg(getattr(m, name), name)
    else:
        raise MeasurementError(f"not a measurement: {m!r}")
    return m


def canonical_encode(m: Measurement) -> bytes:
    validate(m)
    parts = [m.kind.value, str(m.sequence_no), str(m.timestamp)]
    parts += [f"{k}={_escape(v)}" for k, v in m.fields()]
    return "|".join(parts).encode("utf-8")


def canonical_decode(data: bytes) -> Measurement:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MeasurementError("measurement is not UTF-8") from exc
    parts = _split_unescaped(text, "|")
    if len(parts) < 3:
        raise MeasurementError(f"truncated measurement {text!r}")
    try:
        kind = Kind(parts[0])
    except ValueError as exc:
        raise MeasurementError(f"unknown measurement kind {parts[0]!r}") from exc
    keys = _KEYS[kind]
    if len(parts) != 3 + len(keys):
        raise MeasurementError(f"{kind.value} expects {len(keys)} fields")
    values = {}
    for expected, item in zip(keys, parts[3:]):
        pieces = _split_unescaped(item, "=")
        if len(pieces) != 2 or pieces[0] != expected:
            raise MeasurementError(f"expected field {expected!r}, got {item!r}")
        values[expected] = _unescape(pieces[1])
    seq, ts = _int(parts[1]), _int(parts[2])
    if kind is Kind.MCE:
        m: Measurement = MceMeasurement(seq, ts, values["error_type"], _int(values["address"]))
    else:
        m = AboMeasurement(seq, ts, _int(values["rank"]), _int(values["bank"]), _int(values["row"]),
                           _int(values["counter"]))
    validate(m)
    # reject non-canonical spellings such as leading zeros
    if canonical_encode(m) != data:
        raise MeasurementError("non-canonical encoding")
    return m


def _int(text: str) -> int:
    if not text.isdigit() or not text.isascii():
        raise MeasurementError(f"not a decimal integer: {text!r}")
    return int(text)


def generate_encryption_keypair(key_size: int = 2048) -> rsa.RSAPrivateKey:
    return rsa.generate_private_key(public_exponent=65537, key_size=key_size)


def max_plaintext(public_key: rsa.RSAPublicKey) -> int:
    return public_key.key_size // 8 - _OAEP_OVERHEAD


def encrypt_bytes(data: bytes, public_key: rsa.RSAPublicKey) -> bytes:
    if len(data) > max_plaintext(public_key):
        raise PlaintextTooLarge(f"{len(data)} bytes exceeds the {max_plaintext(public_key)}-byte OAEP bound")
    return public_key.encrypt(data, _OAEP)


def encrypt_record(m: Measurement, public_key: rsa.RSAPublicKey) -> bytes:
    return encrypt_bytes(canonical_encode(m), public_key)


def decrypt_bytes(record: bytes, private_key: rsa.RSAPrivateKey) -> bytes:
    try:
        return private_key.decrypt(record, _OAEP)
    except ValueError as exc:
        raise DecryptionFailure("record does not decrypt under the verifier key") from exc


def decrypt_record(record: bytes, private_key: rsa.RSAPrivateKey) -> Measurement:
    plain = decrypt_bytes(record, private_key)
    try:
        return canonical_decode(plain)
    except MeasurementError as exc:
        raise DecryptionFailure(f"decrypted record is not a measurement: {exc}") from exc


class MeasurementLog:
    """Append-only list of encrypted records, optionally mirrored to a file.

    The file holds ``4-byte big-endian length || ciphertext`` per record.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[bytes] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._records = read_log_file(self.path)

    def __len__(self) -> int:
        return len(self._records)

    def append(self, record: bytes) -> None:
        record = bytes(record)
        with self._lock:
            if self.path is not None:
                try:
                    with open(self.path, "ab") as fh:
                        fh.write(_LEN.pack(len(record)) + record)
                        fh.flush()
                except OSError as exc:
                    raise StorageFailure(f"cannot append to {self.path}: {exc}") from exc
            self._records.append(record)

    def snapshot(self) -> list[bytes]:
        with self._lock:
            return list(self._records)

    def clear(self) -> None:
        with self._lock:
            self._records = []
            if self.path is not None:
                try:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with open(self.path, "wb"):
                        pass
                except OSError as exc:
                    raise StorageFailure(f"cannot truncate {self.path}: {exc}") from exc


def read_log_file(path: str | Path) -> list[bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StorageFailure(f"cannot read {path}: {exc}") from exc
    records, pos = [], 0
    while pos < len(blob):
        if pos + _LEN.size > len(blob):
            raise StorageFailure(f"{path}: truncated length prefix at offset {pos}")
        (n,) = _LEN.unpack_from(blob, pos)
        pos += _LEN.size
        if pos + n > len(blob):
            raise StorageFailure(f"{path}: truncated record at offset {pos}")
        records.append(blob[pos:pos + n])
        pos += n
    return records
