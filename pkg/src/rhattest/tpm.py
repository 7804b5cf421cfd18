"""Software stand-in for the few TPM functions attestation needs.

PCRs are SHA-256 registers that can only be extended or reset; quotes are
RSA-PSS signatures over ``pcr || nonce``. The private key lives inside the
object and no method returns it.
"""

from __future__ import annotations

import base64
import hashlib
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa

PCR_COUNT = 24
PCR_SIZE = 32
NONCE_SIZE = 32
ZERO_PCR = bytes(PCR_SIZE)

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=padding.PSS.MAX_LENGTH)


class TpmError(ValueError):
    pass


class PcrIndexError(TpmError, IndexError):
    pass


def extend_digest(old: bytes, data: bytes) -> bytes:
    """``SHA-256(old || data)`` on raw bytes."""
    return hashlib.sha256(old + data).digest()


@dataclass(frozen=True)
class Quote:
    pcr_value: bytes
    nonce: bytes
    signature: bytes

    def to_dict(self) -> dict:
        return {
            "pcr": self.pcr_value.hex(),
            "nonce": base64.b64encode(self.nonce).decode(),
            "signature": base64.b64encode(self.signature).decode(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Quote":
        return cls(bytes.fromhex(data["pcr"]), base64.b64decode(data["nonce"]),
                   base64.b64decode(data["signature"]))


def load_public_key(der_b64: str | bytes) -> rsa.RSAPublicKey:
    der = base64.b64decode(der_b64) if isinstance(der_b64, str) else der_b64
    key = serialization.load_der_public_key(der)
    if not isinstance(key, rsa.RSAPublicKey):
        raise TpmError("expected an RSA public key")
    return key


def export_public_key(key: rsa.RSAPublicKey) -> str:
    der = key.public_bytes(serialization.Encoding.DER,
                           serialization.PublicFormat.SubjectPublicKeyInfo)
    return base64.b64encode(der).decode()


def verify_quote(public_key: rsa.RSAPublicKey, pcr_value: bytes, nonce: bytes, signature: bytes) -> bool:
    try:
        public_key.verify(signature, pcr_value + nonce, _PSS, hashes.SHA256())
    except InvalidSignature:
        return False
    return True


class SoftTpm:
    """PCR bank, boot counter and quote key.

    All mutating calls are serialized by one lock, so a single instance can
    be shared by the measurement thread and the challenge handler.
    """

    def __init__(self, key_size: int = 2048, attestation_pcr: int = 16):
        self._check_index(attestation_pcr)
        self.attestation_pcr = attestation_pcr
        self.__key = rsa.generate_private_key(public_exponent=65537, key_size=key_size)
        self._pcrs = [ZERO_PCR] * PCR_COUNT
        self._boot_counter = 0
        self._lock = threading.RLock()

    @staticmethod
    def _check_index(index: int) -> None:
        if not 0 <= index < PCR_COUNT:
            raise PcrIndexError(f"PCR index {index} outside 0..{PCR_COUNT - 1}")

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return self.__key.public_key()

    @property
    def boot_counter(self) -> int:
        return self._boot_counter

    def export_public_key(self) -> str:
        return export_public_key(self.public_key)

    def pcr_extend(self, index: int, data: bytes) -> bytes:
        self._check_index(index)
        if not data:
            raise TpmError("refusing to extend with empty data")
        with self._lock:
            self._pcrs[index] = extend_digest(self._pcrs[index], bytes(data))
            return self._pcrs[index]

    def pcr_read(self, index: int) -> bytes:
        self._check_index(index)
        with self._lock:
            return self._pcrs[index]

    def quote(self, index: int, nonce: bytes) -> Quote:
        self._check_index(index)
        if len(nonce) != NONCE_SIZE:
            raise TpmError(f"nonce must be {NONCE_SIZE} bytes, got {len(nonce)}")
        with self._lock:
            value = self._pcrs[index]
            signature = self.__key.sign(value + nonce, _PSS, hashes.SHA256())
        return Quote(value, bytes(nonce), signature)

    def reset(self) -> int:
        """Reboot: zero every PCR and bump the boot counter, which is returned."""
        with self._lock:
            self._pcrs = [ZERO_PCR] * PCR_COUNT
            self._boot_counter += 1
            return self._boot_counter

    def public_state(self) -> dict:
        with self._lock:
            return {
                "pcrs": [p.hex() for p in self._pcrs],
                "attestation_pcr": self.attestation_pcr,
                "boot_counter": self._boot_counter,
                "public_key": self.export_public_key(),
            }

    def __getstate__(self):
        raise TypeError("SoftTpm cannot be serialized; use public_state()")
