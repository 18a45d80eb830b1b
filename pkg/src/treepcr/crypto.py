"""Digests, the extend operation and its ordered variant, and signing.

Register and tree values are digests of one fixed hash algorithm, or the
distinguished empty value ``NIL``. ``NIL`` is carried as an explicit
variant (never a reserved byte pattern) and acts as a two-sided unit of
``extend``, so sparsely occupied trees fold without special cases.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from .encoding import EncodingError, pack_fields, unpack_fields

_HASHERS = {"sha1": hashlib.sha1, "sha256": hashlib.sha256}

#: fixed strings allowed inside signed blobs
SIGN_TAGS = ("QUOT", "TREEQUOT", "REDTREEQUOT", "CERT")


@dataclass(frozen=True, slots=True)
class Digest:
    """A raw hash value, or the nil unit when ``value`` is None."""

    value: bytes | None

    @property
    def is_nil(self) -> bool:
        return self.value is None

    def to_text(self) -> str:
        """Lowercase hex, or the literal token ``nil``."""
        return "nil" if self.value is None else self.value.hex()

    def __repr__(self) -> str:
        return f"Digest({self.to_text()})"


NIL = Digest(None)


def parse_digest(text: str, size: int | None = None) -> Digest:
    """Inverse of Digest.to_text(); checks length when ``size`` is given."""
    if text == "nil":
        return NIL
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise ValueError(f"bad digest hex {text!r}") from exc
    if size is not None and len(raw) != size:
        raise ValueError(f"digest {text!r} has {len(raw)} bytes, expected {size}")
    return Digest(raw)


def digest_to_wire(digest: Digest) -> bytes:
    """One-byte tag plus raw bytes; keeps nil distinct from every value."""
    return b"\x00" if digest.value is None else b"\x01" + digest.value


def digest_from_wire(data: bytes, size: int | None = None) -> Digest:
    if data[:1] == b"\x00" and len(data) == 1:
        return NIL
    if data[:1] != b"\x01":
        raise EncodingError("bad digest wire tag")
    raw = data[1:]
    if size is not None and len(raw) != size:
        raise EncodingError(f"digest has {len(raw)} bytes, expected {size}")
    return Digest(raw)


@dataclass(frozen=True)
class HashConfig:
    """Hash algorithm, fixed for a register file and every tree it roots."""

    algorithm: str = "sha1"

    def __post_init__(self) -> None:
        if self.algorithm not in _HASHERS:
            raise ValueError(f"unsupported hash algorithm {self.algorithm!r}")

    @property
    def size(self) -> int:
        return _HASHERS[self.algorithm]().digest_size

    def measure(self, data: bytes) -> Digest:
        """Hash raw input into a measurement digest."""
        return Digest(_HASHERS[self.algorithm](data).digest())

    def extend(self, x: Digest, y: Digest) -> Digest:
        """H(x || y), with nil as a two-sided unit and nil,nil -> nil."""
        if x.value is None:
            return y
        if y.value is None:
            return x
        return Digest(_HASHERS[self.algorithm](x.value + y.value).digest())

    def chiral_extend(self, x: Digest, order_bit: int | str, y: Digest) -> Digest:
        """extend(x, y) when order_bit is 1, extend(y, x) when it is 0.

        The order bit is the tree-coordinate digit of the node being
        folded: it decides which argument is the left child.
        """
        if order_bit in (1, "1"):
            return self.extend(x, y)
        if order_bit in (0, "0"):
            return self.extend(y, x)
        raise ValueError(f"order bit must be 0 or 1, got {order_bit!r}")

    def check(self, digest: Digest) -> Digest:
        """Validate digest length against this configuration."""
        if digest.value is not None and len(digest.value) != self.size:
            raise ValueError(
                f"digest has {len(digest.value)} bytes, expected {self.size} for {self.algorithm}"
            )
        return digest


SHA1 = HashConfig("sha1")
SHA256 = HashConfig("sha256")


@dataclass(frozen=True)
class VerifyingKey:
    """Raw Ed25519 public key."""

    raw: bytes

    def fingerprint(self) -> bytes:
        """Stable key identifier: SHA-256 over the raw public bytes."""
        return hashlib.sha256(self.raw).digest()

    def to_text(self) -> str:
        return self.raw.hex()

    @classmethod
    def from_text(cls, text: str) -> "VerifyingKey":
        return cls(bytes.fromhex(text.strip()))


@dataclass(frozen=True)
class Signature:
    data: bytes
    signer: bytes  # fingerprint of the signer's public key


class SigningKey:
    """Ed25519 private key; signatures are deterministic for fixed input."""

    def __init__(self, private: ed25519.Ed25519PrivateKey) -> None:
        self._private = private
        self.public = VerifyingKey(private.public_key().public_bytes_raw())

    @classmethod
    def generate(cls) -> "SigningKey":
        return cls(ed25519.Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes) -> "SigningKey":
        if len(seed) != 32:
            raise ValueError(f"seed must be 32 bytes, got {len(seed)}")
        return cls(ed25519.Ed25519PrivateKey.from_private_bytes(seed))

    def seed(self) -> bytes:
        return self._private.private_bytes_raw()

    def sign_raw(self, blob: bytes) -> bytes:
        return self._private.sign(blob)


def _signing_blob(tag: str, payload: bytes, nonce: bytes) -> bytes:
    if tag not in SIGN_TAGS:
        raise ValueError(f"unknown signing tag {tag!r}")
    return pack_fields(tag.encode("ascii"), payload, nonce)


def sign(key: SigningKey, tag: str, payload: bytes, nonce: bytes = b"") -> Signature:
    """Sign the canonical (tag, payload, nonce) blob."""
    return Signature(key.sign_raw(_signing_blob(tag, payload, nonce)), key.public.fingerprint())


def verify(key: VerifyingKey, tag: str, payload: bytes, nonce: bytes, signature: Signature) -> bool:
    """True iff the signature matches the canonical blob under ``key``."""
    blob = _signing_blob(tag, payload, nonce)
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(key.raw).verify(signature.data, blob)
    except (InvalidSignature, ValueError):
        return False
    return True


def signature_to_fields(signature: Signature) -> bytes:
    return pack_fields(signature.data, signature.signer)


def signature_from_fields(data: bytes) -> Signature:
    sig, signer = unpack_fields(data, count=2)
    return Signature(sig, signer)
