"""Per-container access keypairs.

OS containers are accessed over a remote shell, so each launch mints an
Ed25519 keypair in OpenSSH format: the public half is installed in the
container, the private half is relayed to the controller for a one-time
download by the owner.  The fingerprint is the lowercase hex SHA-256 of the
serialized public key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes
    fingerprint: str

    def __repr__(self) -> str:  # private key stays out of logs
        return f"KeyPair(fingerprint={self.fingerprint!r}, private_key=<redacted>)"


def fingerprint_of(public_key: bytes) -> str:
    return hashlib.sha256(public_key).hexdigest()


def generate_keypair(comment: str = "") -> KeyPair:
    """Mint a fresh keypair; ``comment`` tags the public line (container id)."""
    private = Ed25519PrivateKey.generate()
    private_bytes = private.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.OpenSSH,
        encryption_algorithm=serialization.NoEncryption(),
    )
    public_bytes = private.public_key().public_bytes(
        encoding=serialization.Encoding.OpenSSH,
        format=serialization.PublicFormat.OpenSSH,
    )
    if comment:
        public_bytes = public_bytes + b" " + comment.encode("utf-8")
    return KeyPair(
        public_key=public_bytes,
        private_key=private_bytes,
        fingerprint=fingerprint_of(public_bytes),
    )
