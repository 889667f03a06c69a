"""AES-256-GCM with explicit nonces and a counter ladder against reuse.

The traditional pipeline must pay for real authenticated encryption, so this
wraps the hardware-accelerated AESGCM from `cryptography` rather than a toy
cipher. Payloads carry nonce, ciphertext+tag and the plaintext length;
authentication failure is always an explicit error, never garbage bytes.
"""

from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationError, NonceReuseError, PayloadFormatError

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16


@dataclass(frozen=True)
class CipherPayload:
    nonce: bytes
    ciphertext: bytes            # ciphertext || 16-byte tag
    plaintext_len: int


def encrypt(plaintext, key, nonce):
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be {KEY_LEN} bytes, got {len(key)}")
    if len(nonce) != NONCE_LEN:
        raise ValueError(f"nonce must be {NONCE_LEN} bytes, got {len(nonce)}")
    ct = AESGCM(key).encrypt(nonce, plaintext, None)
    return CipherPayload(nonce=nonce, ciphertext=ct, plaintext_len=len(plaintext))


def decrypt(payload, key):
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be {KEY_LEN} bytes, got {len(key)}")
    if len(payload.nonce) != NONCE_LEN:
        raise PayloadFormatError(f"nonce must be {NONCE_LEN} bytes, "
                                 f"got {len(payload.nonce)}")
    if len(payload.ciphertext) != payload.plaintext_len + TAG_LEN:
        raise PayloadFormatError(
            f"ciphertext length {len(payload.ciphertext)} does not match "
            f"plaintext_len {payload.plaintext_len} + {TAG_LEN}-byte tag")
    try:
        return AESGCM(key).decrypt(payload.nonce, payload.ciphertext, None)
    except InvalidTag as exc:
        raise AuthenticationError("GCM tag verification failed") from exc


class NonceLadder:
    """Counter-based nonces for one key; refuses to hand out or accept a
    nonce twice."""

    def __init__(self, start=0):
        self._counter = start
        self._used = set()

    def issue(self):
        nonce = self._counter.to_bytes(NONCE_LEN, "little")
        self._counter += 1
        self.mark_used(nonce)
        return nonce

    def mark_used(self, nonce):
        if nonce in self._used:
            raise NonceReuseError(f"nonce {nonce.hex()} was already used under "
                                  "this key")
        self._used.add(nonce)
