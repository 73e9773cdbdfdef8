#!/usr/bin/env python3
"""Independent reference for the simulator's crypto suite.

Uses the `cryptography` package and the stdlib `hmac`/`hashlib` only. The
output is frozen into tests/crypto_vectors.rs; rerun this script and diff
when touching any primitive.

Conventions mirrored here:
  scenario RNG    ChaCha20 keystream, key = seed (u64 little-endian) || 24 zero
                  bytes, nonce 0, counter 0
  keypair         32 bytes drawn from the RNG are the X25519 scalar
                  (clamped by X25519) or the Ed25519 seed
  mac             HMAC-SHA256 truncated to 16 bytes
  session keys    enc = HMAC-SHA256(s_enc, host || card || "ENC")
                  mac = HMAC-SHA256(s_mac, host || card || "MAC")
  kdf             HKDF-SHA256, empty salt, info = label, 32 bytes
"""
import hashlib
import hmac
import json
import struct

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives import serialization

RAW = serialization.Encoding.Raw
RAW_PUB = serialization.PublicFormat.Raw


def rng_stream(seed: int, n: int) -> bytes:
    key = struct.pack("<Q", seed) + bytes(24)
    enc = Cipher(algorithms.ChaCha20(key, bytes(16)), mode=None).encryptor()
    return enc.update(bytes(n))


def x25519_pub(priv: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(priv).public_key().public_bytes(RAW, RAW_PUB)


def ed25519_pub(seed: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes(RAW, RAW_PUB)


def x25519_agree(priv: bytes, peer: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(priv).exchange(
        X25519PublicKey.from_public_bytes(peer)
    )


def mac16(key: bytes, msg: bytes) -> bytes:
    return hmac.new(key, msg, hashlib.sha256).digest()[:16]


def session_keys(s_enc, s_mac, host, card):
    enc = hmac.new(s_enc, host + card + b"ENC", hashlib.sha256).digest()
    mac = hmac.new(s_mac, host + card + b"MAC", hashlib.sha256).digest()
    return enc, mac


def hkdf(ikm: bytes, info: bytes, length: int = 32) -> bytes:
    prk = hmac.new(bytes(32), ikm, hashlib.sha256).digest()
    out, block, i = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([i]), hashlib.sha256).digest()
        out += block
        i += 1
    return out[:length]


def pattern(start: int, n: int) -> bytes:
    return bytes((start + 7 * i) & 0xFF for i in range(n))


def main():
    out = {}

    out["rng_prefix"] = [
        {"seed": s, "bytes": rng_stream(s, 64).hex()} for s in (0, 7, 42)
    ]

    out["x25519_from_seed"] = []
    for seed in (7, 8, 42, 1000, 2**63 + 5):
        priv = rng_stream(seed, 32)
        out["x25519_from_seed"].append(
            {"seed": seed, "private": priv.hex(), "public": x25519_pub(priv).hex()}
        )

    out["ed25519_from_seed"] = []
    for seed in (7, 42, 99, 31337, 123456789):
        sk = rng_stream(seed, 32)
        out["ed25519_from_seed"].append(
            {"seed": seed, "private": sk.hex(), "public": ed25519_pub(sk).hex()}
        )

    out["x25519_agree"] = []
    for i in range(5):
        a = pattern(3 + 11 * i, 32)
        b = pattern(101 + 13 * i, 32)
        s1 = x25519_agree(a, x25519_pub(b))
        s2 = x25519_agree(b, x25519_pub(a))
        assert s1 == s2
        out["x25519_agree"].append(
            {"a": a.hex(), "b": b.hex(), "b_pub": x25519_pub(b).hex(), "shared": s1.hex()}
        )

    out["mac"] = []
    msgs = [b"", b"abc", pattern(9, 64), pattern(200, 257), b"initialize-update"]
    for i, m in enumerate(msgs):
        k = pattern(50 + i, 32)
        out["mac"].append({"key": k.hex(), "msg": m.hex(), "tag": mac16(k, m).hex()})

    out["session_keys"] = []
    for i in range(5):
        s_enc = pattern(1 + i, 32)
        s_mac = pattern(77 + i, 32)
        host = pattern(150 + 3 * i, 8)
        card = pattern(220 + 5 * i, 8)
        enc, mac = session_keys(s_enc, s_mac, host, card)
        out["session_keys"].append(
            {
                "s_enc": s_enc.hex(),
                "s_mac": s_mac.hex(),
                "host": host.hex(),
                "card": card.hex(),
                "enc": enc.hex(),
                "mac": mac.hex(),
            }
        )

    out["kdf"] = []
    labels = [b"ENC", b"MAC", b"SM-ENC", b"token-package", b"x"]
    for i, label in enumerate(labels):
        secret = pattern(30 + 17 * i, 32)
        out["kdf"].append(
            {"secret": secret.hex(), "label": label.hex(), "key": hkdf(secret, label).hex()}
        )

    print(json.dumps(out, indent=1))


if __name__ == "__main__":
    main()
