"""Threshold-gated escrow of intra-group messages.

Each client owns a recovery secret S_i, an element of GF(p).  S_i is split
with Shamir's scheme into one share per peer (evaluated at a point the peer
picked), and every message the client receives is sealed with AES-GCM under
a key derived from (S_i, record metadata).  The storage server only ever
holds ciphertexts; any t share holders can rebuild S_i without its owner.

On-disk format (little-endian)::

    header  b"SMTF" | u16 version | u64 prime
    frame   u32 body_len | u8 kind | body
    escrow  u32 owner | u32 epoch | u32 group | u32 sender
            | u32 len | nonce | u32 len | ciphertext | u32 len | tag
"""

from __future__ import annotations

import hashlib
import logging
import random
import struct
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

logger = logging.getLogger(__name__)

DEFAULT_PRIME = (1 << 61) - 1
MAGIC = b"SMTF"
FORMAT_VERSION = 1
KIND_ESCROW = 1
KIND_EPOCH = 2

_HEADER = struct.Struct("<4sHQ")
_FRAME = struct.Struct("<IB")
_META = struct.Struct("<IIII")
_TAG_LEN = 16


class VaultError(Exception):
    pass


class DecryptionError(VaultError):
    """Authentication failed.  Deliberately carries no hint about why."""


class InsufficientShares(VaultError):
    pass


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24."""
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)
    for q in small:
        if n % q == 0:
            return n == q
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class ThresholdPolicy:
    m: int
    t: int
    p: int = DEFAULT_PRIME

    def __post_init__(self):
        if not 1 <= self.t <= self.m - 1:
            raise ValueError(f"threshold t={self.t} must satisfy 1 <= t <= m-1 (m={self.m})")
        if self.p >= 1 << 64:
            raise ValueError("prime must fit in 64 bits")
        if not is_prime(self.p):
            raise ValueError(f"{self.p} is not prime")


@dataclass(frozen=True)
class ShamirShare:
    x: int
    y: int


def eval_poly(coefficients, x: int, p: int) -> int:
    """Horner evaluation of sum(c_k x^k) mod p, coefficients in ascending order."""
    acc = 0
    for c in reversed(coefficients):
        acc = (acc * x + c) % p
    return acc


def split_secret(
    secret: int,
    policy: ThresholdPolicy,
    eval_points,
    seed: int,
    coefficients=None,
) -> list[ShamirShare]:
    """Shares of ``secret`` on a random degree-(t-1) polynomial at the peers' points.

    ``coefficients`` pins a_1..a_{t-1} (tests only).
    """
    p, t = policy.p, policy.t
    if not 0 <= secret < p:
        raise ValueError("secret must lie in [0, p)")
    pts = [int(x) % p for x in eval_points]
    if any(x == 0 for x in pts):
        raise ValueError("evaluation points must be nonzero mod p")
    if len(set(pts)) != len(pts):
        raise ValueError("evaluation points must be distinct")
    if len(pts) < t:
        raise ValueError(f"need at least t={t} evaluation points")
    if coefficients is None:
        rng = random.Random(seed)
        coefficients = [rng.randrange(p) for _ in range(t - 1)]
    if len(coefficients) != t - 1:
        raise ValueError(f"expected {t - 1} random coefficients")
    poly = [secret, *(int(a) % p for a in coefficients)]
    return [ShamirShare(x, eval_poly(poly, x, p)) for x in pts]


def lagrange_at_zero(shares, p: int) -> int:
    xs = [s.x % p for s in shares]
    if len(set(xs)) != len(xs):
        raise ValueError("duplicate share x-coordinates")
    total = 0
    for j, sj in enumerate(shares):
        num, den = 1, 1
        for l, sl in enumerate(shares):
            if l != j:
                num = num * xs[l] % p
                den = den * (xs[l] - xs[j]) % p
        total = (total + sj.y * num * pow(den, -1, p)) % p
    return total


def recover_secret(shares, policy: ThresholdPolicy) -> int:
    """Lagrange interpolation at x = 0 over the first t shares."""
    shares = list(shares)
    if len(shares) < policy.t:
        raise InsufficientShares(f"need {policy.t} shares, got {len(shares)}")
    if len({s.x for s in shares}) != len(shares):
        raise ValueError("duplicate share x-coordinates")
    return lagrange_at_zero(shares[: policy.t], policy.p)


# -- authenticated encryption ---------------------------------------------------


@dataclass(frozen=True)
class EncryptedGradientRecord:
    owner: int
    epoch: int
    group: int
    sender: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.epoch, self.group, self.sender, self.owner)


def _metadata(owner: int, epoch: int, group: int, sender: int) -> bytes:
    return _META.pack(owner, epoch, group, sender)


def derive_key(secret: int, metadata: bytes) -> bytes:
    """HKDF-SHA256(secret, info=metadata) -> 256-bit AES key."""
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=b"smtfl-escrow-v1", info=metadata)
    return hkdf.derive(int(secret).to_bytes(16, "little"))


def encode_vector(v) -> bytes:
    return np.ascontiguousarray(v, dtype="<f8").tobytes()


def decode_vector(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype="<f8").astype(np.float64)


def encrypt_record(
    plaintext,
    owner_secret: int,
    owner: int,
    epoch: int,
    group: int,
    sender: int,
    nonce_seed: int = 0,
) -> EncryptedGradientRecord:
    meta = _metadata(owner, epoch, group, sender)
    nonce = hashlib.sha256(b"nonce" + meta + struct.pack("<q", nonce_seed)).digest()[:12]
    sealed = AESGCM(derive_key(owner_secret, meta)).encrypt(nonce, encode_vector(plaintext), meta)
    return EncryptedGradientRecord(
        owner, epoch, group, sender, nonce, sealed[:-_TAG_LEN], sealed[-_TAG_LEN:]
    )


def decrypt_record(record: EncryptedGradientRecord, recovered_secret: int) -> np.ndarray:
    meta = _metadata(record.owner, record.epoch, record.group, record.sender)
    try:
        key = derive_key(recovered_secret, meta)
        plain = AESGCM(key).decrypt(record.nonce, record.ciphertext + record.tag, meta)
    except (InvalidTag, ValueError, OverflowError):
        raise DecryptionError("authentication failed") from None
    return decode_vector(plain)


# -- persistence ----------------------------------------------------------------


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _unpack_bytes(buf: bytes, pos: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + n > len(buf):
        raise VaultError("truncated record")
    return buf[pos : pos + n], pos + n


def encode_escrow(rec: EncryptedGradientRecord) -> bytes:
    return (
        _metadata(rec.owner, rec.epoch, rec.group, rec.sender)
        + _pack_bytes(rec.nonce)
        + _pack_bytes(rec.ciphertext)
        + _pack_bytes(rec.tag)
    )


def decode_escrow(body: bytes) -> EncryptedGradientRecord:
    owner, epoch, group, sender = _META.unpack_from(body, 0)
    pos = _META.size
    nonce, pos = _unpack_bytes(body, pos)
    ct, pos = _unpack_bytes(body, pos)
    tag, pos = _unpack_bytes(body, pos)
    return EncryptedGradientRecord(owner, epoch, group, sender, nonce, ct, tag)


def write_header(fh, prime: int) -> None:
    fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, prime))


def write_frame(fh, kind: int, body: bytes) -> None:
    fh.write(_FRAME.pack(len(body), kind) + body)


def read_frames(path) -> tuple[int, list[tuple[int, bytes]]]:
    """Return (prime, [(kind, body), ...]) from a framed file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise VaultError(f"{path}: truncated header")
    magic, version, prime = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise VaultError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VaultError(f"{path}: unsupported format version {version}")
    frames, pos = [], _HEADER.size
    while pos < len(buf):
        if pos + _FRAME.size > len(buf):
            raise VaultError(f"{path}: truncated frame header at byte {pos}")
        n, kind = _FRAME.unpack_from(buf, pos)
        pos += _FRAME.size
        if pos + n > len(buf):
            raise VaultError(f"{path}: truncated frame at byte {pos}")
        frames.append((kind, buf[pos : pos + n]))
        pos += n
    return prime, frames


class EscrowStore:
    """Append-only ciphertext store, optionally mirrored to a file.

    Records are unique on (epoch, group, sender, owner).  Frames of other
    kinds found in the file are ignored.
    """

    def __init__(self, path=None, prime: int = DEFAULT_PRIME):
        self.path = None if path is None else Path(path)
        self.prime = prime
        self._records: list[EncryptedGradientRecord] = []
        self._keys: set[tuple[int, int, int, int]] = set()
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                write_header(fh, prime)

    @classmethod
    def open(cls, path) -> "EscrowStore":
        prime, frames = read_frames(path)
        store = cls(None, prime)
        for kind, body in frames:
            if kind == KIND_ESCROW:
                store._add(decode_escrow(body))
        store.path = Path(path)
        return store

    def _add(self, rec: EncryptedGradientRecord) -> None:
        if rec.key in self._keys:
            raise VaultError(f"duplicate escrow record {rec.key}")
        self._keys.add(rec.key)
        self._records.append(rec)

    def store(self, rec: EncryptedGradientRecord) -> None:
        self._add(rec)
        if self.path is not None:
            with open(self.path, "ab") as fh:
                write_frame(fh, KIND_ESCROW, encode_escrow(rec))

    def fetch(self, owner=None, epoch=None, group=None, sender=None) -> list[EncryptedGradientRecord]:
        def keep(r):
            if owner is not None and r.owner != owner:
                return False
            if sender is not None and r.sender != sender:
                return False
            if group is not None and r.group != group:
                return False
            if epoch is None:
                return True
            if isinstance(epoch, (range, list, tuple, set, frozenset)):
                return r.epoch in epoch
            return r.epoch == epoch

        return [r for r in self._records if keep(r)]

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)


# -- key setup and quorum decryption --------------------------------------------


@dataclass
class KeyDirectory:
    """Every client's recovery secret and the shares peers hold of it.

    ``holdings[j][i]`` is client j's share of client i's secret.
    """

    policy: ThresholdPolicy
    secrets: dict[int, int]
    holdings: dict[int, dict[int, ShamirShare]]
    gen_seconds: float = 0.0

    def provider(self, client: int) -> dict[int, ShamirShare]:
        return self.holdings.get(client, {})


def setup_keys(clients, policy: ThresholdPolicy, seed: int) -> KeyDirectory:
    """Draw a secret per client and hand one Shamir share to each peer.

    Every peer j contributes its own random nonzero evaluation point r_j.
    """
    clients = sorted(int(c) for c in clients)
    if len(clients) != policy.m:
        raise ValueError(f"policy is for m={policy.m} clients, got {len(clients)}")
    rng = random.Random(seed)
    p = policy.p
    secrets = {c: rng.randrange(p) for c in clients}
    holdings: dict[int, dict[int, ShamirShare]] = {c: {} for c in clients}
    t0 = time.perf_counter()
    for owner in clients:
        peers = [c for c in clients if c != owner]
        points, seen = [], set()
        for _ in peers:
            r = rng.randrange(1, p)
            while r in seen:
                r = rng.randrange(1, p)
            seen.add(r)
            points.append(r)
        shares = split_secret(secrets[owner], policy, points, rng.randrange(1 << 63))
        for peer, share in zip(peers, shares):
            holdings[peer][owner] = share
    return KeyDirectory(policy, secrets, holdings, time.perf_counter() - t0)


@dataclass(frozen=True)
class DecryptedMessage:
    epoch: int
    group: int
    sender: int
    owner: int
    vector: np.ndarray


@dataclass
class QuorumResult:
    target: int
    messages: list[DecryptedMessage] = field(default_factory=list)
    recovered_owners: list[int] = field(default_factory=list)
    blocked_owners: list[int] = field(default_factory=list)
    blocked_epochs: list[int] = field(default_factory=list)
    decrypt_seconds: list[float] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.blocked_epochs

    def lookup(self, epoch: int, sender: int, owner: int) -> np.ndarray | None:
        for msg in self.messages:
            if (msg.epoch, msg.sender, msg.owner) == (epoch, sender, owner):
                return msg.vector
        return None


def quorum_decrypt(
    store: EscrowStore,
    target: int,
    epochs,
    share_providers: dict[int, dict[int, ShamirShare]],
    policy: ThresholdPolicy,
) -> QuorumResult:
    """Decrypt every escrowed message sent by or to ``target`` in ``epochs``.

    Messages sent by the target are sealed under the receivers' secrets;
    messages the target received are sealed under its own.  Each needed secret
    is rebuilt from the providers' shares; the target itself never has to
    take part.  Owners that cannot be rebuilt are reported, with the epochs
    they block, instead of raising.
    """
    sent = store.fetch(sender=target, epoch=epochs)
    received = store.fetch(owner=target, epoch=epochs)
    records = sorted({r.key: r for r in sent + received}.values(), key=lambda r: r.key)
    by_owner: dict[int, list[EncryptedGradientRecord]] = defaultdict(list)
    for r in records:
        by_owner[r.owner].append(r)

    result = QuorumResult(target)
    blocked: set[int] = set()
    for owner in sorted(by_owner):
        shares = [
            held[owner]
            for pid, held in sorted(share_providers.items())
            if pid != owner and owner in held
        ]
        if len(shares) < policy.t:
            logger.info("owner %s: %d of %d shares, records blocked", owner, len(shares), policy.t)
            result.blocked_owners.append(owner)
            blocked.update(r.epoch for r in by_owner[owner])
            continue
        secret = recover_secret(shares, policy)
        result.recovered_owners.append(owner)
        for r in by_owner[owner]:
            t0 = time.perf_counter()
            try:
                vec = decrypt_record(r, secret)
            except DecryptionError:
                blocked.add(r.epoch)
                continue
            finally:
                result.decrypt_seconds.append(time.perf_counter() - t0)
            result.messages.append(DecryptedMessage(r.epoch, r.group, r.sender, r.owner, vec))
    result.blocked_epochs = sorted(blocked)
    return result
