#!/usr/bin/env python3
"""
Replay Filter - Bloom filter over the asymmetric key blob (M2) of every
decrypted request.

Indices use double hashing over two independently seeded 64-bit murmur
hashes: h_i(x) = (h1(x) + i * h2(x)) mod m for i = 1..k, with h2 forced odd.

Actions:
- filter_stats: header and load figures of a snapshot file
- filter_create: write an empty filter sized for (n, p) to a snapshot file
- filter_restore: verify a snapshot and install it at the server's filter path
"""

import json
import logging
import math
import os
import secrets
import struct
import sys
import threading
from typing import Iterable, List, Optional, Tuple

import mmh3
from bitarray import bitarray

from tools.errors import FormatError, InvalidTarget, PufAuthError

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"PUFB"
SNAPSHOT_VERSION = 1
# magic, version, m, k, seed1, seed2, n_inserted, design_n, design_p
SNAPSHOT_HEADER = "<4sBQIIIQQd"
SNAPSHOT_HEADER_SIZE = struct.calcsize(SNAPSHOT_HEADER)

PROTOTYPE_CAPACITY = 1_000_000
PROTOTYPE_FPR = 1e-4


def size_for(n: int, p: float) -> Tuple[int, int]:
    """m = ceil(-n ln p / (ln 2)^2), k = round(m/n ln 2), k >= 1."""
    if not (0.0 < p < 1.0):
        raise InvalidTarget(f"target false positive rate {p} is not in (0, 1)")
    if n < 1:
        raise ValueError("n must be >= 1")
    m = math.ceil(-n * math.log(p) / (math.log(2) ** 2))
    k = max(1, round(m / n * math.log(2)))
    return m, k


def theoretical_fpr(m: int, k: int, n: int) -> float:
    return (1.0 - math.exp(-k * n / m)) ** k


class BloomFilter:
    def __init__(self, m: int, k: int, seeds: Optional[Tuple[int, int]] = None,
                 design_n: int = 0, design_p: float = 0.0):
        if m < 1 or k < 1:
            raise ValueError("m and k must be >= 1")
        if seeds is None:
            seeds = (secrets.randbits(32), secrets.randbits(32))
        if seeds[0] == seeds[1]:
            raise ValueError("hash seeds must differ")
        self.m = m
        self.k = k
        self.seeds = (int(seeds[0]) & 0xFFFFFFFF, int(seeds[1]) & 0xFFFFFFFF)
        self.design_n = design_n
        self.design_p = design_p
        self.n_inserted = 0
        self.bits = bitarray(m, endian="little")
        self.bits.setall(0)
        # Guards bits and n_inserted; the server also holds it across query -> decrypt -> insert
        self.lock = threading.RLock()
        self._warned_saturation = False

    @classmethod
    def for_capacity(cls, n: int, p: float, seeds: Optional[Tuple[int, int]] = None) -> "BloomFilter":
        m, k = size_for(n, p)
        return cls(m, k, seeds, design_n=n, design_p=p)

    def indices(self, x: bytes) -> List[int]:
        h1 = mmh3.hash64(x, self.seeds[0], signed=False)[0]
        h2 = mmh3.hash64(x, self.seeds[1], signed=False)[0] | 1
        m = self.m
        return [(h1 + i * h2) % m for i in range(1, self.k + 1)]

    def insert(self, x: bytes) -> None:
        positions = self.indices(x)
        with self.lock:
            if all(self.bits[i] for i in positions):
                return
            for i in positions:
                self.bits[i] = 1
            self.n_inserted += 1
            if self.saturated and not self._warned_saturation:
                logger.warning(f"Bloom filter past design load: {self.n_inserted} > {self.design_n} insertions")
                self._warned_saturation = True

    def query(self, x: bytes) -> bool:
        positions = self.indices(x)
        with self.lock:
            return all(self.bits[i] for i in positions)

    def __contains__(self, x: bytes) -> bool:
        return self.query(x)

    def popcount(self) -> int:
        with self.lock:
            return self.bits.count(1)

    @property
    def saturated(self) -> bool:
        return self.design_n > 0 and self.n_inserted > self.design_n

    def expected_fpr(self) -> float:
        return theoretical_fpr(self.m, self.k, self.n_inserted)

    def size_bytes(self) -> int:
        return (self.m + 7) // 8

    def stats(self) -> dict:
        with self.lock:
            ones = self.bits.count(1)
            return {
                "m": self.m,
                "k": self.k,
                "seeds": list(self.seeds),
                "n_inserted": self.n_inserted,
                "design_n": self.design_n,
                "design_p": self.design_p,
                "fill_ratio": ones / self.m,
                "expected_fpr": self.expected_fpr(),
                "size_mb": self.size_bytes() / 1e6,
                "saturated": self.saturated,
            }

    # === Snapshots ===

    def to_bytes(self) -> bytes:
        with self.lock:
            header = struct.pack(SNAPSHOT_HEADER, SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.m, self.k,
                                 self.seeds[0], self.seeds[1], self.n_inserted, self.design_n, self.design_p)
            return header + self.bits.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BloomFilter":
        if len(raw) < SNAPSHOT_HEADER_SIZE or raw[:4] != SNAPSHOT_MAGIC:
            raise FormatError("not a Bloom filter snapshot")
        magic, version, m, k, s1, s2, n_inserted, design_n, design_p = struct.unpack_from(SNAPSHOT_HEADER, raw, 0)
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        body = raw[SNAPSHOT_HEADER_SIZE:]
        if len(body) != (m + 7) // 8:
            raise FormatError(f"snapshot body is {len(body)} bytes, expected {(m + 7) // 8}")
        f = cls(m, k, (s1, s2), design_n=design_n, design_p=design_p)
        bits = bitarray(endian="little")
        bits.frombytes(body)
        f.bits = bits[:m]
        f.n_inserted = n_inserted
        return f

    def snapshot(self, path: str) -> int:
        """Atomic write: a crash mid-write leaves the previous snapshot intact."""
        payload = self.to_bytes()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
        logger.info(f"Filter snapshot written: {path} ({self.n_inserted} entries)")
        return len(payload)

    @classmethod
    def restore(cls, path: str) -> "BloomFilter":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def insert(f: BloomFilter, x: bytes) -> None:
    f.insert(x)


def query(f: BloomFilter, x: bytes) -> bool:
    return f.query(x)


def load_or_create(path: Optional[str], n: int = PROTOTYPE_CAPACITY, p: float = PROTOTYPE_FPR) -> BloomFilter:
    if path and os.path.exists(path):
        f = BloomFilter.restore(path)
        logger.info(f"Filter restored from {path}: {f.n_inserted} entries, m={f.m}, k={f.k}")
        return f
    logger.info(f"No filter snapshot at {path}; sizing a fresh filter for n={n}, p={p}")
    return BloomFilter.for_capacity(n, p)


def measure_fpr(f: BloomFilter, probes: Iterable[bytes]) -> float:
    hits = 0
    total = 0
    for x in probes:
        total += 1
        hits += f.query(x)
    return hits / total if total else 0.0


# ============================================================================
# ACTIONS
# ============================================================================

ACTIONS = {
    "filter_stats": {
        "description": "Header and load figures of a snapshot file.",
        "params": {"path": {"type": "string", "required": True}},
    },
    "filter_create": {
        "description": "Write an empty filter sized for (n, p).",
        "params": {
            "path": {"type": "string", "required": True},
            "n": {"type": "integer", "required": False, "default": PROTOTYPE_CAPACITY},
            "p": {"type": "number", "required": False, "default": PROTOTYPE_FPR},
        },
    },
    "filter_restore": {
        "description": "Verify a snapshot and install it at the target path.",
        "params": {
            "path": {"type": "string", "required": True},
            "target": {"type": "string", "required": True},
        },
    },
}


def execute(action, params):
    try:
        if action == "filter_stats":
            if not params.get("path"):
                return {"status": "error", "message": "Missing required param: path"}
            return {"status": "success", **BloomFilter.restore(params["path"]).stats()}
        elif action == "filter_create":
            if not params.get("path"):
                return {"status": "error", "message": "Missing required param: path"}
            f = BloomFilter.for_capacity(int(params.get("n", PROTOTYPE_CAPACITY)),
                                         float(params.get("p", PROTOTYPE_FPR)))
            size = f.snapshot(params["path"])
            return {"status": "success", "path": params["path"], "bytes": size, **f.stats()}
        elif action == "filter_restore":
            if not params.get("path") or not params.get("target"):
                return {"status": "error", "message": "Missing required params: path, target"}
            f = BloomFilter.restore(params["path"])
            f.snapshot(params["target"])
            return {"status": "success", "target": params["target"], **f.stats()}
        return {"status": "error", "message": f"Unknown action: {action}"}
    except (PufAuthError, ValueError, OSError) as e:
        return {"status": "error", "message": str(e)}


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print(json.dumps({"status": "error", "message": "No action specified"}))
        sys.exit(1)
    params = {}
    for i, arg in enumerate(sys.argv):
        if arg == "--params" and i + 1 < len(sys.argv):
            params = json.loads(sys.argv[i + 1])
            break
    print(json.dumps(execute(sys.argv[1], params), indent=2))
