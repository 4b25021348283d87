#!/usr/bin/env python3
"""
PUF Sim - statistical simulators for heterogeneous PUF devices.

Strong devices follow the linear additive-delay (parity feature) Arbiter
model and are driven by an LFSR challenge expansion. Weak devices expose a
2D cell array sampled at power-up (sram) or after a decay window over a
written checkerboard (dram).

Every device owns two RNG streams derived from (master_seed, device_id):
one for manufacture (weights, bias maps, challenge) and one for evaluation.

Actions:
- instability_report: per-device normalized Hamming instability of a fleet
- calibration_table: arbiter noise sigma for a list of target flip rates
"""

import json
import logging
import os
import struct
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tools.errors import ChallengeWidthMismatch, DegenerateSeed, FormatError, PufAuthError, ShapeMismatch

logger = logging.getLogger(__name__)

RESPONSE_DUMP_MAGIC = b"PUFR"
RESPONSE_DUMP_VERSION = 1
RESPONSE_DUMP_HEADER = 14
DEFAULT_READOUTS = 101

STREAM_MANUFACTURE = 0
STREAM_EVALUATION = 1


# ============================================================================
# CHALLENGES AND LFSR
# ============================================================================

@dataclass(frozen=True)
class Challenge:
    """Bit-vector challenge, MSB-first (bits[0] is position 1)."""
    bits: Tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("challenge bits must be 0 or 1")

    @classmethod
    def from_int(cls, value: int, width: int) -> "Challenge":
        if value < 0 or value >= (1 << width):
            raise ValueError(f"value {value} does not fit in {width} bits")
        return cls(tuple((value >> (width - 1 - i)) & 1 for i in range(width)))

    @property
    def width(self) -> int:
        return len(self.bits)

    def to_int(self) -> int:
        value = 0
        for b in self.bits:
            value = (value << 1) | b
        return value

    def is_zero(self) -> bool:
        return not any(self.bits)


@dataclass
class Lfsr:
    """
    Fibonacci LFSR. Taps are 1-based positions counted from the MSB; the
    feedback (XOR of tapped positions) enters at position 1 while every other
    bit moves one position towards the output at position `width`.
    """
    width: int
    taps: Tuple[int, ...]
    state: int

    def __post_init__(self):
        self.taps = tuple(sorted(set(self.taps), reverse=True))
        if not self.taps or any(t < 1 or t > self.width for t in self.taps):
            raise ValueError(f"taps {self.taps} outside 1..{self.width}")
        if self.state == 0:
            raise DegenerateSeed("all-zero LFSR state is a fixed point")
        self._mask = 0
        for t in self.taps:
            self._mask |= 1 << (self.width - t)

    @classmethod
    def seeded(cls, taps: Sequence[int], seed: Challenge) -> "Lfsr":
        if seed.is_zero():
            raise DegenerateSeed("all-zero challenge cannot seed the LFSR")
        return cls(width=seed.width, taps=tuple(taps), state=seed.to_int())

    def step(self) -> int:
        feedback = bin(self.state & self._mask).count("1") & 1
        self.state = (self.state >> 1) | (feedback << (self.width - 1))
        return self.state

    def copy(self) -> "Lfsr":
        return Lfsr(self.width, self.taps, self.state)


def lfsr_expand(lfsr: Lfsr, n: int) -> List[Challenge]:
    """C_1..C_n: the LFSR state after 1..n steps. The passed LFSR is not advanced."""
    return [Challenge.from_int(s, lfsr.width) for s in _lfsr_states(lfsr.width, lfsr.taps, lfsr.state, n)]


@lru_cache(maxsize=256)
def _lfsr_states(width: int, taps: Tuple[int, ...], seed: int, n: int) -> Tuple[int, ...]:
    if n < 1:
        raise ValueError("n must be >= 1")
    reg = Lfsr(width, taps, seed)
    return tuple(reg.step() for _ in range(n))


@lru_cache(maxsize=256)
def _challenge_matrix(width: int, taps: Tuple[int, ...], seed: int, n: int) -> np.ndarray:
    states = np.array(_lfsr_states(width, taps, seed, n), dtype=np.uint64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((states[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    bits.setflags(write=False)
    return bits


def expand_challenge_bits(lfsr: Lfsr, n: int) -> np.ndarray:
    """Same sequence as lfsr_expand, as an (n, width) uint8 matrix."""
    return _challenge_matrix(lfsr.width, tuple(lfsr.taps), lfsr.state, n)


def lfsr_period(width: int, taps: Sequence[int], seed: int = 1) -> int:
    reg = Lfsr(width, tuple(taps), seed)
    start = reg.state
    period = 0
    while True:
        reg.step()
        period += 1
        if reg.state == start:
            return period


# ============================================================================
# ARBITER (STRONG) PUF
# ============================================================================

@dataclass
class ResponseVector:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).ravel()
        if len(self.bits) % 8 != 0:
            raise ValueError(f"response length {len(self.bits)} is not divisible by 8")

    def __len__(self):
        return len(self.bits)


@dataclass
class ArbiterPufInstance:
    device_id: int
    weights: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.weights.setflags(write=False)
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def stages(self) -> int:
        return len(self.weights) - 1

    @classmethod
    def create(cls, device_id: int, stages: int, rng: np.random.Generator,
               noise_sigma: Optional[float] = None, flip_rate: float = 0.0) -> "ArbiterPufInstance":
        weights = rng.standard_normal(stages + 1)
        if noise_sigma is None:
            noise_sigma = sigma_for_flip_rate(weights, flip_rate)
        return cls(device_id=device_id, weights=weights, noise_sigma=noise_sigma)


def parity_features(challenge_bits: np.ndarray) -> np.ndarray:
    """Phi_i = prod_{j>=i} (1 - 2 c_j), plus the constant 1 column."""
    bits = np.atleast_2d(np.asarray(challenge_bits, dtype=np.int8))
    signs = 1 - 2 * bits
    phi = np.cumprod(signs[:, ::-1], axis=1)[:, ::-1]
    return np.hstack([phi, np.ones((bits.shape[0], 1), dtype=phi.dtype)]).astype(np.float64)


def delay_sums(puf: ArbiterPufInstance, challenge_bits: np.ndarray) -> np.ndarray:
    bits = np.atleast_2d(challenge_bits)
    if bits.shape[1] != puf.stages:
        raise ChallengeWidthMismatch(f"challenge width {bits.shape[1]} != {puf.stages} stages")
    return parity_features(bits) @ puf.weights


def arbiter_respond(puf: ArbiterPufInstance, c: Challenge, rng: np.random.Generator) -> int:
    if c.width != puf.stages:
        raise ChallengeWidthMismatch(f"challenge width {c.width} != {puf.stages} stages")
    delta = float(delay_sums(puf, np.array([c.bits]))[0])
    if puf.noise_sigma > 0:
        delta += rng.normal(0.0, puf.noise_sigma)
    return int(delta > 0)


def arbiter_respond_batch(puf: ArbiterPufInstance, challenge_bits: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    delta = delay_sums(puf, challenge_bits)
    if puf.noise_sigma > 0:
        delta = delta + rng.normal(0.0, puf.noise_sigma, size=delta.shape)
    return (delta > 0).astype(np.uint8)


def strong_puf_response_vector(puf: ArbiterPufInstance, seed: Challenge, n: int,
                               rng: np.random.Generator, taps: Sequence[int]) -> ResponseVector:
    if n % 8 != 0:
        raise ValueError(f"n={n} must be divisible by 8")
    lfsr = Lfsr.seeded(taps, seed)
    if lfsr.width != puf.stages:
        raise ChallengeWidthMismatch(f"challenge width {lfsr.width} != {puf.stages} stages")
    return ResponseVector(arbiter_respond_batch(puf, expand_challenge_bits(lfsr, n), rng))


def sigma_for_flip_rate(weights: np.ndarray, flip_rate: float) -> float:
    """
    Noise sigma at which two evaluations of the same challenge disagree with
    probability flip_rate. With delay sum D ~ N(0, s^2) and two noise draws,
    P(disagree) = arccos(s^2 / (s^2 + sigma^2)) / pi.
    """
    if not 0.0 <= flip_rate < 0.5:
        raise ValueError("flip_rate must be in [0, 0.5)")
    if flip_rate == 0.0:
        return 0.0
    s2 = float(np.sum(np.square(weights)))
    return float(np.sqrt(s2 * (1.0 / np.cos(np.pi * flip_rate) - 1.0)))


def calibration_table(stages: int = 32, flip_rates: Sequence[float] = (0.01, 0.02, 0.05, 0.1, 0.2)) -> List[Dict]:
    """Sigma for unit-variance weights (E[|w|^2] = stages + 1)."""
    s2 = stages + 1.0
    return [
        {"flip_rate": f, "noise_sigma": float(np.sqrt(s2 * (1.0 / np.cos(np.pi * f) - 1.0))) if f > 0 else 0.0}
        for f in flip_rates
    ]


# ============================================================================
# MEMORY (WEAK) PUF
# ============================================================================

@dataclass
class MemoryPufInstance:
    device_id: int
    bias: np.ndarray
    flip_prob: np.ndarray
    kind: str = "sram"
    stress_flip: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.flip_prob = np.broadcast_to(np.asarray(self.flip_prob, dtype=np.float64), self.bias.shape).copy()
        if self.bias.ndim != 2:
            raise ShapeMismatch("bias must be a 2D array")
        if np.any((self.bias < 0) | (self.bias > 1)):
            raise ValueError("bias must lie in [0, 1]")
        if np.any((self.flip_prob < 0) | (self.flip_prob >= 0.5)):
            raise ValueError("flip_prob must lie in [0, 0.5)")
        self.bias.setflags(write=False)
        self.flip_prob.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.bias.shape[0]

    @property
    def cols(self) -> int:
        return self.bias.shape[1]


def sample_bias_map(rows: int, cols: int, rng: np.random.Generator,
                    stable_weight: float = 0.95, sharpness: float = 20.0) -> np.ndarray:
    """Mixture: stable_weight/2 Beta(1,a) + stable_weight/2 Beta(a,1) + rest Uniform(0,1)."""
    shape = (rows, cols)
    component = rng.random(shape)
    low = rng.beta(1.0, sharpness, size=shape)
    high = rng.beta(sharpness, 1.0, size=shape)
    uniform = rng.random(shape)
    half = stable_weight / 2.0
    return np.where(component < half, low, np.where(component < stable_weight, high, uniform))


def checkerboard(rows: int, cols: int) -> np.ndarray:
    return (np.add.outer(np.arange(rows), np.arange(cols)) % 2).astype(np.uint8)


def create_sram(device_id: int, rows: int, cols: int, rng: np.random.Generator,
                flip_rate: float = 0.0, stable_weight: float = 0.95, sharpness: float = 20.0,
                stress_flip: Tuple[float, float] = (0.0, 0.0)) -> MemoryPufInstance:
    bias = sample_bias_map(rows, cols, rng, stable_weight, sharpness)
    return MemoryPufInstance(device_id, bias, np.full((rows, cols), flip_rate), "sram", tuple(stress_flip))


def create_dram(device_id: int, rows: int, cols: int, rng: np.random.Generator,
                leaky_fraction: float = 0.2, flip_rate: float = 0.0, sharpness: float = 20.0,
                stress_flip: Tuple[float, float] = (0.0, 0.0)) -> MemoryPufInstance:
    """Written checkerboard; a device-specific subset of leaky cells tends to lose its value."""
    written = checkerboard(rows, cols).astype(np.float64)
    leaky = rng.random((rows, cols)) < leaky_fraction
    loss = rng.beta(sharpness, 1.0, size=(rows, cols))
    bias = np.where(leaky, np.abs(written - loss), written)
    return MemoryPufInstance(device_id, bias, np.full((rows, cols), flip_rate), "dram", tuple(stress_flip))


def memory_puf_readout(puf: MemoryPufInstance, rng: np.random.Generator) -> np.ndarray:
    shape = puf.bias.shape
    cells = rng.random(shape) < puf.bias
    flip_prob = puf.flip_prob
    lo, hi = puf.stress_flip
    if hi > 0:
        stress = rng.uniform(lo, hi)
        flip_prob = 1.0 - (1.0 - flip_prob) * (1.0 - stress)
    flips = rng.random(shape) < flip_prob
    return (cells ^ flips).astype(np.uint8)


def expected_instability(puf: MemoryPufInstance) -> float:
    """Mean pairwise normalized Hamming distance implied by bias and flip_prob."""
    q = puf.bias * (1.0 - puf.flip_prob) + (1.0 - puf.bias) * puf.flip_prob
    return float(np.mean(2.0 * q * (1.0 - q)))


def device_instability(readouts: Sequence[np.ndarray]) -> float:
    if len(readouts) < 2:
        raise ValueError("at least 2 readouts are required")
    shape = np.shape(readouts[0])
    if any(np.shape(r) != shape for r in readouts):
        raise ShapeMismatch("all readouts must have the same shape")
    stacked = np.stack([np.asarray(r, dtype=np.uint8).ravel() for r in readouts])
    r, n = stacked.shape
    ones = stacked.sum(axis=0, dtype=np.int64)
    # Differing pairs at each position: ones * zeros
    differing = np.sum(ones * (r - ones))
    return float(differing / (n * r * (r - 1) / 2))


# ============================================================================
# FLEETS
# ============================================================================

PufInstance = Union[ArbiterPufInstance, MemoryPufInstance]


@dataclass
class SimulatedDevice:
    """A device as provisioned: its PUF plus the enrollment challenge (strong PUFs only)."""
    device_id: int
    kind: str
    puf: PufInstance
    challenge: Optional[Challenge] = None
    taps: Tuple[int, ...] = ()
    rng: np.random.Generator = field(default=None, repr=False)


def device_rng(master_seed: int, device_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, device_id, stream])


def draw_challenge(width: int, rng: np.random.Generator) -> Challenge:
    value = 0
    while value == 0:
        value = int(rng.integers(1, 1 << width, dtype=np.uint64)) if width < 64 else int(rng.integers(1, 2**63))
    return Challenge.from_int(value, width)


def create_device(group, device_id: int, master_seed: int, lfsr_width: int,
                  lfsr_taps: Sequence[int]) -> SimulatedDevice:
    """Manufacture one device of a fleet group (system_guard.FleetGroup)."""
    make = device_rng(master_seed, device_id, STREAM_MANUFACTURE)
    evaluate = device_rng(master_seed, device_id, STREAM_EVALUATION)
    if group.kind == "arbiter":
        puf = ArbiterPufInstance.create(device_id, group.stages, make,
                                        noise_sigma=group.noise_sigma, flip_rate=group.flip_rate)
        challenge = draw_challenge(lfsr_width, make)
        return SimulatedDevice(device_id, "arbiter", puf, challenge, tuple(lfsr_taps), evaluate)
    if group.kind == "sram":
        puf = create_sram(device_id, group.rows, group.cols, make, group.flip_rate,
                          group.stable_weight, group.beta_sharpness, group.stress_flip)
    else:
        puf = create_dram(device_id, group.rows, group.cols, make, group.leaky_fraction,
                          group.flip_rate, group.beta_sharpness, group.stress_flip)
    return SimulatedDevice(device_id, group.kind, puf, None, tuple(lfsr_taps), evaluate)


def build_fleet(fleet_config, role: str = "legit", master_seed: Optional[int] = None) -> List[SimulatedDevice]:
    """Devices of one role ("legit" or "impostors"); the seed defaults to the fleet's master seed."""
    seed = fleet_config.master_seed if master_seed is None else master_seed
    groups = fleet_config.legit if role == "legit" else fleet_config.impostors
    devices = []
    for group in groups:
        for device_id in range(group.start_id, group.start_id + group.count):
            devices.append(create_device(group, device_id, seed, fleet_config.lfsr_width, fleet_config.lfsr_taps))
    counts = {}
    for d in devices:
        counts[d.kind] = counts.get(d.kind, 0) + 1
    logger.info(f"Built {role} fleet (seed {seed}): {counts}")
    return devices


def evaluate_device(device: SimulatedDevice, n_bits: int) -> Union[ResponseVector, np.ndarray]:
    """One evaluation at a fresh instant: a response vector or a cell readout."""
    if device.kind == "arbiter":
        return strong_puf_response_vector(device.puf, device.challenge, n_bits, device.rng, device.taps)
    return memory_puf_readout(device.puf, device.rng)


def fleet_instability_report(devices: Sequence[SimulatedDevice], readouts: int = DEFAULT_READOUTS,
                             n_bits: int = 20000) -> Dict:
    per_device = {}
    for device in devices:
        samples = []
        for _ in range(readouts):
            out = evaluate_device(device, n_bits)
            samples.append(out.bits if isinstance(out, ResponseVector) else out)
        per_device[device.device_id] = device_instability(samples)
    values = list(per_device.values())
    return {
        "per_device": per_device,
        "mean": float(np.mean(values)) if values else 0.0,
        "max": float(np.max(values)) if values else 0.0,
        "readouts": readouts,
    }


def mean_pairwise_disagreement(a: ArbiterPufInstance, b: ArbiterPufInstance, challenge_bits: np.ndarray) -> float:
    """Fraction of challenges on which two noise-free instances disagree."""
    ra = delay_sums(a, challenge_bits) > 0
    rb = delay_sums(b, challenge_bits) > 0
    return float(np.mean(ra != rb))


# ============================================================================
# RAW RESPONSE DUMPS
# ============================================================================
# Header: magic(4) version(u8) layout(u8: 0 vector, 1 matrix) device_id(u32)
# then N(u32) for vectors or rows(u16) cols(u16) for matrices; little-endian,
# followed by the bits packed LSB-first.

def write_response_dump(path: str, device_id: int, data: Union[ResponseVector, np.ndarray]) -> int:
    if isinstance(data, ResponseVector):
        header = struct.pack("<4sBBII", RESPONSE_DUMP_MAGIC, RESPONSE_DUMP_VERSION, 0, device_id, len(data))
        bits = data.bits
    else:
        rows, cols = np.shape(data)
        header = struct.pack("<4sBBIHH", RESPONSE_DUMP_MAGIC, RESPONSE_DUMP_VERSION, 1, device_id, rows, cols)
        bits = np.asarray(data, dtype=np.uint8).ravel()
    payload = header + np.packbits(bits, bitorder="little").tobytes()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload)
    return len(payload)


def read_response_dump(path: str) -> Tuple[int, Union[ResponseVector, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < RESPONSE_DUMP_HEADER or raw[:4] != RESPONSE_DUMP_MAGIC:
        raise FormatError(f"{path}: not a response dump")
    magic, version, layout, device_id = struct.unpack_from("<4sBBI", raw, 0)
    if version != RESPONSE_DUMP_VERSION:
        raise FormatError(f"{path}: unsupported dump version {version}")
    if layout == 0:
        (n,) = struct.unpack_from("<I", raw, 10)
    elif layout == 1:
        rows, cols = struct.unpack_from("<HH", raw, 10)
        n = rows * cols
    else:
        raise FormatError(f"{path}: unknown dump layout {layout}")
    payload = raw[RESPONSE_DUMP_HEADER:]
    if len(payload) < (n + 7) // 8:
        raise FormatError(f"{path}: payload holds {8 * len(payload)} bits, header declares {n}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[:n]
    if layout == 0:
        return device_id, ResponseVector(bits)
    return device_id, bits.reshape(rows, cols)


# ============================================================================
# ACTIONS
# ============================================================================

ACTIONS = {
    "instability_report": {
        "description": "Per-device normalized Hamming instability across repeated evaluations.",
        "params": {
            "config": {"type": "string", "required": False, "description": "Fleet or experiment config path"},
            "readouts": {"type": "integer", "required": False, "default": DEFAULT_READOUTS},
            "role": {"type": "string", "required": False, "default": "legit"},
        },
    },
    "calibration_table": {
        "description": "Arbiter noise sigma per target flip rate.",
        "params": {"stages": {"type": "integer", "required": False, "default": 32}},
    },
}


def _fleet_from_params(params):
    from system_guard import ConfigError, load_experiment_config, load_fleet_config
    path = params.get("config")
    try:
        return load_experiment_config(path).fleet
    except ConfigError:
        return load_fleet_config(path)


def execute(action, params):
    try:
        if action == "instability_report":
            fleet = _fleet_from_params(params)
            devices = build_fleet(fleet, params.get("role", "legit"))
            report = fleet_instability_report(devices, int(params.get("readouts", DEFAULT_READOUTS)),
                                              int(params.get("n_bits", 20000)))
            report["per_device"] = {str(k): round(v, 6) for k, v in report["per_device"].items()}
            return {"status": "success", **report}
        elif action == "calibration_table":
            return {"status": "success", "table": calibration_table(int(params.get("stages", 32)))}
        return {"status": "error", "message": f"Unknown action: {action}"}
    except (PufAuthError, ValueError) as e:
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
