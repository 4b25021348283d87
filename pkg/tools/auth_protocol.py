#!/usr/bin/env python3
"""
Auth Protocol - enrollment and hybrid-encrypted authentication exchange.

Request frame (big-endian, after a 4-byte length prefix):
    version(1) | device_id(4) | len(M2)(2) | M2 | len(M1)(4) | M1
M1 = nonce(12) | AES-GCM ciphertext | tag(16), device_id as associated data
M2 = RSA-OAEP(pk, session key)

Response frame: 4-byte length prefix + UTF-8 JSON AuthResponse.

Server order per request: replay check on M2, decrypt, filter insert,
classify. The check/decrypt/insert sequence runs under the filter lock.

Actions:
- wire_overhead: serialized size of one request for an image size
- provision_info: summary of a device provisioning file
- device: one device-side exchange (optionally replayed or impostor)
"""

import asyncio
import hashlib
import json
import logging
import os
import secrets
import struct
import sys
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Protocol, Sequence, Tuple

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from pydantic import BaseModel

from tools.errors import PufAuthError, ProtocolError, RegistryConflict
from tools.imaging import PufImage, generate_image, to_model_input
from tools.openset_classifier import LabeledDataset, OpenSetModel, authenticate_image
from tools.puf_sim import STREAM_EVALUATION, Challenge, SimulatedDevice, create_device
from tools.replay_filter import BloomFilter

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
SESSION_KEY_BYTES = 32
GCM_NONCE_BYTES = 12
GCM_TAG_BYTES = 16
DEFAULT_MAX_FRAME = 65536
PROVISION_VERSION = 1
IMPOSTOR_ID_OFFSET = 1_000_000

INSERT_AFTER_DECRYPT = "after_decrypt"
INSERT_AFTER_ACCEPT = "after_accept"


# ============================================================================
# CIPHER SUITE
# ============================================================================

class AsymmetricScheme(Protocol):
    def keygen(self) -> Tuple[object, object]: ...
    def encrypt(self, public_key, data: bytes) -> bytes: ...
    def decrypt(self, private_key, data: bytes) -> bytes: ...


class SymmetricCipher(Protocol):
    def seal(self, key: bytes, plaintext: bytes, aad: bytes) -> bytes: ...
    def open(self, key: bytes, envelope: bytes, aad: bytes) -> bytes: ...


class RsaOaepScheme:
    def __init__(self, key_size: int = 2048):
        self.key_size = key_size
        self._padding = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()),
                                     algorithm=hashes.SHA256(), label=None)

    def keygen(self):
        sk = rsa.generate_private_key(public_exponent=65537, key_size=self.key_size)
        return sk.public_key(), sk

    def encrypt(self, public_key, data: bytes) -> bytes:
        return public_key.encrypt(data, self._padding)

    def decrypt(self, private_key, data: bytes) -> bytes:
        return private_key.decrypt(data, self._padding)


class AesGcmCipher:
    def seal(self, key: bytes, plaintext: bytes, aad: bytes) -> bytes:
        nonce = os.urandom(GCM_NONCE_BYTES)
        return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)

    def open(self, key: bytes, envelope: bytes, aad: bytes) -> bytes:
        if len(envelope) < GCM_NONCE_BYTES + GCM_TAG_BYTES:
            raise ValueError("envelope shorter than nonce + tag")
        return AESGCM(key).decrypt(envelope[:GCM_NONCE_BYTES], envelope[GCM_NONCE_BYTES:], aad)


@dataclass
class ServerKeyPair:
    public_key: object
    private_key: object

    @classmethod
    def generate(cls, scheme: Optional[RsaOaepScheme] = None) -> "ServerKeyPair":
        pk, sk = (scheme or RsaOaepScheme()).keygen()
        return cls(pk, sk)

    def public_pem(self) -> str:
        return public_key_pem(self.public_key)

    def private_pem(self) -> str:
        return self.private_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        ).decode("ascii")

    def fingerprint(self) -> str:
        return key_fingerprint(self.public_key)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="ascii") as f:
            f.write(self.private_pem())
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: str) -> "ServerKeyPair":
        with open(path, "rb") as f:
            sk = serialization.load_pem_private_key(f.read(), password=None)
        return cls(sk.public_key(), sk)


def public_key_pem(public_key) -> str:
    return public_key.public_bytes(
        serialization.Encoding.PEM,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    ).decode("ascii")


def key_fingerprint(public_key) -> str:
    der = public_key.public_bytes(serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)
    return hashlib.sha256(der).hexdigest()


def new_session_key() -> bytes:
    return secrets.token_bytes(SESSION_KEY_BYTES)


# ============================================================================
# WIRE FORMAT
# ============================================================================

@dataclass(frozen=True)
class AuthRequest:
    device_id: int
    m1: bytes
    m2: bytes

    def to_bytes(self) -> bytes:
        if not 0 <= self.device_id <= 0xFFFFFFFF:
            raise ProtocolError(f"device_id {self.device_id} does not fit in 4 bytes")
        if len(self.m2) > 0xFFFF:
            raise ProtocolError("M2 longer than 65535 bytes")
        return (struct.pack(">BIH", PROTOCOL_VERSION, self.device_id, len(self.m2)) + self.m2
                + struct.pack(">I", len(self.m1)) + self.m1)

    @classmethod
    def from_bytes(cls, body: bytes) -> "AuthRequest":
        if len(body) < 7:
            raise ProtocolError("request shorter than its fixed header")
        version, device_id, m2_len = struct.unpack_from(">BIH", body, 0)
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {version}")
        offset = 7
        if len(body) < offset + m2_len + 4:
            raise ProtocolError("truncated M2")
        m2 = body[offset:offset + m2_len]
        offset += m2_len
        (m1_len,) = struct.unpack_from(">I", body, offset)
        offset += 4
        if len(body) != offset + m1_len:
            raise ProtocolError(f"M1 length field {m1_len} disagrees with {len(body) - offset} remaining bytes")
        return cls(device_id, body[offset:], m2)

    def frame(self) -> bytes:
        return encode_frame(self.to_bytes())


class AuthResponse(BaseModel):
    verdict: Literal["accept", "reject"]
    reason: Literal["ok", "replay", "decrypt_fail", "identity_mismatch", "low_confidence"]
    p_open: Optional[float] = None

    def frame(self) -> bytes:
        return encode_frame(self.model_dump_json().encode("utf-8"))

    @classmethod
    def reject(cls, reason: str, p_open: Optional[float] = None) -> "AuthResponse":
        return cls(verdict="reject", reason=reason, p_open=p_open)


def encode_frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload


async def read_frame(reader: asyncio.StreamReader, max_frame: int = DEFAULT_MAX_FRAME) -> Optional[bytes]:
    """None on clean EOF before a frame starts."""
    try:
        header = await reader.readexactly(4)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise ProtocolError("truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length > max_frame:
        raise ProtocolError(f"frame of {length} bytes exceeds limit {max_frame}")
    try:
        return await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise ProtocolError("truncated frame body")


def _aad(device_id: int) -> bytes:
    return struct.pack(">I", device_id)


# ============================================================================
# ENROLLMENT
# ============================================================================

@dataclass
class DeviceRegistry:
    labels: Dict[int, int] = field(default_factory=dict)
    pk_fingerprint: Optional[str] = None

    def register(self, device_id: int) -> int:
        if device_id in self.labels:
            raise RegistryConflict(f"device {device_id} is already enrolled")
        label = len(self.labels)
        self.labels[device_id] = label
        return label

    def label_of(self, device_id: int) -> Optional[int]:
        return self.labels.get(device_id)

    def device_of(self, label: int) -> Optional[int]:
        for device_id, lbl in self.labels.items():
            if lbl == label:
                return device_id
        return None

    def __len__(self):
        return len(self.labels)

    def to_dict(self) -> Dict:
        return {"labels": {str(k): v for k, v in self.labels.items()}, "pk_fingerprint": self.pk_fingerprint}

    @classmethod
    def from_dict(cls, data: Dict) -> "DeviceRegistry":
        return cls({int(k): int(v) for k, v in data.get("labels", {}).items()}, data.get("pk_fingerprint"))


@dataclass
class ImageSpec:
    width: int = 50
    height: int = 50
    crop_offset: Tuple[int, int] = (0, 0)
    crop_mode: str = "flatten"
    norm_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: Tuple[float, float, float] = (0.5, 0.5, 0.5)


def enroll_fleet(devices: Sequence[SimulatedDevice], images_per_device: int, image: ImageSpec,
                 challenge: Optional[Challenge] = None, registry: Optional[DeviceRegistry] = None,
                 public_key=None) -> Tuple[LabeledDataset, DeviceRegistry]:
    """
    Evaluate every device images_per_device times at distinct instants and
    label the images by registry class. A shared `challenge` replaces each
    strong device's own enrollment challenge.
    """
    if images_per_device < 5:
        raise ValueError(f"images_per_device must be >= 5, got {images_per_device}")
    registry = registry if registry is not None else DeviceRegistry()
    if public_key is not None:
        registry.pk_fingerprint = key_fingerprint(public_key)

    inputs, labels, ids = [], [], []
    for device in devices:
        label = registry.register(device.device_id)
        if challenge is not None and device.kind == "arbiter":
            device.challenge = challenge
        for _ in range(images_per_device):
            img = generate_image(device, image.width, image.height, image.crop_offset, image.crop_mode)
            inputs.append(to_model_input(img, image.norm_mean, image.norm_std).data)
            labels.append(label)
            ids.append(device.device_id)
    logger.info(f"Enrolled {len(devices)} devices x {images_per_device} images")
    return LabeledDataset(np.stack(inputs), np.array(labels), "enroll", np.array(ids)), registry


def collect_images(devices: Sequence[SimulatedDevice], images_per_device: int, image: ImageSpec,
                   label: int = -1) -> LabeledDataset:
    """Unregistered images (impostors); every sample carries `label`."""
    inputs, ids = [], []
    for device in devices:
        for _ in range(images_per_device):
            img = generate_image(device, image.width, image.height, image.crop_offset, image.crop_mode)
            inputs.append(to_model_input(img, image.norm_mean, image.norm_std).data)
            ids.append(device.device_id)
    if not inputs:
        return LabeledDataset.empty("impostor", (3, image.height, image.width))
    return LabeledDataset(np.stack(inputs), np.full(len(inputs), label), "impostor", np.array(ids))


# ============================================================================
# DEVICE SIDE
# ============================================================================

def seal_image(device_id: int, image_bytes: bytes, public_key,
               scheme: Optional[AsymmetricScheme] = None, cipher: Optional[SymmetricCipher] = None) -> AuthRequest:
    scheme = scheme or RsaOaepScheme()
    cipher = cipher or AesGcmCipher()
    k = new_session_key()
    m1 = cipher.seal(k, image_bytes, _aad(device_id))
    m2 = scheme.encrypt(public_key, k)
    return AuthRequest(device_id, m1, m2)


def build_auth_request(device: SimulatedDevice, public_key, image: ImageSpec,
                       claimed_id: Optional[int] = None, scheme: Optional[AsymmetricScheme] = None,
                       cipher: Optional[SymmetricCipher] = None) -> AuthRequest:
    """Regenerate the PUF image from the stored challenge and seal it under a fresh session key."""
    img = generate_image(device, image.width, image.height, image.crop_offset, image.crop_mode)
    device_id = device.device_id if claimed_id is None else claimed_id
    return seal_image(device_id, img.to_bytes(), public_key, scheme, cipher)


def wire_overhead(width: int = 50, height: int = 50, keypair: Optional[ServerKeyPair] = None) -> Dict[str, int]:
    keypair = keypair or ServerKeyPair.generate()
    req = seal_image(0, secrets.token_bytes(width * height), keypair.public_key)
    body = req.to_bytes()
    return {
        "image_bytes": width * height,
        "m1_bytes": len(req.m1),
        "m2_bytes": len(req.m2),
        "request_bytes": len(body),
        "framed_bytes": len(body) + 4,
    }


# ============================================================================
# SERVER SIDE
# ============================================================================

class ServerState:
    def __init__(self, keypair: ServerKeyPair, replay_filter: BloomFilter, model: OpenSetModel,
                 registry: DeviceRegistry, insert_policy: str = INSERT_AFTER_DECRYPT,
                 scheme: Optional[AsymmetricScheme] = None, cipher: Optional[SymmetricCipher] = None):
        if insert_policy not in (INSERT_AFTER_DECRYPT, INSERT_AFTER_ACCEPT):
            raise ValueError(f"unknown insert policy '{insert_policy}'")
        self.keypair = keypair
        self.filter = replay_filter
        self.model = model
        self.registry = registry
        self.insert_policy = insert_policy
        self.scheme = scheme or RsaOaepScheme()
        self.cipher = cipher or AesGcmCipher()
        _, self.height, self.width = model.backbone.input_shape
        self._counts_lock = threading.Lock()
        self.counts: Dict[str, int] = {}

    def record(self, response: AuthResponse) -> None:
        key = response.reason
        with self._counts_lock:
            self.counts[key] = self.counts.get(key, 0) + 1

    def stats(self) -> Dict:
        with self._counts_lock:
            counts = dict(self.counts)
        return {
            "verdicts": counts,
            "enrolled_devices": len(self.registry),
            "tau": self.model.tau,
            "insert_policy": self.insert_policy,
            "image": [self.width, self.height],
        }


def _open_request(req: AuthRequest, state: ServerState) -> Optional[bytes]:
    try:
        k = state.scheme.decrypt(state.keypair.private_key, req.m2)
        payload = state.cipher.open(k, req.m1, _aad(req.device_id))
    except (InvalidTag, ValueError, TypeError):
        return None
    if len(payload) != state.width * state.height:
        return None
    return payload


def _classify(req: AuthRequest, payload: bytes, state: ServerState) -> AuthResponse:
    bb = state.model.backbone
    x = to_model_input(PufImage.from_bytes(payload, state.width, state.height), bb.norm_mean, bb.norm_std)
    label = state.registry.label_of(req.device_id)
    decision = authenticate_image(state.model, x, -1 if label is None else label)
    verdict = "accept" if decision.accept else "reject"
    return AuthResponse(verdict=verdict, reason=decision.reason, p_open=decision.p_open)


def handle_auth_request(req: AuthRequest, state: ServerState) -> AuthResponse:
    f = state.filter
    if state.insert_policy == INSERT_AFTER_DECRYPT:
        with f.lock:
            if f.query(req.m2):
                return AuthResponse.reject("replay")
            payload = _open_request(req, state)
            if payload is None:
                return AuthResponse.reject("decrypt_fail")
            f.insert(req.m2)
        return _classify(req, payload, state)

    # after_accept: classification also sits inside the critical section
    with f.lock:
        if f.query(req.m2):
            return AuthResponse.reject("replay")
        payload = _open_request(req, state)
        if payload is None:
            return AuthResponse.reject("decrypt_fail")
        response = _classify(req, payload, state)
        if response.verdict == "accept":
            f.insert(req.m2)
        return response


def process_frame(body: bytes, state: ServerState) -> AuthResponse:
    start = time.perf_counter()
    req = AuthRequest.from_bytes(body)
    response = handle_auth_request(req, state)
    state.record(response)
    elapsed = (time.perf_counter() - start) * 1000
    p = f"{response.p_open:.4f}" if response.p_open is not None else "-"
    logger.info(f"Verdict device={req.device_id} {response.verdict}/{response.reason} p_open={p} latency_ms={elapsed:.1f}")
    return response


async def start_auth_server(state: ServerState, host: str, port: int,
                            max_frame: int = DEFAULT_MAX_FRAME) -> asyncio.AbstractServer:
    """Framed TCP listener; each request is handled in the default executor."""
    loop = asyncio.get_running_loop()

    async def handle_connection(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        peer = writer.get_extra_info("peername")
        try:
            while True:
                body = await read_frame(reader, max_frame)
                if body is None:
                    break
                response = await loop.run_in_executor(None, process_frame, body, state)
                writer.write(response.frame())
                await writer.drain()
        except ProtocolError as e:
            logger.warning(f"Malformed frame from {peer}: {e}; closing connection")
        except ConnectionError as e:
            logger.info(f"Connection from {peer} dropped: {e}")
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass

    server = await asyncio.start_server(handle_connection, host, port)
    bound = ", ".join(str(s.getsockname()) for s in server.sockets)
    logger.info(f"Authentication listener on {bound} (max frame {max_frame} bytes)")
    return server


def parse_endpoint(endpoint: str) -> Tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint '{endpoint}' is not host:port")
    return host, int(port)


# ============================================================================
# PROVISIONING AND DEVICE CLIENT
# ============================================================================

@dataclass
class ProvisionedDevice:
    """Device "ROM": identity, server public key, stored challenge and image layout."""
    device: SimulatedDevice
    device_id: int
    public_key: object
    image: ImageSpec


def write_provisioning(path: str, device: SimulatedDevice, group, master_seed: int, lfsr_width: int,
                       public_key, image: ImageSpec) -> None:
    """`group` is the system_guard.FleetGroup the device was manufactured from."""
    doc = {
        "format_version": PROVISION_VERSION,
        "device_id": device.device_id,
        "public_key_pem": public_key_pem(public_key),
        "challenge": device.challenge.to_int() if device.challenge is not None else None,
        "lfsr_width": lfsr_width,
        "lfsr_taps": list(device.taps),
        "image": {
            "width": image.width,
            "height": image.height,
            "crop_offset": list(image.crop_offset),
            "crop_mode": image.crop_mode,
        },
        "device": {"master_seed": master_seed, "group": group.model_dump(mode="json")},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


def load_provisioning(path: str, impostor: bool = False) -> ProvisionedDevice:
    """
    Recreate the device from its provisioning file at a fresh evaluation
    instant. With impostor=True an unenrolled device of the same kind claims
    the identity.
    """
    from system_guard import FleetGroup

    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != PROVISION_VERSION:
        raise ProtocolError(f"{path}: unsupported provisioning version")
    public_key = serialization.load_pem_public_key(doc["public_key_pem"].encode("ascii"))
    group = FleetGroup.model_validate(doc["device"]["group"])
    device_id = int(doc["device_id"])
    master_seed = int(doc["device"]["master_seed"])

    manufacture_id = device_id + IMPOSTOR_ID_OFFSET if impostor else device_id
    if impostor:
        master_seed = secrets.randbits(32)
    device = create_device(group, manufacture_id, master_seed, int(doc["lfsr_width"]), doc["lfsr_taps"])
    if doc.get("challenge") is not None:
        device.challenge = Challenge.from_int(int(doc["challenge"]), int(doc["lfsr_width"]))
    device = replace(device, rng=np.random.default_rng(
        [master_seed, manufacture_id, STREAM_EVALUATION, secrets.randbits(32)]))
    img = doc["image"]
    spec = ImageSpec(img["width"], img["height"], tuple(img["crop_offset"]), img["crop_mode"])
    return ProvisionedDevice(device, device_id, public_key, spec)


async def exchange(host: str, port: int, frames: List[bytes],
                   max_frame: int = DEFAULT_MAX_FRAME) -> List[AuthResponse]:
    """Send frames over one connection, one response per frame."""
    reader, writer = await asyncio.open_connection(host, port)
    responses = []
    try:
        for frame in frames:
            writer.write(frame)
            await writer.drain()
            body = await read_frame(reader, max_frame)
            if body is None:
                raise ProtocolError("server closed the connection")
            responses.append(AuthResponse.model_validate_json(body))
    finally:
        writer.close()
        await writer.wait_closed()
    return responses


def run_device(provision_path: str, target: str, replay: bool = False, impostor: bool = False) -> Dict:
    pd = load_provisioning(provision_path, impostor=impostor)
    host, port = parse_endpoint(target)
    start = time.perf_counter()
    req = build_auth_request(pd.device, pd.public_key, pd.image, claimed_id=pd.device_id)
    frame = req.frame()
    frames = [frame, frame] if replay else [frame]
    responses = asyncio.run(exchange(host, port, frames))
    elapsed = (time.perf_counter() - start) * 1000
    return {
        "device_id": pd.device_id,
        "mode": "impostor" if impostor else ("replay" if replay else "legit"),
        "request_bytes": len(frame),
        "latency_ms": round(elapsed, 1),
        "responses": [r.model_dump() for r in responses],
    }


# ============================================================================
# ACTIONS
# ============================================================================

ACTIONS = {
    "wire_overhead": {
        "description": "Serialized size of one authentication request.",
        "params": {
            "width": {"type": "integer", "required": False, "default": 50},
            "height": {"type": "integer", "required": False, "default": 50},
        },
    },
    "provision_info": {
        "description": "Summary of a device provisioning file.",
        "params": {"path": {"type": "string", "required": True}},
    },
    "device": {
        "description": "Run one device-side exchange against a server.",
        "params": {
            "provision": {"type": "string", "required": True},
            "target": {"type": "string", "required": True},
            "replay": {"type": "boolean", "required": False, "default": False},
            "impostor": {"type": "boolean", "required": False, "default": False},
        },
    },
}


def execute(action, params):
    try:
        if action == "wire_overhead":
            return {"status": "success", **wire_overhead(int(params.get("width", 50)), int(params.get("height", 50)))}
        elif action == "provision_info":
            if not params.get("path"):
                return {"status": "error", "message": "Missing required param: path"}
            pd = load_provisioning(params["path"])
            return {
                "status": "success",
                "device_id": pd.device_id,
                "kind": pd.device.kind,
                "image": [pd.image.width, pd.image.height],
                "pk_fingerprint": key_fingerprint(pd.public_key),
            }
        elif action == "device":
            if not params.get("provision") or not params.get("target"):
                return {"status": "error", "message": "Missing required params: provision, target"}
            return {"status": "success", **run_device(params["provision"], params["target"],
                                                      bool(params.get("replay")), bool(params.get("impostor")))}
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
