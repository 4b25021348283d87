"""
Imaging - unified W x H grayscale representation for every PUF type.

Strong-PUF bits are packed 8 per pixel, first response bit in the LSB of
the first pixel. Weak-PUF cell arrays are flattened row-major (or cut as a
rectangle) before the same packing rule is applied.
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

from tools.errors import CropOutOfBounds, FormatError, InvalidNormalization, LengthMismatch
from tools.puf_sim import ResponseVector, SimulatedDevice, evaluate_device

logger = logging.getLogger(__name__)

IMAGE_DUMP_MAGIC = b"PUFI"
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


@dataclass
class PufImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8, row-major

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width)

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, width: int, height: int) -> "PufImage":
        if len(data) != width * height:
            raise LengthMismatch(f"{len(data)} bytes cannot form a {width}x{height} image")
        return cls(width, height, np.frombuffer(data, dtype=np.uint8))

    def __eq__(self, other):
        return (isinstance(other, PufImage) and self.width == other.width and self.height == other.height
                and np.array_equal(self.pixels, other.pixels))


@dataclass
class ModelInput:
    data: np.ndarray  # (3, H, W) float32

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def pack_bits_to_image(r: ResponseVector, w: int, h: int) -> PufImage:
    bits = r.bits if isinstance(r, ResponseVector) else np.asarray(r, dtype=np.uint8).ravel()
    if len(bits) != 8 * w * h:
        raise LengthMismatch(f"{len(bits)} bits cannot form a {w}x{h} image ({8 * w * h} needed)")
    pixels = np.packbits(bits.reshape(w * h, 8), axis=1, bitorder="little").ravel()
    return PufImage(w, h, pixels)


def unpack_image_to_bits(img: PufImage) -> ResponseVector:
    return ResponseVector(np.unpackbits(img.pixels.ravel(), bitorder="little"))


def crop_cell_array(cells: np.ndarray, w: int, h: int, offset: Tuple[int, int] = (0, 0),
                    mode: str = "flatten") -> PufImage:
    """
    flatten: consume 8*w*h bits of the row-major stream starting at cell `offset`.
    rect: an h x (8*w) bit rectangle at `offset`, each row packed into w pixels.
    """
    cells = np.asarray(cells, dtype=np.uint8)
    rows, cols = cells.shape
    row, col = offset
    if row < 0 or col < 0 or row >= rows or col >= cols:
        raise CropOutOfBounds(f"offset {offset} outside {rows}x{cols} array")
    if mode == "rect":
        if row + h > rows or col + 8 * w > cols:
            raise CropOutOfBounds(f"{h}x{8 * w} crop at {offset} exceeds {rows}x{cols} array")
        bits = cells[row:row + h, col:col + 8 * w].ravel()
    elif mode == "flatten":
        start = row * cols + col
        needed = 8 * w * h
        if start + needed > rows * cols:
            raise CropOutOfBounds(f"{needed} bits from cell {start} exceed {rows * cols} cells")
        bits = cells.ravel()[start:start + needed]
    else:
        raise ValueError(f"unknown crop mode '{mode}'")
    return pack_bits_to_image(ResponseVector(bits), w, h)


def to_model_input(img: PufImage, mean: Sequence[float] = DEFAULT_MEAN,
                   std: Sequence[float] = DEFAULT_STD) -> ModelInput:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if std.shape != (3,) or mean.shape != (3,):
        raise InvalidNormalization("mean and std need three components")
    if np.any(std <= 0):
        raise InvalidNormalization("std components must be > 0")
    gray = img.pixels.astype(np.float32) / np.float32(255.0)
    data = (gray[None, :, :] - mean[:, None, None]) / std[:, None, None]
    return ModelInput(data.astype(np.float32))


def generate_image(device: SimulatedDevice, w: int, h: int, offset: Tuple[int, int] = (0, 0),
                   mode: str = "flatten") -> PufImage:
    """Evaluate the device once and encode the result."""
    n_bits = 8 * w * h
    out = evaluate_device(device, n_bits)
    if isinstance(out, ResponseVector):
        return pack_bits_to_image(out, w, h)
    return crop_cell_array(out, w, h, offset, mode)


# === Image dumps: magic(4) u16 W u16 H, little-endian, then W*H bytes ===

def write_image_dump(path: str, img: PufImage) -> int:
    payload = struct.pack("<4sHH", IMAGE_DUMP_MAGIC, img.width, img.height) + img.to_bytes()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload)
    return len(payload)


def read_image_dump(path: str) -> PufImage:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != IMAGE_DUMP_MAGIC:
        raise FormatError(f"{path}: not an image dump")
    _, w, h = struct.unpack_from("<4sHH", raw, 0)
    return PufImage.from_bytes(raw[8:], w, h)


def save_png(path: str, img: PufImage) -> None:
    """Preview only; the dump format is authoritative."""
    Image.fromarray(img.pixels).save(path)
