"""File formats: raster images and masks, displacement fields, JSON reports.

Displacement field files (``.dfld``)::

    b"DFLD" | version u16 | width u32 | height u32 | H*W*(dx, dy) float32

all little-endian, samples row-major.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import CxregError
from .validation import check_field, check_label_mask

DFLD_MAGIC = b"DFLD"
DFLD_VERSION = 1
_HEADER = struct.Struct("<4sHII")


class FormatError(CxregError, ValueError):
    """A file does not follow the expected format."""


def read_image(path):
    """Single-channel 8- or 16-bit raster normalized to [0, 1]."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image, got mode {mode}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32) and mode.startswith("I"):
        return arr.astype(np.float64) / 65535.0
    if mode == "1":
        return arr.astype(np.float64)
    raise FormatError(f"{path}: unsupported pixel type {arr.dtype} (mode {mode})")


def write_image(path, img, bits=16):
    """Write an image in [0, 1] as an 8- or 16-bit grayscale PNG."""
    img = np.asarray(img, dtype=np.float64)
    if bits == 8:
        data = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(data).save(path)
    elif bits == 16:
        data = np.rint(np.clip(img, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(data).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def quantize(img, bits=16):
    """The values :func:`write_image` followed by :func:`read_image` yields."""
    scale = (1 << bits) - 1
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * scale) / scale


def read_mask(path):
    """8-bit label raster; pixel values are the labels."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"{path}: masks must be single-channel 8-bit")
    return arr.astype(np.int64)


def write_mask(path, mask):
    mask = check_label_mask(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask labels must fit in 8 bits")
    Image.fromarray(mask.astype(np.uint8)).save(path)


def write_rgb(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 array")
    Image.fromarray(rgb).save(path)


def write_signed16(path, codes, scale):
    """16-bit raster of a signed map; ``value = (code - 32768) * scale``.

    The scale is stored in the PNG text chunk ``cxreg-scale``.
    """
    from PIL.PngImagePlugin import PngInfo
    info = PngInfo()
    info.add_text("cxreg-encoding", "value = (code - 32768) * scale")
    info.add_text("cxreg-scale", repr(float(scale)))
    Image.fromarray(np.asarray(codes, dtype=np.uint16)).save(path, pnginfo=info)


def read_signed16(path):
    with Image.open(path) as im:
        scale = float(im.text["cxreg-scale"])
        codes = np.asarray(im).astype(np.float64)
    return (codes - 32768.0) * scale


def field_to_bytes(field):
    field = check_field(field)
    h, w = field.shape[:2]
    return _HEADER.pack(DFLD_MAGIC, DFLD_VERSION, w, h) + field.astype("<f4").tobytes()


def field_from_bytes(data):
    if len(data) < _HEADER.size:
        raise FormatError("field file too short")
    magic, version, w, h = _HEADER.unpack_from(data)
    if magic != DFLD_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != DFLD_VERSION:
        raise FormatError(f"unsupported field version {version}")
    n = w * h * 2
    body = np.frombuffer(data, dtype="<f4", count=-1, offset=_HEADER.size)
    if body.size != n:
        raise FormatError(f"expected {n} samples, found {body.size}")
    return body.reshape(h, w, 2).astype(np.float64)


def write_field(path, field):
    Path(path).write_bytes(field_to_bytes(field))


def read_field(path):
    return field_from_bytes(Path(path).read_bytes())


def quantize_field(field):
    """The values a field takes after a write/read round trip (float32)."""
    return np.asarray(field, dtype=np.float64).astype("<f4").astype(np.float64)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps_report(record):
    """Canonical JSON text: sorted keys, floats printed round-trip exactly."""
    return json.dumps(_jsonable(record), sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_report(path, record):
    Path(path).write_text(dumps_report(record))


def read_report(path):
    return json.loads(Path(path).read_text())
