"""File formats: P5 images, raw measurement matrices, checkpoints, config.

Everything binary is little-endian. The canonical P5 header the writer
emits is ``P5\\n<w> <h>\\n255\\n``; files in exactly that form round-trip
byte-for-byte. The reader additionally tolerates comments and arbitrary
whitespace.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from eqsense.block import BlockConfig, IstaBlockParams
from eqsense.model import Model
from eqsense.sampling import StpOperator

__all__ = [
    "FormatError",
    "IngestionError",
    "read_pgm",
    "write_pgm",
    "to_unit",
    "from_unit",
    "read_measurement",
    "write_measurement",
    "save_checkpoint",
    "load_checkpoint",
    "parse_config",
]

MEASUREMENT_MAGIC = b"MSDY"
CHECKPOINT_MAGIC = b"MSDC"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file does not match its declared format."""


class IngestionError(RuntimeError):
    """Dataset ingestion could not produce any usable image."""


# ---------------------------------------------------------------------------
# PGM (P5, binary, 8-bit)
# ---------------------------------------------------------------------------


def _pgm_tokens(data: bytes):
    i = 0
    n = len(data)
    while i < n:
        c = data[i : i + 1]
        if c == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            yield data[i:j], j
            i = j


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Load a binary 8-bit P5 image as a uint8 (height, width) array."""
    data = Path(path).read_bytes()
    tok = _pgm_tokens(data)
    try:
        magic, _ = next(tok)
        if magic != b"P5":
            raise FormatError(f"{path}: not a P5 image (magic {magic!r})")
        (w_b, _), (h_b, _), (maxval_b, end) = next(tok), next(tok), next(tok)
        width, height, maxval = int(w_b), int(h_b), int(maxval_b)
    except (StopIteration, ValueError) as e:
        raise FormatError(f"{path}: malformed PGM header") from e
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    start = end + 1  # single whitespace byte after maxval
    raster = data[start : start + width * height]
    if len(raster) != width * height:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def write_pgm(path: Union[str, Path], img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def to_unit(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def from_unit(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# measurement files
# ---------------------------------------------------------------------------


def write_measurement(path: Union[str, Path], Y: np.ndarray) -> None:
    """16-byte header (magic, version, rows, cols) plus raw float64 data."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError("measurement must be a 2-D matrix")
    header = MEASUREMENT_MAGIC + struct.pack("<III", FORMAT_VERSION, Y.shape[0], Y.shape[1])
    Path(path).write_bytes(header + Y.astype("<f8").tobytes())


def read_measurement(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MEASUREMENT_MAGIC:
        raise FormatError(f"{path}: not a measurement file")
    version, rows, cols = struct.unpack("<III", data[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported measurement version {version}")
    body = data[16:]
    if len(body) != rows * cols * 8:
        raise FormatError(f"{path}: truncated measurement payload")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Union[str, Path], model: Model) -> None:
    """Named-blob serialization of every learnable parameter, bit-exact."""
    params = model.parameters()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack(
        "<IIIIII",
        FORMAT_VERSION,
        model.n,
        model.m,
        model.config.channels,
        model.config.cardinality,
        model.config.se_reduction,
    )
    out += struct.pack("<I", len(params))
    for name, t in params.items():
        nb = name.encode("ascii")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        out += t.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: Union[str, Path]) -> Model:
    data = Path(path).read_bytes()
    if len(data) < 32 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, n, m, c, g, s = struct.unpack("<IIIIII", data[4:28])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", data[28:32])
    pos = 32
    blobs: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        name = data[pos : pos + name_len].decode("ascii")
        pos += name_len
        (ndim,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        shape = struct.unpack(f"<{ndim}I", data[pos : pos + 4 * ndim])
        pos += 4 * ndim
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(data[pos : pos + size], dtype="<f8").reshape(shape).copy()
        if arr.size * 8 != size:
            raise FormatError(f"{path}: truncated blob for {name!r}")
        pos += size
        blobs[name] = arr

    config = BlockConfig(channels=c, cardinality=g, se_reduction=s)
    stp_shapes = {
        "stp.phi1": (1, 1, m, n),
        "stp.phi2": (1, 1, m, n),
        "stp.rec1": (1, 1, n, m),
        "stp.rec2": (1, 1, n, m),
    }
    for key, shape in stp_shapes.items():
        if key not in blobs:
            raise FormatError(f"{path}: missing parameter {key!r}")
        if blobs[key].shape != shape:
            raise FormatError(f"{path}: {key!r} has shape {blobs[key].shape}, expected {shape}")
    stp = StpOperator(blobs["stp.phi1"], blobs["stp.phi2"], blobs["stp.rec1"], blobs["stp.rec2"])

    block = IstaBlockParams.initialize(config, rho0=1.0, seed=0)
    expected = block.parameters()
    for key, t in expected.items():
        if key not in blobs:
            raise FormatError(f"{path}: missing parameter {key!r}")
        if blobs[key].shape != t.data.shape:
            raise FormatError(
                f"{path}: {key!r} has shape {blobs[key].shape}, expected {t.data.shape}"
            )
        t.data[...] = blobs[key]
    unknown = set(blobs) - set(expected) - set(stp_shapes)
    if unknown:
        raise FormatError(f"{path}: unknown parameters {sorted(unknown)}")
    return Model(stp, block, config)


# ---------------------------------------------------------------------------
# key = value run configuration
# ---------------------------------------------------------------------------


def parse_config(path: Union[str, Path]) -> Dict[str, str]:
    """Flat key = value file; blank lines and # comments are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"{path}:{lineno}: empty key")
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out
