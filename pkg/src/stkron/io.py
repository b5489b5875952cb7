"""Binary tensor files, PGM frame import and the model bundle container.

Tensor file layout::

    b"STEN" | version 0x01 | ndim (1 byte) | ndim x uint64 LE dims | float64 LE payload

Dims are (height, width, frames); a 2-D file is a single frame.  The
payload is row-major within a frame, frames consecutive.

Bundle layout::

    b"STKB <version> <manifest bytes>\\n" | JSON manifest | raw array sections

Each array entry of the manifest gives its byte offset (relative to the end
of the manifest), shape and little-endian dtype.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import (BadInputError, BadMagicError, DimOverflowError, FormatError,
                     TruncatedPayloadError, VersionError)

PathLike = Union[str, Path]

TENSOR_MAGIC = b"STEN"
TENSOR_VERSION = 1
MAX_ELEMENTS = 1 << 40

BUNDLE_MAGIC = b"STKB"
BUNDLE_VERSION = 1


@dataclass
class FrameTensor:
    """Grayscale video, stored as (frames, height, width) float64."""

    data: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise BadInputError(f"tensor must be (frames, height, width), got {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def encode_tensor(t: FrameTensor) -> bytes:
    head = TENSOR_MAGIC + bytes([TENSOR_VERSION, 3])
    head += struct.pack("<3Q", t.height, t.width, t.frames)
    return head + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def decode_tensor(buf: bytes, provenance: str = "") -> FrameTensor:
    if len(buf) < 6 or buf[:4] != TENSOR_MAGIC:
        raise BadMagicError("not a tensor file (bad magic)")
    if buf[4] != TENSOR_VERSION:
        raise VersionError(f"unsupported tensor version {buf[4]}")
    ndim = buf[5]
    if ndim not in (2, 3):
        raise FormatError(f"unsupported tensor rank {ndim}")
    head_end = 6 + 8 * ndim
    if len(buf) < head_end:
        raise TruncatedPayloadError("truncated tensor header")
    dims = struct.unpack(f"<{ndim}Q", buf[6:head_end])
    count = 1
    for d in dims:
        count *= d
    if count == 0 or count > MAX_ELEMENTS:
        raise DimOverflowError(f"tensor dims {dims} overflow the element limit")
    need = head_end + 8 * count
    if len(buf) < need:
        raise TruncatedPayloadError(f"tensor payload has {len(buf) - head_end} bytes, expected {8 * count}")
    h, w = dims[0], dims[1]
    frames = dims[2] if ndim == 3 else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=head_end).astype(np.float64)
    return FrameTensor(data.reshape(frames, h, w), provenance)


def write_tensor(t: FrameTensor, path: PathLike) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path: PathLike) -> FrameTensor:
    """Read a tensor file, or import a directory of PGM frames (sorted by name)."""
    p = Path(path)
    if p.is_dir():
        return read_pgm_dir(p)
    try:
        buf = p.read_bytes()
    except OSError as exc:
        raise BadInputError(f"cannot read {p}: {exc}") from exc
    return decode_tensor(buf, str(p))


def _pgm_tokens(buf: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedPayloadError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos


def decode_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary (P5) or ASCII (P2) PGM image scaled to [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise BadMagicError("not a PGM image")
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError("bad PGM header values")
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dt.itemsize
        if len(buf) - pos < need:
            raise TruncatedPayloadError("truncated PGM pixel data")
        pix = np.frombuffer(buf, dtype=dt, count=w * h, offset=pos).astype(np.float64)
    else:
        vals, _ = _pgm_tokens(buf, w * h, pos)
        pix = np.array([int(v) for v in vals], dtype=np.float64)
    return (pix / maxval).reshape(h, w)


def read_pgm_dir(path: PathLike) -> FrameTensor:
    files = sorted(Path(path).glob("*.pgm"))
    if not files:
        raise BadInputError(f"no .pgm frames in {path}")
    frames = [decode_pgm(f.read_bytes()) for f in files]
    if len({f.shape for f in frames}) != 1:
        raise BadInputError("PGM frames differ in size")
    return FrameTensor(np.stack(frames), str(path))


def encode_pgm(frame: np.ndarray) -> bytes:
    """8-bit P5 image of values in [0, 1] (used to export frames)."""
    img = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def write_bundle(path: PathLike, manifest: dict, arrays: Dict[str, np.ndarray]) -> None:
    """Write a manifest plus named arrays (float64 or int64, little-endian)."""
    entries, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = "<i8" if np.issubdtype(a.dtype, np.integer) or a.dtype == bool else "<f8"
        raw = np.ascontiguousarray(a, dtype=dt).tobytes()
        entries[name] = {"offset": offset, "shape": list(a.shape), "dtype": dt}
        chunks.append(raw)
        offset += len(raw)
    body = dict(manifest)
    body["arrays"] = entries
    text = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    head = BUNDLE_MAGIC + f" {BUNDLE_VERSION} {len(text)}\n".encode()
    Path(path).write_bytes(head + text + b"".join(chunks))


def read_bundle(path: PathLike) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise BadInputError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != BUNDLE_MAGIC:
        raise BadMagicError("not a model bundle (bad magic)")
    nl = buf.find(b"\n")
    if nl < 0:
        raise TruncatedPayloadError("truncated bundle header")
    try:
        _, ver, size = buf[:nl].split(b" ")
        ver, size = int(ver), int(size)
    except ValueError as exc:
        raise FormatError("malformed bundle header") from exc
    if ver != BUNDLE_VERSION:
        raise VersionError(f"bundle version {ver} is not supported (expected {BUNDLE_VERSION})")
    start = nl + 1
    if len(buf) < start + size:
        raise TruncatedPayloadError("truncated bundle manifest")
    try:
        manifest = json.loads(buf[start:start + size])
    except ValueError as exc:
        raise FormatError("bundle manifest is not valid JSON") from exc
    base = start + size
    arrays = {}
    for name, e in manifest.pop("arrays", {}).items():
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = base + e["offset"] + 8 * count
        if end > len(buf):
            raise TruncatedPayloadError(f"truncated bundle section {name!r}")
        arrays[name] = np.frombuffer(buf, dtype=e["dtype"], count=count,
                                     offset=base + e["offset"]).reshape(e["shape"]).copy()
    return manifest, arrays
