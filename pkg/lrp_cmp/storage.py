"""Lossless attribution files.

Layout (little-endian)::

    b"ATTR" | version: u8 | ndim: u8 | dims: u32 * ndim | class_index: u32 | logit: f64
    | relevance: f64 * prod(dims) | digest_length: u16 | digest: utf-8
"""

import struct
from pathlib import Path

import numpy as np

from lrp_cmp.errors import IoFailure, MalformedAttribution, MissingFile
from lrp_cmp.lrp import AttributionMap

MAGIC = b"ATTR"
VERSION = 1
FLOAT = np.dtype("<f8")


def encode_attribution(attribution: AttributionMap) -> bytes:
    relevance = attribution.relevance
    digest = attribution.config_digest.encode("utf-8")
    header = struct.pack(f"<4sBB{relevance.ndim}I", MAGIC, VERSION, relevance.ndim, *relevance.shape)
    meta = struct.pack("<Id", attribution.class_index, attribution.output_logit)
    return header + meta + relevance.astype(FLOAT).tobytes() + struct.pack("<H", len(digest)) + digest


def decode_attribution(raw: bytes) -> AttributionMap:
    try:
        magic, version, ndim = struct.unpack_from("<4sBB", raw, 0)
        if magic != MAGIC:
            raise MalformedAttribution(f"Bad magic {magic!r}")
        if version != VERSION:
            raise MalformedAttribution(f"Unsupported attribution version {version}")
        offset = 6
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        class_index, output_logit = struct.unpack_from("<Id", raw, offset)
        offset += 12
        count = int(np.prod(dims))
        values = np.frombuffer(raw, dtype=FLOAT, count=count, offset=offset).reshape(dims)
        offset += count * FLOAT.itemsize
        (length,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        digest = raw[offset : offset + length].decode("utf-8")
        if offset + length != len(raw):
            raise MalformedAttribution("Attribution file has trailing or missing bytes")
    except (struct.error, ValueError, UnicodeDecodeError) as error:
        if isinstance(error, MalformedAttribution):
            raise
        raise MalformedAttribution(f"Truncated or corrupt attribution: {error}") from error
    return AttributionMap(relevance=values, class_index=class_index, output_logit=output_logit, config_digest=digest)


def write_attribution(attribution: AttributionMap, path: Path | str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_attribution(attribution))
    except OSError as error:
        raise IoFailure(f"Cannot write {path}: {error}") from error
    return path


def read_attribution(path: Path | str) -> AttributionMap:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"Attribution file not found: {path}")
    return decode_attribution(path.read_bytes())
