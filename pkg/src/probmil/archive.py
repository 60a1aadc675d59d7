"""Bag-archive files (``.milb``).

All fields little-endian::

    header   magic b"MILB" | u32 version (1) | u32 K | u32 M | u64 N
    records  N times:
               u32 id length | id bytes (UTF-8)
               u32 L
               ceil(K/8) bytes label bitmap, class k is bit (k % 8) of byte (k // 8)
               L*M float32 features, row-major
    index    N u64 absolute offsets of the records
    footer   u64 absolute offset of the index block
"""

from __future__ import annotations

import struct

import numpy as np

from .data import Bag, Dataset

MAGIC = b"MILB"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")


class ArchiveError(ValueError):
    """Malformed archive; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class BadMagicError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class TruncatedError(ArchiveError):
    pass


def _label_bytes(label: np.ndarray) -> bytes:
    return np.packbits(label.astype(np.uint8), bitorder="little").tobytes()


def to_bytes(ds: Dataset) -> bytes:
    K, M = ds.num_classes, ds.feature_dim
    parts = [HEADER.pack(MAGIC, VERSION, K, M, len(ds))]
    offsets = []
    pos = HEADER.size
    for bag in ds.bags:
        ident = bag.id.encode("utf-8")
        rec = (struct.pack("<I", len(ident)) + ident
               + struct.pack("<I", bag.size)
               + _label_bytes(bag.label)
               + np.ascontiguousarray(bag.instances, dtype="<f4").tobytes())
        offsets.append(pos)
        parts.append(rec)
        pos += len(rec)
    parts.append(np.asarray(offsets, dtype="<u8").tobytes())
    parts.append(struct.pack("<Q", pos))
    return b"".join(parts)


def write_archive(ds: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ds))


def read_header(buf: bytes) -> dict:
    if len(buf) < 4:
        raise TruncatedError("file too short for magic", len(buf))
    if buf[:4] != MAGIC:
        shown = buf[:4].decode("ascii", "replace")
        raise BadMagicError(f"bad magic: {shown} is not {MAGIC.decode()}", 0)
    if len(buf) < HEADER.size:
        raise TruncatedError("truncated header", len(buf))
    _, version, K, M, N = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionError(f"unsupported archive version {version}", 4)
    return {"version": version, "num_classes": K, "feature_dim": M, "num_bags": N}


def from_bytes(buf: bytes) -> Dataset:
    head = read_header(buf)
    K, M, N = head["num_classes"], head["feature_dim"], head["num_bags"]
    nlab = (K + 7) // 8
    off = HEADER.size

    def need(n, what):
        if off + n > len(buf):
            raise TruncatedError(f"truncated while reading {what}", off)

    bags, offsets = [], []
    for n in range(N):
        offsets.append(off)
        need(4, f"id length of record {n}")
        (id_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(id_len, f"id of record {n}")
        try:
            ident = buf[off:off + id_len].decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError(f"record {n} id is not valid UTF-8", off) from None
        off += id_len
        need(4, f"instance count of record {n}")
        (L,) = struct.unpack_from("<I", buf, off)
        if L < 1:
            raise ArchiveError(f"record {n} has no instances", off)
        off += 4
        need(nlab, f"label bitmap of record {n}")
        bits = np.unpackbits(np.frombuffer(buf, np.uint8, nlab, off), bitorder="little")
        off += nlab
        need(4 * L * M, f"features of record {n}")
        x = np.frombuffer(buf, "<f4", L * M, off).astype(np.float32).reshape(L, M)
        off += 4 * L * M
        bags.append(Bag(x, bits[:K].astype(bool), ident))

    index_at = off
    need(8 * N + 8, "index block and footer")
    index = np.frombuffer(buf, "<u8", N, off)
    off += 8 * N
    (footer,) = struct.unpack_from("<Q", buf, off)
    if footer != index_at:
        raise ArchiveError(f"footer points at {footer}, index block is at {index_at}", off)
    if not np.array_equal(index, np.asarray(offsets, dtype=np.uint64)):
        raise ArchiveError("record index does not match record positions", index_at)
    off += 8
    if off != len(buf):
        raise ArchiveError(f"{len(buf) - off} trailing bytes after footer", off)
    return Dataset(bags, K, M)


def read_archive(path) -> Dataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
