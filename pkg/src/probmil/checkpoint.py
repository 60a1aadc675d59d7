"""Binary checkpoint files for :class:`~probmil.model.MilNetwork`.

Layout (all integers and floats little-endian)::

    offset  size      field
    0       4         magic b"MILN"
    4       4  u32    format version (1)
    8       4  u32    feature dim M
    12      4  u32    number of classes K
    16      4  u32    number of embedding layers D
    20      4*D u32   hidden sizes
    ..      1  u8     phi tag (0 relu, 1 sigmoid, 2 softmax)
    ..      1  u8     pooling tag (0 collective, 1 max, 2 weighted, 3 attention)
    ..      2         reserved, zero
    ..      8  f64    dropout rate
    ..      ...f64    parameters in declaration order, each row-major:
                      W0, b0, ..., W_{D-1}, b_{D-1}, W_f, b_f, W_v, b_v

Shapes follow from the header, so the file carries no per-matrix framing.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .model import (
    PHIS,
    Attention,
    Collective,
    MaxSelection,
    MilNetwork,
    WeightedCollective,
    parse_strategy,
)

MAGIC = b"MILN"
VERSION = 1

_POOL_TAGS = {"collective": 0, "max": 1, "weighted": 2, "attention": 3}
_POOL_BY_TAG = {0: Collective, 1: MaxSelection, 2: WeightedCollective, 3: Attention}


class CheckpointError(ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def _shapes(M, K, hidden):
    shapes = []
    prev = M
    for h in hidden:
        shapes += [(prev, h), (1, h)]
        prev = h
    return shapes + [(prev, K), (1, K), (prev, K), (1, K)]


def to_bytes(net: MilNetwork, strategy="attention") -> bytes:
    strategy = parse_strategy(strategy)
    hidden = net.hidden
    head = struct.pack("<4sIIII", MAGIC, VERSION, net.feature_dim, net.num_classes, len(hidden))
    head += struct.pack(f"<{len(hidden)}I", *hidden)
    head += struct.pack("<BBHd", PHIS.index(net.phi), _POOL_TAGS[strategy.name], 0, net.dropout)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.parameters())
    return head + body


def from_bytes(buf: bytes):
    """Parse a checkpoint; returns ``(net, strategy)``."""

    def need(offset, n, what):
        if offset + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}", offset)

    need(0, 4, "magic")
    magic = buf[:4]
    if magic != MAGIC:
        shown = magic.decode("ascii", "replace")
        raise CheckpointError(f"bad magic: {shown} is not {MAGIC.decode()}", 0)
    need(4, 16, "header")
    version, M, K, D = struct.unpack_from("<IIII", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    off = 20
    need(off, 4 * D, "hidden sizes")
    hidden = list(struct.unpack_from(f"<{D}I", buf, off))
    off += 4 * D
    need(off, 12, "model options")
    phi_tag, pool_tag, _, dropout = struct.unpack_from("<BBHd", buf, off)
    if phi_tag >= len(PHIS):
        raise CheckpointError(f"unknown phi tag {phi_tag}", off)
    if pool_tag not in _POOL_BY_TAG:
        raise CheckpointError(f"unknown pooling tag {pool_tag}", off + 1)
    off += 12
    params = []
    for shape in _shapes(M, K, hidden):
        n = shape[0] * shape[1] * 8
        need(off, n, f"parameter block of shape {shape}")
        params.append(np.frombuffer(buf, dtype="<f8", count=n // 8, offset=off)
                      .astype(np.float64).reshape(shape))
        off += n
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after parameters", off)
    D2 = 2 * D
    net = MilNetwork(params[0:D2:2], params[1:D2:2], *params[D2:], dropout=dropout,
                     phi=PHIS[phi_tag])
    return net, _POOL_BY_TAG[pool_tag]()


def save_checkpoint(path, net: MilNetwork, strategy="attention"):
    with open(path, "wb") as fh:
        fh.write(to_bytes(net, strategy))


def load_checkpoint(path):
    with open(os.fspath(path), "rb") as fh:
        return from_bytes(fh.read())
