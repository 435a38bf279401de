"""Serialized form of a compressed multi-view group.

Layout (all integers big-endian)::

    magic 'LDMB' | version u8 | variant u8 | K u8 | H u32 | W u32 | M u16 | N u16
    per view: z_len u32 | z_bytes | y_len u32 | y_bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAGIC = b"LDMB"
VERSION = 1
_HEADER = struct.Struct(">4sBBBIIHH")
_LEN = struct.Struct(">I")
HEADER_BYTES = _HEADER.size


class ContainerError(ValueError):
    """Malformed or truncated bitstream."""


@dataclass
class BitstreamContainer:
    variant: int
    height: int
    width: int
    M: int
    N: int
    views: list[tuple[bytes, bytes]] = field(default_factory=list)
    version: int = VERSION
    declared_k: int | None = None

    @property
    def K(self) -> int:
        return len(self.views)

    @property
    def complete(self) -> bool:
        return self.declared_k is None or self.declared_k == self.K

    def to_bytes(self) -> bytes:
        if not 0 < self.K < 256:
            raise ContainerError(f"cannot store {self.K} views")
        parts = [_HEADER.pack(MAGIC, self.version, self.variant, self.K,
                              self.height, self.width, self.M, self.N)]
        for z, y in self.views:
            parts += [_LEN.pack(len(z)), z, _LEN.pack(len(y)), y]
        return b"".join(parts)

    def __len__(self) -> int:
        return HEADER_BYTES + sum(8 + len(z) + len(y) for z, y in self.views)

    @classmethod
    def from_bytes(cls, data: bytes, partial: bool = False) -> "BitstreamContainer":
        """Parse a container; with ``partial`` keep the views that are intact."""
        if len(data) < HEADER_BYTES:
            raise ContainerError(f"bitstream truncated: {len(data)} bytes, header needs {HEADER_BYTES}")
        magic, version, variant, k, h, w, m, n = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"unsupported bitstream version {version}")
        pos = HEADER_BYTES
        views = []
        try:
            for i in range(k):
                chunks = []
                for name in ("z", "y"):
                    if pos + 4 > len(data):
                        raise ContainerError(f"view {i}: missing {name} substream length")
                    (size,) = _LEN.unpack_from(data, pos)
                    pos += 4
                    if pos + size > len(data):
                        raise ContainerError(f"view {i}: {name} substream truncated")
                    chunks.append(bytes(data[pos: pos + size]))
                    pos += size
                views.append((chunks[0], chunks[1]))
        except ContainerError:
            if not partial:
                raise
        else:
            if pos != len(data):
                raise ContainerError(f"{len(data) - pos} trailing bytes after last view")
        return cls(variant=variant, height=h, width=w, M=m, N=n, views=views,
                   version=version, declared_k=k)
