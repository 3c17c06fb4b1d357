"""Datatype layout: flatten recipe trees into element maps, pack, unpack.

A buffer is a flat Python list of numbers; a type map is a list of
(position, struct format) pairs describing which buffer slots one
instance of the type touches.  Packing walks `count` consecutive
instances, each advanced by the type's extent, exactly like pointer
arithmetic over a typed C array.
"""

from __future__ import annotations

import struct

from .errors import BufferTooSmall
from .vid import TypeNode

# struct format per named primitive (little-endian applied at pack time)
NAMED_FORMATS = {
    "CHAR": "b",
    "INT8": "b",
    "INT32": "i",
    "INT64": "q",
    "DOUBLE": "d",
}


def flatten(node: TypeNode, resolve) -> tuple:
    """Return (typemap, extent) for one instance of `node`.

    `resolve` maps a child datatype vid to its TypeNode.
    """
    if node.combiner == "named":
        return [(0, NAMED_FORMATS[node.args[0]])], 1
    if node.combiner == "contiguous":
        (count,) = node.args
        child_map, child_ext = flatten(resolve(node.children[0]), resolve)
        out = []
        for i in range(count):
            base = i * child_ext
            out.extend((base + pos, fmt) for pos, fmt in child_map)
        return out, count * child_ext
    if node.combiner == "vector":
        count, blocklen, stride = node.args
        child_map, child_ext = flatten(resolve(node.children[0]), resolve)
        out = []
        for i in range(count):
            for j in range(blocklen):
                base = (i * stride + j) * child_ext
                out.extend((base + pos, fmt) for pos, fmt in child_map)
        extent = ((count - 1) * stride + blocklen) * child_ext if count else 0
        return out, extent
    raise ValueError(f"unknown combiner {node.combiner!r}")


class Layout:
    """Cached pack/unpack plan for (typemap, extent)."""

    __slots__ = ("typemap", "extent", "_struct", "_inst_fmt", "_dense")

    def __init__(self, typemap, extent):
        self.typemap = typemap
        self.extent = extent
        self._inst_fmt = "".join(fmt for _, fmt in typemap)
        self._struct = struct.Struct("<" + self._inst_fmt)
        # dense means one instance reads consecutive slots 0..n-1,
        # allowing bulk slicing instead of position-by-position walks
        self._dense = [pos for pos, _ in typemap] == list(range(len(typemap))) and (
            extent == len(typemap)
        )

    def packed_size(self, count: int) -> int:
        return self._struct.size * count

    def pack(self, buf, offset: int, count: int) -> bytes:
        if self._dense:
            n = count * self.extent
            if offset + n > len(buf):
                raise BufferTooSmall(f"pack needs {offset + n} slots, buffer has {len(buf)}")
            return struct.pack("<" + self._inst_fmt * count, *buf[offset:offset + n])
        parts = []
        for i in range(count):
            base = offset + i * self.extent
            try:
                parts.append(self._struct.pack(*(buf[base + pos] for pos, _ in self.typemap)))
            except IndexError:
                raise BufferTooSmall("pack walked past the end of the buffer") from None
        return b"".join(parts)

    def unpack(self, data: bytes, buf, offset: int, count: int) -> int:
        """Scatter `count` instances from `data` into `buf`; returns bytes read."""
        need = self._struct.size * count
        if len(data) < need:
            # a shorter message is legal; scatter whole instances only
            count = len(data) // self._struct.size
            need = self._struct.size * count
        if self._dense:
            n = count * self.extent
            if offset + n > len(buf):
                raise BufferTooSmall(f"unpack needs {offset + n} slots, buffer has {len(buf)}")
            buf[offset:offset + n] = struct.unpack_from("<" + self._inst_fmt * count, data)
            return need
        pos_of = [pos for pos, _ in self.typemap]
        for i in range(count):
            base = offset + i * self.extent
            values = self._struct.unpack_from(data, i * self._struct.size)
            for pos, val in zip(pos_of, values):
                idx = base + pos
                if idx >= len(buf):
                    raise BufferTooSmall("unpack walked past the end of the buffer")
                buf[idx] = val
        return need


def layout_for(node: TypeNode, resolve) -> Layout:
    typemap, extent = flatten(node, resolve)
    return Layout(typemap, extent)
