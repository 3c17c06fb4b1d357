"""Backend with 32-bit integer handles addressing a two-layer table.

Handle layout: bits 31..28 kind, bits 27..14 first-level index, bits
13..0 second-level index.  Constants are fixed values, identical in
every session, because the predefined objects are minted in a fixed
order at init.
"""

from __future__ import annotations

from .base import Backend, BackendHandle

KIND_CODES = {"comm": 1, "group": 2, "request": 3, "op": 4, "datatype": 5}

_L1_SHIFT = 14
_L2_MASK = (1 << 14) - 1


def decode_handle(value: int) -> tuple:
    """Split a handle value into (kind code, level-1 index, level-2 index)."""
    return value >> 28, (value >> _L1_SHIFT) & _L2_MASK, value & _L2_MASK


class IntTableBackend(Backend):
    name = "int_table"
    eager_constants = True

    def __init__(self):
        super().__init__()
        self._serials = {k: 0 for k in KIND_CODES}

    def _mint(self, kind: str) -> BackendHandle:
        serial = self._serials[kind]
        self._serials[kind] = serial + 1
        # serial spans the two index fields: high bits level-1, low 14 level-2
        return BackendHandle(32, (KIND_CODES[kind] << 28) | serial)
