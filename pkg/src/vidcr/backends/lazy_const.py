"""Backend with enum-style primitive datatypes and lazy constants.

Primitive datatype constants are small discrete code values, and
designated aliases share one value (INT8 and CHAR resolve to the same
handle).  Nothing is entered into the constant table until the first
resolution request, which triggers materialization of that constant.
Non-primitive objects get word-sized, nonce-mixed handles.

This backend is also a deliberate subset implementation: `gather` is
outside its declared surface and is rejected rather than emulated.
"""

from __future__ import annotations

import itertools

from .base import (
    FULL_SURFACE,
    NAMED_OPS,
    Backend,
    BackendHandle,
    _OpRec,
    _TypeRec,
)

# fixed primitive codes; CHAR aliases INT8
PRIMITIVE_CODES = {
    "CHAR": 0x11,
    "INT8": 0x11,
    "INT32": 0x12,
    "INT64": 0x13,
    "DOUBLE": 0x14,
}


class LazyConstBackend(Backend):
    name = "lazy_const"
    eager_constants = False
    provides = FULL_SURFACE - frozenset({"gather"})

    def __init__(self):
        super().__init__()
        self._serial = itertools.count(1)

    def _mint(self, kind: str) -> BackendHandle:
        return BackendHandle(64, (self._nonce << 32) | next(self._serial))

    def _install_constants(self) -> None:
        # binding is deferred; resolve_constant materializes per name
        pass

    def _check_ownership(self, h: BackendHandle) -> None:
        if h.width == 32:
            if h.value not in PRIMITIVE_CODES.values():
                super()._check_ownership(h)
            return
        super()._check_ownership(h)

    def resolve_constant(self, name: str) -> BackendHandle:
        h = self._constants.get(name)
        if h is not None:
            return h
        h = self._materialize(name)
        self._constants[name] = h
        return h

    def _materialize(self, name: str) -> BackendHandle:
        if name in PRIMITIVE_CODES:
            code = PRIMITIVE_CODES[name]
            if code not in self._objects:
                self._objects[code] = _TypeRec("named", (), ())
            return BackendHandle(32, code)
        if name == "COMM_WORLD":
            return self._world
        if name == "COMM_SELF":
            return self._self
        if name in NAMED_OPS:
            fn, comm = NAMED_OPS[name]
            return self._put("op", _OpRec(fn, comm))
        return super().resolve_constant(name)  # raises UnknownConstant
