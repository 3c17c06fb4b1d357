"""Backend with full machine-word handles referencing private records.

Every handle mixes in a per-session nonce, so constants resolve to
different values in different sessions (and a handle leaked across
instances is detected instead of silently misused).  This models MPI
libraries whose object handles are pointers.
"""

from __future__ import annotations

import itertools

from .base import Backend, BackendHandle


class WordHandleBackend(Backend):
    name = "word_handle"
    eager_constants = True

    def __init__(self):
        super().__init__()
        self._serial = itertools.count(1)

    def _mint(self, kind: str) -> BackendHandle:
        return BackendHandle(64, (self._nonce << 32) | next(self._serial))
