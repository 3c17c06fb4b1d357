"""Model backends and the shared transport."""

from ..errors import BackendInitFailure
from .base import (
    EXTENSION_CALLS,
    FULL_SURFACE,
    REQUIRED_CALLS,
    Backend,
    BackendHandle,
    Status,
)
from .int_table import IntTableBackend
from .lazy_const import LazyConstBackend
from .recording import RecordingBackend, RestrictedBackend
from .subset import SubsetReport, drain_primitives_check
from .transport import Transport
from .word_handle import WordHandleBackend

BACKENDS = {
    "int_table": IntTableBackend,
    "word_handle": WordHandleBackend,
    "lazy_const": LazyConstBackend,
}


def make_backend(name: str) -> Backend:
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise BackendInitFailure(f"unknown backend {name!r}") from None
    return cls()


__all__ = [
    "BACKENDS",
    "Backend",
    "BackendHandle",
    "EXTENSION_CALLS",
    "FULL_SURFACE",
    "IntTableBackend",
    "LazyConstBackend",
    "RecordingBackend",
    "RestrictedBackend",
    "REQUIRED_CALLS",
    "Status",
    "SubsetReport",
    "Transport",
    "WordHandleBackend",
    "drain_primitives_check",
    "make_backend",
]
