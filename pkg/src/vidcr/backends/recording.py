"""Instrumentation proxies for backends.

RecordingBackend logs every public interface call so tests can prove
which functions a protocol touched.  RestrictedBackend masks names from
a backend's declared surface, for exercising the subset gate.
"""

from __future__ import annotations

from ..errors import SubsetViolation


class RecordingBackend:
    """Delegating proxy that appends called method names to `calls`."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: list = []

    def __getattr__(self, name):
        attr = getattr(self.inner, name)
        if callable(attr) and not name.startswith("_"):
            def recorded(*args, **kwargs):
                self.calls.append(name)
                return attr(*args, **kwargs)
            return recorded
        return attr


class RestrictedBackend:
    """Delegating proxy whose declared surface omits `removed` names."""

    def __init__(self, inner, removed):
        self.inner = inner
        self.removed = frozenset(removed)
        self.provides = inner.provides - self.removed

    def __getattr__(self, name):
        if name in self.removed:
            raise SubsetViolation(f"backend {self.inner.name} does not provide {name!r}")
        return getattr(self.inner, name)
