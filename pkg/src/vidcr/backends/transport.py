"""Shared in-process message transport connecting rank contexts.

Channels are keyed by (src, dst, comm context, tag) and are FIFO per
key.  The transport stands in for the network: it lives entirely below
the checkpoint line and none of its state is ever serialized.  A small
out-of-band control lane carries checkpoint-coordination signals.

Negative tags are reserved for backend-internal traffic (collectives);
wildcard probes and receives never match them.
"""

from __future__ import annotations

import threading
from collections import deque

from ..vid import ANY_SOURCE, ANY_TAG


class Transport:
    def __init__(self, world_size: int):
        self.world_size = world_size
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._channels: dict = {}   # (src, dst, ctx, tag) -> deque[(arrival, payload)]
        self._arrivals = 0
        self._control = {r: deque() for r in range(world_size)}

    # --- data lane ---

    def send(self, src: int, dst: int, ctx, tag: int, payload) -> None:
        with self._cond:
            key = (src, dst, ctx, tag)
            q = self._channels.get(key)
            if q is None:
                q = self._channels[key] = deque()
            self._arrivals += 1
            q.append((self._arrivals, payload))
            self._cond.notify_all()

    def _candidates(self, dst: int, ctx, source: int, tag: int):
        """Yield (arrival, key) heads of channels matching the query."""
        for key, q in self._channels.items():
            if not q:
                continue
            s, d, c, t = key
            if d != dst or c != ctx:
                continue
            if source != ANY_SOURCE and s != source:
                continue
            if tag == ANY_TAG:
                if t < 0:
                    continue
            elif t != tag:
                continue
            yield q[0][0], key

    def _match(self, dst, ctx, source, tag):
        best = min(self._candidates(dst, ctx, source, tag), default=None)
        return best[1] if best else None

    def probe(self, dst: int, ctx, source: int, tag: int):
        """Non-destructive match; returns (src, tag, nbytes) or None."""
        with self._lock:
            key = self._match(dst, ctx, source, tag)
            if key is None:
                return None
            payload = self._channels[key][0][1]
            nbytes = len(payload) if isinstance(payload, (bytes, bytearray)) else 0
            return key[0], key[3], nbytes

    def try_recv(self, dst: int, ctx, source: int, tag: int):
        """Dequeue the oldest match; returns (src, tag, payload) or None."""
        with self._lock:
            return self._pop(dst, ctx, source, tag)

    def recv(self, dst: int, ctx, source: int, tag: int, timeout: float = 60.0):
        """Blocking dequeue; raises TimeoutError on a stuck wait."""
        with self._cond:
            while True:
                got = self._pop(dst, ctx, source, tag)
                if got is not None:
                    return got
                if not self._cond.wait(timeout):
                    raise TimeoutError(
                        f"rank {dst} recv(src={source}, tag={tag}) stalled"
                    )

    def _pop(self, dst, ctx, source, tag):
        key = self._match(dst, ctx, source, tag)
        if key is None:
            return None
        _, payload = self._channels[key].popleft()
        return key[0], key[3], payload

    # --- introspection (tests and drain soundness checks) ---

    def pending_total(self, app_only: bool = True) -> int:
        with self._lock:
            return sum(
                len(q)
                for (s, d, c, t), q in self._channels.items()
                if not app_only or t >= 0
            )

    def pending_for(self, dst: int, ctx=None, app_only: bool = True) -> int:
        with self._lock:
            n = 0
            for (s, d, c, t), q in self._channels.items():
                if d != dst:
                    continue
                if ctx is not None and c != ctx:
                    continue
                if app_only and t < 0:
                    continue
                n += len(q)
            return n

    # --- control lane ---

    def post_control(self, dst: int, msg) -> None:
        with self._cond:
            self._control[dst].append(msg)
            self._cond.notify_all()

    def poll_control(self, rank: int):
        with self._lock:
            q = self._control[rank]
            return q.popleft() if q else None
