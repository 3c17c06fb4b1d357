import threading
import time

import pytest

from vidcr.backends.transport import Transport
from vidcr.vid import ANY_SOURCE, ANY_TAG

CTX = ("world", 0)


def test_fifo_per_channel():
    t = Transport(2)
    for i in range(5):
        t.send(0, 1, CTX, 3, f"m{i}".encode())
    got = [t.try_recv(1, CTX, 0, 3)[2] for _ in range(5)]
    assert got == [b"m0", b"m1", b"m2", b"m3", b"m4"]
    assert t.try_recv(1, CTX, 0, 3) is None


def test_wildcard_match_takes_oldest_arrival():
    t = Transport(3)
    t.send(2, 0, CTX, 7, b"late-tag-first")
    t.send(1, 0, CTX, 5, b"second")
    src, tag, payload = t.try_recv(0, CTX, ANY_SOURCE, ANY_TAG)
    assert (src, tag, payload) == (2, 7, b"late-tag-first")
    src, tag, payload = t.try_recv(0, CTX, ANY_SOURCE, ANY_TAG)
    assert (src, tag, payload) == (1, 5, b"second")


def test_probe_is_non_destructive():
    t = Transport(2)
    t.send(0, 1, CTX, 2, b"xyz")
    assert t.probe(1, CTX, ANY_SOURCE, ANY_TAG) == (0, 2, 3)
    assert t.probe(1, CTX, ANY_SOURCE, ANY_TAG) == (0, 2, 3)
    assert t.try_recv(1, CTX, 0, 2)[2] == b"xyz"
    assert t.probe(1, CTX, ANY_SOURCE, ANY_TAG) is None


def test_wildcards_never_match_internal_tags():
    t = Transport(2)
    t.send(0, 1, CTX, -3, b"internal")
    assert t.probe(1, CTX, ANY_SOURCE, ANY_TAG) is None
    assert t.try_recv(1, CTX, ANY_SOURCE, ANY_TAG) is None
    # exact internal tag still reachable
    assert t.try_recv(1, CTX, 0, -3)[2] == b"internal"


def test_context_isolation():
    t = Transport(2)
    other = ("world", 1)
    t.send(0, 1, CTX, 4, b"a")
    assert t.try_recv(1, other, 0, 4) is None
    assert t.try_recv(1, CTX, 0, 4)[2] == b"a"


def test_blocking_recv_wakes_on_send():
    t = Transport(2)
    out = []

    def receiver():
        out.append(t.recv(1, CTX, 0, 9))

    th = threading.Thread(target=receiver, daemon=True)
    th.start()
    time.sleep(0.02)
    t.send(0, 1, CTX, 9, b"wake")
    th.join(5)
    assert not th.is_alive()
    assert out == [(0, 9, b"wake")]


def test_blocking_recv_times_out():
    t = Transport(1)
    with pytest.raises(TimeoutError):
        t.recv(0, CTX, 0, 1, timeout=0.05)


def test_pending_counts():
    t = Transport(2)
    t.send(0, 1, CTX, 1, b"a")
    t.send(0, 1, CTX, -2, b"internal")
    t.send(1, 0, CTX, 2, b"b")
    assert t.pending_total() == 2
    assert t.pending_total(app_only=False) == 3
    assert t.pending_for(1, CTX) == 1
    assert t.pending_for(0) == 1


def test_control_lane():
    t = Transport(2)
    assert t.poll_control(0) is None
    t.post_control(0, "checkpoint")
    t.post_control(0, "x")
    assert t.poll_control(0) == "checkpoint"
    assert t.poll_control(0) == "x"
    assert t.poll_control(0) is None
    assert t.poll_control(1) is None
