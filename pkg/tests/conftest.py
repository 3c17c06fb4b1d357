import struct
from functools import reduce

import pytest

from vidcr.backends.transport import Transport
from vidcr.harness import _run_ranks
from vidcr.wrappers import init_rank


def fnv_oracle(members) -> int:
    """Independent FNV-1a reference: bytes via struct, fold via reduce."""
    data = b"".join(struct.pack("<I", m) for m in members)
    return reduce(lambda h, b: ((h ^ b) * 16777619) & 0xFFFFFFFF, data, 2166136261)


def run_world(world_size: int, backend: str, rank_fn, backend_factory=None) -> list:
    """Run rank_fn(ctx) on `world_size` fresh contexts, one thread each.

    Returns the per-rank return values.
    """
    transport = Transport(world_size)
    results = [None] * world_size

    def make(r):
        def body():
            ctx = init_rank(backend, world_size, r, transport, backend_factory)
            results[r] = rank_fn(ctx)
        return body

    _run_ranks([make(r) for r in range(world_size)])
    return results


@pytest.fixture
def transport1():
    return Transport(1)


@pytest.fixture
def ctx1(transport1):
    return init_rank("int_table", 1, 0, transport1)
