"""Verification that a backend provides the core checkpoint subset.

Three categories are required of every backend: probe/receive/test to
detect and complete pending messages, the object-decoding calls needed
at reconstruction, and the send/receive/alltoall calls used to
coordinate ranks.  Collectives beyond those are extensions and are
reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import SubsetViolation
from ..vid import ANY_SOURCE, ANY_TAG
from .base import EXTENSION_CALLS, Backend

CATEGORY_CALLS = {
    1: ("iprobe", "recv", "test"),
    2: ("comm_group", "group_translate_ranks", "type_get_envelope", "type_get_contents"),
    3: ("send", "recv", "alltoall"),
}


@dataclass
class SubsetReport:
    categories: dict = field(default_factory=dict)  # cat -> (ok, detail)
    extensions: dict = field(default_factory=dict)  # name -> provided

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.categories.values())


def drain_primitives_check(b: Backend) -> SubsetReport:
    """Probe presence and basic semantics of the required subset.

    Must be called on an initialized backend; when world_size > 1 all
    ranks must run it concurrently (category 3 exercises a world
    alltoall).  Raises SubsetViolation naming the first missing
    function; semantic failures are reported, not raised.
    """
    report = SubsetReport()
    for cat, names in CATEGORY_CALLS.items():
        missing = [n for n in names if n not in b.provides]
        if missing:
            report.categories[cat] = (False, missing[0])
            raise SubsetViolation(
                f"backend {b.name} category {cat} lacks {missing[0]!r}"
            )
        report.categories[cat] = (True, None)
    report.extensions = {n: n in b.provides for n in sorted(EXTENSION_CALLS)}

    int64 = b.resolve_constant("INT64")
    me = b.comm_self()

    # category 1: a sent message becomes probe-visible, then receivable;
    # test on a completed isend reports done
    probe_tag = 9990
    b.send(b"\x01" * 8, 1, int64, 0, probe_tag, me)
    flag, st = b.iprobe(ANY_SOURCE, ANY_TAG, me)
    ok = flag and st.tag == probe_tag and st.nbytes == 8
    payload, st2 = b.recv(ANY_SOURCE, probe_tag, me)
    ok = ok and payload == b"\x01" * 8
    req = b.isend(b"\x02" * 8, 1, int64, 0, probe_tag, me)
    done, _ = b.test(req)
    ok = ok and done
    b.recv(0, probe_tag, me)
    report.categories[1] = (ok, None if ok else "pt2pt semantics")

    # category 2: decode a communicator and a derived datatype
    world = b.comm_world()
    wg = b.comm_group(world)
    translated = b.group_translate_ranks(wg, list(range(b.world_size)), wg)
    ok = translated == list(range(b.world_size))
    t = b.type_contiguous(3, int64)
    combiner, ints = b.type_get_envelope(t)
    ints2, children = b.type_get_contents(t)
    ok = ok and combiner == "contiguous" and ints == (3,) and ints2 == (3,) and children == (int64,)
    b.type_free(t)
    report.categories[2] = (ok, None if ok else "decode semantics")

    # category 3: world alltoall round-trips one item per peer
    received = b.alltoall([b.my_rank] * b.world_size, world)
    ok = received == list(range(b.world_size))
    report.categories[3] = (ok, None if ok else "alltoall semantics")
    return report
