"""Backend abstraction: the "lower half" the wrappers call into.

A backend owns its native object records and mints opaque handles for
them; handle width and encoding are backend-private and differ across
the three models.  All communication rides the shared in-process
transport.  None of a backend's state survives a checkpoint: a restart
constructs a fresh instance and every object is re-created.

Every backend must provide the core function subset (probe/receive/test
for draining, object decoding for reconstruction, and send/alltoall for
coordination); collectives beyond that are declared extensions.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from typing import Optional

from .. import reductions
from ..errors import (
    CommitTwice,
    InvalidHandle,
    SubsetViolation,
    UnknownConstant,
    UnknownFunction,
)
from ..vid import ANY_SOURCE, ANY_TAG, group_id
from .transport import Transport

# internal tag lanes; app tags are >= 0 and wildcards never match these
_TAG_BARRIER = -2
_TAG_ALLTOALL = -3
_TAG_REDUCE = -4
_TAG_RESULT = -5
_TAG_BCAST = -6
_TAG_SPLIT = -7

REQUIRED_CALLS = frozenset(
    {
        # category 1: detect and complete pending messages
        "iprobe",
        "recv",
        "test",
        # category 2: decode objects for reconstruction
        "comm_group",
        "group_translate_ranks",
        "type_get_envelope",
        "type_get_contents",
        # category 3: coordination among ranks
        "send",
        "alltoall",
    }
)

EXTENSION_CALLS = frozenset({"barrier", "allreduce", "bcast", "gather"})

FULL_SURFACE = REQUIRED_CALLS | EXTENSION_CALLS | frozenset(
    {
        "init",
        "finalize",
        "resolve_constant",
        "comm_world",
        "comm_self",
        "comm_split",
        "comm_dup",
        "comm_create",
        "comm_rank",
        "comm_size",
        "comm_free",
        "group_incl",
        "group_free",
        "isend",
        "irecv",
        "wait",
        "type_contiguous",
        "type_vector",
        "type_commit",
        "type_free",
        "op_create",
        "op_free",
    }
)

NAMED_TYPES = ("CHAR", "INT8", "INT32", "INT64", "DOUBLE")
NAMED_OPS = {"OP_SUM": ("sum", True), "OP_PROD": ("prod", True)}


@dataclass(frozen=True)
class BackendHandle:
    """Backend-native handle: an unsigned value of backend-chosen width."""

    width: int
    value: int


@dataclass
class Status:
    """Completion record: source comm rank, tag, payload byte count."""

    source: int
    tag: int
    nbytes: int


class _CommRec:
    __slots__ = ("members", "ctx", "my_index")

    def __init__(self, members, ctx, my_index):
        self.members = members
        self.ctx = ctx
        self.my_index = my_index


class _GroupRec:
    __slots__ = ("members",)

    def __init__(self, members):
        self.members = members


class _TypeRec:
    __slots__ = ("combiner", "ints", "children", "committed")

    def __init__(self, combiner, ints, children):
        self.combiner = combiner
        self.ints = ints
        self.children = children
        self.committed = False


class _OpRec:
    __slots__ = ("fn_name", "commutative")

    def __init__(self, fn_name, commutative):
        self.fn_name = fn_name
        self.commutative = commutative


class _ReqRec:
    __slots__ = ("kind", "source", "tag", "comm_value", "sink", "done", "status")

    def __init__(self, kind, source, tag, comm_value, sink=None):
        self.kind = kind
        self.source = source
        self.tag = tag
        self.comm_value = comm_value
        self.sink = sink
        self.done = False
        self.status = None


class Backend:
    """Shared implementation; subclasses define handle minting and
    constant-resolution policy."""

    name = "base"
    eager_constants = True
    provides = FULL_SURFACE

    def __init__(self):
        self._objects: dict = {}        # handle value -> record
        self._constants: dict = {}      # constant name -> BackendHandle
        self._ctx_seq: dict = {}        # member tuple -> next duplicate index
        self._nonce = random.getrandbits(32)
        self.transport: Optional[Transport] = None
        self.world_size = 0
        self.my_rank = -1
        self._world: Optional[BackendHandle] = None
        self._self: Optional[BackendHandle] = None

    # --- lifecycle ---

    def init(self, world_size: int, my_rank: int, transport: Transport) -> None:
        missing = sorted(REQUIRED_CALLS - self.provides)
        if missing:
            raise SubsetViolation(f"backend {self.name} lacks required call {missing[0]!r}")
        self.world_size = world_size
        self.my_rank = my_rank
        self.transport = transport
        world = tuple(range(world_size))
        self._world = self._new_comm(world)
        self._self = self._new_comm((my_rank,))
        self._install_constants()

    def finalize(self) -> None:
        self._objects.clear()
        self._constants.clear()

    def _install_constants(self) -> None:
        """Populate the constant table; lazy backends defer this."""
        self._constants["COMM_WORLD"] = self._world
        self._constants["COMM_SELF"] = self._self
        for name in NAMED_TYPES:
            self._constants[name] = self._new_named_type(name)
        for cname, (fn, comm) in NAMED_OPS.items():
            self._constants[cname] = self._put("op", _OpRec(fn, comm))

    def _new_named_type(self, name: str) -> BackendHandle:
        return self._put("datatype", _TypeRec("named", (), ()))

    def resolve_constant(self, name: str) -> BackendHandle:
        try:
            return self._constants[name]
        except KeyError:
            raise UnknownConstant(f"unknown constant {name!r}") from None

    # --- handle plumbing (subclass hooks) ---

    def _mint(self, kind: str) -> BackendHandle:
        raise NotImplementedError

    def _put(self, kind: str, rec) -> BackendHandle:
        h = self._mint(kind)
        self._objects[h.value] = rec
        return h

    def _lookup(self, h: BackendHandle, cls, what: str):
        if not isinstance(h, BackendHandle):
            raise InvalidHandle(f"{what}: not a backend handle: {h!r}")
        self._check_ownership(h)
        rec = self._objects.get(h.value)
        if rec is None or not isinstance(rec, cls):
            raise InvalidHandle(f"{what}: stale or wrong-kind handle {h.value:#x}")
        return rec

    def _check_ownership(self, h: BackendHandle) -> None:
        if h.width == 64 and (h.value >> 32) != self._nonce:
            raise InvalidHandle(
                f"handle {h.value:#x} was minted by a different backend instance"
            )

    def _drop(self, h: BackendHandle, cls, what: str) -> None:
        self._lookup(h, cls, what)
        del self._objects[h.value]

    def _require(self, call: str) -> None:
        if call not in self.provides:
            raise SubsetViolation(f"backend {self.name} does not provide {call!r}")

    # --- communicators ---

    def _new_comm(self, members: tuple) -> BackendHandle:
        seq = self._ctx_seq.get(members, 0)
        self._ctx_seq[members] = seq + 1
        ctx = (group_id(members) << 32) | seq
        my_index = members.index(self.my_rank)
        return self._put("comm", _CommRec(members, ctx, my_index))

    def comm_world(self) -> BackendHandle:
        return self._world

    def comm_self(self) -> BackendHandle:
        return self._self

    def comm_rank(self, h: BackendHandle) -> int:
        return self._lookup(h, _CommRec, "comm_rank").my_index

    def comm_size(self, h: BackendHandle) -> int:
        return len(self._lookup(h, _CommRec, "comm_size").members)

    def comm_dup(self, h: BackendHandle) -> BackendHandle:
        rec = self._lookup(h, _CommRec, "comm_dup")
        return self._new_comm(rec.members)

    def comm_split(self, h: BackendHandle, color: int, key: int) -> BackendHandle:
        rec = self._lookup(h, _CommRec, "comm_split")
        if color < 0:
            raise ValueError("split color must be non-negative")
        entries = self._exchange(rec, _TAG_SPLIT, (color, key, self.my_rank))
        mine = sorted(
            ((k, old, wr) for old, (c, k, wr) in enumerate(entries) if c == color),
        )
        members = tuple(wr for _, _, wr in mine)
        return self._new_comm(members)

    def comm_create(self, h: BackendHandle, group_h: BackendHandle) -> BackendHandle:
        self._lookup(h, _CommRec, "comm_create")
        grp = self._lookup(group_h, _GroupRec, "comm_create")
        if self.my_rank not in grp.members:
            raise ValueError("comm_create caller is not in the group")
        return self._new_comm(tuple(grp.members))

    def comm_free(self, h: BackendHandle) -> None:
        self._drop(h, _CommRec, "comm_free")

    def comm_group(self, h: BackendHandle) -> BackendHandle:
        rec = self._lookup(h, _CommRec, "comm_group")
        return self._put("group", _GroupRec(tuple(rec.members)))

    # --- groups ---

    def group_incl(self, gh: BackendHandle, ranks) -> BackendHandle:
        rec = self._lookup(gh, _GroupRec, "group_incl")
        members = tuple(rec.members[r] for r in ranks)
        return self._put("group", _GroupRec(members))

    def group_translate_ranks(self, gh: BackendHandle, ranks, target_gh: BackendHandle):
        rec = self._lookup(gh, _GroupRec, "group_translate_ranks")
        tgt = self._lookup(target_gh, _GroupRec, "group_translate_ranks")
        index = {wr: i for i, wr in enumerate(tgt.members)}
        return [index.get(rec.members[r], -1) for r in ranks]

    def group_free(self, gh: BackendHandle) -> None:
        self._drop(gh, _GroupRec, "group_free")

    # --- point-to-point ---

    def send(self, buf: bytes, count: int, type_h: BackendHandle, dest: int,
             tag: int, comm_h: BackendHandle) -> None:
        self._lookup(type_h, _TypeRec, "send")
        rec = self._lookup(comm_h, _CommRec, "send")
        self.transport.send(self.my_rank, rec.members[dest], rec.ctx, tag, bytes(buf))

    def recv(self, source: int, tag: int, comm_h: BackendHandle):
        rec = self._lookup(comm_h, _CommRec, "recv")
        src_world = ANY_SOURCE if source == ANY_SOURCE else rec.members[source]
        got_src, got_tag, payload = self.transport.recv(self.my_rank, rec.ctx, src_world, tag)
        st = Status(rec.members.index(got_src), got_tag, len(payload))
        return payload, st

    def iprobe(self, source: int, tag: int, comm_h: BackendHandle):
        rec = self._lookup(comm_h, _CommRec, "iprobe")
        src_world = ANY_SOURCE if source == ANY_SOURCE else rec.members[source]
        hit = self.transport.probe(self.my_rank, rec.ctx, src_world, tag)
        if hit is None:
            return False, None
        got_src, got_tag, nbytes = hit
        return True, Status(rec.members.index(got_src), got_tag, nbytes)

    def isend(self, buf: bytes, count: int, type_h: BackendHandle, dest: int,
              tag: int, comm_h: BackendHandle) -> BackendHandle:
        self.send(buf, count, type_h, dest, tag, comm_h)
        req = _ReqRec("isend", dest, tag, comm_h.value)
        req.done = True
        req.status = Status(-1, tag, len(buf))
        return self._put("request", req)

    def irecv(self, source: int, tag: int, comm_h: BackendHandle, sink=None) -> BackendHandle:
        self._lookup(comm_h, _CommRec, "irecv")
        return self._put("request", _ReqRec("irecv", source, tag, comm_h.value, sink))

    def test(self, req_h: BackendHandle):
        req = self._lookup(req_h, _ReqRec, "test")
        if req.done:
            del self._objects[req_h.value]
            return True, req.status
        rec = self._objects[req.comm_value]
        src_world = ANY_SOURCE if req.source == ANY_SOURCE else rec.members[req.source]
        got = self.transport.try_recv(self.my_rank, rec.ctx, src_world, req.tag)
        if got is None:
            return False, None
        got_src, got_tag, payload = got
        st = Status(rec.members.index(got_src), got_tag, len(payload))
        if req.sink is not None:
            req.sink(payload)
        del self._objects[req_h.value]
        return True, st

    def wait(self, req_h: BackendHandle) -> Status:
        req = self._lookup(req_h, _ReqRec, "wait")
        if req.done:
            del self._objects[req_h.value]
            return req.status
        rec = self._objects[req.comm_value]
        src_world = ANY_SOURCE if req.source == ANY_SOURCE else rec.members[req.source]
        got_src, got_tag, payload = self.transport.recv(
            self.my_rank, rec.ctx, src_world, req.tag
        )
        st = Status(rec.members.index(got_src), got_tag, len(payload))
        if req.sink is not None:
            req.sink(payload)
        del self._objects[req_h.value]
        return st

    def _cancel_request(self, req_h: BackendHandle) -> None:
        self._objects.pop(req_h.value, None)

    # --- collectives ---

    def _exchange(self, rec: _CommRec, tag: int, item) -> list:
        """All-to-all of one item per member over an internal tag lane."""
        out = [None] * len(rec.members)
        for i, wr in enumerate(rec.members):
            if wr == self.my_rank:
                out[i] = item
            else:
                self.transport.send(self.my_rank, wr, rec.ctx, tag, item)
        for i, wr in enumerate(rec.members):
            if wr != self.my_rank:
                _, _, payload = self.transport.recv(self.my_rank, rec.ctx, wr, tag)
                out[i] = payload
        return out

    def alltoall(self, sendbuf, comm_h: BackendHandle) -> list:
        rec = self._lookup(comm_h, _CommRec, "alltoall")
        if len(sendbuf) != len(rec.members):
            raise ValueError("alltoall send buffer must hold one item per member")
        out = [None] * len(rec.members)
        for i, wr in enumerate(rec.members):
            if wr == self.my_rank:
                out[i] = sendbuf[i]
            else:
                self.transport.send(self.my_rank, wr, rec.ctx, _TAG_ALLTOALL, sendbuf[i])
        for i, wr in enumerate(rec.members):
            if wr != self.my_rank:
                _, _, payload = self.transport.recv(self.my_rank, rec.ctx, wr, _TAG_ALLTOALL)
                out[i] = payload
        return out

    def barrier(self, comm_h: BackendHandle) -> None:
        self._require("barrier")
        rec = self._lookup(comm_h, _CommRec, "barrier")
        if len(rec.members) == 1:
            return
        root = rec.members[0]
        if self.my_rank == root:
            for wr in rec.members[1:]:
                self.transport.recv(self.my_rank, rec.ctx, wr, _TAG_BARRIER)
            for wr in rec.members[1:]:
                self.transport.send(self.my_rank, wr, rec.ctx, _TAG_BARRIER, b"")
        else:
            self.transport.send(self.my_rank, root, rec.ctx, _TAG_BARRIER, b"")
            self.transport.recv(self.my_rank, rec.ctx, root, _TAG_BARRIER)

    def allreduce(self, values, op_h: BackendHandle, comm_h: BackendHandle) -> list:
        self._require("allreduce")
        op = self._lookup(op_h, _OpRec, "allreduce")
        rec = self._lookup(comm_h, _CommRec, "allreduce")
        fn = reductions.lookup(op.fn_name)
        root = rec.members[0]
        if self.my_rank == root:
            acc = list(values)
            for wr in rec.members[1:]:
                _, _, payload = self.transport.recv(self.my_rank, rec.ctx, wr, _TAG_REDUCE)
                acc = fn(acc, payload)
            for wr in rec.members[1:]:
                self.transport.send(self.my_rank, wr, rec.ctx, _TAG_RESULT, list(acc))
            return acc
        self.transport.send(self.my_rank, root, rec.ctx, _TAG_REDUCE, list(values))
        _, _, result = self.transport.recv(self.my_rank, rec.ctx, root, _TAG_RESULT)
        return list(result)

    def bcast(self, value, root: int, comm_h: BackendHandle):
        self._require("bcast")
        rec = self._lookup(comm_h, _CommRec, "bcast")
        root_world = rec.members[root]
        if self.my_rank == root_world:
            for wr in rec.members:
                if wr != self.my_rank:
                    self.transport.send(self.my_rank, wr, rec.ctx, _TAG_BCAST, value)
            return value
        _, _, payload = self.transport.recv(self.my_rank, rec.ctx, root_world, _TAG_BCAST)
        return payload

    def gather(self, value, root: int, comm_h: BackendHandle):
        self._require("gather")
        rec = self._lookup(comm_h, _CommRec, "gather")
        root_world = rec.members[root]
        if self.my_rank == root_world:
            out = []
            for wr in rec.members:
                if wr == self.my_rank:
                    out.append(value)
                else:
                    _, _, payload = self.transport.recv(self.my_rank, rec.ctx, wr, _TAG_REDUCE)
                    out.append(payload)
            return out
        self.transport.send(self.my_rank, root_world, rec.ctx, _TAG_REDUCE, value)
        return None

    # --- datatypes ---

    def type_contiguous(self, count: int, type_h: BackendHandle) -> BackendHandle:
        self._lookup(type_h, _TypeRec, "type_contiguous")
        return self._put("datatype", _TypeRec("contiguous", (count,), (type_h,)))

    def type_vector(self, count: int, blocklen: int, stride: int,
                    type_h: BackendHandle) -> BackendHandle:
        self._lookup(type_h, _TypeRec, "type_vector")
        return self._put(
            "datatype", _TypeRec("vector", (count, blocklen, stride), (type_h,))
        )

    def type_commit(self, h: BackendHandle) -> None:
        rec = self._lookup(h, _TypeRec, "type_commit")
        if rec.committed:
            raise CommitTwice(f"datatype {h.value:#x} already committed")
        rec.committed = True

    def type_free(self, h: BackendHandle) -> None:
        self._drop(h, _TypeRec, "type_free")

    def type_get_envelope(self, h: BackendHandle):
        rec = self._lookup(h, _TypeRec, "type_get_envelope")
        return rec.combiner, rec.ints

    def type_get_contents(self, h: BackendHandle):
        rec = self._lookup(h, _TypeRec, "type_get_contents")
        return rec.ints, rec.children

    # --- operations ---

    def op_create(self, fn_name: str, commutative: bool) -> BackendHandle:
        if not reductions.is_registered(fn_name):
            raise UnknownFunction(f"reduction {fn_name!r} is not registered")
        return self._put("op", _OpRec(fn_name, commutative))

    def op_free(self, h: BackendHandle) -> None:
        self._drop(h, _OpRec, "op_free")
