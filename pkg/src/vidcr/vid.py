"""Virtual ids and the per-rank descriptor table.

Applications only ever hold 32-bit virtual ids.  The top 3 bits carry the
object kind, the low 29 bits index a two-level slot table that stores one
descriptor per live object.  A descriptor pairs the backend-native handle
with the metadata needed to rebuild a semantically equivalent object on a
fresh backend: the creation recipe, member lists, group identity, and a
per-rank creation sequence number.

Slot 0..15 of every kind are reserved for predefined constants; raw value
0 is the distinguished null id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .errors import (
    EmptyMembers,
    FreeingPredefined,
    InvalidId,
    NotFound,
    TableFull,
)

KIND_SHIFT = 29
SLOT_MASK = (1 << KIND_SHIFT) - 1
BLOCK_SIZE = 1024
BLOCK_SHIFT = 10
BLOCK_MASK = BLOCK_SIZE - 1
RESERVED_SLOTS = 16

VID_NULL = 0

ANY_SOURCE = -1
ANY_TAG = -1


class ObjectKind(enum.IntEnum):
    NULL = 0
    COMM = 1
    GROUP = 2
    REQUEST = 3
    OP = 4
    DATATYPE = 5


def make_vid(kind: int, slot: int) -> int:
    return (kind << KIND_SHIFT) | slot


def vid_kind(v: int) -> int:
    return (v >> KIND_SHIFT) & 0x7


def vid_slot(v: int) -> int:
    return v & SLOT_MASK


def is_reserved(v: int) -> bool:
    return vid_slot(v) < RESERVED_SLOTS


# --- group identity ---

_FNV_BASIS = 2166136261
_FNV_PRIME = 16777619


def group_id(members) -> int:
    """Identity hash of an ordered world-rank list (FNV-1a, 32 bit).

    Every member of a communicator computes this over the same ordered
    list and therefore agrees on the value without communication.  The
    hash is order-sensitive because communicator rank order matters.
    """
    if not members:
        raise EmptyMembers("group identity of an empty member list")
    h = _FNV_BASIS
    for r in members:
        for b in int(r).to_bytes(4, "little"):
            h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFF
    return h


# --- creation recipes ---

@dataclass(frozen=True)
class WorldRecipe:
    pass


@dataclass(frozen=True)
class SelfRecipe:
    pass


@dataclass(frozen=True)
class SplitRecipe:
    parent: int
    color: int
    key: int


@dataclass(frozen=True)
class DupRecipe:
    parent: int


@dataclass(frozen=True)
class CreateRecipe:
    parent: int
    group: int


@dataclass(frozen=True)
class GroupFromComm:
    comm: int


@dataclass(frozen=True)
class GroupIncl:
    parent: int
    ranks: tuple


@dataclass(frozen=True)
class TypeNode:
    """One datatype construction step.

    combiner is 'named', 'contiguous', or 'vector'; args carries the
    constructor integers (or the constant name for 'named'); children
    are datatype vids, replayed before this node.
    """

    combiner: str
    args: tuple
    children: tuple = ()


CommRecipe = Union[WorldRecipe, SelfRecipe, SplitRecipe, DupRecipe, CreateRecipe]
GroupRecipe = Union[GroupFromComm, GroupIncl]


# --- descriptors ---

@dataclass
class CommDesc:
    real: Optional[object] = field(compare=False, default=None)
    gid: int = 0
    gid_seq: int = 0
    members: tuple = ()
    recipe: CommRecipe = field(default_factory=WorldRecipe)
    creation_seq: int = 0
    ref_count: int = field(compare=False, repr=False, default=0)
    kind = ObjectKind.COMM


@dataclass
class GroupDesc:
    real: Optional[object] = field(compare=False, default=None)
    members: tuple = ()
    recipe: GroupRecipe = field(default_factory=lambda: GroupFromComm(VID_NULL))
    creation_seq: int = 0
    ref_count: int = field(compare=False, repr=False, default=0)
    kind = ObjectKind.GROUP


@dataclass
class TypeDesc:
    real: Optional[object] = field(compare=False, default=None)
    recipe: TypeNode = field(default_factory=lambda: TypeNode("named", ("INT64",)))
    committed: bool = False
    creation_seq: int = 0
    ref_count: int = field(compare=False, repr=False, default=0)
    layout: Optional[object] = field(compare=False, repr=False, default=None)
    kind = ObjectKind.DATATYPE


@dataclass
class OpDesc:
    real: Optional[object] = field(compare=False, default=None)
    commutative: bool = True
    fn_name: str = ""
    creation_seq: int = 0
    ref_count: int = field(compare=False, repr=False, default=0)
    kind = ObjectKind.OP


@dataclass
class RequestDesc:
    real: Optional[object] = field(compare=False, default=None)
    req_kind: str = "isend"  # 'isend' | 'irecv'
    peer: int = 0
    tag: int = 0
    comm: int = VID_NULL
    buffer_ref: str = ""
    completed: bool = False
    creation_seq: int = 0
    status: Optional[object] = field(compare=False, repr=False, default=None)
    kind = ObjectKind.REQUEST


Descriptor = Union[CommDesc, GroupDesc, TypeDesc, OpDesc, RequestDesc]

_DESC_KINDS = {
    ObjectKind.COMM: CommDesc,
    ObjectKind.GROUP: GroupDesc,
    ObjectKind.REQUEST: RequestDesc,
    ObjectKind.OP: OpDesc,
    ObjectKind.DATATYPE: TypeDesc,
}

# predefined constant name -> (kind, reserved slot)
PREDEFINED = {
    "COMM_WORLD": (ObjectKind.COMM, 0),
    "COMM_SELF": (ObjectKind.COMM, 1),
    "CHAR": (ObjectKind.DATATYPE, 0),
    "INT8": (ObjectKind.DATATYPE, 1),
    "INT32": (ObjectKind.DATATYPE, 2),
    "INT64": (ObjectKind.DATATYPE, 3),
    "DOUBLE": (ObjectKind.DATATYPE, 4),
    "OP_SUM": (ObjectKind.OP, 0),
    "OP_PROD": (ObjectKind.OP, 1),
}


class _KindTable:
    """Two-level slot store for one object kind."""

    __slots__ = ("directory", "next_free", "free_list")

    def __init__(self):
        self.directory: list = []
        self.next_free = RESERVED_SLOTS
        self.free_list: list = []

    def block_for(self, slot: int) -> list:
        b = slot >> BLOCK_SHIFT
        d = self.directory
        if len(d) <= b:
            d.extend([None] * (b + 1 - len(d)))
        block = d[b]
        if block is None:
            block = d[b] = [None] * BLOCK_SIZE
        return block


class DescriptorTable:
    """Per-rank table translating virtual ids to descriptors in O(1).

    A lookup touches exactly two levels: the block directory and the
    block itself.  `probe_count` tallies those touches so tests and the
    micro-benchmark can verify the cost is independent of table size.
    """

    def __init__(self):
        self._kinds = {k: _KindTable() for k in _DESC_KINDS}
        # tag-indexed view for the translation fast path; entry 0 is the
        # null kind and tags 6/7 fall off the end
        self._by_tag = [None] + [self._kinds[ObjectKind(t)] for t in range(1, 6)]
        self.probe_count = 0
        self.creation_counter = 0  # last creation_seq handed out

    # --- allocation ---

    def alloc(self, kind: ObjectKind, real, desc: Descriptor) -> int:
        if desc.kind != kind:
            raise InvalidId(f"descriptor kind {desc.kind} does not match {kind}")
        kt = self._kinds[kind]
        if kt.free_list:
            slot = kt.free_list.pop()
        else:
            if kt.next_free > SLOT_MASK:
                raise TableFull(f"kind {kind.name} slot space exhausted")
            slot = kt.next_free
            kt.next_free += 1
        desc.real = real
        self.creation_counter += 1
        desc.creation_seq = self.creation_counter
        kt.block_for(slot)[slot & BLOCK_MASK] = desc
        return make_vid(kind, slot)

    def bind_reserved(self, kind: ObjectKind, slot: int, desc: Descriptor) -> int:
        if slot >= RESERVED_SLOTS:
            raise InvalidId(f"slot {slot} is not reserved")
        kt = self._kinds[kind]
        kt.block_for(slot)[slot & BLOCK_MASK] = desc
        return make_vid(kind, slot)

    def install(self, v: int, desc: Descriptor) -> None:
        """Place a descriptor at its exact recorded slot (restart path)."""
        slot = v & SLOT_MASK
        kt = self._kinds[ObjectKind(v >> KIND_SHIFT)]
        kt.block_for(slot)[slot & BLOCK_MASK] = desc

    # --- translation ---

    def get(self, v: int, kind: Optional[ObjectKind] = None) -> Descriptor:
        tag = v >> KIND_SHIFT
        if kind is not None and tag != kind:
            raise InvalidId(f"vid {v:#010x} is not a {ObjectKind(kind).name}")
        slot = v & SLOT_MASK
        self.probe_count += 2
        try:
            desc = self._by_tag[tag].directory[slot >> BLOCK_SHIFT][slot & BLOCK_MASK]
        except (IndexError, AttributeError, TypeError):
            raise InvalidId(f"vid {v:#010x} is not a live id") from None
        if desc is None:
            raise InvalidId(f"vid {v:#010x} slot unoccupied")
        return desc

    def to_real(self, v: int):
        return self.get(v).real

    def find(self, kind: ObjectKind, real) -> int:
        """Reverse lookup by backend handle; linear scan, used rarely."""
        for vid, desc in self.live(kind):
            if desc.real == real:
                return vid
        raise NotFound(f"no live {kind.name} holds that handle")

    # --- release ---

    def free(self, v: int) -> None:
        desc = self.get(v)
        slot = v & SLOT_MASK
        if slot < RESERVED_SLOTS:
            raise FreeingPredefined(f"vid {v:#010x} is a predefined constant")
        kt = self._kinds[ObjectKind(v >> KIND_SHIFT)]
        kt.directory[slot >> BLOCK_SHIFT][slot & BLOCK_MASK] = None
        kt.free_list.append(slot)
        del desc

    # --- iteration / serialization support ---

    def live(self, kind: Optional[ObjectKind] = None) -> Iterator[tuple]:
        kinds = [kind] if kind is not None else list(_DESC_KINDS)
        for k in kinds:
            kt = self._kinds[k]
            for b, block in enumerate(kt.directory):
                if block is None:
                    continue
                base = b << BLOCK_SHIFT
                for off, desc in enumerate(block):
                    if desc is not None:
                        yield make_vid(k, base + off), desc

    def alloc_state(self, kind: ObjectKind) -> tuple:
        kt = self._kinds[kind]
        return kt.next_free, list(kt.free_list)

    def restore_alloc_state(self, kind: ObjectKind, next_free: int, free_list) -> None:
        kt = self._kinds[kind]
        kt.next_free = next_free
        kt.free_list = list(free_list)
