"""Coordinated checkpoint: quiesce, drain in-flight traffic, write images.

The drain stays strictly inside the core backend subset: local sends
are completed with test loops, per-destination sent counts are
exchanged with one world alltoall, and the remaining expected messages
are pulled out with iprobe/recv rounds.  Each rank then serializes its
descriptor table, counters, constant map, drained messages, and the
app's registered state blob into one image file, written atomically.

Image format: magic "MCRI", version 1, little-endian, length-prefixed
sections in fixed order (descriptors, counters, constants, drained
messages, app state).  Backend handles are never written: they are
session-local and meaningless after restart.
"""

from __future__ import annotations

import os
import struct
import threading
import time
from dataclasses import dataclass, field

from .errors import (
    BadMagic,
    DrainTimeout,
    ShadowNotEmpty,
    TruncatedSection,
    VersionMismatch,
)
from .vid import (
    ANY_SOURCE,
    ANY_TAG,
    CommDesc,
    CreateRecipe,
    DupRecipe,
    GroupDesc,
    GroupFromComm,
    GroupIncl,
    ObjectKind,
    OpDesc,
    RequestDesc,
    SelfRecipe,
    SplitRecipe,
    TypeDesc,
    TypeNode,
    WorldRecipe,
    vid_kind,
)

MAGIC = b"MCRI"
VERSION = 1
DRAIN_ROUND_BOUND = 10_000

_KIND_ORDER = (
    ObjectKind.COMM,
    ObjectKind.GROUP,
    ObjectKind.REQUEST,
    ObjectKind.OP,
    ObjectKind.DATATYPE,
)


@dataclass
class DrainedMessage:
    src_world_rank: int
    tag: int
    gid: int
    gid_seq: int
    payload: bytes
    arrival_index: int


@dataclass
class TableState:
    descriptors: list = field(default_factory=list)   # (vid, descriptor)
    alloc: dict = field(default_factory=dict)         # kind -> (next_free, free_list)
    gid_seqs: dict = field(default_factory=dict)      # gid -> next duplicate index


@dataclass
class CheckpointImage:
    world_size: int
    my_rank: int
    backend_name: str
    seq_high_water: int
    table: TableState
    counters: list
    constmap: list
    drained: list
    appstate: bytes


# --- drain protocol ---

def drain_messages(ctx) -> list:
    """Drain all in-flight point-to-point traffic addressed to this rank.

    Preconditions: every rank is inside checkpoint coordination and no
    further application sends will happen.  Uses only probe/receive/test
    plus one world alltoall and a closing barrier.
    """
    backend = ctx.backend
    table = ctx.table

    # complete locally posted sends so exchanged counts are exact
    for vid, desc in list(table.live(ObjectKind.REQUEST)):
        if desc.req_kind == "isend" and not desc.completed:
            done, st = backend.test(desc.real)
            rounds = 0
            while not done:
                rounds += 1
                if rounds > DRAIN_ROUND_BOUND:
                    raise DrainTimeout(f"isend {vid:#010x} never completed")
                time.sleep(0)
                done, st = backend.test(desc.real)
            desc.completed = True
            desc.status = st
            desc.real = None
            ctx.counters.bump_sent(desc.comm, desc.peer)

    # exchange per-destination sent totals; item j of the send buffer
    # lands at world rank j, so the result is what each source sent here
    world_real = table.get(ctx.constmap.vid_for("COMM_WORLD")).real
    sent, received = ctx.counters.totals_by_world(
        lambda comm: table.get(comm).members, ctx.world_size
    )
    sent_to_me = backend.alltoall(list(sent), world_real)
    expected = [sent_to_me[s] - received[s] for s in range(ctx.world_size)]
    if any(e < 0 for e in expected):
        raise DrainTimeout(f"rank {ctx.rank}: counter books are inconsistent: {expected}")

    comms = [(vid, desc) for vid, desc in table.live(ObjectKind.COMM)]
    drained: list = []
    got = [0] * ctx.world_size
    rounds = 0
    while got != expected:
        for _, cd in comms:
            if cd.real is None:
                continue
            while True:
                flag, st = backend.iprobe(ANY_SOURCE, ANY_TAG, cd.real)
                if not flag:
                    break
                payload, st2 = backend.recv(st.source, st.tag, cd.real)
                src_world = cd.members[st2.source]
                ctx.arrival_counter += 1
                drained.append(
                    DrainedMessage(src_world, st2.tag, cd.gid, cd.gid_seq,
                                   payload, ctx.arrival_counter)
                )
                got[src_world] += 1
        if got == expected:
            break
        rounds += 1
        if rounds > DRAIN_ROUND_BOUND:
            raise DrainTimeout(
                f"rank {ctx.rank}: expected {expected}, drained {got} "
                f"after {rounds} probe rounds"
            )
        time.sleep(0)
    backend.barrier(world_real)
    return drained


# --- image construction ---

def dump_table(table, gid_seqs: dict) -> TableState:
    state = TableState()
    state.descriptors = list(table.live())
    state.alloc = {int(k): table.alloc_state(k) for k in _KIND_ORDER}
    state.gid_seqs = dict(gid_seqs)
    return state


def build_image(ctx, drained: list) -> CheckpointImage:
    appstate = ctx.state_provider() if ctx.state_provider is not None else b""
    return CheckpointImage(
        world_size=ctx.world_size,
        my_rank=ctx.rank,
        backend_name=ctx.backend_name,
        seq_high_water=ctx.table.creation_counter,
        table=dump_table(ctx.table, ctx._gid_seqs),
        counters=ctx.counters.snapshot(),
        constmap=sorted(ctx.constmap.items()),
        drained=list(drained),
        appstate=appstate,
    )


# --- binary encoding ---

class _Writer:
    def __init__(self):
        self.parts: list = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def i32(self, v):
        self.parts.append(struct.pack("<i", v))

    def i64(self, v):
        self.parts.append(struct.pack("<q", v))

    def lp_bytes(self, b: bytes):
        self.u32(len(b))
        self.parts.append(bytes(b))

    def lp_str(self, s: str):
        self.lp_bytes(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def _take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedSection(
                f"need {n} bytes at offset {self.pos}, section ends at {self.end}"
            )
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u8(self):
        return self._take(1)[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def i32(self):
        return struct.unpack("<i", self._take(4))[0]

    def i64(self):
        return struct.unpack("<q", self._take(8))[0]

    def lp_bytes(self) -> bytes:
        return self._take(self.u32())

    def lp_str(self) -> str:
        return self.lp_bytes().decode("utf-8")

    def section(self) -> "_Reader":
        length = self.u64()
        if self.pos + length > self.end:
            raise TruncatedSection(
                f"section of {length} bytes exceeds remaining {self.end - self.pos}"
            )
        sub = _Reader(self.data, self.pos, self.pos + length)
        self.pos += length
        return sub

    def expect_done(self):
        if self.pos != self.end:
            raise TruncatedSection(f"{self.end - self.pos} unparsed bytes remain")


def _write_comm_recipe(w: _Writer, r) -> None:
    if isinstance(r, WorldRecipe):
        w.u8(0)
    elif isinstance(r, SelfRecipe):
        w.u8(1)
    elif isinstance(r, SplitRecipe):
        w.u8(2)
        w.u32(r.parent)
        w.i64(r.color)
        w.i64(r.key)
    elif isinstance(r, DupRecipe):
        w.u8(3)
        w.u32(r.parent)
    else:
        assert isinstance(r, CreateRecipe)
        w.u8(4)
        w.u32(r.parent)
        w.u32(r.group)


def _read_comm_recipe(r: _Reader):
    tag = r.u8()
    if tag == 0:
        return WorldRecipe()
    if tag == 1:
        return SelfRecipe()
    if tag == 2:
        return SplitRecipe(r.u32(), r.i64(), r.i64())
    if tag == 3:
        return DupRecipe(r.u32())
    if tag == 4:
        return CreateRecipe(r.u32(), r.u32())
    raise TruncatedSection(f"unknown comm recipe tag {tag}")


def _write_type_node(w: _Writer, node: TypeNode) -> None:
    if node.combiner == "named":
        w.u8(0)
        w.lp_str(node.args[0])
    elif node.combiner == "contiguous":
        w.u8(1)
        w.i64(node.args[0])
    else:
        w.u8(2)
        for v in node.args:
            w.i64(v)
    w.u32(len(node.children))
    for c in node.children:
        w.u32(c)


def _read_type_node(r: _Reader) -> TypeNode:
    tag = r.u8()
    if tag == 0:
        combiner, args = "named", (r.lp_str(),)
    elif tag == 1:
        combiner, args = "contiguous", (r.i64(),)
    elif tag == 2:
        combiner, args = "vector", (r.i64(), r.i64(), r.i64())
    else:
        raise TruncatedSection(f"unknown type combiner tag {tag}")
    children = tuple(r.u32() for _ in range(r.u32()))
    return TypeNode(combiner, args, children)


def _write_descriptor(w: _Writer, vid: int, desc) -> None:
    w.u32(vid)
    kind = vid_kind(vid)
    if kind == ObjectKind.COMM:
        w.u32(desc.gid)
        w.u32(desc.gid_seq)
        w.u32(len(desc.members))
        for m in desc.members:
            w.i32(m)
        _write_comm_recipe(w, desc.recipe)
    elif kind == ObjectKind.GROUP:
        w.u32(len(desc.members))
        for m in desc.members:
            w.i32(m)
        if isinstance(desc.recipe, GroupFromComm):
            w.u8(0)
            w.u32(desc.recipe.comm)
        else:
            w.u8(1)
            w.u32(desc.recipe.parent)
            w.u32(len(desc.recipe.ranks))
            for rk in desc.recipe.ranks:
                w.i32(rk)
    elif kind == ObjectKind.REQUEST:
        w.u8(0 if desc.req_kind == "isend" else 1)
        w.i32(desc.peer)
        w.i32(desc.tag)
        w.u32(desc.comm)
        w.lp_str(desc.buffer_ref)
        w.u8(1 if desc.completed else 0)
    elif kind == ObjectKind.OP:
        w.u8(1 if desc.commutative else 0)
        w.lp_str(desc.fn_name)
    else:
        _write_type_node(w, desc.recipe)
        w.u8(1 if desc.committed else 0)
    w.u64(desc.creation_seq)


def _read_descriptor(r: _Reader):
    vid = r.u32()
    kind = vid_kind(vid)
    if kind == ObjectKind.COMM:
        gid = r.u32()
        gid_seq = r.u32()
        members = tuple(r.i32() for _ in range(r.u32()))
        desc = CommDesc(None, gid, gid_seq, members, _read_comm_recipe(r))
    elif kind == ObjectKind.GROUP:
        members = tuple(r.i32() for _ in range(r.u32()))
        rtag = r.u8()
        if rtag == 0:
            recipe = GroupFromComm(r.u32())
        else:
            parent = r.u32()
            recipe = GroupIncl(parent, tuple(r.i32() for _ in range(r.u32())))
        desc = GroupDesc(None, members, recipe)
    elif kind == ObjectKind.REQUEST:
        req_kind = "isend" if r.u8() == 0 else "irecv"
        desc = RequestDesc(None, req_kind, r.i32(), r.i32(), r.u32(), r.lp_str(),
                           completed=bool(r.u8()))
    elif kind == ObjectKind.OP:
        desc = OpDesc(None, bool(r.u8()), r.lp_str())
    else:
        node = _read_type_node(r)
        desc = TypeDesc(None, node, committed=False)
        desc.committed = bool(r.u8())
    desc.creation_seq = r.u64()
    return vid, desc


def serialize_image(img: CheckpointImage) -> bytes:
    head = _Writer()
    head.parts.append(MAGIC)
    head.u32(VERSION)
    head.u32(img.world_size)
    head.u32(img.my_rank)
    head.lp_str(img.backend_name)
    head.u64(img.seq_high_water)

    desc = _Writer()
    for kind in _KIND_ORDER:
        next_free, free_list = img.table.alloc[int(kind)]
        desc.u32(next_free)
        desc.u32(len(free_list))
        for s in free_list:
            desc.u32(s)
    desc.u32(len(img.table.gid_seqs))
    for gid, seq in sorted(img.table.gid_seqs.items()):
        desc.u32(gid)
        desc.u32(seq)
    desc.u32(len(img.table.descriptors))
    for vid, d in img.table.descriptors:
        _write_descriptor(desc, vid, d)

    counters = _Writer()
    counters.u32(len(img.counters))
    for comm, peer, sent, received in img.counters:
        counters.u32(comm)
        counters.i32(peer)
        counters.u64(sent)
        counters.u64(received)

    constmap = _Writer()
    constmap.u32(len(img.constmap))
    for name, vid in img.constmap:
        constmap.lp_str(name)
        constmap.u32(vid)

    drained = _Writer()
    drained.u32(len(img.drained))
    for m in img.drained:
        drained.i32(m.src_world_rank)
        drained.i32(m.tag)
        drained.u32(m.gid)
        drained.u32(m.gid_seq)
        drained.u64(m.arrival_index)
        drained.lp_bytes(m.payload)

    out = _Writer()
    out.parts.append(head.getvalue())
    for section in (desc, counters, constmap, drained):
        body = section.getvalue()
        out.u64(len(body))
        out.parts.append(body)
    out.u64(len(img.appstate))
    out.parts.append(bytes(img.appstate))
    return out.getvalue()


def parse_image(data: bytes) -> CheckpointImage:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a checkpoint image")
    r = _Reader(data, 4)
    version = r.u32()
    if version != VERSION:
        raise VersionMismatch(f"image version {version}, supported {VERSION}")
    world_size = r.u32()
    my_rank = r.u32()
    backend_name = r.lp_str()
    seq_high_water = r.u64()

    table = TableState()
    sec = r.section()
    for kind in _KIND_ORDER:
        next_free = sec.u32()
        free_list = [sec.u32() for _ in range(sec.u32())]
        table.alloc[int(kind)] = (next_free, free_list)
    table.gid_seqs = {sec.u32(): sec.u32() for _ in range(sec.u32())}
    table.descriptors = [_read_descriptor(sec) for _ in range(sec.u32())]
    sec.expect_done()

    sec = r.section()
    counters = [
        (sec.u32(), sec.i32(), sec.u64(), sec.u64()) for _ in range(sec.u32())
    ]
    sec.expect_done()

    sec = r.section()
    constmap = [(sec.lp_str(), sec.u32()) for _ in range(sec.u32())]
    sec.expect_done()

    sec = r.section()
    drained = []
    for _ in range(sec.u32()):
        src = sec.i32()
        tag = sec.i32()
        gid = sec.u32()
        gid_seq = sec.u32()
        arrival = sec.u64()
        payload = sec.lp_bytes()
        drained.append(DrainedMessage(src, tag, gid, gid_seq, payload, arrival))
    sec.expect_done()

    sec = r.section()
    appstate = sec._take(sec.end - sec.pos)
    r.expect_done()

    return CheckpointImage(world_size, my_rank, backend_name, seq_high_water,
                           table, counters, constmap, drained, appstate)


def write_image(path: str, img: CheckpointImage) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(serialize_image(img))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_image(path: str) -> CheckpointImage:
    with open(path, "rb") as f:
        return parse_image(f.read())


def image_path(epoch_dir: str, rank: int) -> str:
    return os.path.join(epoch_dir, f"ckpt_rank{rank}.mcri")


# --- coordination ---

class CheckpointCoordinator:
    """Two-phase rendezvous for coordinated checkpoints.

    Triggers are either preconfigured step boundaries or an external
    request delivered over the transport control lane; an external
    request is first converted into an agreed target boundary (the
    maximum step any rank had reached when it acknowledged), so every
    rank checkpoints at the same quiescent cut.
    """

    def __init__(self, world_size: int, transport, ckpt_dir: str,
                 after_steps=(), manifest: dict = None):
        self.world_size = world_size
        self.transport = transport
        self.ckpt_dir = ckpt_dir
        self.manifest = dict(manifest or {})
        self.after_steps = sorted(after_steps)
        self._enter = threading.Barrier(world_size)
        self._leave = threading.Barrier(world_size, action=self._on_all_written)
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._epochs: dict = {}
        self._step_idx: dict = {}
        self._ext_requested = False
        self._ext_target = None
        self._ext_reported: dict = {}
        self._done_ranks: set = set()
        self.stats = {
            "rounds": 0,
            "drained": {},
            "transport_pending_after": None,
            "epoch_dirs": [],
        }

    def request_external(self) -> None:
        """Ask every rank to checkpoint at the next agreed boundary."""
        for rank in range(self.world_size):
            self.transport.post_control(rank, "checkpoint")

    def rank_done(self, rank: int) -> None:
        """A rank finished its run; cancel any still-unagreed external
        trigger, since a coordinated cut is no longer possible."""
        with self._cond:
            self._done_ranks.add(rank)
            if self._ext_requested and self._ext_target is None:
                self._ext_requested = False
                self._ext_reported.clear()
            self._cond.notify_all()

    def due(self, ctx, step: int) -> bool:
        rank = ctx.rank
        if self.transport.poll_control(rank) == "checkpoint":
            with self._cond:
                self._ext_requested = True
                self._cond.notify_all()
        idx = self._step_idx.get(rank, 0)
        if idx < len(self.after_steps) and step == self.after_steps[idx]:
            self._step_idx[rank] = idx + 1
            return True
        with self._cond:
            if not self._ext_requested:
                return False
            if self._ext_target is None and rank not in self._ext_reported:
                self._ext_reported[rank] = step
                if len(self._ext_reported) + len(self._done_ranks) >= self.world_size:
                    if self._done_ranks:
                        self._ext_requested = False
                        self._ext_reported.clear()
                    else:
                        self._ext_target = max(self._ext_reported.values())
                    self._cond.notify_all()
            while self._ext_requested and self._ext_target is None:
                self._cond.wait(timeout=60.0)
            return self._ext_requested and step == self._ext_target

    def enter(self) -> None:
        self._enter.wait()

    def epoch_dir(self, round_no: int) -> str:
        with self._lock:
            path = self._epochs.get(round_no)
            if path is None:
                existing = 0
                if os.path.isdir(self.ckpt_dir):
                    existing = sum(
                        1 for n in os.listdir(self.ckpt_dir) if n.startswith("epoch_")
                    )
                path = os.path.join(self.ckpt_dir, f"epoch_{existing}")
                os.makedirs(path, exist_ok=True)
                self._write_manifest(path)
                self._epochs[round_no] = path
                self.stats["epoch_dirs"].append(path)
            return path

    def _write_manifest(self, epoch_path: str) -> None:
        import json

        with open(os.path.join(epoch_path, "manifest.json"), "w") as f:
            json.dump(self.manifest, f, sort_keys=True)

    def leave(self, rank: int, drained_count: int) -> None:
        with self._lock:
            self.stats["drained"][rank] = drained_count
        self._leave.wait()

    def _on_all_written(self) -> None:
        # runs once, while every rank is still parked at the leave barrier
        self.stats["rounds"] += 1
        self.stats["transport_pending_after"] = self.transport.pending_total()
        if self._ext_requested and self._ext_target is not None:
            self._ext_requested = False
            self._ext_target = None
            self._ext_reported.clear()


def run_checkpoint(ctx, coord: CheckpointCoordinator) -> None:
    """Execute one coordinated checkpoint from a rank's step boundary."""
    if ctx.shadow is not None and len(ctx.shadow):
        raise ShadowNotEmpty(
            f"rank {ctx.rank}: {len(ctx.shadow)} drained messages never delivered"
        )
    # bind any still-lazy constants now so the drain window stays within
    # the core call subset
    for name in ctx.constmap.names():
        if ctx.constmap.state[name] != "BOUND":
            ctx._bind_constant(name)
    round_no = ctx.ckpt_round
    ctx.ckpt_round += 1
    coord.enter()
    drained = drain_messages(ctx)
    img = build_image(ctx, drained)
    write_image(image_path(coord.epoch_dir(round_no), ctx.rank), img)
    coord.leave(ctx.rank, len(drained))
