"""The app-facing wrapper layer.

A RankContext owns one backend instance plus the descriptor table, and
every application call goes through it: virtual ids are translated to
backend handles on entry, results are registered and handed back as
vids, creation recipes are recorded eagerly, and per-peer message
counters are maintained for the checkpoint drain.  Application code
never sees a backend handle.

Named constants resolve through a per-session table of backend values;
on lazily-binding backends a name's handle is fetched on first use.
After a restart, receive calls consult the shadow queue of drained
messages before touching the backend.
"""

from __future__ import annotations

from typing import Optional

from . import reductions
from .backends import Status, make_backend
from .backends.transport import Transport
from .errors import (
    CheckpointExit,
    FreeingPredefined,
    InvalidId,
    PendingMessages,
    ShadowNotEmpty,
    StillReferenced,
    TestOnFreed,
    UnknownConstant,
    UnknownFunction,
)
from .typemap import layout_for
from .vid import (
    ANY_SOURCE,
    ANY_TAG,
    PREDEFINED,
    VID_NULL,
    CommDesc,
    CreateRecipe,
    DescriptorTable,
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
    group_id,
    is_reserved,
    make_vid,
    vid_kind,
)

K_COMM = ObjectKind.COMM
K_GROUP = ObjectKind.GROUP
K_REQUEST = ObjectKind.REQUEST
K_OP = ObjectKind.OP
K_DATATYPE = ObjectKind.DATATYPE

UNRESOLVED = "UNRESOLVED"
BOUND = "BOUND"


class ConstantMap:
    """Name -> reserved vid, plus per-session handle resolution state."""

    def __init__(self):
        self._vids: dict = {}
        self._names: dict = {}
        self.state: dict = {}

    def add(self, name: str, vid: int) -> None:
        self._vids[name] = vid
        self._names[vid] = name
        self.state[name] = UNRESOLVED

    def vid_for(self, name: str) -> int:
        try:
            return self._vids[name]
        except KeyError:
            raise UnknownConstant(f"unknown constant {name!r}") from None

    def name_for(self, vid: int) -> Optional[str]:
        return self._names.get(vid)

    def names(self):
        return list(self._vids)

    def items(self):
        return list(self._vids.items())


class CounterTable:
    """Per (comm vid, peer comm rank) sent/received message counts."""

    def __init__(self):
        self.data: dict = {}  # (comm, peer) -> [sent, received]

    def _cell(self, comm: int, peer: int) -> list:
        key = (comm, peer)
        cell = self.data.get(key)
        if cell is None:
            cell = self.data[key] = [0, 0]
        return cell

    def bump_sent(self, comm: int, peer: int) -> None:
        self._cell(comm, peer)[0] += 1

    def bump_received(self, comm: int, peer: int) -> None:
        self._cell(comm, peer)[1] += 1

    def drop_comm(self, comm: int) -> None:
        for key in [k for k in self.data if k[0] == comm]:
            del self.data[key]

    def snapshot(self) -> list:
        return sorted(
            (comm, peer, cell[0], cell[1]) for (comm, peer), cell in self.data.items()
        )

    def restore(self, rows) -> None:
        self.data = {(comm, peer): [s, r] for comm, peer, s, r in rows}

    def totals_by_world(self, members_of, world_size: int) -> tuple:
        """Aggregate (sent, received) per world rank across communicators."""
        sent = [0] * world_size
        received = [0] * world_size
        for (comm, peer), (s, r) in self.data.items():
            wr = members_of(comm)[peer]
            sent[wr] += s
            received[wr] += r
        return sent, received


class RankContext:
    """One rank's runtime: backend below, virtual-id table above."""

    def __init__(self, backend_name: str, world_size: int, my_rank: int,
                 transport: Transport, backend_factory=None):
        factory = backend_factory or make_backend
        self.backend = factory(backend_name)
        self.backend_name = backend_name
        self.backend.init(world_size, my_rank, transport)
        self.world_size = world_size
        self.rank = my_rank
        self.transport = transport
        self.table = DescriptorTable()
        self.counters = CounterTable()
        self.constmap = ConstantMap()
        self.shadow = None                 # installed by restart
        self.calls = 0
        self.coordinator = None
        self.state_provider = None
        self.pending_ckpt_steps: list = []
        self.exit_after_ckpt = True
        self.ckpt_round = 0
        self.arrival_counter = 0
        self._buffers: dict = {}           # token -> (buf, offset, count, dtype vid)
        self._gid_seqs: dict = {}          # gid -> next duplicate index
        # hot-path translation caches; the descriptor table stays the
        # authority, entries are dropped whenever their vid is freed
        self._comm_hot: dict = {}          # comm vid -> backend handle
        self._dtype_hot: dict = {}         # dtype vid -> (layout, backend handle)
        self._install_predefined()

    # --- predefined constants ---

    def _install_predefined(self) -> None:
        world = tuple(range(self.world_size))
        for name, (kind, slot) in PREDEFINED.items():
            if kind == K_COMM:
                members = world if name == "COMM_WORLD" else (self.rank,)
                recipe = WorldRecipe() if name == "COMM_WORLD" else SelfRecipe()
                gid = group_id(members)
                desc = CommDesc(None, gid, self._next_gid_seq(gid), members, recipe)
            elif kind == K_DATATYPE:
                desc = TypeDesc(None, TypeNode("named", (name,)), committed=True)
            else:
                fn = "sum" if name == "OP_SUM" else "prod"
                desc = OpDesc(None, True, fn)
            vid = self.table.bind_reserved(kind, slot, desc)
            self.constmap.add(name, vid)
        if self.backend.eager_constants:
            for name in self.constmap.names():
                self._bind_constant(name)

    def _next_gid_seq(self, gid: int) -> int:
        seq = self._gid_seqs.get(gid, 0)
        self._gid_seqs[gid] = seq + 1
        return seq

    def _bind_constant(self, name: str):
        vid = self.constmap.vid_for(name)
        desc = self.table.get(vid)
        handle = self.backend.resolve_constant(name)
        desc.real = handle
        self.constmap.state[name] = BOUND
        return handle

    def _real(self, vid: int, desc):
        real = desc.real
        if real is None:
            name = self.constmap.name_for(vid)
            if name is None:
                raise InvalidId(f"vid {vid:#010x} has no bound backend object")
            real = self._bind_constant(name)
        return real

    def resolve(self, name: str) -> int:
        """Return the stable vid for a named constant, binding lazily."""
        self.calls += 1
        vid = self.constmap.vid_for(name)
        if self.constmap.state[name] != BOUND:
            self._bind_constant(name)
        return vid

    def _hot_comm(self, comm: int):
        """Hot entry (handle, per-peer counter cells) for a live comm vid.

        The cells alias the counter table's own lists, so bumps through
        either path stay consistent."""
        cd = self.table.get(comm, K_COMM)
        ent = self._comm_hot[comm] = (self._real(comm, cd), {})
        return ent

    def _counter_cell(self, comm: int, peer: int, ent) -> list:
        cell = self.counters._cell(comm, peer)
        ent[1][peer] = cell
        return cell

    def _hot_dtype(self, dtype: int):
        td = self.table.get(dtype, K_DATATYPE)
        layout = td.layout
        if layout is None:
            layout = self._layout(td)
        ent = self._dtype_hot[dtype] = (layout, self._real(dtype, td))
        return ent

    # --- communicator queries ---

    def comm_rank(self, comm: int) -> int:
        self.calls += 1
        return self.table.get(comm, K_COMM).members.index(self.rank)

    def comm_size(self, comm: int) -> int:
        self.calls += 1
        return len(self.table.get(comm, K_COMM).members)

    def comm_members(self, comm: int) -> tuple:
        return self.table.get(comm, K_COMM).members

    # --- communicator creation ---

    def _decode_members(self, comm_real, count: Optional[int] = None) -> tuple:
        """World-rank member list of a backend comm, via group decoding."""
        world_desc = self.table.get(self.constmap.vid_for("COMM_WORLD"))
        wg = self.backend.comm_group(self._real(make_vid(K_COMM, 0), world_desc))
        cg = self.backend.comm_group(comm_real)
        n = count if count is not None else self.backend.comm_size(comm_real)
        return tuple(self.backend.group_translate_ranks(cg, list(range(n)), wg))

    def _register_comm(self, real, members: tuple, recipe) -> int:
        gid = group_id(members)
        desc = CommDesc(None, gid, self._next_gid_seq(gid), members, recipe)
        return self.table.alloc(K_COMM, real, desc)

    def comm_split(self, comm: int, color: int, key: int) -> int:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        child = self.backend.comm_split(self._real(comm, cd), color, key)
        members = self._decode_members(child)
        vid = self._register_comm(child, members, SplitRecipe(comm, color, key))
        cd.ref_count += 1
        return vid

    def comm_dup(self, comm: int) -> int:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        child = self.backend.comm_dup(self._real(comm, cd))
        members = self._decode_members(child)
        vid = self._register_comm(child, members, DupRecipe(comm))
        cd.ref_count += 1
        return vid

    def comm_create(self, comm: int, group: int) -> int:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        gd = self.table.get(group, K_GROUP)
        if self.rank not in gd.members:
            return VID_NULL
        child = self.backend.comm_create(self._real(comm, cd), self._real(group, gd))
        members = self._decode_members(child)
        vid = self._register_comm(child, members, CreateRecipe(comm, group))
        cd.ref_count += 1
        gd.ref_count += 1
        return vid

    def comm_free(self, comm: int) -> None:
        self.calls += 1
        if is_reserved(comm):
            raise FreeingPredefined(f"vid {comm:#010x} is predefined")
        cd = self.table.get(comm, K_COMM)
        if cd.ref_count > 0:
            raise StillReferenced(f"comm {comm:#010x} is referenced by live recipes")
        flag, _ = self.backend.iprobe(ANY_SOURCE, ANY_TAG, cd.real)
        if flag:
            raise PendingMessages(f"comm {comm:#010x} still has undelivered traffic")
        self.counters.drop_comm(comm)
        self._comm_hot.pop(comm, None)
        self._unref_recipe(cd.recipe)
        self.backend.comm_free(cd.real)
        self.table.free(comm)

    def _unref_recipe(self, recipe) -> None:
        for attr in ("parent", "group", "comm"):
            ref = getattr(recipe, attr, None)
            if isinstance(ref, int) and ref != VID_NULL:
                self.table.get(ref).ref_count -= 1
        for child in getattr(recipe, "children", ()):
            self.table.get(child).ref_count -= 1

    # --- groups ---

    def comm_group(self, comm: int) -> int:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        gh = self.backend.comm_group(self._real(comm, cd))
        desc = GroupDesc(None, cd.members, GroupFromComm(comm))
        vid = self.table.alloc(K_GROUP, gh, desc)
        cd.ref_count += 1
        return vid

    def group_incl(self, group: int, ranks) -> int:
        self.calls += 1
        gd = self.table.get(group, K_GROUP)
        gh = self.backend.group_incl(self._real(group, gd), list(ranks))
        members = tuple(gd.members[r] for r in ranks)
        desc = GroupDesc(None, members, GroupIncl(group, tuple(ranks)))
        vid = self.table.alloc(K_GROUP, gh, desc)
        gd.ref_count += 1
        return vid

    def group_translate(self, group: int, ranks, target_group: int) -> list:
        self.calls += 1
        gd = self.table.get(group, K_GROUP)
        td = self.table.get(target_group, K_GROUP)
        return self.backend.group_translate_ranks(
            self._real(group, gd), list(ranks), self._real(target_group, td)
        )

    def group_free(self, group: int) -> None:
        self.calls += 1
        if is_reserved(group):
            raise FreeingPredefined(f"vid {group:#010x} is predefined")
        gd = self.table.get(group, K_GROUP)
        if gd.ref_count > 0:
            raise StillReferenced(f"group {group:#010x} is referenced by live recipes")
        self._unref_recipe(gd.recipe)
        self.backend.group_free(gd.real)
        self.table.free(group)

    # --- datatypes ---

    def _layout(self, desc: TypeDesc):
        layout = desc.layout
        if layout is None:
            layout = desc.layout = layout_for(
                desc.recipe, lambda v: self.table.get(v, K_DATATYPE).recipe
            )
        return layout

    def type_contiguous(self, count: int, dtype: int) -> int:
        self.calls += 1
        td = self.table.get(dtype, K_DATATYPE)
        h = self.backend.type_contiguous(count, self._real(dtype, td))
        desc = TypeDesc(None, TypeNode("contiguous", (count,), (dtype,)))
        vid = self.table.alloc(K_DATATYPE, h, desc)
        td.ref_count += 1
        return vid

    def type_vector(self, count: int, blocklen: int, stride: int, dtype: int) -> int:
        self.calls += 1
        td = self.table.get(dtype, K_DATATYPE)
        h = self.backend.type_vector(count, blocklen, stride, self._real(dtype, td))
        desc = TypeDesc(None, TypeNode("vector", (count, blocklen, stride), (dtype,)))
        vid = self.table.alloc(K_DATATYPE, h, desc)
        td.ref_count += 1
        return vid

    def type_commit(self, dtype: int) -> None:
        self.calls += 1
        td = self.table.get(dtype, K_DATATYPE)
        self.backend.type_commit(self._real(dtype, td))
        td.committed = True

    def type_free(self, dtype: int) -> None:
        self.calls += 1
        if is_reserved(dtype):
            raise FreeingPredefined(f"vid {dtype:#010x} is predefined")
        td = self.table.get(dtype, K_DATATYPE)
        if td.ref_count > 0:
            raise StillReferenced(f"type {dtype:#010x} is referenced by live recipes")
        self._dtype_hot.pop(dtype, None)
        self._unref_recipe(td.recipe)
        self.backend.type_free(td.real)
        self.table.free(dtype)

    def type_envelope(self, dtype: int):
        self.calls += 1
        td = self.table.get(dtype, K_DATATYPE)
        return self.backend.type_get_envelope(self._real(dtype, td))

    # --- operations ---

    def op_create(self, fn_name: str, commutative: bool) -> int:
        self.calls += 1
        if not reductions.is_registered(fn_name):
            raise UnknownFunction(f"reduction {fn_name!r} is not registered")
        h = self.backend.op_create(fn_name, commutative)
        vid = self.table.alloc(K_OP, h, OpDesc(None, commutative, fn_name))
        return vid

    def op_free(self, op: int) -> None:
        self.calls += 1
        if is_reserved(op):
            raise FreeingPredefined(f"vid {op:#010x} is predefined")
        od = self.table.get(op, K_OP)
        if od.ref_count > 0:
            raise StillReferenced(f"op {op:#010x} is referenced by live recipes")
        self.backend.op_free(od.real)
        self.table.free(op)

    # --- point-to-point ---

    def send(self, buf, count: int, dtype: int, dest: int, tag: int, comm: int,
             offset: int = 0) -> None:
        self.calls += 1
        if tag < 0:
            raise ValueError("application tags must be >= 0")
        ent = self._dtype_hot.get(dtype)
        if ent is None:
            ent = self._hot_dtype(dtype)
        hc = self._comm_hot.get(comm)
        if hc is None:
            hc = self._hot_comm(comm)
        self.backend.send(ent[0].pack(buf, offset, count), count, ent[1], dest,
                          tag, hc[0])
        cell = hc[1].get(dest)
        if cell is None:
            cell = self._counter_cell(comm, dest, hc)
        cell[0] += 1

    def recv(self, buf, count: int, dtype: int, source: int, tag: int, comm: int,
             offset: int = 0) -> Status:
        self.calls += 1
        ent = self._dtype_hot.get(dtype)
        if ent is None:
            ent = self._hot_dtype(dtype)
        hc = self._comm_hot.get(comm)
        if hc is None:
            hc = self._hot_comm(comm)
        if self.shadow is not None:
            hit = self.shadow.pop(comm, source, tag)
            if hit is not None:
                src, got_tag, payload = hit
                ent[0].unpack(payload, buf, offset, count)
                self.counters.bump_received(comm, src)
                return Status(src, got_tag, len(payload))
        payload, st = self.backend.recv(source, tag, hc[0])
        ent[0].unpack(payload, buf, offset, count)
        src = st.source
        cell = hc[1].get(src)
        if cell is None:
            cell = self._counter_cell(comm, src, hc)
        cell[1] += 1
        return st

    def iprobe(self, source: int, tag: int, comm: int):
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        if self.shadow is not None:
            hit = self.shadow.peek(comm, source, tag)
            if hit is not None:
                src, got_tag, payload = hit
                return True, Status(src, got_tag, len(payload))
        return self.backend.iprobe(source, tag, self._real(comm, cd))

    def isend(self, buf, count: int, dtype: int, dest: int, tag: int, comm: int,
              offset: int = 0) -> int:
        self.calls += 1
        if tag < 0:
            raise ValueError("application tags must be >= 0")
        cd = self.table.get(comm, K_COMM)
        td = self.table.get(dtype, K_DATATYPE)
        data = self._layout(td).pack(buf, offset, count)
        req_h = self.backend.isend(data, count, self._real(dtype, td), dest, tag,
                                   self._real(comm, cd))
        desc = RequestDesc(None, "isend", dest, tag, comm, "", completed=False)
        vid = self.table.alloc(K_REQUEST, req_h, desc)
        cd.ref_count += 1
        return vid

    def irecv(self, buf, count: int, dtype: int, source: int, tag: int, comm: int,
              offset: int = 0, token: Optional[str] = None) -> int:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        self.table.get(dtype, K_DATATYPE)
        desc = RequestDesc(None, "irecv", source, tag, comm, "", completed=False)
        vid = self.table.alloc(K_REQUEST, None, desc)
        desc.buffer_ref = token if token is not None else f"rx{desc.creation_seq}"
        self.register_buffer(desc.buffer_ref, buf, count, dtype, offset)
        desc.real = self.backend.irecv(source, tag, self._real(comm, cd),
                                       self._sink(desc.buffer_ref))
        cd.ref_count += 1
        return vid

    def register_buffer(self, token: str, buf, count: int, dtype: int,
                        offset: int = 0) -> None:
        """Bind a receive buffer to a stable token; raw addresses do not
        survive a restart, tokens do."""
        self._buffers[token] = (buf, offset, count, dtype)

    def _sink(self, token: str):
        def deliver(payload: bytes) -> None:
            buf, offset, count, dtype = self._buffers[token]
            td = self.table.get(dtype, K_DATATYPE)
            self._layout(td).unpack(payload, buf, offset, count)
        return deliver

    def _request_desc(self, req: int) -> RequestDesc:
        try:
            return self.table.get(req, K_REQUEST)
        except InvalidId:
            if vid_kind(req) == K_REQUEST:
                raise TestOnFreed(f"request {req:#010x} is not live") from None
            raise

    def _finish_request(self, req: int, desc: RequestDesc, st: Status) -> None:
        desc.completed = True
        desc.status = st
        if desc.req_kind == "isend":
            self.counters.bump_sent(desc.comm, desc.peer)
        else:
            self.counters.bump_received(desc.comm, st.source)
        self._release_request(req, desc)

    def _release_request(self, req: int, desc: RequestDesc) -> None:
        self.table.get(desc.comm).ref_count -= 1
        self._buffers.pop(desc.buffer_ref, None)
        self.table.free(req)

    def test(self, req: int):
        self.calls += 1
        desc = self._request_desc(req)
        if desc.completed:
            st = desc.status or Status(-1, desc.tag, 0)
            self._release_request(req, desc)
            return True, st
        if desc.req_kind == "irecv" and self.shadow is not None:
            hit = self.shadow.pop(desc.comm, desc.peer, desc.tag)
            if hit is not None:
                return True, self._shadow_complete(req, desc, hit)
        done, st = self.backend.test(desc.real)
        if not done:
            return False, None
        self._finish_request(req, desc, st)
        return True, st

    def wait(self, req: int) -> Status:
        self.calls += 1
        desc = self._request_desc(req)
        if desc.completed:
            st = desc.status or Status(-1, desc.tag, 0)
            self._release_request(req, desc)
            return st
        if desc.req_kind == "irecv" and self.shadow is not None:
            hit = self.shadow.pop(desc.comm, desc.peer, desc.tag)
            if hit is not None:
                return self._shadow_complete(req, desc, hit)
        st = self.backend.wait(desc.real)
        self._finish_request(req, desc, st)
        return st

    def _shadow_complete(self, req: int, desc: RequestDesc, hit) -> Status:
        src, tag, payload = hit
        self._sink(desc.buffer_ref)(payload)
        st = Status(src, tag, len(payload))
        if desc.real is not None:
            self.backend._cancel_request(desc.real)
        self._finish_request(req, desc, st)
        return st

    # --- collectives ---

    def barrier(self, comm: int) -> None:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        self.backend.barrier(self._real(comm, cd))

    def allreduce(self, values, op: int, comm: int) -> list:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        od = self.table.get(op, K_OP)
        return self.backend.allreduce(values, self._real(op, od), self._real(comm, cd))

    def bcast(self, value, root: int, comm: int):
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        return self.backend.bcast(value, root, self._real(comm, cd))

    def alltoall(self, items, comm: int) -> list:
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        return self.backend.alltoall(items, self._real(comm, cd))

    def gather(self, value, root: int, comm: int):
        self.calls += 1
        cd = self.table.get(comm, K_COMM)
        return self.backend.gather(value, root, self._real(comm, cd))

    # --- checkpoint boundary ---

    def maybe_checkpoint(self, step: int) -> None:
        """Step-boundary hook: enters the checkpoint protocol when due."""
        coord = self.coordinator
        if coord is None or not coord.due(self, step):
            return
        from .checkpoint import run_checkpoint

        run_checkpoint(self, coord)
        if self.exit_after_ckpt:
            raise CheckpointExit

    def finalize(self) -> None:
        if self.shadow is not None and len(self.shadow):
            raise ShadowNotEmpty(
                f"rank {self.rank}: {len(self.shadow)} drained messages never delivered"
            )
        self.backend.finalize()


def init_rank(backend_name: str, world_size: int, my_rank: int,
              transport: Transport, backend_factory=None) -> RankContext:
    """Construct and initialize one rank's runtime context."""
    return RankContext(backend_name, world_size, my_rank, transport, backend_factory)
