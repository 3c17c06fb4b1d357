"""Restart: rebuild a semantically equivalent object world on a fresh
backend, possibly a different backend than the one that checkpointed.

Constants are re-resolved first (recipes may reference predefined ids),
then every recorded descriptor is replayed in creation order, which
guarantees both recipe dependencies and collective-call alignment
across ranks.  Raw vid values never change: only the descriptors'
backend handles are overwritten.  Drained messages are staged in a
shadow queue that receive calls consult before the backend.
"""

from __future__ import annotations

from collections import deque
from typing import Optional

from .checkpoint import CheckpointImage
from .errors import MembershipMismatch, ReplayFailure, UnknownFunction
from .vid import (
    ANY_SOURCE,
    ANY_TAG,
    CreateRecipe,
    DupRecipe,
    GroupFromComm,
    ObjectKind,
    SelfRecipe,
    SplitRecipe,
    WorldRecipe,
    is_reserved,
    vid_kind,
)
from .wrappers import RankContext


class ShadowQueue:
    """Per (comm vid, source comm rank, tag) FIFOs of drained payloads.

    Delivery order follows the drain's arrival index, so per-channel
    FIFO is preserved across the checkpoint boundary; each payload is
    handed out at most once.
    """

    def __init__(self):
        self._queues: dict = {}
        self._count = 0

    def push(self, comm: int, source: int, tag: int, arrival: int, payload: bytes):
        key = (comm, source, tag)
        q = self._queues.get(key)
        if q is None:
            q = self._queues[key] = deque()
        q.append((arrival, payload))
        self._count += 1

    def __len__(self) -> int:
        return self._count

    def _best(self, comm: int, source: int, tag: int):
        best_key = None
        best_arrival = None
        for (c, s, t), q in self._queues.items():
            if not q or c != comm:
                continue
            if source != ANY_SOURCE and s != source:
                continue
            if tag != ANY_TAG and t != tag:
                continue
            if best_arrival is None or q[0][0] < best_arrival:
                best_arrival = q[0][0]
                best_key = (c, s, t)
        return best_key

    def peek(self, comm: int, source: int, tag: int) -> Optional[tuple]:
        key = self._best(comm, source, tag)
        if key is None:
            return None
        return key[1], key[2], self._queues[key][0][1]

    def pop(self, comm: int, source: int, tag: int) -> Optional[tuple]:
        """Return (source comm rank, tag, payload) of the oldest match."""
        key = self._best(comm, source, tag)
        if key is None:
            return None
        _, payload = self._queues[key].popleft()
        self._count -= 1
        return key[1], key[2], payload


def build_replay_plan(table) -> list:
    """Live non-predefined descriptors, ascending by creation sequence."""
    plan = [(desc.creation_seq, vid, desc) for vid, desc in table.live()
            if not is_reserved(vid)]
    plan.sort(key=lambda e: e[0])
    return plan


def _handle(ctx: RankContext, vid: int):
    """Backend handle for a replayed or predefined vid, binding lazy
    constants on first touch."""
    return ctx._real(vid, ctx.table.get(vid))


def replay_object(ctx: RankContext, vid: int, desc) -> None:
    """Re-issue one descriptor's creation call and rebind its handle.

    All vids the recipe references were replayed earlier (smaller
    creation sequence) or are predefined.  Communicators are
    self-checked by decoding the re-created member list through the
    group-translation calls; datatypes by envelope decoding.
    """
    kind = vid_kind(vid)
    backend = ctx.backend
    table = ctx.table
    if kind == ObjectKind.COMM:
        r = desc.recipe
        if isinstance(r, SplitRecipe):
            desc.real = backend.comm_split(_handle(ctx, r.parent), r.color, r.key)
        elif isinstance(r, DupRecipe):
            desc.real = backend.comm_dup(_handle(ctx, r.parent))
        elif isinstance(r, CreateRecipe):
            desc.real = backend.comm_create(
                _handle(ctx, r.parent), _handle(ctx, r.group)
            )
        else:
            assert isinstance(r, (WorldRecipe, SelfRecipe))
            raise ReplayFailure(vid, "predefined recipe outside a reserved slot")
        decoded = ctx._decode_members(desc.real, count=len(desc.members))
        if decoded != tuple(desc.members):
            raise MembershipMismatch(
                vid, f"decoded members {decoded} != recorded {tuple(desc.members)}"
            )
    elif kind == ObjectKind.GROUP:
        r = desc.recipe
        if isinstance(r, GroupFromComm):
            desc.real = backend.comm_group(_handle(ctx, r.comm))
        else:
            desc.real = backend.group_incl(_handle(ctx, r.parent), list(r.ranks))
    elif kind == ObjectKind.DATATYPE:
        node = desc.recipe
        child = _handle(ctx, node.children[0])
        if node.combiner == "contiguous":
            desc.real = backend.type_contiguous(node.args[0], child)
        elif node.combiner == "vector":
            desc.real = backend.type_vector(*node.args, child)
        else:
            raise ReplayFailure(vid, f"cannot replay combiner {node.combiner!r}")
        if desc.committed:
            backend.type_commit(desc.real)
        combiner, ints = backend.type_get_envelope(desc.real)
        if combiner != node.combiner or tuple(ints) != tuple(node.args):
            raise ReplayFailure(
                vid, f"decoded envelope ({combiner}, {ints}) does not match the recipe"
            )
    elif kind == ObjectKind.OP:
        try:
            desc.real = backend.op_create(desc.fn_name, desc.commutative)
        except UnknownFunction:
            raise ReplayFailure(vid, "unknown reduction function") from None
    elif kind == ObjectKind.REQUEST:
        if desc.completed:
            desc.real = None
        elif desc.req_kind == "isend":
            raise ReplayFailure(vid, "incomplete isend cannot exist after a drain")
        else:
            desc.real = backend.irecv(desc.peer, desc.tag, _handle(ctx, desc.comm),
                                      ctx._sink(desc.buffer_ref))
    else:
        raise ReplayFailure(vid, f"unknown object kind {kind}")


def restore_rank(image: CheckpointImage, backend_name: str,
                 transport, backend_factory=None) -> RankContext:
    """Build a fresh rank context from one image and replay its world."""
    ctx = RankContext(backend_name, image.world_size, image.my_rank,
                      transport, backend_factory)
    table = ctx.table

    # place recorded descriptors at their exact slots (reserved ones
    # replace the constructor's fresh copies), restore allocator state;
    # a restored descriptor never starts with a handle
    for vid, desc in image.table.descriptors:
        desc.real = None
        table.install(vid, desc)
    for kind_int, (next_free, free_list) in image.table.alloc.items():
        table.restore_alloc_state(ObjectKind(kind_int), next_free, free_list)
    table.creation_counter = image.seq_high_water
    ctx._gid_seqs = dict(image.table.gid_seqs)

    # constants precede replay: recipes may reference predefined vids,
    # and the vid for a name never moves across a restart
    for name, vid in image.constmap:
        if ctx.constmap.vid_for(name) != vid:
            raise ReplayFailure(vid, f"constant {name!r} vid moved across restart")
    if ctx.backend.eager_constants:
        for name in ctx.constmap.names():
            ctx._bind_constant(name)

    ctx.counters.restore(image.counters)

    # reference counts are not serialized; rebuild them from recipes
    for vid, desc in table.live():
        recipe = getattr(desc, "recipe", None)
        if recipe is not None:
            _bump_refs(table, recipe)
        if vid_kind(vid) == ObjectKind.REQUEST:
            table.get(desc.comm).ref_count += 1

    for _, vid, desc in build_replay_plan(table):
        replay_object(ctx, vid, desc)

    shadow = ShadowQueue()
    by_identity = {(cd.gid, cd.gid_seq): (cvid, cd)
                   for cvid, cd in table.live(ObjectKind.COMM)}
    for m in sorted(image.drained, key=lambda d: d.arrival_index):
        entry = by_identity.get((m.gid, m.gid_seq))
        if entry is None:
            raise ReplayFailure(
                0, f"drained message names unknown comm identity "
                   f"({m.gid:#010x}, {m.gid_seq})"
            )
        cvid, cd = entry
        shadow.push(cvid, cd.members.index(m.src_world_rank), m.tag,
                    m.arrival_index, m.payload)
    ctx.shadow = shadow
    return ctx


def _bump_refs(table, recipe) -> None:
    for attr in ("parent", "group", "comm"):
        ref = getattr(recipe, attr, None)
        if isinstance(ref, int) and ref != 0:
            table.get(ref).ref_count += 1
    for child in getattr(recipe, "children", ()):
        table.get(child).ref_count += 1
