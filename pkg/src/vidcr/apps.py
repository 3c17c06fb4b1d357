"""Mini-app suite exercising the five object kinds through the wrapper API.

ring    - blocking pt2pt around the world with a contiguous datatype
halo    - 1-D periodic stencil exchanging strided boundary cells with a
          vector datatype over interleaved (value, aux) cells
splittree - recursive comm_split tree with a user reduction per level,
          plus group-based comm_create; frees everything at the end
storm   - seeded nonblocking traffic with receives withheld one step, so
          messages are in flight at every step boundary

All apps are deterministic in (params, seed, world_size): payloads and
traffic shapes come from a stateless integer mixer, never from timing,
backend, or checkpoint placement.  App state serializes to JSON; raw
vid values stored in state remain valid across a restart.
"""

from __future__ import annotations

import functools
import json

from . import reductions
from .errors import UnknownApp

_M64 = (1 << 64) - 1

reductions.register("sum_mod_97", lambda a, b: [(x + y) % 97 for x, y in zip(a, b)])


def mix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mixed(*parts: int) -> int:
    h = 0
    for p in parts:
        h = mix64(h ^ (p & _M64))
    return h


class MiniApp:
    """Base: a step loop with checkpoint boundaries between steps."""

    name = "base"
    deterministic = True

    def __init__(self, world_size: int, rank: int, seed: int, params: dict = None):
        self.world_size = world_size
        self.rank = rank
        self.seed = seed
        self.params = dict(params or {})
        self.step = 0
        self.did_setup = False
        self.steps = int(self.params.get("steps", 6))

    def run(self, ctx) -> None:
        if not self.did_setup:
            self.setup(ctx)
            self.did_setup = True
        while self.step < self.steps:
            ctx.maybe_checkpoint(self.step)
            self.body(ctx, self.step)
            self.step += 1
        ctx.maybe_checkpoint(self.steps)
        self.settle(ctx)

    def setup(self, ctx) -> None:
        pass

    def body(self, ctx, step: int) -> None:
        raise NotImplementedError

    def settle(self, ctx) -> None:
        pass

    # state round-trip; subclasses extend the dict
    def state_dict(self) -> dict:
        return {"step": self.step, "did_setup": self.did_setup}

    def apply_state(self, ctx, state: dict) -> None:
        self.step = state["step"]
        self.did_setup = state["did_setup"]

    def save_state(self) -> bytes:
        return json.dumps(self.state_dict(), sort_keys=True).encode("utf-8")

    def load_state(self, ctx, blob: bytes) -> None:
        self.apply_state(ctx, json.loads(blob.decode("utf-8")))


class RingApp(MiniApp):
    name = "ring"

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.vals = [self.rank + 1, self.seed % 1009 + 1]
        self.world = 0
        self.dtype = 0

    def setup(self, ctx) -> None:
        self.world = ctx.resolve("COMM_WORLD")
        self.dtype = ctx.type_contiguous(2, ctx.resolve("INT64"))
        ctx.type_commit(self.dtype)

    def body(self, ctx, step: int) -> None:
        n = self.world_size
        right = (self.rank + 1) % n
        left = (self.rank - 1) % n
        ctx.send(self.vals, 1, self.dtype, right, step % 8, self.world)
        inbound = [0, 0]
        ctx.recv(inbound, 1, self.dtype, left, step % 8, self.world)
        self.vals = [
            (self.vals[0] + inbound[0] + step) % 1_000_003,
            (self.vals[1] * 31 + inbound[1]) % 1_000_033,
        ]

    def state_dict(self) -> dict:
        d = super().state_dict()
        d.update(vals=self.vals, world=self.world, dtype=self.dtype)
        return d

    def apply_state(self, ctx, state: dict) -> None:
        super().apply_state(ctx, state)
        self.vals = list(state["vals"])
        self.world = state["world"]
        self.dtype = state["dtype"]


class HaloApp(MiniApp):
    """Periodic 1-D stencil; cells hold (value, aux) interleaved and the
    exchange sends only the value fields through a vector datatype, so a
    layout bug would corrupt the aux fields and change the digest."""

    name = "halo"
    CELLS = 8   # interior cells per rank
    GHOST = 2   # ghost cells per side

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        total = self.CELLS + 2 * self.GHOST
        self.buf = [0.0] * (2 * total)
        for c in range(total):
            self.buf[2 * c] = float(self.rank * 1000 + c)
            self.buf[2 * c + 1] = float(c * 7 + self.rank)
        self.world = 0
        self.vec = 0

    def setup(self, ctx) -> None:
        self.world = ctx.resolve("COMM_WORLD")
        self.vec = ctx.type_vector(self.GHOST, 1, 2, ctx.resolve("DOUBLE"))
        ctx.type_commit(self.vec)

    def body(self, ctx, step: int) -> None:
        n = self.world_size
        c, g = self.CELLS, self.GHOST
        left = (self.rank - 1) % n
        right = (self.rank + 1) % n
        # my first interior cells go to the left neighbor's right ghosts,
        # my last interior cells to the right neighbor's left ghosts
        ctx.send(self.buf, 1, self.vec, left, 0, self.world, offset=2 * g)
        ctx.send(self.buf, 1, self.vec, right, 1, self.world, offset=2 * c)
        ctx.recv(self.buf, 1, self.vec, right, 0, self.world, offset=2 * (c + g))
        ctx.recv(self.buf, 1, self.vec, left, 1, self.world, offset=0)
        old = self.buf[::2]
        for cell in range(g, c + g):
            self.buf[2 * cell] = (
                2.0 * old[cell]
                + old[cell - 2] + old[cell - 1] + old[cell + 1] + old[cell + 2]
            ) / 6.0

    def state_dict(self) -> dict:
        d = super().state_dict()
        d.update(buf=self.buf, world=self.world, vec=self.vec)
        return d

    def apply_state(self, ctx, state: dict) -> None:
        super().apply_state(ctx, state)
        self.buf = list(state["buf"])
        self.world = state["world"]
        self.vec = state["vec"]


class SplitTreeApp(MiniApp):
    """Halving comm_split tree; a user-op allreduce runs per level on the
    current sub-communicator, and even ranks also reduce over a
    group-created communicator.  Everything is freed in settle."""

    name = "splittree"

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        levels = 0
        n = self.world_size
        while n > 1:
            levels += 1
            n //= 2
        self.steps = int(self.params.get("steps", levels + 1))
        self.results: list = []
        self.comms: list = []
        self.op = 0
        self.world_group = 0
        self.even_group = 0
        self.even_comm = 0

    def setup(self, ctx) -> None:
        world = ctx.resolve("COMM_WORLD")
        self.comms = [world]
        self.op = ctx.op_create("sum_mod_97", True)
        self.world_group = ctx.comm_group(world)
        evens = [r for r in range(self.world_size) if r % 2 == 0]
        self.even_group = ctx.group_incl(self.world_group, evens)
        self.even_comm = ctx.comm_create(world, self.even_group)

    def body(self, ctx, step: int) -> None:
        cur = self.comms[-1]
        vals = [(self.rank + 1 + step) % 97, (self.seed + step) % 97]
        self.results.append(ctx.allreduce(vals, self.op, cur))
        if self.even_comm:
            self.results.append(ctx.allreduce([step % 97], self.op, self.even_comm))
        if ctx.comm_size(cur) > 1:
            idx = ctx.comm_rank(cur)
            color = idx * 2 // ctx.comm_size(cur)
            child = ctx.comm_split(cur, color, idx)
            self.comms.append(child)

    def settle(self, ctx) -> None:
        for vid in reversed(self.comms[1:]):
            ctx.comm_free(vid)
        if self.even_comm:
            ctx.comm_free(self.even_comm)
        ctx.group_free(self.even_group)
        ctx.group_free(self.world_group)
        ctx.op_free(self.op)
        self.comms = [self.comms[0]]
        self.even_comm = 0

    def state_dict(self) -> dict:
        d = super().state_dict()
        d.update(results=self.results, comms=self.comms, op=self.op,
                 world_group=self.world_group, even_group=self.even_group,
                 even_comm=self.even_comm)
        return d

    def apply_state(self, ctx, state: dict) -> None:
        super().apply_state(ctx, state)
        self.results = [list(r) for r in state["results"]]
        self.comms = list(state["comms"])
        self.op = state["op"]
        self.world_group = state["world_group"]
        self.even_group = state["even_group"]
        self.even_comm = state["even_comm"]


@functools.lru_cache(maxsize=256)
def storm_traffic(seed: int, world_size: int, step: int, base_msgs: int) -> tuple:
    """Full send matrix for one step: sender -> ((dest, tag, values), ...).

    Pure data, so every rank derives the same matrix and can post exact
    receives for what is addressed to it."""
    out = []
    for s in range(world_size):
        n = base_msgs + mixed(seed, step, s, 1) % 4
        msgs = []
        for i in range(n):
            dest = mixed(seed, step, s, 2, i) % world_size
            tag = mixed(seed, step, s, 3, i) % 4
            length = 1 + mixed(seed, step, s, 4, i) % 4
            vals = tuple(
                mixed(seed, step, s, 5, i, j) % (1 << 31) for j in range(length)
            )
            msgs.append((dest, tag, vals))
        out.append(tuple(msgs))
    return tuple(out)


class StormApp(MiniApp):
    """Nonblocking random traffic; step s receives only step s-1's
    messages, so the transport is never empty at a boundary after the
    first."""

    name = "storm"

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.base_msgs = int(self.params.get("base_msgs", 13))
        self.world = 0
        self.int64 = 0
        self.pending: list = []    # (req vid, token, src rank, tag, count)
        self.send_reqs: list = []
        self.recv_log: dict = {}   # "src:tag" -> list of value lists
        self._bufs: dict = {}      # token -> live receive list

    def setup(self, ctx) -> None:
        self.world = ctx.resolve("COMM_WORLD")
        self.int64 = ctx.resolve("INT64")

    def _complete_pending(self, ctx) -> None:
        for i, (req, token, src, tag, count) in enumerate(self.pending):
            if i % 2 == 0:
                done, _ = ctx.test(req)
                if not done:
                    ctx.wait(req)
            else:
                ctx.wait(req)
            self.recv_log.setdefault(f"{src}:{tag}", []).append(
                list(self._bufs.pop(token))
            )
        self.pending = []
        for req in self.send_reqs:
            ctx.wait(req)
        self.send_reqs = []

    def body(self, ctx, step: int) -> None:
        self._complete_pending(ctx)
        matrix = storm_traffic(self.seed, self.world_size, step, self.base_msgs)
        for dest, tag, vals in matrix[self.rank]:
            req = ctx.isend(list(vals), len(vals), self.int64, dest, tag, self.world)
            self.send_reqs.append(req)
        for src in range(self.world_size):
            for i, (dest, tag, vals) in enumerate(matrix[src]):
                if dest != self.rank:
                    continue
                token = f"s{step}src{src}i{i}"
                buf = [0] * len(vals)
                req = ctx.irecv(buf, len(vals), self.int64, src, tag, self.world,
                                token=token)
                self._bufs[token] = buf
                self.pending.append((req, token, src, tag, len(vals)))

    def settle(self, ctx) -> None:
        self._complete_pending(ctx)

    def state_dict(self) -> dict:
        d = super().state_dict()
        d.update(
            world=self.world,
            int64=self.int64,
            pending=self.pending,
            send_reqs=self.send_reqs,
            recv_log=self.recv_log,
        )
        return d

    def apply_state(self, ctx, state: dict) -> None:
        super().apply_state(ctx, state)
        self.world = state["world"]
        self.int64 = state["int64"]
        self.pending = [tuple(p) for p in state["pending"]]
        self.send_reqs = list(state["send_reqs"])
        self.recv_log = {k: [list(v) for v in vs] for k, vs in state["recv_log"].items()}
        self._bufs = {}
        for req, token, src, tag, count in self.pending:
            buf = [0] * count
            ctx.register_buffer(token, buf, count, self.int64)
            self._bufs[token] = buf


APPS = {
    "ring": RingApp,
    "halo": HaloApp,
    "splittree": SplitTreeApp,
    "storm": StormApp,
}


def make_app(name: str, world_size: int, rank: int, seed: int,
             params: dict = None) -> MiniApp:
    try:
        cls = APPS[name]
    except KeyError:
        raise UnknownApp(f"unknown app {name!r}") from None
    return cls(world_size, rank, seed, params)
