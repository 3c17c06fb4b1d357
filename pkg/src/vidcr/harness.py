"""Launcher: spawn rank contexts on threads, run apps, compare digests.

Each rank context is confined to one thread; the shared transport is
the only cross-thread object.  A run's digest is an order-insensitive
hash over (rank, final state bytes), so runs are comparable across
backends regardless of scheduling.  A run with a checkpoint trigger
writes one image per rank and (by default) exits at the checkpoint;
`restart_cmd` resumes from the images on any backend and runs to
completion.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .apps import APPS, make_app
from .checkpoint import CheckpointCoordinator, image_path, read_image
from .errors import CheckpointExit, ImageSetIncomplete, UnknownApp
from .restart import restore_rank
from .backends.transport import Transport
from .vid import ObjectKind, vid_kind
from .wrappers import init_rank

_JOIN_TIMEOUT = 120.0


@dataclass
class LaunchReport:
    app: str
    ranks: int
    backend: str
    seed: int
    digest: str = ""
    rank_digests: dict = field(default_factory=dict)
    wall_time: float = 0.0
    wrapper_calls: int = 0
    exited_at_checkpoint: bool = False
    epoch_dirs: list = field(default_factory=list)
    drained_total: Optional[int] = None
    transport_pending_after_drain: Optional[int] = None
    transport_pending_at_end: int = 0
    shadow_leftover: int = 0
    object_tables: Optional[dict] = None
    rank_states: Optional[dict] = None

    def lines(self) -> list:
        out = [
            "status=ok",
            f"app={self.app} ranks={self.ranks} backend={self.backend} seed={self.seed}",
            f"digest={self.digest}",
            f"wall_time_s={self.wall_time:.6f}",
            f"wrapper_calls={self.wrapper_calls}",
            f"exited_at_checkpoint={int(self.exited_at_checkpoint)}",
        ]
        if self.epoch_dirs:
            out.append(f"ckpt_epoch_dir={self.epoch_dirs[-1]}")
        if self.drained_total is not None:
            out.append(f"drained_total={self.drained_total}")
            out.append(f"transport_pending_after_drain={self.transport_pending_after_drain}")
        out.append(f"shadow_leftover={self.shadow_leftover}")
        return out


def rank_digest(rank: int, state: bytes) -> str:
    return hashlib.sha256(f"{rank}:".encode() + state).hexdigest()


def combined_digest(per_rank: dict) -> str:
    return hashlib.sha256("".join(sorted(per_rank.values())).encode()).hexdigest()


def _dump_objects(ctx) -> list:
    rows = []
    for vid, desc in ctx.table.live():
        kind = ObjectKind(vid_kind(vid)).name
        real = None if desc.real is None else (desc.real.width, desc.real.value)
        extra = {}
        if kind == "COMM":
            extra = {"gid": desc.gid, "gid_seq": desc.gid_seq, "members": list(desc.members)}
        rows.append((vid, kind, real, extra))
    return rows


def _run_ranks(targets: list) -> None:
    """Run one callable per rank on its own thread; re-raise the first failure."""
    errors: list = [None] * len(targets)

    def runner(i, fn):
        try:
            fn()
        except BaseException as e:  # noqa: BLE001 - collected and re-raised
            errors[i] = e

    threads = [
        threading.Thread(target=runner, args=(i, fn), daemon=True, name=f"rank{i}")
        for i, fn in enumerate(targets)
    ]
    for t in threads:
        t.start()
    deadline = time.monotonic() + _JOIN_TIMEOUT
    for t in threads:
        t.join(max(0.1, deadline - time.monotonic()))
    hung = [t.name for t in threads if t.is_alive()]
    if hung:
        raise RuntimeError(f"rank threads did not finish: {hung}")
    for e in errors:
        if e is not None:
            raise e


def launch(app: str, ranks: int, backend: str, ckpt_after=None,
           ckpt_dir: Optional[str] = None, seed: int = 0,
           exit_after_ckpt: bool = True, external_delay: Optional[float] = None,
           app_params: Optional[dict] = None, backend_factory=None,
           collect_tables: bool = False, collect_states: bool = False) -> LaunchReport:
    if app not in APPS:
        raise UnknownApp(f"unknown app {app!r}")
    if ranks < 1:
        raise ValueError("ranks must be >= 1")
    transport = Transport(ranks)
    coord = None
    wants_ckpt = ckpt_after is not None or external_delay is not None
    if wants_ckpt:
        if ckpt_dir is None:
            raise ValueError("checkpointing requires ckpt_dir")
        steps = [ckpt_after] if isinstance(ckpt_after, int) else sorted(ckpt_after or [])
        manifest = {"app": app, "ranks": ranks, "seed": seed,
                    "params": dict(app_params or {})}
        coord = CheckpointCoordinator(ranks, transport, ckpt_dir, steps, manifest)

    report = LaunchReport(app, ranks, backend, seed)
    states: dict = {}
    calls: dict = {}
    exited: dict = {}
    tables: dict = {}

    def one_rank(r: int):
        def body():
            ctx = init_rank(backend, ranks, r, transport, backend_factory)
            ctx.coordinator = coord
            ctx.exit_after_ckpt = exit_after_ckpt
            a = make_app(app, ranks, r, seed, app_params)
            ctx.state_provider = a.save_state
            stopped = False
            try:
                a.run(ctx)
            except CheckpointExit:
                stopped = True
            if coord is not None and not stopped:
                coord.rank_done(r)
            states[r] = a.save_state()
            calls[r] = ctx.calls
            exited[r] = stopped
            if collect_tables:
                tables[r] = _dump_objects(ctx)
            ctx.finalize()
        return body

    start = time.perf_counter()
    if external_delay is not None:
        threading.Timer(external_delay, coord.request_external).start()
    _run_ranks([one_rank(r) for r in range(ranks)])
    report.wall_time = time.perf_counter() - start

    report.rank_digests = {r: rank_digest(r, states[r]) for r in states}
    report.digest = combined_digest(report.rank_digests)
    report.wrapper_calls = sum(calls.values())
    report.exited_at_checkpoint = any(exited.values())
    report.transport_pending_at_end = transport.pending_total()
    if coord is not None and coord.stats["rounds"]:
        report.epoch_dirs = list(coord.stats["epoch_dirs"])
        report.drained_total = sum(coord.stats["drained"].values())
        report.transport_pending_after_drain = coord.stats["transport_pending_after"]
    if collect_tables:
        report.object_tables = tables
    if collect_states:
        report.rank_states = dict(states)
    return report


def resolve_epoch_dir(ckpt_dir: str) -> str:
    """Accept either an epoch directory or its parent; pick the newest epoch."""
    if not os.path.isdir(ckpt_dir):
        raise ImageSetIncomplete(f"{ckpt_dir} is not a directory")
    if any(n.startswith("ckpt_rank") and n.endswith(".mcri")
           for n in os.listdir(ckpt_dir)):
        return ckpt_dir
    epochs = sorted(
        (n for n in os.listdir(ckpt_dir) if n.startswith("epoch_")),
        key=lambda n: int(n.split("_", 1)[1]),
    )
    if not epochs:
        raise ImageSetIncomplete(f"no checkpoint images under {ckpt_dir}")
    return os.path.join(ckpt_dir, epochs[-1])


def restart_cmd(ckpt_dir: str, backend: str, backend_factory=None,
                collect_tables: bool = False,
                collect_states: bool = False) -> LaunchReport:
    epoch = resolve_epoch_dir(ckpt_dir)
    manifest_path = os.path.join(epoch, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise ImageSetIncomplete(f"missing manifest.json in {epoch}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    ranks = int(manifest["ranks"])
    for r in range(ranks):
        if not os.path.isfile(image_path(epoch, r)):
            raise ImageSetIncomplete(f"missing image for rank {r} in {epoch}")

    transport = Transport(ranks)
    report = LaunchReport(manifest["app"], ranks, backend, int(manifest["seed"]))
    states: dict = {}
    calls: dict = {}
    tables: dict = {}
    shadow_sizes: dict = {}

    def one_rank(r: int):
        def body():
            image = read_image(image_path(epoch, r))
            if image.world_size != ranks or image.my_rank != r:
                raise ImageSetIncomplete(
                    f"image for rank {r} claims rank {image.my_rank} "
                    f"of {image.world_size}"
                )
            ctx = restore_rank(image, backend, transport, backend_factory)
            a = make_app(manifest["app"], ranks, r, int(manifest["seed"]),
                         manifest.get("params") or {})
            a.load_state(ctx, image.appstate)
            ctx.state_provider = a.save_state
            a.run(ctx)
            states[r] = a.save_state()
            calls[r] = ctx.calls
            shadow_sizes[r] = len(ctx.shadow) if ctx.shadow is not None else 0
            if collect_tables:
                tables[r] = _dump_objects(ctx)
            ctx.finalize()
        return body

    start = time.perf_counter()
    _run_ranks([one_rank(r) for r in range(ranks)])
    report.wall_time = time.perf_counter() - start

    report.rank_digests = {r: rank_digest(r, states[r]) for r in states}
    report.digest = combined_digest(report.rank_digests)
    report.wrapper_calls = sum(calls.values())
    report.shadow_leftover = sum(shadow_sizes.values())
    report.transport_pending_at_end = transport.pending_total()
    if collect_tables:
        report.object_tables = tables
    if collect_states:
        report.rank_states = dict(states)
    return report


@dataclass
class BenchReport:
    backend: str
    iterations: int
    wrapper_s: float
    direct_s: float
    overhead_ratio: float
    probes_per_lookup_small: float
    probes_per_lookup_large: float
    issued_wrapper_calls: int
    counted_wrapper_calls: int

    def lines(self) -> list:
        return [
            "status=ok",
            f"backend={self.backend} iterations={self.iterations}",
            f"wrapper_s={self.wrapper_s:.6f}",
            f"direct_s={self.direct_s:.6f}",
            f"overhead_ratio={self.overhead_ratio:.4f}",
            f"probes_per_lookup_small={self.probes_per_lookup_small:.2f}",
            f"probes_per_lookup_large={self.probes_per_lookup_large:.2f}",
            f"issued_wrapper_calls={self.issued_wrapper_calls}",
            f"counted_wrapper_calls={self.counted_wrapper_calls}",
        ]


def _probes_per_lookup(ctx, population: int, lookups: int = 1000) -> float:
    from .vid import OpDesc, make_vid

    table = ctx.table
    have = sum(1 for _ in table.live(ObjectKind.OP))
    probe_vid = make_vid(ObjectKind.OP, 0)  # predefined sum op
    for _ in range(max(0, population - have)):
        probe_vid = table.alloc(ObjectKind.OP, None, OpDesc(None, True, "sum"))
    before = table.probe_count
    for _ in range(lookups):
        table.get(probe_vid)
    return (table.probe_count - before) / lookups


def bench_translation(iterations: int, backend: str) -> BenchReport:
    """Tight self-send loop, wrapper path vs direct backend path."""
    import gc

    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    transport = Transport(1)
    ctx = init_rank(backend, 1, 0, transport)
    issued = 0
    world = ctx.resolve("COMM_WORLD")
    int64 = ctx.resolve("INT64")
    issued += 2
    payload = [7]
    out = [0]

    b = ctx.backend
    comm_h = ctx.table.get(world).real
    type_h = ctx.table.get(int64).real
    layout = ctx._layout(ctx.table.get(int64))

    warmup = min(iterations, 1000)
    for _ in range(warmup):
        ctx.send(payload, 1, int64, 0, 0, world)
        ctx.recv(out, 1, int64, 0, 0, world)
        b.send(layout.pack(payload, 0, 1), 1, type_h, 0, 0, comm_h)
        data, _st = b.recv(0, 0, comm_h)
        layout.unpack(data, out, 0, 1)
    issued += 2 * warmup

    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        for _ in range(iterations):
            ctx.send(payload, 1, int64, 0, 0, world)
            ctx.recv(out, 1, int64, 0, 0, world)
        wrapper_s = time.perf_counter() - t0
        issued += 2 * iterations

        t0 = time.perf_counter()
        for _ in range(iterations):
            b.send(layout.pack(payload, 0, 1), 1, type_h, 0, 0, comm_h)
            data, _st = b.recv(0, 0, comm_h)
            layout.unpack(data, out, 0, 1)
        direct_s = time.perf_counter() - t0
    finally:
        if gc_was_on:
            gc.enable()

    small = _probes_per_lookup(ctx, population=10)
    large = _probes_per_lookup(ctx, population=100_000)
    counted = ctx.calls
    ctx.finalize()
    return BenchReport(
        backend=backend,
        iterations=iterations,
        wrapper_s=wrapper_s,
        direct_s=direct_s,
        overhead_ratio=wrapper_s / direct_s if direct_s > 0 else float("inf"),
        probes_per_lookup_small=small,
        probes_per_lookup_large=large,
        issued_wrapper_calls=issued,
        counted_wrapper_calls=counted,
    )
