"""Checkpoint-restart runtime with virtualized MPI-style object ids.

Applications hold stable 32-bit virtual ids for communicators, groups,
requests, operations, and datatypes; the ids translate against
pluggable backends with radically different native handle encodings.
Coordinated checkpoints drain in-flight messages using only a core call
subset, and restart rebuilds every object by record-replay, on the same
backend or a different one.
"""

from . import reductions
from .backends import (
    BACKENDS,
    BackendHandle,
    RecordingBackend,
    RestrictedBackend,
    Status,
    Transport,
    drain_primitives_check,
    make_backend,
)
from .checkpoint import (
    CheckpointCoordinator,
    CheckpointImage,
    DrainedMessage,
    drain_messages,
    image_path,
    parse_image,
    read_image,
    serialize_image,
    write_image,
)
from .harness import BenchReport, LaunchReport, bench_translation, launch, restart_cmd
from .restart import ShadowQueue, build_replay_plan, replay_object, restore_rank
from .vid import (
    ANY_SOURCE,
    ANY_TAG,
    VID_NULL,
    DescriptorTable,
    ObjectKind,
    group_id,
    make_vid,
    vid_kind,
    vid_slot,
)
from .wrappers import RankContext, init_rank

__version__ = "0.1.0"

__all__ = [
    "ANY_SOURCE",
    "ANY_TAG",
    "BACKENDS",
    "BackendHandle",
    "BenchReport",
    "CheckpointCoordinator",
    "CheckpointImage",
    "DescriptorTable",
    "DrainedMessage",
    "LaunchReport",
    "ObjectKind",
    "RankContext",
    "RecordingBackend",
    "RestrictedBackend",
    "ShadowQueue",
    "Status",
    "Transport",
    "VID_NULL",
    "bench_translation",
    "build_replay_plan",
    "drain_messages",
    "drain_primitives_check",
    "group_id",
    "image_path",
    "init_rank",
    "launch",
    "make_backend",
    "make_vid",
    "parse_image",
    "read_image",
    "reductions",
    "replay_object",
    "restart_cmd",
    "restore_rank",
    "serialize_image",
    "vid_kind",
    "vid_slot",
    "write_image",
]
