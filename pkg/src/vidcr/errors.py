"""Exception types raised by the runtime."""


class Error(Exception):
    """Base class for all runtime errors."""


# --- virtual-id table ---

class TableFull(Error):
    """Slot index space for an object kind is exhausted."""


class InvalidId(Error):
    """A virtual id does not name a live object of the expected kind."""


class TestOnFreed(InvalidId):
    """test/wait on a request id that was already completed and released."""


class NotFound(Error):
    """No live descriptor holds the queried backend handle."""


class FreeingPredefined(Error):
    """Attempt to free a reserved predefined id."""


class EmptyMembers(Error):
    """Group identity requested for an empty member list."""


class StillReferenced(Error):
    """Attempt to free an object another live object's recipe points at."""


class PendingMessages(Error):
    """Attempt to free a communicator with undelivered traffic."""


# --- backends ---

class SubsetViolation(Error):
    """Backend lacks a required function, or a call is outside its surface."""


class InvalidHandle(Error):
    """Handle is malformed or belongs to a different backend instance."""


class BackendInitFailure(Error):
    """Backend could not be constructed or initialized."""


# --- wrappers ---

class UnknownConstant(Error):
    """Name is not in the predefined constant namespace."""


class UnknownFunction(Error):
    """Reduction function name is not in the process-wide registry."""


class CommitTwice(Error):
    """type_commit called on an already-committed datatype."""


class BufferTooSmall(Error):
    """Incoming message does not fit the receive buffer's type map."""


# --- checkpoint / restart ---

class DrainTimeout(Error):
    """Drain did not reach the expected message counts within its bound."""


class BadMagic(Error):
    """Checkpoint file does not start with the image magic."""


class VersionMismatch(Error):
    """Checkpoint image version is not supported."""


class TruncatedSection(Error):
    """A length-prefixed image section does not parse to its declared size."""


class ImageSetIncomplete(Error):
    """Checkpoint directory does not hold one valid image per rank."""


class ReplayFailure(Error):
    """An object could not be re-created at restart."""

    def __init__(self, vid: int, reason: str):
        super().__init__(f"replay of vid {vid:#010x} failed: {reason}")
        self.vid = vid
        self.reason = reason


class MembershipMismatch(ReplayFailure):
    """Re-created communicator decodes to a different member list."""


class ShadowNotEmpty(Error):
    """Drained messages were left undelivered at finalize or checkpoint."""


# --- harness ---

class UnknownApp(Error):
    """Requested mini-app is not in the suite."""


class CheckpointExit(Exception):
    """Internal control flow: unwind the app after a checkpoint-and-exit."""
