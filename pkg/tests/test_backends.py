import pytest

from conftest import fnv_oracle
from vidcr.backends import (
    BackendHandle,
    RecordingBackend,
    RestrictedBackend,
    drain_primitives_check,
    make_backend,
)
from vidcr.backends.int_table import KIND_CODES, decode_handle
from vidcr.backends.transport import Transport
from vidcr.errors import (
    BackendInitFailure,
    CommitTwice,
    InvalidHandle,
    SubsetViolation,
    UnknownConstant,
    UnknownFunction,
)
from vidcr.harness import _run_ranks
from vidcr.vid import ANY_SOURCE, ANY_TAG

BACKENDS = ["int_table", "word_handle", "lazy_const"]


def single(name: str):
    b = make_backend(name)
    b.init(1, 0, Transport(1))
    return b


def run_backends(world_size: int, name: str, rank_fn) -> list:
    transport = Transport(world_size)
    results = [None] * world_size

    def make(r):
        def body():
            b = make_backend(name)
            b.init(world_size, r, transport)
            results[r] = rank_fn(b, r)
        return body

    _run_ranks([make(r) for r in range(world_size)])
    return results


def test_unknown_backend_name():
    with pytest.raises(BackendInitFailure):
        make_backend("openmpi")


# --- int_table: fixed 32-bit table-coded handles ---

def test_int_table_constants_identical_across_sessions():
    h1 = single("int_table").resolve_constant("COMM_WORLD")
    h2 = single("int_table").resolve_constant("COMM_WORLD")
    assert h1 == h2
    assert h1.width == 32


def test_int_table_kind_bits_differ_between_comm_and_datatype():
    b = single("int_table")
    comm = b.resolve_constant("COMM_WORLD")
    dtype = b.resolve_constant("INT64")
    assert decode_handle(comm.value)[0] == KIND_CODES["comm"]
    assert decode_handle(dtype.value)[0] == KIND_CODES["datatype"]
    assert decode_handle(comm.value)[0] != decode_handle(dtype.value)[0]


def test_int_table_dups_are_distinct():
    b = single("int_table")
    w = b.comm_world()
    d1 = b.comm_dup(w)
    d2 = b.comm_dup(w)
    assert len({w.value, d1.value, d2.value}) == 3


# --- word_handle: machine-word handles, session nonce ---

def test_word_handle_constants_vary_across_sessions():
    h1 = single("word_handle").resolve_constant("COMM_WORLD")
    h2 = single("word_handle").resolve_constant("COMM_WORLD")
    assert h1.width == 64
    assert h1 != h2


def test_word_handle_stable_within_session():
    b = single("word_handle")
    assert b.resolve_constant("COMM_WORLD") == b.resolve_constant("COMM_WORLD")
    assert b.comm_world() == b.comm_world()


def test_word_handle_comm_rank():
    ranks = run_backends(8, "word_handle", lambda b, r: b.comm_rank(b.comm_world()))
    assert ranks == list(range(8))


def test_foreign_handle_is_detected():
    b1 = single("word_handle")
    b2 = single("word_handle")
    foreign = b1.comm_world()
    with pytest.raises(InvalidHandle):
        b2.comm_rank(foreign)


# --- lazy_const: deferred constants, aliased primitives, subset surface ---

def test_lazy_const_aliases_share_one_handle():
    b = single("lazy_const")
    int8 = b.resolve_constant("INT8")
    char = b.resolve_constant("CHAR")
    assert int8 == char
    assert int8.width == 32


def test_lazy_const_materializes_on_first_resolution():
    b = single("lazy_const")
    assert b._constants == {}
    h = b.resolve_constant("DOUBLE")
    assert b._constants["DOUBLE"] == h
    # resolution works before any communication, and is stable after
    assert b.resolve_constant("DOUBLE") == h


def test_lazy_const_rejects_calls_outside_its_surface():
    b = single("lazy_const")
    assert "gather" not in b.provides
    with pytest.raises(SubsetViolation):
        b.gather(1, 0, b.comm_world())


def test_unknown_constant():
    with pytest.raises(UnknownConstant):
        single("int_table").resolve_constant("COMM_GALAXY")


# --- subset gate ---

@pytest.mark.parametrize("name", BACKENDS)
def test_drain_primitives_check_passes_single_rank(name):
    report = drain_primitives_check(single(name))
    assert report.passed
    assert report.categories == {1: (True, None), 2: (True, None), 3: (True, None)}
    assert report.extensions["gather"] == (name != "lazy_const")
    assert report.extensions["barrier"] is True


def test_drain_primitives_check_alltoall_pattern_four_ranks():
    # every rank contributes its id, so each must collect [0, 1, 2, 3]
    reports = run_backends(4, "int_table", lambda b, r: drain_primitives_check(b))
    assert all(rep.passed for rep in reports)


def test_stub_without_iprobe_fails_category_one():
    inner = single("int_table")
    stub = RestrictedBackend(inner, {"iprobe"})
    with pytest.raises(SubsetViolation, match="iprobe"):
        drain_primitives_check(stub)


def test_init_rejects_backend_lacking_required_call():
    class Crippled(type(make_backend("int_table"))):
        provides = make_backend("int_table").provides - frozenset({"alltoall"})

    b = Crippled()
    with pytest.raises(SubsetViolation, match="alltoall"):
        b.init(1, 0, Transport(1))


# --- pt2pt and collective semantics ---

@pytest.mark.parametrize("name", BACKENDS)
def test_send_probe_recv_cycle(name):
    b = single(name)
    int64 = b.resolve_constant("INT64")
    me = b.comm_self()
    b.send(b"\x07" * 16, 2, int64, 0, 4, me)
    flag, st = b.iprobe(ANY_SOURCE, ANY_TAG, me)
    assert flag and (st.source, st.tag, st.nbytes) == (0, 4, 16)
    payload, st2 = b.recv(0, 4, me)
    assert payload == b"\x07" * 16
    assert (st2.source, st2.tag, st2.nbytes) == (0, 4, 16)


@pytest.mark.parametrize("name", BACKENDS)
def test_fifo_order_per_channel_under_seeded_storm(name):
    def rank_fn(b, r):
        world = b.comm_world()
        int64 = b.resolve_constant("INT64")
        n = b.world_size
        for i in range(20):
            dest = (r + 1 + i) % n
            b.send(bytes([r, i % 251]), 1, int64, dest, i % 3, world)
        b.barrier(world)
        seen = {}
        while True:
            flag, st = b.iprobe(ANY_SOURCE, ANY_TAG, world)
            if not flag:
                break
            payload, st2 = b.recv(st.source, st.tag, world)
            seen.setdefault((st2.source, st2.tag), []).append(payload[1])
        return seen

    results = run_backends(3, name, rank_fn)
    for seen in results:
        for (_, _), idxs in seen.items():
            assert idxs == sorted(idxs)


def test_isend_test_wait_lifecycle():
    b = single("int_table")
    int64 = b.resolve_constant("INT64")
    me = b.comm_self()
    req = b.isend(b"\x01" * 8, 1, int64, 0, 1, me)
    done, st = b.test(req)
    assert done and st.nbytes == 8
    with pytest.raises(InvalidHandle):
        b.test(req)  # released on success
    got = []
    req2 = b.irecv(ANY_SOURCE, ANY_TAG, me, got.append)
    done, st = b.test(req2)
    assert done and got == [b"\x01" * 8]


def test_irecv_test_returns_false_before_any_send():
    b = single("int_table")
    req = b.irecv(ANY_SOURCE, ANY_TAG, b.comm_self(), None)
    done, st = b.test(req)
    assert (done, st) == (False, None)


@pytest.mark.parametrize("name", BACKENDS)
def test_comm_split_membership_and_order(name):
    def rank_fn(b, r):
        child = b.comm_split(b.comm_world(), r % 2, 10 - r)
        grp = b.comm_group(child)
        wg = b.comm_group(b.comm_world())
        size = b.comm_size(child)
        return b.group_translate_ranks(grp, list(range(size)), wg)

    members = run_backends(4, name, rank_fn)
    # key 10-r reverses rank order inside each color class
    assert members[0] == members[2] == [2, 0]
    assert members[1] == members[3] == [3, 1]


def test_comm_create_from_group_subset():
    def rank_fn(b, r):
        wg = b.comm_group(b.comm_world())
        evens = b.group_incl(wg, [0, 2])
        if r % 2 == 0:
            c = b.comm_create(b.comm_world(), evens)
            return b.comm_size(c), b.comm_rank(c)
        return None

    out = run_backends(4, "word_handle", rank_fn)
    assert out == [(2, 0), None, (2, 1), None]


def test_group_translate_reports_missing_as_minus_one():
    b = single("int_table")
    wg = b.comm_group(b.comm_world())
    sub = b.group_incl(wg, [0])
    assert b.group_translate_ranks(wg, [0], sub) == [0]
    b2_members = b.group_translate_ranks(sub, [0], sub)
    assert b2_members == [0]


def test_allreduce_user_function_hand_oracle():
    from vidcr import reductions

    reductions.register("sum_mod_97_test", lambda a, b: [(x + y) % 97 for x, y in zip(a, b)])
    try:
        def rank_fn(b, r):
            op = b.op_create("sum_mod_97_test", True)
            return b.allreduce([r + 1], op, b.comm_world())

        out = run_backends(4, "lazy_const", rank_fn)
        # (1 + 2 + 3 + 4) mod 97 = 10 on every rank
        assert out == [[10]] * 4
    finally:
        reductions.unregister("sum_mod_97_test")


def test_op_create_unknown_function():
    with pytest.raises(UnknownFunction):
        single("int_table").op_create("no_such_fn", True)


@pytest.mark.parametrize("name", BACKENDS)
def test_envelope_contents_faithful(name):
    b = single(name)
    dbl = b.resolve_constant("DOUBLE")
    vec = b.type_vector(3, 2, 5, dbl)
    assert b.type_get_envelope(vec) == ("vector", (3, 2, 5))
    assert b.type_get_contents(vec) == ((3, 2, 5), (dbl,))
    cont = b.type_contiguous(2, vec)
    assert b.type_get_envelope(cont) == ("contiguous", (2,))
    assert b.type_get_contents(cont) == ((2,), (vec,))
    b.type_commit(cont)
    with pytest.raises(CommitTwice):
        b.type_commit(cont)


def test_bcast_and_gather():
    def rank_fn(b, r):
        v = b.bcast([r * 10] if r == 1 else None, 1, b.comm_world())
        g = b.gather(r, 0, b.comm_world())
        return v, g

    out = run_backends(3, "int_table", rank_fn)
    assert [v for v, _ in out] == [[10], [10], [10]]
    assert out[0][1] == [0, 1, 2]
    assert out[1][1] is None and out[2][1] is None


def test_recording_backend_logs_public_calls():
    rec = RecordingBackend(make_backend("int_table"))
    rec.init(1, 0, Transport(1))
    rec.comm_world()
    rec.resolve_constant("INT64")
    assert rec.calls == ["init", "comm_world", "resolve_constant"]
    assert rec.world_size == 1
