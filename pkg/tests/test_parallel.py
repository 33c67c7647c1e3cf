import json
import random

import numpy as np
import pytest

from stfmm.fmm import FMMPlan
from stfmm.mesh import build_tensor_mesh, generate_cube_surface
from stfmm.parallel import (
    AssignmentError,
    DeadlockError,
    DistributedFMM,
    ProtocolError,
    TraceRecorder,
    WriteMonitor,
    assign_clusters,
    build_let,
    build_task_lists,
    lanes_overlap,
    m2l_effort,
    make_endpoints,
    summarize,
    uniform_temporal_tree,
)
from stfmm.parallel.trace import CATEGORIES
from stfmm.parallel.transport import MOMENTS_TO_INTERACTION, MOMENTS_TO_PARENT, Message, decode_header, encode
from stfmm.tree import build_tree


# ---- assignment -------------------------------------------------------------

def _by_index(tt, a, lev):
    return [a[t] for t in sorted(tt.levels[lev], key=lambda j: tt[j].index)]


def test_fig3_pattern():
    tt = uniform_temporal_tree(4)
    a = assign_clusters(tt, 8)
    assert _by_index(tt, a, 4) == [r for r in range(8) for _ in range(2)]
    assert _by_index(tt, a, 3) == list(range(8))
    leaves = _by_index(tt, a, 3)
    assert _by_index(tt, a, 2) == [leaves[2 * k] for k in range(4)]  # left child's owner
    assert _by_index(tt, a, 1) == [1, 5]


def test_load_scenarios():
    tt = uniform_temporal_tree(4)
    a = assign_clusters(tt, 8)
    w1 = m2l_effort(tt, a, {4: 4, 3: 1, 2: 1})
    w2 = m2l_effort(tt, a, {4: 4, 3: 4, 2: 1})
    assert (w1[6], w1[7]) == (15, 14)
    assert (w2[6], w2[7]) == (18, 20)
    assert w1[0] == 0


def test_single_rank_owns_everything():
    tt = uniform_temporal_tree(3)
    a = assign_clusters(tt, 1)
    assert set(a.owner.values()) == {0}


def test_too_many_ranks():
    with pytest.raises(AssignmentError):
        assign_clusters(uniform_temporal_tree(2), 5)


def test_uneven_slices():
    tt = uniform_temporal_tree(3)
    a = assign_clusters(tt, 3)
    assert sorted(set(a.owner.values())) == [0, 1, 2]
    assert a.slice_owner == (0, 0, 0, 1, 1, 1, 2, 2)


# ---- LET and task lists -----------------------------------------------------

def test_let_single_rank_is_full_tree(small_plan):
    a = assign_clusters(small_plan.tree.temporal, 1)
    let = build_let(0, small_plan, a)
    assert let.ghosts == {}
    assert let.owned == sorted(c.id for c in small_plan.tree.temporal.clusters)
    assert len(let.out_dofs) == small_plan.shape[0]


def test_ghost_owners(small_plan):
    a = assign_clusters(small_plan.tree.temporal, 4)
    for r in range(4):
        let = build_let(r, small_plan, a)
        assert all(o != r and a[t] == o for t, o in let.ghosts.items())


def test_let_includes_earlier_neighbour_leaf(small_plan):
    tt = small_plan.tree.temporal
    a = assign_clusters(tt, 4)
    let = build_let(2, small_plan, a)
    first = min((t for t in let.owned if tt[t].is_leaf), key=lambda t: tt[t].steps[0])
    prev = next(t for t in tt.leaves() if tt[t].steps[1] == tt[first].steps[0])
    assert let.ghosts.get(prev) == 1


def test_lists_and_empty_interactions(small_plan):
    tt = small_plan.tree.temporal
    tl = build_task_lists(small_plan, assign_clusters(tt, 1), 0)
    for lev in range(tt.depth + 1):
        first = next(t for t in tt.levels[lev] if tt[t].index == 0)
        assert first not in tl.lists["M2L"]
    for kind, lst in tl.lists.items():
        keys = [(tt[t].level, tt[t].index) for t in lst]
        assert keys == sorted(keys)


def _independent_deps(plan):
    """Dependency counts derived straight from the space-time tree."""
    tree, tt = plan.tree, plan.tree.temporal
    has = {"M": set(), "M2L": set(), "L": set()}
    for tc in tt.clusters:
        sts = tc.st_clusters
        if any(plan.need_mu[c] for c in sts):
            has["M"].add(tc.id)
        if any(tree[c].interaction for c in sts):
            has["M2L"].add(tc.id)
        if any(tree[c].parent is not None and plan.need_lam[tree[c].parent] for c in sts):
            has["L"].add(tc.id)
    out = {}
    for t in has["M"]:
        out[("M", t)] = len({tree[ch].temporal for c in tt[t].st_clusters
                             for ch in tree[c].children if plan.need_mu[ch]})
    for t in has["M2L"]:
        out[("M2L", t)] = len({tree[s].temporal for c in tt[t].st_clusters for s in tree[c].interaction})
    for t in has["L"]:
        p = tt[t].parent
        out[("L", t)] = (p in has["M2L"]) + (p in has["L"])
    return out


@pytest.fixture(scope="module")
def depth4_plan():
    mesh = build_tensor_mesh(generate_cube_surface(3), 0.5, 16)
    tree = build_tree(mesh, n_max=20)
    assert tree.temporal.depth == 4 and len(tree.temporal.leaves()) == 16
    return FMMPlan(tree)


@pytest.mark.parametrize("ranks", [1, 4])
def test_dependency_counts_depth4(depth4_plan, ranks):
    ref = _independent_deps(depth4_plan)
    a = assign_clusters(depth4_plan.tree.temporal, ranks)
    got = {}
    for r in range(ranks):
        for key, task in build_task_lists(depth4_plan, a, r).tasks.items():
            if key[0] != "N":
                got[key] = task.n_deps
    assert got == ref
    # uniform tree: M2L of a cluster waits for every member of its interaction list
    tt = depth4_plan.tree.temporal
    for (kind, t), n in ref.items():
        if kind == "M2L" and tt[t].level >= 2:
            assert n == len(tt[t].interaction)


# ---- transport --------------------------------------------------------------

def test_inproc_send_poll():
    eps = make_endpoints("inproc", 2)
    eps[0].send(Message(0, 1, 7, MOMENTS_TO_PARENT, np.arange(3.0)))
    got = eps[1].poll()
    assert len(got) == 1 and got[0].tag == (7, MOMENTS_TO_PARENT)
    assert eps[0].poll() == []


def test_inproc_stress_exactly_once():
    eps = make_endpoints("inproc", 4, max_delay=0.002, seed=3)
    rnd = random.Random(1)
    sent = []
    for i in range(1000):
        s, d = rnd.randrange(4), rnd.randrange(4)
        eps[s].send(Message(s, d, i, MOMENTS_TO_INTERACTION, np.array([float(i)])))
        sent.append((d, i))
    got = []
    import time

    deadline = time.monotonic() + 5
    while len(got) < 1000 and time.monotonic() < deadline:
        for r in range(4):
            got.extend((r, m.cluster) for m in eps[r].poll())
    assert sorted(got) == sorted(sent)


def test_tag_collision():
    eps = make_endpoints("inproc", 2)
    m = Message(0, 1, 3, MOMENTS_TO_PARENT, np.zeros(2))
    eps[0].send(m)
    eps[0].send(m)
    with pytest.raises(ProtocolError):
        eps[1].poll()


def test_frame_roundtrip():
    m = Message(2, 1, 9, MOMENTS_TO_INTERACTION, np.array([1.5, -2.0]))
    buf = encode(m)
    assert decode_header(buf[:17]) == (2, 9, MOMENTS_TO_INTERACTION, 16)


def test_tcp_transport():
    eps = make_endpoints("tcp", 3)
    try:
        eps[2].send(Message(2, 0, 5, MOMENTS_TO_INTERACTION, np.linspace(0, 1, 1000)))
        got = []
        for _ in range(1000):
            got += eps[0].poll()
            if got:
                break
        assert got[0].sender == 2 and np.array_equal(got[0].payload, np.linspace(0, 1, 1000))
    finally:
        for e in eps:
            e.close()


# ---- distributed runtime ----------------------------------------------------

@pytest.fixture(scope="module")
def seq(small_plan):
    w = np.random.default_rng(7).standard_normal(small_plan.shape[1])
    return w, small_plan.matvec(w)


def test_single_rank_single_thread_bitwise(small_plan, seq):
    w, ref = seq
    with DistributedFMM(small_plan, 1, n_workers=0) as op:
        assert np.array_equal(op.matvec(w), ref)


@pytest.mark.parametrize("ranks", [1, 2, 3, 4, 8])
def test_rank_equivalence(small_plan, seq, ranks):
    w, ref = seq
    with DistributedFMM(small_plan, ranks, n_workers=2) as op:
        f = op.matvec(w)
        assert np.linalg.norm(f - ref) <= 1e-12 * np.linalg.norm(ref)
        assert op.direction_violations() == []
        assert op.message_counts() == op.static_message_counts()


def test_tcp_equivalence(small_plan, seq):
    w, ref = seq
    with DistributedFMM(small_plan, 3, n_workers=1, transport="tcp") as op:
        assert np.linalg.norm(op.matvec(w) - ref) <= 1e-12 * np.linalg.norm(ref)


def test_random_delays(small_plan, seq):
    w, ref = seq
    for trial in range(5):
        with DistributedFMM(small_plan, 4, n_workers=1, max_delay=0.003, seed=trial, watchdog=20) as op:
            assert np.linalg.norm(op.matvec(w) - ref) <= 1e-12 * np.linalg.norm(ref)


def test_repeated_matvec(small_plan, seq):
    w, ref = seq
    with DistributedFMM(small_plan, 2, n_workers=2) as op:
        a = op.matvec(w)
        b = op.matvec(w)
    assert np.array_equal(a, b)


def test_direction_audit_flags_backward_message(small_plan, seq):
    w, _ = seq
    with DistributedFMM(small_plan, 4) as op:
        op.matvec(w)
        log = list(op.message_log)
    tt = small_plan.tree.temporal
    late = max(tt.leaves(), key=lambda t: tt[t].steps[0])
    fake = type(log[0])(3, 0, late, MOMENTS_TO_INTERACTION, 1, 0.0)
    assert op.direction_violations([fake])


def test_threshold_modes(small_plan, seq):
    w, ref = seq
    for thr, lane0 in ((float("inf"), False), (0, True)):
        with DistributedFMM(small_plan, 1, n_workers=2, threshold=thr, trace=True) as op:
            assert np.linalg.norm(op.matvec(w) - ref) <= 1e-12 * np.linalg.norm(ref)
            events = op.recorder.events
            assert any(e["worker"] == 0 for e in events) == lane0
    with pytest.raises(ValueError):
        DistributedFMM(small_plan, 1, n_workers=0, threshold=float("inf")).matvec(w)


def test_trace_output(small_plan, seq, tmp_path):
    w, _ = seq
    with DistributedFMM(small_plan, 2, n_workers=2, trace=True) as op:
        op.matvec(w)
        path = tmp_path / "trace.json"
        op.recorder.write(path)
        ev = op.recorder.events
    data = json.loads(path.read_text())
    evs = data["traceEvents"] if isinstance(data, dict) else data
    assert evs and all(e["ph"] == "X" and {"ts", "dur", "pid", "tid", "cat"} <= set(e) for e in evs)
    assert {"S2M", "M2L", "L2T", "NF", "SEND", "RECV"} <= {e["category"] for e in ev} <= set(CATEGORIES)
    assert not lanes_overlap(ev)
    s = summarize(ev)
    assert s["n_events"] == len(ev) and s["max_idle_gap_us"] >= 0


def test_trace_recorder_validates():
    rec = TraceRecorder()
    with pytest.raises(ValueError):
        rec.add("x", "BOGUS", 0, 0, 0.0, 1.0)


def test_exclusive_writes(small_plan, seq):
    w, ref = seq
    with DistributedFMM(small_plan, 2, n_workers=4, instrument=True) as op:
        op.matvec(w)
        assert op.monitor.n_writes > 0
        assert op.monitor.collisions == []


def test_write_monitor_detects_overlap():
    m = WriteMonitor()
    m.enter([("mu", 1)], "a")
    m.enter([("mu", 1)], "b")
    m.leave([("mu", 1)], "a")
    assert len(m.collisions) == 1


def test_watchdog_on_lost_message(small_plan, seq):
    w, _ = seq
    op = DistributedFMM(small_plan, 2, n_workers=1, watchdog=0.5)
    try:
        op.endpoints[1].poll = lambda: []  # rank 1 never hears from rank 0
        with pytest.raises(DeadlockError):
            op.matvec(w)
    finally:
        op.close()
