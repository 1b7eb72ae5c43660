import numpy as np
import pytest

from modnri.fileio import ParseError, VersionError
from modnri.sim import (CHARGED, SPRINGS, RelationGraph, SimConfig, SimulationDiverged, Task, TaskSet,
                        coulomb_energy, generate_task_set, graph_from_matrix, load_task_set, make_task,
                        pair_index, save_task_set, simulate_charged, simulate_springs, spring_energy,
                        task_rng)

CFG = SimConfig()


def _state(pos, vel):
    return np.concatenate([np.asarray(pos, float), np.asarray(vel, float)], axis=1)


def _no_wall_springs(seed, steps=50):
    """A random 5-particle springs system that stays away from the walls."""
    rng = np.random.default_rng(seed)
    while True:
        t = make_task(SPRINGS, 5, steps + 1, rng, train_horizon=2, test_horizon=0)
        if np.abs(t.states[:, :, :2]).max() < 0.9 * CFG.box:
            return t


def test_relation_graph_symmetric_and_indexed():
    g = RelationGraph(4, [1, 0, 1, 0, 0, 1])
    m = g.matrix()
    assert np.array_equal(m, m.T)
    assert (np.diag(m) == -1).all()
    for i in range(4):
        for j in range(i + 1, 4):
            assert g.relation(i, j) == g.relation(j, i) == g.labels[pair_index(4, i, j)]
    with pytest.raises(ValueError):
        g.relation(2, 2)
    assert graph_from_matrix(m) == g
    with pytest.raises(ValueError):
        RelationGraph(4, [1, 0])


def test_no_forces_no_motion():
    init = _state([[1.0, 0.5], [-1.0, 2.0]], np.zeros((2, 2)))
    traj = simulate_springs(RelationGraph(2, [0]), init, 20)
    assert traj.shape == (21, 2, 4)
    assert np.array_equal(traj, np.repeat(init[None], 21, axis=0))


def test_symmetric_pair_keeps_center_of_mass():
    init = _state([[1.0, 0.3], [-1.0, -0.3]], [[0.2, -0.1], [-0.2, 0.1]])
    traj = simulate_springs(RelationGraph(2, [1]), init, 100)
    com = traj[:, :, :2].mean(axis=1)
    assert np.abs(com).max() < 1e-9


def test_springs_momentum_conserved_without_walls():
    t = _no_wall_springs(1)
    p = t.states[:, :, 2:].sum(axis=1)
    assert np.abs(np.diff(p, axis=0)).max() < 1e-9


def test_springs_energy_drift_against_fine_reference():
    t = _no_wall_springs(2)
    adj = (t.truth.matrix() > 0).astype(float)
    e = [spring_energy(s, adj, CFG.spring_k) for s in t.states]
    assert abs(e[50] - e[0]) / abs(e[0]) < 1e-3
    # reference at dt/100: same trajectory to integrator accuracy
    fine = simulate_springs(t.truth, t.states[0], 50, config=CFG, substeps=1000)
    assert np.abs(fine - t.states).max() < 1e-3


def test_opposite_charges_attract():
    init = _state([[1.0, 0.0], [-1.0, 0.0]], np.zeros((2, 2)))
    traj = simulate_charged([1.0, -1.0], init, 10)
    d = np.linalg.norm(traj[:, 0, :2] - traj[:, 1, :2], axis=1)
    assert np.all(d[1:] < d[0])


def test_same_charges_repel_until_wall():
    init = _state([[0.5, 0.0], [-0.5, 0.0]], np.zeros((2, 2)))
    traj = simulate_charged([1.0, 1.0], init, 200)
    x = traj[:, :, 0]
    touched = np.flatnonzero(np.abs(x).max(axis=1) > CFG.box - 0.2)
    end = touched[0] if touched.size else len(x)
    d = x[:end, 0] - x[:end, 1]
    assert end > 5 and np.all(np.diff(d) > 0)


@pytest.mark.parametrize("i", range(4))
def test_charged_matches_fine_reference(i):
    t = make_task(CHARGED, 5, 11, task_rng(3, i), train_horizon=2, test_horizon=0)
    # plain leapfrog at 1/100 of the sub-step, no adaptivity
    fine = simulate_charged(t.charges, t.states[0], 10, config=CFG, substeps=100 * CFG.substeps, tol=0.0)
    assert np.abs(fine - t.states).max() < 1e-2


def test_charged_close_encounter_needs_refinement():
    # head-on pair passing inside the softening radius
    init = _state([[0.5, 0.02], [-0.5, -0.02]], [[-1.0, 0.0], [1.0, 0.0]])
    fine = simulate_charged([1.0, -1.0], init, 10, substeps=1000, tol=0.0)
    plain = simulate_charged([1.0, -1.0], init, 10, tol=0.0)
    adaptive = simulate_charged([1.0, -1.0], init, 10)
    assert np.abs(adaptive - fine).max() < 1e-3 < np.abs(plain - fine).max()


def test_charged_energy_drift_without_walls():
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 3:
        t = make_task(CHARGED, 5, 51, rng, train_horizon=2, test_horizon=0)
        if np.abs(t.states[:, :, :2]).max() >= 0.9 * CFG.box:
            continue
        e = [coulomb_energy(s, t.charges, CFG.coulomb, CFG.softening) for s in t.states]
        assert abs(e[50] - e[0]) / abs(e[0]) < 1e-3
        checked += 1


def test_positions_stay_in_box():
    ts = generate_task_set(CHARGED, 20, 5, 100, seed=5, train_horizon=50, test_horizon=10)
    for t in ts.tasks:
        assert np.abs(t.states[:, :, :2]).max() <= CFG.box
        assert np.all(np.isfinite(t.states))


def test_simulator_preconditions():
    init = _state([[0.0, 0.0], [1.0, 1.0]], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        simulate_springs(RelationGraph(3, [0, 0, 0]), init, 5)
    with pytest.raises(ValueError):
        simulate_springs(RelationGraph(2, [1]), init, 5, dt=0.0)
    with pytest.raises(ValueError):
        simulate_springs(RelationGraph(2, [1]), _state([[6.0, 0.0], [0.0, 0.0]], np.zeros((2, 2))), 5)


def test_divergence_names_step():
    cfg = SimConfig(spring_k=1e308)
    init = _state([[1.0, 0.0], [-1.0, 0.0]], np.zeros((2, 2)))
    with pytest.raises(SimulationDiverged) as e:
        simulate_springs(RelationGraph(2, [1]), init, 5, config=cfg)
    assert e.value.step == 1


def test_generation_deterministic():
    a = generate_task_set(SPRINGS, 1, 5, 60, seed=7)
    b = generate_task_set(SPRINGS, 1, 5, 60, seed=7)
    assert a == b
    assert np.array_equal(a.tasks[0].states, b.tasks[0].states)
    assert generate_task_set(SPRINGS, 1, 5, 60, seed=8) != a


def test_task_streams_independent_of_count():
    a = generate_task_set(SPRINGS, 3, 4, 20, seed=1, train_horizon=10, test_horizon=5)
    b = generate_task_set(SPRINGS, 5, 4, 20, seed=1, train_horizon=10, test_horizon=5)
    assert a.tasks == b.tasks[:3]


def test_spring_edge_fraction():
    ts = generate_task_set(SPRINGS, 100, 5, 60, seed=11)
    frac = np.mean(np.concatenate([t.truth.labels for t in ts.tasks]))
    assert 0.4 <= frac <= 0.6


def test_charged_labels_cover_all_pairs():
    ts = generate_task_set(CHARGED, 10, 5, 60, seed=2)
    for t in ts.tasks:
        assert set(t.truth.labels.tolist()) <= {0, 1}
        m = t.truth.matrix()
        assert np.array_equal(m, m.T)
        same = np.outer(t.charges, t.charges) > 0
        iu = np.triu_indices(5, 1)
        assert np.array_equal(m[iu], same[iu].astype(int))


def test_task_and_taskset_invariants():
    with pytest.raises(ValueError):
        Task(np.zeros((10, 3, 4)), RelationGraph(3, [0, 0, 0]), 8, 5)
    t1 = Task(np.zeros((10, 3, 4)), RelationGraph(3, [0, 0, 0]), 5, 5)
    t2 = Task(np.zeros((12, 3, 4)), RelationGraph(3, [0, 0, 0]), 5, 5)
    with pytest.raises(ValueError):
        TaskSet(SPRINGS, [t1, t2])
    with pytest.raises(ValueError):
        TaskSet("kuramoto", [t1])
    assert t1.observed.shape == (5, 3, 4) and t1.future.shape == (5, 3, 4)


# ---------------------------------------------------------------------------
# files


@pytest.mark.parametrize("kind", [SPRINGS, CHARGED])
def test_task_set_roundtrip_bit_exact(tmp_path, kind):
    ts = generate_task_set(kind, 4, 5, 30, seed=3, train_horizon=20, test_horizon=10)
    p = tmp_path / "ts.json"
    save_task_set(ts, p)
    back = load_task_set(p)
    assert back == ts
    for a, b in zip(ts.tasks, back.tasks):
        assert a.states.tobytes() == b.states.tobytes()
        assert (a.charges is None) == (b.charges is None)


def test_roundtrip_of_awkward_floats(tmp_path):
    states = np.random.default_rng(0).normal(size=(4, 2, 4)) * np.array([1e-300, 1e300, 1 / 3, -0.0])
    ts = TaskSet(SPRINGS, [Task(states, RelationGraph(2, [1]), 2, 2)], {"note": "x"})
    save_task_set(ts, tmp_path / "a.json")
    back = load_task_set(tmp_path / "a.json")
    assert back.tasks[0].states.tobytes() == states.tobytes()


def test_truncated_file_is_parse_error(tmp_path):
    ts = generate_task_set(SPRINGS, 2, 3, 12, seed=1, train_horizon=8, test_horizon=2)
    p = tmp_path / "ts.json"
    save_task_set(ts, p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ParseError) as e:
        load_task_set(p)
    assert e.value.offset is not None and 0 < e.value.offset <= len(raw) // 2


def test_unknown_kind_and_version(tmp_path):
    ts = generate_task_set(SPRINGS, 1, 3, 12, seed=1, train_horizon=8, test_horizon=2)
    p = tmp_path / "ts.json"
    save_task_set(ts, p)
    text = p.read_text()
    p.write_text(text.replace('"springs"', '"kuramoto"', 1))
    with pytest.raises(VersionError, match="kuramoto") as e:
        load_task_set(p)
    assert e.value.tag == "kuramoto"
    p.write_text(text.replace('"format_version": 1', '"format_version": 2'))
    with pytest.raises(VersionError):
        load_task_set(p)


def test_save_is_atomic(tmp_path):
    ts = generate_task_set(SPRINGS, 1, 3, 12, seed=1, train_horizon=8, test_horizon=2)
    p = tmp_path / "ts.json"
    save_task_set(ts, p)
    save_task_set(ts, p)
    assert [x.name for x in tmp_path.iterdir()] == ["ts.json"]
