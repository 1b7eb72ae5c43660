"""Interacting-particle simulators (springs and charged) in a 2-D box.

States are stored as ``(n, 4)`` arrays holding ``(x, y, vx, vy)`` per particle.
Integration is velocity Verlet (leapfrog) with several sub-steps per observed
step and elastic reflection at the walls.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .fileio import (FORMAT_VERSION, ParseError, VersionError, atomic_write, check_version,
                     float_array_json, read_json, require)

SPRINGS = "springs"
CHARGED = "charged"
KINDS = (SPRINGS, CHARGED)

# Relation labels per kind, index == label id.
RELATION_LABELS = {
    SPRINGS: ("no-spring", "spring"),
    CHARGED: ("attract", "repel"),
}


class SimulationDiverged(RuntimeError):
    """Raised when an integrator produces a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"simulation diverged at observed step {step}")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    box: float = 5.0
    spring_k: float = 0.1
    coulomb: float = 1.0
    softening: float = 0.1
    dt: float = 0.1
    substeps: int = 10
    # local error tolerance for the adaptive charged integrator (0 = plain leapfrog)
    charged_tol: float = 1e-6
    loc_std: float = 0.5
    charged_loc_std: float = 1.0
    speed: float = 0.5
    edge_prob: float = 0.5
    charge_prob: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sim_config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RelationGraph:
    """Ground-truth relation labels for every unordered pair ``i < j``.

    ``labels`` is ordered as ``(0,1), (0,2), ..., (0,n-1), (1,2), ...``.
    """

    n_entities: int
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.n_entities * (self.n_entities - 1) // 2,):
            raise ValueError("labels must have one entry per unordered pair")

    def relation(self, i: int, j: int) -> int:
        if i == j:
            raise ValueError("no self relations")
        return int(self.labels[pair_index(self.n_entities, min(i, j), max(i, j))])

    def matrix(self) -> np.ndarray:
        """Symmetric ``(n, n)`` label matrix; the diagonal is -1."""
        n = self.n_entities
        m = np.full((n, n), -1, dtype=np.int64)
        iu = np.triu_indices(n, k=1)
        m[iu] = self.labels
        m[(iu[1], iu[0])] = self.labels
        return m

    def __eq__(self, other):
        return (isinstance(other, RelationGraph) and self.n_entities == other.n_entities
                and np.array_equal(self.labels, other.labels))


def pair_index(n: int, i: int, j: int) -> int:
    """Position of the unordered pair ``i < j`` in :attr:`RelationGraph.labels`."""
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def graph_from_matrix(adj: np.ndarray) -> RelationGraph:
    adj = np.asarray(adj)
    n = adj.shape[0]
    return RelationGraph(n, adj[np.triu_indices(n, k=1)])


# ---------------------------------------------------------------------------
# forces


def spring_accel(pos: np.ndarray, adj: np.ndarray, k: float) -> np.ndarray:
    # F_i = -k * sum_j A_ij (x_i - x_j)
    diff = pos[:, None, :] - pos[None, :, :]
    return -k * np.einsum("ij,ijd->id", adj, diff)


def coulomb_accel(pos: np.ndarray, charges: np.ndarray, strength: float, eps: float) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = np.einsum("ijd,ijd->ij", diff, diff) + eps * eps
    inv = r2 ** -1.5
    np.fill_diagonal(inv, 0.0)
    qq = np.outer(charges, charges)
    # same sign repels: acceleration along +(x_i - x_j)
    return strength * np.einsum("ij,ijd->id", qq * inv, diff)


def spring_energy(state: np.ndarray, adj: np.ndarray, k: float) -> float:
    pos, vel = state[:, :2], state[:, 2:]
    diff = pos[:, None, :] - pos[None, :, :]
    pot = 0.5 * k * np.sum(np.triu(adj, 1) * np.sum(diff ** 2, axis=-1))
    return float(0.5 * np.sum(vel ** 2) + pot)


def coulomb_energy(state: np.ndarray, charges: np.ndarray, strength: float, eps: float) -> float:
    pos, vel = state[:, :2], state[:, 2:]
    diff = pos[:, None, :] - pos[None, :, :]
    r = np.sqrt(np.sum(diff ** 2, axis=-1) + eps * eps)
    qq = np.outer(charges, charges)
    # potential of the softened force q_i q_j d / (|d|^2 + eps^2)^{3/2}
    pot = strength * np.sum(np.triu(qq / r, 1))
    return float(0.5 * np.sum(vel ** 2) + pot)


# ---------------------------------------------------------------------------
# integration


def _reflect(pos: np.ndarray, vel: np.ndarray, box: float) -> None:
    over = pos > box
    pos[over] = 2 * box - pos[over]
    vel[over] = -vel[over]
    under = pos < -box
    pos[under] = -2 * box - pos[under]
    vel[under] = -vel[under]


def _kdk(pos, vel, a, h, accel, box):
    vel = vel + 0.5 * h * a
    pos = pos + h * vel
    _reflect(pos, vel, box)
    a = accel(pos)
    return pos, vel + 0.5 * h * a, a


# Yoshida weights: three leapfrog steps compose to a fourth-order step
_Y1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_Y0 = 1.0 - 2.0 * _Y1


def _kdk4(pos, vel, a, h, accel, box):
    s = _kdk(pos, vel, a, _Y1 * h, accel, box)
    s = _kdk(*s, _Y0 * h, accel, box)
    return _kdk(*s, _Y1 * h, accel, box)


def _adaptive(pos, vel, a, h, accel, box, tol, depth, coarse=None):
    """One sub-step of length h, bisected until one step and two half steps agree to tol."""
    if coarse is None:
        coarse = _kdk4(pos, vel, a, h, accel, box)
    half = _kdk4(pos, vel, a, 0.5 * h, accel, box)
    fine = _kdk4(*half, 0.5 * h, accel, box)
    err = max(np.abs(fine[0] - coarse[0]).max(), np.abs(fine[1] - coarse[1]).max())
    if depth == 0 or err < tol or not np.isfinite(err):
        return fine
    half = _adaptive(pos, vel, a, 0.5 * h, accel, box, tol, depth - 1, coarse=half)
    return _adaptive(*half, 0.5 * h, accel, box, tol, depth - 1)


def _integrate(accel, init: np.ndarray, steps: int, dt: float, substeps: int, box: float,
               tol: float = 0.0, max_depth: int = 12) -> np.ndarray:
    init = np.asarray(init, dtype=np.float64)
    if init.ndim != 2 or init.shape[1] != 4 or init.shape[0] < 2:
        raise ValueError(f"init must be (n>=2, 4), got {init.shape}")
    if dt <= 0 or substeps < 1 or steps < 1:
        raise ValueError("dt, substeps and steps must be positive")
    if np.any(np.abs(init[:, :2]) > box):
        raise ValueError("initial positions must lie inside the box")
    h = dt / substeps
    pos = init[:, :2].copy()
    vel = init[:, 2:].copy()
    out = np.empty((steps + 1, init.shape[0], 4))
    out[0] = init
    # overflow surfaces as SimulationDiverged below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        a = accel(pos)
    for t in range(1, steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(substeps):
                if tol > 0:
                    pos, vel, a = _adaptive(pos, vel, a, h, accel, box, tol, max_depth)
                else:
                    pos, vel, a = _kdk(pos, vel, a, h, accel, box)
        out[t, :, :2] = pos
        out[t, :, 2:] = vel
        if not np.all(np.isfinite(out[t])):
            raise SimulationDiverged(t)
    return out


def simulate_springs(graph: RelationGraph, init: np.ndarray, steps: int, dt: float = 0.1,
                     config: SimConfig = SimConfig(), substeps: int | None = None) -> np.ndarray:
    """Simulate Hooke springs along the edges of ``graph``.

    Returns the ``(steps + 1, n, 4)`` state trajectory, ``init`` included.
    """
    if graph.n_entities != len(init):
        raise ValueError("graph and init disagree on the number of particles")
    adj = (graph.matrix() > 0).astype(np.float64)
    return _integrate(lambda p: spring_accel(p, adj, config.spring_k), init, steps, dt,
                      substeps or config.substeps, config.box)


def simulate_charged(charges: np.ndarray, init: np.ndarray, steps: int, dt: float = 0.1,
                     config: SimConfig = SimConfig(), substeps: int | None = None,
                     tol: float | None = None) -> np.ndarray:
    """Simulate softened Coulomb interactions between all pairs.

    Sub-steps are bisected near close encounters until the local error is
    below ``tol`` (``config.charged_tol`` by default; 0 gives plain leapfrog).
    """
    charges = np.asarray(charges, dtype=np.float64)
    if len(charges) != len(init):
        raise ValueError("charges and init disagree on the number of particles")
    return _integrate(lambda p: coulomb_accel(p, charges, config.coulomb, config.softening),
                      init, steps, dt, substeps or config.substeps, config.box,
                      tol=config.charged_tol if tol is None else tol)


# ---------------------------------------------------------------------------
# task generation


@dataclass
class Task:
    states: np.ndarray  # (T, n, 4)
    truth: RelationGraph
    train_horizon: int = 50
    test_horizon: int = 10
    charges: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3 or self.states.shape[0] < 2 or self.states.shape[1] < 2:
            raise ValueError("states must be (T>=2, n>=2, d)")
        if self.train_horizon + self.test_horizon > self.states.shape[0]:
            raise ValueError("train_horizon + test_horizon exceeds trajectory length")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.states[: self.train_horizon]

    @property
    def future(self) -> np.ndarray:
        return self.states[self.train_horizon: self.train_horizon + self.test_horizon]

    def __eq__(self, other):
        return (isinstance(other, Task) and self.truth == other.truth
                and self.train_horizon == other.train_horizon
                and self.test_horizon == other.test_horizon
                and np.array_equal(self.states, other.states))


@dataclass
class TaskSet:
    kind: str
    tasks: list
    sim_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        shapes = {t.states.shape for t in self.tasks}
        if len(shapes) > 1:
            raise ValueError(f"tasks in a set must share (T, n, d); got {sorted(shapes)}")

    def __len__(self):
        return len(self.tasks)

    def __eq__(self, other):
        return (isinstance(other, TaskSet) and self.kind == other.kind
                and self.sim_config == other.sim_config and self.tasks == other.tasks)

    @property
    def n_particles(self) -> int:
        return self.tasks[0].n

    def subset(self, idx) -> "TaskSet":
        return TaskSet(self.kind, [self.tasks[i] for i in idx], dict(self.sim_config))


def task_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _initial_state(rng: np.random.Generator, n: int, loc_std: float, speed: float, box: float) -> np.ndarray:
    loc = np.clip(rng.normal(0.0, loc_std, size=(n, 2)), -0.95 * box, 0.95 * box)
    vel = rng.normal(size=(n, 2))
    vel *= speed / np.linalg.norm(vel, axis=1, keepdims=True)
    return np.concatenate([loc, vel], axis=1)


def make_task(kind: str, n: int, T: int, rng: np.random.Generator, config: SimConfig = SimConfig(),
              train_horizon: int = 50, test_horizon: int = 10) -> Task:
    if kind == SPRINGS:
        upper = np.triu((rng.random((n, n)) < config.edge_prob).astype(np.int64), 1)
        graph = graph_from_matrix(upper + upper.T)
        init = _initial_state(rng, n, config.loc_std, config.speed, config.box)
        states = simulate_springs(graph, init, T - 1, config.dt, config)
        return Task(states, graph, train_horizon, test_horizon)
    if kind == CHARGED:
        charges = np.where(rng.random(n) < config.charge_prob, 1.0, -1.0)
        # label 1 (repel) for equal signs
        graph = graph_from_matrix((np.outer(charges, charges) > 0).astype(np.int64))
        init = _initial_state(rng, n, config.charged_loc_std, config.speed, config.box)
        states = simulate_charged(charges, init, T - 1, config.dt, config)
        return Task(states, graph, train_horizon, test_horizon, charges=charges)
    raise ValueError(f"unknown kind {kind!r}")


def generate_task_set(kind: str, n_tasks: int, n_particles: int = 5, T: int = 60, seed: int = 0,
                      config: SimConfig = SimConfig(), train_horizon: int = 50,
                      test_horizon: int = 10) -> TaskSet:
    """Draw ``n_tasks`` independent tasks; task ``i`` uses the stream ``(seed, i)``."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    tasks = [make_task(kind, n_particles, T, task_rng(seed, i), config, train_horizon, test_horizon)
             for i in range(n_tasks)]
    cfg = config.to_dict()
    cfg.update(seed=seed, n_particles=n_particles, T=T, n_tasks=n_tasks, train_horizon=train_horizon,
               test_horizon=test_horizon)
    return TaskSet(kind, tasks, cfg)


# ---------------------------------------------------------------------------
# task-set files


def dumps_task_set(task_set: TaskSet) -> str:
    parts = []
    for t in task_set.tasks:
        item = '{"truth":%s,"train_horizon":%d,"test_horizon":%d,"states":%s' % (
            json.dumps(t.truth.labels.tolist()), t.train_horizon, t.test_horizon, float_array_json(t.states))
        if t.charges is not None:
            item += ',"charges":%s' % float_array_json(t.charges)
        parts.append(item + "}")
    head = {"format_version": FORMAT_VERSION, "kind": task_set.kind, "sim_config": task_set.sim_config}
    return json.dumps(head)[:-1] + ',"tasks":[' + ",\n".join(parts) + "]}\n"


def save_task_set(task_set: TaskSet, path) -> None:
    """Write ``task_set`` as one JSON document (atomic replace)."""
    atomic_write(path, dumps_task_set(task_set))


def load_task_set(path) -> TaskSet:
    """Read a task-set file. Raises :class:`ParseError` or :class:`VersionError`."""
    doc = read_json(path)
    check_version(path, doc)
    kind = require(path, doc, "kind")
    if kind not in KINDS:
        raise VersionError(path, f"unknown kind tag {kind!r}", kind)
    cfg = require(path, doc, "sim_config")
    tasks_doc = require(path, doc, "tasks")
    if not isinstance(cfg, dict) or not isinstance(tasks_doc, list):
        raise ParseError(path, "sim_config must be an object and tasks a list")
    th = int(cfg.get("train_horizon", 50))
    eh = int(cfg.get("test_horizon", 10))
    tasks = []
    try:
        for i, td in enumerate(tasks_doc):
            states = np.asarray(require(path, td, "states"), dtype=np.float64)
            labels = np.asarray(require(path, td, "truth"), dtype=np.int64)
            charges = td.get("charges")
            if charges is not None:
                charges = np.asarray(charges, dtype=np.float64)
            tasks.append(Task(states, RelationGraph(states.shape[1], labels), int(td.get("train_horizon", th)),
                              int(td.get("test_horizon", eh)), charges))
        return TaskSet(kind, tasks, cfg)
    except (TypeError, ValueError) as e:
        if isinstance(e, (ParseError, VersionError)):
            raise
        raise ParseError(path, f"invalid task data: {e}") from None
