"""Modular graph-network dynamics.

A :class:`Structure` assigns one edge module to every directed edge slot and
one node module to every node. One transition is a single round of message
passing::

    mu_ij  = edge_module[S_ij](s_i, s_j)
    s_j'   = s_j + node_module[S_j](s_j, sum_i mu_ij)

Edge slots are receiver-major: slot ``j * (n - 1) + k`` carries the message
into node ``j`` from the ``k``-th other node in increasing order. All incoming
edges of a node are therefore contiguous.

Many graphs are executed at once by stacking them along a leading axis, which
is the disjoint union of their graphs (node ``i`` of graph ``g`` is global
node ``g * n + i``); no edge ever joins two graphs.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .nn import ContractError, MlpSpec, Tape, backward, mlp_forward
from .sim import RelationGraph


class ModelDiverged(FloatingPointError):
    def __init__(self, step: int | None = None):
        msg = "model produced non-finite states"
        super().__init__(msg if step is None else f"{msg} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class _Topology:
    n: int
    senders: np.ndarray
    receivers: np.ndarray
    send_onehot: np.ndarray  # (E, n)


@lru_cache(maxsize=None)
def _topology(n: int) -> _Topology:
    if n < 2:
        raise ContractError("graphs need at least two nodes")
    pairs = [(i, j) for j in range(n) for i in range(n) if i != j]
    s = np.array([p[0] for p in pairs], dtype=np.int64)
    r = np.array([p[1] for p in pairs], dtype=np.int64)
    onehot = np.zeros((len(pairs), n))
    onehot[np.arange(len(pairs)), s] = 1.0
    for a in (s, r, onehot):
        a.setflags(write=False)
    return _Topology(n, s, r, onehot)


def edge_slots(n: int):
    """``(senders, receivers)`` of every directed edge slot, in slot order."""
    t = _topology(n)
    return t.senders, t.receivers


def slot_of(n: int, i: int, j: int) -> int:
    """Slot of the directed edge ``i -> j``."""
    if i == j:
        raise ContractError("no self edges")
    return j * (n - 1) + (i if i < j else i - 1)


def incoming_slots(n: int, j: int) -> slice:
    return slice(j * (n - 1), (j + 1) * (n - 1))


# ---------------------------------------------------------------------------
# structures and module libraries


@dataclass
class Structure:
    edge_assign: np.ndarray
    node_assign: np.ndarray

    def __post_init__(self):
        self.edge_assign = np.array(self.edge_assign, dtype=np.int64)
        self.node_assign = np.array(self.node_assign, dtype=np.int64)
        n = len(self.node_assign)
        if self.edge_assign.shape != (n * (n - 1),):
            raise ContractError(f"{n} nodes need {n * (n - 1)} edge slots, got {self.edge_assign.shape}")

    @property
    def n(self) -> int:
        return len(self.node_assign)

    def copy(self) -> "Structure":
        return Structure(self.edge_assign.copy(), self.node_assign.copy())

    def edge(self, i: int, j: int) -> int:
        return int(self.edge_assign[slot_of(self.n, i, j)])

    def key(self) -> bytes:
        return self.edge_assign.tobytes() + b"|" + self.node_assign.tobytes()

    def __eq__(self, other):
        return (isinstance(other, Structure) and np.array_equal(self.edge_assign, other.edge_assign)
                and np.array_equal(self.node_assign, other.node_assign))

    def __hash__(self):
        return hash(self.key())

    def check(self, n_edge: int, n_node: int) -> None:
        if self.edge_assign.size and (self.edge_assign.min() < 0 or self.edge_assign.max() >= n_edge):
            raise ContractError("edge module index out of range")
        if self.node_assign.min() < 0 or self.node_assign.max() >= n_node:
            raise ContractError("node module index out of range")

    @classmethod
    def uniform(cls, n: int, edge_module: int = 0) -> "Structure":
        return cls(np.full(n * (n - 1), edge_module), np.zeros(n))

    @classmethod
    def random(cls, n: int, n_edge: int, rng: np.random.Generator, n_node: int = 1) -> "Structure":
        return cls(rng.integers(0, n_edge, n * (n - 1)), rng.integers(0, n_node, n))

    @classmethod
    def from_truth(cls, graph: RelationGraph) -> "Structure":
        """Edge ``i -> j`` uses module ``relation(i, j)``."""
        m = graph.matrix()
        s, r = edge_slots(graph.n_entities)
        return cls(m[s, r], np.zeros(graph.n_entities))


def enumerate_structures(n: int, n_edge: int):
    """Every edge assignment (single node module), as an ``(n_edge**E, E)`` array."""
    E = n * (n - 1)
    return np.array(list(itertools.product(range(n_edge), repeat=E)), dtype=np.int64).reshape(-1, E)


@dataclass
class ModuleLibrary:
    edge_spec: MlpSpec
    node_spec: MlpSpec
    edge_params: list
    node_params: list
    # fixed per-dimension scales: modules see ``s / in_scale`` and the node
    # module's output is multiplied by ``out_scale`` before the residual add
    in_scale: np.ndarray | None = None
    out_scale: np.ndarray | None = None

    def __post_init__(self):
        D, m = self.state_dim, self.msg_dim
        for name in ("in_scale", "out_scale"):
            v = getattr(self, name)
            v = np.ones(D) if v is None else np.asarray(v, dtype=np.float64)
            if v.shape != (D,) or not np.all(v > 0) or not np.all(np.isfinite(v)):
                raise ContractError(f"{name} must be {D} positive finite numbers")
            setattr(self, name, v)
        if self.edge_spec.n_in != 2 * D or self.node_spec.n_in != D + m or self.node_spec.n_out != D:
            raise ContractError("edge/node module specs are inconsistent")
        for p in self.edge_params:
            if p.shape != (self.edge_spec.n_params,):
                raise ContractError("edge params do not match edge spec")
        for p in self.node_params:
            if p.shape != (self.node_spec.n_params,):
                raise ContractError("node params do not match node spec")

    @property
    def state_dim(self) -> int:
        return self.node_spec.n_out

    @property
    def msg_dim(self) -> int:
        return self.edge_spec.n_out

    @property
    def n_edge_modules(self) -> int:
        return len(self.edge_params)

    @property
    def n_node_modules(self) -> int:
        return len(self.node_params)

    @classmethod
    def create(cls, rng: np.random.Generator, n_edge: int = 2, n_node: int = 1, state_dim: int = 4,
               msg_dim: int = 16, hidden: int = 64, activation: str = "tanh", in_scale=None,
               out_scale=None) -> "ModuleLibrary":
        edge_spec = MlpSpec((2 * state_dim, hidden, hidden, msg_dim), activation)
        node_spec = MlpSpec((state_dim + msg_dim, hidden, state_dim), activation)
        return cls(edge_spec, node_spec, [edge_spec.init(rng) for _ in range(n_edge)],
                   [node_spec.init(rng) for _ in range(n_node)], in_scale, out_scale)

    def copy(self) -> "ModuleLibrary":
        return ModuleLibrary(self.edge_spec, self.node_spec, [p.copy() for p in self.edge_params],
                             [p.copy() for p in self.node_params], self.in_scale.copy(), self.out_scale.copy())

    def zeros_like(self) -> "ModuleLibrary":
        return ModuleLibrary(self.edge_spec, self.node_spec, [np.zeros_like(p) for p in self.edge_params],
                             [np.zeros_like(p) for p in self.node_params], self.in_scale.copy(),
                             self.out_scale.copy())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.edge_params + self.node_params + [self.in_scale, self.out_scale]:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


@dataclass
class LibraryGrads:
    edge: list
    node: list
    edge_used: np.ndarray
    node_used: np.ndarray

    @classmethod
    def zeros(cls, library: ModuleLibrary) -> "LibraryGrads":
        return cls([np.zeros_like(p) for p in library.edge_params],
                   [np.zeros_like(p) for p in library.node_params],
                   np.zeros(library.n_edge_modules, bool), np.zeros(library.n_node_modules, bool))

    def add_(self, other: "LibraryGrads") -> "LibraryGrads":
        for a, b in zip(self.edge + self.node, other.edge + other.node):
            a += b
        self.edge_used |= other.edge_used
        self.node_used |= other.node_used
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate(self.edge + self.node)


# ---------------------------------------------------------------------------
# one message-passing round on a stack of graphs


@dataclass
class StepTape:
    shape: tuple
    edge_groups: list
    node_groups: list
    n_edge: int
    n_node: int
    used: bool = field(default=False)
    single: bool = field(default=False)


def fit_scales(trajectories) -> tuple:
    """Per-dimension standard deviations of states and of one-step changes.

    ``trajectories`` is a ``(N, T, n, d)`` stack. Used as the fixed
    ``in_scale`` / ``out_scale`` of a library; tiny values are floored.
    """
    X = np.asarray(trajectories, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] < 2:
        raise ContractError("expected a (N, T>=2, n, d) stack of trajectories")
    in_scale = X.std(axis=(0, 1, 2))
    out_scale = np.diff(X, axis=1).std(axis=(0, 1, 2))
    return np.maximum(in_scale, 1e-6), np.maximum(out_scale, 1e-9)


def _group_forward(specs_params, assign, inputs, out):
    groups = []
    for k, (spec, params) in enumerate(specs_params):
        idx = np.flatnonzero(assign == k)
        if idx.size == 0:
            continue
        if idx.size == assign.size:
            out[...], tape = mlp_forward(spec, params, inputs)
            groups.append((k, None, tape))
        else:
            out[idx], tape = mlp_forward(spec, params, inputs[idx])
            groups.append((k, idx, tape))
    return groups


def _forward(library: ModuleLibrary, X: np.ndarray, edge_mod: np.ndarray, node_mod: np.ndarray):
    G, n, D = X.shape
    if D != library.state_dim:
        raise ContractError(f"state dim {D} != library state dim {library.state_dim}")
    top = _topology(n)
    E = len(top.senders)
    Xs = X / library.in_scale
    inp = np.concatenate([Xs[:, top.senders], Xs[:, top.receivers]], axis=-1).reshape(G * E, 2 * D)
    msg = np.empty((G * E, library.msg_dim))
    em = np.broadcast_to(edge_mod, (G, E)).reshape(-1)
    eg = _group_forward([(library.edge_spec, p) for p in library.edge_params], em, inp, msg)
    agg = msg.reshape(G, n, n - 1, library.msg_dim).sum(axis=2)
    node_in = np.concatenate([Xs, agg], axis=-1).reshape(G * n, D + library.msg_dim)
    delta = np.empty((G * n, D))
    nm = np.broadcast_to(node_mod, (G, n)).reshape(-1)
    ng = _group_forward([(library.node_spec, p) for p in library.node_params], nm, node_in, delta)
    with np.errstate(over="ignore", invalid="ignore"):
        Xn = X + delta.reshape(G, n, D) * library.out_scale
    if not np.all(np.isfinite(Xn)):
        raise ModelDiverged()
    return Xn, StepTape((G, n, D), eg, ng, library.n_edge_modules, library.n_node_modules)


def _backward(library: ModuleLibrary, tape: StepTape, dXn: np.ndarray, need_input: bool = True):
    if tape.used:
        raise ContractError("step tape already consumed")
    tape.used = True
    G, n, D = tape.shape
    m = library.msg_dim
    E = n * (n - 1)
    grads = LibraryGrads.zeros(library)
    d_delta = (dXn * library.out_scale).reshape(G * n, D)
    d_node_in = np.empty((G * n, D + m))
    for k, idx, t in tape.node_groups:
        gp, gi = backward(t, d_delta if idx is None else d_delta[idx])
        grads.node[k] += gp
        grads.node_used[k] = True
        if idx is None:
            d_node_in[...] = gi
        else:
            d_node_in[idx] = gi
    d_msg = np.broadcast_to(d_node_in[:, D:].reshape(G, n, 1, m), (G, n, n - 1, m)).reshape(G * E, m)
    d_inp = np.empty((G * E, 2 * D)) if need_input else None
    for k, idx, t in tape.edge_groups:
        gp, gi = backward(t, d_msg if idx is None else d_msg[idx], need_input=need_input)
        grads.edge[k] += gp
        grads.edge_used[k] = True
        if need_input:
            if idx is None:
                d_inp[...] = gi
            else:
                d_inp[idx] = gi
    tape.edge_groups = tape.node_groups = []
    if not need_input:
        return grads, None
    top = _topology(n)
    dXs = d_node_in[:, :D].reshape(G, n, D)
    d_inp = d_inp.reshape(G, E, 2 * D)
    dXs += d_inp[..., D:].reshape(G, n, n - 1, D).sum(axis=2)
    d_send = np.ascontiguousarray(d_inp[..., :D].transpose(0, 2, 1)).reshape(G * D, E)
    dXs += (d_send @ top.send_onehot).reshape(G, D, n).transpose(0, 2, 1)
    return grads, dXn + dXs / library.in_scale


def _as_stack(states):
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        return states[None], True
    if states.ndim == 3:
        return states, False
    raise ContractError(f"states must be (n, d) or (batch, n, d), got {states.shape}")


def step(structure: Structure, library: ModuleLibrary, states: np.ndarray):
    """Advance ``states`` (``(n, d)`` or ``(batch, n, d)``) by one transition.

    Returns ``(next_states, tape)``.
    """
    X, single = _as_stack(states)
    if X.shape[1] != structure.n:
        raise ContractError("structure and states disagree on the number of nodes")
    structure.check(library.n_edge_modules, library.n_node_modules)
    Xn, tape = _forward(library, X, structure.edge_assign, structure.node_assign)
    tape.single = single
    return (Xn[0] if single else Xn), tape


def step_backward(library: ModuleLibrary, tape: StepTape, upstream: np.ndarray):
    """Gradients of ``<upstream, next_states>``: ``(LibraryGrads, d_states)``."""
    single = getattr(tape, "single", False)
    up = np.asarray(upstream, dtype=np.float64)
    grads, dX = _backward(library, tape, up[None] if single else up)
    return grads, (dX[0] if single else dX)


@dataclass
class Rollout:
    states: np.ndarray  # (horizon + 1, ..., n, d)
    tapes: list
    single: bool


def rollout(structure: Structure, library: ModuleLibrary, init: np.ndarray, horizon: int) -> Rollout:
    """Iterate :func:`step` ``horizon`` times; ``states[0]`` is ``init``."""
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    X, single = _as_stack(init)
    structure.check(library.n_edge_modules, library.n_node_modules)
    out = [X]
    tapes = []
    for t in range(horizon):
        try:
            X, tape = _forward(library, X, structure.edge_assign, structure.node_assign)
        except ModelDiverged:
            raise ModelDiverged(t + 1) from None
        out.append(X)
        tapes.append(tape)
    states = np.stack(out)
    return Rollout(states[:, 0] if single else states, tapes, single)


def rollout_backward(library: ModuleLibrary, ro: Rollout, upstream: np.ndarray):
    """Backpropagate ``upstream`` (same shape as ``ro.states``) to params and the initial state."""
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != ro.states.shape:
        raise ContractError("upstream must match the rollout states")
    if ro.single:
        up = up[:, None]
    grads = LibraryGrads.zeros(library)
    g = up[-1].copy()
    for t in range(len(ro.tapes) - 1, -1, -1):
        gt, dX = _backward(library, ro.tapes[t], g)
        grads.add_(gt)
        g = dX + up[t]
    return grads, (g[0] if ro.single else g)


# ---------------------------------------------------------------------------
# losses over state transitions


def default_transitions(T: int, horizon: int = 1) -> np.ndarray:
    return np.arange(0, T - horizon)


@dataclass
class SuperGraph:
    """A batch of tasks' transitions executed as one disjoint union of graphs."""

    starts: np.ndarray    # (B, P, n, d)
    targets: np.ndarray   # (B, P, h, n, d)
    edge_mod: np.ndarray  # (B, E)
    node_mod: np.ndarray  # (B, n)

    @property
    def n_tasks(self) -> int:
        return self.starts.shape[0]

    @property
    def n(self) -> int:
        return self.starts.shape[2]

    @property
    def horizon(self) -> int:
        return self.targets.shape[2]

    def node_offsets(self) -> np.ndarray:
        """Global index of node 0 of every (task, transition) graph, shape ``(B, P)``."""
        B, P, n = self.starts.shape[:3]
        return (np.arange(B * P) * n).reshape(B, P)

    def edge_list(self) -> np.ndarray:
        """Renamed global ``(sender, receiver, module)`` rows of the whole super-graph."""
        B, P = self.starts.shape[:2]
        s, r = edge_slots(self.n)
        off = self.node_offsets().reshape(B, P, 1)
        mods = np.broadcast_to(self.edge_mod[:, None, :], (B, P, len(s)))
        return np.stack([(off + s).reshape(-1), (off + r).reshape(-1), mods.reshape(-1)], axis=1)

    def task_of_node(self) -> np.ndarray:
        B, P, n = self.starts.shape[:3]
        return np.repeat(np.arange(B), P * n)


def build_supergraph(trajectories, structures, transitions=None, horizon: int = 1) -> SuperGraph:
    """Stack the transitions of several tasks into one super-graph.

    ``trajectories`` are ``(T, n, d)`` state arrays sharing ``n`` and ``d``;
    ``transitions`` selects start indices (shared by all tasks, or one array
    per task of equal length).
    """
    trajs = [np.asarray(t, dtype=np.float64) for t in trajectories]
    structures = list(structures)
    if not trajs or len(trajs) != len(structures):
        raise ContractError("need one structure per trajectory")
    shapes = {t.shape[1:] for t in trajs}
    if len(shapes) != 1:
        raise ContractError(f"heterogeneous batch: node/state shapes {sorted(shapes)}")
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    if transitions is None:
        Tmin = min(len(t) for t in trajs)
        transitions = default_transitions(Tmin, horizon)
    tr = np.asarray(transitions, dtype=np.int64)
    per_task = tr.ndim == 2
    starts, targets = [], []
    offs = np.arange(1, horizon + 1)
    for b, traj in enumerate(trajs):
        idx = tr[b] if per_task else tr
        if len(idx) == 0 or idx.min() < 0 or idx.max() + horizon >= len(traj):
            raise ContractError("transition index out of range")
        starts.append(traj[idx])
        targets.append(traj[idx[:, None] + offs[None, :]])
    n = trajs[0].shape[1]
    for s in structures:
        if s.n != n:
            raise ContractError("structure size does not match the trajectories")
    return SuperGraph(np.stack(starts), np.stack(targets),
                      np.stack([s.edge_assign for s in structures]),
                      np.stack([s.node_assign for s in structures]))


def _run_supergraph(sg: SuperGraph, library: ModuleLibrary, grad: bool):
    B, P, n, D = sg.starts.shape
    h = sg.horizon
    X = sg.starts.reshape(B * P, n, D)
    em = np.repeat(sg.edge_mod, P, axis=0)
    nm = np.repeat(sg.node_mod, P, axis=0)
    tapes, errs = [], []
    sq = np.zeros(B)
    for k in range(h):
        X, tape = _forward(library, X, em, nm)
        tapes.append(tape)
        err = X.reshape(B, P, n, D) - sg.targets[:, :, k]
        errs.append(err)
        sq += np.einsum("bpnd,bpnd->b", err, err)
    norm = P * h * n * D
    losses = sq / norm
    if not grad:
        return losses, None
    grads = LibraryGrads.zeros(library)
    g = None
    for k in range(h - 1, -1, -1):
        up = (2.0 / norm) * errs[k].reshape(B * P, n, D)
        if g is not None:
            up = up + g
        gk, g = _backward(library, tapes[k], up, need_input=k > 0)
        grads.add_(gk)
    return losses, grads


def supergraph_losses(sg: SuperGraph, library: ModuleLibrary) -> np.ndarray:
    """Per-task mean squared transition error."""
    return _run_supergraph(sg, library, grad=False)[0]


def supergraph_loss_grad(sg: SuperGraph, library: ModuleLibrary):
    """Per-task losses and the gradient of their sum (pooled over tasks)."""
    return _run_supergraph(sg, library, grad=True)


def transition_loss(structure: Structure, library: ModuleLibrary, trajectory: np.ndarray,
                    transitions=None, horizon: int = 1) -> float:
    """Mean squared error of predicted states over a set of transitions.

    Each selected start ``t`` is fed the observed state ``s^t`` (teacher
    forcing) and predicts ``horizon`` steps ahead. The loss is a plain mean
    over starts, so the order of the transitions does not matter.
    """
    structure.check(library.n_edge_modules, library.n_node_modules)
    sg = build_supergraph([trajectory], [structure], transitions, horizon)
    return float(supergraph_losses(sg, library)[0])


def transition_loss_grad(structure: Structure, library: ModuleLibrary, trajectory: np.ndarray,
                         transitions=None, horizon: int = 1):
    structure.check(library.n_edge_modules, library.n_node_modules)
    sg = build_supergraph([trajectory], [structure], transitions, horizon)
    losses, grads = supergraph_loss_grad(sg, library)
    return float(losses[0]), grads


class TransitionScorer:
    """One-step teacher-forced losses of many candidate structures, weights frozen.

    Messages of every edge module on every edge slot are computed once, so a
    candidate costs only the node-module pass. Losses agree with
    :func:`transition_loss` up to floating-point reassociation.
    """

    def __init__(self, library: ModuleLibrary, starts: np.ndarray, targets: np.ndarray):
        starts = np.asarray(starts, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if starts.ndim != 4 or starts.shape != targets.shape:
            raise ContractError("starts/targets must both be (B, P, n, d)")
        self.library = library
        self.starts = starts
        self.targets = targets
        B, P, n, D = starts.shape
        top = _topology(n)
        self._scaled = starts / library.in_scale
        inp = np.concatenate([self._scaled[:, :, top.senders], self._scaled[:, :, top.receivers]], axis=-1)
        self.messages = np.stack([
            mlp_forward(library.edge_spec, p, inp)[0] for p in library.edge_params
        ])  # (H, B, P, E, m)
        self._b = np.arange(B)[:, None, None]
        self._p = np.arange(P)[None, :, None]
        self._e = np.arange(len(top.senders))[None, None, :]

    @classmethod
    def for_trajectories(cls, library: ModuleLibrary, trajectories, transitions):
        trajs = np.stack([np.asarray(t, dtype=np.float64) for t in trajectories])
        tr = np.asarray(transitions, dtype=np.int64)
        if tr.ndim == 1:
            return cls(library, trajs[:, tr], trajs[:, tr + 1])
        b = np.arange(len(trajs))[:, None]
        return cls(library, trajs[b, tr], trajs[b, tr + 1])

    def subset(self, tasks) -> "TransitionScorer":
        sc = object.__new__(TransitionScorer)
        sc.library = self.library
        sc.starts = self.starts[tasks]
        sc._scaled = self._scaled[tasks]
        sc.targets = self.targets[tasks]
        sc.messages = self.messages[:, tasks]
        sc._b = np.arange(len(sc.starts))[:, None, None]
        sc._p, sc._e = self._p, self._e
        return sc

    def node_costs(self, edge_assign: np.ndarray, node_assign: np.ndarray | None = None) -> np.ndarray:
        """Summed squared error per (task, receiver node), shape ``(B, n)``."""
        B, P, n, D = self.starts.shape
        ea = np.asarray(edge_assign).reshape(B, -1)
        msg = self.messages[ea[:, None, :], self._b, self._p, self._e]  # (B, P, E, m)
        agg = msg.reshape(B, P, n, n - 1, -1).sum(axis=3)
        node_in = np.concatenate([self._scaled, agg], axis=-1)
        lib = self.library
        if node_assign is None or lib.n_node_modules == 1:
            delta = mlp_forward(lib.node_spec, lib.node_params[0], node_in)[0]
        else:
            na = np.broadcast_to(np.asarray(node_assign).reshape(B, 1, n), (B, P, n)).reshape(-1)
            flat = node_in.reshape(-1, node_in.shape[-1])
            delta = np.empty((flat.shape[0], D))
            _group_forward([(lib.node_spec, p) for p in lib.node_params], na, flat, delta)
            delta = delta.reshape(B, P, n, D)
        err = self.starts + delta * lib.out_scale - self.targets
        return np.einsum("bpnd,bpnd->bn", err, err)

    def losses(self, edge_assign: np.ndarray, node_assign: np.ndarray | None = None) -> np.ndarray:
        B, P, n, D = self.starts.shape
        c = self.node_costs(edge_assign, node_assign)
        return c.sum(axis=1) / (P * n * D)
