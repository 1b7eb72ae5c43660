"""Alternating structure search and module training (BounceGrad).

Each meta-training task keeps its own structure between epochs. An epoch
walks the tasks in shuffled batches; for every batch it runs simulated
annealing over structures on the tasks' train transitions, optionally trains
the proposal encoder on the resulting structures, then takes one pooled Adam
step on the module weights using the tasks' test transitions.
"""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .gnn import (ModelDiverged, ModuleLibrary, Structure, TransitionScorer, build_supergraph, fit_scales,
                  rollout, supergraph_loss_grad, supergraph_losses)
from .nn import AdamState, ContractError, adam_step
from .proposal import ProposalParams, Proposer, encode, make_proposer, train_proposal_step
from .sim import TaskSet

LOG_COLUMNS = ("epoch", "mean_train_loss", "mean_test_loss", "acceptance_rate", "temperature",
               "proposal_mode")
PROPOSAL_MODES = ("random", "learned", "mixed")


def split_transitions(n_transitions: int, train_fraction: float = 0.6):
    """Interleaved train/test split of transition start indices.

    Transition ``t`` goes to train when ``floor((t+1) f) > floor(t f)``, which
    spreads the train share ``f`` evenly along the trajectory.
    """
    t = np.arange(n_transitions)
    is_train = np.floor((t + 1) * train_fraction) > np.floor(t * train_fraction)
    return t[is_train], t[~is_train]


def sa_accept(current_loss: float, proposed_loss: float, temperature: float,
              rng: np.random.Generator) -> bool:
    """Metropolis rule; non-finite losses are rejected."""
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    if not (math.isfinite(current_loss) and math.isfinite(proposed_loss)):
        warnings.warn("non-finite loss in annealing step; proposal rejected", RuntimeWarning)
        return False
    if proposed_loss <= current_loss:
        return True
    return bool(rng.random() < math.exp(-(proposed_loss - current_loss) / temperature))


@dataclass
class TaskData:
    """Arrays of a task set prepared for training and search."""

    observed: np.ndarray  # (N, L, n, d) observation window
    train_idx: np.ndarray
    test_idx: np.ndarray

    @classmethod
    def from_task_set(cls, task_set: TaskSet, train_fraction: float = 0.6) -> "TaskData":
        L = task_set.tasks[0].train_horizon
        obs = np.stack([t.states[:L] for t in task_set.tasks])
        tr, te = split_transitions(L - 1, train_fraction)
        return cls(obs, tr, te)

    def __len__(self):
        return len(self.observed)


@dataclass
class AnnealState:
    edge_assign: np.ndarray  # (N, E)
    node_assign: np.ndarray  # (N, n)
    losses: np.ndarray       # (N,) train loss of the stored structure
    temperature: float
    decay: float = 0.997
    floor: float = 1e-3
    t0: float = 1.0
    k: int = 0
    rngs: list = field(default_factory=list)

    def structure(self, i: int) -> Structure:
        return Structure(self.edge_assign[i], self.node_assign[i])

    def set_structure(self, i: int, s: Structure) -> None:
        self.edge_assign[i] = s.edge_assign
        self.node_assign[i] = s.node_assign

    def cool(self, reference_loss: float | None = None) -> None:
        """Advance the geometric schedule by one step.

        Without a reference the temperature is ``t0 * max(decay**k, floor)``.
        With one it is ``max(decay**k, floor) * reference_loss``, never rising
        above the previous temperature.
        """
        self.k += 1
        factor = max(self.decay ** self.k, self.floor)
        if reference_loss is None:
            self.temperature = self.t0 * factor
        elif math.isfinite(reference_loss) and reference_loss > 0:
            self.temperature = min(self.temperature, factor * reference_loss)


@dataclass
class SAStats:
    n_tasks: int
    n_accepted: int
    tasks: np.ndarray
    targets: np.ndarray  # edge assignments after the step, for proposal training

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / max(self.n_tasks, 1)


def sa_epoch(state: AnnealState, data: TaskData, batch, library: ModuleLibrary, proposer: Proposer,
             probs: np.ndarray | None = None, scorer: TransitionScorer | None = None,
             cool: bool = True) -> SAStats:
    """One propose / evaluate / accept round for every task in ``batch``.

    ``probs`` holds the edge distributions of the batch tasks when the
    proposer needs them. Losses are measured on the train transitions.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if scorer is None:
        scorer = TransitionScorer.for_trajectories(library, data.observed[batch], data.train_idx)
    current = scorer.losses(state.edge_assign[batch], state.node_assign[batch])
    state.losses[batch] = current
    proposals = []
    for b, i in enumerate(batch):
        p = probs[b] if probs is not None else None
        proposals.append(proposer(state.structure(i), state.rngs[i], p))
    proposed = scorer.losses(np.stack([p.edge_assign for p in proposals]),
                             np.stack([p.node_assign for p in proposals]))
    accepted = 0
    for b, i in enumerate(batch):
        if sa_accept(float(current[b]), float(proposed[b]), state.temperature, state.rngs[i]):
            state.set_structure(i, proposals[b])
            state.losses[i] = proposed[b]
            accepted += 1
    if cool:
        state.cool()
    return SAStats(len(batch), accepted, batch, state.edge_assign[batch].copy())


@dataclass
class GDStats:
    mean_test_loss: float
    updated_edge: np.ndarray
    updated_node: np.ndarray
    skipped: bool = False


def gd_epoch(state: AnnealState, data: TaskData, batch, library: ModuleLibrary, adams: dict,
             refresh: bool = True, horizon: int = 1) -> GDStats:
    """Pooled gradient step on the test transitions of ``batch``.

    Gradients of every task's test loss are summed per module; only modules
    used by at least one task in the batch take an Adam step. ``adams`` maps
    ``("edge", k)`` / ``("node", k)`` to :class:`AdamState`. ``library`` is
    updated in place.
    """
    batch = np.asarray(batch, dtype=np.int64)
    test_idx = data.test_idx
    if horizon > 1:
        test_idx = test_idx[test_idx + horizon < data.observed.shape[1]]
    sg = build_supergraph(data.observed[batch], [state.structure(i) for i in batch], test_idx, horizon)
    try:
        losses, grads = supergraph_loss_grad(sg, library)
    except ModelDiverged:
        warnings.warn("model diverged on a gradient batch; update skipped", RuntimeWarning)
        return GDStats(float("nan"), np.zeros(library.n_edge_modules, bool),
                       np.zeros(library.n_node_modules, bool), skipped=True)
    flat = grads.flat()
    if not np.all(np.isfinite(flat)):
        warnings.warn("non-finite pooled gradient; update skipped", RuntimeWarning)
        return GDStats(float(np.mean(losses)), np.zeros_like(grads.edge_used),
                       np.zeros_like(grads.node_used), skipped=True)
    for k in np.flatnonzero(grads.edge_used):
        library.edge_params[k] = adam_step(adams[("edge", k)], library.edge_params[k], grads.edge[k])
    for k in np.flatnonzero(grads.node_used):
        library.node_params[k] = adam_step(adams[("node", k)], library.node_params[k], grads.node[k])
    if refresh:
        refresh_losses(state, data, batch, library)
    return GDStats(float(np.mean(losses)), grads.edge_used.copy(), grads.node_used.copy())


def refresh_losses(state: AnnealState, data: TaskData, tasks, library: ModuleLibrary,
                   chunk: int = 100) -> None:
    tasks = np.asarray(tasks, dtype=np.int64)
    for lo in range(0, len(tasks), chunk):
        idx = tasks[lo: lo + chunk]
        sg = build_supergraph(data.observed[idx], [state.structure(i) for i in idx], data.train_idx)
        try:
            state.losses[idx] = supergraph_losses(sg, library)
        except ModelDiverged:
            state.losses[idx] = np.inf


def make_adams(library: ModuleLibrary, lr: float) -> dict:
    adams = {("edge", k): AdamState.zeros(library.edge_spec.n_params, lr=lr)
             for k in range(library.n_edge_modules)}
    adams.update({("node", k): AdamState.zeros(library.node_spec.n_params, lr=lr)
                  for k in range(library.n_node_modules)})
    return adams


# ---------------------------------------------------------------------------
# meta-training


@dataclass
class MetaTrainConfig:
    epochs: int = 300
    batch_size: int = 250
    sa_steps: int = 10
    gd_steps: int = 1
    decay: float = 0.95
    floor: float = 1e-3
    proposal_mode: str = "mixed"
    random_rate: float = 0.1
    node_proposals: float = 0.0
    lr: float = 3e-3
    proposal_lr: float = 1e-3
    train_fraction: float = 0.6
    horizon: int = 1
    seed: int = 0
    n_edge_modules: int = 2
    n_node_modules: int = 1
    hidden: int = 64
    msg_dim: int = 16
    encoder_hidden: int = 64
    fixed_structures: str | None = None
    normalize: bool = True

    def __post_init__(self):
        for name in ("batch_size", "sa_steps", "gd_steps", "n_edge_modules", "n_node_modules", "hidden",
                     "msg_dim", "encoder_hidden", "horizon"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if not 0 < self.decay <= 1:
            raise ContractError("decay must lie in (0, 1]")
        if self.proposal_mode not in PROPOSAL_MODES:
            raise ContractError(f"proposal_mode must be one of {PROPOSAL_MODES}")
        if self.fixed_structures not in (None, "truth"):
            raise ContractError("fixed_structures must be null or 'truth'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetaTrainResult:
    library: ModuleLibrary
    proposal: ProposalParams | None
    log: list
    state: AnnealState


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return {name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
            for k, name in enumerate(("library", "proposal", "order", "structures"))}, ss


def task_stream(seed: int, i: int, purpose: int = 100) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, i)))


def _write_log_row(path, row, header):
    new = header and not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerow([row[c] for c in LOG_COLUMNS])


def meta_train(task_set: TaskSet, config: MetaTrainConfig = MetaTrainConfig(), log_path=None,
               progress=None) -> MetaTrainResult:
    """Learn a module library (and proposal encoder) from ``task_set``."""
    if len(task_set) == 0:
        raise ContractError("task set is empty")
    streams, _ = _streams(config.seed)
    data = TaskData.from_task_set(task_set, config.train_fraction)
    N, L, n, D = data.observed.shape
    scales = fit_scales(data.observed) if config.normalize else (None, None)
    library = ModuleLibrary.create(streams["library"], config.n_edge_modules, config.n_node_modules, D,
                                   config.msg_dim, config.hidden, in_scale=scales[0], out_scale=scales[1])
    learn_proposals = config.proposal_mode in ("learned", "mixed")
    proposal = None
    if learn_proposals:
        proposal = ProposalParams.create(streams["proposal"], L, D, config.n_edge_modules,
                                         config.encoder_hidden)
        padam = AdamState.zeros(len(proposal.values), lr=config.proposal_lr)
    proposer = make_proposer(config.proposal_mode, config.n_edge_modules, config.random_rate,
                             config.node_proposals, config.n_node_modules)
    fixed = config.fixed_structures == "truth"
    if fixed:
        structs = [Structure.from_truth(t.truth) for t in task_set.tasks]
        if max(int(s.edge_assign.max()) for s in structs) >= config.n_edge_modules:
            raise ContractError("need at least as many edge modules as relation labels")
    else:
        structs = [Structure.random(n, config.n_edge_modules, streams["structures"], config.n_node_modules)
                   for _ in range(N)]
    state = AnnealState(np.stack([s.edge_assign for s in structs]), np.stack([s.node_assign for s in structs]),
                        np.zeros(N), 1.0, config.decay, config.floor,
                        rngs=[task_stream(config.seed, i) for i in range(N)])
    refresh_losses(state, data, np.arange(N), library)
    state.t0 = state.temperature = float(np.mean(state.losses))
    adams = make_adams(library, config.lr)
    log = []
    for epoch in range(config.epochs):
        order = streams["order"].permutation(N)
        acc = tried = 0
        test_losses = []
        for lo in range(0, N, config.batch_size):
            batch = np.sort(order[lo: lo + config.batch_size])
            if not fixed:
                probs = None
                if learn_proposals and proposer.needs_probs:
                    probs = encode(data.observed[batch], proposal)
                scorer = TransitionScorer.for_trajectories(library, data.observed[batch], data.train_idx)
                for _ in range(config.sa_steps):
                    st = sa_epoch(state, data, batch, library, proposer, probs, scorer, cool=False)
                    acc += st.n_accepted
                    tried += st.n_tasks
                if learn_proposals:
                    train_proposal_step(data.observed[batch], state.edge_assign[batch], proposal, padam)
            elif learn_proposals:
                train_proposal_step(data.observed[batch], state.edge_assign[batch], proposal, padam)
            for _ in range(config.gd_steps):
                gs = gd_epoch(state, data, batch, library, adams, refresh=False, horizon=config.horizon)
                test_losses.append(gs.mean_test_loss)
        refresh_losses(state, data, np.arange(N), library)
        state.cool(float(np.mean(state.losses)))
        row = {
            "epoch": epoch + 1,
            "mean_train_loss": float(np.mean(state.losses)),
            "mean_test_loss": float(np.mean(test_losses)),
            "acceptance_rate": acc / tried if tried else 0.0,
            "temperature": state.temperature,
            "proposal_mode": config.proposal_mode,
        }
        log.append(row)
        if log_path is not None:
            _write_log_row(log_path, row, header=True)
        if progress is not None:
            progress(row)
        if not math.isfinite(row["mean_train_loss"]) and not math.isfinite(row["mean_test_loss"]):
            raise FloatingPointError(f"losses non-finite across epoch {epoch + 1}")
    return MetaTrainResult(library, proposal, log, state)


# ---------------------------------------------------------------------------
# meta-test


@dataclass
class MetaTestConfig:
    budget: int = 2000
    restart_every: int = 400
    decay: float | None = None
    floor: float = 1e-3
    seed: int = 0
    split: str = "all"

    def __post_init__(self):
        if self.budget < 1 or self.restart_every < 1:
            raise ContractError("budget and restart_every must be >= 1")
        if self.split not in ("all", "train"):
            raise ContractError("split must be 'all' or 'train'")

    def segment_decay(self) -> float:
        # reach the floor at the end of every restart segment
        if self.decay is not None:
            return self.decay
        return self.floor ** (1.0 / max(self.restart_every - 1, 1))


@dataclass
class MetaTestResult:
    structure: Structure
    loss: float
    trace: np.ndarray          # best-so-far loss after each proposal
    current_trace: np.ndarray  # current-structure loss after each proposal
    acceptance_rate: float
    prediction: np.ndarray | None = None  # (test_horizon, n, d) free rollout


def meta_test(task, library: ModuleLibrary, proposer: Proposer, budget: int | None = None,
              config: MetaTestConfig = MetaTestConfig(), probs: np.ndarray | None = None,
              rng: np.random.Generator | None = None, predict: bool = True) -> MetaTestResult:
    """Search a structure for ``task`` with frozen modules, then predict its future.

    The search restarts from a fresh random structure every
    ``config.restart_every`` proposals, reheating the temperature to the new
    start's loss. The returned structure is the best seen overall.
    """
    budget = config.budget if budget is None else budget
    if budget < 1:
        raise ContractError("budget must be >= 1")
    if proposer.needs_probs and probs is None:
        raise ContractError("this proposer needs an edge distribution")
    L = task.train_horizon
    obs = task.states[:L]
    if config.split == "all":
        idx = np.arange(L - 1)
    else:
        idx = split_transitions(L - 1)[0]
    scorer = TransitionScorer.for_trajectories(library, obs[None], idx)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = task.n
    decay = config.segment_decay()
    best, best_loss = None, math.inf
    trace = np.empty(budget)
    cur_trace = np.empty(budget)
    accepted = 0
    cur = cur_loss = None
    temp = t0 = 1.0
    for it in range(budget):
        if it % config.restart_every == 0:
            cur = Structure.random(n, library.n_edge_modules, rng, library.n_node_modules)
            cur_loss = float(scorer.losses(cur.edge_assign[None], cur.node_assign[None])[0])
            t0 = cur_loss if math.isfinite(cur_loss) and cur_loss > 0 else 1.0
            temp = t0
            k = 0
            if cur_loss < best_loss:
                best, best_loss = cur.copy(), cur_loss
        prop = proposer(cur, rng, probs)
        prop_loss = float(scorer.losses(prop.edge_assign[None], prop.node_assign[None])[0])
        if sa_accept(cur_loss, prop_loss, temp, rng):
            cur, cur_loss = prop, prop_loss
            accepted += 1
            if cur_loss < best_loss:
                best, best_loss = cur.copy(), cur_loss
        k += 1
        temp = t0 * max(decay ** k, config.floor)
        trace[it] = best_loss
        cur_trace[it] = cur_loss
    res = MetaTestResult(best, best_loss, trace, cur_trace, accepted / budget)
    if predict and task.test_horizon > 0:
        res.prediction = predict_future(task, best, library)
    return res


def predict_future(task, structure: Structure, library: ModuleLibrary, horizon: int | None = None) -> np.ndarray:
    """Free-running rollout from the last observed state."""
    horizon = task.test_horizon if horizon is None else horizon
    last = task.states[task.train_horizon - 1]
    try:
        return rollout(structure, library, last, horizon).states[1:]
    except ModelDiverged:
        return np.full((horizon,) + last.shape, np.nan)
