"""Experiment steps shared by the command line and the acceptance checks."""
from __future__ import annotations

import time

import numpy as np

from .anneal import MetaTestConfig, meta_test, split_transitions, task_stream
from .gnn import ModuleLibrary, Structure, TransitionScorer, enumerate_structures
from .latent import LatentConfig, hide_node, infer_latent, static_latent_mse
from .metrics import edge_accuracy, kstep_mse, static_prediction
from .nn import ContractError
from .proposal import ProposalParams, encode, make_proposer
from .sim import SPRINGS, TaskSet, graph_from_matrix

META_TEST_STREAM = 200
LATENT_STREAM = 300


def search_proposer(mode: str, library: ModuleLibrary, proposal: ProposalParams | None, random_rate: float = 0.1):
    if mode in ("learned", "mixed") and proposal is None:
        raise ContractError(f"proposal mode {mode!r} needs a trained proposal encoder")
    rate = 0.0 if mode == "learned" else random_rate
    return make_proposer("mixed" if mode != "random" else "random", library.n_edge_modules, rate)


def evaluate_task(task, library: ModuleLibrary, proposal, mode: str, config: MetaTestConfig,
                  rng: np.random.Generator, random_rate: float = 0.1) -> dict:
    """Meta-test one task and score it. Returns one metrics row (without the task id)."""
    t0 = time.perf_counter()
    proposer = search_proposer(mode, library, proposal, random_rate)
    probs = encode(task.observed, proposal) if proposer.needs_probs else None
    res = meta_test(task, library, proposer, config=config, probs=probs, rng=rng)
    fut = task.future
    static = static_prediction(task.states[task.train_horizon - 1], len(fut))
    row = {"edge_accuracy": edge_accuracy(res.structure, task.truth, library.n_edge_modules),
           "proposals": config.budget,
           "proposals_to_best": int(np.argmax(res.trace <= res.loss)) + 1,
           "search_loss": res.loss}
    for k in (1, 10):
        if len(fut) >= k:
            row[f"mse_{k}"] = kstep_mse(res.prediction, fut, k)
            row[f"static_mse_{k}"] = kstep_mse(static, fut, k)
    row["wall_time"] = time.perf_counter() - t0
    row["structure"] = res.structure
    return row


def run_meta_test(task_set: TaskSet, library: ModuleLibrary, proposal, mode: str = "learned",
                  config: MetaTestConfig = MetaTestConfig(), random_rate: float = 0.1) -> list:
    rows = []
    for i, task in enumerate(task_set.tasks):
        rng = task_stream(config.seed, i, META_TEST_STREAM)
        row = {"task": i}
        row.update(evaluate_task(task, library, proposal, mode, config, rng, random_rate))
        rows.append(row)
    return rows


def exhaustive_optimum(task, library: ModuleLibrary, split: str = "all"):
    """Lowest search loss over every edge assignment; ``(loss, edge_assign)``."""
    L = task.train_horizon
    idx = np.arange(L - 1) if split == "all" else split_transitions(L - 1)[0]
    scorer = TransitionScorer.for_trajectories(library, task.states[:L][None], idx)
    allS = enumerate_structures(task.n, library.n_edge_modules)
    best, arg = np.inf, None
    for lo in range(0, len(allS), 1024):
        chunk = allS[lo: lo + 1024]
        sub = scorer.subset(np.zeros(len(chunk), dtype=np.int64))
        losses = sub.losses(chunk)
        j = int(np.argmin(losses))
        if losses[j] < best:
            best, arg = float(losses[j]), chunk[j].copy()
    return best, arg


def proposals_to_optimum(task, library: ModuleLibrary, proposer, probs, optimum: float, budget: int,
                         restart_every: int, seed: int, rel_tol: float = 1e-9) -> int:
    """First proposal count at which the best-so-far loss reaches ``optimum``; ``budget + 1`` if never."""
    cfg = MetaTestConfig(budget=budget, restart_every=restart_every, seed=seed)
    res = meta_test(task, library, proposer, config=cfg, probs=probs, predict=False)
    hit = np.flatnonzero(res.trace <= optimum * (1 + rel_tol))
    return int(hit[0]) + 1 if hit.size else budget + 1


def latent_candidates(task_set: TaskSet, count: int, node: int = -1) -> list:
    """Indices of tasks where the hidden node interacts with something (springs: has a spring)."""
    out = []
    for i, t in enumerate(task_set.tasks):
        h = node % t.n
        if task_set.kind != SPRINGS or (t.truth.matrix()[h] == 1).any():
            out.append(i)
        if len(out) == count:
            break
    return out


def run_latent(task, library: ModuleLibrary, config: LatentConfig, node: int = -1, module_map=None) -> dict:
    """Hide ``node`` of ``task``, infer it with the true structure, and score the result."""
    h = node % task.n
    obs, hidden, order = hide_node(task.observed, h)
    labels = task.truth.matrix()[np.ix_(order, order)]
    s = Structure.from_truth(graph_from_matrix(labels))
    if module_map is not None:
        s = Structure(np.asarray(module_map)[s.edge_assign], s.node_assign)
    hyp = infer_latent(obs, s, library, config)
    d = hyp.trajectory - hidden
    # static baseline: the best raw draw of the first round, held fixed
    first = LatentConfig(**{**config.__dict__, "rounds": 1, "gd_steps": 0, "top_k": 0})
    raw = infer_latent(obs, s, library, first)
    return {"loss": hyp.loss, "latent_mse": float(np.mean(d * d)),
            "static_mse": static_latent_mse(raw.init_state, hidden), "hypothesis": hyp}
