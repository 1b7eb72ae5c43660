"""Inferring an unobserved particle from its effect on the observed ones.

The hidden particle is the last node of the structure. A hypothesis is its
initial state; the rest of its trajectory follows from running the model.
By default observed nodes are clamped to their recorded states at every step
(so the model predicts one step at a time from data) while the latent node
is carried forward by the model. The loss is the mean squared error of the
observed nodes' predictions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .fileio import atomic_write
from .gnn import ModelDiverged, ModuleLibrary, Structure, _backward, _forward
from .nn import AdamState, ContractError, adam_step

SENTINEL_LOSS = 1e6


def _check(init_states, observed, structure, library):
    init = np.asarray(init_states, dtype=np.float64)
    single = init.ndim == 1
    if single:
        init = init[None]
    obs = np.asarray(observed, dtype=np.float64)
    if obs.ndim != 3 or obs.shape[0] < 2:
        raise ContractError("observed must be (T>=2, n-1, d)")
    T, m, D = obs.shape
    if structure.n != m + 1:
        raise ContractError("structure must cover the observed nodes plus one latent node")
    if init.shape[1:] != (D,) or D != library.state_dim:
        raise ContractError("initial state dimension does not match the library")
    structure.check(library.n_edge_modules, library.n_node_modules)
    return init, single, obs


def latent_rollout(init_states, observed, structure: Structure, library: ModuleLibrary, clamp: bool = True,
                   keep_tapes: bool = False):
    """Joint rollout for a stack of candidate latent initial states.

    Returns ``(pred, latent, tapes)``: ``pred`` is ``(C, T-1, n-1, d)`` predicted
    observed-node states for steps ``1..T-1``, ``latent`` is ``(C, T, d)``.
    """
    init, _, obs = _check(init_states, observed, structure, library)
    C = len(init)
    T, m, D = obs.shape
    X = np.empty((C, m + 1, D))
    X[:, :m] = obs[0]
    X[:, m] = init
    pred = np.empty((C, T - 1, m, D))
    latent = np.empty((C, T, D))
    latent[:, 0] = init
    tapes = []
    for t in range(T - 1):
        try:
            Xn, tape = _forward(library, X, structure.edge_assign, structure.node_assign)
        except ModelDiverged:
            raise ModelDiverged(t + 1) from None
        if keep_tapes:
            tapes.append(tape)
        pred[:, t] = Xn[:, :m]
        latent[:, t + 1] = Xn[:, m]
        if clamp:
            X = Xn.copy()
            X[:, :m] = obs[t + 1]
        else:
            X = Xn
    return pred, latent, tapes


def _losses_grads(init, obs, structure, library, clamp, grad):
    pred, latent, tapes = latent_rollout(init, obs, structure, library, clamp, keep_tapes=grad)
    C = len(init)
    T, m, D = obs.shape
    err = pred - obs[None, 1:]
    norm = (T - 1) * m * D
    losses = np.einsum("ctnd,ctnd->c", err, err) / norm
    if not grad:
        return losses, None, latent
    g = np.zeros((C, m + 1, D))
    for t in range(T - 2, -1, -1):
        up = np.zeros((C, m + 1, D))
        up[:, :m] = (2.0 / norm) * err[:, t]
        if clamp:
            up[:, m] = g[:, m]
        else:
            up += g
        _, g = _backward(library, tapes[t], up)
    return losses, g[:, m], latent


def latent_losses(init_states, observed, structure: Structure, library: ModuleLibrary, clamp: bool = True,
                  grad: bool = True):
    """Loss (and gradient w.r.t. the latent initial state) for each candidate.

    Returns ``(losses (C,), grads (C, d) | None, diverged (C,) bool)``. A
    candidate whose rollout diverges gets :data:`SENTINEL_LOSS`, a zero
    gradient, and is flagged.
    """
    init, single, obs = _check(init_states, observed, structure, library)
    try:
        losses, grads, _ = _losses_grads(init, obs, structure, library, clamp, grad)
        diverged = np.zeros(len(init), bool)
    except ModelDiverged:
        losses = np.full(len(init), SENTINEL_LOSS)
        grads = np.zeros_like(init) if grad else None
        diverged = np.ones(len(init), bool)
        for c in range(len(init)):
            try:
                lc, gc, _ = _losses_grads(init[c: c + 1], obs, structure, library, clamp, grad)
            except ModelDiverged:
                continue
            losses[c] = lc[0]
            if grad:
                grads[c] = gc[0]
            diverged[c] = False
    bad = ~np.isfinite(losses)
    if bad.any():
        losses[bad] = SENTINEL_LOSS
        diverged |= bad
        if grad:
            grads[bad] = 0.0
    return losses, grads, diverged


def latent_loss(init_state, observed, structure: Structure, library: ModuleLibrary, clamp: bool = True):
    """Single-candidate form: ``(loss, grad, diverged)``."""
    l, g, d = latent_losses(np.asarray(init_state)[None], observed, structure, library, clamp)
    return float(l[0]), g[0], bool(d[0])


@dataclass
class LatentConfig:
    samples: int = 512
    top_k: int = 8
    gd_steps: int = 100
    lr: float = 1e-2
    rounds: int = 5
    seed: int = 0
    clamp: bool = True
    box: float = 5.0
    speed: float = 0.5

    def __post_init__(self):
        if self.samples < 1 or self.rounds < 1 or self.top_k < 0 or self.gd_steps < 0:
            raise ContractError("samples and rounds must be >= 1; top_k and gd_steps >= 0")


@dataclass
class LatentHypothesis:
    init_state: np.ndarray
    trajectory: np.ndarray  # (T, d) latent states from the model rollout
    loss: float
    round_best: list = field(default_factory=list)
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "format_version": 1,
            "best_init_state": self.init_state.tolist(),
            "loss": self.loss,
            "round_best_losses": list(self.round_best),
            "trajectory": self.trajectory.tolist(),
            "diverged": self.diverged,
        })

    def save(self, path) -> None:
        atomic_write(path, self.to_json() + "\n")


def sample_states(rng: np.random.Generator, count: int, box: float = 5.0, speed: float = 0.5) -> np.ndarray:
    """Uniform positions in the box, velocities of fixed speed in a uniform direction."""
    pos = rng.uniform(-box, box, size=(count, 2))
    ang = rng.uniform(0.0, 2 * np.pi, size=count)
    vel = speed * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return np.concatenate([pos, vel], axis=1)


def infer_latent(observed, structure: Structure, library: ModuleLibrary,
                 config: LatentConfig = LatentConfig()) -> LatentHypothesis:
    """Random sampling plus gradient refinement of the latent initial state.

    Every round draws fresh samples, refines the ``top_k`` best with Adam,
    and keeps the lowest loss seen anywhere (ties go to the earliest
    candidate).
    """
    obs = np.asarray(observed, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    best_state, best_loss = None, np.inf
    round_best = []
    for _ in range(config.rounds):
        cand = sample_states(rng, config.samples, config.box, config.speed)
        losses, _, _ = latent_losses(cand, obs, structure, library, config.clamp, grad=False)
        i = int(np.argmin(losses))
        if losses[i] < best_loss:
            best_state, best_loss = cand[i].copy(), float(losses[i])
        k = min(config.top_k, len(cand))
        if k and config.gd_steps:
            top = np.argsort(losses, kind="stable")[:k]
            x = cand[top].copy()
            adam = AdamState.zeros(x.size, lr=config.lr)
            for _ in range(config.gd_steps):
                lx, gx, dx = latent_losses(x, obs, structure, library, config.clamp)
                j = int(np.argmin(lx))
                if lx[j] < best_loss and not dx[j]:
                    best_state, best_loss = x[j].copy(), float(lx[j])
                if not np.all(np.isfinite(gx)):
                    break
                x = adam_step(adam, x.reshape(-1), gx.reshape(-1)).reshape(x.shape)
            lx, _, dx = latent_losses(x, obs, structure, library, config.clamp, grad=False)
            j = int(np.argmin(lx))
            if lx[j] < best_loss and not dx[j]:
                best_state, best_loss = x[j].copy(), float(lx[j])
        round_best.append(best_loss)
    _, latent, _ = latent_rollout(best_state[None], obs, structure, library, config.clamp)
    return LatentHypothesis(best_state, latent[0], best_loss, round_best, best_loss >= SENTINEL_LOSS)


def hide_node(states: np.ndarray, node: int):
    """Move ``node`` to the last position; returns ``(observed (T, n-1, d), hidden (T, d), order)``."""
    n = states.shape[1]
    order = [i for i in range(n) if i != node] + [node]
    s = states[:, order]
    return s[:, :-1], s[:, -1], order


def static_latent_mse(sample_state: np.ndarray, hidden: np.ndarray) -> float:
    """MSE of a latent held fixed at ``sample_state`` against the true hidden trajectory."""
    d = hidden - np.asarray(sample_state)[None]
    return float(np.mean(d * d))


def config_dict(config: LatentConfig) -> dict:
    return asdict(config)
