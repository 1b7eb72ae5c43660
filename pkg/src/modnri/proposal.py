"""Learned proposal function for structure search.

An encoder maps a task's observed trajectory to an independent categorical
distribution over edge modules for every directed edge slot. The layout
follows the usual relational-inference encoder: per-node trajectory
embedding, one node -> edge -> node round, and an edge classifier fed with
both endpoint embeddings plus the first-round edge feature as a skip.

Proposals resample all incoming edges of one random node from that
distribution (a blocked Gibbs move).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gnn import Structure, _topology, incoming_slots
from .nn import AdamState, ContractError, MlpSpec, adam_step, backward, mlp_forward

_PARTS = ("embed", "edge", "node", "out")


@dataclass
class ProposalParams:
    specs: dict  # part name -> MlpSpec
    values: np.ndarray
    horizon: int
    state_dim: int

    @classmethod
    def create(cls, rng: np.random.Generator, horizon: int = 50, state_dim: int = 4, n_edge: int = 2,
               hidden: int = 64) -> "ProposalParams":
        specs = {
            "embed": MlpSpec((horizon * state_dim, hidden, hidden)),
            "edge": MlpSpec((2 * hidden, hidden, hidden)),
            "node": MlpSpec((hidden, hidden, hidden)),
            "out": MlpSpec((3 * hidden, hidden, n_edge)),
        }
        values = np.concatenate([specs[k].init(rng) for k in _PARTS])
        return cls(specs, values, horizon, state_dim)

    @property
    def n_edge(self) -> int:
        return self.specs["out"].n_out

    def part(self, name: str, values: np.ndarray | None = None) -> np.ndarray:
        values = self.values if values is None else values
        off = 0
        for k in _PARTS:
            size = self.specs[k].n_params
            if k == name:
                return values[off: off + size]
            off += size
        raise KeyError(name)

    def copy(self) -> "ProposalParams":
        return ProposalParams(dict(self.specs), self.values.copy(), self.horizon, self.state_dim)

    def zeros_like(self) -> "ProposalParams":
        return ProposalParams(dict(self.specs), np.zeros_like(self.values), self.horizon, self.state_dim)


def _node_features(states: np.ndarray, params: ProposalParams) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 3:
        states = states[None]
    if states.ndim != 4 or states.shape[1] != params.horizon or states.shape[3] != params.state_dim:
        raise ContractError(
            f"encoder expects (batch, {params.horizon}, n, {params.state_dim}) trajectories, got {states.shape}")
    B, L, n, D = states.shape
    return states.transpose(0, 2, 1, 3).reshape(B, n, L * D)


def _encode(states, params: ProposalParams):
    x = _node_features(states, params)
    B, n, _ = x.shape
    top = _topology(n)
    h1, t_embed = mlp_forward(params.specs["embed"], params.part("embed"), x)
    e_in = np.concatenate([h1[:, top.senders], h1[:, top.receivers]], axis=-1)
    e1, t_edge = mlp_forward(params.specs["edge"], params.part("edge"), e_in)
    agg = e1.reshape(B, n, n - 1, -1).mean(axis=2)
    h2, t_node = mlp_forward(params.specs["node"], params.part("node"), agg)
    o_in = np.concatenate([h2[:, top.senders], h2[:, top.receivers], e1], axis=-1)
    logits, t_out = mlp_forward(params.specs["out"], params.part("out"), o_in)
    return logits, (t_embed, t_edge, t_node, t_out, n)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def encode_logits(states, params: ProposalParams) -> np.ndarray:
    return _encode(states, params)[0]


def encode(states, params: ProposalParams) -> np.ndarray:
    """Per-edge module probabilities.

    ``states`` is one ``(L, n, d)`` trajectory or a ``(batch, L, n, d)`` stack;
    the result is ``(E, K)`` or ``(batch, E, K)`` in edge-slot order.
    """
    single = np.ndim(states) == 3
    p = softmax(_encode(states, params)[0])
    return p[0] if single else p


def _encode_backward(params: ProposalParams, tapes, d_logits: np.ndarray) -> np.ndarray:
    t_embed, t_edge, t_node, t_out, n = tapes
    top = _topology(n)
    H = params.specs["node"].n_out
    grad = np.zeros_like(params.values)
    g_out, d_oin = backward(t_out, d_logits)
    params.part("out", grad)[...] = g_out
    B, E, _ = d_oin.shape
    d_h2 = _scatter(d_oin[..., :H], d_oin[..., H:2 * H], top, B, n)
    d_e1 = d_oin[..., 2 * H:].copy()
    g_node, d_agg = backward(t_node, d_h2)
    params.part("node", grad)[...] = g_node
    d_e1 += np.repeat(d_agg / (n - 1), n - 1, axis=1)
    g_edge, d_ein = backward(t_edge, d_e1)
    params.part("edge", grad)[...] = g_edge
    d_h1 = _scatter(d_ein[..., :H], d_ein[..., H:], top, B, n)
    g_embed, _ = backward(t_embed, d_h1, need_input=False)
    params.part("embed", grad)[...] = g_embed
    return grad


def _scatter(d_send, d_recv, top, B, n):
    H = d_send.shape[-1]
    out = d_recv.reshape(B, n, n - 1, H).sum(axis=2)
    ds = np.ascontiguousarray(d_send.transpose(0, 2, 1)).reshape(B * H, -1)
    out += (ds @ top.send_onehot).reshape(B, H, n).transpose(0, 2, 1)
    return out


def cross_entropy(states, targets: np.ndarray, params: ProposalParams, grad: bool = False):
    """Mean per-edge cross-entropy of ``targets`` (``(batch, E)`` module ids)."""
    logits, tapes = _encode(states, params)
    targets = np.asarray(targets, dtype=np.int64).reshape(logits.shape[:2])
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    B, E, K = logits.shape
    ce = -np.take_along_axis(logp, targets[..., None], axis=-1).mean()
    if not grad:
        return float(ce), None
    d = np.exp(logp)
    d[np.arange(B)[:, None], np.arange(E)[None, :], targets] -= 1.0
    d /= B * E
    return float(ce), _encode_backward(params, tapes, d)


def train_proposal_step(states, targets, params: ProposalParams, adam: AdamState) -> float:
    """One Adam step on the mean cross-entropy. Returns the loss before the step.

    Updates ``params.values`` in place; a non-finite loss or gradient skips the step.
    """
    if len(targets) == 0:
        raise ContractError("empty batch")
    loss, g = cross_entropy(states, targets, params, grad=True)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        return float("nan")
    params.values = adam_step(adam, params.values, g)
    return loss


# ---------------------------------------------------------------------------
# proposals


def random_proposal(structure: Structure, n_edge: int, rng: np.random.Generator,
                    node_prob: float = 0.0, n_node: int = 1) -> Structure:
    """Reassign one uniformly chosen slot to a different module.

    With probability ``node_prob`` (and at least two node modules) a node
    slot is changed instead of an edge slot.
    """
    out = structure.copy()
    if node_prob > 0 and n_node >= 2 and rng.random() < node_prob:
        i = rng.integers(structure.n)
        out.node_assign[i] = (out.node_assign[i] + rng.integers(1, n_node)) % n_node
        return out
    if n_edge < 2:
        raise ContractError("random proposals need at least two edge modules")
    e = rng.integers(len(out.edge_assign))
    out.edge_assign[e] = (out.edge_assign[e] + rng.integers(1, n_edge)) % n_edge
    return out


def blocked_gibbs_proposal(structure: Structure, probs: np.ndarray, rng: np.random.Generator) -> Structure:
    """Resample every incoming edge of one uniformly chosen node from ``probs``."""
    n = structure.n
    if probs.shape[0] != len(structure.edge_assign):
        raise ContractError("distribution does not cover all edge slots")
    out = structure.copy()
    j = rng.integers(n)
    sl = incoming_slots(n, j)
    cdf = np.cumsum(probs[sl], axis=1)
    u = rng.random(n - 1)
    out.edge_assign[sl] = np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)
    return out


class Proposer:
    """Callable ``proposer(structure, rng, probs)``; ``probs`` is the task's edge distribution."""

    needs_probs = False

    def __call__(self, structure: Structure, rng: np.random.Generator, probs=None) -> Structure:
        raise NotImplementedError


class RandomProposer(Proposer):
    def __init__(self, n_edge: int, node_prob: float = 0.0, n_node: int = 1):
        self.n_edge, self.node_prob, self.n_node = n_edge, node_prob, n_node

    def __call__(self, structure, rng, probs=None):
        return random_proposal(structure, self.n_edge, rng, self.node_prob, self.n_node)


class GibbsProposer(Proposer):
    needs_probs = True

    def __call__(self, structure, rng, probs=None):
        return blocked_gibbs_proposal(structure, probs, rng)


class MixedProposer(Proposer):
    def __init__(self, random_rate: float, n_edge: int, node_prob: float = 0.0, n_node: int = 1):
        if not 0.0 <= random_rate <= 1.0:
            raise ContractError("random_rate must lie in [0, 1]")
        self.random_rate = random_rate
        self.random = RandomProposer(n_edge, node_prob, n_node)
        self.needs_probs = random_rate < 1.0
        self.calls = [0, 0]  # (random, gibbs) delegations

    def __call__(self, structure, rng, probs=None):
        # rates 0 and 1 draw nothing extra so they match the pure proposers exactly
        if self.random_rate >= 1.0:
            use_random = True
        elif self.random_rate <= 0.0:
            use_random = False
        else:
            use_random = rng.random() < self.random_rate
        self.calls[0 if use_random else 1] += 1
        if use_random:
            return self.random(structure, rng)
        return blocked_gibbs_proposal(structure, probs, rng)


def mixed_proposer(random_rate: float, n_edge: int = 2, node_prob: float = 0.0, n_node: int = 1) -> MixedProposer:
    return MixedProposer(random_rate, n_edge, node_prob, n_node)


def make_proposer(mode: str, n_edge: int, random_rate: float = 0.1, node_prob: float = 0.0,
                  n_node: int = 1) -> Proposer:
    if mode == "random":
        return RandomProposer(n_edge, node_prob, n_node)
    if mode == "learned":
        return GibbsProposer()
    if mode == "mixed":
        return MixedProposer(random_rate, n_edge, node_prob, n_node)
    raise ContractError(f"unknown proposal mode {mode!r}")
