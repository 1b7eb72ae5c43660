"""Small multi-layer perceptrons with hand-written reverse mode and Adam.

Parameters live in one flat float64 vector per network. The layout is, for
every layer in order, the weight matrix ``W`` of shape ``(fan_in, fan_out)``
in row-major order followed by the bias ``b`` of length ``fan_out``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """A call violated a shape or usage precondition."""


class NonFiniteGradient(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite gradient at index {index}")
        self.index = index


ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ContractError(f"invalid layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def unpack(self, params: np.ndarray) -> list:
        """Return ``[(W, b), ...]`` as views into ``params``."""
        if params.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} params, got {params.shape}")
        out, off = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = params[off: off + a * b].reshape(a, b)
            off += a * b
            out.append((W, params[off: off + b]))
            off += b
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        p = np.zeros(self.n_params)
        for W, _ in self.unpack(p):
            lim = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-lim, lim, size=W.shape)
        return p

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), d.get("activation", "tanh"))


@dataclass
class Tape:
    """Primal values of one forward pass; consumed by a single :func:`backward`."""

    spec: MlpSpec
    params: np.ndarray
    hidden: list  # layer inputs, hidden[0] is the network input (2-D)
    lead_shape: tuple
    used: bool = field(default=False)


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Evaluate the network on ``x`` of shape ``(..., n_in)``.

    Returns ``(output, tape)`` where output has shape ``(..., n_out)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (spec.n_in,):
        raise ContractError(f"input last dim {x.shape[-1:]} != {spec.n_in}")
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.n_in)
    hidden = [h]
    layers = spec.unpack(params)
    for li, (W, b) in enumerate(layers):
        z = h @ W
        z += b
        if li + 1 < len(layers):
            h = np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)
            hidden.append(h)
        else:
            h = z
    return h.reshape(lead + (spec.n_out,)), Tape(spec, params, hidden, lead)


def backward(tape: Tape, upstream: np.ndarray, need_input: bool = True):
    """Reverse pass. Returns ``(grad_params, grad_input)``.

    ``grad_input`` is ``None`` when ``need_input`` is false.
    """
    if tape.used:
        raise ContractError("tape already consumed")
    tape.used = True
    spec = tape.spec
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != tape.lead_shape + (spec.n_out,):
        raise ContractError(f"upstream shape {g.shape} != {tape.lead_shape + (spec.n_out,)}")
    g = g.reshape(-1, spec.n_out)
    grad = np.empty(spec.n_params)
    layers = spec.unpack(tape.params)
    glayers = spec.unpack(grad)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        gW, gb = glayers[li]
        h_in = tape.hidden[li]
        np.matmul(h_in.T, g, out=gW)
        np.sum(g, axis=0, out=gb)
        if li == 0 and not need_input:
            g = None
            break
        g = g @ W.T
        if li > 0:
            if spec.activation == "tanh":
                g *= 1.0 - h_in * h_in
            else:
                g *= h_in > 0
    tape.hidden = []
    if g is None:
        return grad, None
    return grad, g.reshape(tape.lead_shape + (spec.n_in,))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``state``; returns new params."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractError("params, grads and Adam moments must share a shape")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise NonFiniteGradient(int(np.flatnonzero(bad)[0]))
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
