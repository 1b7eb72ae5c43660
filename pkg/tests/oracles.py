"""Independent reference computations used by the tests.

These deliberately avoid the package's vectorised code paths: plain loops,
scalar arithmetic and finite differences.
"""
import math

import numpy as np


def mlp_scalar(widths, params, x, activation="tanh"):
    """Forward pass written with explicit loops over units."""
    off = 0
    h = [float(v) for v in x]
    n_layers = len(widths) - 1
    for li in range(n_layers):
        a, b = widths[li], widths[li + 1]
        W = [[params[off + i * b + j] for j in range(b)] for i in range(a)]
        off += a * b
        bias = [params[off + j] for j in range(b)]
        off += b
        z = [bias[j] + sum(h[i] * W[i][j] for i in range(a)) for j in range(b)]
        if li + 1 < n_layers:
            h = [math.tanh(v) if activation == "tanh" else max(v, 0.0) for v in z]
        else:
            h = z
    return np.array(h)


def gnn_step_scalar(edge_params, node_params, edge_widths, node_widths, edge_assign, states,
                    in_scale=None, out_scale=None):
    """Message passing written pair by pair: mu_ij then s_j + node(s_j, sum_i mu_ij)."""
    n, D = states.shape
    in_scale = np.ones(D) if in_scale is None else in_scale
    out_scale = np.ones(D) if out_scale is None else out_scale
    xs = states / in_scale
    slot = 0
    incoming = {j: [] for j in range(n)}
    for j in range(n):  # receiver-major slot order
        for i in range(n):
            if i == j:
                continue
            k = edge_assign[slot]
            mu = mlp_scalar(edge_widths, edge_params[k], list(xs[i]) + list(xs[j]))
            incoming[j].append(mu)
            slot += 1
    out = np.empty_like(states)
    for j in range(n):
        agg = np.sum(incoming[j], axis=0)
        delta = mlp_scalar(node_widths, node_params, list(xs[j]) + list(agg))
        out[j] = states[j] + delta * out_scale
    return out


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        a = f(x)
        flat[i] = old - h
        b = f(x)
        flat[i] = old
        gf[i] = (a - b) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
