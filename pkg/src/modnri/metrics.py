"""Evaluation metrics and report aggregation."""
from __future__ import annotations

import csv
import io
import itertools
import math
import warnings

import numpy as np

from .gnn import Structure, edge_slots
from .nn import ContractError
from .sim import RelationGraph

TASK_COLUMNS = ("task", "mse_1", "mse_10", "static_mse_1", "static_mse_10", "edge_accuracy",
                "proposals", "proposals_to_best", "search_loss")


def label_mappings(n_modules: int, n_labels: int):
    """All injective maps module -> label (or label -> module when there are more labels).

    Yields arrays ``m`` of length ``n_modules`` where ``m[h]`` is the label of
    module ``h``, or -1 when the module has no partner.
    """
    if n_modules <= n_labels:
        for perm in itertools.permutations(range(n_labels), n_modules):
            yield np.array(perm)
    else:
        for mods in itertools.permutations(range(n_modules), n_labels):
            m = np.full(n_modules, -1)
            m[list(mods)] = np.arange(n_labels)
            yield m


def edge_accuracy(pred: Structure, truth: RelationGraph, n_modules: int | None = None,
                  n_labels: int | None = None) -> float:
    """Fraction of ordered pairs whose module maps to the true relation.

    Module indices are unsupervised labels, so the best bijection between
    modules and relation labels is taken. With different counts the best
    injection is used and a warning is emitted.
    """
    n = truth.n_entities
    if pred.n != n:
        raise ContractError("prediction and truth disagree on the number of entities")
    s, r = edge_slots(n)
    target = truth.matrix()[s, r]
    H = n_modules if n_modules is not None else int(pred.edge_assign.max()) + 1
    K = n_labels if n_labels is not None else max(int(target.max()) + 1, 2)
    H = max(H, int(pred.edge_assign.max()) + 1)
    if H != K:
        warnings.warn(f"{H} modules vs {K} relation labels; accuracy over injections", RuntimeWarning)
    best = 0.0
    for m in label_mappings(H, K):
        best = max(best, float(np.mean(m[pred.edge_assign] == target)))
    return best


def kstep_mse(pred, truth, k: int) -> float:
    """MSE over all state components at step ``k`` after the last observed state.

    ``pred`` and ``truth`` hold future states with index 0 being step 1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape[1:] != truth.shape[1:]:
        raise ContractError("prediction and truth shapes differ")
    if k < 1 or len(pred) < k or len(truth) < k:
        raise ContractError(f"need at least {k} predicted and true steps")
    d = pred[k - 1] - truth[k - 1]
    return float(np.mean(d * d))


def static_prediction(last_state: np.ndarray, horizon: int) -> np.ndarray:
    """Static baseline: copy the last observed state forward."""
    return np.repeat(np.asarray(last_state, dtype=np.float64)[None], horizon, axis=0)


def aggregate(rows: list, columns=None) -> dict:
    """Column means of per-task rows (non-numeric columns are skipped)."""
    if not rows:
        raise ContractError("no rows to aggregate")
    columns = columns or [c for c, v in rows[0].items()
                          if c != "task" and isinstance(v, (int, float, np.integer, np.floating))]
    out = {}
    for c in columns:
        vals = [float(r[c]) for r in rows]
        out[c] = math.fsum(vals) / len(vals)
    out["n_tasks"] = len(rows)
    return out


def rows_to_csv(rows: list, columns=TASK_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
