import itertools
import math

import numpy as np
import pytest

from modnri.gnn import Structure, edge_slots
from modnri.metrics import aggregate, edge_accuracy, kstep_mse, read_rows, rows_to_csv, static_prediction
from modnri.nn import ContractError
from modnri.sim import RelationGraph


def _pred_from_truth(g: RelationGraph, mapping=(0, 1)) -> Structure:
    s, r = edge_slots(g.n_entities)
    return Structure(np.asarray(mapping)[g.matrix()[s, r]], np.zeros(g.n_entities, dtype=np.int64))


def _accuracy_by_hand(assign, truth: RelationGraph) -> float:
    """Loop over ordered pairs for both of the two possible label maps."""
    n = truth.n_entities
    m = truth.matrix()
    best = 0.0
    for mapping in ((0, 1), (1, 0)):
        hits, slot = 0, 0
        for j in range(n):
            for i in range(n):
                if i == j:
                    continue
                hits += mapping[assign[slot]] == m[i, j]
                slot += 1
        best = max(best, hits / (n * (n - 1)))
    return best


def test_identity_and_global_swap_are_perfect():
    g = RelationGraph(5, [1, 0, 0, 1, 1, 0, 1, 0, 0, 1])
    assert edge_accuracy(_pred_from_truth(g), g) == 1.0
    assert edge_accuracy(_pred_from_truth(g, (1, 0)), g) == 1.0


def test_matches_hand_loop():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = RelationGraph(4, rng.integers(0, 2, 6))
        st = Structure(rng.integers(0, 2, 12), np.zeros(4, dtype=np.int64))
        assert edge_accuracy(st, g, 2, 2) == _accuracy_by_hand(st.edge_assign, g)


def _exact_random_expectation(n):
    """Mean best-bijection accuracy of a uniform prediction: hits X ~ Bin(P, 1/2), score max(X, P-X)/P."""
    P = n * (n - 1)
    return sum(math.comb(P, x) * max(x, P - x) for x in range(P + 1)) / (2 ** P * P)


def test_random_expectation_by_enumeration_n3():
    # every prediction against every truth for n=3
    total, count = 0.0, 0
    for labels in itertools.product((0, 1), repeat=3):
        g = RelationGraph(3, labels)
        for assign in itertools.product((0, 1), repeat=6):
            total += edge_accuracy(Structure(np.array(assign), np.zeros(3, dtype=np.int64)), g, 2, 2)
            count += 1
    assert abs(total / count - _exact_random_expectation(3)) < 1e-12
    assert _exact_random_expectation(3) == pytest.approx(0.65625)


def test_random_predictions_n5_monte_carlo():
    rng = np.random.default_rng(1)
    accs = []
    for _ in range(1000):
        g = RelationGraph(5, rng.integers(0, 2, 10))
        accs.append(edge_accuracy(Structure(rng.integers(0, 2, 20), np.zeros(5, dtype=np.int64)), g, 2, 2))
    exact = _exact_random_expectation(5)  # 0.5881...
    se = np.std(accs) / np.sqrt(len(accs))
    assert abs(np.mean(accs) - exact) < 4 * se


def test_invariant_to_label_permutation():
    rng = np.random.default_rng(2)
    g = RelationGraph(5, rng.integers(0, 2, 10))
    st = Structure(rng.integers(0, 3, 20), np.zeros(5, dtype=np.int64))
    with pytest.warns(RuntimeWarning):
        base = edge_accuracy(st, g, 3, 2)
    for perm in itertools.permutations(range(3)):
        with pytest.warns(RuntimeWarning):
            assert edge_accuracy(Structure(np.array(perm)[st.edge_assign], st.node_assign), g, 3, 2) == base


def test_accuracy_contract():
    with pytest.raises(ContractError):
        edge_accuracy(Structure.uniform(4), RelationGraph(5, np.zeros(10, dtype=int)))


def test_kstep_mse_hand_case():
    # one particle drifting d per step along x, predicted static
    d = 0.3
    truth = np.zeros((10, 1, 4))
    truth[:, 0, 0] = d * np.arange(1, 11)
    pred = static_prediction(np.zeros((1, 4)), 10)
    for k in (1, 4, 10):
        assert kstep_mse(pred, truth, k) == pytest.approx(d * d * k * k / 4, rel=1e-14)
    assert kstep_mse(truth, truth, 10) == 0.0


def test_kstep_mse_contracts():
    a = np.zeros((5, 2, 4))
    with pytest.raises(ContractError):
        kstep_mse(a, a, 6)
    with pytest.raises(ContractError):
        kstep_mse(a, np.zeros((5, 3, 4)), 1)
    with pytest.raises(ContractError):
        kstep_mse(a, a, 0)


def test_aggregate_matches_recomputation(tmp_path):
    rng = np.random.default_rng(3)
    rows = [{"task": i, "mse_1": float(rng.lognormal(-10, 2)), "edge_accuracy": float(rng.uniform()),
             "proposals": 2000, "structure": Structure.uniform(2)}
            for i in range(37)]
    agg = aggregate(rows)
    assert set(agg) == {"mse_1", "edge_accuracy", "proposals", "n_tasks"}
    for c in ("mse_1", "edge_accuracy"):
        assert abs(agg[c] - np.mean([r[c] for r in rows])) <= 1e-12 * abs(agg[c])
    cols = ("task", "mse_1", "edge_accuracy")
    p = tmp_path / "m.csv"
    p.write_text(rows_to_csv(rows, cols))
    back = read_rows(p)
    assert [float(r["mse_1"]) for r in back] == [r["mse_1"] for r in rows]
    assert aggregate(back, ["mse_1"])["mse_1"] == agg["mse_1"]
    with pytest.raises(ContractError):
        aggregate([])
