import numpy as np
import pytest

from app.core.exceptions import CustomError
from app.models.analysis import CircuitEnsemble
from app.models.experiment import DiscoveryConfig
from app.services.analysis_service import (
    binary_circuit_eval,
    circuit_union,
    core_edges,
    core_fraction,
    dataset_size_stability,
    edge_partition,
    ensemble_report,
    inclusion_frequency,
    jaccard,
    mean_pairwise_jaccard,
    similarity_matrix,
    stability_category,
    stability_categories,
)
from app.services.data_service import planted_circuit
from app.services.graph_service import build_graph_dims, mask_empty, mask_from_indices, mask_full


@pytest.fixture
def graph():
    return build_graph_dims(1, 1)


class TestJaccard:

    def test_examples(self, graph):
        a = mask_from_indices(graph, [0, 1, 2])
        b = mask_from_indices(graph, [1, 2, 3])
        assert jaccard(a, b) == pytest.approx(0.5)
        assert jaccard(a, a) == 1.0
        assert jaccard(mask_empty(graph), mask_empty(graph)) == 1.0
        assert jaccard(mask_from_indices(graph, [0]), mask_from_indices(graph, [1])) == 0.0

    def test_different_graphs(self, graph):
        with pytest.raises(CustomError):
            jaccard(mask_full(graph), mask_full(build_graph_dims(2, 2)))

    def test_mean_pairwise(self, graph):
        masks = [mask_from_indices(graph, [0, 1]), mask_from_indices(graph, [0, 1]), mask_from_indices(graph, [2])]
        mean, std = mean_pairwise_jaccard(masks)
        assert mean == pytest.approx(1 / 3)
        assert std > 0
        with pytest.raises(CustomError):
            mean_pairwise_jaccard(masks[:1])


class TestStability:

    @pytest.mark.parametrize("frequency,category", [
        (1.0, "stable"), (0.91, "stable"), (0.9, "borderline"), (0.5, "borderline"), (0.49, "unstable"),
    ])
    def test_categories(self, frequency, category):
        assert stability_category(frequency) == category

    def test_inclusion_frequency(self, graph):
        ensemble = CircuitEnsemble([mask_from_indices(graph, [0, 1]), mask_from_indices(graph, [0])])
        assert inclusion_frequency(ensemble) == {0: 1.0, 1: 0.5}
        everything = inclusion_frequency(ensemble, "all")
        assert len(everything) == len(graph)
        assert everything[5] == 0.0

    def test_single_circuit_has_no_frequency(self, graph):
        with pytest.raises(CustomError):
            inclusion_frequency(CircuitEnsemble([mask_full(graph)]))

    def test_ensemble_checks(self, graph):
        with pytest.raises(CustomError):
            CircuitEnsemble([])
        with pytest.raises(CustomError) as exc:
            CircuitEnsemble([mask_full(graph), mask_full(build_graph_dims(2, 2))])
        assert exc.value.error_key == "ARTIFACT_MISMATCH"

    def test_core_and_fractions(self, graph):
        ensemble = CircuitEnsemble([mask_from_indices(graph, [0, 1, 2]), mask_from_indices(graph, [0, 1, 3])])
        assert core_edges(ensemble).indices == (0, 1)
        assert core_fraction(ensemble) == {"union": 0.5, "all": pytest.approx(2 / 6)}

    def test_histogram_per_edge_type(self, graph):
        ensemble = CircuitEnsemble([mask_full(graph), mask_full(graph), mask_from_indices(graph, [0])])
        histogram = stability_categories(graph, inclusion_frequency(ensemble))
        assert histogram["input->attn_in"] == {"stable": 1, "borderline": 0, "unstable": 0}
        assert sum(histogram["attn->logits"].values()) == 1
        assert histogram["attn->logits"]["borderline"] == 1

    def test_report(self, graph):
        ensemble = CircuitEnsemble([mask_from_indices(graph, [0, 1]), mask_from_indices(graph, [0])])
        report = ensemble_report(graph, ensemble, "cls0")
        assert report.circuits == 2
        assert report.mean_pairwise_jaccard == pytest.approx(0.5)
        assert report.core_edges == [["input", "attn_in0"]]
        single = ensemble_report(graph, CircuitEnsemble([mask_full(graph)]))
        assert single.mean_pairwise_jaccard is None


class TestCrossClass:

    def test_similarity_matrix(self, graph):
        ensembles = {
            "a": CircuitEnsemble([mask_from_indices(graph, [0, 1]), mask_from_indices(graph, [0, 1])]),
            "b": CircuitEnsemble([mask_from_indices(graph, [1, 2])]),
        }
        rows, matrix = similarity_matrix(ensembles)
        assert [(r["class_a"], r["class_b"]) for r in rows] == [("a", "a"), ("a", "b"), ("b", "b")]
        assert matrix[0, 0] == 1.0
        assert matrix[0, 1] == matrix[1, 0] == pytest.approx(1 / 3)

    def test_edge_partition(self, graph):
        circuit = mask_from_indices(graph, [0, 1, 2, 3])
        a = mask_from_indices(graph, [0, 1])
        b = mask_from_indices(graph, [1, 2])
        assert edge_partition(circuit, a, b) == {"a_only": 1, "b_only": 1, "both": 1, "binary_only": 1}

    def test_binary_circuit_eval(self, planted_model, class_pairs):
        graph = planted_model.graph
        circuit = planted_circuit(graph)
        pairs = [p for p in class_pairs if p.label in (0, 1)]
        result = binary_circuit_eval(planted_model, circuit, 0, 1, pairs, [circuit], [circuit])
        assert result["accuracy"] >= 0.9
        assert result["partition"]["both"] == 2
        with pytest.raises(CustomError):
            binary_circuit_eval(planted_model, circuit, 0, 1, class_pairs, [circuit], [circuit])


def _random_masks(graph, rng, count):
    return [mask_from_indices(graph, np.flatnonzero(rng.random(len(graph)) < rng.random())) for _ in range(count)]


class TestAgainstSetArithmetic:

    def test_two_hundred_random_ensembles(self):
        graph = build_graph_dims(2, 2)
        rng = np.random.default_rng(0)
        for _ in range(200):
            masks = _random_masks(graph, rng, int(rng.integers(2, 7)))
            sets = [set(mask.indices) for mask in masks]

            a, b = sets[0], sets[1]
            expected = len(a & b) / len(a | b) if a | b else 1.0
            assert jaccard(masks[0], masks[1]) == pytest.approx(expected)
            assert set(circuit_union(masks[0], masks[1]).indices) == a | b

            ensemble = CircuitEnsemble(masks)
            assert set(core_edges(ensemble).indices) == set.intersection(*sets)
            counts = {e: sum(e in s for s in sets) for e in range(len(graph))}
            union = set.union(*sets)
            assert inclusion_frequency(ensemble) == pytest.approx({e: counts[e] / len(sets) for e in union})
            assert inclusion_frequency(ensemble, "all") == pytest.approx(
                {e: counts[e] / len(sets) for e in range(len(graph))})


@pytest.mark.slow
def test_dataset_size_stability_on_planted_model(planted_model, class_pairs):
    rows = dataset_size_stability(planted_model, class_pairs, [8, 32], runs=3,
                                  config=DiscoveryConfig(threshold=1e-3), seed=0)
    assert [r["size"] for r in rows] == [8, 32]
    assert rows[-1]["jaccard_mean"] == pytest.approx(1.0)
    assert rows[-1]["core_fraction_union"] == pytest.approx(1.0)


@pytest.mark.slow
def test_stability_does_not_decrease_with_dataset_size(planted_model, class_pairs):
    sizes = [8, 16, 32, 64]
    monotone = 0
    for seed in range(5):
        rows = dataset_size_stability(planted_model, class_pairs, sizes, runs=3,
                                      config=DiscoveryConfig(threshold=1e-3), seed=seed)
        means = [row["jaccard_mean"] for row in rows]
        monotone += all(later >= earlier - 1e-12 for earlier, later in zip(means, means[1:]))
    assert monotone >= 3
