import pytest

from app.core.exceptions import CustomError
from app.models.graph import INPUT, LOGITS, CircuitMask, Edge, Graph, NodeId
from app.services.graph_service import (
    build_graph,
    build_graph_dims,
    edge_count,
    edges_by_type,
    mask_empty,
    mask_from_edges,
    mask_full,
    mask_random,
    unreduced_edge_count,
)


class TestGraphConstruction:

    @pytest.mark.parametrize("layers,heads,expected", [(2, 2, 21), (1, 1, 6), (1, 4, 12)])
    def test_edge_count_examples(self, layers, heads, expected):
        assert len(build_graph_dims(layers, heads)) == expected
        assert edge_count(layers, heads) == expected

    @pytest.mark.parametrize("layers", [1, 2, 3, 6])
    @pytest.mark.parametrize("heads", [1, 2, 5, 12])
    def test_closed_form_matches_enumeration(self, layers, heads):
        assert len(build_graph_dims(layers, heads)) == edge_count(layers, heads)

    def test_reduction_is_roughly_head_count(self):
        reduced, unreduced = edge_count(12, 12), unreduced_edge_count(12, 12)
        assert unreduced > reduced
        assert 3 < unreduced / reduced < 12

    def test_same_layer_heads_do_not_feed_attention_input(self):
        graph = build_graph_dims(2, 2)
        for edge in graph.edges:
            if edge.receiver.kind == "attn_in":
                assert edge.sender.kind == "input" or edge.sender.layer < edge.receiver.layer
        assert Edge(NodeId("attn_head", 0, 1), NodeId("mlp", 0)) in set(graph.edges)

    def test_fingerprint_is_stable_and_dimension_sensitive(self, tiny_config):
        assert build_graph(tiny_config).fingerprint == build_graph_dims(2, 2).fingerprint
        assert build_graph_dims(2, 2).fingerprint != build_graph_dims(2, 3).fingerprint

    def test_edges_are_grouped_by_receiver_in_topological_order(self):
        graph = build_graph_dims(2, 2)
        receivers = [edge.receiver for edge in graph.edges]
        order = [graph.receivers.index(r) for r in receivers]
        assert order == sorted(order)
        assert graph.edges[-1].receiver == LOGITS
        assert graph.edges[0].sender == INPUT

    def test_edge_count_rejects_empty_model(self):
        with pytest.raises(CustomError) as exc:
            edge_count(0, 2)
        assert exc.value.error_key == "ARGUMENT_ERROR"


class TestNodeNames:

    @pytest.mark.parametrize("name", ["input", "logits", "a3.h11", "attn_in2", "mlp0"])
    def test_parse_round_trip(self, name):
        assert NodeId.parse(name).name == name

    def test_unknown_name_is_format_error(self):
        with pytest.raises(CustomError) as exc:
            NodeId.parse("head7")
        assert exc.value.error_key == "FORMAT_ERROR"

    def test_edge_types(self):
        graph = build_graph_dims(2, 2)
        counts = edges_by_type(graph)
        assert sum(counts.values()) == len(graph)
        assert counts["attn->logits"] == 4
        assert counts["input->attn_in"] == 2


class TestMasks:

    def test_full_and_empty(self):
        graph = build_graph_dims(1, 2)
        assert mask_full(graph).size == len(graph)
        assert mask_empty(graph).size == 0

    def test_mask_from_unknown_edge(self):
        graph = build_graph_dims(1, 1)
        with pytest.raises(CustomError):
            mask_from_edges(graph, [Edge(NodeId("mlp", 0), NodeId("attn_in", 0))])

    def test_random_mask_has_exact_size_and_is_seeded(self):
        graph = build_graph_dims(2, 2)
        a = mask_random(graph, 7, seed=3)
        assert a.size == 7
        assert a == mask_random(graph, 7, seed=3)

    def test_random_mask_avoids_excluded_edges(self):
        graph = build_graph_dims(2, 2)
        circuit = mask_random(graph, 5, seed=0)
        control = mask_random(graph, 5, seed=1, exclude=circuit)
        assert not set(control.indices) & set(circuit.indices)

    def test_random_mask_too_large(self):
        graph = build_graph_dims(1, 1)
        with pytest.raises(CustomError) as exc:
            mask_random(graph, 5, seed=0, exclude=mask_random(graph, 2, seed=0))
        assert exc.value.error_key == "ARGUMENT_ERROR"

    def test_mask_from_other_graph_is_rejected(self):
        small, large = build_graph_dims(1, 1), build_graph_dims(2, 2)
        with pytest.raises(CustomError):
            edges_by_type(large, mask_full(small))

    def test_model_layer_builders_match_service(self):
        graph = Graph.build(2, 2)
        assert graph.fingerprint == build_graph_dims(2, 2).fingerprint
        edges = [graph.edges[0], graph.edges[5]]
        assert CircuitMask.from_edges(graph, edges) == mask_from_edges(graph, edges)
        assert CircuitMask.from_edges(graph, edges).indices == (0, 5)
