import numpy as np
import pytest
import torch

from app.core.exceptions import CustomError
from app.models.data import attack_targets, split_by_label, stack_pairs
from app.models.experiment import SyntheticTaskSpec
from app.models.graph import INPUT, LOGITS, Edge, NodeId
from app.services.data_service import (
    border_patches,
    build_planted_model,
    certify_class_signal,
    class_patterns,
    filter_correct,
    generate_class_pairs,
    generate_suite,
    generate_typographic_pairs,
    planted_circuit,
    planted_config,
    text_direction,
)
from app.services.patching_service import accuracy, cache_pairs
from app.services.runtime_service import load_model, random_weights

from .conftest import make_config, random_pairs


class TestPatterns:

    def test_patterns_are_orthogonal_with_amplitude(self, task_spec):
        patterns = class_patterns(task_spec)
        gram = patterns @ patterns.T
        assert np.allclose(gram, task_spec.pattern_amplitude ** 2 * np.eye(4), atol=1e-9)
        assert np.allclose(patterns[:, task_spec.object_dims:], 0.0)

    def test_text_direction_lives_in_text_dims(self, task_spec):
        direction = text_direction(task_spec)
        assert np.linalg.norm(direction) == pytest.approx(1.0)
        assert np.allclose(direction[: task_spec.object_dims], 0.0)

    def test_no_text_channel(self):
        spec = SyntheticTaskSpec(num_classes=2, input_dim=4, object_dims=4)
        with pytest.raises(CustomError):
            text_direction(spec)

    def test_explicit_patterns_must_be_distinct(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(num_classes=2, input_dim=2, object_dims=2, class_patterns=[[1, 0], [1, 0]])

    def test_border(self):
        assert border_patches(3) == [1, 2, 3, 4, 6, 7, 8, 9]


class TestClassPairs:

    def test_deterministic(self, task_spec):
        a, b = generate_class_pairs(task_spec, 2, 4), generate_class_pairs(task_spec, 2, 4)
        assert all(torch.equal(x.clean, y.clean) and torch.equal(x.corrupted, y.corrupted) for x, y in zip(a, b))
        assert [p.id for p in a] == ["c2-00000", "c2-00001", "c2-00002", "c2-00003"]

    def test_pairs_differ_only_on_foreground(self, task_spec):
        for pair in generate_class_pairs(task_spec, 1, 8):
            background = ~pair.foreground
            assert torch.equal(pair.clean[background], pair.corrupted[background])
            assert torch.all(pair.clean[0] == 0)
            assert pair.foreground.sum() == 4

    def test_bad_class(self, task_spec):
        with pytest.raises(CustomError):
            generate_class_pairs(task_spec, 7, 2)

    def test_linear_readout_certifies_class_signal(self, task_spec):
        pairs = generate_suite(task_spec, range(4), 64)
        report = certify_class_signal(pairs, seed=0)
        assert report.clean_accuracy >= 0.95
        assert report.certified

    def test_helpers(self, class_pairs):
        clean, corrupted, labels = stack_pairs(class_pairs)
        assert clean.shape == corrupted.shape == (64, 17, 8)
        assert sorted(split_by_label(class_pairs)) == [0, 1, 2, 3]
        assert set(attack_targets(class_pairs).tolist()) == {-1}


class TestTypographicPairs:

    def test_overlay_is_added_in_text_dims_on_border(self, task_spec):
        pairs = generate_typographic_pairs(task_spec, 1, 6, attack_target=0)
        border = border_patches(task_spec.grid_size)
        for pair in pairs:
            diff = (pair.clean - pair.corrupted).double()
            assert torch.allclose(diff[:, : task_spec.object_dims], torch.zeros(17, 4, dtype=torch.float64))
            touched = set(torch.nonzero(diff.abs().sum(-1) > 1e-6).flatten().tolist())
            assert touched <= set(border)
            assert touched
            assert pair.attack_target == 0
            assert pair.id.startswith("t1-")

    def test_original_is_the_class_image(self, task_spec):
        base = generate_class_pairs(task_spec, 3, 2)
        attacked = generate_typographic_pairs(task_spec, 3, 2, attack_target=0)
        assert torch.equal(attacked[0].corrupted, base[0].clean)

    @pytest.mark.parametrize("placement", ["scattered", "block"])
    def test_other_placements(self, task_spec, placement):
        pairs = generate_typographic_pairs(task_spec, 2, 3, attack_target=1, placement=placement)
        assert len(pairs) == 3

    def test_zero_amplitude_is_identity(self, task_spec):
        pairs = generate_typographic_pairs(task_spec, 2, 3, attack_target=1, amplitude=0.0)
        assert all(torch.equal(p.clean, p.corrupted) for p in pairs)

    def test_bad_target(self, task_spec):
        with pytest.raises(CustomError):
            generate_typographic_pairs(task_spec, 2, 3, attack_target=9)


class TestPlantedModel:

    def test_classifies_clean_and_not_corrupted(self, planted_model, class_pairs):
        cache = cache_pairs(planted_model, class_pairs)
        assert accuracy(cache.clean_logits, cache.labels) >= 0.9
        assert accuracy(cache.corrupted_logits, cache.labels) <= 0.6

    def test_filter_correct(self, planted_model, class_pairs):
        kept = filter_correct(planted_model, class_pairs)
        cache = cache_pairs(planted_model, kept)
        assert accuracy(cache.clean_logits, cache.labels) == 1.0
        assert filter_correct(planted_model, []) == []

    @pytest.mark.parametrize("seed", range(3))
    def test_filter_keeps_chance_fraction_for_unrelated_logits(self, seed):
        config = make_config()
        model = load_model(random_weights(config, seed=seed))
        pairs = random_pairs(config, 600, seed=seed)
        kept = filter_correct(model, pairs)
        assert len(kept) / len(pairs) == pytest.approx(1 / config.num_classes, abs=0.08)

    def test_attack_head_flips_predictions(self, task_spec, attack_model):
        pairs = generate_suite(task_spec, [1, 2, 3], 8, "typographic", attack_target=0)
        clean, corrupted, _ = stack_pairs(pairs)
        with torch.no_grad():
            attacked_predictions = attack_model.execute(attack_model.embed(clean)).logits.argmax(-1)
        assert float((attacked_predictions == 0).double().mean()) >= 0.9

    def test_planted_circuit_edges(self, planted_model):
        graph = planted_model.graph
        mask = planted_circuit(graph, (0, 0), (0, 1))
        assert set(mask.edges(graph)) == {
            Edge(INPUT, NodeId("attn_in", 0)),
            Edge(NodeId("attn_head", 0, 0), LOGITS),
            Edge(NodeId("attn_head", 0, 1), LOGITS),
        }

    def test_config_checks(self, task_spec):
        config = planted_config(task_spec).model_copy(update={"normalization": "layernorm"})
        with pytest.raises(CustomError) as exc:
            build_planted_model(task_spec, config)
        assert exc.value.error_key == "CONFIG_ERROR"
        with pytest.raises(CustomError):
            build_planted_model(task_spec, signal_head=(0, 0), attack_head=(0, 0))
        with pytest.raises(CustomError):
            build_planted_model(task_spec, signal_head=(3, 0))
