import numpy as np
import pytest
import torch

from app.core.exceptions import CustomError
from app.models.data import PairedExample, attack_targets, stack_pairs
from app.models.experiment import SteeringPolicy, SteeringRegime, SyntheticTaskSpec
from app.models.graph import INPUT, NodeId
from app.models.steering import SteeringDirections
from app.services.data_service import build_planted_model, generate_suite, planted_circuit
from app.services.graph_service import mask_empty, mask_full, mask_random
from app.services.runtime_service import load_model, random_weights
from app.services.steering_service import (
    _medoid,
    apply_ablation,
    attack_metrics,
    base_attack_metrics,
    circuit_senders,
    classification_metrics,
    compute_directions,
    retrieval_metrics,
    select_alpha,
    steered_embeddings,
    steered_forward,
)

from .conftest import make_config


class TestAblation:

    def test_alpha_zero_is_identity(self):
        h = torch.randn(3, 4, dtype=torch.float64)
        assert apply_ablation(h, torch.randn(3, 4, dtype=torch.float64), 0.0) is h

    def test_removes_positive_component(self):
        h = torch.tensor([[2.0, 1.0]], dtype=torch.float64)
        v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        out = apply_ablation(h, v, 1.0, epsilon=0.0)
        assert torch.allclose(out, torch.tensor([[0.0, 1.0]], dtype=torch.float64))

    def test_negative_projection_is_untouched(self):
        h = torch.tensor([[-2.0, 1.0]], dtype=torch.float64)
        v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert torch.equal(apply_ablation(h, v, 3.0), h)

    def test_zero_direction_is_a_no_op(self):
        h = torch.randn(2, 3, dtype=torch.float64)
        assert torch.allclose(apply_ablation(h, torch.zeros(2, 3, dtype=torch.float64), 1.0), h)

    def test_shape_mismatch(self):
        with pytest.raises(CustomError):
            apply_ablation(torch.zeros(2, 3), torch.zeros(3, 3), 1.0)


def _pairs(attacked, original):
    return [
        PairedExample(id=f"p{i}", clean=a, corrupted=o, label=0, foreground=torch.zeros(a.shape[0], dtype=torch.bool))
        for i, (a, o) in enumerate(zip(attacked, original))
    ]


class TestDirections:

    @pytest.fixture
    def identity_model(self):
        config = make_config(layers=1, heads_per_layer=1, model_dim=4, head_dim=2, mlp_hidden_dim=2,
                             patch_count=2, input_dim=4, normalization="none", final_norm=False)
        weights = random_weights(config, seed=0)
        tensors = {name: torch.zeros_like(t) for name, t in weights.tensors.items()}
        tensors["embed.W"] = torch.eye(4)
        return load_model(type(weights)(config, tensors).validate())

    def test_pre_normed_mean(self, identity_model):
        attacked = [torch.tensor([[0.0, 0, 0, 0], [3.0, 0, 0, 0]]), torch.tensor([[0.0, 0, 0, 0], [0.0, 2, 0, 0]])]
        original = [torch.tensor([[0.0, 0, 0, 0], [0.0, 5, 0, 0]]), torch.tensor([[0.0, 0, 0, 0], [0.0, 1, 0, 0]])]
        directions = compute_directions(identity_model, _pairs(attacked, original), [INPUT])
        v = directions[INPUT]
        # 첫 번째 pair: e0 - e1, 두 번째: e1 - e1 = 0 -> 평균 (e0 - e1) / 2
        assert torch.allclose(v[1], torch.tensor([0.5, -0.5, 0, 0], dtype=torch.float64))
        # class token 행은 모두 0이라 무효 -> 0 방향
        assert torch.allclose(v[0], torch.zeros(4, dtype=torch.float64))
        assert directions.skipped_rows == {"input": 2}

    def test_post_normed(self, identity_model):
        attacked = [torch.tensor([[0.0, 0, 0, 0], [3.0, 0, 0, 0]])]
        original = [torch.tensor([[0.0, 0, 0, 0], [1.0, 0, 0, 0]])]
        regime = SteeringRegime.parse("post_normed:mean")
        v = compute_directions(identity_model, _pairs(attacked, original), [INPUT], regime)[INPUT]
        assert torch.allclose(v[1], torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))

    def test_medoid_picks_most_central_sample(self, identity_model):
        rows = [[1.0, 0, 0, 0], [0.9, 0.1, 0, 0], [0.0, 1, 0, 0]]
        attacked = [torch.tensor([[0.0, 0, 0, 0], r]) for r in rows]
        original = [torch.zeros(2, 4) for _ in rows]
        regime = SteeringRegime.parse("post_normed:medoid")
        v = compute_directions(identity_model, _pairs(attacked, original), [INPUT], regime)[INPUT]
        expected = torch.tensor([0.9, 0.1, 0, 0], dtype=torch.float64)
        assert torch.allclose(v[1], expected / expected.norm())

    def test_only_first_batches_are_used(self, identity_model):
        attacked = [torch.randn(2, 4) for _ in range(10)]
        original = [torch.randn(2, 4) for _ in range(10)]
        directions = compute_directions(identity_model, _pairs(attacked, original), [INPUT], batches=2, batch_size=3)
        assert directions.n_pairs == 6

    def test_regime_string(self):
        assert str(SteeringRegime()) == "pre_normed:mean"
        assert str(SteeringRegime.parse("post_normed:medoid")) == "post_normed:medoid"


class TestSteeredForward:

    def test_alpha_zero_reproduces_base(self, tiny_model, tiny_pairs):
        graph = tiny_model.graph
        directions = compute_directions(tiny_model, tiny_pairs, graph.senders)
        tokens, _, _ = stack_pairs(tiny_pairs)
        policy = SteeringPolicy(circuit=mask_full(graph), alpha=0.0)
        with torch.no_grad():
            base = tiny_model.execute(tiny_model.embed(tokens)).logits
        assert torch.allclose(steered_forward(tiny_model, tokens, directions, policy), base, atol=1e-12)

    def test_empty_circuit_is_a_no_op(self, tiny_model, tiny_pairs):
        directions = compute_directions(tiny_model, tiny_pairs, [INPUT])
        tokens, _, _ = stack_pairs(tiny_pairs)
        policy = SteeringPolicy(circuit=mask_empty(tiny_model.graph), alpha=2.0)
        with torch.no_grad():
            base = tiny_model.execute(tiny_model.embed(tokens)).logits
        assert torch.allclose(steered_forward(tiny_model, tokens, directions, policy), base, atol=1e-12)

    def test_layer_cutoff_below_every_receiver_is_a_no_op(self, tiny_model, tiny_pairs):
        graph = tiny_model.graph
        directions = compute_directions(tiny_model, tiny_pairs, graph.senders)
        tokens, _, _ = stack_pairs(tiny_pairs)
        policy = SteeringPolicy(circuit=mask_full(graph), alpha=1.0, max_receiver_layer=-1)
        with torch.no_grad():
            base = tiny_model.execute(tiny_model.embed(tokens)).logits
        assert torch.allclose(steered_forward(tiny_model, tokens, directions, policy), base, atol=1e-12)

    def test_missing_direction(self, tiny_model, tiny_pairs):
        directions = compute_directions(tiny_model, tiny_pairs, [INPUT])
        policy = SteeringPolicy(circuit=mask_full(tiny_model.graph), alpha=1.0)
        with pytest.raises(CustomError) as exc:
            steered_forward(tiny_model, tiny_pairs[0].clean, directions, policy)
        assert exc.value.error_key == "ARGUMENT_ERROR"

    def test_embeddings_need_contrastive_head(self, tiny_model, tiny_pairs):
        directions = compute_directions(tiny_model, tiny_pairs, [INPUT])
        policy = SteeringPolicy(circuit=mask_empty(tiny_model.graph))
        with pytest.raises(CustomError) as exc:
            steered_embeddings(tiny_model, tiny_pairs[0].clean.unsqueeze(0), directions, policy)
        assert exc.value.error_key == "CONFIG_ERROR"

    def test_circuit_senders_are_canonical(self, tiny_model):
        graph = tiny_model.graph
        senders = circuit_senders(graph, mask_full(graph))
        assert senders == list(graph.senders)


class TestAttackSuite:

    @pytest.fixture
    def suite(self, task_spec, attack_model):
        attacked = generate_suite(task_spec, [1, 2, 3], 16, "typographic", attack_target=0)
        clean = generate_suite(task_spec, range(4), 16)
        circuit = planted_circuit(attack_model.graph, (0, 0), (0, 1))
        directions = compute_directions(attack_model, attacked, circuit_senders(attack_model.graph, circuit))
        return attacked, clean, circuit, directions

    def _rows(self, model, attacked, clean, circuit, directions, alphas):
        attacked_tokens, _, attacked_labels = stack_pairs(attacked)
        clean_tokens, _, clean_labels = stack_pairs(clean)
        return attack_metrics(model, clean_tokens, clean_labels, attacked_tokens, attacked_labels,
                              attack_targets(attacked), directions, circuit, alphas)

    def test_alpha_zero_row_is_base(self, attack_model, suite):
        attacked, clean, circuit, directions = suite
        rows = self._rows(attack_model, attacked, clean, circuit, directions, [0.0])
        tokens, _, labels = stack_pairs(attacked)
        base = base_attack_metrics(attack_model, tokens, labels, attack_targets(attacked))
        assert rows[0]["asr_top1"] == base["asr_top1"]
        assert rows[0]["retention"] == 1.0
        assert list(rows[0]) == ["alpha", "max_layer", "clean_top1", "clean_top5", "atk_top1", "atk_top5",
                                 "asr_top1", "asr_top5", "retention"]

    def test_circuit_steering_removes_attack(self, attack_model, suite):
        attacked, clean, circuit, directions = suite
        base, steered = self._rows(attack_model, attacked, clean, circuit, directions, [0.0, 1.0])
        assert base["asr_top1"] >= 0.9
        assert steered["asr_top1"] <= 0.2
        assert steered["retention"] >= 0.8
        assert select_alpha([base, steered], base["asr_top1"])["alpha"] == 1.0

    def test_random_edges_do_not_remove_attack(self, attack_model, suite):
        attacked, clean, circuit, _ = suite
        graph = attack_model.graph
        control = mask_random(graph, circuit.size, seed=0, exclude=circuit)
        directions = compute_directions(attack_model, attacked, circuit_senders(graph, control))
        _, steered = self._rows(attack_model, attacked, clean, control, directions, [0.0, 1.0])
        assert steered["asr_top1"] >= 0.9


class TestMetrics:

    def test_top5_is_clamped_to_class_count(self):
        logits = torch.tensor([[0.1, 0.9, 0.0]])
        result = classification_metrics(logits, torch.tensor([2]), torch.tensor([1]))
        assert result == {"top1": 0.0, "top5": 1.0, "asr_top1": 1.0, "asr_top5": 1.0}

    def test_select_alpha(self):
        rows = [
            {"alpha": 0.5, "max_layer": 1, "asr_top1": 0.5, "retention": 1.0},
            {"alpha": 1.0, "max_layer": 0, "asr_top1": 0.05, "retention": 0.8},
            {"alpha": 1.0, "max_layer": 1, "asr_top1": 0.02, "retention": 0.9},
            {"alpha": 2.0, "max_layer": 1, "asr_top1": 0.0, "retention": 0.7},
        ]
        assert select_alpha(rows, base_asr=1.0) == rows[2]
        assert select_alpha(rows[:1], base_asr=1.0) is None

    def test_retrieval(self):
        queries = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        candidates = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]])
        result = retrieval_metrics(queries, candidates, correct=[0, 0], manipulated=[False, False, True], ks=(1, 2))
        assert result["recall@1"] == 0.5
        assert result["recall@2"] == 0.5
        assert result["rsms@1"] == 0.0
        assert result["rsms@2"] == 1.0
        assert result["r_mean"] == 0.5

    def test_retrieval_of_unrelated_embeddings_is_at_chance(self):
        generator = torch.Generator().manual_seed(0)
        queries = torch.randn(2000, 16, generator=generator)
        candidates = torch.randn(50, 16, generator=generator)
        correct = torch.randint(0, 50, (2000,), generator=generator).tolist()
        result = retrieval_metrics(queries, candidates, correct, [False] * 50, ks=(1, 5, 10))
        for k in (1, 5, 10):
            assert result[f"recall@{k}"] == pytest.approx(k / 50, abs=0.04)

    def test_retrieval_ignores_global_rescaling(self):
        generator = torch.Generator().manual_seed(1)
        queries = torch.randn(40, 8, generator=generator, dtype=torch.float64)
        candidates = torch.randn(20, 8, generator=generator, dtype=torch.float64)
        correct = list(range(20)) * 2
        manipulated = [i % 3 == 0 for i in range(20)]
        base = retrieval_metrics(queries, candidates, correct, manipulated)
        assert retrieval_metrics(3.0 * queries, candidates, correct, manipulated) == base
        assert retrieval_metrics(queries, 0.25 * candidates, correct, manipulated) == base

    def test_retrieval_k_too_large(self):
        with pytest.raises(CustomError) as exc:
            retrieval_metrics(torch.eye(2), torch.eye(2), [0, 1], [False, False], ks=(5,))
        assert exc.value.error_key == "ARGUMENT_ERROR"

    def test_directions_metadata(self):
        directions = SteeringDirections({NodeId("mlp", 0): torch.zeros(2, 2)}, SteeringRegime(), 1e-8, 3)
        assert directions.metadata()["regime"] == "pre_normed:mean"
        assert NodeId("mlp", 0) in directions


def test_projection_residual_after_ablation():
    generator = torch.Generator().manual_seed(0)
    for draw in range(1000):
        P, d = 1 + draw % 5, 2 + draw % 7
        h = torch.randn(P, d, generator=generator, dtype=torch.float64)
        v = torch.randn(P, d, generator=generator, dtype=torch.float64)
        epsilon = 10.0 ** -(1 + draw % 3)
        c = (h * v).sum(-1) / ((v * v).sum(-1) + epsilon)
        after = apply_ablation(h, v, 1.0, epsilon=epsilon)
        residual = (after * v).sum(-1) / ((v * v).sum(-1) + epsilon)
        expected = torch.where(c > 0, c * epsilon / ((v * v).sum(-1) + epsilon), c)
        assert torch.allclose(residual, expected, rtol=1e-6, atol=1e-12)


def test_medoid_matches_pairwise_cosine_search():
    rng = np.random.default_rng(0)
    for _ in range(200):
        N, P, d = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        samples = torch.from_numpy(rng.normal(size=(N, P, d)))
        samples[rng.random((N, P)) < 0.2] = 0.0
        valid = samples.norm(dim=-1) > 0
        result = _medoid(samples, valid)
        for p in range(P):
            rows = [samples[i, p].numpy() for i in range(N) if valid[i, p]]
            if not rows:
                assert torch.equal(result[p], torch.zeros(d, dtype=samples.dtype))
                continue
            units = [r / np.linalg.norm(r) for r in rows]
            totals = [sum(float(u @ w) for w in units) for u in units]
            chosen = [i for i, r in enumerate(rows) if np.array_equal(result[p].numpy(), r)]
            # 두 표본만 있으면 합이 수학적으로 같으므로 최대값과의 차이로 비교
            assert chosen and max(totals[i] for i in chosen) >= max(totals) - 1e-9


@pytest.mark.slow
def test_circuit_steering_beats_random_edges_across_seeds():
    alphas, layers = [0.25, 0.5, 0.75, 1.0, 1.5], [0, 1]

    def joint_condition(rows, base_asr):
        return any(row["asr_top1"] <= 0.5 * base_asr and row["retention"] >= 0.9 for row in rows)

    circuit_wins, control_wins = 0, 0
    for seed in range(5):
        spec = SyntheticTaskSpec(num_classes=4, input_dim=8, object_dims=4, grid_size=4, seed=seed)
        model = load_model(build_planted_model(spec, signal_head=(0, 0), attack_head=(0, 1), attack_target=0))
        attacked = generate_suite(spec, [1, 2, 3], 16, "typographic", attack_target=0)
        attacked_tokens, _, attacked_labels = stack_pairs(attacked)
        clean_tokens, _, clean_labels = stack_pairs(generate_suite(spec, range(4), 16))
        targets = attack_targets(attacked)
        base_asr = base_attack_metrics(model, attacked_tokens, attacked_labels, targets)["asr_top1"]

        circuit = planted_circuit(model.graph, (0, 0), (0, 1))
        control = mask_random(model.graph, circuit.size, seed=seed, exclude=circuit)
        for mask in (circuit, control):
            directions = compute_directions(model, attacked, circuit_senders(model.graph, mask))
            rows = attack_metrics(model, clean_tokens, clean_labels, attacked_tokens, attacked_labels,
                                  targets, directions, mask, alphas, layers)
            if joint_condition(rows, base_asr):
                if mask is circuit:
                    circuit_wins += 1
                else:
                    control_wins += 1
    assert circuit_wins >= 4
    assert control_wins == 0
