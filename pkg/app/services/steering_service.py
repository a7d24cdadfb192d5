"""Circuit-restricted steering: corruption-aligned direction 추정과 ReLU-gated directional ablation"""

from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..core.constants import RECALL_THRESHOLDS, STEERING_BATCH_SIZE, STEERING_BATCHES, STEERING_EPSILON
from ..core.exceptions import CustomError
from ..core.logger import logger
from ..models.data import PairedExample, stack_pairs
from ..models.experiment import SteeringPolicy, SteeringRegime
from ..models.graph import CircuitMask, Graph, NodeId
from ..models.runtime import ForwardTrace
from ..models.steering import SteeringDirections
from .runtime_service import COMPUTE_DTYPE, HookedViT


def circuit_senders(graph: Graph, mask: CircuitMask) -> List[NodeId]:
    """circuit edge의 sender (canonical 순서, 중복 없음)"""
    senders = {edge.sender for edge in mask.edges(graph)}
    return [node for node in graph.senders if node in senders]


# ===== direction 추정 =====

def _unit_rows(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """행 단위 정규화와 유효 행 표시 (norm 0인 행은 무효)"""
    norms = x.norm(dim=-1, keepdim=True)
    valid = norms.squeeze(-1) > 0
    return x / norms.clamp_min(torch.finfo(x.dtype).tiny), valid


def _medoid(samples: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """(N, P, d) -> (P, d). 위치마다 Σ_j cos(Δ_i, Δ_j)가 최대인 표본 (동점이면 앞선 표본)"""
    N, P, d = samples.shape
    result = torch.zeros(P, d, dtype=samples.dtype)
    for p in range(P):
        rows = samples[valid[:, p], p]
        if rows.shape[0] == 0:
            continue
        unit = F.normalize(rows, dim=-1)
        totals = (unit @ unit.T).sum(1)
        result[p] = rows[int(torch.argmax(totals))]
    return result


def compute_directions(
    model: HookedViT,
    pairs: Sequence[PairedExample],
    senders: Sequence[NodeId],
    regime: SteeringRegime = SteeringRegime(),
    epsilon: float = STEERING_EPSILON,
    batches: int = STEERING_BATCHES,
    batch_size: int = STEERING_BATCH_SIZE,
    attack_id: str = "",
) -> SteeringDirections:
    """pair.clean = attacked (x_A), pair.corrupted = 원본 (x_¬A).

    pre_normed:  Δ = x̂_A - x̂_¬A (행별 단위 정규화 후 차)
    post_normed: Δ = normalize(x_A - x_¬A)
    위치마다 유효한 표본만 mean 또는 medoid로 모은다.
    """
    pairs = list(pairs)[: batches * batch_size]
    if not pairs:
        raise CustomError("ARGUMENT_ERROR", "Direction estimation needs at least one pair")
    attacked, original, _ = stack_pairs(pairs)
    with torch.no_grad():
        a_trace = model.execute(model.embed(attacked))
        o_trace = model.execute(model.embed(original))

    directions: Dict[NodeId, torch.Tensor] = {}
    skipped: Dict[str, int] = {}
    for node in senders:
        a = a_trace.sender_contribution[node]
        o = o_trace.sender_contribution[node]
        if regime.normalization == "pre_normed":
            a_unit, a_valid = _unit_rows(a)
            o_unit, o_valid = _unit_rows(o)
            samples, valid = a_unit - o_unit, a_valid & o_valid
        else:
            samples, valid = _unit_rows(a - o)

        invalid = int((~valid).sum())
        if invalid:
            skipped[node.name] = invalid
        if regime.aggregation == "mean":
            weights = valid.to(samples.dtype).unsqueeze(-1)
            counts = weights.sum(0).clamp_min(1.0)
            direction = (samples * weights).sum(0) / counts
        else:
            direction = _medoid(samples, valid)
        if not torch.isfinite(direction).all():
            raise CustomError("NUMERIC_ERROR", "Non-finite direction for {node}", node=node.name)
        directions[node] = direction

    if skipped:
        logger.warning(f"Skipped zero-norm activation rows in {len(skipped)} senders", skipped=skipped)
    logger.info(f"Directions estimated for {len(directions)} senders from {len(pairs)} pairs ({regime})")
    return SteeringDirections(
        directions=directions,
        regime=regime,
        epsilon=epsilon,
        n_pairs=len(pairs),
        attack_id=attack_id,
        fingerprint=model.graph.fingerprint,
        skipped_rows=skipped,
    )


# ===== intervention =====

def apply_ablation(h: torch.Tensor, v: torch.Tensor, alpha: float, epsilon: float = STEERING_EPSILON) -> torch.Tensor:
    """patch마다 c_p = <h_p, v_p> / (‖v_p‖² + ε), h'_p = h_p - α·ReLU(c_p)·v_p"""
    if alpha == 0:
        return h
    if h.shape[-2:] != v.shape[-2:]:
        raise CustomError("ARGUMENT_ERROR", "Activation {h} and direction {v} shapes differ",
                          h=tuple(h.shape), v=tuple(v.shape))
    v = v.to(h.dtype)
    c = (h * v).sum(-1, keepdim=True) / ((v * v).sum(-1, keepdim=True) + epsilon)
    return h - alpha * torch.relu(c) * v


def steered_trace(
    model: HookedViT,
    tokens: torch.Tensor,
    directions: SteeringDirections,
    policy: SteeringPolicy,
    return_embedding: bool = False,
) -> ForwardTrace:
    graph = model.graph
    policy.circuit.check(graph)
    senders = circuit_senders(graph, policy.circuit)
    for node in senders:
        if node not in directions:
            raise CustomError("ARGUMENT_ERROR", "No steering direction for circuit sender {node}", node=node.name)

    keep = policy.circuit.indicators
    sender_set = set(senders)
    cutoff = graph.num_layers if policy.max_receiver_layer is None else policy.max_receiver_layer
    vectors = {graph.sender_index(node): directions[node].to(COMPUTE_DTYPE) for node in senders}

    def assemble(receiver, edges, sender_indices, live):
        steer = graph.receiver_layer(receiver) <= cutoff
        terms = []
        for e, s in zip(edges, sender_indices):
            targeted = keep[e] or (policy.sender_global and graph.senders[s] in sender_set)
            if steer and targeted:
                terms.append(apply_ablation(live[s], vectors[s], policy.alpha, directions.epsilon))
            else:
                terms.append(live[s])
        return torch.stack(terms).sum(0)

    batch = tokens.unsqueeze(0) if tokens.dim() == 2 else tokens
    with torch.no_grad():
        return model.execute(model.embed(batch), assemble, return_embedding=return_embedding)


def steered_forward(
    model: HookedViT,
    tokens: torch.Tensor,
    directions: SteeringDirections,
    policy: SteeringPolicy,
) -> torch.Tensor:
    """circuit edge 위에서만 sender 기여분을 ablation한 logits"""
    logits = steered_trace(model, tokens, directions, policy).logits
    return logits[0] if tokens.dim() == 2 else logits


def steered_embeddings(model: HookedViT, tokens: torch.Tensor, directions: SteeringDirections,
                       policy: SteeringPolicy) -> torch.Tensor:
    if model.config.head_mode != "contrastive":
        raise CustomError("CONFIG_ERROR", "Image embeddings need a contrastive head")
    return steered_trace(model, tokens, directions, policy, return_embedding=True).embedding


# ===== 평가 =====

def _topk_hits(logits: torch.Tensor, targets: torch.Tensor, k: int) -> float:
    k = min(k, logits.shape[-1])
    top = logits.topk(k, dim=-1).indices
    return float((top == targets.unsqueeze(-1)).any(-1).double().mean())


def classification_metrics(logits: torch.Tensor, labels: torch.Tensor,
                           attack_targets: Optional[torch.Tensor] = None) -> dict:
    result = {"top1": _topk_hits(logits, labels, 1), "top5": _topk_hits(logits, labels, 5)}
    if attack_targets is not None:
        result["asr_top1"] = _topk_hits(logits, attack_targets, 1)
        result["asr_top5"] = _topk_hits(logits, attack_targets, 5)
    return result


def attack_metrics(
    model: HookedViT,
    clean_tokens: torch.Tensor,
    clean_labels: torch.Tensor,
    attacked_tokens: torch.Tensor,
    attacked_labels: torch.Tensor,
    attack_targets: torch.Tensor,
    directions: SteeringDirections,
    circuit: CircuitMask,
    alpha_grid: Sequence[float],
    layer_grid: Optional[Sequence[int]] = None,
    sender_global: bool = False,
) -> List[dict]:
    """(α, 최대 receiver 층)마다 clean/attacked top-1·top-5, ASR, retention"""
    if clean_tokens.shape[0] == 0 or attacked_tokens.shape[0] == 0:
        raise CustomError("ARGUMENT_ERROR", "Attack metrics need non-empty clean and attacked sets")
    layer_grid = list(layer_grid) if layer_grid is not None else [model.graph.num_layers]
    with torch.no_grad():
        base_clean = model.execute(model.embed(clean_tokens)).logits
    base_top1 = _topk_hits(base_clean, clean_labels, 1)
    if base_top1 == 0:
        logger.warning("Base clean accuracy is zero; retention reported as 0")

    rows = []
    for alpha in alpha_grid:
        for max_layer in layer_grid:
            policy = SteeringPolicy(circuit=circuit, alpha=alpha, max_receiver_layer=max_layer,
                                    sender_global=sender_global)
            clean = classification_metrics(steered_forward(model, clean_tokens, directions, policy), clean_labels)
            attacked = classification_metrics(
                steered_forward(model, attacked_tokens, directions, policy), attacked_labels, attack_targets,
            )
            rows.append({
                "alpha": float(alpha),
                "max_layer": int(max_layer),
                "clean_top1": clean["top1"],
                "clean_top5": clean["top5"],
                "atk_top1": attacked["top1"],
                "atk_top5": attacked["top5"],
                "asr_top1": attacked["asr_top1"],
                "asr_top5": attacked["asr_top5"],
                "retention": clean["top1"] / base_top1 if base_top1 > 0 else 0.0,
            })
    return rows


def base_attack_metrics(model: HookedViT, attacked_tokens: torch.Tensor, attacked_labels: torch.Tensor,
                        attack_targets: torch.Tensor) -> dict:
    with torch.no_grad():
        logits = model.execute(model.embed(attacked_tokens)).logits
    return classification_metrics(logits, attacked_labels, attack_targets)


def select_alpha(rows: Sequence[dict], base_asr: float, target_reduction: float = 0.9) -> Optional[dict]:
    """ASR top-1을 base 대비 target_reduction 이상 줄이는 가장 작은 α (같은 α면 retention이 높은 행)"""
    limit = (1.0 - target_reduction) * base_asr
    meeting = [row for row in rows if row["asr_top1"] <= limit]
    if not meeting:
        logger.warning(f"No grid point reduces ASR by {target_reduction:.0%}", base_asr=base_asr)
        return None
    return min(meeting, key=lambda row: (row["alpha"], -row["retention"], row["max_layer"]))


def retrieval_metrics(
    queries: torch.Tensor,
    candidates: torch.Tensor,
    correct: Sequence[int],
    manipulated: Sequence[bool],
    ks: Sequence[int] = RECALL_THRESHOLDS,
) -> dict:
    """dot-product 순위 기준 recall@k, R_mean(=ks 평균), RSMS@k"""
    n_candidates = candidates.shape[0]
    for k in ks:
        if k > n_candidates:
            raise CustomError("ARGUMENT_ERROR", "k={k} exceeds the {n} candidates", k=k, n=n_candidates)
    scores = (queries.to(torch.float64) @ candidates.to(torch.float64).T).numpy()
    ranks = np.argsort(-scores, axis=1, kind="stable")
    correct = np.asarray(correct)
    manipulated = np.asarray(manipulated, dtype=bool)

    result = {}
    for k in ks:
        top = ranks[:, :k]
        result[f"recall@{k}"] = float((top == correct[:, None]).any(1).mean())
        result[f"rsms@{k}"] = float(manipulated[top].any(1).mean())
    result["r_mean"] = float(np.mean([result[f"recall@{k}"] for k in ks]))
    return result
