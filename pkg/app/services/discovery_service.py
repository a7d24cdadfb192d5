"""Circuit discovery: Vi-CD sequential pruning, EAP / EAP-IG attribution, random baseline"""

import math
from typing import Dict, List, Optional, Sequence

from einops import einsum
import numpy as np
import torch
from tqdm import tqdm

from ..core.config import settings
from ..core.constants import (
    BISECTION_MAX_ITERATIONS,
    CRITERION_SWEEP_BOUNDS,
    CRITERION_SWEEP_POINTS,
    EAPIG_STEPS,
    MAX_VISITED_NODES,
)
from ..core.exceptions import CustomError
from ..core.logger import logger
from ..core.monitor import track_decision
from ..models.discovery import AttributionScores, DecisionRecord, DiscoveryResult, SweepPoint
from ..models.experiment import DiscoveryConfig, MetricSpec
from ..models.graph import CircuitMask, Graph
from ..models.patching import RunCache
from .graph_service import mask_empty, mask_from_indices, mask_full, mask_random
from .patching_service import circuit_accuracy, evaluate_metric, patched_forward
from .runtime_service import HookedViT, receiver_input_gradients

METHODS = ("vicd", "eap", "eapig", "random")
DEFAULT_EAPIG_STEPS = max(EAPIG_STEPS)


# ===== attribution =====

def _gradient_metric(metric: MetricSpec) -> tuple[MetricSpec, float]:
    """KL-to-clean은 clean run에서 gradient가 0이므로 corrupted logits에 고정하고 부호를 뒤집는다"""
    if metric.kind == "kl_divergence" and metric.reference == "clean":
        return metric.model_copy(update={"reference": "corrupted"}), -1.0
    return metric, 1.0


def _scores_from_gradients(
    model: HookedViT,
    cache: RunCache,
    gradients: Dict,
    sign: float,
) -> AttributionScores:
    graph = model.graph
    values = [0.0] * len(graph)
    for receiver in graph.receivers:
        grad = gradients[receiver]
        incoming = graph.incoming(receiver)
        delta = torch.stack([
            cache.corrupted_contrib[graph.edges[e].sender] - cache.clean_contrib[graph.edges[e].sender]
            for e in incoming
        ])
        # grad은 batch 평균 metric의 gradient라서 batch 합이 곧 예제별 점수의 평균
        scores = einsum(delta.to(grad.dtype), grad, "s b p d, b p d -> s")
        for e, score in zip(incoming, scores.tolist()):
            values[e] = sign * score
    return AttributionScores(tuple(values), graph.fingerprint)


def eap_scores(model: HookedViT, cache: RunCache, metric: MetricSpec) -> AttributionScores:
    """score(u->v) = mean_b <r_u(x̃) - r_u(x), ∂metric/∂in_v> at the clean run"""
    grad_metric, sign = _gradient_metric(metric)
    gradients = receiver_input_gradients(model, cache.clean_tokens, cache, grad_metric)
    return _scores_from_gradients(model, cache, gradients, sign)


def eapig_scores(model: HookedViT, cache: RunCache, metric: MetricSpec, steps: int) -> AttributionScores:
    """입력 공간에서 corrupted -> clean 직선 위 m개 점의 gradient 평균 (k=1..m, k=m이 clean)"""
    if steps < 1:
        raise CustomError("ARGUMENT_ERROR", "EAP-IG needs at least one step, got {m}", m=steps)
    grad_metric, sign = _gradient_metric(metric)
    clean = cache.clean_tokens.to(torch.float64)
    corrupted = cache.corrupted_tokens.to(torch.float64)
    total: Dict = {}
    for k in range(1, steps + 1):
        point = clean if k == steps else corrupted + (k / steps) * (clean - corrupted)
        for receiver, grad in receiver_input_gradients(model, point, cache, grad_metric).items():
            total[receiver] = total[receiver] + grad if receiver in total else grad
    averaged = {receiver: grad / steps for receiver, grad in total.items()}
    return _scores_from_gradients(model, cache, averaged, sign)


def mask_from_scores(
    graph: Graph,
    scores: AttributionScores,
    k: Optional[int] = None,
    threshold: Optional[float] = None,
) -> CircuitMask:
    """top-k (내림차순, 동점은 canonical 순서) 또는 score >= threshold"""
    if scores.fingerprint != graph.fingerprint:
        raise CustomError("ARGUMENT_ERROR", "Scores were computed for a different graph")
    if (k is None) == (threshold is None):
        raise CustomError("ARGUMENT_ERROR", "Give exactly one of k or threshold")
    if threshold is not None:
        return mask_from_indices(graph, (i for i, s in enumerate(scores.values) if s >= threshold))
    if not 0 <= k <= len(graph):
        raise CustomError("ARGUMENT_ERROR", "k={k} outside [0, {n}]", k=k, n=len(graph))
    order = sorted(range(len(graph)), key=lambda i: (-scores.values[i], i))
    return mask_from_indices(graph, order[:k])


# ===== Vi-CD =====

def _edge_order(graph: Graph, incoming: Sequence[int], config: DiscoveryConfig,
                scores: Optional[AttributionScores]) -> List[int]:
    if config.edge_order == "canonical" or scores is None:
        return list(incoming)
    if config.edge_order == "ascending_attribution":
        return sorted(incoming, key=lambda e: (abs(scores.values[e]), e))
    return sorted(incoming, key=lambda e: (-abs(scores.values[e]), e))


def vicd_discover(
    model: HookedViT,
    cache: RunCache,
    config: DiscoveryConfig,
    scores: Optional[AttributionScores] = None,
) -> DiscoveryResult:
    """receiver를 역위상 순서로 방문하며 edge를 하나씩 제거해 본다.

    현재 candidate 대비 metric 변화의 절댓값이 threshold 미만이면 제거를 확정하고
    candidate를 갱신, 아니면 복원한다.
    """
    graph = model.graph
    if cache.batch_size == 0:
        raise CustomError("ARGUMENT_ERROR", "Vi-CD needs at least one training pair")
    if scores is None and config.edge_order != "canonical":
        scores = eap_scores(model, cache, config.metric)

    current = mask_full(graph)
    current_value = evaluate_metric(config.metric, patched_forward(model, cache, current, config.mode), cache)
    forwards = 1
    decisions: List[DecisionRecord] = []
    receivers = list(reversed(graph.receivers))[: config.max_visited_nodes]

    for receiver in tqdm(receivers, desc="Vi-CD receivers", disable=not settings.SHOW_PROGRESS):
        for e in _edge_order(graph, graph.incoming(receiver), config, scores):
            edge = graph.edges[e]
            trial = current.with_edge(e, False)
            trial_value = evaluate_metric(config.metric, patched_forward(model, cache, trial, config.mode), cache)
            forwards += 1
            degradation = trial_value - current_value
            if not math.isfinite(degradation):
                logger.error(f"Non-finite pruning metric at edge {edge}", edge=str(edge))
                raise CustomError("NUMERIC_ERROR", "Pruning metric is not finite at edge {edge}", edge=str(edge))

            pruned = abs(degradation) < config.threshold
            if pruned:
                current, current_value = trial, trial_value
            decision = "pruned" if pruned else "kept"
            track_decision("vicd", decision)
            decisions.append(DecisionRecord(
                step=len(decisions),
                receiver=receiver.name,
                sender=edge.sender.name,
                edge_type=edge.edge_type,
                degradation=degradation,
                decision=decision,
            ))
            logger.debug(f"{edge}: Δ={degradation:.3e} -> {decision}")

    logger.experiment_event(
        "circuit_discovered",
        f"Vi-CD kept {current.size}/{len(graph)} edges at τ={config.threshold:g}",
        method="vicd", edges=current.size, threshold=config.threshold, patched_forwards=forwards,
    )
    return DiscoveryResult(
        mask=current,
        method="vicd",
        threshold=config.threshold,
        decisions=decisions,
        patched_forwards=forwards,
        visited_receivers=len(receivers),
        scores=scores,
    )


# ===== 공통 진입점 =====

def discover(
    method: str,
    model: HookedViT,
    cache: RunCache,
    metric: MetricSpec,
    threshold: Optional[float] = None,
    edges: Optional[int] = None,
    steps: Optional[int] = None,
    max_visited: Optional[int] = None,
    seed: int = 0,
    mode: str = "live",
) -> DiscoveryResult:
    """method별 파라미터 규칙: vicd는 threshold, eap/eapig는 edges 또는 threshold, random은 edges"""
    graph = model.graph
    if method == "vicd":
        if threshold is None:
            raise CustomError("USAGE_ERROR", "vicd needs a threshold")
        config = DiscoveryConfig(threshold=threshold, metric=metric, seed=seed, mode=mode,
                                 **({"max_visited_nodes": max_visited} if max_visited else {}))
        return vicd_discover(model, cache, config)
    if method in ("eap", "eapig"):
        if edges is None and threshold is None:
            raise CustomError("USAGE_ERROR", "{method} needs --edges or --threshold", method=method)
        if method == "eap":
            scores = eap_scores(model, cache, metric)
        else:
            scores = eapig_scores(model, cache, metric, steps or DEFAULT_EAPIG_STEPS)
        mask = mask_from_scores(graph, scores, k=edges, threshold=None if edges is not None else threshold)
        return DiscoveryResult(mask=mask, method=method, threshold=threshold, scores=scores)
    if method == "random":
        if edges is None:
            raise CustomError("USAGE_ERROR", "random needs --edges")
        return DiscoveryResult(mask=mask_random(graph, edges, seed), method="random")
    raise CustomError("USAGE_ERROR", "Unknown discovery method {method!r}", method=method)


# ===== sweeps =====

def _target_size(graph: Graph, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise CustomError("ARGUMENT_ERROR", "Sweep fraction {f} outside (0, 1]", f=fraction)
    return int(round(fraction * len(graph)))


class _ThresholdBisection:
    """Vi-CD는 threshold로 조절되므로 log τ 이분 탐색으로 원하는 edge 수를 맞춘다 (결과는 τ별 memo)"""

    def __init__(self, model: HookedViT, cache: RunCache, base: DiscoveryConfig,
                 scores: AttributionScores, low: float = 1e-12, high: float = 1e6):
        self.model = model
        self.cache = cache
        self.base = base
        self.scores = scores
        self.low = low
        self.high = high
        self._memo: Dict[float, CircuitMask] = {}

    def run(self, threshold: float) -> CircuitMask:
        if threshold not in self._memo:
            config = self.base.model_copy(update={"threshold": threshold})
            self._memo[threshold] = vicd_discover(self.model, self.cache, config, self.scores).mask
        return self._memo[threshold]

    def search(self, size: int) -> CircuitMask:
        lo, hi = math.log(self.low), math.log(self.high)
        best: Optional[CircuitMask] = None
        for _ in range(BISECTION_MAX_ITERATIONS):
            mid = 0.5 * (lo + hi)
            mask = self.run(math.exp(mid))
            if best is None or abs(mask.size - size) < abs(best.size - size):
                best = mask
            if mask.size == size:
                return mask
            # threshold가 클수록 더 많이 제거된다
            if mask.size > size:
                lo = mid
            else:
                hi = mid
        logger.warning(f"Bisection missed target size {size}; nearest achieved {best.size}",
                       target=size, achieved=best.size)
        return best


def sweep_faithfulness(
    method: str,
    model: HookedViT,
    train_cache: RunCache,
    eval_cache: RunCache,
    grid: Sequence[float],
    metric: MetricSpec = MetricSpec(),
    seed: int = 0,
    steps: int = DEFAULT_EAPIG_STEPS,
    max_visited: int = MAX_VISITED_NODES,
    mode: str = "live",
) -> List[SweepPoint]:
    """grid의 edge 비율마다 해당 크기의 circuit을 만들고 eval set 정확도를 잰다.

    vicd는 threshold 이분 탐색으로 크기를 맞추며 max_visited, mode가 매 실행에 그대로 쓰인다.
    """
    graph = model.graph
    if method not in METHODS:
        raise CustomError("USAGE_ERROR", "Unknown sweep method {method!r}", method=method)

    scores = None
    if method in ("vicd", "eap"):
        scores = eap_scores(model, train_cache, metric)
    elif method == "eapig":
        scores = eapig_scores(model, train_cache, metric, steps)
    bisection = None
    if method == "vicd":
        base = DiscoveryConfig(threshold=1.0, metric=metric, seed=seed, max_visited_nodes=max_visited, mode=mode)
        bisection = _ThresholdBisection(model, train_cache, base, scores)

    points = []
    for fraction in tqdm(grid, desc=f"{method} sweep", disable=not settings.SHOW_PROGRESS):
        size = _target_size(graph, fraction)
        if size == len(graph):
            mask = mask_full(graph)
        elif size == 0 and method != "vicd":
            mask = mask_empty(graph)
        elif method == "vicd":
            mask = bisection.search(size)
        elif method == "random":
            mask = mask_random(graph, size, seed)
        else:
            mask = mask_from_scores(graph, scores, k=size)
        points.append(SweepPoint(
            method=method,
            fraction=float(fraction),
            edges=mask.size,
            accuracy=circuit_accuracy(model, eval_cache, mask),
            seed=seed,
        ))
    logger.experiment_event("sweep_finished", f"{method} sweep over {len(points)} grid points",
                            method=method, points=len(points))
    return points


def criterion_thresholds(head_mode: str, metric_kind: str, points: int = CRITERION_SWEEP_POINTS) -> List[float]:
    low, high = CRITERION_SWEEP_BOUNDS[(head_mode, metric_kind)]
    return [float(t) for t in np.geomspace(low, high, points)]


def criterion_sweep(
    model: HookedViT,
    train_cache: RunCache,
    eval_cache: RunCache,
    metric: MetricSpec,
    thresholds: Optional[Sequence[float]] = None,
    max_visited: int = MAX_VISITED_NODES,
    mode: str = "live",
) -> List[dict]:
    """같은 데이터에서 criterion(KL / logit diff)별 threshold 사다리를 따라 Vi-CD 실행"""
    if thresholds is None:
        thresholds = criterion_thresholds(model.config.head_mode, metric.kind)
    scores = eap_scores(model, train_cache, metric)
    rows = []
    for threshold in thresholds:
        config = DiscoveryConfig(threshold=threshold, metric=metric, max_visited_nodes=max_visited, mode=mode)
        result = vicd_discover(model, train_cache, config, scores)
        rows.append({
            "criterion": metric.kind,
            "threshold": float(threshold),
            "edges": result.mask.size,
            "accuracy": circuit_accuracy(model, eval_cache, result.mask),
        })
    return rows
