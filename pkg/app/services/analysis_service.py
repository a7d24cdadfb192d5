"""Circuit 구조 분석 - Jaccard 유사도, inclusion frequency, 안정성 구간, core/union, binary circuit"""

from itertools import combinations
from typing import Dict, List, Literal, Mapping, Sequence, Tuple

import numpy as np
import torch

from ..core.constants import BINARY_CIRCUIT_SEEDS, BORDERLINE_FREQUENCY, EDGE_TYPES, STABLE_FREQUENCY
from ..core.exceptions import CustomError
from ..core.logger import logger
from ..models.analysis import CircuitEnsemble, EdgeStability, EnsembleReport, StabilityCategory
from ..models.data import PairedExample, split_by_label
from ..models.experiment import DiscoveryConfig
from ..models.graph import CircuitMask, Graph
from ..models.patching import RunCache
from .discovery_service import vicd_discover
from .patching_service import cache_pairs, patched_forward
from .runtime_service import HookedViT

Universe = Literal["union", "all"]


def _same_graph(a: CircuitMask, b: CircuitMask):
    if a.fingerprint != b.fingerprint or len(a) != len(b):
        raise CustomError("ARGUMENT_ERROR", "Circuits come from different graphs ({a} vs {b})",
                          a=a.fingerprint, b=b.fingerprint)


def jaccard(a: CircuitMask, b: CircuitMask) -> float:
    """|A ∩ B| / |A ∪ B|, J(∅, ∅) = 1"""
    _same_graph(a, b)
    inter = sum(x and y for x, y in zip(a.indicators, b.indicators))
    union = sum(x or y for x, y in zip(a.indicators, b.indicators))
    return 1.0 if union == 0 else inter / union


def circuit_union(a: CircuitMask, b: CircuitMask) -> CircuitMask:
    _same_graph(a, b)
    return CircuitMask(tuple(x or y for x, y in zip(a.indicators, b.indicators)), a.fingerprint)


def union_all(masks: Sequence[CircuitMask]) -> CircuitMask:
    result = masks[0]
    for mask in masks[1:]:
        result = circuit_union(result, mask)
    return result


def core_edges(ensemble: CircuitEnsemble) -> CircuitMask:
    """모든 circuit에 공통인 edge (frequency = 1.0)"""
    masks = ensemble.masks
    bits = tuple(all(mask.indicators[i] for mask in masks) for i in range(len(masks[0])))
    return CircuitMask(bits, ensemble.fingerprint)


def pairwise_jaccard(masks: Sequence[CircuitMask]) -> List[float]:
    return [jaccard(a, b) for a, b in combinations(masks, 2)]


def mean_pairwise_jaccard(masks: Sequence[CircuitMask]) -> Tuple[float, float]:
    values = pairwise_jaccard(masks)
    if not values:
        raise CustomError("ARGUMENT_ERROR", "Pairwise Jaccard needs at least two circuits")
    return float(np.mean(values)), float(np.std(values))


def inclusion_frequency(ensemble: CircuitEnsemble, universe: Universe = "union") -> Dict[int, float]:
    """edge index -> 포함 비율. 기본 universe는 한 번이라도 포함된 edge"""
    if len(ensemble) < 2:
        raise CustomError("ARGUMENT_ERROR", "Inclusion frequency needs at least two circuits")
    n = len(ensemble)
    counts = np.sum([mask.indicators for mask in ensemble.masks], axis=0)
    indices = range(len(counts)) if universe == "all" else np.flatnonzero(counts)
    return {int(i): int(counts[i]) / n for i in indices}


def stability_category(frequency: float) -> StabilityCategory:
    """> 0.9 stable, 0.5 ~ 0.9 borderline (양 끝 포함), < 0.5 unstable"""
    if frequency > STABLE_FREQUENCY:
        return "stable"
    if frequency >= BORDERLINE_FREQUENCY:
        return "borderline"
    return "unstable"


def edge_stability(graph: Graph, frequencies: Mapping[int, float]) -> List[EdgeStability]:
    return [
        EdgeStability(
            sender=graph.edges[i].sender.name,
            receiver=graph.edges[i].receiver.name,
            edge_type=graph.edges[i].edge_type,
            frequency=frequency,
            category=stability_category(frequency),
        )
        for i, frequency in sorted(frequencies.items())
    ]


def stability_categories(graph: Graph, frequencies: Mapping[int, float]) -> Dict[str, Dict[str, int]]:
    """edge type별 {stable, borderline, unstable} 개수"""
    histogram = {edge_type: {"stable": 0, "borderline": 0, "unstable": 0} for edge_type in EDGE_TYPES}
    for record in edge_stability(graph, frequencies):
        histogram[record.edge_type][record.category] += 1
    return histogram


def core_fraction(ensemble: CircuitEnsemble) -> Dict[str, float]:
    """core edge 비율을 두 universe 기준으로 (union / 전체 edge)"""
    core = core_edges(ensemble).size
    union = union_all(ensemble.masks).size
    total = len(ensemble.masks[0])
    return {"union": core / union if union else 0.0, "all": core / total}


def ensemble_report(graph: Graph, ensemble: CircuitEnsemble, label: str = "",
                    universe: Universe = "union") -> EnsembleReport:
    sizes = [mask.size for mask in ensemble.masks]
    mean_j, std_j = mean_pairwise_jaccard(ensemble.masks) if len(ensemble) > 1 else (None, None)
    histogram = (
        stability_categories(graph, inclusion_frequency(ensemble, universe)) if len(ensemble) > 1
        else {edge_type: {"stable": 0, "borderline": 0, "unstable": 0} for edge_type in EDGE_TYPES}
    )
    return EnsembleReport(
        label=label,
        circuits=len(ensemble),
        mean_pairwise_jaccard=mean_j,
        std_pairwise_jaccard=std_j,
        size_min=min(sizes),
        size_max=max(sizes),
        size_mean=float(np.mean(sizes)),
        universe=universe,
        stability_histogram=histogram,
        core_edges=[list(edge.name) for edge in core_edges(ensemble).edges(graph)],
        core_fraction=core_fraction(ensemble),
    )


def similarity_matrix(ensembles: Mapping[str, CircuitEnsemble]) -> Tuple[List[dict], np.ndarray]:
    """class 쌍마다 교차 Jaccard 평균/표준편차. (CSV 행, 평균 행렬)"""
    labels = sorted(ensembles)
    matrix = np.zeros((len(labels), len(labels)))
    rows = []
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            if j < i:
                continue
            if a == b:
                values = pairwise_jaccard(ensembles[a].masks) or [1.0]
            else:
                values = [jaccard(x, y) for x in ensembles[a].masks for y in ensembles[b].masks]
            mean, std = float(np.mean(values)), float(np.std(values))
            matrix[i, j] = matrix[j, i] = mean
            rows.append({"class_a": a, "class_b": b, "jaccard_mean": mean, "jaccard_std": std})
    return rows, matrix


# ===== binary circuits =====

def edge_partition(circuit: CircuitMask, class_a: CircuitMask, class_b: CircuitMask) -> Dict[str, int]:
    """binary circuit edge를 A only / B only / both / binary only로 분류"""
    _same_graph(circuit, class_a)
    _same_graph(circuit, class_b)
    counts = {"a_only": 0, "b_only": 0, "both": 0, "binary_only": 0}
    for i in circuit.indices:
        in_a, in_b = class_a.indicators[i], class_b.indicators[i]
        key = "both" if in_a and in_b else "a_only" if in_a else "b_only" if in_b else "binary_only"
        counts[key] += 1
    return counts


def binary_accuracy(model: HookedViT, circuit: CircuitMask, cache: RunCache, class_a: int, class_b: int) -> float:
    """두 클래스 logits 중 큰 쪽을 예측으로 하는 patched accuracy"""
    logits = patched_forward(model, cache, circuit)[:, [class_a, class_b]]
    predicted = torch.where(logits[:, 0] >= logits[:, 1], torch.tensor(class_a), torch.tensor(class_b))
    return float((predicted == cache.labels).double().mean())


def binary_circuit_eval(
    model: HookedViT,
    circuit: CircuitMask,
    class_a: int,
    class_b: int,
    pairs: Sequence[PairedExample],
    class_a_circuits: Sequence[CircuitMask],
    class_b_circuits: Sequence[CircuitMask],
) -> dict:
    labels = [pair.label for pair in pairs]
    if set(labels) - {class_a, class_b}:
        raise CustomError("ARGUMENT_ERROR", "Binary evaluation pairs must come from classes {a} and {b}",
                          a=class_a, b=class_b)
    if labels.count(class_a) != labels.count(class_b):
        logger.warning("Binary evaluation pairs are not balanced 50/50",
                       class_a=labels.count(class_a), class_b=labels.count(class_b))
    cache = cache_pairs(model, pairs)
    partition = edge_partition(circuit, union_all(class_a_circuits), union_all(class_b_circuits))
    return {
        "accuracy": binary_accuracy(model, circuit, cache, class_a, class_b),
        "edges": circuit.size,
        "partition": partition,
    }


def balanced_binary_pairs(pairs: Sequence[PairedExample], class_a: int, class_b: int) -> List[PairedExample]:
    """두 클래스에서 같은 수만큼 (id 순서 유지)"""
    groups = split_by_label(pairs)
    n = min(len(groups.get(class_a, [])), len(groups.get(class_b, [])))
    if n == 0:
        raise CustomError("ARGUMENT_ERROR", "Binary evaluation needs pairs from both class {a} and class {b}",
                          a=class_a, b=class_b)
    return groups[class_a][:n] + groups[class_b][:n]


def binary_report(
    model: HookedViT,
    pairs: Sequence[PairedExample],
    class_a: int,
    class_b: int,
    class_a_circuits: Mapping[str, CircuitMask],
    class_b_circuits: Mapping[str, CircuitMask],
    binary_circuits: Mapping[str, CircuitMask],
) -> List[dict]:
    """class circuit, 같은 순번끼리의 union, binary circuit을 두 클래스 과제에서 평가한 행"""
    if not class_a_circuits or not class_b_circuits:
        raise CustomError("USAGE_ERROR", "Binary evaluation needs circuits for both class {a} and class {b}",
                          a=class_a, b=class_b)
    if binary_circuits and len(binary_circuits) < BINARY_CIRCUIT_SEEDS:
        logger.warning(f"Only {len(binary_circuits)} binary circuit runs (protocol uses {BINARY_CIRCUIT_SEEDS})",
                       runs=len(binary_circuits))
    a_masks, b_masks = list(class_a_circuits.values()), list(class_b_circuits.values())
    candidates: List[Tuple[str, str, CircuitMask]] = []
    candidates += [(name, "class_a", mask) for name, mask in class_a_circuits.items()]
    candidates += [(name, "class_b", mask) for name, mask in class_b_circuits.items()]
    for (name_a, mask_a), (name_b, mask_b) in zip(class_a_circuits.items(), class_b_circuits.items()):
        candidates.append((f"{name_a}+{name_b}", "union", circuit_union(mask_a, mask_b)))
    candidates += [(name, "binary", mask) for name, mask in binary_circuits.items()]

    rows = []
    for name, kind, mask in candidates:
        result = binary_circuit_eval(model, mask, class_a, class_b, pairs, a_masks, b_masks)
        rows.append({"circuit": name, "kind": kind, "accuracy": result["accuracy"], "edges": result["edges"],
                     **result["partition"]})
    return rows


# ===== dataset-size stability =====

def dataset_size_stability(
    model: HookedViT,
    pairs: Sequence[PairedExample],
    sizes: Sequence[int],
    runs: int,
    config: DiscoveryConfig,
    seed: int = 0,
) -> List[dict]:
    """크기별로 재추출한 부분집합마다 circuit을 찾아 평균 pairwise Jaccard를 잰다"""
    if runs < 2:
        raise CustomError("ARGUMENT_ERROR", "Stability needs at least two runs per size")
    rows = []
    for size in sizes:
        if not 1 <= size <= len(pairs):
            raise CustomError("ARGUMENT_ERROR", "Subset size {s} outside [1, {n}]", s=size, n=len(pairs))
        masks = []
        for run in range(runs):
            rng = np.random.default_rng([seed, size, run])
            subset = [pairs[i] for i in sorted(rng.choice(len(pairs), size=size, replace=False))]
            masks.append(vicd_discover(model, cache_pairs(model, subset), config).mask)
        ensemble = CircuitEnsemble(masks)
        mean_j, std_j = mean_pairwise_jaccard(masks)
        fractions = core_fraction(ensemble)
        rows.append({
            "size": size,
            "runs": runs,
            "jaccard_mean": mean_j,
            "jaccard_std": std_j,
            "edges_mean": float(np.mean([mask.size for mask in masks])),
            "core_fraction_union": fractions["union"],
            "core_fraction_all": fractions["all"],
        })
        logger.info(f"size {size}: mean pairwise Jaccard {mean_j:.3f}")
    return rows
