"""Reduced computation graph 구성과 circuit mask 생성"""

from collections import Counter
from typing import Dict, Iterable, Optional

import numpy as np

from ..core.constants import EDGE_TYPES
from ..core.exceptions import CustomError
from ..models.graph import CircuitMask, Edge, Graph
from ..models.runtime import ModelConfig


def build_graph_dims(num_layers: int, num_heads: int) -> Graph:
    return Graph.build(num_layers, num_heads)


def build_graph(config: ModelConfig) -> Graph:
    """ModelConfig의 순수 함수. edge 순서는 (receiver 위상 순서, sender 순서)"""
    return build_graph_dims(config.layers, config.heads_per_layer)


def edge_count(num_layers: int, num_heads: int) -> int:
    """Reduced graph의 edge 수 (닫힌 식)"""
    if num_layers < 1 or num_heads < 1:
        raise CustomError("ARGUMENT_ERROR", "edge_count requires L, H >= 1")
    L, H = num_layers, num_heads
    attn_in = L + (H + 1) * L * (L - 1) // 2
    mlp = L * (1 + H) + (H + 1) * L * (L - 1) // 2
    logits = 1 + L * (H + 1)
    return attn_in + mlp + logits


def unreduced_edge_count(num_layers: int, num_heads: int) -> int:
    """Head마다 receiver를 두는 원래 그래프의 edge 수 - O(L^2 H^2)"""
    L, H = num_layers, num_heads
    head_in = H * (L + (H + 1) * L * (L - 1) // 2)
    mlp = L * (1 + H) + (H + 1) * L * (L - 1) // 2
    logits = 1 + L * (H + 1)
    return head_in + mlp + logits


def edges_by_type(graph: Graph, mask: Optional[CircuitMask] = None) -> Dict[str, int]:
    """edge type별 개수 (mask가 있으면 그 안에서만)"""
    indices = mask.check(graph).indices if mask is not None else range(len(graph))
    counts = Counter(graph.edges[i].edge_type for i in indices)
    return {edge_type: counts.get(edge_type, 0) for edge_type in EDGE_TYPES}


# ===== mask 생성 =====

def mask_full(graph: Graph) -> CircuitMask:
    return CircuitMask((True,) * len(graph), graph.fingerprint)


def mask_empty(graph: Graph) -> CircuitMask:
    return CircuitMask((False,) * len(graph), graph.fingerprint)


def mask_from_indices(graph: Graph, indices: Iterable[int]) -> CircuitMask:
    return CircuitMask.from_indices(graph, indices)


def mask_from_edges(graph: Graph, edges: Iterable[Edge]) -> CircuitMask:
    return CircuitMask.from_edges(graph, edges)


def mask_random(
    graph: Graph,
    size: int,
    seed: int,
    exclude: Optional[CircuitMask] = None,
) -> CircuitMask:
    """정확히 size개의 edge를 균등 추출. exclude가 있으면 그 바깥에서만 추출"""
    candidates = np.arange(len(graph))
    if exclude is not None:
        excluded = set(exclude.check(graph).indices)
        candidates = np.array([i for i in candidates if i not in excluded], dtype=np.int64)
    if size < 0 or size > len(candidates):
        raise CustomError(
            "ARGUMENT_ERROR", "Requested {size} random edges but only {n} are available",
            size=size, n=len(candidates),
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=size, replace=False) if size else []
    return mask_from_indices(graph, chosen)
