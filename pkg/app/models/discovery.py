"""Circuit discovery 결과 모델"""

from dataclasses import dataclass, field
import math
from typing import Dict, List, Tuple

from ..core.exceptions import CustomError
from .graph import CircuitMask, Edge, Graph


@dataclass(frozen=True)
class AttributionScores:
    """graph.edges 순서에 맞춘 edge별 점수. 양수 = edge 제거 시 metric 악화"""
    values: Tuple[float, ...]
    fingerprint: str

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.values):
            raise CustomError("NUMERIC_ERROR", "Attribution scores contain non-finite values")

    def __len__(self) -> int:
        return len(self.values)

    def score(self, graph: Graph, edge: Edge) -> float:
        return self.values[graph.edge_index(edge)]

    def as_dict(self, graph: Graph) -> Dict[Edge, float]:
        return dict(zip(graph.edges, self.values))


@dataclass(frozen=True)
class DecisionRecord:
    step: int
    receiver: str
    sender: str
    edge_type: str
    degradation: float
    decision: str  # "pruned" | "kept"

    def as_row(self) -> dict:
        return {
            "step": self.step,
            "receiver": self.receiver,
            "sender": self.sender,
            "edge_type": self.edge_type,
            "degradation": self.degradation,
            "decision": self.decision,
        }


@dataclass
class DiscoveryResult:
    """발견된 circuit과 실행 기록"""
    mask: CircuitMask
    method: str
    threshold: float | None = None
    decisions: List[DecisionRecord] = field(default_factory=list)
    patched_forwards: int = 0
    visited_receivers: int = 0
    scores: AttributionScores | None = None


@dataclass(frozen=True)
class SweepPoint:
    method: str
    fraction: float
    edges: int
    accuracy: float
    seed: int

    def as_row(self) -> dict:
        return {
            "method": self.method,
            "fraction": self.fraction,
            "edges": self.edges,
            "accuracy": self.accuracy,
            "seed": self.seed,
        }
