"""Circuit 구조 분석용 데이터 모델"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel

from ..core.exceptions import CustomError
from .graph import CircuitMask

StabilityCategory = Literal["stable", "borderline", "unstable"]


@dataclass(frozen=True)
class CircuitEnsemble:
    """같은 graph 위의 circuit 묶음과 각 circuit의 출처 (class, seed, batch size, threshold)"""
    masks: List[CircuitMask]
    provenance: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.masks:
            raise CustomError("ARGUMENT_ERROR", "A circuit ensemble needs at least one mask")
        fingerprints = {mask.fingerprint for mask in self.masks}
        if len(fingerprints) != 1:
            raise CustomError("ARTIFACT_MISMATCH", "Ensemble mixes circuits from {n} different graphs",
                              n=len(fingerprints))

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def fingerprint(self) -> str:
        return self.masks[0].fingerprint


class EdgeStability(BaseModel):
    """edge 하나의 inclusion frequency와 구간"""
    sender: str
    receiver: str
    edge_type: str
    frequency: float
    category: StabilityCategory


class EnsembleReport(BaseModel):
    """ensemble 요약 리포트"""
    label: str
    circuits: int
    mean_pairwise_jaccard: Optional[float]
    std_pairwise_jaccard: Optional[float]
    size_min: int
    size_max: int
    size_mean: float
    universe: Literal["union", "all"]
    stability_histogram: Dict[str, Dict[str, int]]
    core_edges: List[List[str]]
    core_fraction: Dict[str, float]
