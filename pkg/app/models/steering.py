"""Steering direction 모델"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch

from .experiment import SteeringRegime
from .graph import NodeId


@dataclass(frozen=True)
class SteeringDirections:
    """sender별 direction field v_j (P, d)"""
    directions: Dict[NodeId, torch.Tensor]
    regime: SteeringRegime
    epsilon: float
    n_pairs: int
    attack_id: str = ""
    fingerprint: str = ""
    skipped_rows: Dict[str, int] = field(default_factory=dict)

    @property
    def senders(self) -> Tuple[NodeId, ...]:
        return tuple(self.directions)

    def __contains__(self, node: NodeId) -> bool:
        return node in self.directions

    def __getitem__(self, node: NodeId) -> torch.Tensor:
        return self.directions[node]

    def metadata(self) -> dict:
        return {
            "kind": "directions",
            "regime": str(self.regime),
            "epsilon": self.epsilon,
            "n_pairs": self.n_pairs,
            "attack_id": self.attack_id,
            "fingerprint": self.fingerprint,
        }
