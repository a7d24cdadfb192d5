"""Clean/corrupted run cache"""

from dataclasses import dataclass
from typing import Dict

import torch

from .graph import NodeId


@dataclass(frozen=True)
class RunCache:
    """sender별 clean/corrupted 기여분 r_u(x), r_u(x̃)와 양쪽 logits (batched, 읽기 전용)"""
    clean_tokens: torch.Tensor
    corrupted_tokens: torch.Tensor
    labels: torch.Tensor
    clean_contrib: Dict[NodeId, torch.Tensor]
    corrupted_contrib: Dict[NodeId, torch.Tensor]
    clean_logits: torch.Tensor
    corrupted_logits: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.clean_logits.shape[0]

    def reference_logits(self, reference: str) -> torch.Tensor:
        return self.clean_logits if reference == "clean" else self.corrupted_logits

