"""Paired clean/corrupted 예제 모델"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch


@dataclass(frozen=True)
class PairedExample:
    """clean/corrupted raw patch 행렬 (P, d_in), 0번 행은 class token 자리"""
    id: str
    clean: torch.Tensor
    corrupted: torch.Tensor
    label: int
    foreground: torch.Tensor
    attack_target: Optional[int] = None


def stack_pairs(pairs: Sequence[PairedExample]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(clean (B,P,d_in), corrupted (B,P,d_in), labels (B,))"""
    clean = torch.stack([p.clean for p in pairs])
    corrupted = torch.stack([p.corrupted for p in pairs])
    labels = torch.tensor([p.label for p in pairs], dtype=torch.long)
    return clean, corrupted, labels


def attack_targets(pairs: Sequence[PairedExample]) -> torch.Tensor:
    return torch.tensor([-1 if p.attack_target is None else p.attack_target for p in pairs], dtype=torch.long)


def split_by_label(pairs: Sequence[PairedExample]) -> dict[int, List[PairedExample]]:
    groups: dict[int, List[PairedExample]] = {}
    for pair in pairs:
        groups.setdefault(pair.label, []).append(pair)
    return groups
