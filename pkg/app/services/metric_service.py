"""Pruning criteria: target logit difference, KL divergence"""

import torch

from ..core.exceptions import CustomError
from ..models.experiment import MetricSpec


def targets_for(spec: MetricSpec, labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """spec.target이 없으면 예제별 label을 target으로 사용"""
    if spec.target is None:
        return labels.long()
    if spec.target >= num_classes:
        raise CustomError("ARGUMENT_ERROR", "Metric target {t} out of range for {c} classes",
                          t=spec.target, c=num_classes)
    return torch.full_like(labels.long(), spec.target)


def per_example_metric(
    spec: MetricSpec,
    logits: torch.Tensor,
    reference_logits: torch.Tensor,
    labels: torch.Tensor,
) -> torch.Tensor:
    """예제별 metric 값 (B,)

    target_logit_diff: reference target logit - patched target logit
    kl_divergence:     KL(softmax(reference) || softmax(patched))
    """
    if spec.kind == "target_logit_diff":
        targets = targets_for(spec, labels, logits.shape[-1]).unsqueeze(-1)
        return (reference_logits.gather(-1, targets) - logits.gather(-1, targets)).squeeze(-1)

    log_p = torch.log_softmax(reference_logits, dim=-1)
    log_q = torch.log_softmax(logits, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1)


def batch_metric(spec: MetricSpec, logits, reference_logits, labels) -> torch.Tensor:
    return per_example_metric(spec, logits, reference_logits, labels).mean()
