"""Activation patching: clean/corrupted cache와 circuit 제한 forward"""

from pathlib import Path
from typing import Literal, Sequence

import torch

from ..core.exceptions import CustomError
from ..core.monitor import track_patched_forward
from ..models.data import PairedExample, stack_pairs
from ..models.experiment import MetricSpec
from ..models.graph import INPUT, LOGITS, CircuitMask
from ..models.patching import RunCache
from ..repositories.archive_repository import write_container
from .graph_service import mask_full
from .metric_service import per_example_metric
from .runtime_service import HookedViT

PatchMode = Literal["live", "cached"]


def cache_runs(
    model: HookedViT,
    clean: torch.Tensor,
    corrupted: torch.Tensor,
    labels: torch.Tensor | None = None,
) -> RunCache:
    """clean/corrupted 두 run의 sender 기여분과 logits를 기록"""
    if clean.shape != corrupted.shape:
        raise CustomError("CONFIG_ERROR", "Clean {a} and corrupted {b} inputs differ in shape",
                          a=tuple(clean.shape), b=tuple(corrupted.shape))
    if labels is None:
        labels = torch.zeros(clean.shape[0], dtype=torch.long)
    with torch.no_grad():
        clean_trace = model.execute(model.embed(clean))
        corrupted_trace = model.execute(model.embed(corrupted))
    return RunCache(
        clean_tokens=clean,
        corrupted_tokens=corrupted,
        labels=labels.long(),
        clean_contrib=clean_trace.sender_contribution,
        corrupted_contrib=corrupted_trace.sender_contribution,
        clean_logits=clean_trace.logits,
        corrupted_logits=corrupted_trace.logits,
    )


def cache_pairs(model: HookedViT, pairs: Sequence[PairedExample]) -> RunCache:
    if not pairs:
        raise CustomError("ARGUMENT_ERROR", "Cannot cache an empty set of pairs")
    clean, corrupted, labels = stack_pairs(pairs)
    return cache_runs(model, clean, corrupted, labels)


def patched_forward(
    model: HookedViT,
    cache: RunCache,
    mask: CircuitMask,
    mode: PatchMode = "live",
) -> torch.Tensor:
    """circuit edge는 clean 계산, 나머지 edge는 corrupted cache로 대체한 logits (B,C)

    live:   receiver 입력 = Σ_u [i_e · (이번 patched pass의 u 출력) + (1-i_e) · r_u(x̃)]
    cached: i_e=1 edge는 r_u(x)를 그대로 사용, 재계산 없음
    """
    graph = model.graph
    mask.check(graph)
    keep = mask.indicators
    corrupted = [cache.corrupted_contrib[node] for node in graph.senders]
    track_patched_forward(mode)

    with torch.no_grad():
        if mode == "cached":
            clean = [cache.clean_contrib[node] for node in graph.senders]
            terms = [
                clean[graph.sender_index(graph.edges[e].sender)] if keep[e]
                else corrupted[graph.sender_index(graph.edges[e].sender)]
                for e in graph.incoming(LOGITS)
            ]
            return model.logits_from_head(torch.stack(terms).sum(0))

        def assemble(receiver, edges, senders, live):
            return torch.stack([live[s] if keep[e] else corrupted[s] for e, s in zip(edges, senders)]).sum(0)

        return model.execute(cache.clean_contrib[INPUT], assemble).logits


def evaluate_metric(spec: MetricSpec, patched_logits: torch.Tensor, cache: RunCache) -> float:
    """예제별 metric의 batch 평균"""
    if not torch.isfinite(patched_logits).all():
        raise CustomError("NUMERIC_ERROR", "Patched logits are not finite")
    values = per_example_metric(spec, patched_logits, cache.reference_logits(spec.reference), cache.labels)
    return float(values.mean())


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    if logits.shape[0] == 0:
        raise CustomError("ARGUMENT_ERROR", "Accuracy over an empty batch")
    return float((logits.argmax(-1) == labels).double().mean())


def circuit_accuracy(model: HookedViT, cache: RunCache, mask: CircuitMask, mode: PatchMode = "live") -> float:
    return accuracy(patched_forward(model, cache, mask, mode), cache.labels)


def faithfulness_gap(
    model: HookedViT,
    mask: CircuitMask,
    eval_cache: RunCache,
    mode: PatchMode = "live",
) -> float:
    """M_T(full) - M_T(mask), M_T = patched forward의 accuracy.

    단조성(gap(mask) >= gap(superset))은 일반적으로 성립하지 않으므로 보장하지 않는다.
    """
    if eval_cache.batch_size == 0:
        raise CustomError("ARGUMENT_ERROR", "Faithfulness needs a non-empty evaluation set")
    full = circuit_accuracy(model, eval_cache, mask_full(model.graph), mode)
    return full - circuit_accuracy(model, eval_cache, mask, mode)


def faithfulness_report(model: HookedViT, mask: CircuitMask, eval_cache: RunCache) -> dict:
    graph = model.graph
    mask.check(graph)
    acc = circuit_accuracy(model, eval_cache, mask)
    full = circuit_accuracy(model, eval_cache, mask_full(graph))
    return {
        "edges": mask.size,
        "fraction": mask.size / len(graph),
        "accuracy": acc,
        "full_accuracy": full,
        "gap": full - acc,
    }


def dump_cache(cache: RunCache, path: str | Path) -> Path:
    """디버깅용: cache를 archive container로 저장"""
    tensors = {"clean.logits": cache.clean_logits, "corrupted.logits": cache.corrupted_logits,
               "labels": cache.labels.double()}
    for node, value in cache.clean_contrib.items():
        tensors[f"clean/{node.name}"] = value
    for node, value in cache.corrupted_contrib.items():
        tensors[f"corrupted/{node.name}"] = value
    return write_container(path, tensors, {"kind": "run_cache", "batch": cache.batch_size})
