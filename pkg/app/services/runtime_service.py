"""Hookable pre-norm ViT runtime

모든 attention head / MLP의 residual 기여분을 sender 단위로 노출한다. 각 receiver의 입력은
incoming edge 기여분의 합으로 따로 만들어지므로, patching/steering은 receiver 입력 조립
함수(assembler)만 바꿔 끼우면 된다.
"""

import math
from typing import Callable, Dict, List, Optional, Sequence

from einops import einsum
import torch
import torch.nn.functional as F

from ..core.exceptions import CustomError
from ..models.experiment import MetricSpec
from ..models.graph import LOGITS, Graph, NodeId
from ..models.patching import RunCache
from ..models.runtime import ForwardTrace, ModelConfig, WeightSet, expected_shapes
from .graph_service import build_graph
from .metric_service import batch_metric

# P×d (또는 B×P×d) residual 기여분
ActivationField = torch.Tensor

COMPUTE_DTYPE = torch.float64

# (receiver, incoming edge indices, 각 edge의 sender index, sender별 live 기여분) -> receiver 입력
Assembler = Callable[[NodeId, Sequence[int], Sequence[int], List[Optional[torch.Tensor]]], torch.Tensor]


def _check_finite(tensor: torch.Tensor, component: str):
    if not torch.isfinite(tensor).all():
        raise CustomError("NUMERIC_ERROR", "Non-finite activation in {component}", component=component)


class HookedViT:
    """WeightSet 위에서 동작하는 읽기 전용 runtime (여러 worker가 공유 가능)"""

    def __init__(self, weights: WeightSet):
        self.weights = weights.validate()
        self.config: ModelConfig = weights.config
        self.graph: Graph = build_graph(self.config)
        self._w = {name: t.to(COMPUTE_DTYPE) for name, t in weights.tensors.items()}
        self._incoming_senders = {
            receiver: tuple(self.graph.sender_index(self.graph.edges[e].sender)
                            for e in self.graph.incoming(receiver))
            for receiver in self.graph.receivers
        }

    # ===== components =====

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """raw patch 행렬 (B,P,d_in) -> 임베딩 (B,P,d). graph 바깥의 affine map"""
        cfg = self.config
        if tokens.dim() != 3 or tuple(tokens.shape[1:]) != (cfg.patch_count, cfg.input_dim):
            raise CustomError(
                "CONFIG_ERROR", "Token batch shape {got} does not match (B, {p}, {d})",
                got=tuple(tokens.shape), p=cfg.patch_count, d=cfg.input_dim,
            )
        tokens = tokens.to(COMPUTE_DTYPE)
        return tokens @ self._w["embed.W"] + self._w["embed.b"] + self._w["embed.pos"]

    def _norm(self, x: torch.Tensor, prefix: str) -> torch.Tensor:
        if self.config.normalization == "none":
            return x
        return F.layer_norm(
            x, (self.config.model_dim,), self._w[f"{prefix}.w"], self._w[f"{prefix}.b"],
            self.config.layer_norm_epsilon,
        )

    def attention(self, layer: int, x: torch.Tensor) -> torch.Tensor:
        """attn_in 입력 (B,P,d) -> head별 기여분 (B,H,P,d)"""
        p = f"blocks.{layer}"
        w = self._w
        normed = self._norm(x, f"{p}.ln1")
        q = einsum(normed, w[f"{p}.attn.W_Q"], "b p d, h d e -> b h p e") + w[f"{p}.attn.b_Q"][:, None, :]
        k = einsum(normed, w[f"{p}.attn.W_K"], "b p d, h d e -> b h p e") + w[f"{p}.attn.b_K"][:, None, :]
        v = einsum(normed, w[f"{p}.attn.W_V"], "b p d, h d e -> b h p e") + w[f"{p}.attn.b_V"][:, None, :]
        scores = einsum(q, k, "b h p e, b h s e -> b h p s") / math.sqrt(self.config.head_dim)
        pattern = torch.softmax(scores, dim=-1)
        z = einsum(pattern, v, "b h p s, b h s e -> b h p e")
        return einsum(z, w[f"{p}.attn.W_O"], "b h p e, h e d -> b h p d")

    def mlp(self, layer: int, x: torch.Tensor) -> torch.Tensor:
        p = f"blocks.{layer}"
        w = self._w
        hidden = self._norm(x, f"{p}.ln2") @ w[f"{p}.mlp.W_in"] + w[f"{p}.mlp.b_in"]
        if self.config.activation == "gelu":
            hidden = F.gelu(hidden)
        return hidden @ w[f"{p}.mlp.W_out"] + w[f"{p}.mlp.b_out"]

    def image_embedding(self, final_residual: torch.Tensor) -> torch.Tensor:
        """class token 행 -> (final norm) -> contrastive embedding"""
        cls = final_residual[..., 0, :]
        if self.config.final_norm:
            cls = F.layer_norm(cls, (self.config.model_dim,), self._w["ln_f.w"], self._w["ln_f.b"],
                               self.config.layer_norm_epsilon)
        if self.config.head_mode != "contrastive":
            return cls
        return cls @ self._w["head.proj"]

    def logits_from_head(self, final_residual: torch.Tensor) -> torch.Tensor:
        if self.config.head_mode == "classifier":
            cls = self.image_embedding(final_residual)
            return cls @ self._w["head.W"].T + self._w["head.b"]
        if "head.class_emb" not in self._w:
            raise CustomError("CONFIG_ERROR", "Contrastive head requires a class-embedding matrix")
        return self.image_embedding(final_residual) @ self._w["head.class_emb"].T

    # ===== engine =====

    def default_assembler(self) -> Assembler:
        def assemble(receiver, edges, senders, live):
            return torch.stack([live[s] for s in senders]).sum(0)
        return assemble

    def execute(
        self,
        embedded: torch.Tensor,
        assemble: Optional[Assembler] = None,
        input_offsets: Optional[Dict[NodeId, torch.Tensor]] = None,
        return_embedding: bool = False,
    ) -> ForwardTrace:
        """receiver를 위상 순서로 돌면서 assembler가 만든 입력으로 각 component를 실행"""
        assemble = assemble or self.default_assembler()
        input_offsets = input_offsets or {}
        graph = self.graph
        live: List[Optional[torch.Tensor]] = [None] * len(graph.senders)
        live[0] = embedded
        receiver_input: Dict[NodeId, torch.Tensor] = {}

        def receive(receiver: NodeId) -> torch.Tensor:
            x = assemble(receiver, graph.incoming(receiver), self._incoming_senders[receiver], live)
            if receiver in input_offsets:
                x = x + input_offsets[receiver]
            receiver_input[receiver] = x
            return x

        snapshots = [embedded]
        for layer in range(self.config.layers):
            heads = self.attention(layer, receive(NodeId("attn_in", layer)))
            _check_finite(heads, f"attention layer {layer}")
            for head in range(self.config.heads_per_layer):
                live[graph.sender_index(NodeId("attn_head", layer, head))] = heads[:, head]

            mlp_node = NodeId("mlp", layer)
            out = self.mlp(layer, receive(mlp_node))
            _check_finite(out, mlp_node.name)
            live[graph.sender_index(mlp_node)] = out
            snapshots.append(snapshots[-1] + heads.sum(1) + out)

        final = receive(LOGITS)
        logits = self.logits_from_head(final)
        _check_finite(logits, "logits")

        return ForwardTrace(
            sender_contribution={node: live[i] for i, node in enumerate(graph.senders)},
            receiver_input=receiver_input,
            residual_snapshot=snapshots,
            logits=logits,
            embedding=self.image_embedding(final) if return_embedding else None,
        )


# ===== 공개 연산 =====

def _as_batch(tokens: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if tokens.dim() == 2:
        return tokens.unsqueeze(0), True
    return tokens, False


def forward_with_trace(model: HookedViT, tokens: torch.Tensor, return_embedding: bool = False) -> ForwardTrace:
    """raw tokens ((P,d_in) 또는 (B,P,d_in)) -> trace. 입력이 unbatched면 결과도 unbatched"""
    batch, squeeze = _as_batch(tokens)
    with torch.no_grad():
        trace = model.execute(model.embed(batch), return_embedding=return_embedding)
    if not squeeze:
        return trace
    return ForwardTrace(
        sender_contribution={k: v[0] for k, v in trace.sender_contribution.items()},
        receiver_input={k: v[0] for k, v in trace.receiver_input.items()},
        residual_snapshot=[r[0] for r in trace.residual_snapshot],
        logits=trace.logits[0],
        embedding=None if trace.embedding is None else trace.embedding[0],
    )


def logits_from_head(model: HookedViT, final_residual: torch.Tensor) -> torch.Tensor:
    return model.logits_from_head(final_residual.to(COMPUTE_DTYPE))


def receiver_input_gradients(
    model: HookedViT,
    tokens: torch.Tensor,
    cache: RunCache,
    metric: MetricSpec,
) -> Dict[NodeId, torch.Tensor]:
    """∂(batch-mean metric)/∂(receiver input), receiver마다 (B,P,d)

    각 receiver 입력은 별도 tensor라서 gradient는 그 receiver 경로만의 편미분이다.
    LayerNorm 통계량도 미분한다.
    """
    batch, _ = _as_batch(tokens)
    with torch.enable_grad():
        embedded = model.embed(batch).detach().requires_grad_(True)
        trace = model.execute(embedded)
        value = batch_metric(metric, trace.logits, cache.reference_logits(metric.reference), cache.labels)
        receivers = list(model.graph.receivers)
        grads = torch.autograd.grad(
            value, [trace.receiver_input[r] for r in receivers], allow_unused=True,
        )
    result = {}
    for receiver, grad in zip(receivers, grads):
        grad = torch.zeros_like(trace.receiver_input[receiver]) if grad is None else grad.detach()
        _check_finite(grad, f"gradient at {receiver.name}")
        result[receiver] = grad
    return result


def metric_with_offsets(
    model: HookedViT,
    tokens: torch.Tensor,
    cache: RunCache,
    metric: MetricSpec,
    offsets: Dict[NodeId, torch.Tensor],
) -> float:
    """receiver 입력에 offset을 더한 forward의 metric (finite-difference 검증용)"""
    batch, _ = _as_batch(tokens)
    with torch.no_grad():
        trace = model.execute(model.embed(batch), input_offsets=offsets)
    return float(batch_metric(metric, trace.logits, cache.reference_logits(metric.reference), cache.labels))


# ===== 가중치 생성 =====

def random_weights(
    config: ModelConfig,
    seed: int = 0,
    scale: float = 0.3,
    zero_query_key: bool = False,
) -> WeightSet:
    """작은 random 모델. zero_query_key면 attention pattern이 입력과 무관(균등)해진다"""
    generator = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".w") and ("ln" in name):
            tensor = 1.0 + 0.1 * torch.randn(shape, generator=generator)
        else:
            tensor = scale * torch.randn(shape, generator=generator)
        if zero_query_key and (".attn.W_Q" in name or ".attn.W_K" in name
                               or ".attn.b_Q" in name or ".attn.b_K" in name):
            tensor = torch.zeros(shape)
        tensors[name] = tensor.to(torch.float32)
    return WeightSet(config, tensors).validate()


def zero_weights(config: ModelConfig) -> WeightSet:
    return WeightSet(config, {
        name: torch.zeros(shape, dtype=torch.float32) for name, shape in expected_shapes(config).items()
    })


def load_model(weights: WeightSet) -> HookedViT:
    return HookedViT(weights)
