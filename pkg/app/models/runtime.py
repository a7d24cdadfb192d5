"""Vision transformer 설정, 가중치, forward trace 모델"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator
import torch

from ..core.exceptions import CustomError
from ..utils.hashing import digest
from .graph import NodeId


class ModelConfig(BaseModel):
    """Pre-norm ViT 하이퍼파라미터"""
    model_config = ConfigDict(frozen=True, extra="forbid", protected_namespaces=())

    layers: int = Field(..., ge=1, description="L")
    heads_per_layer: int = Field(..., ge=1, description="H")
    model_dim: int = Field(..., ge=1, description="d")
    head_dim: int = Field(..., ge=1)
    mlp_hidden_dim: int = Field(..., ge=1)
    patch_count: int = Field(..., ge=2, description="P, class token 포함")
    num_classes: int = Field(..., ge=1, description="C")
    input_dim: int = Field(..., ge=1, description="raw patch vector 폭 d_in")
    head_mode: Literal["classifier", "contrastive"] = "classifier"
    embedding_dim: int = Field(default=0, ge=0, description="contrastive embedding 폭 e")
    layer_norm_epsilon: float = Field(default=1e-5, gt=0)
    normalization: Literal["layernorm", "none"] = "layernorm"
    activation: Literal["gelu", "identity"] = "gelu"
    final_norm: bool = True

    @model_validator(mode="after")
    def check_head(self):
        if self.head_mode == "contrastive" and self.embedding_dim < 1:
            raise ValueError("contrastive head requires embedding_dim >= 1")
        return self

    def digest(self) -> str:
        return digest(self.model_dump(mode="json"))

    @property
    def is_linear(self) -> bool:
        """LayerNorm/GELU가 없는 설정 (query/key가 0이면 완전 선형)"""
        return (
            self.normalization == "none"
            and self.activation == "identity"
            and not self.final_norm
        )


def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """config가 요구하는 tensor 이름 -> shape"""
    d, H, dh, m = config.model_dim, config.heads_per_layer, config.head_dim, config.mlp_hidden_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.W": (config.input_dim, d),
        "embed.b": (d,),
        "embed.pos": (config.patch_count, d),
    }
    for layer in range(config.layers):
        prefix = f"blocks.{layer}"
        if config.normalization == "layernorm":
            for ln in ("ln1", "ln2"):
                shapes[f"{prefix}.{ln}.w"] = (d,)
                shapes[f"{prefix}.{ln}.b"] = (d,)
        for proj in ("Q", "K", "V"):
            shapes[f"{prefix}.attn.W_{proj}"] = (H, d, dh)
            shapes[f"{prefix}.attn.b_{proj}"] = (H, dh)
        shapes[f"{prefix}.attn.W_O"] = (H, dh, d)
        shapes[f"{prefix}.mlp.W_in"] = (d, m)
        shapes[f"{prefix}.mlp.b_in"] = (m,)
        shapes[f"{prefix}.mlp.W_out"] = (m, d)
        shapes[f"{prefix}.mlp.b_out"] = (d,)
    if config.final_norm:
        shapes["ln_f.w"] = (d,)
        shapes["ln_f.b"] = (d,)
    if config.head_mode == "classifier":
        shapes["head.W"] = (config.num_classes, d)
        shapes["head.b"] = (config.num_classes,)
    else:
        shapes["head.proj"] = (d, config.embedding_dim)
        shapes["head.class_emb"] = (config.num_classes, config.embedding_dim)
    return shapes


@dataclass(frozen=True)
class WeightSet:
    """ModelConfig에 대응하는 float32 파라미터 묶음 (로드 후 불변)"""
    config: ModelConfig
    tensors: Dict[str, torch.Tensor]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def validate(self, strict: bool = True) -> "WeightSet":
        """shape/유한성 검증. strict면 모르는 tensor도 거부"""
        shapes = expected_shapes(self.config)
        if strict:
            unknown = sorted(set(self.tensors) - set(shapes))
            if unknown:
                raise CustomError("FORMAT_ERROR", "Unknown tensor in weight set: {name}", name=unknown[0])
        for name, shape in shapes.items():
            if name not in self.tensors:
                raise CustomError("CONFIG_ERROR", "Missing tensor {name}", name=name)
            tensor = self.tensors[name]
            if tuple(tensor.shape) != shape:
                raise CustomError(
                    "CONFIG_ERROR", "Tensor {name} has shape {got}, expected {want}",
                    name=name, got=tuple(tensor.shape), want=shape,
                )
            if not torch.isfinite(tensor).all():
                raise CustomError("NUMERIC_ERROR", "Tensor {name} has non-finite entries", name=name)
        return self


@dataclass
class ForwardTrace:
    """한 번의 forward에서 기록한 sender 기여분과 residual 상태"""
    sender_contribution: Dict[NodeId, torch.Tensor]
    receiver_input: Dict[NodeId, torch.Tensor]
    residual_snapshot: List[torch.Tensor]
    logits: torch.Tensor
    embedding: torch.Tensor | None = None
    metadata: Dict[str, int] = field(default_factory=dict)
