"""실험 설정 모델 - YAML config 섹션과 서비스 파라미터"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..core.constants import (
    BINARY_CIRCUIT_THRESHOLD,
    CLASS_CIRCUIT_EXAMPLES,
    DEFAULT_GRID_SIZE,
    DEFAULT_REGIME,
    MAX_VISITED_NODES,
    STEERING_BATCH_SIZE,
    STEERING_BATCHES,
    STEERING_EPSILON,
)
from ..core.exceptions import CustomError
from ..utils.hashing import digest
from .graph import CircuitMask
from .runtime import ModelConfig

MetricKind = Literal["target_logit_diff", "kl_divergence"]


class MetricSpec(BaseModel):
    """Pruning criterion. target=None이면 예제별 label을 target으로 사용"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: MetricKind = "target_logit_diff"
    target: Optional[int] = Field(default=None, ge=0)
    reference: Literal["clean", "corrupted"] = "clean"

    @classmethod
    def from_flag(cls, flag: str, target: int | None = None) -> "MetricSpec":
        kinds = {"logitdiff": "target_logit_diff", "kl": "kl_divergence"}
        return cls(kind=kinds.get(flag, flag), target=target)


DISCOVERY_PRESETS = {
    "binary": {"threshold": BINARY_CIRCUIT_THRESHOLD, "metric": MetricSpec()},
}


class DiscoveryConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    threshold: float = Field(..., gt=0)
    metric: MetricSpec = MetricSpec()
    max_visited_nodes: int = Field(default=MAX_VISITED_NODES, ge=1)
    edge_order: Literal["ascending_attribution", "descending_attribution", "canonical"] = "ascending_attribution"
    seed: int = 0
    mode: Literal["live", "cached"] = "live"

    @classmethod
    def preset(cls, name: str, **overrides) -> "DiscoveryConfig":
        """이름 붙은 프로토콜 (binary: τ=4e-4, target logit diff)"""
        if name not in DISCOVERY_PRESETS:
            raise CustomError("USAGE_ERROR", "Unknown discovery preset {name!r}", name=name)
        return cls(**{**DISCOVERY_PRESETS[name], **overrides})


class SyntheticTaskSpec(BaseModel):
    """Planted-signal 데이터셋 정의. 입력 채널은 [object dims | text dims]로 나뉜다"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_classes: int = Field(default=4, ge=2)
    input_dim: int = Field(default=8, ge=2)
    object_dims: int = Field(default=4, ge=1)
    grid_size: int = Field(default=DEFAULT_GRID_SIZE, ge=1)
    pattern_amplitude: float = Field(default=4.0, gt=0)
    text_amplitude: float = Field(default=4.0, ge=0)
    background_scale: float = Field(default=1.0, gt=0)
    foreground_fraction: float = Field(default=0.25, gt=0, le=1)
    noise_scale: float = Field(default=0.1, ge=0)
    seed: int = 0
    class_patterns: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def check_channels(self):
        if self.object_dims > self.input_dim:
            raise ValueError("object_dims must not exceed input_dim")
        if self.class_patterns is not None:
            if len(self.class_patterns) != self.num_classes:
                raise ValueError("class_patterns must have one row per class")
            rows = [tuple(row) for row in self.class_patterns]
            if any(len(row) != self.input_dim for row in rows):
                raise ValueError("class_patterns rows must have input_dim entries")
            if len(set(rows)) != len(rows):
                raise ValueError("class patterns must be pairwise distinct")
        return self

    @property
    def patch_count(self) -> int:
        return self.grid_size * self.grid_size + 1

    def digest(self) -> str:
        return digest(self.model_dump(mode="json"))


class SteeringRegime(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    normalization: Literal["pre_normed", "post_normed"] = "pre_normed"
    aggregation: Literal["mean", "medoid"] = "mean"

    @classmethod
    def parse(cls, text: str) -> "SteeringRegime":
        normalization, _, aggregation = text.partition(":")
        return cls(normalization=normalization, aggregation=aggregation or "mean")

    def __str__(self) -> str:
        return f"{self.normalization}:{self.aggregation}"


class SteeringPolicy(BaseModel):
    """Circuit edge 위에서의 directional ablation 정책"""
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    circuit: CircuitMask
    alpha: float = Field(default=1.0, ge=0)
    max_receiver_layer: Optional[int] = None
    sender_global: bool = False


class RunManifest(BaseModel):
    """커맨드 실행 기록. digest는 wall-clock을 제외한 결정적 필드로만 계산"""
    command: str
    config_digest: str
    seeds: Dict[str, int] = {}
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    wall_clock_seconds: float = 0.0
    started_at: str = ""
    tool_version: str = ""

    def digest(self) -> str:
        return digest(self.model_dump(
            mode="json", include={"command", "config_digest", "seeds", "inputs", "tool_version"},
        ))


# ===== YAML config 섹션 =====

class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: Optional[ModelConfig] = None
    construction: Literal["planted", "random"] = "planted"
    seed: int = 0
    init_scale: float = Field(default=0.3, gt=0)
    signal_head: Tuple[int, int] = (0, 0)
    attack_head: Optional[Tuple[int, int]] = None
    nuisance_scale: float = Field(default=0.0, ge=0)
    output: str = "model.cfw"


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: SyntheticTaskSpec = SyntheticTaskSpec()
    kind: Literal["class", "typographic"] = "class"
    classes: Optional[List[int]] = None
    examples_per_class: int = Field(default=CLASS_CIRCUIT_EXAMPLES, ge=1)
    attack_target: int = Field(default=0, ge=0)
    placement: Literal["border", "scattered", "block"] = "border"
    attack_amplitude: Optional[float] = None
    scattered_count: int = Field(default=4, ge=1)
    block_size: int = Field(default=2, ge=1)
    output: str = "pairs"


class DiscoverySection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["vicd", "eap", "eapig", "random"] = "vicd"
    preset: Optional[Literal["binary"]] = None
    threshold: Optional[float] = Field(default=None, gt=0)
    class_thresholds: Dict[int, float] = Field(default_factory=dict)
    edges: Optional[int] = Field(default=None, ge=0)
    steps: Optional[int] = Field(default=None, ge=1)
    metric: Literal["logitdiff", "kl"] = "logitdiff"
    target: Optional[int] = Field(default=None, ge=0)
    max_visited: int = Field(default=MAX_VISITED_NODES, ge=1)
    mode: Literal["live", "cached"] = "live"
    seed: int = 0
    filter_correct: bool = True
    grid: List[float] = Field(default_factory=lambda: [round(0.05 * i, 2) for i in range(1, 21)])
    methods: List[Literal["vicd", "eap", "eapig", "random"]] = Field(
        default_factory=lambda: ["vicd", "eap", "eapig", "random"]
    )

    @field_validator("grid")
    @classmethod
    def check_grid(cls, v: List[float]) -> List[float]:
        if any(not 0 < f <= 1 for f in v):
            raise ValueError("grid fractions must lie in (0, 1]")
        return v

    @field_validator("class_thresholds")
    @classmethod
    def check_class_thresholds(cls, v: Dict[int, float]) -> Dict[int, float]:
        if any(label < 0 or threshold <= 0 for label, threshold in v.items()):
            raise ValueError("class thresholds need a label >= 0 and a threshold > 0")
        return v


class SteeringSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    regime: str = DEFAULT_REGIME
    alpha_grid: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0])
    layer_grid: Optional[List[int]] = None
    epsilon: float = Field(default=STEERING_EPSILON, gt=0)
    batches: int = Field(default=STEERING_BATCHES, ge=1)
    batch_size: int = Field(default=STEERING_BATCH_SIZE, ge=1)
    sender_global: bool = False
    target_reduction: float = Field(default=0.9, gt=0, le=1)

    @field_validator("regime")
    @classmethod
    def check_regime(cls, v: str) -> str:
        SteeringRegime.parse(v)
        return v


class AnalysisSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    universe: Literal["union", "all"] = "union"


class ExperimentConfig(BaseModel):
    """선언적 실험 config (섹션: model, data, discovery, steering, analysis)"""
    model_config = ConfigDict(extra="forbid")

    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    discovery: DiscoverySection = DiscoverySection()
    steering: SteeringSection = SteeringSection()
    analysis: AnalysisSection = AnalysisSection()

    def digest(self) -> str:
        return digest(self.model_dump(mode="json"))
