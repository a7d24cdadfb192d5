"""Synthetic planted-signal data harness와 hand-constructed planted model

입력 채널은 [object dims | text dims]. 클래스 패턴은 object dims에, typographic overlay는
text dims에 놓인다. 0번 patch 행은 class token 자리라 항상 0이다.
"""

from dataclasses import dataclass
from typing import Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import RidgeClassifier
from sklearn.model_selection import train_test_split
import torch

from ..core.exceptions import CustomError
from ..core.logger import logger
from ..models.data import PairedExample, stack_pairs
from ..models.experiment import SyntheticTaskSpec
from ..models.graph import INPUT, LOGITS, CircuitMask, Edge, Graph, NodeId
from ..models.runtime import ModelConfig, WeightSet
from .graph_service import mask_from_edges
from .runtime_service import HookedViT, zero_weights

Placement = Literal["border", "scattered", "block"]
HeadRef = Tuple[int, int]


# ===== 패턴 =====

def class_patterns(spec: SyntheticTaskSpec) -> np.ndarray:
    """(C, d_in). object_dims >= C면 object 부분공간의 정규직교 패턴 × amplitude"""
    if spec.class_patterns is not None:
        return np.asarray(spec.class_patterns, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    patterns = np.zeros((spec.num_classes, spec.input_dim))
    gaussian = rng.normal(size=(spec.object_dims, spec.num_classes))
    if spec.object_dims >= spec.num_classes:
        basis, _ = np.linalg.qr(gaussian)
        patterns[:, : spec.object_dims] = basis.T
    else:
        patterns[:, : spec.object_dims] = (gaussian / np.linalg.norm(gaussian, axis=0)).T
    return spec.pattern_amplitude * patterns


def text_direction(spec: SyntheticTaskSpec) -> np.ndarray:
    """text dims 위의 단위 벡터 (d_in,)"""
    text_dims = spec.input_dim - spec.object_dims
    if text_dims < 1:
        raise CustomError("ARGUMENT_ERROR", "Task has no text channel (object_dims == input_dim)")
    direction = np.zeros(spec.input_dim)
    direction[spec.object_dims:] = 1.0 / np.sqrt(text_dims)
    return direction


# ===== geometry =====

def border_patches(grid_size: int) -> List[int]:
    rows = []
    for position in range(grid_size * grid_size):
        r, c = divmod(position, grid_size)
        if r in (0, grid_size - 1) or c in (0, grid_size - 1):
            rows.append(position + 1)
    return rows


def _placement_region(
    spec: SyntheticTaskSpec,
    placement: Placement,
    rng: np.random.Generator,
    scattered_count: int,
    block_size: int,
) -> List[int]:
    G = spec.grid_size
    if placement == "border":
        return border_patches(G)
    if placement == "scattered":
        if scattered_count > G * G:
            raise CustomError("ARGUMENT_ERROR", "scattered_count {n} exceeds the {g}x{g} grid",
                              n=scattered_count, g=G)
        return sorted(int(p) + 1 for p in rng.choice(G * G, size=scattered_count, replace=False))
    if block_size > G:
        raise CustomError("ARGUMENT_ERROR", "block_size {b} exceeds the {g}x{g} grid", b=block_size, g=G)
    top, left = (int(v) for v in rng.integers(0, G - block_size + 1, size=2))
    return [(top + r) * G + (left + c) + 1 for r in range(block_size) for c in range(block_size)]


# ===== generation =====

def _to_tensor(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))


def generate_class_pairs(spec: SyntheticTaskSpec, cls: int, n: int) -> List[PairedExample]:
    """clean: background 위 foreground patch에 class 패턴, corrupted: foreground를 background에서 재추출"""
    if not 0 <= cls < spec.num_classes:
        raise CustomError("ARGUMENT_ERROR", "Class {c} outside [0, {n})", c=cls, n=spec.num_classes)
    if n < 1:
        raise CustomError("ARGUMENT_ERROR", "Need at least one example, got {n}", n=n)
    patterns = class_patterns(spec)
    cells = spec.grid_size * spec.grid_size
    fg_count = max(1, int(round(spec.foreground_fraction * cells)))

    pairs = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, cls, i])
        background = rng.normal(0.0, spec.background_scale, size=(spec.patch_count, spec.input_dim))
        background[0] = 0.0
        foreground = np.sort(rng.choice(cells, size=fg_count, replace=False)) + 1

        clean = background.copy()
        clean[foreground] = patterns[cls] + spec.noise_scale * rng.normal(size=(fg_count, spec.input_dim))
        corrupted = background.copy()
        corrupted[foreground] = rng.normal(0.0, spec.background_scale, size=(fg_count, spec.input_dim))

        mask = np.zeros(spec.patch_count, dtype=bool)
        mask[foreground] = True
        pairs.append(PairedExample(
            id=f"c{cls}-{i:05d}",
            clean=_to_tensor(clean),
            corrupted=_to_tensor(corrupted),
            label=cls,
            foreground=torch.from_numpy(mask),
        ))
    return pairs


def generate_typographic_pairs(
    spec: SyntheticTaskSpec,
    cls: int,
    n: int,
    attack_target: int,
    placement: Placement = "border",
    amplitude: Optional[float] = None,
    scattered_count: int = 4,
    block_size: int = 2,
) -> List[PairedExample]:
    """attacked(=clean 자리) / original(=corrupted 자리) 쌍. overlay는 text 패턴의 덧셈

    overlay 영역이 foreground 전체를 덮으면 가장 앞의 foreground patch 하나는 비워 둔다.
    비울 수 없으면(남는 overlay가 없으면) argument error.
    """
    if not 0 <= attack_target < spec.num_classes:
        raise CustomError("ARGUMENT_ERROR", "Attack target {t} outside [0, {n})", t=attack_target, n=spec.num_classes)
    amplitude = spec.text_amplitude if amplitude is None else amplitude
    overlay = amplitude * text_direction(spec)
    if amplitude > 0 and any(np.allclose(overlay, p) for p in class_patterns(spec)):
        raise CustomError("ARGUMENT_ERROR", "Attack pattern coincides with a class pattern")

    pairs = []
    for i, base in enumerate(generate_class_pairs(spec, cls, n)):
        rng = np.random.default_rng([spec.seed, cls, i, 1])
        region = set(_placement_region(spec, placement, rng, scattered_count, block_size))
        foreground = set(int(p) for p in torch.nonzero(base.foreground).flatten().tolist())
        if foreground <= region:
            region.discard(min(foreground))
        if not region:
            raise CustomError(
                "ARGUMENT_ERROR", "Placement {placement} cannot avoid fully occluding the object",
                placement=placement,
            )
        original = base.clean.numpy().astype(np.float64)
        attacked = original.copy()
        if amplitude != 0:
            attacked[sorted(region)] += overlay
        pairs.append(PairedExample(
            id=f"t{cls}-{i:05d}",
            clean=_to_tensor(attacked),
            corrupted=base.clean.clone(),
            label=cls,
            foreground=base.foreground,
            attack_target=attack_target,
        ))
    return pairs


def generate_suite(
    spec: SyntheticTaskSpec,
    classes: Iterable[int],
    n: int,
    kind: Literal["class", "typographic"] = "class",
    **typographic,
) -> List[PairedExample]:
    pairs: List[PairedExample] = []
    for cls in classes:
        if kind == "class":
            pairs.extend(generate_class_pairs(spec, cls, n))
        else:
            pairs.extend(generate_typographic_pairs(spec, cls, n, **typographic))
    return pairs


def filter_correct(model: HookedViT, pairs: Sequence[PairedExample]) -> List[PairedExample]:
    """clean 입력이 top-1 정답인 예제만 남긴다"""
    if not pairs:
        logger.warning("filter_correct called with no examples")
        return []
    clean, _, labels = stack_pairs(pairs)
    with torch.no_grad():
        predictions = model.execute(model.embed(clean)).logits.argmax(-1)
    kept = [pair for pair, ok in zip(pairs, (predictions == labels).tolist()) if ok]
    if not kept:
        logger.warning("No example is classified correctly by the base model", examples=len(pairs))
    else:
        logger.info(f"filter_correct kept {len(kept)}/{len(pairs)} examples")
    return kept


# ===== class signal certification =====

@dataclass(frozen=True)
class SignalReport:
    clean_accuracy: float
    corrupted_accuracy: float
    chance: float

    @property
    def certified(self) -> bool:
        return self.clean_accuracy >= 0.95 and abs(self.corrupted_accuracy - self.chance) <= 0.10

    def as_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "corrupted_accuracy": self.corrupted_accuracy,
            "chance": self.chance,
            "certified": self.certified,
        }


def _readout_accuracy(features: np.ndarray, labels: np.ndarray, seed: int) -> float:
    x_train, x_test, y_train, y_test = train_test_split(
        features, labels, test_size=0.5, random_state=seed, stratify=labels,
    )
    readout = RidgeClassifier(alpha=1.0).fit(x_train, y_train)
    return float(readout.score(x_test, y_test))


def certify_class_signal(pairs: Sequence[PairedExample], seed: int = 0) -> SignalReport:
    """patch 합 feature 위의 least-squares 분류기로 class 신호의 유무를 확인"""
    clean, corrupted, labels = stack_pairs(pairs)
    y = labels.numpy()
    classes = np.unique(y)
    if len(classes) < 2:
        raise CustomError("ARGUMENT_ERROR", "Class signal certification needs at least two classes")
    report = SignalReport(
        clean_accuracy=_readout_accuracy(clean.sum(1).double().numpy(), y, seed),
        corrupted_accuracy=_readout_accuracy(corrupted.sum(1).double().numpy(), y, seed),
        chance=1.0 / len(classes),
    )
    if not report.certified:
        logger.warning("Synthetic suite failed class signal certification", **report.as_dict())
    return report


# ===== planted model =====

def planted_config(
    spec: SyntheticTaskSpec,
    layers: int = 1,
    heads_per_layer: int = 4,
    head_mode: Literal["classifier", "contrastive"] = "classifier",
) -> ModelConfig:
    """planted 구성이 요구하는 최소 차원: d = d_in + C (readout dims), d_head = C"""
    C = spec.num_classes
    return ModelConfig(
        layers=layers,
        heads_per_layer=heads_per_layer,
        model_dim=spec.input_dim + C,
        head_dim=C,
        mlp_hidden_dim=4,
        patch_count=spec.patch_count,
        num_classes=C,
        input_dim=spec.input_dim,
        head_mode=head_mode,
        embedding_dim=C if head_mode == "contrastive" else 0,
        normalization="none",
        activation="gelu",
        final_norm=False,
    )


def _check_planted(spec: SyntheticTaskSpec, config: ModelConfig, heads: Sequence[HeadRef]):
    C = spec.num_classes
    problems = []
    if config.input_dim != spec.input_dim or config.patch_count != spec.patch_count or config.num_classes != C:
        problems.append("input_dim/patch_count/num_classes must match the task")
    if config.model_dim < spec.input_dim + C:
        problems.append(f"model_dim must be at least {spec.input_dim + C}")
    if config.head_dim < C:
        problems.append(f"head_dim must be at least {C}")
    if config.normalization != "none" or config.final_norm:
        problems.append("planted models use no normalization")
    if config.head_mode == "contrastive" and config.embedding_dim < C:
        problems.append(f"embedding_dim must be at least {C}")
    for layer, head in heads:
        if not (0 <= layer < config.layers and 0 <= head < config.heads_per_layer):
            problems.append(f"head a{layer}.h{head} does not exist")
    if len(set(heads)) != len(heads):
        problems.append("signal and attack heads must differ")
    if problems:
        raise CustomError("CONFIG_ERROR", "Planted model: {problems}", problems="; ".join(problems))


def build_planted_model(
    spec: SyntheticTaskSpec,
    config: Optional[ModelConfig] = None,
    signal_head: HeadRef = (0, 0),
    attack_head: Optional[HeadRef] = None,
    attack_target: int = 0,
    nuisance_scale: float = 0.0,
    seed: int = 0,
) -> WeightSet:
    """학습 없이 만든 모델: signal head가 class 패턴을 readout dims로 옮기고 classifier가 읽는다.

    query/key는 0이라 attention은 균등하고, class token 출력은 patch 평균이 된다.
    attack head는 text 방향을 읽어 attack target의 readout에 쓴다.
    """
    config = config or planted_config(spec)
    heads = [tuple(signal_head)] + ([tuple(attack_head)] if attack_head is not None else [])
    _check_planted(spec, config, heads)

    d_in, C, P = spec.input_dim, spec.num_classes, spec.patch_count
    w = {name: t.clone() for name, t in zero_weights(config).tensors.items()}
    w["embed.W"][:, :d_in] = torch.eye(d_in)

    # uniform attention의 1/P 평균을 되돌리는 gain
    layer, head = signal_head
    units = class_patterns(spec)
    units = units / np.linalg.norm(units, axis=1, keepdims=True)
    w[f"blocks.{layer}.attn.W_V"][head, :d_in, :C] = _to_tensor(units.T)
    w[f"blocks.{layer}.attn.W_O"][head, :C, d_in:d_in + C] = float(P) * torch.eye(C)

    if attack_head is not None:
        if not 0 <= attack_target < C:
            raise CustomError("CONFIG_ERROR", "Attack target {t} outside [0, {c})", t=attack_target, c=C)
        layer, head = attack_head
        w[f"blocks.{layer}.attn.W_V"][head, :d_in, 0] = _to_tensor(text_direction(spec))
        w[f"blocks.{layer}.attn.W_O"][head, 0, d_in + attack_target] = float(P)

    if config.head_mode == "classifier":
        w["head.W"][:, d_in:d_in + C] = torch.eye(C)
    else:
        w["head.proj"][d_in:d_in + C, :C] = torch.eye(C)
        w["head.class_emb"][:, :C] = torch.eye(C)

    if nuisance_scale > 0:
        generator = torch.Generator().manual_seed(seed)
        for l in range(config.layers):
            for h in range(config.heads_per_layer):
                if (l, h) in heads:
                    continue
                for name in ("W_V", "W_O"):
                    tensor = w[f"blocks.{l}.attn.{name}"]
                    tensor[h] = nuisance_scale * torch.randn(tensor[h].shape, generator=generator)
            for name in ("mlp.W_in", "mlp.W_out"):
                tensor = w[f"blocks.{l}.{name}"]
                w[f"blocks.{l}.{name}"] = nuisance_scale * torch.randn(tensor.shape, generator=generator)

    logger.info(f"Planted model built: signal a{signal_head[0]}.h{signal_head[1]}"
                + (f", attack a{attack_head[0]}.h{attack_head[1]} -> {attack_target}" if attack_head else ""))
    return WeightSet(config, w).validate()


def planted_circuit(graph: Graph, signal_head: HeadRef = (0, 0),
                    attack_head: Optional[HeadRef] = None) -> CircuitMask:
    """planted head의 입력 edge와 출력 edge"""
    edges = []
    for layer, head in [signal_head] + ([attack_head] if attack_head is not None else []):
        edges.append(Edge(INPUT, NodeId("attn_in", layer)))
        edges.append(Edge(NodeId("attn_head", layer, head), LOGITS))
    return mask_from_edges(graph, dict.fromkeys(edges))
