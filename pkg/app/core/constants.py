"""Defaults and reference constants for circuit discovery and steering experiments"""

# 엣지 분류 (sender kind -> receiver kind)
EDGE_TYPES = (
    "input->attn_in",
    "input->mlp",
    "input->logits",
    "attn->attn_in",
    "attn->mlp",
    "attn->logits",
    "mlp->attn_in",
    "mlp->mlp",
    "mlp->logits",
)

# 데이터 프로토콜
CLASS_CIRCUIT_EXAMPLES = 128     # 클래스별 circuit 마이닝 예제 수
MAX_VISITED_NODES = 900
DEFAULT_GRID_SIZE = 4            # 4x4 패치 + class token = 17

# EAP-IG step 수
EAPIG_STEPS = (3, 5, 10)

# 바이너리 circuit preset (logit diff, seed 8개)
BINARY_CIRCUIT_THRESHOLD = 4e-4
BINARY_CIRCUIT_SEEDS = 8

# criterion sweep 범위 (15개 threshold, log-spaced)
CRITERION_SWEEP_POINTS = 15
CRITERION_SWEEP_BOUNDS = {
    ("contrastive", "kl_divergence"): (5e-8, 2e-5),
    ("contrastive", "target_logit_diff"): (1e-4, 1e-3),
    ("classifier", "kl_divergence"): (5e-8, 2e-1),
    ("classifier", "target_logit_diff"): (5e-3, 1e-1),
}

# 엣지 안정성 구간
STABLE_FREQUENCY = 0.9       # freq > 0.9 -> stable
BORDERLINE_FREQUENCY = 0.5   # 0.5 <= freq <= 0.9 -> borderline

# 스티어링
STEERING_EPSILON = 1e-8
STEERING_BATCHES = 10
STEERING_BATCH_SIZE = 16
DEFAULT_REGIME = "pre_normed:mean"
RECALL_THRESHOLDS = (1, 5, 10)

# 임계값 이분 탐색
BISECTION_MAX_ITERATIONS = 40

# CSV 스키마
SWEEP_CSV_COLUMNS = ("method", "fraction", "edges", "accuracy", "seed")
STEERING_CSV_COLUMNS = (
    "alpha", "max_layer", "clean_top1", "clean_top5", "atk_top1", "atk_top5",
    "asr_top1", "asr_top5", "retention",
)
SIMILARITY_CSV_COLUMNS = ("class_a", "class_b", "jaccard_mean", "jaccard_std")
DECISION_CSV_COLUMNS = ("step", "receiver", "sender", "edge_type", "degradation", "decision")

# 아카이브 포맷
ARCHIVE_MAGIC = b"CFW1\0\0\0\0"
EVAL_CSV_COLUMNS = ("circuit", "edges", "fraction", "accuracy", "full_accuracy", "gap")
CRITERION_CSV_COLUMNS = ("criterion", "threshold", "edges", "accuracy")
STABILITY_CSV_COLUMNS = (
    "size", "runs", "jaccard_mean", "jaccard_std", "edges_mean", "core_fraction_union", "core_fraction_all",
)
BINARY_CSV_COLUMNS = ("circuit", "kind", "accuracy", "edges", "a_only", "b_only", "both", "binary_only")
