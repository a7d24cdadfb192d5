"""CLI 커맨드 - config 로딩, 파이프라인 실행, 산출물 + run manifest 기록"""

import argparse
from pathlib import Path
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError
import torch
import yaml

from ..core.config import settings
from ..core.constants import (
    BINARY_CSV_COLUMNS,
    CRITERION_CSV_COLUMNS,
    EVAL_CSV_COLUMNS,
    RECALL_THRESHOLDS,
    SIMILARITY_CSV_COLUMNS,
    STABILITY_CSV_COLUMNS,
    STEERING_CSV_COLUMNS,
    SWEEP_CSV_COLUMNS,
)
from ..core.exceptions import CustomError
from ..core.logger import logger
from ..core.monitor import track_command
from ..models.analysis import CircuitEnsemble
from ..models.data import attack_targets, stack_pairs
from ..models.experiment import (
    DiscoveryConfig,
    DiscoverySection,
    ExperimentConfig,
    MetricSpec,
    RunManifest,
    SteeringPolicy,
    SteeringRegime,
    SteeringSection,
)
from ..repositories.archive_repository import load_directions, load_weights, save_directions, save_weights
from ..repositories.circuit_repository import load_circuit, load_circuits, save_circuit
from ..repositories.dataset_repository import dataset_manifest, load_pairs, save_pairs
from ..repositories.report_repository import write_decisions, write_manifest, write_report, write_rows
from ..services.analysis_service import (
    balanced_binary_pairs,
    binary_report,
    dataset_size_stability,
    edge_stability,
    ensemble_report,
    inclusion_frequency,
    similarity_matrix,
)
from ..services.data_service import build_planted_model, filter_correct, generate_suite, planted_config, certify_class_signal
from ..services.discovery_service import DEFAULT_EAPIG_STEPS, criterion_sweep, discover, sweep_faithfulness
from ..services.graph_service import build_graph_dims
from ..services.patching_service import cache_pairs, faithfulness_report
from ..services.runtime_service import HookedViT, load_model, random_weights
from ..services.steering_service import (
    attack_metrics,
    base_attack_metrics,
    circuit_senders,
    compute_directions,
    retrieval_metrics,
    select_alpha,
    steered_embeddings,
)
from ..utils.time import now_utc_iso

# ===== config =====

def _field_path(loc: Sequence[Any]) -> str:
    return ".".join(str(part) for part in loc)


def load_config(path: Optional[str]) -> ExperimentConfig:
    """YAML config -> ExperimentConfig. 문법 오류는 줄/열, 검증 오류는 필드 경로로 보고"""
    if path is None:
        return ExperimentConfig()
    if not Path(path).exists():
        raise CustomError("CONFIG_ERROR", "Config file {path} does not exist", path=path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else "unknown position"
        raise CustomError("CONFIG_ERROR", "{path}: YAML syntax error at {where}", path=path, where=where)
    if not isinstance(raw, dict):
        raise CustomError("CONFIG_ERROR", "{path}: top level must be a mapping", path=path)
    return validate_config(raw, source=path)


def validate_config(raw: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig(**raw)
    except ValidationError as e:
        problems = "; ".join(f"{_field_path(err['loc'])}: {err['msg']}" for err in e.errors())
        raise CustomError("CONFIG_ERROR", "{source}: {problems}", source=source, problems=problems)


def _override(config: ExperimentConfig, section: str, **flags) -> ExperimentConfig:
    """None이 아닌 CLI flag로 섹션 값을 덮어쓰고 다시 검증"""
    updates = {key: value for key, value in flags.items() if value is not None}
    if not updates:
        return config
    merged = config.model_dump(mode="json")
    merged[section] = {**merged[section], **updates}
    return validate_config(merged, source="command-line flags")


def _manifest(command: str, config: ExperimentConfig, started: float, seeds: Dict[str, int],
              inputs: Dict[str, str], outputs: Dict[str, str]) -> RunManifest:
    return RunManifest(
        command=command,
        config_digest=config.digest(),
        seeds=seeds,
        inputs=inputs,
        outputs=outputs,
        wall_clock_seconds=round(time.perf_counter() - started, 3),
        started_at=now_utc_iso(),
        tool_version=settings.APP_VERSION,
    )


def _load_model(path: str) -> HookedViT:
    return load_model(load_weights(path))


def _parse_floats(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise CustomError("USAGE_ERROR", "Expected a comma-separated list of numbers, got {text!r}", text=text)


def _parse_ints(text: Optional[str]) -> Optional[List[int]]:
    values = _parse_floats(text)
    if values is None:
        return None
    if any(v != int(v) for v in values):
        raise CustomError("USAGE_ERROR", "Expected a comma-separated list of integers, got {text!r}", text=text)
    return [int(v) for v in values]


# ===== model / data =====

@track_command("model")
def cmd_model(args: argparse.Namespace) -> Dict[str, str]:
    """planted 또는 random 가중치 archive 생성"""
    started = time.perf_counter()
    config = _override(load_config(args.config), "model", seed=args.seed, output=args.out)
    section = config.model
    task = config.data.task
    if section.construction == "planted":
        model_config = section.config or planted_config(task)
        weights = build_planted_model(
            task, model_config,
            signal_head=section.signal_head,
            attack_head=section.attack_head,
            attack_target=config.data.attack_target,
            nuisance_scale=section.nuisance_scale,
            seed=section.seed,
        )
    else:
        if section.config is None:
            raise CustomError("CONFIG_ERROR", "model.config is required for random construction")
        weights = random_weights(section.config, seed=section.seed, scale=section.init_scale)

    manifest = _manifest("model", config, started, {"model": section.seed}, {}, {"weights": section.output})
    output = save_weights(weights, section.output, manifest.digest())
    write_manifest(output, manifest)
    logger.info(f"Model archive written to {output}", config_digest=weights.config.digest())
    return {"weights": str(output)}


@track_command("gen")
def cmd_gen(args: argparse.Namespace) -> Dict[str, str]:
    """data 섹션대로 paired dataset 디렉토리 생성"""
    started = time.perf_counter()
    config = _override(load_config(args.config), "data", output=args.out)
    data = config.data
    task = data.task
    classes = data.classes if data.classes is not None else list(range(task.num_classes))
    for cls in classes:
        if not 0 <= cls < task.num_classes:
            raise CustomError("CONFIG_ERROR", "data.classes: class {cls} outside [0, {c})",
                              cls=cls, c=task.num_classes)

    typographic = {}
    if data.kind == "typographic":
        typographic = {
            "attack_target": data.attack_target,
            "placement": data.placement,
            "amplitude": data.attack_amplitude,
            "scattered_count": data.scattered_count,
            "block_size": data.block_size,
        }
    pairs = generate_suite(task, classes, data.examples_per_class, data.kind, **typographic)

    extra: Dict[str, Any] = {"kind": data.kind, "config_digest": config.digest()}
    if data.kind == "class" and len(classes) >= 2 and data.examples_per_class >= 2:
        extra["signal_check"] = certify_class_signal(pairs, seed=task.seed).as_dict()

    manifest = _manifest("gen", config, started, {"data": task.seed}, {}, {"pairs": data.output})
    extra["manifest_digest"] = manifest.digest()
    output = save_pairs(data.output, pairs, task.digest(), task.num_classes, extra)
    write_manifest(output, manifest)
    logger.info(f"Generated {len(pairs)} {data.kind} pairs in {output}")
    return {"pairs": str(output)}


# ===== discovery / evaluation =====

def _discovery_section(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    method = args.method or config.discovery.method
    if args.steps is not None and method != "eapig":
        raise CustomError("USAGE_ERROR", "--steps is only valid with --method eapig (got {m})", m=method)
    if (args.preset or config.discovery.preset) and method != "vicd":
        raise CustomError("USAGE_ERROR", "--preset is a Vi-CD protocol (got --method {m})", m=method)
    return _override(
        config, "discovery",
        method=args.method, preset=args.preset, threshold=args.threshold, edges=args.edges, steps=args.steps,
        metric=args.metric, target=args.target, max_visited=args.max_visited, seed=args.seed, mode=args.mode,
    )


def _resolve_threshold(section: DiscoverySection, labels: List[int], flagged: Optional[float]):
    """우선순위: --threshold flag > class_thresholds[label] > preset > discovery.threshold"""
    if flagged is not None:
        return flagged, "flag"
    if len(labels) == 1 and labels[0] in section.class_thresholds:
        return section.class_thresholds[labels[0]], "class"
    if section.preset is not None:
        return DiscoveryConfig.preset(section.preset).threshold, "preset"
    return section.threshold, "config"


def _training_cache(model: HookedViT, pairs_path: str, section: DiscoverySection):
    pairs = load_pairs(pairs_path, model.config)
    if section.filter_correct:
        pairs = filter_correct(model, pairs)
    if not pairs:
        raise CustomError("ARGUMENT_ERROR", "No usable training pairs in {path}", path=pairs_path)
    return pairs, cache_pairs(model, pairs)


@track_command("discover")
def cmd_discover(args: argparse.Namespace) -> Dict[str, str]:
    """circuit 파일 + decision log"""
    started = time.perf_counter()
    config = _discovery_section(args)
    section = config.discovery
    model = _load_model(args.model)
    pairs, cache = _training_cache(model, args.pairs, section)
    labels = sorted({pair.label for pair in pairs})
    threshold, threshold_source = _resolve_threshold(section, labels, args.threshold)
    if section.preset is not None and args.metric is None:
        metric = DiscoveryConfig.preset(section.preset).metric.model_copy(update={"target": section.target})
    else:
        metric = MetricSpec.from_flag(section.metric, section.target)

    result = discover(
        section.method, model, cache, metric,
        threshold=threshold, edges=section.edges, steps=section.steps,
        max_visited=section.max_visited, seed=section.seed, mode=section.mode,
    )

    output = Path(args.out)
    decisions_path = output.with_name(f"{output.stem}.decisions.csv")
    manifest = _manifest(
        "discover", config, started, {"discovery": section.seed},
        {"model": args.model, "pairs": args.pairs},
        {"circuit": str(output), "decisions": str(decisions_path)},
    )
    metadata = {
        "method": section.method,
        "preset": section.preset,
        "threshold": threshold,
        "threshold_source": threshold_source,
        "edges": section.edges,
        "steps": section.steps,
        "metric": metric.kind,
        "seed": section.seed,
        "mode": section.mode,
        "label": ",".join(str(label) for label in labels),
        "train_pairs": len(pairs),
        "patched_forwards": result.patched_forwards,
        "visited_receivers": result.visited_receivers,
        "effective_config": config.model_dump(mode="json"),
        "manifest_digest": manifest.digest(),
    }
    save_circuit(output, model.graph, result.mask, model.config.digest(), metadata)
    write_decisions(decisions_path, result.decisions, manifest.digest())
    write_manifest(output, manifest)
    logger.experiment_event("discover_finished", f"{section.method}: {result.mask.size}/{len(model.graph)} edges",
                            circuit=str(output))
    return {"circuit": str(output), "decisions": str(decisions_path)}


@track_command("eval")
def cmd_eval(args: argparse.Namespace) -> Dict[str, str]:
    """circuit의 faithfulness / sparsity 한 행"""
    started = time.perf_counter()
    config = load_config(args.config)
    model = _load_model(args.model)
    mask, _ = load_circuit(args.circuit, model.graph, model.config.digest())
    pairs = load_pairs(args.pairs, model.config)
    report = faithfulness_report(model, mask, cache_pairs(model, pairs))

    manifest = _manifest("eval", config, started, {}, {"model": args.model, "circuit": args.circuit,
                                                        "pairs": args.pairs}, {"report": args.out})
    write_rows(args.out, [{"circuit": Path(args.circuit).name, **report}], EVAL_CSV_COLUMNS, manifest.digest())
    write_manifest(args.out, manifest)
    logger.info(f"Circuit accuracy {report['accuracy']:.3f} (full {report['full_accuracy']:.3f})")
    return {"report": args.out}


@track_command("sweep")
def cmd_sweep(args: argparse.Namespace) -> Dict[str, str]:
    """method별 faithfulness 곡선 (또는 --criterion이면 threshold 사다리)"""
    started = time.perf_counter()
    config = _override(
        load_config(args.config), "discovery",
        grid=_parse_floats(args.grid), methods=args.methods.split(",") if args.methods else None,
        seed=args.seed, steps=args.steps,
    )
    section = config.discovery
    model = _load_model(args.model)
    _, train_cache = _training_cache(model, args.pairs, section)
    eval_cache = cache_pairs(model, load_pairs(args.eval_pairs, model.config)) if args.eval_pairs else train_cache

    inputs = {"model": args.model, "pairs": args.pairs, "eval_pairs": args.eval_pairs or args.pairs}
    if args.criterion:
        metric = MetricSpec.from_flag(args.criterion, section.target)
        rows = criterion_sweep(model, train_cache, eval_cache, metric, _parse_floats(args.thresholds),
                               max_visited=section.max_visited, mode=section.mode)
        columns = CRITERION_CSV_COLUMNS
    else:
        metric = MetricSpec.from_flag(section.metric, section.target)
        rows = []
        for method in section.methods:
            points = sweep_faithfulness(
                method, model, train_cache, eval_cache, section.grid, metric, seed=section.seed,
                steps=section.steps or DEFAULT_EAPIG_STEPS, max_visited=section.max_visited, mode=section.mode,
            )
            rows.extend(point.as_row() for point in points)
        columns = SWEEP_CSV_COLUMNS

    manifest = _manifest("sweep", config, started, {"discovery": section.seed}, inputs, {"curve": args.out})
    write_rows(args.out, rows, columns, manifest.digest())
    write_manifest(args.out, manifest)
    return {"curve": args.out}


# ===== analysis =====

def _binary_classes(text: str) -> Tuple[int, int]:
    classes = _parse_ints(text)
    if len(classes) != 2 or classes[0] == classes[1]:
        raise CustomError("USAGE_ERROR", "--binary expects two distinct classes A,B, got {text!r}", text=text)
    return classes[0], classes[1]


@track_command("analyze")
def cmd_analyze(args: argparse.Namespace) -> Dict[str, str]:
    """circuit ensemble 리포트 + class 간 Jaccard CSV (+ 선택적으로 dataset-size stability, binary 평가)"""
    started = time.perf_counter()
    config = load_config(args.config)
    universe = args.universe or config.analysis.universe
    circuits = load_circuits(args.circuits)
    first = circuits[0][2]
    graph = build_graph_dims(int(first["layers"]), int(first["heads"]))

    groups: Dict[str, List] = {}
    for path, mask, record in circuits:
        label = record["metadata"].get("label") or "all"
        groups.setdefault(label, []).append((path, mask))
    ensembles = {
        label: CircuitEnsemble([m for _, m in items], [{"path": p} for p, _ in items])
        for label, items in groups.items()
    }
    everything = CircuitEnsemble([mask for _, mask, _ in circuits], [{"path": p} for p, _, _ in circuits])

    out = Path(args.out)
    outputs = {"report": str(out / "ensemble_report.json"), "similarity": str(out / "similarity.csv")}
    payload: Dict[str, Any] = {
        "overall": ensemble_report(graph, everything, "all", universe).model_dump(mode="json"),
        "classes": {
            label: ensemble_report(graph, ensemble, label, universe).model_dump(mode="json")
            for label, ensemble in sorted(ensembles.items())
        },
    }
    if len(everything) > 1:
        payload["edge_stability"] = [
            record.model_dump(mode="json")
            for record in edge_stability(graph, inclusion_frequency(everything, universe))
        ]
    rows, matrix = similarity_matrix(ensembles)
    payload["similarity_labels"] = sorted(ensembles)
    payload["similarity_matrix"] = matrix.tolist()

    inputs = {"circuits": args.circuits}
    if args.sizes:
        if not (args.model and args.pairs):
            raise CustomError("USAGE_ERROR", "--sizes needs --model and --pairs")
        model = _load_model(args.model)
        pairs = filter_correct(model, load_pairs(args.pairs, model.config))
        threshold = args.threshold or config.discovery.threshold
        if threshold is None:
            raise CustomError("USAGE_ERROR", "--sizes needs a discovery threshold")
        stability = dataset_size_stability(
            model, pairs, _parse_ints(args.sizes), args.runs,
            DiscoveryConfig(threshold=threshold, metric=MetricSpec.from_flag(config.discovery.metric)),
            seed=config.discovery.seed,
        )
        outputs["stability"] = str(out / "stability.csv")
        inputs.update({"model": args.model, "pairs": args.pairs})

    if args.binary:
        if not (args.model and args.pairs):
            raise CustomError("USAGE_ERROR", "--binary needs --model and --pairs")
        class_a, class_b = _binary_classes(args.binary)
        model = _load_model(args.model)
        pairs = balanced_binary_pairs(filter_correct(model, load_pairs(args.pairs, model.config)), class_a, class_b)
        by_label = {label: {Path(p).name: m for p, m in items} for label, items in groups.items()}
        binary = binary_report(
            model, pairs, class_a, class_b,
            by_label.get(str(class_a), {}), by_label.get(str(class_b), {}),
            by_label.get(f"{min(class_a, class_b)},{max(class_a, class_b)}", {}),
        )
        outputs["binary"] = str(out / "binary.csv")
        inputs.update({"model": args.model, "pairs": args.pairs})

    manifest = _manifest("analyze", config, started, {}, inputs, outputs)
    write_report(outputs["report"], payload, manifest)
    write_rows(outputs["similarity"], rows, SIMILARITY_CSV_COLUMNS, manifest.digest())
    if "stability" in outputs:
        write_rows(outputs["stability"], stability, STABILITY_CSV_COLUMNS, manifest.digest())
    if "binary" in outputs:
        write_rows(outputs["binary"], binary, BINARY_CSV_COLUMNS, manifest.digest())
    write_manifest(out, manifest)
    logger.info(f"Analyzed {len(circuits)} circuits in {len(ensembles)} groups")
    return outputs


# ===== steering =====

def _steering_section(args: argparse.Namespace) -> ExperimentConfig:
    return _override(
        load_config(args.config), "steering",
        regime=args.regime, alpha_grid=_parse_floats(args.alpha_grid), layer_grid=_parse_ints(args.layer_grid),
        sender_global=True if args.sender_global else None,
    )


def _retrieval(model: HookedViT, attacked_tokens: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor,
               directions, policy: SteeringPolicy) -> Dict[str, float]:
    """class embedding을 후보로 한 retrieval (attack target 후보가 manipulated)"""
    candidates = model.weights["head.class_emb"].to(torch.float64)
    ks = [k for k in RECALL_THRESHOLDS if k <= candidates.shape[0]]
    dropped = [k for k in RECALL_THRESHOLDS if k not in ks]
    if dropped:
        logger.warning(f"recall@k skipped for k={dropped}: only {candidates.shape[0]} candidates",
                       dropped=dropped, candidates=int(candidates.shape[0]))
    manipulated = [c in set(targets.tolist()) for c in range(candidates.shape[0])]
    queries = steered_embeddings(model, attacked_tokens, directions, policy)
    return retrieval_metrics(queries, candidates, labels.tolist(), manipulated, ks)


@track_command("steer")
def cmd_steer(args: argparse.Namespace) -> Dict[str, str]:
    """circuit sender 방향 추정 -> (α, 층) 격자 sweep -> 최소 α 선택"""
    started = time.perf_counter()
    config = _steering_section(args)
    section: SteeringSection = config.steering
    model = _load_model(args.model)
    graph = model.graph
    circuit, _ = load_circuit(args.circuit, graph, model.config.digest())

    attacked_pairs = load_pairs(args.pairs_attacked, model.config)
    clean_pairs = load_pairs(args.pairs_clean, model.config)
    out = Path(args.out)
    if args.directions:
        directions = load_directions(args.directions, graph)
    else:
        directions = compute_directions(
            model, attacked_pairs, circuit_senders(graph, circuit), SteeringRegime.parse(section.regime),
            section.epsilon, section.batches, section.batch_size,
            attack_id=dataset_manifest(args.pairs_attacked).get("spec_digest", ""),
        )

    attacked_tokens, _, attacked_labels = stack_pairs(attacked_pairs)
    targets = attack_targets(attacked_pairs)
    clean_tokens, _, clean_labels = stack_pairs(clean_pairs)
    rows = attack_metrics(
        model, clean_tokens, clean_labels, attacked_tokens, attacked_labels, targets,
        directions, circuit, section.alpha_grid, section.layer_grid, section.sender_global,
    )
    base = base_attack_metrics(model, attacked_tokens, attacked_labels, targets)
    selected = select_alpha(rows, base["asr_top1"], section.target_reduction)

    payload: Dict[str, Any] = {
        "regime": str(directions.regime),
        "base": base,
        "selected": selected,
        "senders": [node.name for node in directions.senders],
        "skipped_rows": directions.skipped_rows,
        "effective_config": config.model_dump(mode="json"),
    }
    if model.config.head_mode == "contrastive":
        alpha = selected["alpha"] if selected else max(section.alpha_grid)
        payload["retrieval"] = {
            "unsteered": _retrieval(model, attacked_tokens, attacked_labels, targets, directions,
                                    SteeringPolicy(circuit=circuit, alpha=0.0)),
            "steered": _retrieval(model, attacked_tokens, attacked_labels, targets, directions,
                                  SteeringPolicy(circuit=circuit, alpha=alpha, sender_global=section.sender_global)),
            "alpha": alpha,
        }

    outputs = {"directions": str(out / "directions.cfw"), "sweep": str(out / "steering.csv"),
               "summary": str(out / "steering_summary.json")}
    inputs = {"model": args.model, "circuit": args.circuit, "pairs_attacked": args.pairs_attacked,
              "pairs_clean": args.pairs_clean}
    manifest = _manifest("steer", config, started, {}, inputs, outputs)
    if args.directions:
        outputs["directions"] = args.directions
    else:
        save_directions(directions, outputs["directions"], manifest.digest())
    write_rows(outputs["sweep"], rows, STEERING_CSV_COLUMNS, manifest.digest())
    write_report(outputs["summary"], payload, manifest)
    write_manifest(out, manifest)
    return outputs

