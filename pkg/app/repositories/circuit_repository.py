"""Circuit 파일 (JSON): config digest, graph fingerprint, canonical edge 목록, discovery metadata"""

from glob import glob
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from ..core.exceptions import CustomError
from ..core.logger import logger
from ..models.graph import CircuitMask, Edge, Graph, NodeId
from .file_store import read_json, write_json

CIRCUIT_FORMAT = "circuit/1"
_REQUIRED = ("format", "model_config_digest", "graph_fingerprint", "layers", "heads", "edges", "metadata")


def circuit_record(graph: Graph, mask: CircuitMask, config_digest: str,
                   metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    mask.check(graph)
    return {
        "format": CIRCUIT_FORMAT,
        "model_config_digest": config_digest,
        "graph_fingerprint": graph.fingerprint,
        "layers": graph.num_layers,
        "heads": graph.num_heads,
        "edges": [list(edge.name) for edge in mask.edges(graph)],
        "metadata": metadata or {},
    }


def save_circuit(path: str | Path, graph: Graph, mask: CircuitMask, config_digest: str,
                 metadata: Optional[Dict[str, Any]] = None) -> Path:
    return write_json(path, circuit_record(graph, mask, config_digest, metadata))


def parse_circuit(record: Dict[str, Any], graph: Optional[Graph] = None,
                  source: str = "<memory>") -> Tuple[CircuitMask, Dict[str, Any]]:
    missing = [key for key in _REQUIRED if key not in record]
    if missing or record.get("format") != CIRCUIT_FORMAT:
        raise CustomError("FORMAT_ERROR", "{source}: not a circuit file (missing {keys})",
                          source=source, keys=", ".join(missing) or "format tag")
    if graph is None:
        graph = Graph.build(int(record["layers"]), int(record["heads"]))
    if record["graph_fingerprint"] != graph.fingerprint:
        raise CustomError(
            "ARTIFACT_MISMATCH", "{source}: circuit fingerprint {got} does not match graph {want}",
            source=source, got=record["graph_fingerprint"], want=graph.fingerprint,
        )
    edges = []
    for pair in record["edges"]:
        if not isinstance(pair, list) or len(pair) != 2:
            raise CustomError("FORMAT_ERROR", "{source}: malformed edge entry {entry}", source=source, entry=pair)
        edges.append(Edge(NodeId.parse(pair[0]), NodeId.parse(pair[1])))
    try:
        mask = CircuitMask.from_edges(graph, edges)
    except CustomError as e:
        raise CustomError("ARTIFACT_MISMATCH", "{source}: {err}", source=source, err=e.message)
    return mask, record


def load_circuit(path: str | Path, graph: Optional[Graph] = None,
                 config_digest: Optional[str] = None) -> Tuple[CircuitMask, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CustomError("FORMAT_ERROR", "Circuit file {path} does not exist", path=str(path))
    try:
        record = read_json(path)
    except ValueError as e:
        raise CustomError("FORMAT_ERROR", "{path}: invalid JSON ({err})", path=str(path), err=e)
    mask, record = parse_circuit(record, graph, source=str(path))
    if config_digest is not None and record["model_config_digest"] != config_digest:
        raise CustomError(
            "ARTIFACT_MISMATCH", "{path} was mined on model {got}, not {want}",
            path=str(path), got=record["model_config_digest"], want=config_digest,
        )
    return mask, record


def load_circuits(pattern: str) -> List[Tuple[str, CircuitMask, Dict[str, Any]]]:
    """glob 패턴에 맞는 circuit 파일 전부 (경로 정렬 순)"""
    paths = sorted(glob(pattern))
    if not paths:
        raise CustomError("ARGUMENT_ERROR", "No circuit files match {pattern}", pattern=pattern)
    circuits = []
    for path in paths:
        mask, record = load_circuit(path)
        circuits.append((path, mask, record))
    logger.info(f"Loaded {len(circuits)} circuits from {pattern}")
    return circuits
