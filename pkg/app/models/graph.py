"""Reduced computation graph: node ids, edges, circuit masks"""

from dataclasses import dataclass
import re
from typing import Dict, Iterable, Iterator, List, Literal, Tuple

from ..core.exceptions import CustomError
from ..utils.hashing import digest

NodeKind = Literal["input", "attn_in", "attn_head", "mlp", "logits"]

_HEAD_NAME = re.compile(r"^a(\d+)\.h(\d+)$")
_ATTN_IN_NAME = re.compile(r"^attn_in(\d+)$")
_MLP_NAME = re.compile(r"^mlp(\d+)$")


@dataclass(frozen=True)
class NodeId:
    """그래프 노드. attn_head는 sender 전용, attn_in/logits는 receiver 전용, mlp는 양쪽"""
    kind: NodeKind
    layer: int = -1
    head: int = -1

    @property
    def name(self) -> str:
        if self.kind == "attn_head":
            return f"a{self.layer}.h{self.head}"
        if self.kind in ("attn_in", "mlp"):
            return f"{self.kind}{self.layer}"
        return self.kind

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, name: str) -> "NodeId":
        if name in ("input", "logits"):
            return cls(name)
        if match := _HEAD_NAME.match(name):
            return cls("attn_head", int(match.group(1)), int(match.group(2)))
        if match := _ATTN_IN_NAME.match(name):
            return cls("attn_in", int(match.group(1)))
        if match := _MLP_NAME.match(name):
            return cls("mlp", int(match.group(1)))
        raise CustomError("FORMAT_ERROR", "Unknown node name {name!r}", name=name)


INPUT = NodeId("input")
LOGITS = NodeId("logits")


def _senders(num_layers: int, num_heads: int) -> List[NodeId]:
    nodes = [INPUT]
    for layer in range(num_layers):
        nodes.extend(NodeId("attn_head", layer, head) for head in range(num_heads))
        nodes.append(NodeId("mlp", layer))
    return nodes


def _receivers(num_layers: int) -> List[NodeId]:
    nodes = []
    for layer in range(num_layers):
        nodes.append(NodeId("attn_in", layer))
        nodes.append(NodeId("mlp", layer))
    nodes.append(LOGITS)
    return nodes


def _precedes(sender: NodeId, receiver: NodeId) -> bool:
    """같은 층의 head는 mlp로만 보내고 attn_in으로는 보내지 않는다"""
    if sender.kind == "input" or receiver.kind == "logits":
        return True
    if receiver.kind == "attn_in":
        return sender.layer < receiver.layer
    # receiver: mlp
    if sender.kind == "attn_head":
        return sender.layer <= receiver.layer
    return sender.layer < receiver.layer


_SENDER_CLASS = {"input": "input", "attn_head": "attn", "mlp": "mlp"}


@dataclass(frozen=True)
class Edge:
    sender: NodeId
    receiver: NodeId

    @property
    def edge_type(self) -> str:
        return f"{_SENDER_CLASS[self.sender.kind]}->{self.receiver.kind}"

    @property
    def name(self) -> Tuple[str, str]:
        return (self.sender.name, self.receiver.name)

    def __str__(self) -> str:
        return f"{self.sender.name}->{self.receiver.name}"


@dataclass(frozen=True)
class Graph:
    """Canonical하게 정렬된 sender/receiver/edge 목록"""
    num_layers: int
    num_heads: int
    senders: Tuple[NodeId, ...]
    receivers: Tuple[NodeId, ...]
    edges: Tuple[Edge, ...]
    fingerprint: str

    def __post_init__(self):
        object.__setattr__(self, "_edge_index", {edge: i for i, edge in enumerate(self.edges)})
        object.__setattr__(self, "_sender_index", {node: i for i, node in enumerate(self.senders)})
        incoming: Dict[NodeId, List[int]] = {receiver: [] for receiver in self.receivers}
        for i, edge in enumerate(self.edges):
            incoming[edge.receiver].append(i)
        object.__setattr__(self, "_incoming", {k: tuple(v) for k, v in incoming.items()})

    @classmethod
    def build(cls, num_layers: int, num_heads: int) -> "Graph":
        """(L, H)만의 순수 함수. edge 순서는 (receiver 위상 순서, sender 순서)"""
        senders = _senders(num_layers, num_heads)
        receivers = _receivers(num_layers)
        edges = tuple(
            Edge(sender, receiver)
            for receiver in receivers
            for sender in senders
            if sender != receiver and _precedes(sender, receiver)
        )
        fingerprint = digest({
            "layers": num_layers,
            "heads": num_heads,
            "edges": [list(edge.name) for edge in edges],
        })
        return cls(num_layers, num_heads, tuple(senders), tuple(receivers), edges, fingerprint)

    def __len__(self) -> int:
        return len(self.edges)

    def edge_index(self, edge: Edge) -> int:
        try:
            return self._edge_index[edge]
        except KeyError:
            raise CustomError("ARGUMENT_ERROR", "Edge {edge} is not in the graph", edge=str(edge))

    def sender_index(self, node: NodeId) -> int:
        return self._sender_index[node]

    def incoming(self, receiver: NodeId) -> Tuple[int, ...]:
        """receiver로 들어오는 edge index (canonical 순서)"""
        return self._incoming[receiver]

    def receiver_layer(self, receiver: NodeId) -> int:
        """logits는 마지막 블록 다음 층(L)으로 취급"""
        return self.num_layers if receiver.kind == "logits" else receiver.layer


@dataclass(frozen=True)
class CircuitMask:
    """그래프 edge별 indicator i_e ∈ {0,1}"""
    indicators: Tuple[bool, ...]
    fingerprint: str

    @classmethod
    def from_indices(cls, graph: Graph, indices: Iterable[int]) -> "CircuitMask":
        keep = set(int(i) for i in indices)
        return cls(tuple(i in keep for i in range(len(graph))), graph.fingerprint)

    @classmethod
    def from_edges(cls, graph: Graph, edges: Iterable[Edge]) -> "CircuitMask":
        return cls.from_indices(graph, (graph.edge_index(edge) for edge in edges))

    def __len__(self) -> int:
        return len(self.indicators)

    @property
    def size(self) -> int:
        return sum(self.indicators)

    @property
    def indices(self) -> Tuple[int, ...]:
        return tuple(i for i, kept in enumerate(self.indicators) if kept)

    def edges(self, graph: Graph) -> Iterator[Edge]:
        self.check(graph)
        for i in self.indices:
            yield graph.edges[i]

    def check(self, graph: Graph) -> "CircuitMask":
        if self.fingerprint != graph.fingerprint or len(self.indicators) != len(graph.edges):
            raise CustomError(
                "ARGUMENT_ERROR", "Mask fingerprint {mask} does not match graph {graph}",
                mask=self.fingerprint, graph=graph.fingerprint,
            )
        return self

    def with_edge(self, index: int, kept: bool) -> "CircuitMask":
        bits = list(self.indicators)
        bits[index] = kept
        return CircuitMask(tuple(bits), self.fingerprint)
