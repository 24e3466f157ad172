"""
Modelo de grafo para fluxogramas de processo e séries temporais de sensores.

Unidades de operação são nós, correntes são arestas dirigidas (no sentido do
material) e sensores são atributos embutidos nos nós/arestas. Este módulo
cuida da codificação em matrizes de atributos de largura fixa, do janelamento
temporal, da divisão cronológica e da serialização de datasets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

SCHEMA_VERSION = 1

DEFAULT_SPLIT = (0.8, 0.1, 0.1)


class TopologyError(ValueError):
    """Topologia inválida ou leitura ligada a sensor desconhecido."""


class DatasetFormatError(ValueError):
    """Arquivo de dataset malformado ou incompatível."""


class UnitKind(str, Enum):
    """Tipos de unidade de operação (índice = ordem de declaração)."""
    FEED = "Feed"
    PRODUCT = "Product"
    COMPRESSOR = "Compressor"
    FLASH_VESSEL = "FlashVessel"
    HEATER_COOLER = "HeaterCooler"
    REACTOR = "Reactor"
    MIXER = "Mixer"
    PURGE_SPLITTER = "PurgeSplitter"

    @property
    def index(self) -> int:
        return _UNIT_INDEX[self]


class SensorKind(str, Enum):
    """Vocabulário global de sensores; as plantas diferem só nos slots preenchidos."""
    FLOW = "Flow"
    TEMPERATURE = "Temperature"
    PRESSURE = "Pressure"
    LEVEL = "Level"
    COMPOSITION = "Composition"
    DUTY = "Duty"
    POWER = "Power"

    @property
    def index(self) -> int:
        return _SENSOR_INDEX[self]


_UNIT_INDEX = {kind: i for i, kind in enumerate(UnitKind)}
_SENSOR_INDEX = {kind: i for i, kind in enumerate(SensorKind)}

NUM_UNIT_KINDS = len(UnitKind)
NUM_SENSOR_KINDS = len(SensorKind)
NODE_FEATURE_DIM = NUM_UNIT_KINDS + 2 * NUM_SENSOR_KINDS
EDGE_FEATURE_DIM = 2 * NUM_SENSOR_KINDS


@dataclass(frozen=True)
class Node:
    node_id: str
    kind: UnitKind


@dataclass(frozen=True)
class Edge:
    edge_id: str
    src: str
    dst: str


@dataclass(frozen=True)
class SensorBinding:
    """Sensor físico: id, localização (id de nó ou de aresta) e tipo."""
    sensor_id: str
    location: str
    kind: SensorKind


@dataclass(frozen=True)
class FlowsheetTopology:
    """
    Grafo dirigido de unidades tipadas e correntes, com sensores ligados.

    Attributes:
        nodes: Unidades na ordem de declaração (define a ordem das linhas).
        edges: Correntes na ordem de declaração.
        sensors: Sensores ligados a nós ou arestas.
        target_sensor: Sensor do alvo do soft sensor; nunca entra nas features.
    """
    nodes: Tuple[Node, ...]
    edges: Tuple[Edge, ...]
    sensors: Tuple[SensorBinding, ...] = ()
    target_sensor: Optional[str] = None

    @cached_property
    def node_index(self) -> Dict[str, int]:
        return {node.node_id: i for i, node in enumerate(self.nodes)}

    @cached_property
    def edge_index(self) -> Dict[str, int]:
        return {edge.edge_id: i for i, edge in enumerate(self.edges)}

    @cached_property
    def sensor_by_id(self) -> Dict[str, SensorBinding]:
        return {sensor.sensor_id: sensor for sensor in self.sensors}

    @cached_property
    def edge_endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        """Índices (src, dst) de cada aresta na ordem dos nós."""
        src = np.array([self.node_index[e.src] for e in self.edges], dtype=np.int64)
        dst = np.array([self.node_index[e.dst] for e in self.edges], dtype=np.int64)
        return src, dst

    @cached_property
    def input_slots(self) -> Dict[str, Tuple[str, int, int]]:
        """sensor_id -> ("node" | "edge", linha, índice do SensorKind), sem o alvo."""
        slots: Dict[str, Tuple[str, int, int]] = {}
        for sensor in self.sensors:
            if sensor.sensor_id == self.target_sensor:
                continue
            if sensor.location in self.node_index:
                slots[sensor.sensor_id] = ("node", self.node_index[sensor.location], sensor.kind.index)
            else:
                slots[sensor.sensor_id] = ("edge", self.edge_index[sensor.location], sensor.kind.index)
        return slots

    def unit_kind_counts(self) -> Dict[UnitKind, int]:
        counts: Dict[UnitKind, int] = {}
        for node in self.nodes:
            counts[node.kind] = counts.get(node.kind, 0) + 1
        return counts

    def edge_pairs(self) -> set:
        return {(edge.src, edge.dst) for edge in self.edges}

    def reorder_nodes(self, order: Sequence[str]) -> "FlowsheetTopology":
        """Mesma topologia com os nós declarados na ordem informada."""
        if sorted(order) != sorted(self.node_index):
            raise TopologyError("A nova ordem deve conter exatamente os mesmos nós.")
        by_id = {node.node_id: node for node in self.nodes}
        return FlowsheetTopology(
            nodes=tuple(by_id[node_id] for node_id in order),
            edges=self.edges,
            sensors=self.sensors,
            target_sensor=self.target_sensor,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "nodes": [{"id": n.node_id, "kind": n.kind.value} for n in self.nodes],
            "edges": [{"id": e.edge_id, "src": e.src, "dst": e.dst} for e in self.edges],
        }


@dataclass(frozen=True)
class SnapshotFrame:
    """Leituras de todos os sensores em um instante (s desde o início do cenário)."""
    time: float
    readings: Mapping[str, float]
    target: Optional[float] = None


@dataclass(frozen=True)
class GraphSample:
    """Janela de L frames (mais antigo primeiro) e o alvo do frame mais recente."""
    topology: FlowsheetTopology
    frames: Tuple[SnapshotFrame, ...]
    target: float

    def __post_init__(self) -> None:
        times = [frame.time for frame in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("Frames de uma janela devem ter tempos estritamente crescentes.")


@dataclass(frozen=True)
class Dataset:
    """
    Série temporal de uma planta.

    Attributes:
        topology: Topologia da planta.
        frames: Frames em ordem cronológica.
        split_fractions: Frações (treino, validação, teste); normalizadas no uso.
        meta: Metadados livres (processo, variante, intervalo, semente).
    """
    topology: FlowsheetTopology
    frames: Tuple[SnapshotFrame, ...]
    split_fractions: Tuple[float, float, float] = DEFAULT_SPLIT
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        times = [frame.time for frame in self.frames]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("Frames do dataset devem estar em ordem cronológica.")
        if len(self.split_fractions) != 3 or any(f <= 0 for f in self.split_fractions):
            raise ValueError("split_fractions deve conter três valores positivos.")

    @property
    def normalized_fractions(self) -> Tuple[float, float, float]:
        total = float(sum(self.split_fractions))
        train, val, test = (float(f) / total for f in self.split_fractions)
        return train, val, test

    def targets(self) -> np.ndarray:
        return np.array(
            [np.nan if f.target is None else f.target for f in self.frames], dtype=np.float64
        )


def validate_topology(t: FlowsheetTopology) -> List[str]:
    """
    Retorna todas as violações de invariantes da topologia.

    Lista vazia significa topologia válida.
    """
    errors: List[str] = []

    seen_nodes: set = set()
    for node in t.nodes:
        if node.node_id in seen_nodes:
            errors.append(f"duplicate node id {node.node_id}")
        seen_nodes.add(node.node_id)

    seen_edges: set = set()
    for edge in t.edges:
        if edge.edge_id in seen_edges:
            errors.append(f"duplicate edge id {edge.edge_id}")
        seen_edges.add(edge.edge_id)
        for endpoint in (edge.src, edge.dst):
            if endpoint not in seen_nodes:
                errors.append(f"unknown endpoint {endpoint}")

    seen_sensors: set = set()
    seen_slots: set = set()
    for sensor in t.sensors:
        if sensor.sensor_id in seen_sensors:
            errors.append(f"duplicate sensor id {sensor.sensor_id}")
        seen_sensors.add(sensor.sensor_id)
        if sensor.location not in seen_nodes and sensor.location not in seen_edges:
            errors.append(f"unknown sensor location {sensor.location}")
        slot = (sensor.location, sensor.kind)
        if slot in seen_slots:
            errors.append(f"duplicate sensor kind at location {sensor.location} ({sensor.kind.value})")
        seen_slots.add(slot)

    if t.target_sensor is not None and t.target_sensor not in seen_sensors:
        errors.append(f"unknown target sensor {t.target_sensor}")

    return errors


def _require_valid(t: FlowsheetTopology) -> None:
    errors = validate_topology(t)
    if errors:
        raise TopologyError("Topologia inválida: " + "; ".join(errors))


def _check_readings(t: FlowsheetTopology, f: SnapshotFrame) -> None:
    unknown = [sensor_id for sensor_id in f.readings if sensor_id not in t.sensor_by_id]
    if unknown:
        raise TopologyError(f"Leitura ligada a sensor desconhecido: {', '.join(sorted(unknown))}")


def encode_node_features(t: FlowsheetTopology, f: SnapshotFrame) -> np.ndarray:
    """
    Matriz [num_nodes x 22]: one-hot do tipo (8) | valores por SensorKind (7) | máscara (7).
    """
    _require_valid(t)
    _check_readings(t, f)
    matrix = np.zeros((len(t.nodes), NODE_FEATURE_DIM), dtype=np.float64)
    for row, node in enumerate(t.nodes):
        matrix[row, node.kind.index] = 1.0
    slots = t.input_slots
    for sensor_id, value in f.readings.items():
        slot = slots.get(sensor_id)
        if slot is None or slot[0] != "node":
            continue
        _, row, k = slot
        matrix[row, NUM_UNIT_KINDS + k] = value
        matrix[row, NUM_UNIT_KINDS + NUM_SENSOR_KINDS + k] = 1.0
    return matrix


def encode_edge_features(t: FlowsheetTopology, f: SnapshotFrame) -> np.ndarray:
    """Matriz [num_edges x 14]: valores (7) | máscara (7)."""
    _require_valid(t)
    _check_readings(t, f)
    matrix = np.zeros((len(t.edges), EDGE_FEATURE_DIM), dtype=np.float64)
    slots = t.input_slots
    for sensor_id, value in f.readings.items():
        slot = slots.get(sensor_id)
        if slot is None or slot[0] != "edge":
            continue
        _, row, k = slot
        matrix[row, k] = value
        matrix[row, NUM_SENSOR_KINDS + k] = 1.0
    return matrix


def encode_frames(
    t: FlowsheetTopology, frames: Sequence[SnapshotFrame]
) -> Tuple[np.ndarray, np.ndarray]:
    """Codificação em lote: ([T x N x 22], [T x E x 14]), linhas idênticas às dos encoders por frame."""
    _require_valid(t)
    nodes = np.zeros((len(frames), len(t.nodes), NODE_FEATURE_DIM), dtype=np.float64)
    edges = np.zeros((len(frames), len(t.edges), EDGE_FEATURE_DIM), dtype=np.float64)
    for row, node in enumerate(t.nodes):
        nodes[:, row, node.kind.index] = 1.0
    slots = t.input_slots
    for i, frame in enumerate(frames):
        _check_readings(t, frame)
        for sensor_id, value in frame.readings.items():
            slot = slots.get(sensor_id)
            if slot is None:
                continue
            where, row, k = slot
            if where == "node":
                nodes[i, row, NUM_UNIT_KINDS + k] = value
                nodes[i, row, NUM_UNIT_KINDS + NUM_SENSOR_KINDS + k] = 1.0
            else:
                edges[i, row, k] = value
                edges[i, row, NUM_SENSOR_KINDS + k] = 1.0
    return nodes, edges


def assemble_windows(
    d: Dataset, L: int, frame_range: Optional[Tuple[int, int]] = None
) -> List[GraphSample]:
    """
    Uma amostra por índice t em [L-1, N-1] (dentro do intervalo informado).

    Com frame_range=(a, b) as janelas ficam inteiramente em [a, b), o que
    impede que uma janela de validação/teste use frames de outro split.
    """
    if L < 1:
        raise ValueError("L deve ser >= 1.")
    start, stop = frame_range if frame_range is not None else (0, len(d.frames))
    samples: List[GraphSample] = []
    for t in range(start + L - 1, stop):
        newest = d.frames[t]
        if newest.target is None:
            raise ValueError(f"Frame em t={newest.time} não tem alvo.")
        samples.append(
            GraphSample(topology=d.topology, frames=tuple(d.frames[t - L + 1 : t + 1]), target=newest.target)
        )
    return samples


def chronological_split(d: Dataset) -> Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]:
    """
    Intervalos [início, fim) de treino, validação e teste, nessa ordem no tempo.

    Fronteiras em floor(N * fração acumulada); frações normalizadas para somar 1.
    """
    n = len(d.frames)
    train, val, _ = d.normalized_fractions
    # guarda contra arredondamento binário (ex.: 0.8 + 0.1 = 0.9000000000000001)
    first = min(n, int(math.floor(n * train + 1e-9)))
    second = min(n, int(math.floor(n * (train + val) + 1e-9)))
    ranges = ((0, first), (first, second), (second, n))
    if n > 0 and any(stop <= start for start, stop in ranges):
        raise ValueError(
            f"Divisão {d.split_fractions} produz um split vazio para N={n}: {ranges}"
        )
    return ranges


def dataset_to_dict(d: Dataset) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "topology": d.topology.to_dict(),
        "sensors": [
            {"id": s.sensor_id, "location": s.location, "kind": s.kind.value} for s in d.topology.sensors
        ],
        "target_sensor": d.topology.target_sensor,
        "frames": [
            {"t": f.time, "readings": dict(f.readings), "target": f.target} for f in d.frames
        ],
        "meta": dict(d.meta),
        "split_fractions": list(d.split_fractions),
    }


def dataset_from_dict(data: Mapping[str, Any]) -> Dataset:
    if not isinstance(data, Mapping):
        raise DatasetFormatError("Documento de dataset deve ser um objeto JSON.")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"Versão de schema não suportada: {version!r} (esperada {SCHEMA_VERSION})."
        )
    try:
        topology = FlowsheetTopology(
            nodes=tuple(Node(n["id"], UnitKind(n["kind"])) for n in data["topology"]["nodes"]),
            edges=tuple(Edge(e["id"], e["src"], e["dst"]) for e in data["topology"]["edges"]),
            sensors=tuple(
                SensorBinding(s["id"], s["location"], SensorKind(s["kind"])) for s in data["sensors"]
            ),
            target_sensor=data.get("target_sensor"),
        )
        frames = tuple(
            SnapshotFrame(
                time=float(f["t"]),
                readings={str(k): float(v) for k, v in f["readings"].items()},
                target=None if f.get("target") is None else float(f["target"]),
            )
            for f in data["frames"]
        )
        fractions = tuple(float(x) for x in data.get("split_fractions", DEFAULT_SPLIT))
        meta = dict(data.get("meta", {}))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DatasetFormatError(f"Dataset malformado: {exc}") from exc

    errors = validate_topology(topology)
    if errors:
        raise DatasetFormatError("Topologia inválida no arquivo: " + "; ".join(errors))
    for frame in frames:
        unknown = [s for s in frame.readings if s not in topology.sensor_by_id]
        if unknown:
            raise DatasetFormatError(
                f"Frame em t={frame.time} referencia sensor não ligado: {', '.join(sorted(unknown))}"
            )
    try:
        return Dataset(topology=topology, frames=frames, split_fractions=fractions, meta=meta)  # type: ignore[arg-type]
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from exc


def save_dataset(d: Dataset, path: str) -> None:
    """Salva o dataset como JSON versionado."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(dataset_to_dict(d), f, indent=1)


def load_dataset(path: str) -> Dataset:
    """Carrega e valida um dataset salvo por save_dataset."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"Arquivo de dataset não é JSON válido: {exc}") from exc
    return dataset_from_dict(data)


def frames_to_dataframe(d: Dataset) -> pd.DataFrame:
    """Uma linha por frame: t, uma coluna por sensor (ordem de ligação) e target."""
    columns = [s.sensor_id for s in d.topology.sensors if s.sensor_id != d.topology.target_sensor]
    records = []
    for frame in d.frames:
        record: Dict[str, Any] = {"t": frame.time}
        for sensor_id in columns:
            record[sensor_id] = frame.readings.get(sensor_id)
        record["target"] = frame.target
        records.append(record)
    return pd.DataFrame(records, columns=["t", *columns, "target"])


def export_frames_csv(d: Dataset, path: str) -> None:
    """Exporta os frames em CSV para inspeção."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frames_to_dataframe(d).to_csv(path, index=False)
