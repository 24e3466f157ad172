"""
Soft sensor espaço-temporal: GNN de passagem de mensagens por instante,
transformer sobre a janela de lookback, média temporal e MLP de 3 camadas.

Os mesmos parâmetros servem para qualquer topologia: as dimensões dependem só
do vocabulário de features (22 por nó, 14 por aresta), nunca do número de nós
ou arestas. Gather/scatter ao longo das arestas usam matrizes de incidência
constantes, então a agregação por soma e o readout por média são invariantes à
ordem dos nós.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from flowgraph import (
    EDGE_FEATURE_DIM,
    NODE_FEATURE_DIM,
    NUM_SENSOR_KINDS,
    NUM_UNIT_KINDS,
    FlowsheetTopology,
    GraphSample,
    encode_frames,
)
from neural import ArchiveError, Tape, Tensor, glorot_uniform, load_archive, save_archive
from prng import XorShift64Star, derive_seed

POSITIONAL_TABLE = "temporal.positional"
NON_TRAINABLE = frozenset({POSITIONAL_TABLE})
CHECKPOINT_FORMAT = "soft-sensor-checkpoint"

ValueTransform = Callable[[np.ndarray], np.ndarray]


class CheckpointError(ValueError):
    """Checkpoint ilegível ou incompatível com o ModelConfig embutido."""


@dataclass(frozen=True)
class ModelConfig:
    """
    Hiperparâmetros da arquitetura.

    Attributes:
        node_feat_dim: Largura das features de nó (22).
        edge_feat_dim: Largura das features de aresta (14).
        hidden_dim: Estado oculto dos nós na GNN.
        mp_rounds: Rodadas de passagem de mensagens.
        embed_dim: Dimensão do embedding do fluxograma (d_g).
        tf_layers: Blocos do transformer.
        tf_heads: Cabeças de atenção.
        tf_model_dim: Largura do transformer.
        lookback: Frames por janela (L).
        head_hidden: Largura das camadas ocultas do MLP de saída.
        tf_ff_dim: Largura do feedforward do transformer.
    """
    node_feat_dim: int = NODE_FEATURE_DIM
    edge_feat_dim: int = EDGE_FEATURE_DIM
    hidden_dim: int = 64
    mp_rounds: int = 2
    embed_dim: int = 64
    tf_layers: int = 2
    tf_heads: int = 4
    tf_model_dim: int = 64
    lookback: int = 5
    head_hidden: int = 64
    tf_ff_dim: int = 128

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"ModelConfig.{name} deve ser >= 1 (recebido {value}).")
        if self.tf_model_dim % self.tf_heads:
            raise ValueError(
                f"tf_model_dim ({self.tf_model_dim}) deve ser divisível por tf_heads ({self.tf_heads})."
            )

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "ModelConfig":
        return cls(
            hidden_dim=int(values["MODEL_HIDDEN_DIM"]),
            mp_rounds=int(values["MODEL_MP_ROUNDS"]),
            embed_dim=int(values["MODEL_EMBED_DIM"]),
            tf_layers=int(values["MODEL_TF_LAYERS"]),
            tf_heads=int(values["MODEL_TF_HEADS"]),
            tf_model_dim=int(values["MODEL_TF_MODEL_DIM"]),
            tf_ff_dim=int(values["MODEL_TF_FF_DIM"]),
            lookback=int(values["MODEL_LOOKBACK"]),
            head_hidden=int(values["MODEL_HEAD_HIDDEN"]),
        )


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Nome -> forma de todos os tensores do modelo, em ordem de construção."""
    h, d, f = cfg.hidden_dim, cfg.tf_model_dim, cfg.tf_ff_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "gnn.input.w": (cfg.node_feat_dim, h),
        "gnn.input.b": (h,),
    }
    for k in range(cfg.mp_rounds):
        shapes[f"gnn.message.{k}.w1"] = (2 * h + cfg.edge_feat_dim, h)
        shapes[f"gnn.message.{k}.b1"] = (h,)
        shapes[f"gnn.message.{k}.w2"] = (h, h)
        shapes[f"gnn.message.{k}.b2"] = (h,)
        shapes[f"gnn.update.{k}.w1"] = (2 * h, h)
        shapes[f"gnn.update.{k}.b1"] = (h,)
        shapes[f"gnn.update.{k}.w2"] = (h, h)
        shapes[f"gnn.update.{k}.b2"] = (h,)
    shapes["gnn.readout.w"] = (h, cfg.embed_dim)
    shapes["gnn.readout.b"] = (cfg.embed_dim,)
    shapes["temporal.input.w"] = (cfg.embed_dim, d)
    shapes["temporal.input.b"] = (d,)
    shapes[POSITIONAL_TABLE] = (cfg.lookback, d)
    for i in range(cfg.tf_layers):
        prefix = f"temporal.layer.{i}"
        shapes[f"{prefix}.ln1.gain"] = (d,)
        shapes[f"{prefix}.ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.w{proj}"] = (d, d)
            shapes[f"{prefix}.attn.b{proj}"] = (d,)
        shapes[f"{prefix}.ln2.gain"] = (d,)
        shapes[f"{prefix}.ln2.bias"] = (d,)
        shapes[f"{prefix}.ff.w1"] = (d, f)
        shapes[f"{prefix}.ff.b1"] = (f,)
        shapes[f"{prefix}.ff.w2"] = (f, d)
        shapes[f"{prefix}.ff.b2"] = (d,)
    shapes["temporal.final_ln.gain"] = (d,)
    shapes["temporal.final_ln.bias"] = (d,)
    shapes["head.w1"] = (d, cfg.head_hidden)
    shapes["head.b1"] = (cfg.head_hidden,)
    shapes["head.w2"] = (cfg.head_hidden, cfg.head_hidden)
    shapes["head.b2"] = (cfg.head_hidden,)
    shapes["head.w3"] = (cfg.head_hidden, 1)
    shapes["head.b3"] = (1,)
    return shapes


def param_group(name: str) -> str:
    """Grupo de um parâmetro: 'gnn.input', 'gnn.message', 'gnn.update', 'gnn.readout', 'temporal' ou 'head'."""
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "gnn" else parts[0]


def in_groups(name: str, groups: Sequence[str]) -> bool:
    """True se o parâmetro pertence a algum grupo (ou prefixo pontuado) listado."""
    return any(name == g or name.startswith(g + ".") for g in groups)


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    position = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)
    angles = position * rates[None, :]
    table = np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(np.float64)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Tensores nomeados do modelo (ver parameter_shapes)."""
    tensors: Mapping[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    def trainable_names(self, freeze: Sequence[str] = ()) -> List[str]:
        return [n for n in self.tensors if n not in NON_TRAINABLE and not in_groups(n, freeze)]

    def replace_tensors(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams({**self.tensors, **updates})

    def with_positional(self, table: np.ndarray) -> "ModelParams":
        return self.replace_tensors({POSITIONAL_TABLE: np.asarray(table, dtype=np.float64)})

    def equals(self, other: "ModelParams", names: Optional[Sequence[str]] = None) -> bool:
        """Igualdade bit a bit (opcionalmente restrita a alguns nomes)."""
        keys = list(self.tensors) if names is None else list(names)
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in keys)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelParams":
        """Todos os pesos e vieses zerados; mantém a tabela posicional."""
        tensors = {name: np.zeros(shape) for name, shape in parameter_shapes(cfg).items()}
        tensors[POSITIONAL_TABLE] = sinusoidal_table(cfg.lookback, cfg.tf_model_dim)
        return cls(tensors)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Glorot uniforme nas matrizes, vieses zero, ganhos de layer norm um."""
    rng = XorShift64Star(derive_seed(seed, "init"))
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == POSITIONAL_TABLE:
            tensors[name] = sinusoidal_table(cfg.lookback, cfg.tf_model_dim)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 2:
            tensors[name] = glorot_uniform(shape[0], shape[1], rng)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(tensors)


def incidence_matrices(topology: FlowsheetTopology) -> Tuple[np.ndarray, np.ndarray]:
    src, dst = topology.edge_endpoints
    return _incidence(src, dst, len(topology.nodes))


def _incidence(src: np.ndarray, dst: np.ndarray, num_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Matrizes [E x N] one-hot da origem e do destino de cada aresta."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    for index in (src, dst):
        if index.size and (index.min() < 0 or index.max() >= num_nodes):
            raise ValueError(f"Índice de aresta fora do intervalo [0, {num_nodes}): {index.tolist()}")
    gather_src = np.zeros((len(src), num_nodes))
    gather_dst = np.zeros((len(dst), num_nodes))
    gather_src[np.arange(len(src)), src] = 1.0
    gather_dst[np.arange(len(dst)), dst] = 1.0
    return gather_src, gather_dst


def transform_values(nodes: np.ndarray, edges: np.ndarray, fn: ValueTransform) -> Tuple[np.ndarray, np.ndarray]:
    """Aplica fn só aos slots de VALOR (nunca ao one-hot nem às máscaras)."""
    nodes = nodes.copy()
    edges = edges.copy()
    nodes[..., NUM_UNIT_KINDS : NUM_UNIT_KINDS + NUM_SENSOR_KINDS] = fn(
        nodes[..., NUM_UNIT_KINDS : NUM_UNIT_KINDS + NUM_SENSOR_KINDS]
    )
    edges[..., :NUM_SENSOR_KINDS] = fn(edges[..., :NUM_SENSOR_KINDS])
    return nodes, edges


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Lote de janelas sobre uma mesma topologia: [B, L, N, 22], [B, L, E, 14]."""
    nodes: np.ndarray
    edges: np.ndarray
    gather_src: np.ndarray
    gather_dst: np.ndarray
    targets: np.ndarray
    times: np.ndarray

    def __len__(self) -> int:
        return int(self.nodes.shape[0])


@dataclass(frozen=True, eq=False)
class EncodedSeries:
    """
    Série já codificada (e transformada) de um split.

    Attributes:
        topology: Topologia da planta.
        times: [T] instantes dos frames.
        nodes: [T, N, 22] features de nó.
        edges: [T, E, 14] features de aresta.
        targets: [T] alvos normalizados (NaN quando ocultos).
        split: Nome do split de origem ("train", "val", "test" ou "all").
    """
    topology: FlowsheetTopology
    times: np.ndarray
    nodes: np.ndarray
    edges: np.ndarray
    targets: np.ndarray
    split: str = "all"

    @classmethod
    def from_frames(
        cls,
        topology: FlowsheetTopology,
        frames: Sequence[Any],
        targets: Optional[np.ndarray] = None,
        value_transform: Optional[ValueTransform] = None,
        split: str = "all",
    ) -> "EncodedSeries":
        nodes, edges = encode_frames(topology, frames)
        if value_transform is not None:
            nodes, edges = transform_values(nodes, edges, value_transform)
        if targets is None:
            targets = np.array([np.nan if f.target is None else f.target for f in frames], dtype=np.float64)
        times = np.array([f.time for f in frames], dtype=np.float64)
        return cls(topology, times, nodes, edges, np.asarray(targets, dtype=np.float64), split)

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def window_count(self, lookback: int) -> int:
        return max(0, len(self) - lookback + 1)

    def window_ends(self, lookback: int) -> np.ndarray:
        return np.arange(lookback - 1, len(self), dtype=np.int64)

    def head(self, count: int) -> "EncodedSeries":
        """Prefixo cronológico com os primeiros `count` frames."""
        return EncodedSeries(
            self.topology, self.times[:count], self.nodes[:count], self.edges[:count], self.targets[:count], self.split
        )

    def batch(self, ends: np.ndarray, lookback: int) -> GraphBatch:
        """Janelas terminando nos índices `ends` (frame mais antigo primeiro)."""
        ends = np.asarray(ends, dtype=np.int64)
        index = ends[:, None] + np.arange(-lookback + 1, 1)[None, :]
        if index.size and index.min() < 0:
            raise ValueError(f"Janela começa antes do início da série (lookback={lookback}).")
        gather_src, gather_dst = incidence_matrices(self.topology)
        return GraphBatch(
            nodes=self.nodes[index],
            edges=self.edges[index],
            gather_src=gather_src,
            gather_dst=gather_dst,
            targets=self.targets[ends],
            times=self.times[ends],
        )


def _linear(tape: Tape, p: Mapping[str, Tensor], prefix: str, x: Tensor, suffix: str = "") -> Tensor:
    return tape.add(tape.matmul(x, p[f"{prefix}.w{suffix}"]), p[f"{prefix}.b{suffix}"])


def _mlp2(tape: Tape, p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return _linear(tape, p, prefix, tape.tanh(_linear(tape, p, prefix, x, "1")), "2")


def _layer_norm(tape: Tape, p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return tape.add(tape.mul(tape.layer_norm(x), p[f"{prefix}.gain"]), p[f"{prefix}.bias"])


def embed_graphs(
    tape: Tape,
    cfg: ModelConfig,
    p: Mapping[str, Tensor],
    nodes: Any,
    edges: Any,
    gather_src: np.ndarray,
    gather_dst: np.ndarray,
) -> Tensor:
    """
    GNN sobre qualquer lote de grafos [..., N, 22] / [..., E, 14] -> [..., d_g].

    h0 = proj(x); m_{u->v} = MLP_msg([h_u || h_v || e_uv]) somado nas arestas
    que chegam em v; h <- h + MLP_upd([h || Σm]); readout = média nos nós.
    """
    h = _linear(tape, p, "gnn.input", nodes)
    scatter_dst = np.ascontiguousarray(gather_dst.T)
    for k in range(cfg.mp_rounds):
        h_src = tape.matmul(gather_src, h)
        h_dst = tape.matmul(gather_dst, h)
        messages = _mlp2(tape, p, f"gnn.message.{k}", tape.concat([h_src, h_dst, edges], axis=-1))
        incoming = tape.matmul(scatter_dst, messages)
        h = tape.add(h, _mlp2(tape, p, f"gnn.update.{k}", tape.concat([h, incoming], axis=-1)))
    return _linear(tape, p, "gnn.readout", tape.mean(h, axis=-2))


def _attention(tape: Tape, cfg: ModelConfig, p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    batch, length, width = x.shape
    heads = cfg.tf_heads
    head_dim = width // heads

    def split_heads(t: Tensor) -> Tensor:
        return tape.transpose(tape.reshape(t, (batch, length, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(_linear(tape, p, f"{prefix}.attn", x, "q"))
    k = split_heads(_linear(tape, p, f"{prefix}.attn", x, "k"))
    v = split_heads(_linear(tape, p, f"{prefix}.attn", x, "v"))
    scores = tape.mul(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    context = tape.matmul(tape.softmax(scores, axis=-1), v)
    merged = tape.reshape(tape.transpose(context, (0, 2, 1, 3)), (batch, length, width))
    return _linear(tape, p, f"{prefix}.attn", merged, "o")


def temporal_head(tape: Tape, cfg: ModelConfig, p: Mapping[str, Tensor], embeddings: Tensor) -> Tensor:
    """Transformer pré-norma sobre [B, L, d_g], média no tempo e MLP de 3 camadas -> [B]."""
    x = tape.add(_linear(tape, p, "temporal.input", embeddings), p[POSITIONAL_TABLE])
    for i in range(cfg.tf_layers):
        prefix = f"temporal.layer.{i}"
        x = tape.add(x, _attention(tape, cfg, p, prefix, _layer_norm(tape, p, f"{prefix}.ln1", x)))
        hidden = tape.relu(_linear(tape, p, f"{prefix}.ff", _layer_norm(tape, p, f"{prefix}.ln2", x), "1"))
        x = tape.add(x, _linear(tape, p, f"{prefix}.ff", hidden, "2"))
    pooled = tape.mean(_layer_norm(tape, p, "temporal.final_ln", x), axis=1)
    out = tape.tanh(_linear(tape, p, "head", pooled, "1"))
    out = tape.tanh(_linear(tape, p, "head", out, "2"))
    out = _linear(tape, p, "head", out, "3")
    return tape.reshape(out, (out.shape[0],))


def forward_batch(tape: Tape, cfg: ModelConfig, p: Mapping[str, Tensor], batch: GraphBatch) -> Tensor:
    """Predições normalizadas [B] para um lote de janelas."""
    if batch.nodes.shape[1] != cfg.lookback:
        raise ValueError(f"Janela com {batch.nodes.shape[1]} frames; o modelo espera L={cfg.lookback}.")
    embeddings = embed_graphs(tape, cfg, p, batch.nodes, batch.edges, batch.gather_src, batch.gather_dst)
    return temporal_head(tape, cfg, p, embeddings)


def embed_snapshot(
    cfg: ModelConfig,
    params: ModelParams,
    node_feats: np.ndarray,
    edge_feats: np.ndarray,
    edges: Tuple[Sequence[int], Sequence[int]],
) -> np.ndarray:
    """Embedding [d_g] de um único grafo; edges = (índices de origem, índices de destino)."""
    node_feats = np.asarray(node_feats, dtype=np.float64)
    edge_feats = np.asarray(edge_feats, dtype=np.float64).reshape(-1, cfg.edge_feat_dim)
    gather_src, gather_dst = _incidence(edges[0], edges[1], node_feats.shape[0])
    if edge_feats.shape[0] != gather_src.shape[0]:
        raise ValueError(f"{edge_feats.shape[0]} linhas de aresta para {gather_src.shape[0]} arestas.")
    tape = Tape()
    p = tape.watch(params.tensors, trainable=())
    embedding = embed_graphs(tape, cfg, p, node_feats[None], edge_feats[None], gather_src, gather_dst)
    return embedding.value[0]


def forward(
    cfg: ModelConfig,
    params: ModelParams,
    sample: GraphSample,
    value_transform: Optional[ValueTransform] = None,
) -> float:
    """Predição ŷ_t (unidades normalizadas) para uma janela de exatamente L frames."""
    if len(sample.frames) != cfg.lookback:
        raise ValueError(f"Amostra com {len(sample.frames)} frames; o modelo espera L={cfg.lookback}.")
    series = EncodedSeries.from_frames(sample.topology, sample.frames, value_transform=value_transform)
    batch = series.batch(np.array([cfg.lookback - 1]), cfg.lookback)
    tape = Tape()
    return float(forward_batch(tape, cfg, tape.watch(params.tensors, trainable=()), batch).value[0])


def predict_values(cfg: ModelConfig, params: ModelParams, series: EncodedSeries, chunk: int = 256) -> np.ndarray:
    """Predições para todas as janelas da série, em blocos."""
    ends = series.window_ends(cfg.lookback)
    outputs: List[np.ndarray] = []
    for start in range(0, len(ends), chunk):
        tape = Tape()
        batch = series.batch(ends[start : start + chunk], cfg.lookback)
        outputs.append(forward_batch(tape, cfg, tape.watch(params.tensors, trainable=()), batch).value)
    return np.concatenate(outputs) if outputs else np.zeros(0)


def predict_series(cfg: ModelConfig, params: ModelParams, series: EncodedSeries) -> List[Tuple[float, float]]:
    """Lista de (t, ŷ_t), uma por janela, com o instante do frame mais recente."""
    if len(series) < cfg.lookback:
        raise ValueError(f"Split com {len(series)} frames; são necessários pelo menos L={cfg.lookback}.")
    times = series.times[series.window_ends(cfg.lookback)]
    return list(zip(times.tolist(), predict_values(cfg, params, series).tolist()))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    target_scaler: Optional[Dict[str, float]] = None
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: str,
    cfg: ModelConfig,
    params: ModelParams,
    target_scaler: Optional[Mapping[str, float]] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> None:
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(cfg),
        "target_scaler": dict(target_scaler) if target_scaler is not None else None,
        "meta": dict(meta or {}),
    }
    save_archive(path, params.tensors, metadata)


def load_checkpoint(path: str) -> Checkpoint:
    """Carrega um checkpoint e confere nomes e formas contra o ModelConfig embutido."""
    try:
        tensors, metadata = load_archive(path)
    except (OSError, ArchiveError) as exc:
        raise CheckpointError(f"Não foi possível ler o checkpoint {path}: {exc}") from exc
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} não é um checkpoint do soft sensor.")
    try:
        cfg = ModelConfig(**metadata["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"ModelConfig inválido em {path}: {exc}") from exc

    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"Tensores não batem com o ModelConfig: faltando {missing}, sobrando {extra}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"Forma de {name}: {tuple(tensors[name].shape)} no arquivo, {shape} no config")
    ordered = {name: tensors[name] for name in expected}
    return Checkpoint(
        config=cfg,
        params=ModelParams(ordered),
        target_scaler=metadata.get("target_scaler"),
        meta=dict(metadata.get("meta") or {}),
    )
