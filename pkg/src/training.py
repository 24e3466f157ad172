"""
Escalonamento, perda, laço de treino com parada antecipada e avaliação por RMSE.

Entradas: apenas a transformação log com sinal nos slots de valor (sem
normalização por feature). Alvo: média zero e desvio unitário com estatísticas
do split de treino do próprio dataset. O split de teste nunca entra em
fit(): a função recusa séries marcadas como "test".
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from flowgraph import Dataset, chronological_split
from model import (
    EncodedSeries,
    ModelConfig,
    ModelParams,
    forward_batch,
    init_params,
    predict_values,
)
from neural import AdamState, NonFiniteError, Tape, adam_step
from prng import XorShift64Star, derive_seed

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
HISTORY_COLUMNS = ["epoch", "train_loss", "val_rmse"]


class DegenerateTargetError(ValueError):
    """Alvos sem variância (ou insuficientes) para normalizar."""


class TrainingDivergence(RuntimeError):
    """Perda ou métrica não finita durante o treino."""

    def __init__(self, epoch: int, detail: str = "") -> None:
        super().__init__(f"Treino divergiu na época {epoch}. {detail}".strip())
        self.epoch = epoch


def log_scale(x: np.ndarray) -> np.ndarray:
    """sign(x) * ln(1 + |x|), elemento a elemento."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


@dataclass(frozen=True)
class TargetScaler:
    """Normalização do alvo: (y - mean) / std, std populacional."""
    mean: float
    std: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mean) and math.isfinite(self.std)) or self.std <= 0:
            raise DegenerateTargetError(f"Escala de alvo inválida: mean={self.mean}, std={self.std}")

    def apply(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> Dict[str, float]:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "TargetScaler":
        return cls(mean=float(data["mean"]), std=float(data["std"]))


def fit_target_scaler(targets: Sequence[float]) -> TargetScaler:
    values = np.asarray(targets, dtype=np.float64)
    if values.size < 2 or not np.all(np.isfinite(values)):
        raise DegenerateTargetError("São necessários pelo menos 2 alvos finitos para normalizar.")
    mean = float(values.mean())
    std = float(values.std())
    if std <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateTargetError(f"Alvo constante (média {mean:.6g}); não há variância para normalizar.")
    return TargetScaler(mean=mean, std=std)


def rmse(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Raiz do erro quadrático médio."""
    a = np.asarray(y, dtype=np.float64)
    b = np.asarray(y_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Séries de tamanhos diferentes: {a.shape} e {b.shape}")
    if a.size == 0:
        raise ValueError("RMSE de série vazia.")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class TrainConfig:
    """
    Hiperparâmetros de otimização.

    Attributes:
        learning_rate: Passo do Adam.
        max_epochs: Limite de épocas.
        batch_size: Tamanho do mini-lote quando há mais janelas que full_batch_limit.
        full_batch_limit: Até quantas janelas usar lote completo.
        patience: Épocas sem melhora na validação antes de parar.
        seed: Semente do embaralhamento (e da inicialização em train()).
    """
    learning_rate: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 64
    full_batch_limit: int = 1024
    patience: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, max_epochs e batch_size devem ser positivos.")
        if self.full_batch_limit < 1 or self.patience < 1:
            raise ValueError("full_batch_limit e patience devem ser positivos.")

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "TrainConfig":
        return cls(
            learning_rate=float(values["TRAIN_LEARNING_RATE"]),
            max_epochs=int(values["TRAIN_MAX_EPOCHS"]),
            batch_size=int(values["TRAIN_BATCH_SIZE"]),
            full_batch_limit=int(values["TRAIN_FULL_BATCH_LIMIT"]),
            patience=int(values["TRAIN_PATIENCE"]),
            seed=int(values["TRAIN_SEED"]),
        )


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Dataset codificado: escala do alvo (ajustada no treino) e séries por split."""
    scaler: TargetScaler
    train: EncodedSeries
    val: EncodedSeries
    test: EncodedSeries

    def split(self, name: str) -> EncodedSeries:
        if name not in SPLIT_NAMES:
            raise ValueError(f"Split desconhecido: {name!r} (use {', '.join(SPLIT_NAMES)})")
        return getattr(self, name)


def prepare_dataset(d: Dataset, cfg: ModelConfig, scaler: Optional[TargetScaler] = None) -> PreparedData:
    """
    Divide cronologicamente, ajusta a escala do alvo no treino e codifica os três splits.

    Cada split precisa de pelo menos L frames para formar uma janela.
    """
    ranges = chronological_split(d)
    targets = d.targets()
    train_start, train_stop = ranges[0]
    if scaler is None:
        scaler = fit_target_scaler(targets[train_start:train_stop])
    series: Dict[str, EncodedSeries] = {}
    for name, (start, stop) in zip(SPLIT_NAMES, ranges):
        if stop - start < cfg.lookback:
            raise ValueError(
                f"Split '{name}' tem {stop - start} frames; são necessários pelo menos L={cfg.lookback}."
            )
        series[name] = EncodedSeries.from_frames(
            d.topology,
            d.frames[start:stop],
            targets=scaler.apply(targets[start:stop]),
            value_transform=log_scale,
            split=name,
        )
    return PreparedData(scaler=scaler, **series)


def evaluate_series(cfg: ModelConfig, params: ModelParams, series: EncodedSeries) -> float:
    """RMSE normalizado sobre todas as janelas da série."""
    if len(series) < cfg.lookback:
        raise ValueError(f"Série com {len(series)} frames; são necessários pelo menos L={cfg.lookback}.")
    y = series.targets[series.window_ends(cfg.lookback)]
    return rmse(y, predict_values(cfg, params, series))


def evaluate(
    cfg: ModelConfig,
    params: ModelParams,
    dataset: Dataset,
    split: str,
    scaler: TargetScaler,
) -> float:
    """RMSE em unidades normalizadas de um split do dataset."""
    prepared = prepare_dataset(dataset, cfg, scaler=scaler)
    return evaluate_series(cfg, params, prepared.split(split))


def _batches(ends: np.ndarray, tc: TrainConfig, rng: XorShift64Star) -> List[np.ndarray]:
    if len(ends) <= tc.full_batch_limit:
        return [ends]
    shuffled = ends[np.asarray(rng.permutation(len(ends)), dtype=np.int64)]
    return [shuffled[i : i + tc.batch_size] for i in range(0, len(shuffled), tc.batch_size)]


def fit(
    cfg: ModelConfig,
    tc: TrainConfig,
    params: ModelParams,
    train_series: EncodedSeries,
    val_series: EncodedSeries,
    trainable: Optional[Sequence[str]] = None,
) -> Tuple[ModelParams, pd.DataFrame]:
    """
    Núcleo de otimização compartilhado por treino, fine-tuning e treino do zero.

    Adam sobre o MSE das janelas de treino; RMSE de validação a cada época;
    retorna os parâmetros da melhor época e o histórico
    (epoch, train_loss, val_rmse). Só os nomes em `trainable` são atualizados.
    """
    if "test" in (train_series.split, val_series.split):
        raise ValueError("O split de teste não pode ser usado no treino nem na parada antecipada.")
    ends = train_series.window_ends(cfg.lookback)
    if len(ends) == 0:
        raise ValueError("Nenhuma janela de treino disponível.")
    names = list(params.trainable_names() if trainable is None else trainable)

    rng = XorShift64Star(derive_seed(tc.seed, "batches"))
    current: Dict[str, np.ndarray] = dict(params.tensors)
    state = AdamState.for_params({n: current[n] for n in names}, tc.learning_rate)
    best = params
    best_val = math.inf
    since_best = 0
    rows: List[Dict[str, float]] = []

    for epoch in range(1, tc.max_epochs + 1):
        weighted_loss = 0.0
        try:
            for batch_ends in _batches(ends, tc, rng):
                batch = train_series.batch(batch_ends, cfg.lookback)
                tape = Tape()
                watched = tape.watch(current, trainable=names)
                loss = tape.mse(forward_batch(tape, cfg, watched, batch), batch.targets)
                grads = tape.gradient(loss, watched)
                updated, state = adam_step({n: current[n] for n in names}, grads, state)
                current = {**current, **updated}
                weighted_loss += loss.item() * len(batch_ends)
            val_rmse = evaluate_series(cfg, ModelParams(current), val_series)
        except NonFiniteError as exc:
            raise TrainingDivergence(epoch, str(exc)) from exc

        train_loss = weighted_loss / len(ends)
        if not (math.isfinite(train_loss) and math.isfinite(val_rmse)):
            raise TrainingDivergence(epoch, f"train_loss={train_loss}, val_rmse={val_rmse}")
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_rmse": val_rmse})
        logger.info("época %d: train_loss=%.6f val_rmse=%.6f", epoch, train_loss, val_rmse)

        if val_rmse < best_val:
            best_val = val_rmse
            best = ModelParams(dict(current))
            since_best = 0
        else:
            since_best += 1
            if since_best >= tc.patience:
                logger.info("Parada antecipada na época %d (melhor val_rmse=%.6f).", epoch, best_val)
                break

    return best, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def train(
    cfg: ModelConfig,
    tc: TrainConfig,
    dataset: Dataset,
    prepared: Optional[PreparedData] = None,
) -> Tuple[ModelParams, pd.DataFrame]:
    """Treina do zero (inicialização pela semente de tc) até convergir na validação."""
    prepared = prepared or prepare_dataset(dataset, cfg)
    params = init_params(cfg, tc.seed)
    return fit(cfg, tc, params, prepared.train, prepared.val)
