"""
Protocolo de transferência em dois estágios e grade de experimentos.

1. Pré-treino no processo de origem (um checkpoint por semente).
2. Avaliação zero-shot no teste do processo alvo (célula n = 0).
3. Fine-tuning parcial com as n primeiras janelas de treino do alvo,
   comparado a um modelo treinado do zero com as mesmas janelas.

Cada célula (n, semente) é independente e determinística; as células
concluídas são anexadas a cells.jsonl assim que terminam, de modo que uma
execução interrompida pode ser retomada.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import parse_bool, parse_int_list, parse_name_list
from flowgraph import Dataset
from model import (
    Checkpoint,
    EncodedSeries,
    ModelConfig,
    ModelParams,
    init_params,
    load_checkpoint,
    predict_values,
    save_checkpoint,
)
from prng import derive_seed
from training import (
    PreparedData,
    TrainConfig,
    evaluate_series,
    fit,
    prepare_dataset,
)

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0, 1, 11, 21, 31, 41, 51)
DEFAULT_SEEDS = tuple(range(1, 10))
DEFAULT_FREEZE = ("gnn.message", "gnn.update")
ARMS = ("pretrained", "scratch")

RAW_COLUMNS = ["n", "seed", "arm", "rmse"]
AGGREGATE_COLUMNS = [
    "n",
    "pretrained_mean",
    "pretrained_std",
    "scratch_mean",
    "scratch_std",
    "reduction_per_seed_avg",
    "reduction_of_means",
]
SERIES_COLUMNS = ["t", "y", "y_hat_zero_shot", "y_hat_finetuned"]


class MissingCellsError(RuntimeError):
    """Relatório incompleto: faltam células (n, semente, braço)."""

    def __init__(self, missing: Sequence[Tuple[int, int, str]]) -> None:
        listing = ", ".join(f"(n={n}, seed={s}, {arm})" for n, s, arm in missing)
        super().__init__(f"Relatório incompleto; {len(missing)} células faltando: {listing}")
        self.missing = list(missing)


@dataclass(frozen=True)
class FinetunePolicy:
    """
    Política de re-treino parcial no processo alvo.

    Attributes:
        n_points: Quantas janelas de treino do alvo usar (prefixo cronológico).
        freeze: Grupos de parâmetros congelados.
        learning_rate: Passo do Adam.
        max_epochs: Limite de épocas.
        patience: Paciência da parada antecipada na validação do alvo.
    """
    n_points: int = 0
    freeze: Tuple[str, ...] = DEFAULT_FREEZE
    learning_rate: float = 1e-4
    max_epochs: int = 200
    patience: int = 20

    def __post_init__(self) -> None:
        if self.n_points < 0:
            raise ValueError("n_points deve ser >= 0.")
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("learning_rate, max_epochs e patience devem ser positivos.")

    def with_points(self, n_points: int) -> "FinetunePolicy":
        return replace(self, n_points=n_points)

    @classmethod
    def from_config(cls, values: Mapping[str, str], n_points: int = 0) -> "FinetunePolicy":
        full = parse_bool(values["FINETUNE_FULL"])
        return cls(
            n_points=n_points,
            freeze=() if full else parse_name_list(values["FINETUNE_FREEZE"]),
            learning_rate=float(values["FINETUNE_LEARNING_RATE"]),
            max_epochs=int(values["FINETUNE_MAX_EPOCHS"]),
            patience=int(values["FINETUNE_PATIENCE"]),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Grade, sementes, modelo, treino de origem/do zero e política de fine-tuning."""
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    policy: FinetunePolicy = field(default_factory=FinetunePolicy)
    grid: Tuple[int, ...] = DEFAULT_GRID
    seeds: Tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self) -> None:
        if not self.grid or not self.seeds:
            raise ValueError("Grade e lista de sementes não podem ser vazias.")
        if len(set(self.grid)) != len(self.grid) or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("Grade e sementes não podem ter repetições.")
        if min(self.grid) < 0:
            raise ValueError("Valores da grade devem ser >= 0.")

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "ExperimentConfig":
        return cls(
            model=ModelConfig.from_config(values),
            pretrain=TrainConfig.from_config(values),
            policy=FinetunePolicy.from_config(values),
            grid=tuple(sorted(parse_int_list(values["TRANSFER_GRID"]))),
            seeds=parse_int_list(values["TRANSFER_SEEDS"]),
        )


@dataclass(frozen=True, eq=False)
class TransferReport:
    """
    Resultado da grade.

    Attributes:
        raw: Uma linha por (n, semente, braço): n, seed, arm, rmse.
        aggregate: Uma linha por n: médias, desvios e reduções percentuais.
        summary: Resumo serializável (grade, sementes, médias zero-shot etc.).
        series: Série de predições t, y, ŷ zero-shot, ŷ fine-tuned (maior n).
    """
    raw: pd.DataFrame
    aggregate: pd.DataFrame
    summary: Dict[str, Any]
    series: pd.DataFrame

    def write(self, out_dir: str) -> None:
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        self.raw.to_csv(target / "raw.csv", index=False)
        self.aggregate.to_csv(target / "aggregate.csv", index=False)
        self.series.to_csv(target / "series.csv", index=False)
        with open(target / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


def pretrain_one(cfg: ModelConfig, tc: TrainConfig, source: PreparedData, seed: int) -> Checkpoint:
    """Treina um modelo na origem a partir da inicialização da semente."""
    params, history = fit(cfg, replace(tc, seed=seed), init_params(cfg, seed), source.train, source.val)
    best_val = float(history["val_rmse"].min())
    logger.info("Pré-treino seed=%d: %d épocas, melhor val_rmse=%.6f", seed, len(history), best_val)
    return Checkpoint(
        config=cfg,
        params=params,
        target_scaler=source.scaler.to_dict(),
        meta={"seed": seed, "epochs": int(len(history)), "best_val_rmse": best_val},
    )


def pretrain(
    source: PreparedData, seeds: Sequence[int], cfg: ModelConfig, tc: TrainConfig
) -> Dict[int, Checkpoint]:
    """Um checkpoint convergido por semente."""
    return {seed: pretrain_one(cfg, tc, source, seed) for seed in seeds}


def zero_shot_eval(checkpoint: Checkpoint, target: PreparedData) -> float:
    """RMSE no teste do alvo sem nenhuma atualização de parâmetros."""
    return evaluate_series(checkpoint.config, checkpoint.params, target.test)


def _target_windows(cfg: ModelConfig, target: PreparedData, n_points: int) -> EncodedSeries:
    available = target.train.window_count(cfg.lookback)
    if n_points > available:
        raise ValueError(f"n_points={n_points} excede as {available} janelas de treino do alvo.")
    return target.train.head(n_points + cfg.lookback - 1)


def finetune(checkpoint: Checkpoint, target: PreparedData, p: FinetunePolicy, seed: int) -> Checkpoint:
    """
    Re-treino parcial com as n_points primeiras janelas de treino do alvo.

    n_points = 0 devolve o próprio checkpoint. Grupos em p.freeze não mudam.
    """
    if p.n_points == 0:
        return checkpoint
    cfg = checkpoint.config
    subset = _target_windows(cfg, target, p.n_points)
    tc = TrainConfig(
        learning_rate=p.learning_rate,
        max_epochs=p.max_epochs,
        patience=p.patience,
        seed=derive_seed(seed, "finetune", p.n_points),
    )
    trainable = checkpoint.params.trainable_names(p.freeze)
    params, history = fit(cfg, tc, checkpoint.params, subset, target.val, trainable=trainable)
    return Checkpoint(
        config=cfg,
        params=params,
        target_scaler=target.scaler.to_dict(),
        meta={**checkpoint.meta, "finetuned_points": p.n_points, "finetune_epochs": int(len(history))},
    )


def train_scratch(cfg: ModelConfig, tc: TrainConfig, target: PreparedData, n_points: int, seed: int) -> ModelParams:
    """Braço de comparação: mesma inicialização da semente, todas as camadas, mesmas n janelas."""
    params = init_params(cfg, seed)
    if n_points == 0:
        return params
    subset = _target_windows(cfg, target, n_points)
    scratch_tc = replace(tc, seed=derive_seed(seed, "scratch", n_points))
    trained, _ = fit(cfg, scratch_tc, params, subset, target.val)
    return trained


def run_cell(
    exp: ExperimentConfig, checkpoint: Checkpoint, target: PreparedData, n_points: int, seed: int
) -> Dict[str, float]:
    """RMSE de teste dos dois braços para uma célula (n, semente)."""
    tuned = finetune(checkpoint, target, exp.policy.with_points(n_points), seed)
    scratch = train_scratch(exp.model, exp.pretrain, target, n_points, seed)
    return {
        "pretrained": evaluate_series(exp.model, tuned.params, target.test),
        "scratch": evaluate_series(exp.model, scratch, target.test),
    }


def aggregate_cells(raw: pd.DataFrame) -> pd.DataFrame:
    """
    Por n: média e desvio (populacional) de cada braço e duas reduções percentuais.

    reduction_per_seed_avg = média de (scratch_i - pre_i)/scratch_i * 100;
    reduction_of_means = (média scratch - média pre)/média scratch * 100.
    """
    wide = raw.pivot_table(index=["n", "seed"], columns="arm", values="rmse").reset_index()
    rows = []
    for n, group in wide.groupby("n", sort=True):
        pre = group["pretrained"].to_numpy(dtype=np.float64)
        scratch = group["scratch"].to_numpy(dtype=np.float64)
        rows.append(
            {
                "n": int(n),
                "pretrained_mean": float(pre.mean()),
                "pretrained_std": float(pre.std()),
                "scratch_mean": float(scratch.mean()),
                "scratch_std": float(scratch.std()),
                "reduction_per_seed_avg": float(np.mean((scratch - pre) / scratch * 100.0)),
                "reduction_of_means": float((scratch.mean() - pre.mean()) / scratch.mean() * 100.0),
            }
        )
    return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)


def missing_cells(raw: pd.DataFrame, grid: Iterable[int], seeds: Iterable[int]) -> List[Tuple[int, int, str]]:
    present = {(int(r.n), int(r.seed), str(r.arm)) for r in raw.itertuples(index=False)}
    return [(n, s, arm) for n in grid for s in seeds for arm in ARMS if (n, s, arm) not in present]


def _read_cells(path: Path) -> pd.DataFrame:
    if not path.exists():
        return pd.DataFrame(columns=RAW_COLUMNS)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                # linha truncada por interrupção durante a escrita
                logger.warning("Ignorando linha incompleta em %s", path)
    frame = pd.DataFrame(records, columns=RAW_COLUMNS)
    return frame.drop_duplicates(subset=["n", "seed", "arm"], keep="first")


def _append_cells(path: Path, n: int, seed: int, result: Mapping[str, float]) -> None:
    # uma linha truncada não pode engolir a próxima célula
    dangling = path.exists() and path.read_bytes()[-1:] not in (b"", b"\n")
    with open(path, "a", encoding="utf-8") as fh:
        if dangling:
            fh.write("\n")
        for arm in ARMS:
            fh.write(json.dumps({"n": n, "seed": seed, "arm": arm, "rmse": result[arm]}) + "\n")
        fh.flush()


_WORKER: Dict[str, Any] = {}


def _init_worker(exp: ExperimentConfig, source: PreparedData, target: PreparedData) -> None:
    _WORKER.update(exp=exp, source=source, target=target)


def _pretrain_job(seed: int) -> Checkpoint:
    return pretrain_one(_WORKER["exp"].model, _WORKER["exp"].pretrain, _WORKER["source"], seed)


def _cell_job(args: Tuple[Checkpoint, int, int]) -> Tuple[int, int, Dict[str, float]]:
    checkpoint, n, seed = args
    return n, seed, run_cell(_WORKER["exp"], checkpoint, _WORKER["target"], n, seed)


def _checkpoint_path(out_dir: Path, seed: int) -> Path:
    return out_dir / "checkpoints" / f"pretrained_seed{seed}.ntar"


def prediction_series(
    exp: ExperimentConfig, zero_shot: Checkpoint, tuned: Checkpoint, target: PreparedData
) -> pd.DataFrame:
    """Série de teste do alvo (normalizada) com as predições zero-shot e fine-tuned."""
    ends = target.test.window_ends(exp.model.lookback)
    return pd.DataFrame(
        {
            "t": target.test.times[ends],
            "y": target.test.targets[ends],
            "y_hat_zero_shot": predict_values(exp.model, zero_shot.params, target.test),
            "y_hat_finetuned": predict_values(exp.model, tuned.params, target.test),
        },
        columns=SERIES_COLUMNS,
    )


def run_experiment(
    source: Dataset,
    target: Dataset,
    exp: ExperimentConfig,
    out_dir: Optional[str] = None,
    jobs: int = 1,
) -> TransferReport:
    """
    Grade completa: para cada (n, semente), RMSE de teste do modelo pré-treinado
    + fine-tuned e do modelo treinado do zero nas mesmas n janelas.

    Com out_dir, checkpoints de pré-treino e células concluídas ficam em disco
    e são reaproveitados numa nova chamada.
    """
    source_data = prepare_dataset(source, exp.model)
    target_data = prepare_dataset(target, exp.model)
    max_points = target_data.train.window_count(exp.model.lookback)
    if max(exp.grid) > max_points:
        raise ValueError(f"Grade pede {max(exp.grid)} janelas; o treino do alvo tem {max_points}.")

    root = Path(out_dir) if out_dir is not None else None
    cells_path = root / "cells.jsonl" if root is not None else None
    done = _read_cells(cells_path) if cells_path is not None else pd.DataFrame(columns=RAW_COLUMNS)
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)

    checkpoints: Dict[int, Checkpoint] = {}
    for seed in exp.seeds:
        if root is not None and _checkpoint_path(root, seed).exists():
            checkpoints[seed] = load_checkpoint(str(_checkpoint_path(root, seed)))
            logger.info("Reaproveitando checkpoint de pré-treino da seed %d.", seed)
    pending_seeds = [s for s in exp.seeds if s not in checkpoints]

    executor = (
        ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(exp, source_data, target_data))
        if jobs > 1
        else None
    )
    try:
        if executor is not None:
            trained = dict(zip(pending_seeds, executor.map(_pretrain_job, pending_seeds)))
        else:
            trained = {s: pretrain_one(exp.model, exp.pretrain, source_data, s) for s in pending_seeds}
        for seed, checkpoint in trained.items():
            checkpoints[seed] = checkpoint
            if root is not None:
                save_checkpoint(
                    str(_checkpoint_path(root, seed)),
                    checkpoint.config,
                    checkpoint.params,
                    checkpoint.target_scaler,
                    checkpoint.meta,
                )

        todo = [(n, seed) for n in exp.grid for seed in exp.seeds if missing_cells(done, [n], [seed])]
        results: List[Dict[str, Any]] = done.to_dict("records")
        jobs_iter: Iterable[Tuple[int, int, Dict[str, float]]]
        if executor is not None:
            jobs_iter = executor.map(_cell_job, [(checkpoints[s], n, s) for n, s in todo])
        else:
            jobs_iter = ((n, s, run_cell(exp, checkpoints[s], target_data, n, s)) for n, s in todo)
        for n, seed, result in jobs_iter:
            logger.info(
                "Célula n=%d seed=%d: pretrained=%.6f scratch=%.6f", n, seed, result["pretrained"], result["scratch"]
            )
            if cells_path is not None:
                _append_cells(cells_path, n, seed, result)
            results.extend({"n": n, "seed": seed, "arm": arm, "rmse": result[arm]} for arm in ARMS)
    finally:
        if executor is not None:
            executor.shutdown()

    raw = pd.DataFrame(results, columns=RAW_COLUMNS)
    raw = raw[raw["n"].isin(exp.grid) & raw["seed"].isin(exp.seeds)]
    raw = raw.astype({"n": int, "seed": int, "rmse": float}).drop_duplicates(subset=["n", "seed", "arm"], keep="first")
    raw = raw.sort_values(["n", "seed", "arm"]).reset_index(drop=True)
    aggregate = aggregate_cells(raw)

    first_seed = exp.seeds[0]
    tuned = finetune(checkpoints[first_seed], target_data, exp.policy.with_points(max(exp.grid)), first_seed)
    series = prediction_series(exp, checkpoints[first_seed], tuned, target_data)

    zero = aggregate[aggregate["n"] == 0]
    summary = {
        "grid": list(exp.grid),
        "seeds": list(exp.seeds),
        "arms": list(ARMS),
        "cells": int(len(raw)),
        "zero_shot_mean": float(zero["pretrained_mean"].iloc[0]) if len(zero) else None,
        "untrained_mean": float(zero["scratch_mean"].iloc[0]) if len(zero) else None,
        "source_scaler": source_data.scaler.to_dict(),
        "target_scaler": target_data.scaler.to_dict(),
        "freeze": list(exp.policy.freeze),
        "rows": aggregate.to_dict("records"),
    }
    report = TransferReport(raw=raw, aggregate=aggregate, summary=summary, series=series)
    if root is not None:
        report.write(str(root))
    return report


def load_report(report_dir: str) -> TransferReport:
    """Relê um relatório concluído; lista as células faltantes se estiver incompleto."""
    root = Path(report_dir)
    summary_path = root / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"summary.json não encontrado em {report_dir}")
    with open(summary_path, "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    raw_path = root / "raw.csv"
    raw = pd.read_csv(raw_path) if raw_path.exists() else pd.DataFrame(columns=RAW_COLUMNS)
    missing = missing_cells(raw, summary["grid"], summary["seeds"])
    if missing:
        raise MissingCellsError(missing)
    series_path = root / "series.csv"
    series = pd.read_csv(series_path) if series_path.exists() else pd.DataFrame(columns=SERIES_COLUMNS)
    return TransferReport(raw=raw, aggregate=aggregate_cells(raw), summary=summary, series=series)


def plot_tables(report: TransferReport) -> Dict[str, pd.DataFrame]:
    """
    Tabelas prontas para plot: curve (média ± desvio por n e braço, n = 0 é o
    zero-shot), table (reduções por n >= 1, uma coluna por n) e series.
    """
    agg = report.aggregate
    curve = agg[["n", "pretrained_mean", "pretrained_std", "scratch_mean", "scratch_std"]].copy()
    curve.insert(1, "pretrained_label", np.where(curve["n"] == 0, "zero-shot", "fine-tuned"))
    few_shot = agg[agg["n"] > 0]
    table = pd.DataFrame(
        [
            ["reduction_per_seed_avg", *few_shot["reduction_per_seed_avg"].tolist()],
            ["reduction_of_means", *few_shot["reduction_of_means"].tolist()],
        ],
        columns=["metric", *[str(int(n)) for n in few_shot["n"]]],
    )
    return {"curve": curve, "table": table, "series": report.series.copy()}
