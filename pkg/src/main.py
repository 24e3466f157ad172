from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config import ConfigError, describe_config, load_config, split_fractions
from flowgraph import DatasetFormatError, export_frames_csv, load_dataset, save_dataset
from model import ModelConfig, save_checkpoint
from procsim import ProcessVariant, ScenarioConfig, SimulationDivergence, export_constants, run_scenario
from training import DegenerateTargetError, TrainConfig, TrainingDivergence, prepare_dataset, train
from transfer import ExperimentConfig, MissingCellsError, load_report, plot_tables, run_experiment

__version__ = "0.1.0"

logger = logging.getLogger(__name__)


class UsageError(ValueError):
    """Entrada ausente ou inválida na linha de comando (exit 2)."""


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """
    Proveniência de uma execução: gravado antes do cálculo e regravado no fim
    com os hashes dos artefatos emitidos.
    """

    command: str
    config_path: Optional[str]
    seeds: List[int]
    output_dir: str
    version: str = __version__
    config: Dict[str, str] = field(default_factory=dict)
    arguments: Dict[str, object] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    status: str = "running"

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        logger.info("Manifesto %s gravado em %s.", self.status, path)

    def hash_inputs(self, paths: Sequence[Path]) -> None:
        self.inputs = {str(p): sha256_file(p) for p in paths}

    def finish(self, path: Path, outputs: Sequence[Path]) -> None:
        self.outputs = {str(p): sha256_file(p) for p in sorted(outputs)}
        self.status = "completed"
        self.write(path)


def _require_file(path: str, what: str) -> Path:
    candidate = Path(path)
    if not candidate.is_file():
        raise UsageError(f"{what} não encontrado: {path}")
    return candidate


def _files_under(root: Path, exclude: Sequence[Path] = ()) -> List[Path]:
    skip = {p.resolve() for p in exclude}
    return sorted(p for p in root.rglob("*") if p.is_file() and p.resolve() not in skip)


def cmd_simulate(args: argparse.Namespace) -> int:
    overrides = {"SIM_SEED": str(args.seed)} if args.seed is not None else {}
    values = load_config(args.config, overrides)
    cfg = ScenarioConfig.from_config(values)
    out = Path(args.out)
    manifest = RunManifest(
        command="simulate",
        config_path=args.config,
        seeds=[cfg.seed],
        output_dir=str(out),
        config=values,
        arguments={"variant": args.variant},
    )
    manifest_path = out / "manifest.json"
    manifest.write(manifest_path)

    dataset = run_scenario(args.variant, cfg, split_fractions=split_fractions(values))
    dataset_path = out / "dataset.json"
    save_dataset(dataset, str(dataset_path))
    export_frames_csv(dataset, str(out / "frames.csv"))
    export_constants(str(out / "constants.json"))
    manifest.finish(manifest_path, [dataset_path, out / "frames.csv", out / "constants.json"])

    print(f"Processo {args.variant}: {len(dataset.frames)} frames gravados em {dataset_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    dataset_path = _require_file(args.dataset, "Dataset")
    overrides = {"TRAIN_SEED": str(args.seed)} if args.seed is not None else {}
    values = load_config(args.config, overrides)
    model_cfg = ModelConfig.from_config(values)
    tc = TrainConfig.from_config(values)
    out = Path(args.out)
    manifest = RunManifest(
        command="train", config_path=args.config, seeds=[tc.seed], output_dir=str(out), config=values
    )
    manifest.hash_inputs([dataset_path])
    manifest_path = out / "manifest.json"
    manifest.write(manifest_path)

    dataset = load_dataset(str(dataset_path))
    prepared = prepare_dataset(dataset, model_cfg)
    params, history = train(model_cfg, tc, dataset, prepared=prepared)

    checkpoint_path = out / "checkpoint.ntar"
    history_path = out / "history.csv"
    save_checkpoint(
        str(checkpoint_path),
        model_cfg,
        params,
        prepared.scaler.to_dict(),
        {"seed": tc.seed, "dataset": dataset.meta.get("process", "")},
    )
    history.to_csv(history_path, index=False)
    manifest.finish(manifest_path, [checkpoint_path, history_path])

    best = history.loc[history["val_rmse"].idxmin()]
    print(f"Treino concluído: {len(history)} épocas, melhor val_rmse={best['val_rmse']:.6f} (época {int(best['epoch'])})")
    print(f"Checkpoint: {checkpoint_path}")
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    source_path = _require_file(args.source, "Dataset de origem")
    target_path = _require_file(args.target, "Dataset alvo")
    if args.jobs < 1:
        raise UsageError("--jobs deve ser >= 1.")
    overrides = {"TRANSFER_SEEDS": args.seed} if args.seed is not None else {}
    values = load_config(args.config, overrides)
    exp = ExperimentConfig.from_config(values)
    out = Path(args.out)
    manifest = RunManifest(
        command="experiment",
        config_path=args.config,
        seeds=list(exp.seeds),
        output_dir=str(out),
        config=values,
        arguments={"jobs": args.jobs},
    )
    manifest.hash_inputs([source_path, target_path])
    manifest_path = out / "manifest.json"
    manifest.write(manifest_path)

    report = run_experiment(
        load_dataset(str(source_path)), load_dataset(str(target_path)), exp, out_dir=str(out), jobs=args.jobs
    )
    manifest.finish(manifest_path, _files_under(out, exclude=[manifest_path]))

    print(f"Experimento concluído: {len(report.raw)} células em {out}")
    print(report.aggregate.to_string(index=False))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    report_dir = Path(args.report_dir)
    if not report_dir.is_dir():
        raise UsageError(f"Diretório de relatório não encontrado: {report_dir}")
    plots = report_dir / "plots"
    manifest = RunManifest(command="report", config_path=None, seeds=[], output_dir=str(plots))
    report = load_report(str(report_dir))
    inputs = [report_dir / name for name in ("raw.csv", "summary.json", "series.csv") if (report_dir / name).exists()]
    manifest.hash_inputs(inputs)
    manifest.seeds = [int(s) for s in report.summary.get("seeds", [])]
    manifest_path = plots / "manifest.json"
    manifest.write(manifest_path)

    written: List[Path] = []
    for name, table in plot_tables(report).items():
        path = plots / f"{name}.csv"
        table.to_csv(path, index=False)
        written.append(path)
    manifest.finish(manifest_path, written)

    print(f"Tabelas de plot gravadas em {plots}: {', '.join(p.name for p in written)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Soft sensor GNN + transformer para fluxogramas de processo (simulação, treino, transferência)."
    )
    parser.add_argument("--print-config", action="store_true", help="Lista as chaves de configuração e sai.")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log em nível INFO.")
    sub = parser.add_subparsers(dest="command")

    sim = sub.add_parser("simulate", help="Gera um dataset com o simulador de bancada.")
    sim.add_argument("--variant", required=True, choices=[v.value for v in ProcessVariant], help="Processo A ou B.")
    sim.add_argument("--config", default=None, help="Arquivo KEY=value (opcional).")
    sim.add_argument("--out", required=True, help="Diretório de saída.")
    sim.add_argument("--seed", type=int, default=None, help="Sobrescreve SIM_SEED.")
    sim.set_defaults(handler=cmd_simulate)

    tr = sub.add_parser("train", help="Treina o soft sensor em um dataset.")
    tr.add_argument("--dataset", required=True, help="Arquivo de dataset (JSON).")
    tr.add_argument("--config", default=None, help="Arquivo KEY=value (opcional).")
    tr.add_argument("--out", required=True, help="Diretório de saída.")
    tr.add_argument("--seed", type=int, default=None, help="Sobrescreve TRAIN_SEED.")
    tr.set_defaults(handler=cmd_train)

    ex = sub.add_parser("experiment", help="Roda a grade de transferência origem -> alvo.")
    ex.add_argument("--source", required=True, help="Dataset do processo de origem.")
    ex.add_argument("--target", required=True, help="Dataset do processo alvo.")
    ex.add_argument("--config", default=None, help="Arquivo KEY=value (opcional).")
    ex.add_argument("--out", required=True, help="Diretório do relatório.")
    ex.add_argument("--jobs", type=int, default=1, help="Processos paralelos para sementes e células.")
    ex.add_argument("--seed", default=None, help="Sobrescreve TRANSFER_SEEDS (ex.: 5 ou 1,2,3).")
    ex.set_defaults(handler=cmd_experiment)

    rp = sub.add_parser("report", help="Gera CSVs prontos para plot a partir de um relatório.")
    rp.add_argument("--report-dir", required=True, help="Diretório produzido por 'experiment'.")
    rp.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.print_config:
        print("\n".join(describe_config()))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        return args.handler(args)
    except MissingCellsError as exc:
        print(str(exc))
        return 1
    except (UsageError, ConfigError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"Configuração inválida: {exc}")
        return 2
    except (DegenerateTargetError, SimulationDivergence, TrainingDivergence, RuntimeError, OSError) as exc:
        print(f"Falha na execução: {exc}")
        return 1
    except (KeyError, ValueError) as exc:
        # ValueError aqui vem da validação das dataclasses de configuração
        print(f"Configuração inválida: {exc}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
