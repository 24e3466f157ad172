"""
Arquivo de configuração plano (KEY=value, sintaxe dotenv).

Todas as chaves numéricas do projeto são declaradas aqui, com default e
descrição; `main.py --print-config` lista a tabela. Variáveis de ambiente não
são consultadas: uma execução é reproduzível a partir do manifesto e do arquivo.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from dotenv import dotenv_values


class ConfigError(ValueError):
    """Arquivo de configuração ausente, com chave desconhecida ou valor inválido."""


@dataclass(frozen=True)
class ConfigKey:
    name: str
    default: str
    help: str


CONFIG_KEYS: Tuple[ConfigKey, ...] = (
    ConfigKey("SIM_DURATION_H", "80", "Horas amostradas por cenário."),
    ConfigKey("SIM_SAMPLE_INTERVAL_S", "36", "Intervalo de amostragem dos sensores (s)."),
    ConfigKey("SIM_INTEGRATION_STEP_S", "3.6", "Passo de integração (s); o intervalo deve ser múltiplo."),
    ConfigKey("SIM_PERTURBATION_MIN", "0.01", "Desvio relativo mínimo de setpoint."),
    ConfigKey("SIM_PERTURBATION_MAX", "0.20", "Desvio relativo máximo de setpoint."),
    ConfigKey("SIM_STEADY_TOL", "5e-4", "Tolerância relativa da detecção de regime."),
    ConfigKey("SIM_STEADY_HOLD_S", "1800", "Janela (s) em que o regime precisa se manter."),
    ConfigKey("SIM_MAX_SETTLE_S", "21600", "Duração máxima (s) de uma fase antes de seguir adiante."),
    ConfigKey("SIM_WARMUP_MAX_S", "43200", "Duração máxima (s) do aquecimento não amostrado."),
    ConfigKey("SIM_SEED", "42", "Semente do cenário (sobrescrita por --seed)."),
    ConfigKey("DATA_SPLIT_TRAIN", "0.8", "Fração cronológica de treino."),
    ConfigKey("DATA_SPLIT_VAL", "0.1", "Fração cronológica de validação."),
    ConfigKey("DATA_SPLIT_TEST", "0.1", "Fração cronológica de teste."),
    ConfigKey("MODEL_HIDDEN_DIM", "64", "Estado oculto dos nós na GNN."),
    ConfigKey("MODEL_MP_ROUNDS", "2", "Rodadas de passagem de mensagens."),
    ConfigKey("MODEL_EMBED_DIM", "64", "Dimensão do embedding do fluxograma."),
    ConfigKey("MODEL_TF_LAYERS", "2", "Blocos do transformer."),
    ConfigKey("MODEL_TF_HEADS", "4", "Cabeças de atenção."),
    ConfigKey("MODEL_TF_MODEL_DIM", "64", "Largura do transformer (divisível pelas cabeças)."),
    ConfigKey("MODEL_TF_FF_DIM", "128", "Largura do feedforward do transformer."),
    ConfigKey("MODEL_LOOKBACK", "5", "Frames por janela (L)."),
    ConfigKey("MODEL_HEAD_HIDDEN", "64", "Largura das camadas ocultas do MLP de saída."),
    ConfigKey("TRAIN_LEARNING_RATE", "1e-3", "Passo do Adam no pré-treino / treino do zero."),
    ConfigKey("TRAIN_MAX_EPOCHS", "200", "Limite de épocas."),
    ConfigKey("TRAIN_BATCH_SIZE", "64", "Mini-lote quando há mais janelas que o limite de lote completo."),
    ConfigKey("TRAIN_FULL_BATCH_LIMIT", "1024", "Até quantas janelas treinar em lote completo."),
    ConfigKey("TRAIN_PATIENCE", "20", "Épocas sem melhora na validação antes de parar."),
    ConfigKey("TRAIN_SEED", "0", "Semente de inicialização e embaralhamento (sobrescrita por --seed)."),
    ConfigKey("FINETUNE_LEARNING_RATE", "1e-4", "Passo do Adam no fine-tuning."),
    ConfigKey("FINETUNE_MAX_EPOCHS", "200", "Limite de épocas do fine-tuning."),
    ConfigKey("FINETUNE_PATIENCE", "20", "Paciência do fine-tuning."),
    ConfigKey("FINETUNE_FREEZE", "gnn.message,gnn.update", "Grupos congelados, separados por vírgula."),
    ConfigKey("FINETUNE_FULL", "false", "true para re-treinar todos os grupos (ignora FINETUNE_FREEZE)."),
    ConfigKey("TRANSFER_GRID", "0,1,11,21,31,41,51", "Quantidades de janelas do alvo no fine-tuning."),
    ConfigKey("TRANSFER_SEEDS", "1,2,3,4,5,6,7,8,9", "Sementes do experimento."),
)

DEFAULTS: Dict[str, str] = {key.name: key.default for key in CONFIG_KEYS}


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    """
    Defaults + valores do arquivo (+ overrides da linha de comando).

    Raises:
        ConfigError: arquivo inexistente, chave desconhecida ou chave sem valor.
    """
    values = dict(DEFAULTS)
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
        loaded = dotenv_values(path)
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"Chaves desconhecidas em {path}: {', '.join(unknown)}")
        empty = sorted(name for name, value in loaded.items() if value is None or not value.strip())
        if empty:
            raise ConfigError(f"Chaves sem valor em {path}: {', '.join(empty)}")
        values.update({name: value.strip() for name, value in loaded.items() if value is not None})
    values.update(overrides or {})
    return values


def parse_int_list(raw: str) -> Tuple[int, ...]:
    try:
        return tuple(int(item) for item in raw.split(",") if item.strip())
    except ValueError as exc:
        raise ConfigError(f"Lista de inteiros inválida: {raw!r}") from exc


def parse_name_list(raw: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in raw.split(",") if item.strip())


def parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "sim"):
        return True
    if lowered in ("0", "false", "no", "nao", "não"):
        return False
    raise ConfigError(f"Valor booleano inválido: {raw!r}")


def split_fractions(values: Dict[str, str]) -> Tuple[float, float, float]:
    return (
        float(values["DATA_SPLIT_TRAIN"]),
        float(values["DATA_SPLIT_VAL"]),
        float(values["DATA_SPLIT_TEST"]),
    )


def describe_config() -> List[str]:
    """Linhas 'CHAVE=default  # descrição' para --print-config."""
    width = max(len(f"{key.name}={key.default}") for key in CONFIG_KEYS)
    return [f"{f'{key.name}={key.default}':<{width}}  # {key.help}" for key in CONFIG_KEYS]
