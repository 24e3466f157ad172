"""Configuração do pytest: os módulos de src são importados pelo nome (from flowgraph import ...)."""
import sys
from pathlib import Path

ROOT = Path(__file__).parent

# src primeiro, para que testes e módulos compartilhem a mesma identidade de import
sys.path.insert(0, str(ROOT))
sys.path.insert(0, str(ROOT / "src"))
