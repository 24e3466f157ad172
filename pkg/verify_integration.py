#!/usr/bin/env python3
"""Script para verificar o pipeline completo em escala de bancada (simulação, balanços, transferência)."""
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, 'src')

DESK_CONFIG = Path(__file__).parent / "data" / "desk_config.env"


def test_imports():
    """Testa se todos os módulos importam corretamente."""
    print("=== Verificando Imports ===\n")

    modules = ["prng", "flowgraph", "pid_control", "procsim", "neural", "model", "training", "transfer", "config", "main"]
    for name in modules:
        try:
            __import__(name)
            print(f"✅ {name}: OK")
        except Exception as e:
            print(f"❌ {name}: ERRO - {e}")
            return False
    return True


def test_simulation(workdir):
    """Gera os datasets A e B com os defaults e confere tamanho e reprodutibilidade."""
    print("\n=== Simulação (80 h, amostras a cada 36 s) ===\n")

    from config import load_config, split_fractions
    from flowgraph import save_dataset
    from procsim import ScenarioConfig, run_scenario

    values = load_config()
    cfg = ScenarioConfig.from_config(values)
    for variant in ("A", "B"):
        dataset = run_scenario(variant, cfg, split_fractions=split_fractions(values))
        path = workdir / f"{variant}.json"
        save_dataset(dataset, str(path))
        if len(dataset.frames) != 8000:
            print(f"  ❌ {variant}: {len(dataset.frames)} frames (esperado 8000)")
            return False
        print(f"  ✅ {variant}: {len(dataset.frames)} frames")

    again = workdir / "A-again.json"
    save_dataset(run_scenario("A", cfg, split_fractions=split_fractions(values)), str(again))
    if again.read_bytes() != (workdir / "A.json").read_bytes():
        print("  ❌ Mesma configuração gerou datasets diferentes")
        return False
    print("  ✅ Mesma configuração -> mesmo arquivo")
    return True


def test_balances():
    """Confere o balanço de N e H a cada passo e a acomodação das malhas."""
    print("\n=== Balanços e malhas de controle ===\n")

    import numpy as np
    from procsim import CONTROLLER_TAGS, controlled_variables, default_process, elemental_balance, step_process

    for variant in ("A", "B"):
        _, state, _ = default_process(variant)
        worst = 0.0
        for _ in range(8000):
            new = step_process(variant, state, 3.6)
            residual = elemental_balance(variant, state, new, 3.6)
            worst = max(worst, abs(residual["N"]), abs(residual["H"]))
            state = new
        setpoints = np.array([state.controllers[tag].setpoint for tag in CONTROLLER_TAGS])
        deviation = float(np.max(np.abs(controlled_variables(state) - setpoints) / np.abs(setpoints)))
        ok = worst < 1e-6 and deviation < 1e-3
        mark = "✅" if ok else "❌"
        print(f"  {mark} {variant}: resíduo máximo {worst:.2e}, desvio das malhas {deviation:.2e}")
        if not ok:
            return False
    return True


def test_transfer(workdir):
    """Roda a grade A -> B com a configuração de bancada e confere a tendência e o report."""
    print("\n=== Transferência A -> B (configuração de bancada) ===\n")

    from main import main as cli

    out = workdir / "experiment"
    code = cli([
        "experiment", "--source", str(workdir / "A.json"), "--target", str(workdir / "B.json"),
        "--config", str(DESK_CONFIG), "--out", str(out),
    ])
    if code != 0:
        print(f"  ❌ experiment terminou com código {code}")
        return False

    import pandas as pd
    aggregate = pd.read_csv(out / "aggregate.csv")
    zero = aggregate[aggregate["n"] == 0].iloc[0]
    if zero["pretrained_mean"] < zero["scratch_mean"]:
        print(f"  ✅ Zero-shot {zero['pretrained_mean']:.4f} < sem treino {zero['scratch_mean']:.4f}")
    else:
        print(f"  ❌ Zero-shot {zero['pretrained_mean']:.4f} >= sem treino {zero['scratch_mean']:.4f}")
        return False

    few = aggregate[aggregate["n"] > 0]
    wins = int((few["pretrained_mean"] < few["scratch_mean"]).sum())
    mark = "✅" if wins >= 4 else "❌"
    print(f"  {mark} Fine-tuned melhor que do zero em {wins} de {len(few)} valores de n")
    if wins < 4:
        return False

    snapshots = []
    for _ in range(2):
        if cli(["report", "--report-dir", str(out)]) != 0:
            print("  ❌ report falhou")
            return False
        snapshots.append({p.name: p.read_bytes() for p in sorted((out / "plots").glob("*.csv"))})
    if snapshots[0] != snapshots[1]:
        print("  ❌ report gerou arquivos diferentes na segunda execução")
        return False
    print("  ✅ report idempotente")
    return True


def main():
    print("=" * 50)
    print("Verificação do soft sensor em escala de bancada")
    print("=" * 50)

    all_ok = True

    if not test_imports():
        all_ok = False

    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        if all_ok and not test_simulation(workdir):
            all_ok = False
        if all_ok and not test_balances():
            all_ok = False
        if all_ok and "--sem-transferencia" not in sys.argv and not test_transfer(workdir):
            all_ok = False

    print("\n" + "=" * 50)
    if all_ok:
        print("✅ TODOS OS TESTES PASSARAM!")
    else:
        print("❌ ALGUNS TESTES FALHARAM")
    print("=" * 50)

    return 0 if all_ok else 1


if __name__ == "__main__":
    sys.exit(main())
