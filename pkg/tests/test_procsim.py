"""Testes para o simulador de bancada dos loops de amônia."""
import json
import os
import tempfile
import unittest
from collections import deque
from dataclasses import replace
from unittest.mock import patch

import numpy as np

from flowgraph import SensorKind, UnitKind, dataset_to_dict, encode_frames, validate_topology
from procsim import (
    CONTROLLER_TAGS,
    ProcessConstants,
    ScenarioConfig,
    SimulationDivergence,
    StreamState,
    controlled_variables,
    default_process,
    detect_steady_state,
    elemental_balance,
    export_constants,
    idle_state,
    nh3_mass_fraction,
    process_layout,
    run_scenario,
    sample_frame,
    step_process,
    trim_history,
)

DT = 3.6

SHORT = ScenarioConfig(
    duration_h=1.0,
    sample_interval=36.0,
    integration_step=3.6,
    steady_state_tolerance=1e-3,
    steady_state_hold=360.0,
    max_settle=1800.0,
    warmup_max=3600.0,
    seed=42,
)


def simulate(variant, steps, state=None):
    if state is None:
        _, state, _ = default_process(variant)
    for _ in range(steps):
        state = step_process(variant, state, DT)
    return state


class TestLayouts(unittest.TestCase):
    """Testes para as topologias A e B."""

    def test_same_units_different_wiring(self):
        """Testa mesmas unidades, mesmos tipos e ligações diferentes."""
        a = process_layout("A").topology
        b = process_layout("B").topology
        self.assertEqual(validate_topology(a), [])
        self.assertEqual(validate_topology(b), [])
        self.assertEqual({n.node_id for n in a.nodes}, {n.node_id for n in b.nodes})
        self.assertEqual(a.unit_kind_counts(), b.unit_kind_counts())
        self.assertEqual(a.unit_kind_counts()[UnitKind.COMPRESSOR], 2)
        self.assertNotEqual(a.edge_pairs(), b.edge_pairs())

    def test_flash_position(self):
        """Testa o flash depois do reator em A e antes do reator em B."""
        a = process_layout("A").topology.edge_pairs()
        b = process_layout("B").topology.edge_pairs()
        self.assertIn(("E-101", "V-101"), a)
        self.assertIn(("V-101", "S-101"), a)
        self.assertIn(("E-101", "V-101"), b)
        self.assertIn(("V-101", "K-102"), b)
        self.assertIn(("R-101", "S-101"), b)

    def test_target_sensor_on_product_edge(self):
        """Testa o analisador de NH3 no produto e fora das entradas."""
        for variant, edge in (("A", "s8"), ("B", "s5")):
            layout = process_layout(variant)
            topology = layout.topology
            target = topology.sensor_by_id[topology.target_sensor]
            self.assertEqual(target.location, edge)
            self.assertEqual(target.kind, SensorKind.COMPOSITION)
            self.assertNotIn(topology.target_sensor, topology.input_slots)
            self.assertEqual(topology.edges[topology.edge_index[edge]].dst, "PROD")

    def test_unknown_variant(self):
        """Testa variante inexistente."""
        with self.assertRaises(ValueError):
            process_layout("C")


class TestStepProcess(unittest.TestCase):
    """Testes para step_process e os balanços."""

    def test_elemental_balance_every_step(self):
        """Testa resíduo de N e H abaixo de 1e-6 a cada passo nas duas variantes."""
        for variant in ("A", "B"):
            _, state, _ = default_process(variant)
            for _ in range(300):
                new = step_process(variant, state, DT)
                residual = elemental_balance(variant, state, new, DT)
                self.assertLess(abs(residual["N"]), 1e-6, variant)
                self.assertLess(abs(residual["H"]), 1e-6, variant)
                state = new

    def test_loops_settle_to_setpoints(self):
        """Testa que as quatro malhas chegam a 0,1% do setpoint."""
        for variant in ("A", "B"):
            state = simulate(variant, 8000)
            setpoints = np.array([state.controllers[tag].setpoint for tag in CONTROLLER_TAGS])
            np.testing.assert_allclose(controlled_variables(state), setpoints, rtol=1e-3, err_msg=variant)

    def test_product_purity_plausible(self):
        """Testa fração mássica de NH3 no produto entre 0,9 e 1 após o transiente."""
        for variant in ("A", "B"):
            layout = process_layout(variant)
            frame = sample_frame(layout, simulate(variant, 3000))
            self.assertGreater(frame.target, 0.9)
            self.assertLess(frame.target, 1.0)

    def test_variants_settle_to_different_targets(self):
        """Testa que a mesma fiação de unidades em outra ordem leva a outra pureza de regime."""
        targets = {
            variant: sample_frame(process_layout(variant), simulate(variant, 3000)).target
            for variant in ("A", "B")
        }
        self.assertGreater(abs(targets["A"] - targets["B"]), 5e-3)

    def test_idle_state_stays_idle(self):
        """Testa que sem carga e sem inventário nada passa a escoar."""
        state = idle_state("A")
        for _ in range(50):
            state = step_process("A", state, DT)
        for stream in state.streams.values():
            self.assertEqual(stream.total_flow, 0.0)
        self.assertEqual(state.flash_holdup, 0.0)

    def test_step_is_pure(self):
        """Testa que o estado de entrada não é alterado e o passo é determinístico."""
        _, state, _ = default_process("B")
        holdup = state.holdup.copy()
        first = step_process("B", state, DT)
        second = step_process("B", state, DT)
        np.testing.assert_array_equal(state.holdup, holdup)
        np.testing.assert_array_equal(first.holdup, second.holdup)
        self.assertAlmostEqual(first.time, DT)

    def test_divergence_reported(self):
        """Testa SimulationDivergence com o nome da variável."""
        _, state, _ = default_process("A")
        streams = dict(state.streams)
        streams["s10"] = StreamState(np.array([np.nan, 1.0, 1.0]), 280.0, 200.0)
        with self.assertRaises(SimulationDivergence) as ctx:
            step_process("A", replace(state, streams=streams), DT)
        self.assertTrue(ctx.exception.variable)

    def test_nh3_mass_fraction(self):
        """Testa fração mássica: NH3 puro = 1, vazão zero = 0."""
        self.assertEqual(nh3_mass_fraction(np.array([0.0, 0.0, 3.0])), 1.0)
        self.assertEqual(nh3_mass_fraction(np.zeros(3)), 0.0)


class TestSteadyState(unittest.TestCase):
    """Testes para detect_steady_state."""

    def test_constant_signal(self):
        """Testa sinal constante por toda a janela."""
        times = np.arange(0.0, 400.0, 36.0)
        self.assertTrue(detect_steady_state(times, np.ones((len(times), 2)), 1e-3, 360.0))

    def test_window_too_short(self):
        """Testa histórico mais curto que a janela."""
        self.assertFalse(detect_steady_state([0.0, 36.0], [[1.0], [1.0]], 1e-3, 360.0))

    def test_drifting_signal(self):
        """Testa sinal com variação acima da tolerância."""
        times = np.arange(0.0, 400.0, 36.0)
        values = 1.0 + 0.01 * times / 400.0
        self.assertFalse(detect_steady_state(times, values, 1e-3, 360.0))


    def test_decaying_oscillation_settles(self):
        """Testa oscilação amortecida: fora do regime no início, em regime depois de acomodar."""
        times = np.arange(0.0, 20000.0, 36.0)
        values = 1.0 + 0.5 * np.exp(-times / 300.0) * np.cos(times / 50.0)
        early = times <= 2000.0
        self.assertFalse(detect_steady_state(times[early], values[early], 1e-3, 1800.0))
        self.assertTrue(detect_steady_state(times, values, 1e-3, 1800.0))

    def test_rolling_history_with_hold_off_the_sampling_grid(self):
        """Testa hold = 1000 s com amostras a cada 36 s: o histórico aparado ainda detecta o regime."""
        times, values = deque(), deque()
        hits = 0
        for k in range(200):
            times.append(36.0 * k)
            values.append(np.array([1.0]))
            trim_history(times, values, 1000.0)
            self.assertGreaterEqual(times[-1] - times[0], min(1000.0, times[-1]))
            hits += detect_steady_state(times, values, 1e-3, 1000.0)
        # regime possível a partir de t = 1008 s (k = 28)
        self.assertEqual(hits, 200 - 28)

    def test_scenario_detects_with_hold_off_the_sampling_grid(self):
        """Testa que run_scenario encontra o regime com SIM_STEADY_HOLD_S = 1000."""
        results = []

        def recording(*args, **kwargs):
            result = detect_steady_state(*args, **kwargs)
            results.append(result)
            return result

        cfg = replace(SHORT, duration_h=6.0, steady_state_hold=1000.0, max_settle=6 * 3600.0)
        with patch("procsim.detect_steady_state", side_effect=recording):
            run_scenario("A", cfg)
        self.assertGreater(sum(results), 0)


class TestScenario(unittest.TestCase):
    """Testes para ScenarioConfig e run_scenario."""

    def test_default_sample_count(self):
        """Testa 80 h a cada 36 s -> 8000 frames, 10 subpassos."""
        cfg = ScenarioConfig()
        self.assertEqual(cfg.num_samples, 8000)
        self.assertEqual(cfg.substeps, 10)

    def test_config_validation(self):
        """Testa intervalo que não é múltiplo do passo e faixa de perturbação inválida."""
        with self.assertRaises(ValueError):
            ScenarioConfig(sample_interval=36.0, integration_step=5.0)
        with self.assertRaises(ValueError):
            ScenarioConfig(perturbation_fraction_range=(0.3, 0.1))
        with self.assertRaises(ValueError):
            ScenarioConfig(duration_h=0.0)

    def test_short_scenario(self):
        """Testa frames, tempos, alvo e leituras de um cenário curto."""
        dataset = run_scenario("A", SHORT)
        topology = dataset.topology
        self.assertEqual(len(dataset.frames), 100)
        self.assertEqual(dataset.frames[1].time - dataset.frames[0].time, 36.0)
        self.assertEqual(dataset.meta["variant"], "A")
        self.assertEqual(dataset.meta["seed"], 42)
        for frame in dataset.frames:
            self.assertEqual(set(frame.readings), set(topology.input_slots))
            self.assertTrue(0.0 < frame.target <= 1.0)
        self.assertGreater(np.std(dataset.targets()), 0.0)

    def test_zero_perturbation_keeps_target_constant(self):
        """Testa faixa de perturbação (0, 0): após o aquecimento o alvo não varia."""
        cfg = replace(
            SHORT,
            perturbation_fraction_range=(0.0, 0.0),
            steady_state_tolerance=5e-4,
            steady_state_hold=1800.0,
            warmup_max=12 * 3600.0,
        )
        targets = run_scenario("A", cfg).targets()
        self.assertLess(np.ptp(targets), 1e-6)

    def test_target_never_in_features(self):
        """Testa que o valor do alvo não aparece nas matrizes de entrada."""
        dataset = run_scenario("B", SHORT)
        topology = dataset.topology
        nodes, edges = encode_frames(topology, dataset.frames)
        row = topology.edge_index[topology.sensor_by_id[topology.target_sensor].location]
        composition = SensorKind.COMPOSITION.index
        self.assertTrue(np.all(edges[:, row, composition] == 0.0))
        self.assertTrue(np.all(edges[:, row, 7 + composition] == 0.0))
        self.assertTrue(np.all(nodes[:, :, 8 + composition] == 0.0))

    def test_reproducible_from_seed(self):
        """Testa mesma semente -> dataset idêntico; outra semente -> dataset diferente."""
        first = dataset_to_dict(run_scenario("A", SHORT))
        second = dataset_to_dict(run_scenario("A", SHORT))
        other = dataset_to_dict(run_scenario("A", replace(SHORT, seed=7)))
        self.assertEqual(json.dumps(first), json.dumps(second))
        self.assertNotEqual(json.dumps(first["frames"]), json.dumps(other["frames"]))

    def test_export_constants(self):
        """Testa a tabela JSON de constantes com valor, unidade e descrição."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "constants.json")
            export_constants(path, ProcessConstants(holdup_capacity=10000.0))
            with open(path, "r", encoding="utf-8") as fh:
                table = json.load(fh)
        self.assertEqual(table["holdup_capacity"]["value"], 10000.0)
        self.assertEqual(table["reactor_beds"]["value"], 3)
        self.assertEqual(table["feed_pressure"]["unit"], "bar")
        self.assertTrue(table["x_max"]["doc"])


if __name__ == "__main__":
    unittest.main()
