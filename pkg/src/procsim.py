"""
Simulador dinâmico de bancada para os loops de síntese de amônia A e B.

Substitui um simulador rigoroso por um modelo de parâmetros concentrados:
balanços algébricos por unidade, atrasos de primeira ordem nas variáveis
intensivas, inventário de líquido no vaso de flash e quatro malhas PID
(FC-1 vazão de carga, FC-2 vazão de purga, LC-1 nível do V-101,
TC-1 temperatura de entrada do reator). Gera datasets do módulo flowgraph
perturbando setpoints e amostrando todos os sensores.

Todas as constantes ficam em ProcessConstants (exportável via
export_constants). A corrente de reciclo (S-101 -> M-101) é uma corrente de
corte: o misturador usa o valor do passo anterior, de modo que o inventário do
loop é holdup do flash + reciclo * dt e o balanço elementar fecha a cada passo.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from enum import Enum
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowgraph import (
    DEFAULT_SPLIT,
    Dataset,
    Edge,
    FlowsheetTopology,
    Node,
    SensorBinding,
    SensorKind,
    SnapshotFrame,
    UnitKind,
)
from pid_control import PIDController, pid_step
from prng import XorShift64Star

logger = logging.getLogger(__name__)

SPECIES = ("N2", "H2", "NH3")
MOLAR_MASS = np.array([28.0134, 2.01588, 17.03052])  # g/mol
HEAT_CAPACITY = np.array([29.1, 28.8, 35.1])  # J/(mol K)
STOICHIOMETRY = np.array([-1.0, -3.0, 2.0])  # N2 + 3 H2 -> 2 NH3
ATOMS_N = np.array([2.0, 0.0, 1.0])
ATOMS_H = np.array([0.0, 2.0, 3.0])

CONTROLLER_TAGS = ("FC-1", "FC-2", "LC-1", "TC-1")


class SimulationDivergence(RuntimeError):
    """Estado não finito durante a integração."""

    def __init__(self, time: float, variable: str) -> None:
        super().__init__(f"Simulação divergiu em t={time:.1f} s: variável '{variable}' não finita.")
        self.time = time
        self.variable = variable


class ProcessVariant(str, Enum):
    A = "A"
    B = "B"


def _const(value: Any, unit: str, doc: str) -> Any:
    return field(default=value, metadata={"unit": unit, "doc": doc})


@dataclass(frozen=True)
class ProcessConstants:
    """Tabela única de constantes do modelo concentrado."""

    feed_n2_fraction: float = _const(0.25, "-", "fração molar de N2 na carga (resto H2)")
    feed_temperature: float = _const(300.0, "K", "temperatura da carga")
    feed_pressure: float = _const(50.0, "bar", "pressão da carga")
    feed_flow_nominal: float = _const(100.0, "mol/s", "setpoint nominal do FC-1")
    feed_flow_max: float = _const(200.0, "mol/s", "vazão com válvula de carga 100% aberta")
    purge_flow_nominal: float = _const(5.0, "mol/s", "setpoint nominal do FC-2")
    purge_flow_max: float = _const(20.0, "mol/s", "vazão com válvula de purga 100% aberta")
    max_purge_fraction: float = _const(0.5, "-", "fração máxima do gás que pode ir para a purga")
    valve_tau: float = _const(10.0, "s", "constante de tempo das válvulas de vazão")
    k101_pressure_ratio: float = _const(4.0, "-", "razão de compressão do K-101")
    k102_pressure_ratio: float = _const(1.06, "-", "razão de compressão do K-102 (reciclo)")
    compressor_efficiency: float = _const(0.75, "-", "eficiência isentrópica")
    heat_capacity_ratio: float = _const(1.4, "-", "gamma para o aumento isentrópico de temperatura")
    compressor_tau: float = _const(30.0, "s", "atraso de T e P na saída dos compressores")
    heater_tau: float = _const(60.0, "s", "atraso térmico do aquecedor H-101")
    heater_duty_max: float = _const(8.0e6, "W", "carga térmica máxima do H-101")
    cooler_temperature: float = _const(280.0, "K", "temperatura de saída do resfriador E-101")
    cooler_tau: float = _const(60.0, "s", "atraso térmico do resfriador E-101")
    exchanger_pressure_factor: float = _const(0.99, "-", "P_saída/P_entrada em trocadores")
    reactor_inlet_temperature: float = _const(673.0, "K", "setpoint nominal do TC-1")
    reactor_beds: int = _const(3, "-", "leitos catalíticos em série")
    x_max: float = _const(0.25, "-", "conversão máxima de N2 por leito")
    conversion_slope: float = _const(0.015, "1/K", "a: inclinação da sigmoide de conversão")
    t_ref: float = _const(620.0, "K", "T_ref da sigmoide de conversão")
    p_ref: float = _const(200.0, "bar", "P_ref da conversão e da solubilidade")
    pressure_exponent: float = _const(1.0, "-", "b: expoente de pressão da conversão")
    equilibrium_cap0: float = _const(0.6, "-", "limite de equilíbrio em T_ref")
    equilibrium_cap_slope: float = _const(0.002, "1/K", "queda do limite de equilíbrio com T")
    interbed_cooling: float = _const(0.8, "-", "efetividade do resfriamento entre leitos")
    reaction_enthalpy: float = _const(92000.0, "J/mol", "calor liberado por mol de N2 reagido")
    reactor_tau: float = _const(120.0, "s", "inércia térmica da saída do reator")
    reactor_pressure_factor: float = _const(0.97, "-", "P_saída/P_entrada no reator")
    flash_c0: float = _const(0.9, "-", "c0: recuperação de NH3 em T_flash_ref")
    flash_c1: float = _const(0.01, "1/K", "c1: queda da recuperação com T")
    t_flash_ref: float = _const(280.0, "K", "T de referência do flash")
    solubility: float = _const(0.02, "-", "epsilon: fração de N2/H2 dissolvida em P_ref")
    holdup_capacity: float = _const(20000.0, "mol", "inventário de líquido com nível 1.0")
    level_nominal: float = _const(0.5, "-", "setpoint nominal do LC-1")
    liquid_outflow_max: float = _const(200.0, "mol/s", "vazão máxima de produto")

    def pressure_ratio(self, node_id: str) -> float:
        return self.k101_pressure_ratio if node_id == "K-101" else self.k102_pressure_ratio

    @property
    def feed_composition(self) -> np.ndarray:
        return np.array([self.feed_n2_fraction, 1.0 - self.feed_n2_fraction, 0.0])


DEFAULT_CONSTANTS = ProcessConstants()


def export_constants(path: str, constants: ProcessConstants = DEFAULT_CONSTANTS) -> None:
    """Grava a tabela de constantes (valor, unidade, descrição) como JSON de referência."""
    table = {
        f.name: {"value": getattr(constants, f.name), "unit": f.metadata["unit"], "doc": f.metadata["doc"]}
        for f in fields(constants)
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, ensure_ascii=False)


@dataclass(frozen=True, eq=False)
class StreamState:
    """Corrente: vazões molares (N2, H2, NH3) em mol/s, temperatura (K) e pressão (bar)."""
    molar_flow: np.ndarray
    temperature: float
    pressure: float

    @property
    def total_flow(self) -> float:
        return float(self.molar_flow.sum())

    @property
    def heat_capacity_flow(self) -> float:
        return float(self.molar_flow @ HEAT_CAPACITY)

    def nh3_mass_fraction(self) -> float:
        return nh3_mass_fraction(self.molar_flow)

    @classmethod
    def empty(cls, temperature: float = 298.15, pressure: float = 1.0) -> "StreamState":
        return cls(np.zeros(3), temperature, pressure)


def nh3_mass_fraction(moles: np.ndarray) -> float:
    mass = moles * MOLAR_MASS
    total = float(mass.sum())
    return float(mass[2] / total) if total > 0 else 0.0


@dataclass(frozen=True, eq=False)
class ProcessState:
    """
    Estado completo do simulador.

    Attributes:
        time: Segundos desde o início da simulação.
        streams: id da aresta -> corrente (mais a pseudo-corrente "purge").
        holdup: Inventário de líquido do V-101 por espécie (mol).
        flash_level: Nível do V-101 (0..1).
        controllers: Tag -> estado do PID.
        lags: Memórias dos filtros de primeira ordem.
        unit_outputs: Carga térmica / potência (kW) e vazão de purga por nó.
    """
    time: float
    streams: Dict[str, StreamState]
    holdup: np.ndarray
    flash_level: float
    controllers: Dict[str, PIDController]
    lags: Dict[str, float]
    unit_outputs: Dict[str, float] = field(default_factory=dict)

    @property
    def flash_holdup(self) -> float:
        return float(self.holdup.sum())


@dataclass(frozen=True)
class ProcessLayout:
    """Topologia de uma variante e a ordem de cálculo das unidades."""
    topology: FlowsheetTopology
    sequence: Tuple[Tuple[str, Tuple[str, ...], Tuple[str, ...]], ...]
    feed_edge: str
    product_edge: str
    recycle_edge: str


_NODES = (
    Node("FEED", UnitKind.FEED),
    Node("K-101", UnitKind.COMPRESSOR),
    Node("M-101", UnitKind.MIXER),
    Node("K-102", UnitKind.COMPRESSOR),
    Node("H-101", UnitKind.HEATER_COOLER),
    Node("R-101", UnitKind.REACTOR),
    Node("E-101", UnitKind.HEATER_COOLER),
    Node("V-101", UnitKind.FLASH_VESSEL),
    Node("PROD", UnitKind.PRODUCT),
    Node("S-101", UnitKind.PURGE_SPLITTER),
)

# (nó, entradas, saídas) em ordem topológica a partir da corrente de corte s10
_SEQUENCES = {
    ProcessVariant.A: (
        ("FEED", (), ("s1",)),
        ("K-101", ("s1",), ("s2",)),
        ("M-101", ("s2", "s10"), ("s3",)),
        ("K-102", ("s3",), ("s4",)),
        ("H-101", ("s4",), ("s5",)),
        ("R-101", ("s5",), ("s6",)),
        ("E-101", ("s6",), ("s7",)),
        ("V-101", ("s7",), ("s8", "s9")),
        ("S-101", ("s9",), ("s10",)),
    ),
    ProcessVariant.B: (
        ("FEED", (), ("s1",)),
        ("K-101", ("s1",), ("s2",)),
        ("M-101", ("s2", "s10"), ("s3",)),
        ("E-101", ("s3",), ("s4",)),
        ("V-101", ("s4",), ("s5", "s6")),
        ("K-102", ("s6",), ("s7",)),
        ("H-101", ("s7",), ("s8",)),
        ("R-101", ("s8",), ("s9",)),
        ("S-101", ("s9",), ("s10",)),
    ),
}

_PRODUCT_EDGE = {ProcessVariant.A: "s8", ProcessVariant.B: "s5"}
_TARGET_SENSOR = "AI-PROD"


def _edges_for(variant: ProcessVariant) -> Tuple[Edge, ...]:
    edges: List[Edge] = []
    for node_id, _, outputs in _SEQUENCES[variant]:
        if node_id == "V-101":
            liquid, vapor = outputs
            downstream = {ProcessVariant.A: "S-101", ProcessVariant.B: "K-102"}[variant]
            edges.append(Edge(liquid, "V-101", "PROD"))
            edges.append(Edge(vapor, "V-101", downstream))
            continue
        for out in outputs:
            consumer = next(n for n, inputs, _ in _SEQUENCES[variant] if out in inputs)
            edges.append(Edge(out, node_id, consumer))
    return tuple(sorted(edges, key=lambda e: int(e.edge_id[1:])))


def _sensors_for(edges: Sequence[Edge], product_edge: str) -> Tuple[SensorBinding, ...]:
    sensors: List[SensorBinding] = []
    for edge in edges:
        sensors.append(SensorBinding(f"FI-{edge.edge_id}", edge.edge_id, SensorKind.FLOW))
        sensors.append(SensorBinding(f"TI-{edge.edge_id}", edge.edge_id, SensorKind.TEMPERATURE))
        sensors.append(SensorBinding(f"PI-{edge.edge_id}", edge.edge_id, SensorKind.PRESSURE))
    sensors.append(SensorBinding("LI-V101", "V-101", SensorKind.LEVEL))
    sensors.append(SensorBinding("QI-H101", "H-101", SensorKind.DUTY))
    sensors.append(SensorBinding("QI-E101", "E-101", SensorKind.DUTY))
    sensors.append(SensorBinding("JI-K101", "K-101", SensorKind.POWER))
    sensors.append(SensorBinding("JI-K102", "K-102", SensorKind.POWER))
    sensors.append(SensorBinding("FI-S101", "S-101", SensorKind.FLOW))
    sensors.append(SensorBinding(_TARGET_SENSOR, product_edge, SensorKind.COMPOSITION))
    return tuple(sensors)


@lru_cache(maxsize=None)
def process_layout(variant: str) -> ProcessLayout:
    v = ProcessVariant(variant)
    edges = _edges_for(v)
    topology = FlowsheetTopology(
        nodes=_NODES,
        edges=edges,
        sensors=_sensors_for(edges, _PRODUCT_EDGE[v]),
        target_sensor=_TARGET_SENSOR,
    )
    return ProcessLayout(
        topology=topology,
        sequence=_SEQUENCES[v],
        feed_edge="s1",
        product_edge=_PRODUCT_EDGE[v],
        recycle_edge="s10",
    )


def default_controllers(constants: ProcessConstants = DEFAULT_CONSTANTS) -> Dict[str, PIDController]:
    """Esquema de controle: FC-1, FC-2, LC-1 e TC-1 sintonizados para o modelo concentrado."""
    k = constants
    return {
        "FC-1": PIDController(
            name="FC-1", gain_p=0.002, gain_i=0.001, setpoint=k.feed_flow_nominal,
            output_min=0.0, output_max=1.0, bias=k.feed_flow_nominal / k.feed_flow_max,
        ),
        "FC-2": PIDController(
            name="FC-2", gain_p=0.02, gain_i=0.01, setpoint=k.purge_flow_nominal,
            output_min=0.0, output_max=1.0, bias=k.purge_flow_nominal / k.purge_flow_max,
        ),
        # ação direta: nível acima do setpoint abre a saída de líquido
        "LC-1": PIDController(
            name="LC-1", gain_p=-200.0, gain_i=-0.5, setpoint=k.level_nominal,
            output_min=0.0, output_max=k.liquid_outflow_max, bias=47.0,
        ),
        "TC-1": PIDController(
            name="TC-1", gain_p=6000.0, gain_i=120.0, setpoint=k.reactor_inlet_temperature,
            output_min=0.0, output_max=k.heater_duty_max, bias=1.8e6,
        ),
    }


def _compressor_outlet_temperature(t_in: float, ratio: float, k: ProcessConstants) -> float:
    exponent = (k.heat_capacity_ratio - 1.0) / k.heat_capacity_ratio
    return t_in + t_in * (ratio ** exponent - 1.0) / k.compressor_efficiency


def default_process(
    variant: str, constants: ProcessConstants = DEFAULT_CONSTANTS
) -> Tuple[FlowsheetTopology, ProcessState, Dict[str, PIDController]]:
    """
    Topologia, estado inicial e controladores da variante A ou B.

    O estado inicial é uma estimativa grosseira do regime (reciclo ~ carga,
    nível nominal com NH3 puro); run_scenario faz o aquecimento até o regime.
    """
    layout = process_layout(variant)
    k = constants
    controllers = default_controllers(k)

    t_k101 = _compressor_outlet_temperature(k.feed_temperature, k.k101_pressure_ratio, k)
    p_loop = k.feed_pressure * k.k101_pressure_ratio
    lags = {
        "FC-1.flow": k.feed_flow_nominal,
        "FC-2.flow": k.purge_flow_nominal,
        "K-101.T": t_k101,
        "K-101.P": p_loop,
        "K-102.T": _compressor_outlet_temperature(0.5 * (t_k101 + k.cooler_temperature), k.k102_pressure_ratio, k),
        "K-102.P": p_loop * k.k102_pressure_ratio,
        "H-101.T": k.reactor_inlet_temperature,
        "E-101.T": k.cooler_temperature,
        "R-101.T": k.reactor_inlet_temperature + 100.0,
    }
    streams = {edge.edge_id: StreamState.empty() for edge in layout.topology.edges}
    streams["purge"] = StreamState.empty()
    streams[layout.recycle_edge] = StreamState(
        np.array([25.0, 75.0, 5.0]), k.cooler_temperature, p_loop
    )
    holdup = np.array([0.0, 0.0, k.level_nominal * k.holdup_capacity])
    state = ProcessState(
        time=0.0,
        streams=streams,
        holdup=holdup,
        flash_level=k.level_nominal,
        controllers=dict(controllers),
        lags=lags,
        unit_outputs={},
    )
    return layout.topology, state, controllers


def idle_state(variant: str, constants: ProcessConstants = DEFAULT_CONSTANTS) -> ProcessState:
    """Estado sem vazão, sem inventário e com controladores em repouso (ponto fixo)."""
    _, state, controllers = default_process(variant, constants)
    idle = {
        tag: replace(c, setpoint=0.0, bias=0.0, integral_state=0.0, last_measurement=None)
        for tag, c in controllers.items()
    }
    streams = {edge_id: StreamState.empty() for edge_id in state.streams}
    lags = dict(state.lags, **{"FC-1.flow": 0.0, "FC-2.flow": 0.0})
    return replace(state, streams=streams, holdup=np.zeros(3), flash_level=0.0, controllers=idle, lags=lags)


def _lag(previous: float, target: float, tau: float, dt: float) -> float:
    return previous + (1.0 - math.exp(-dt / tau)) * (target - previous)


def _mix(inlets: Sequence[StreamState]) -> StreamState:
    flow = np.sum([s.molar_flow for s in inlets], axis=0)
    capacities = [s.heat_capacity_flow for s in inlets]
    total_capacity = sum(capacities)
    if total_capacity > 0:
        temperature = sum(c * s.temperature for c, s in zip(capacities, inlets)) / total_capacity
    else:
        temperature = inlets[0].temperature
    active = [s.pressure for s in inlets if s.total_flow > 0] or [s.pressure for s in inlets]
    return StreamState(flow, temperature, min(active))


def _react(inlet: StreamState, k: ProcessConstants) -> StreamState:
    """Três leitos em série com conversão sigmoide, limite de equilíbrio e resfriamento entre leitos."""
    flow = inlet.molar_flow.copy()
    t_bed = inlet.temperature
    pressure_term = (inlet.pressure / k.p_ref) ** k.pressure_exponent
    t_out = t_bed
    for bed in range(k.reactor_beds):
        sigmoid = 1.0 / (1.0 + math.exp(-k.conversion_slope * (t_bed - k.t_ref)))
        cap = min(max(k.equilibrium_cap0 - k.equilibrium_cap_slope * (t_bed - k.t_ref), 0.0), 1.0)
        conversion = min(max(k.x_max * sigmoid * pressure_term, 0.0), 0.95 * cap)
        extent = conversion * min(flow[0], flow[1] / 3.0)
        flow = flow + extent * STOICHIOMETRY
        capacity = float(flow @ HEAT_CAPACITY)
        t_out = t_bed + (k.reaction_enthalpy * extent / capacity if capacity > 0 else 0.0)
        if bed < k.reactor_beds - 1:
            t_bed = t_out - k.interbed_cooling * (t_out - inlet.temperature)
    return StreamState(np.maximum(flow, 0.0), t_out, inlet.pressure * k.reactor_pressure_factor)


def step_process(
    topology_variant: str,
    s: ProcessState,
    dt: float,
    constants: ProcessConstants = DEFAULT_CONSTANTS,
) -> ProcessState:
    """
    Avança um passo explícito do modelo concentrado.

    Os controladores agem sobre as medições do estado atual; em seguida as
    unidades são calculadas em ordem topológica (o misturador usa o reciclo do
    passo anterior).
    """
    layout = process_layout(topology_variant)
    k = constants
    controllers = dict(s.controllers)
    lags = dict(s.lags)

    feed_valve, controllers["FC-1"] = pid_step(controllers["FC-1"], lags["FC-1.flow"], dt)
    purge_valve, controllers["FC-2"] = pid_step(controllers["FC-2"], lags["FC-2.flow"], dt)
    liquid_out, controllers["LC-1"] = pid_step(controllers["LC-1"], s.flash_level, dt)
    duty, controllers["TC-1"] = pid_step(controllers["TC-1"], lags["H-101.T"], dt)

    lags["FC-1.flow"] = _lag(lags["FC-1.flow"], feed_valve * k.feed_flow_max, k.valve_tau, dt)
    lags["FC-2.flow"] = _lag(lags["FC-2.flow"], purge_valve * k.purge_flow_max, k.valve_tau, dt)

    streams = dict(s.streams)
    outputs: Dict[str, float] = {}
    holdup = s.holdup
    level = s.flash_level
    kinds = {node.node_id: node.kind for node in layout.topology.nodes}

    for node_id, inputs, outs in layout.sequence:
        kind = kinds[node_id]
        if kind is UnitKind.FEED:
            streams[outs[0]] = StreamState(
                lags["FC-1.flow"] * k.feed_composition, k.feed_temperature, k.feed_pressure
            )

        elif kind is UnitKind.COMPRESSOR:
            inlet = streams[inputs[0]]
            ratio = k.pressure_ratio(node_id)
            t_target = _compressor_outlet_temperature(inlet.temperature, ratio, k)
            lags[f"{node_id}.T"] = _lag(lags[f"{node_id}.T"], t_target, k.compressor_tau, dt)
            lags[f"{node_id}.P"] = _lag(lags[f"{node_id}.P"], inlet.pressure * ratio, k.compressor_tau, dt)
            streams[outs[0]] = StreamState(inlet.molar_flow, lags[f"{node_id}.T"], lags[f"{node_id}.P"])
            outputs[node_id] = inlet.heat_capacity_flow * (t_target - inlet.temperature) / 1000.0

        elif kind is UnitKind.MIXER:
            streams[outs[0]] = _mix([streams[i] for i in inputs])

        elif kind is UnitKind.HEATER_COOLER:
            inlet = streams[inputs[0]]
            capacity = inlet.heat_capacity_flow
            if node_id == "H-101":
                t_target = inlet.temperature + (duty / capacity if capacity > 0 else 0.0)
                lags["H-101.T"] = _lag(lags["H-101.T"], t_target, k.heater_tau, dt)
                outputs[node_id] = duty / 1000.0
            else:
                lags[f"{node_id}.T"] = _lag(lags[f"{node_id}.T"], k.cooler_temperature, k.cooler_tau, dt)
                outputs[node_id] = capacity * (lags[f"{node_id}.T"] - inlet.temperature) / 1000.0
            streams[outs[0]] = StreamState(
                inlet.molar_flow, lags[f"{node_id}.T"], inlet.pressure * k.exchanger_pressure_factor
            )

        elif kind is UnitKind.REACTOR:
            adiabatic = _react(streams[inputs[0]], k)
            lags["R-101.T"] = _lag(lags["R-101.T"], adiabatic.temperature, k.reactor_tau, dt)
            streams[outs[0]] = StreamState(adiabatic.molar_flow, lags["R-101.T"], adiabatic.pressure)

        elif kind is UnitKind.FLASH_VESSEL:
            inlet = streams[inputs[0]]
            recovery = min(max(k.flash_c0 - k.flash_c1 * (inlet.temperature - k.t_flash_ref), 0.0), 1.0)
            dissolved = k.solubility * inlet.pressure / k.p_ref
            liquid_in = inlet.molar_flow * np.array([dissolved, dissolved, recovery])
            vapor = inlet.molar_flow - liquid_in

            total = float(holdup.sum())
            liquid_total = float(liquid_in.sum())
            if total > 0:
                composition = holdup / total
                max_out = total / dt
            elif liquid_total > 0:
                composition = liquid_in / liquid_total
                max_out = liquid_total
            else:
                composition = np.zeros(3)
                max_out = 0.0
            outflow = min(max(liquid_out, 0.0), max_out)
            overflow = (total + (liquid_total - outflow) * dt - k.holdup_capacity) / dt
            if overflow > 0:
                outflow = min(outflow + overflow, max_out)
            product = outflow * composition
            holdup = np.maximum(holdup + (liquid_in - product) * dt, 0.0)
            level = float(holdup.sum()) / k.holdup_capacity

            streams[outs[0]] = StreamState(product, inlet.temperature, inlet.pressure)
            streams[outs[1]] = StreamState(vapor, inlet.temperature, inlet.pressure)

        elif kind is UnitKind.PURGE_SPLITTER:
            inlet = streams[inputs[0]]
            total = inlet.total_flow
            purge = min(lags["FC-2.flow"], k.max_purge_fraction * total) if total > 0 else 0.0
            fraction = purge / total if total > 0 else 0.0
            purge_flow = inlet.molar_flow * fraction
            streams["purge"] = StreamState(purge_flow, inlet.temperature, inlet.pressure)
            streams[outs[0]] = StreamState(inlet.molar_flow - purge_flow, inlet.temperature, inlet.pressure)
            outputs[node_id] = float(purge_flow.sum())

    new_state = ProcessState(
        time=s.time + dt,
        streams=streams,
        holdup=holdup,
        flash_level=level,
        controllers=controllers,
        lags=lags,
        unit_outputs=outputs,
    )
    _check_finite(new_state)
    return new_state


def _check_finite(state: ProcessState) -> None:
    for stream_id, stream in state.streams.items():
        if not np.all(np.isfinite(stream.molar_flow)):
            raise SimulationDivergence(state.time, f"{stream_id}.molar_flow")
        if not (math.isfinite(stream.temperature) and math.isfinite(stream.pressure)):
            raise SimulationDivergence(state.time, f"{stream_id}.temperature/pressure")
    if not np.all(np.isfinite(state.holdup)):
        raise SimulationDivergence(state.time, "V-101.holdup")
    for name, value in state.lags.items():
        if not math.isfinite(value):
            raise SimulationDivergence(state.time, name)
    for tag, controller in state.controllers.items():
        if not math.isfinite(controller.integral_state):
            raise SimulationDivergence(state.time, f"{tag}.integral_state")


def loop_inventory(variant: str, state: ProcessState, dt: float) -> np.ndarray:
    """Inventário por espécie: holdup do flash + gás em trânsito na corrente de corte."""
    layout = process_layout(variant)
    return state.holdup + state.streams[layout.recycle_edge].molar_flow * dt


def elemental_balance(variant: str, prev: ProcessState, new: ProcessState, dt: float) -> Dict[str, float]:
    """
    Resíduo relativo de N e H de um passo: (entrada - saída - acúmulo) / entrada.

    Entrada = carga; saída = produto + purga; acúmulo = variação do inventário.
    """
    layout = process_layout(variant)
    feed = new.streams[layout.feed_edge].molar_flow * dt
    out = (new.streams[layout.product_edge].molar_flow + new.streams["purge"].molar_flow) * dt
    accumulation = loop_inventory(variant, new, dt) - loop_inventory(variant, prev, dt)
    residual = feed - out - accumulation
    result = {}
    for element, atoms in (("N", ATOMS_N), ("H", ATOMS_H)):
        scale = max(float(feed @ atoms), 1e-300)
        result[element] = float(residual @ atoms) / scale
    return result


def controlled_variables(state: ProcessState) -> np.ndarray:
    """Medições das malhas na ordem de CONTROLLER_TAGS."""
    return np.array(
        [state.lags["FC-1.flow"], state.lags["FC-2.flow"], state.flash_level, state.lags["H-101.T"]]
    )


def detect_steady_state(
    times: Sequence[float], values: Sequence[Sequence[float]], tol: float, hold: float
) -> bool:
    """
    True se toda variável ficou a ±tol (relativo) da sua média na janela final de `hold` s.

    values: matriz [n_amostras x n_variáveis] alinhada com times.
    """
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if t.size == 0 or t[-1] - t[0] < hold:
        return False
    window = v[t >= t[-1] - hold]
    mean = window.mean(axis=0)
    scale = np.maximum(np.abs(mean), 1e-12)
    return bool(np.all(np.abs(window - mean) <= tol * scale))


def trim_history(times: Deque[float], values: Deque[Any], hold: float) -> None:
    """
    Descarta amostras antigas mantendo a mais recente em ou antes de t[-1] - hold,
    de modo que o histórico cubra pelo menos `hold` s mesmo quando hold não é
    múltiplo do intervalo de amostragem.
    """
    while len(times) > 1 and times[1] <= times[-1] - hold:
        times.popleft()
        values.popleft()


@dataclass(frozen=True)
class ScenarioConfig:
    """
    Parâmetros de geração de cenário.

    Attributes:
        duration_h: Duração amostrada em horas.
        sample_interval: Intervalo de amostragem (s).
        integration_step: Passo de integração (s); o intervalo deve ser múltiplo inteiro.
        perturbation_fraction_range: Faixa do desvio relativo de setpoint.
        steady_state_tolerance: Tolerância relativa da detecção de regime.
        steady_state_hold: Janela (s) em que o regime deve se manter.
        max_settle: Tempo máximo (s) de uma fase antes de seguir adiante.
        warmup_max: Tempo máximo (s) do aquecimento não amostrado.
        seed: Semente de 64 bits.
    """
    duration_h: float = 80.0
    sample_interval: float = 36.0
    integration_step: float = 3.6
    perturbation_fraction_range: Tuple[float, float] = (0.01, 0.20)
    steady_state_tolerance: float = 5e-4
    steady_state_hold: float = 1800.0
    max_settle: float = 6 * 3600.0
    warmup_max: float = 12 * 3600.0
    seed: int = 42

    def __post_init__(self) -> None:
        if self.duration_h <= 0 or self.sample_interval <= 0 or self.integration_step <= 0:
            raise ValueError("Duração, intervalo de amostragem e passo devem ser positivos.")
        ratio = self.sample_interval / self.integration_step
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                "sample_interval deve ser múltiplo inteiro de integration_step "
                f"({self.sample_interval} / {self.integration_step})."
            )
        low, high = self.perturbation_fraction_range
        if not 0.0 <= low <= high < 1.0:
            raise ValueError(f"Faixa de perturbação inválida: {self.perturbation_fraction_range}")
        if self.steady_state_tolerance <= 0 or self.steady_state_hold < self.sample_interval:
            raise ValueError("Tolerância deve ser positiva e a janela >= intervalo de amostragem.")

    @property
    def substeps(self) -> int:
        return int(round(self.sample_interval / self.integration_step))

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_h * 3600.0 / self.sample_interval))

    @classmethod
    def from_config(cls, values: Dict[str, str]) -> "ScenarioConfig":
        return cls(
            duration_h=float(values["SIM_DURATION_H"]),
            sample_interval=float(values["SIM_SAMPLE_INTERVAL_S"]),
            integration_step=float(values["SIM_INTEGRATION_STEP_S"]),
            perturbation_fraction_range=(
                float(values["SIM_PERTURBATION_MIN"]),
                float(values["SIM_PERTURBATION_MAX"]),
            ),
            steady_state_tolerance=float(values["SIM_STEADY_TOL"]),
            steady_state_hold=float(values["SIM_STEADY_HOLD_S"]),
            max_settle=float(values["SIM_MAX_SETTLE_S"]),
            warmup_max=float(values["SIM_WARMUP_MAX_S"]),
            seed=int(values["SIM_SEED"]),
        )


def sample_frame(
    layout: ProcessLayout, state: ProcessState, time: Optional[float] = None
) -> SnapshotFrame:
    """Lê todos os sensores de entrada e o alvo (fração mássica de NH3 do produto)."""
    readings: Dict[str, float] = {}
    topology = layout.topology
    for sensor in topology.sensors:
        if sensor.sensor_id == topology.target_sensor:
            continue
        if sensor.location in topology.edge_index:
            stream = state.streams[sensor.location]
            if sensor.kind is SensorKind.FLOW:
                readings[sensor.sensor_id] = stream.total_flow
            elif sensor.kind is SensorKind.TEMPERATURE:
                readings[sensor.sensor_id] = float(stream.temperature)
            elif sensor.kind is SensorKind.PRESSURE:
                readings[sensor.sensor_id] = float(stream.pressure)
        elif sensor.kind is SensorKind.LEVEL:
            readings[sensor.sensor_id] = float(state.flash_level)
        else:
            readings[sensor.sensor_id] = float(state.unit_outputs.get(sensor.location, 0.0))

    product = state.streams[layout.product_edge]
    target = product.nh3_mass_fraction() if product.total_flow > 0 else nh3_mass_fraction(state.holdup)
    return SnapshotFrame(time=state.time if time is None else time, readings=readings, target=target)


def _advance(variant: str, state: ProcessState, cfg: ScenarioConfig, constants: ProcessConstants) -> ProcessState:
    for _ in range(cfg.substeps):
        state = step_process(variant, state, cfg.integration_step, constants)
    return state


def _warm_up(
    variant: str, layout: ProcessLayout, state: ProcessState, cfg: ScenarioConfig, constants: ProcessConstants
) -> ProcessState:
    """Simula sem amostrar até o regime (malhas e alvo estáveis) ou até warmup_max."""
    times: Deque[float] = deque()
    values: Deque[np.ndarray] = deque()
    elapsed = 0.0
    while elapsed < cfg.warmup_max:
        state = _advance(variant, state, cfg, constants)
        elapsed += cfg.sample_interval
        frame_target = sample_frame(layout, state).target or 0.0
        times.append(elapsed)
        values.append(np.append(controlled_variables(state), frame_target))
        trim_history(times, values, cfg.steady_state_hold)
        if detect_steady_state(times, values, cfg.steady_state_tolerance, cfg.steady_state_hold):
            logger.info("Processo %s em regime após %.0f s de aquecimento.", variant, elapsed)
            break
    else:
        logger.warning("Aquecimento do processo %s atingiu o limite de %.0f s.", variant, cfg.warmup_max)
    return replace(state, time=0.0)


def run_scenario(
    variant: str,
    cfg: ScenarioConfig,
    constants: ProcessConstants = DEFAULT_CONSTANTS,
    split_fractions: Tuple[float, float, float] = DEFAULT_SPLIT,
) -> Dataset:
    """
    Gera um dataset de operação dinâmica por perturbação de setpoints.

    Repete: escolhe uma malha ao acaso, desvia o setpoint por uma fração
    uniforme com sinal aleatório, simula até o regime, reverte, simula até o
    regime; amostra todos os sensores a cada sample_interval. Determinístico
    dado (variant, cfg).
    """
    layout = process_layout(variant)
    _, state, _ = default_process(variant, constants)
    rng = XorShift64Star(cfg.seed)
    state = _warm_up(variant, layout, state, cfg, constants)

    nominal = {tag: c.setpoint for tag, c in state.controllers.items()}
    low, high = cfg.perturbation_fraction_range
    perturbed: Optional[str] = None
    phase_start = 0.0
    history_t: Deque[float] = deque()
    history_v: Deque[np.ndarray] = deque()
    frames: List[SnapshotFrame] = []

    def set_point(current: ProcessState, tag: str, value: float) -> ProcessState:
        controllers = dict(current.controllers)
        controllers[tag] = controllers[tag].with_setpoint(value)
        return replace(current, controllers=controllers)

    def perturb(current: ProcessState) -> Tuple[ProcessState, str]:
        tag = rng.choice(CONTROLLER_TAGS)
        magnitude = rng.uniform(low, high)
        sign = -1.0 if rng.uniform() < 0.5 else 1.0
        value = nominal[tag] * (1.0 + sign * magnitude)
        logger.info("t=%.0f s: %s setpoint %.4g -> %.4g", current.time, tag, nominal[tag], value)
        return set_point(current, tag, value), tag

    state, perturbed = perturb(state)
    for k in range(cfg.num_samples):
        time = k * cfg.sample_interval
        if k > 0:
            state = replace(_advance(variant, state, cfg, constants), time=time)
        frames.append(sample_frame(layout, state, time=time))

        history_t.append(time)
        history_v.append(controlled_variables(state))
        trim_history(history_t, history_v, cfg.steady_state_hold)

        settled = detect_steady_state(history_t, history_v, cfg.steady_state_tolerance, cfg.steady_state_hold)
        timed_out = time - phase_start >= cfg.max_settle
        if timed_out and not settled:
            logger.warning("t=%.0f s: fase sem regime após %.0f s; seguindo adiante.", time, cfg.max_settle)
        if settled or timed_out:
            if perturbed is not None:
                logger.info("t=%.0f s: %s revertido para %.4g", time, perturbed, nominal[perturbed])
                state = set_point(state, perturbed, nominal[perturbed])
                perturbed = None
            else:
                state, perturbed = perturb(state)
            phase_start = time
            history_t.clear()
            history_v.clear()

    meta = {
        "process": f"ammonia-loop-{ProcessVariant(variant).value}",
        "variant": ProcessVariant(variant).value,
        "sample_interval": cfg.sample_interval,
        "duration_h": cfg.duration_h,
        "seed": cfg.seed,
        "scenario": {**asdict(cfg), "perturbation_fraction_range": list(cfg.perturbation_fraction_range)},
    }
    return Dataset(topology=layout.topology, frames=tuple(frames), split_fractions=split_fractions, meta=meta)
