"""PID discreto para as malhas de controle do loop de amônia (FC-1, FC-2, LC-1, TC-1)."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple


@dataclass(frozen=True)
class PIDController:
    """
    Controlador PID posicional com anti-windup e derivada na medição.

    Attributes:
        name: Tag da malha (ex.: "LC-1").
        gain_p: Ganho proporcional (negativo para ação direta).
        gain_i: Ganho integral (1/s).
        gain_d: Ganho derivativo (s).
        setpoint: Setpoint em unidades de engenharia.
        output_min: Limite inferior da saída.
        output_max: Limite superior da saída.
        bias: Saída com erro zero.
        integral_state: Integral acumulada do erro.
        last_measurement: Medição do passo anterior (None antes do primeiro passo).
    """
    name: str
    gain_p: float
    gain_i: float = 0.0
    gain_d: float = 0.0
    setpoint: float = 0.0
    output_min: float = float("-inf")
    output_max: float = float("inf")
    bias: float = 0.0
    integral_state: float = 0.0
    last_measurement: Optional[float] = None

    def with_setpoint(self, setpoint: float) -> "PIDController":
        return replace(self, setpoint=setpoint)


def pid_step(c: PIDController, measurement: float, dt: float) -> Tuple[float, PIDController]:
    """
    Um passo do PID: retorna (saída, controlador atualizado).

    saída = clamp(bias + Kp*e + Ki*∫e dt + Kd*de/dt), e = setpoint - medição.
    A derivada usa a medição (sem chute de setpoint). Enquanto a saída está
    saturada no sentido em que o erro empurra, a integral fica congelada.
    """
    if dt <= 0:
        raise ValueError("dt deve ser positivo.")

    error = c.setpoint - measurement
    derivative = 0.0
    if c.last_measurement is not None:
        derivative = -(measurement - c.last_measurement) / dt

    candidate = c.integral_state + error * dt
    raw = c.bias + c.gain_p * error + c.gain_i * candidate + c.gain_d * derivative
    output = min(max(raw, c.output_min), c.output_max)

    integral = candidate
    if raw != output and c.gain_i != 0.0:
        # integrar empurraria a saída ainda mais para dentro da saturação
        pushes_up = c.gain_i * error > 0
        if (raw > c.output_max and pushes_up) or (raw < c.output_min and not pushes_up):
            integral = c.integral_state
    elif raw != output:
        integral = c.integral_state

    return output, replace(c, integral_state=integral, last_measurement=measurement)
