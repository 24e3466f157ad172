"""
Motor mínimo de tensores com diferenciação reversa sobre numpy (float64).

Cada operação do Tape calcula o valor, verifica finitude e registra o nó; o
gradiente percorre os registros em ordem reversa usando as regras de
BACKWARD_RULES (uma por operação, indexadas pelo nome). Gradientes são
devolvidos pelo tape e nunca gravados nos parâmetros, de modo que avaliações
concorrentes não disputam estado.

Inclui Adam puro (retorna novos parâmetros e novo estado), verificação por
diferenças centrais e um arquivo binário de tensores nomeados (NTAR).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from prng import XorShift64Star

LAYER_NORM_EPS = 1e-9

ARCHIVE_MAGIC = b"NTAR"
ARCHIVE_VERSION = 1


class ShapeError(ValueError):
    """Formas incompatíveis numa operação."""


class NonFiniteError(RuntimeError):
    """Operação produziu NaN ou infinito."""


class ArchiveError(ValueError):
    """Arquivo de tensores corrompido ou de versão desconhecida."""


class Tensor:
    """
    Array float64 imutável por convenção, opcionalmente rastreado para gradiente.

    Attributes:
        value: Valores (row-major).
        requires_grad: Se o gradiente em relação a este tensor deve ser propagado.
        name: Nome do parâmetro (apenas folhas).
    """

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value: Any, requires_grad: bool = False, name: Optional[str] = None) -> None:
        array = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Tensor {name!r} com valores não finitos.")
        self.value = array
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() exige tensor escalar; forma {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, np.ndarray, float, int]


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    ctx: Dict[str, Any] = field(default_factory=dict)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Soma o gradiente sobre os eixos que foram expandidos por broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _matmul_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    a, b = (t.value for t in rec.inputs)
    ga = gb = None
    if rec.inputs[0].requires_grad:
        ga = _unbroadcast(np.matmul(grad, _swap(b)), a.shape)
    if rec.inputs[1].requires_grad:
        if b.ndim == 2:
            # peso 2D compartilhado por todo o lote: uma única multiplicação
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(_swap(a), grad), b.shape)
    return ga, gb


def _add_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    a, b = rec.inputs
    return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


def _sub_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    a, b = rec.inputs
    return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


def _mul_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    a, b = rec.inputs
    ga = _unbroadcast(grad * b.value, a.shape) if a.requires_grad else None
    gb = _unbroadcast(grad * a.value, b.shape) if b.requires_grad else None
    return ga, gb


def _concat_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    axis = rec.ctx["axis"]
    bounds = np.cumsum([t.shape[axis] for t in rec.inputs])[:-1]
    return tuple(np.split(grad, bounds, axis=axis))


def _relu_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    return (grad * (rec.inputs[0].value > 0),)


def _tanh_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    y = rec.output.value
    return (grad * (1.0 - y * y),)


def _layer_norm_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    xhat = rec.output.value
    inv_std = rec.ctx["inv_std"]
    mean_g = grad.mean(axis=-1, keepdims=True)
    mean_gx = (grad * xhat).mean(axis=-1, keepdims=True)
    return (inv_std * (grad - mean_g - xhat * mean_gx),)


def _softmax_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    y = rec.output.value
    axis = rec.ctx["axis"]
    return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)


def _restore_reduced(grad: np.ndarray, rec: _Record) -> np.ndarray:
    shape = rec.inputs[0].shape
    axis = rec.ctx["axis"]
    if axis is None:
        return np.broadcast_to(grad, shape)
    if not rec.ctx["keepdims"]:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _sum_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    return (np.array(_restore_reduced(grad, rec)),)


def _mean_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    count = rec.inputs[0].value.size // max(rec.output.value.size, 1)
    return (np.array(_restore_reduced(grad, rec)) / count,)


def _reshape_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    return (grad.reshape(rec.inputs[0].shape),)


def _transpose_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    return (np.transpose(grad, np.argsort(rec.ctx["axes"])),)


def _mse_backward(grad: np.ndarray, rec: _Record) -> Tuple[Optional[np.ndarray], ...]:
    pred, target = rec.inputs
    diff = pred.value - target.value
    scale = 2.0 * grad / diff.size
    return scale * diff, -scale * diff


BACKWARD_RULES: Dict[str, Callable[[np.ndarray, _Record], Tuple[Optional[np.ndarray], ...]]] = {
    "matmul": _matmul_backward,
    "add": _add_backward,
    "sub": _sub_backward,
    "mul": _mul_backward,
    "concat": _concat_backward,
    "relu": _relu_backward,
    "tanh": _tanh_backward,
    "layer_norm": _layer_norm_backward,
    "softmax": _softmax_backward,
    "sum": _sum_backward,
    "mean": _mean_backward,
    "reshape": _reshape_backward,
    "transpose": _transpose_backward,
    "mse": _mse_backward,
}


def _as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: formas incompatíveis {a.shape} e {b.shape}") from exc


class Tape:
    """Lista de Wengert: registra as operações na ordem em que são executadas."""

    def __init__(self) -> None:
        self.records: List[_Record] = []

    def watch(self, params: Mapping[str, np.ndarray], trainable: Optional[Sequence[str]] = None) -> Dict[str, Tensor]:
        """Envolve os parâmetros como folhas; só os nomes em `trainable` (default: todos) recebem gradiente."""
        allowed = set(params) if trainable is None else set(trainable)
        return {name: Tensor(value, requires_grad=name in allowed, name=name) for name, value in params.items()}

    def _emit(self, op: str, value: np.ndarray, inputs: Sequence[Tensor], **ctx: Any) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Operação {op} produziu valores não finitos.")
        out = Tensor.__new__(Tensor)
        out.value = value
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.name = None
        if out.requires_grad:
            self.records.append(_Record(op, out, tuple(inputs), ctx))
        return out

    def matmul(self, a: TensorLike, b: TensorLike) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: formas incompatíveis {a.shape} e {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError as exc:
            raise ShapeError(f"matmul: formas incompatíveis {a.shape} e {b.shape}") from exc
        return self._emit("matmul", np.matmul(a.value, b.value), (a, b))

    def add(self, a: TensorLike, b: TensorLike) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _broadcast_shape("add", a, b)
        return self._emit("add", a.value + b.value, (a, b))

    def sub(self, a: TensorLike, b: TensorLike) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _broadcast_shape("sub", a, b)
        return self._emit("sub", a.value - b.value, (a, b))

    def mul(self, a: TensorLike, b: TensorLike) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _broadcast_shape("mul", a, b)
        return self._emit("mul", a.value * b.value, (a, b))

    def concat(self, tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
        parts = [_as_tensor(t) for t in tensors]
        ndim = parts[0].ndim
        axis = axis % ndim
        for part in parts[1:]:
            same = part.ndim == ndim and all(
                part.shape[i] == parts[0].shape[i] for i in range(ndim) if i != axis
            )
            if not same:
                raise ShapeError(f"concat: formas incompatíveis {parts[0].shape} e {part.shape}")
        return self._emit("concat", np.concatenate([p.value for p in parts], axis=axis), parts, axis=axis)

    def relu(self, x: TensorLike) -> Tensor:
        x = _as_tensor(x)
        return self._emit("relu", np.maximum(x.value, 0.0), (x,))

    def tanh(self, x: TensorLike) -> Tensor:
        x = _as_tensor(x)
        return self._emit("tanh", np.tanh(x.value), (x,))

    def layer_norm(self, x: TensorLike) -> Tensor:
        """Normaliza o último eixo para média 0 e variância 1 (sem ganho/viés)."""
        x = _as_tensor(x)
        centered = x.value - x.value.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
        return self._emit("layer_norm", centered * inv_std, (x,), inv_std=inv_std)

    def softmax(self, x: TensorLike, axis: int = -1) -> Tensor:
        x = _as_tensor(x)
        shifted = x.value - x.value.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        return self._emit("softmax", exp / exp.sum(axis=axis, keepdims=True), (x,), axis=axis)

    def sum(self, x: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        x = _as_tensor(x)
        return self._emit("sum", np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), axis=axis, keepdims=keepdims)

    def mean(self, x: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        x = _as_tensor(x)
        if x.value.size == 0:
            raise ShapeError(f"mean: tensor vazio {x.shape}")
        return self._emit("mean", np.asarray(x.value.mean(axis=axis, keepdims=keepdims)), (x,), axis=axis, keepdims=keepdims)

    def reshape(self, x: TensorLike, shape: Sequence[int]) -> Tensor:
        x = _as_tensor(x)
        try:
            value = x.value.reshape(tuple(shape))
        except ValueError as exc:
            raise ShapeError(f"reshape: formas incompatíveis {x.shape} e {tuple(shape)}") from exc
        return self._emit("reshape", value, (x,))

    def transpose(self, x: TensorLike, axes: Sequence[int]) -> Tensor:
        x = _as_tensor(x)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: eixos {tuple(axes)} inválidos para forma {x.shape}")
        return self._emit("transpose", np.transpose(x.value, tuple(axes)), (x,), axes=tuple(axes))

    def mse(self, pred: TensorLike, target: TensorLike) -> Tensor:
        pred, target = _as_tensor(pred), _as_tensor(target)
        if pred.shape != target.shape:
            raise ShapeError(f"mse: formas incompatíveis {pred.shape} e {target.shape}")
        diff = pred.value - target.value
        return self._emit("mse", np.asarray(np.mean(diff * diff)), (pred, target))

    def gradient(self, loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        """
        Gradientes de `loss` (escalar) em relação às folhas informadas.

        Folhas sem caminho até a perda recebem gradiente zero.
        """
        if loss.value.size != 1:
            raise ShapeError(f"A perda deve ser escalar; forma recebida {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            grad = grads.pop(id(rec.output), None)
            if grad is None:
                continue
            input_grads = BACKWARD_RULES[rec.op](grad, rec)
            for tensor, g in zip(rec.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + g if key in grads else np.array(g, dtype=np.float64)
        return {
            name: grads.get(id(tensor), np.zeros_like(tensor.value))
            for name, tensor in params.items()
            if tensor.requires_grad
        }


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return tape.gradient(loss, params)


@dataclass(frozen=True)
class AdamState:
    """Estado do Adam: passo, momentos por parâmetro e hiperparâmetros."""
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Mapping[str, np.ndarray] = field(default_factory=dict)
    second_moment: Mapping[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], learning_rate: float) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            first_moment={name: np.zeros_like(v) for name, v in params.items()},
            second_moment={name: np.zeros_like(v) for name, v in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], s: AdamState
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Um passo do Adam com correção de viés. Não altera as entradas.

    Parâmetros sem gradiente (congelados) ficam intactos e mantêm os momentos.
    """
    step = s.step + 1
    first = dict(s.first_moment)
    second = dict(s.second_moment)
    updated = dict(params)
    correction1 = 1.0 - s.beta1 ** step
    correction2 = 1.0 - s.beta2 ** step
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ShapeError(f"adam: gradiente {grad.shape} e parâmetro {params[name].shape} para {name}")
        m = s.beta1 * first.get(name, np.zeros_like(grad)) + (1.0 - s.beta1) * grad
        v = s.beta2 * second.get(name, np.zeros_like(grad)) + (1.0 - s.beta2) * grad * grad
        first[name], second[name] = m, v
        updated[name] = params[name] - s.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + s.epsilon)
    return updated, replace(s, step=step, first_moment=first, second_moment=second)


ScalarFunction = Callable[[Tape, Dict[str, Tensor]], Tensor]


def grad_check(
    f: ScalarFunction,
    params: Mapping[str, np.ndarray],
    n_probes: int,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """
    Maior erro relativo entre o gradiente do tape e diferenças centrais.

    Sorteia n_probes coordenadas (uniformes sobre todos os parâmetros) e usa
    |analítico - numérico| / max(|analítico|, |numérico|, floor).
    """
    if n_probes < 1:
        raise ValueError("n_probes deve ser >= 1.")
    tape = Tape()
    watched = tape.watch(params)
    analytic = tape.gradient(f(tape, watched), watched)

    names = list(params)
    sizes = np.array([params[name].size for name in names])
    offsets = np.cumsum(sizes)
    rng = XorShift64Star(seed)
    worst = 0.0
    for _ in range(n_probes):
        flat = rng.integers(int(offsets[-1]))
        which = int(np.searchsorted(offsets, flat, side="right"))
        name = names[which]
        index = np.unravel_index(flat - (int(offsets[which - 1]) if which else 0), params[name].shape)

        def evaluate(delta: float) -> float:
            probe = dict(params)
            shifted = params[name].copy()
            shifted[index] += delta
            probe[name] = shifted
            probe_tape = Tape()
            return f(probe_tape, probe_tape.watch(probe, trainable=())).item()

        numeric = (evaluate(h) - evaluate(-h)) / (2.0 * h)
        exact = float(analytic[name][index])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    return worst


def glorot_uniform(fan_in: int, fan_out: int, rng: XorShift64Star) -> np.ndarray:
    """Matriz [fan_in x fan_out] uniforme em ±sqrt(6/(fan_in+fan_out))."""
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform_array((fan_in, fan_out), -limit, limit)


def save_archive(path: str, tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping[str, Any]] = None) -> None:
    """
    Grava tensores nomeados em formato NTAR (little-endian, versão 1).

    Layout: magic | u32 versão | u32 tamanho + JSON de metadados | u32 contagem |
    por tensor: u16 tamanho + nome UTF-8 | u8 ndim | u64 por dimensão | valores f64.
    Os tensores são gravados em ordem alfabética de nome.
    """
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    chunks = [ARCHIVE_MAGIC, struct.pack("<I", ARCHIVE_VERSION), struct.pack("<I", len(meta)), meta]
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        value = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes(order="C"))
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(b"".join(chunks))


def load_archive(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Lê um arquivo NTAR; retorna (tensores, metadados)."""
    data = Path(path).read_bytes()
    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise ArchiveError(f"Arquivo de tensores truncado: {path}")
        chunk = data[offset : offset + size]
        offset += size
        return chunk

    if take(4) != ARCHIVE_MAGIC:
        raise ArchiveError(f"Assinatura inválida (esperado NTAR): {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"Versão de arquivo não suportada: {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        metadata = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"Metadados ilegíveis em {path}: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = values.reshape(shape)
    if offset != len(data):
        raise ArchiveError(f"Bytes excedentes no arquivo de tensores: {path}")
    return tensors, metadata
