"""
ndcore: плотные многомерные массивы с обратным автодифференцированием.

Тензор хранит данные в numpy-массиве (float32 по умолчанию, float64 в
тестовом режиме) и, если участвует в графе, ссылки на родителей и функцию
обратного прохода. Граф строится во время прямого прохода и обходится
один раз в обратном топологическом порядке при вызове backward().
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import (
    DegenerateRowError,
    EmptySelectionError,
    RankError,
    ShapeError,
    VocabularyIndexError,
)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

# аддитивная маска перед нормализацией softmax
MASK_FILL = -1e9

Number = Union[int, float]


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Поддерживаются только float32/float64, получено {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Временное переключение точности (64-битный режим тестов)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """
    Многомерный массив с поддержкой обратного прохода.

    Args:
        data: Значения (приводятся к текущей точности по умолчанию)
        requires_grad: Накапливать ли градиент
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_lift(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("Деление поддерживается только на число")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)


def _lift(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=dtype or _DEFAULT_DTYPE)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = "const"
    return out


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.shape)
    if t.grad is None:
        t.grad = grad.astype(t.data.dtype, copy=True)
    else:
        t.grad += grad


class Graph:
    """
    Упорядоченная запись выполненных дифференцируемых операций.

    nodes идут в топологическом порядке (входы раньше выходов), поэтому
    обход в обратном порядке является корректным обратным проходом.
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> Graph:
    """
    Обратный проход от скалярной функции потерь.

    Returns:
        Граф, по которому прошёл обратный проход
    """
    if loss.data.ndim != 0:
        raise RankError(f"backward() ожидает скаляр, получена форма {loss.shape}")
    if not loss.requires_grad:
        return Graph([])
    graph = Graph.from_root(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return graph


# ----------------------------------------------------------------------
# Поэлементные операции
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: несовместимые формы {a.shape} и {b.shape}") from e
    out = _result(data, (a, b), "add")
    if out.requires_grad:
        def _backward(g):
            _accumulate(a, g)
            _accumulate(b, g)
        out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: несовместимые формы {a.shape} и {b.shape}") from e
    out = _result(data, (a, b), "mul")
    if out.requires_grad:
        def _backward(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        out._backward = _backward
    return out


def scale(a: Tensor, factor: Number) -> Tensor:
    a = _lift(a)
    out = _result(a.data * a.data.dtype.type(factor), (a,), "scale")
    if out.requires_grad:
        def _backward(g):
            _accumulate(a, g * a.data.dtype.type(factor))
        out._backward = _backward
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU в tanh-приближении."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = _result((0.5 * xd * (1.0 + t)).astype(xd.dtype), (x,), "gelu")
    if out.requires_grad:
        def _backward(g):
            d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner
            _accumulate(x, g * local)
        out._backward = _backward
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _result(t, (x,), "tanh")
    if out.requires_grad:
        def _backward(g):
            _accumulate(x, g * (1.0 - t * t))
        out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: несовместимые формы {a.shape} и {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: несовместимые формы {a.shape} и {b.shape}") from e
    out = _result(data, (a, b), "matmul")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
            if b.requires_grad:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))
        out._backward = _backward
    return out


def masked_softmax(logits: Tensor, mask: np.ndarray, query_active: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax по последней оси с булевой маской допустимых позиций.

    Запрещённые позиции получают ровно 0. Строки неактивных запросов
    (PAD) могут быть полностью запрещены и дают нулевую строку.

    Args:
        logits: Тензор [..., Lq, Lk]
        mask: Булева маска, транслируемая к форме logits
        query_active: Булев массив, транслируемый к [..., Lq]; None - все активны
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    row_has_key = mask.any(axis=-1)
    if query_active is None:
        active = np.ones(row_has_key.shape, dtype=bool)
    else:
        active = np.broadcast_to(np.asarray(query_active, dtype=bool), row_has_key.shape)
    if np.any(active & ~row_has_key):
        raise DegenerateRowError("masked_softmax: активный запрос без единой разрешённой позиции")

    dtype = logits.data.dtype
    z = logits.data + np.where(mask, dtype.type(0.0), dtype.type(MASK_FILL))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), dtype.type(0.0))
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(denom == 0, dtype.type(1.0), denom)
    probs = (e / denom).astype(dtype)
    out = _result(probs, (logits,), "masked_softmax")
    if out.requires_grad:
        def _backward(g):
            dot = (g * probs).sum(axis=-1, keepdims=True)
            _accumulate(logits, probs * (g - dot))
        out._backward = _backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Нормализация по последней оси с обучаемыми gain/bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (centered * rstd).astype(xd.dtype)
    out = _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def _backward(g):
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
            if bias.requires_grad:
                _accumulate(bias, g.reshape(-1, xd.shape[-1]).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.data
                mean_d = dxhat.mean(axis=-1, keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, rstd * (dxhat - mean_d - xhat * mean_dx))
        out._backward = _backward
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Строки таблицы по индексам; градиент суммируется обратно в таблицу."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise VocabularyIndexError(f"Индекс {bad} вне словаря размера {vocab}")
    out = _result(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def _backward(g):
            grad = np.zeros_like(table.data)
            np.add.at(grad, ids, g)
            _accumulate(table, grad)
        out._backward = _backward
    return out


def gather_rows(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """x[batch_idx[k], pos_idx[k]] -> [K, D]."""
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    out = _result(x.data[batch_idx, pos_idx], (x,), "gather_rows")
    if out.requires_grad:
        def _backward(g):
            grad = np.zeros_like(x.data)
            np.add.at(grad, (batch_idx, pos_idx), g)
            _accumulate(x, grad)
        out._backward = _backward
    return out


def scatter_rows(base: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray, values: Tensor) -> Tensor:
    """
    Копия base [B, L, D], в которой строки (batch_idx[k], pos_idx[k])
    заменены на values[k]. Пары индексов должны быть уникальны.
    """
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    if values.shape != (len(batch_idx), base.shape[-1]):
        raise ShapeError(f"scatter_rows: values {values.shape} не совпадает с ({len(batch_idx)}, {base.shape[-1]})")
    flat = batch_idx * base.shape[1] + pos_idx
    if len(np.unique(flat)) != len(flat):
        raise ShapeError("scatter_rows: повторяющиеся позиции")
    data = base.data.copy()
    data[batch_idx, pos_idx] = values.data
    out = _result(data, (base, values), "scatter_rows")
    if out.requires_grad:
        def _backward(g):
            if base.requires_grad:
                g_base = g.copy()
                g_base[batch_idx, pos_idx] = 0
                _accumulate(base, g_base)
            if values.requires_grad:
                _accumulate(values, g[batch_idx, pos_idx])
        out._backward = _backward
    return out


def getitem(x: Tensor, index) -> Tensor:
    out = _result(np.array(x.data[index]), (x,), "getitem")
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)
    if out.requires_grad:
        def _backward(g):
            grad = np.zeros_like(x.data)
            if advanced:
                np.add.at(grad, index, g)
            else:
                grad[index] = g
            _accumulate(x, grad)
        out._backward = _backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from e
    out = _result(data, (x,), "reshape")
    if out.requires_grad:
        def _backward(g):
            _accumulate(x, g.reshape(x.shape))
        out._backward = _backward
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = _result(np.transpose(x.data, axes), (x,), "transpose")
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def _backward(g):
            _accumulate(x, np.transpose(g, inverse))
        out._backward = _backward
    return out


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum")
    if out.requires_grad:
        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.shape))
        out._backward = _backward
    return out


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis, keepdims), 1.0 / float(count))


# ----------------------------------------------------------------------
# Функции потерь
# ----------------------------------------------------------------------

def cross_entropy(logits: Tensor, target_ids: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """
    Кросс-энтропия, усреднённая по выбранным позициям.

    Args:
        logits: [..., V]
        target_ids: целые [...] (вне маски значения игнорируются)
        loss_mask: булев [...]
    """
    loss_mask = np.asarray(loss_mask, dtype=bool)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    count = int(loss_mask.sum())
    if count == 0:
        raise EmptySelectionError("cross_entropy: маска не выбирает ни одной позиции")
    vocab = logits.shape[-1]
    selected_targets = target_ids[loss_mask]
    if selected_targets.min() < 0 or selected_targets.max() >= vocab:
        raise VocabularyIndexError(f"cross_entropy: цель вне словаря размера {vocab}")

    rows = logits.data[loss_mask]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=-1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    picked = log_probs[np.arange(count), selected_targets]
    loss = np.asarray(-picked.mean(), dtype=logits.dtype)
    out = _result(loss, (logits,), "cross_entropy")
    if out.requires_grad:
        def _backward(g):
            probs = exp / sum_exp
            probs[np.arange(count), selected_targets] -= 1.0
            grad = np.zeros_like(logits.data)
            grad[loss_mask] = probs * (g / count)
            _accumulate(logits, grad)
        out._backward = _backward
    return out


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: {pred.shape} против {target.shape}")
    diff = pred.data - target
    out = _result(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), "mse")
    if out.requires_grad:
        def _backward(g):
            _accumulate(pred, g * 2.0 * diff / diff.size)
        out._backward = _backward
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_with_logits(logit: Tensor, target01) -> Tensor:
    target = np.asarray(target01, dtype=logit.dtype)
    if target.shape != logit.shape:
        raise ShapeError(f"bce_with_logits: {logit.shape} против {target.shape}")
    x = logit.data
    per_elem = np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))
    out = _result(np.asarray(per_elem.mean(), dtype=logit.dtype), (logit,), "bce")
    if out.requires_grad:
        def _backward(g):
            _accumulate(logit, g * (_sigmoid(x) - target) / x.size)
        out._backward = _backward
    return out


# ----------------------------------------------------------------------
# Оптимизатор
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """
    Один шаг Adam с коррекцией смещения. Параметры обновляются на месте
    в фиксированном (отсортированном) порядке имён.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name in sorted(params):
        param = params[name]
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"adam_step: градиент {name} формы {grad.shape}, параметр {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        if m.shape != param.shape or v.shape != param.shape:
            raise ShapeError(f"adam_step: состояние {name} не совпадает с параметром {param.shape}")
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Линейный прогрев на первых warmup_steps шагах, затем константа."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


# ----------------------------------------------------------------------
# Проверка градиентов
# ----------------------------------------------------------------------

def finite_difference_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: Optional[float] = None,
    floor: Optional[float] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Сравнение аналитического градиента с центральными разностями.

    Производная берётся по пятиточечному центральному шаблону
    (f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h с ошибкой усечения O(h^4).
    Относительная ошибка считается как |a - n| / max(|a|, |n|, floor).

    Args:
        fn: Функция без аргументов, возвращающая скалярный тензор
        tensors: Листья с requires_grad, по которым проверяется градиент
        eps: Шаг разностей (по умолчанию зависит от точности)
        floor: Нижняя граница знаменателя
        max_entries: Проверять не более стольких элементов каждого тензора

    Returns:
        Максимальная относительная ошибка
    """
    is64 = tensors[0].dtype == np.float64
    eps = eps if eps is not None else (1e-4 if is64 else 3e-2)
    floor = floor if floor is not None else (1e-3 if is64 else 1e-1)
    rng = np.random.default_rng(seed)

    for t in tensors:
        t.zero_grad()
    backward(fn())
    analytic = [t.grad.copy() for t in tensors]

    def shifted(t: Tensor, idx, original, offset: float) -> float:
        t.data[idx] = original + offset
        return float(fn().data)

    worst = 0.0
    with no_grad():
        for t, grad in zip(tensors, analytic):
            flat_count = t.size
            if max_entries is not None and flat_count > max_entries:
                entries = rng.choice(flat_count, size=max_entries, replace=False)
            else:
                entries = np.arange(flat_count)
            for flat in entries:
                idx = np.unravel_index(int(flat), t.shape)
                original = t.data[idx].copy()
                f = [shifted(t, idx, original, k * eps) for k in (-2, -1, 1, 2)]
                t.data[idx] = original
                numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * eps)
                a = float(grad[idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
