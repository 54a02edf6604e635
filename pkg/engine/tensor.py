"""Dense float64 matrices with tape-based reverse-mode differentiation.

A `Tape` records primitives in creation order, which is a topological order,
so `Tape.backward` walks the record list once in reverse. Parameters live in a
`ParameterStore`; `Tape.param` binds a slot to the tape and `backward` adds the
slot's gradient into the store.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from engine.errors import (CheckpointError, ConfigurationError, ContractError, DimensionError,
                           NumericFault, ValidationError)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
ACTIVATIONS = ("elu", "relu", "tanh", "identity", "leaky_relu")
LEAKY_SLOPE = 0.2


def as_matrix(data) -> np.ndarray:
    array = np.array(data, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise DimensionError("as_matrix", array.shape, ("rows", "cols"))
    return array


@dataclass
class Slot:
    value: np.ndarray
    grad: np.ndarray
    frozen: bool = False


class ParameterStore:
    def __init__(self):
        self._slots: dict[str, Slot] = {}
        self.state: dict = {}
        self.meta: dict = {}

    def add(self, name: str, value) -> None:
        value = as_matrix(value)
        self._slots[name] = Slot(value, np.zeros_like(value))

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __len__(self):
        return len(self._slots)

    def names(self) -> list[str]:
        return list(self._slots)

    def slot(self, name: str) -> Slot:
        if name not in self._slots:
            raise ConfigurationError(f"parameter slot {name!r} is missing", name)
        return self._slots[name]

    def value(self, name: str) -> np.ndarray:
        return self.slot(name).value

    def grad(self, name: str) -> np.ndarray:
        return self.slot(name).grad

    def set_value(self, name: str, value) -> None:
        slot = self.slot(name)
        value = as_matrix(value)
        if value.shape != slot.value.shape:
            raise DimensionError(f"set_value({name})", slot.value.shape, value.shape)
        slot.value[...] = value

    def zero_grad(self) -> None:
        for slot in self._slots.values():
            slot.grad[...] = 0.0

    def freeze(self, prefix: str) -> None:
        for name, slot in self._slots.items():
            if name.startswith(prefix):
                slot.frozen = True

    def unfreeze(self, prefix: str) -> None:
        for name, slot in self._slots.items():
            if name.startswith(prefix):
                slot.frozen = False

    def is_frozen(self, name: str) -> bool:
        return self.slot(name).frozen

    def count(self) -> int:
        return sum(slot.value.size for slot in self._slots.values())

    def copy(self) -> "ParameterStore":
        clone = ParameterStore()
        for name, slot in self._slots.items():
            clone.add(name, slot.value)
            clone._slots[name].frozen = slot.frozen
        clone.meta = json.loads(json.dumps(self.meta))
        return clone

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "meta": self.meta,
            "params": {
                name: {"shape": list(slot.value.shape), "data": slot.value.ravel().tolist()}
                for name, slot in self._slots.items()
            },
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, payload: dict) -> "ParameterStore":
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {payload.get('format_version')!r}")
        store = cls()
        for name, entry in payload.get("params", {}).items():
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if len(shape) != 2 or data.size != shape[0] * shape[1]:
                raise CheckpointError(f"slot {name!r}: data does not fit shape {shape}")
            store.add(name, data.reshape(shape))
        store.meta = payload.get("meta", {})
        return store

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
        return cls.from_dict(payload)

    def load_into(self, path: str | Path) -> None:
        """Overwrite values from a checkpoint; names and shapes must match."""
        loaded = ParameterStore.load(path)
        missing = [name for name in self._slots if name not in loaded]
        if missing:
            raise CheckpointError(f"checkpoint lacks slots: {', '.join(missing)}")
        for name, slot in self._slots.items():
            incoming = loaded.value(name)
            if incoming.shape != slot.value.shape:
                raise CheckpointError(f"slot {name!r}: checkpoint shape {incoming.shape} "
                                      f"!= expected {slot.value.shape}")
            slot.value[...] = incoming
        self.meta.update(loaded.meta)


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    def __init__(self, params: ParameterStore | None = None):
        self.params = params
        self._records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._param_vars: dict[str, Var] = {}

    def __len__(self):
        return len(self._records)

    def param(self, name: str) -> Var:
        if name not in self._param_vars:
            if self.params is None:
                raise ConfigurationError(f"tape has no parameter store for slot {name!r}", name)
            slot = self.params.slot(name)
            self._param_vars[name] = Var(slot.value, self, not slot.frozen)
        return self._param_vars[name]

    def constant(self, data) -> Var:
        return Var(as_matrix(data), self, False)

    def variable(self, data) -> Var:
        return Var(as_matrix(data), self, True)

    def record(self, op: str, value: np.ndarray, inputs: tuple[Var, ...], backward: Callable) -> Var:
        for var in inputs:
            if var.tape is not self:
                raise ContractError(f"{op}: input recorded on a different tape")
        if not np.all(np.isfinite(value)):
            raise NumericFault(f"{op} produced non-finite values")
        out = Var(value, self, any(v.requires_grad for v in inputs))
        if out.requires_grad:
            self._records.append((out, inputs, backward))
        return out

    def backward(self, output: Var) -> None:
        if output.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1, 1) output, got {output.shape}")
        output.grad = np.ones((1, 1))
        for out, inputs, backward in reversed(self._records):
            if out.grad is None:
                continue
            for var, grad in zip(inputs, backward(out.grad)):
                if grad is None or not var.requires_grad:
                    continue
                var.grad = grad if var.grad is None else var.grad + grad
        if self.params is not None:
            for name, var in self._param_vars.items():
                if var.requires_grad and var.grad is not None:
                    self.params.slot(name).grad += var.grad


def _same_shape(op: str, a: Var, b: Var) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return a.tape.record("matmul", a.value @ b.value, (a, b),
                         lambda g: (g @ b.value.T, a.value.T @ g))


def add(a: Var, b: Var) -> Var:
    _same_shape("add", a, b)
    return a.tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def add_row(a: Var, bias: Var) -> Var:
    if bias.shape != (1, a.shape[1]):
        raise DimensionError("add_row", a.shape, bias.shape)
    return a.tape.record("add_row", a.value + bias.value, (a, bias),
                         lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul(a: Var, b: Var) -> Var:
    _same_shape("mul", a, b)
    return a.tape.record("mul", a.value * b.value, (a, b),
                         lambda g: (g * b.value, g * a.value))


def scale(a: Var, factor: float) -> Var:
    return a.tape.record("scale", a.value * factor, (a,), lambda g: (g * factor,))


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(a: Var, b: Var) -> Var:
    if a.shape[0] != b.shape[0]:
        raise DimensionError("concat_cols", a.shape, b.shape)
    split = a.shape[1]
    return a.tape.record("concat_cols", np.hstack([a.value, b.value]), (a, b),
                         lambda g: (g[:, :split], g[:, split:]))


def gather_rows(a: Var, index) -> Var:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise DimensionError("gather_rows", a.shape, (int(index.max()),))

    def backward(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, index, g)
        return (grad,)

    return a.tape.record("gather_rows", a.value[index], (a,), backward)


def scatter(values: Var, rows, cols, shape: tuple[int, int]) -> Var:
    """Place an (E x 1) column at (rows[e], cols[e]) of a zero matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if values.shape != (len(rows), 1) or len(rows) != len(cols):
        raise DimensionError("scatter", values.shape, (len(rows), len(cols)))
    out = np.zeros(shape)
    np.add.at(out, (rows, cols), values.value[:, 0])
    return values.tape.record("scatter", out, (values,), lambda g: (g[rows, cols][:, None],))


def masked_fill(a: Var, mask, fill: float) -> Var:
    """Entries where `mask` is True become `fill` and carry no gradient."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError("masked_fill", a.shape, mask.shape)
    return a.tape.record("masked_fill", np.where(mask, fill, a.value), (a,),
                         lambda g: (np.where(mask, 0.0, g),))


def row_softmax(a: Var, mask=None) -> Var:
    """Softmax over the unmasked entries of each row; masked entries and empty rows are 0."""
    keep = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError("row_softmax", a.shape, keep.shape)
    top = np.where(keep, a.value, -np.inf).max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    exp = np.where(keep, np.exp(np.where(keep, a.value - top, 0.0)), 0.0)
    total = exp.sum(axis=1, keepdims=True)
    y = np.divide(exp, total, out=np.zeros_like(exp), where=total > 0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return a.tape.record("row_softmax", y, (a,), backward)


def log_softmax_rows(a: Var) -> Var:
    top = a.value.max(axis=1, keepdims=True)
    shifted = a.value - top
    log_total = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - log_total
    probs = np.exp(y)
    return a.tape.record("log_softmax_rows", y, (a,),
                         lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def activation(a: Var, kind: str = "elu") -> Var:
    x = a.value
    if kind == "elu":
        neg = np.exp(np.minimum(x, 0.0))
        y = np.where(x > 0, x, neg - 1.0)
        slope = np.where(x > 0, 1.0, neg)
    elif kind == "relu":
        y = np.maximum(x, 0.0)
        slope = (x > 0).astype(np.float64)
    elif kind == "leaky_relu":
        y = np.where(x > 0, x, LEAKY_SLOPE * x)
        slope = np.where(x > 0, 1.0, LEAKY_SLOPE)
    elif kind == "tanh":
        y = np.tanh(x)
        slope = 1.0 - y * y
    elif kind == "identity":
        y = x.copy()
        slope = np.ones_like(x)
    else:
        raise ValidationError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
    return a.tape.record(f"activation[{kind}]", y, (a,), lambda g: (g * slope,))


def reduce_sum(a: Var) -> Var:
    return a.tape.record("reduce_sum", np.array([[a.value.sum()]]), (a,),
                         lambda g: (np.full(a.shape, g[0, 0]),))


@dataclass
class GradCheckReport:
    tol: float
    max_errors: dict[str, float] = field(default_factory=dict)
    frozen: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_errors.values())

    def worst(self) -> tuple[str, float]:
        if not self.max_errors:
            return "", 0.0
        return max(self.max_errors.items(), key=lambda item: item[1])


def grad_check(f: Callable[[Tape], Var], params: ParameterStore, tol: float = 1e-4,
               step: float = 1e-4, abs_floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients with central differences, slot by slot.

    The error of an entry is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
    Frozen slots are not perturbed; their analytic gradient must be exactly zero.
    """
    params.zero_grad()
    tape = Tape(params)
    tape.backward(f(tape))
    report = GradCheckReport(tol)
    for name in params.names():
        slot = params.slot(name)
        analytic = slot.grad.copy()
        if slot.frozen:
            report.frozen.append(name)
            report.max_errors[name] = float(np.abs(analytic).max(initial=0.0))
            continue
        worst = 0.0
        for idx in np.ndindex(slot.value.shape):
            original = slot.value[idx]
            slot.value[idx] = original + step
            plus = _scalar(f(Tape(params)))
            slot.value[idx] = original - step
            minus = _scalar(f(Tape(params)))
            slot.value[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), abs_floor))
        report.max_errors[name] = worst
    params.zero_grad()
    return report


def _scalar(out: Var) -> float:
    if out.shape != (1, 1):
        raise ContractError(f"expected a scalar (1, 1) output, got {out.shape}")
    return float(out.value[0, 0])


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0


def _trainable(params: ParameterStore) -> Iterable[tuple[str, Slot]]:
    return ((name, params.slot(name)) for name in params.names() if not params.slot(name).frozen)


def sgd_step(params: ParameterStore, lr: float, hyper: OptimizerConfig | None = None) -> None:
    """value -= lr * v, with v = momentum * v + (g + weight_decay * value)."""
    hyper = hyper or OptimizerConfig(kind="sgd")
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    velocity = params.state.setdefault("sgd_velocity", {})
    for name, slot in _trainable(params):
        g = slot.grad + hyper.weight_decay * slot.value
        if hyper.momentum:
            v = velocity.get(name, np.zeros_like(g))
            g = velocity[name] = hyper.momentum * v + g
        slot.value -= lr * g


def adam_step(params: ParameterStore, lr: float, hyper: OptimizerConfig | None = None) -> None:
    """Adam with bias correction: value -= lr * m_hat / (sqrt(v_hat) + eps)."""
    hyper = hyper or OptimizerConfig()
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    t = params.state["adam_step"] = params.state.get("adam_step", 0) + 1
    moments = params.state.setdefault("adam_moments", {})
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, slot in _trainable(params):
        g = slot.grad + hyper.weight_decay * slot.value
        m, v = moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        moments[name] = (m, v)
        slot.value -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


def optimizer_step(params: ParameterStore, lr: float, hyper: OptimizerConfig) -> None:
    if hyper.kind == "adam":
        adam_step(params, lr, hyper)
    elif hyper.kind == "sgd":
        sgd_step(params, lr, hyper)
    else:
        raise ValidationError(f"unknown optimizer {hyper.kind!r}")


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))
