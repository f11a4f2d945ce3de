"""Feed-forward tanh classifier, cross-entropy loss and its derivatives.

Parameters live in one flat vector.  Layers are stored in order; inside a
layer each receiving unit owns a contiguous block holding its incoming
weights followed by its bias, so layer ``l`` reshapes to a
``(fan_out, fan_in + 1)`` matrix whose last column is the bias.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import ContractError, HessianCapError, NonFiniteError

LOSS_TAG = "softmax-xent-mean/tanh/v1"
HESSIAN_PARAM_CAP = 512


class EdgeIndex(NamedTuple):
    """One parameter, addressed by graph position.

    ``layer`` counts weight layers from 1 (input -> first hidden layer).
    Nodes are numbered from 1 within their layer; a bias has
    ``from_node == 0`` and ``is_bias`` set.
    """

    layer: int
    from_node: int
    to_node: int
    is_bias: bool = False

    def __str__(self) -> str:
        src = "bias" if self.is_bias else f"{self.from_node}"
        return f"L{self.layer}:{src}->{self.to_node}"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int = 2
    hidden_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(n) for n in self.hidden_layers))
        if self.input_dim < 1:
            raise ContractError("input_dim must be >= 1")
        if self.output_dim < 2:
            raise ContractError("output_dim must be >= 2")
        if not self.hidden_layers or any(n < 1 for n in self.hidden_layers):
            raise ContractError("need at least one hidden layer, every width >= 1")
        if self.hidden_activation != "tanh":
            raise ContractError(f"unsupported activation {self.hidden_activation!r}")

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        """``"2-5-2"`` -> Architecture(2, (5,), 2)."""
        try:
            sizes = [int(s) for s in text.split("-")]
        except ValueError:
            raise ContractError(f"bad architecture string {text!r}") from None
        if len(sizes) < 3:
            raise ContractError(f"bad architecture string {text!r}")
        return cls(sizes[0], tuple(sizes[1:-1]), sizes[-1])

    def __str__(self) -> str:
        return "-".join(str(n) for n in (self.input_dim, *self.hidden_layers, self.output_dim))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @cached_property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        """(fan_out, fan_in + 1) per weight layer."""
        s = self.layer_sizes
        return tuple((s[i + 1], s[i] + 1) for i in range(len(s) - 1))

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        out = [0]
        for rows, cols in self.layer_shapes:
            out.append(out[-1] + rows * cols)
        return tuple(out)

    @property
    def parameter_count(self) -> int:
        return self.offsets[-1]

    def unpack(self, params: np.ndarray) -> list[np.ndarray]:
        """Views of ``params`` as one augmented matrix per weight layer."""
        return [params[a:b].reshape(shape)
                for a, b, shape in zip(self.offsets, self.offsets[1:], self.layer_shapes)]

    def edge(self, position: int) -> EdgeIndex:
        if not 0 <= position < self.parameter_count:
            raise ContractError(f"parameter position {position} out of range")
        layer = int(np.searchsorted(self.offsets, position, side="right"))
        rows, cols = self.layer_shapes[layer - 1]
        to_node, col = divmod(position - self.offsets[layer - 1], cols)
        if col == cols - 1:
            return EdgeIndex(layer, 0, to_node + 1, True)
        return EdgeIndex(layer, col + 1, to_node + 1, False)

    def position(self, edge: EdgeIndex) -> int:
        layer, from_node, to_node, is_bias = edge
        if not 1 <= layer <= len(self.layer_shapes):
            raise ContractError(f"no weight layer {layer}")
        rows, cols = self.layer_shapes[layer - 1]
        if not 1 <= to_node <= rows:
            raise ContractError(f"no node {to_node} in layer {layer}")
        if is_bias:
            col = cols - 1
        elif 1 <= from_node <= cols - 1:
            col = from_node - 1
        else:
            raise ContractError(f"no source node {from_node} for layer {layer}")
        return self.offsets[layer - 1] + (to_node - 1) * cols + col

    def edges(self) -> list[EdgeIndex]:
        return [self.edge(i) for i in range(self.parameter_count)]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_layers": list(self.hidden_layers),
                "output_dim": self.output_dim, "hidden_activation": self.hidden_activation}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["input_dim"]), tuple(d["hidden_layers"]), int(d["output_dim"]),
                   d.get("hidden_activation", "tanh"))


def fingerprint(arch: Architecture, dataset: Dataset, l2: float = 0.0) -> str:
    """Identity of a loss surface: architecture, data content, loss definition."""
    blob = json.dumps({"arch": arch.to_dict(), "data": dataset.digest, "loss": LOSS_TAG,
                       "l2": float(l2).hex()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def random_params(arch: Architecture, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return rng.uniform(-scale, scale, arch.parameter_count)


def check_params(arch: Architecture, params) -> np.ndarray:
    p = np.asarray(params, dtype=float)
    if p.shape != (arch.parameter_count,):
        raise ContractError(f"expected {arch.parameter_count} parameters, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NonFiniteError("non-finite parameter", index=int(np.argwhere(~np.isfinite(p))[0][0]))
    return p


def _affine(mat: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    # mat is (fan_out, fan_in + 1) with bias last; x_t is (fan_in, N)
    return mat[:, :-1] @ x_t + mat[:, -1:]


def _logits_t(arch: Architecture, params: np.ndarray, x_t: np.ndarray):
    mats = arch.unpack(params)
    acts = [x_t]
    for mat in mats[:-1]:
        acts.append(np.tanh(_affine(mat, acts[-1])))
    return _affine(mats[-1], acts[-1]), acts, mats


def _log_softmax_t(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=0)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=0))


def logits(arch: Architecture, params, inputs) -> np.ndarray:
    """Pre-softmax outputs, shape (N, output_dim)."""
    p = check_params(arch, params)
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ContractError(f"inputs must have shape (N, {arch.input_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("inputs must be finite")
    return _logits_t(arch, p, np.ascontiguousarray(x.T))[0].T


def forward(arch: Architecture, params, inputs) -> np.ndarray:
    """Class probabilities, shape (N, output_dim); rows sum to one."""
    return np.exp(_log_softmax_t(logits(arch, params, inputs).T)).T


def _check_dataset(arch: Architecture, dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    if dataset.n_features != arch.input_dim:
        raise ContractError(f"dataset has {dataset.n_features} features, "
                            f"architecture expects {arch.input_dim}")


def _raise_nonfinite(per_example: np.ndarray) -> None:
    bad = int(np.argwhere(~np.isfinite(per_example))[0][0])
    raise NonFiniteError(f"non-finite loss at example {bad}", index=bad)


class _Workspace:
    """Scratch arrays for one (architecture, dataset) pair.

    Large temporaries dominate the cost of an evaluation, so every
    per-example array is allocated once and overwritten in place.
    """

    def __init__(self, arch: Architecture, dataset: Dataset):
        n = len(dataset)
        self.x_t = dataset.features_t
        self.x = dataset.features
        self.y_t = dataset.one_hot(arch.output_dim)
        self.acts = [np.empty((width, n)) for width in arch.hidden_layers]
        self.deltas = [np.empty((width, n)) for width in arch.hidden_layers]
        self.z = np.empty((arch.output_dim, n))
        self.e = np.empty((arch.output_dim, n))
        self.col_max = np.empty(n)
        self.col_sum = np.empty(n)


def _evaluate(arch: Architecture, p: np.ndarray, ws: _Workspace, need_grad: bool, l2: float):
    # overflow is detected below and raised as NonFiniteError, so numpy's warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        return _evaluate_unchecked(arch, p, ws, need_grad, l2)


def _evaluate_unchecked(arch: Architecture, p: np.ndarray, ws: _Workspace, need_grad: bool,
                        l2: float):
    n = ws.x_t.shape[1]
    mats = arch.unpack(p)
    prev = ws.x_t
    for mat, act in zip(mats[:-1], ws.acts):
        np.matmul(mat[:, :-1], prev, out=act)
        act += mat[:, -1:]
        np.tanh(act, out=act)
        prev = act
    z = ws.z
    np.matmul(mats[-1][:, :-1], prev, out=z)
    z += mats[-1][:, -1:]
    np.max(z, axis=0, out=ws.col_max)
    z -= ws.col_max
    np.exp(z, out=ws.e)
    np.sum(ws.e, axis=0, out=ws.col_sum)
    log_norm = np.log(ws.col_sum)
    total = log_norm.sum() - np.vdot(z, ws.y_t)
    if not np.isfinite(total):
        _raise_nonfinite(log_norm - (z * ws.y_t).sum(axis=0))
    value = float(total / n)
    if l2:
        value += 0.5 * l2 * float(p @ p)
    if not need_grad:
        return value, None

    grad = np.empty_like(p)
    gmats = arch.unpack(grad)
    delta = ws.e
    delta /= ws.col_sum
    delta -= ws.y_t
    delta /= n
    for layer in range(len(mats) - 1, -1, -1):
        if layer:
            a = ws.acts[layer - 1]
            np.matmul(delta, a.T, out=gmats[layer][:, :-1])
            gmats[layer][:, -1] = delta.sum(axis=1)
            back = ws.deltas[layer - 1]
            np.matmul(mats[layer][:, :-1].T, delta, out=back)
            np.multiply(a, a, out=a)  # activations are dead after this point
            np.subtract(1.0, a, out=a)
            back *= a
            delta = back
        else:
            gmats[0][:, :-1] = delta @ ws.x
            gmats[0][:, -1] = delta.sum(axis=1)
    if l2:
        grad += l2 * p
    return value, grad


def loss(arch: Architecture, params, dataset: Dataset) -> float:
    """Mean softmax cross-entropy."""
    return loss_and_gradient(arch, params, dataset, need_grad=False)[0]


def gradient(arch: Architecture, params, dataset: Dataset) -> np.ndarray:
    return loss_and_gradient(arch, params, dataset)[1]


def loss_and_gradient(arch: Architecture, params, dataset: Dataset, need_grad: bool = True,
                      l2: float = 0.0):
    """Mean cross-entropy plus an optional ``l2 / 2 * |p|^2`` penalty, and its gradient."""
    p = check_params(arch, params)
    _check_dataset(arch, dataset)
    return _evaluate(arch, p, _Workspace(arch, dataset), need_grad, l2)


class Objective:
    """Loss surface of one architecture on one dataset.

    Calling it returns ``(loss, gradient)``; this is the interface the
    optimizers and saddle searches work against, so analytic test surfaces
    can stand in for a network.  ``l2`` adds a weight penalty
    ``l2 / 2 * |p|^2`` that keeps minima at finite distance.
    """

    def __init__(self, arch: Architecture, dataset: Dataset, l2: float = 0.0):
        _check_dataset(arch, dataset)
        if not (np.isfinite(l2) and l2 >= 0):
            raise ContractError(f"l2 must be a non-negative finite number, got {l2}")
        self.arch = arch
        self.dataset = dataset
        self.l2 = float(l2)
        self.n_evals = 0
        self._ws = _Workspace(arch, dataset)

    def __call__(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        self.n_evals += 1
        return _evaluate(self.arch, check_params(self.arch, params), self._ws, True, self.l2)

    def value(self, params: np.ndarray) -> float:
        self.n_evals += 1
        return _evaluate(self.arch, check_params(self.arch, params), self._ws, False, self.l2)[0]

    def hessian(self, params: np.ndarray) -> np.ndarray:
        _check_cap(self.arch)
        return fd_hessian(lambda q: self(q)[1], check_params(self.arch, params))

    @cached_property
    def fingerprint(self) -> str:
        return fingerprint(self.arch, self.dataset, self.l2)

    def scores(self, params: np.ndarray, dataset: Dataset | None = None) -> np.ndarray:
        """Predicted probability of class 1 per example."""
        data = self.dataset if dataset is None else dataset
        return forward(self.arch, params, data.features)[:, 1]

    def auc(self, params: np.ndarray, dataset: Dataset | None = None) -> float:
        data = self.dataset if dataset is None else dataset
        return auc(self.scores(params, data), data.labels)


class FunctionObjective:
    """Wrap a plain ``f(p) -> (value, grad)`` surface (analytic test hooks)."""

    def __init__(self, fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
                 hess: Callable[[np.ndarray], np.ndarray] | None = None):
        self.fun = fun
        self._hess = hess
        self.n_evals = 0

    def __call__(self, params):
        self.n_evals += 1
        value, grad = self.fun(np.asarray(params, dtype=float))
        return float(value), np.asarray(grad, dtype=float)

    def value(self, params):
        return self(params)[0]

    def hessian(self, params):
        if self._hess is not None:
            return np.asarray(self._hess(params), dtype=float)
        return fd_hessian(lambda p: self(p)[1], params)


def fd_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], params,
               rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized.

    Coordinate ``i`` is displaced by ``rel_step * max(1, |p_i|)``.
    """
    p = np.array(params, dtype=float)
    size = len(p)
    out = np.empty((size, size))
    for i in range(size):
        h = rel_step * max(1.0, abs(p[i]))
        orig = p[i]
        p[i] = orig + h
        g_plus = grad_fn(p)
        p[i] = orig - h
        g_minus = grad_fn(p)
        p[i] = orig
        out[i] = (g_plus - g_minus) / (2.0 * h)
    return 0.5 * (out + out.T)


def _check_cap(arch: Architecture, cap: int = HESSIAN_PARAM_CAP) -> None:
    if arch.parameter_count > cap:
        raise HessianCapError(f"{arch.parameter_count} parameters exceeds the dense Hessian cap "
                              f"of {cap}; an iterative eigensolver would be needed")


def hessian(arch: Architecture, params, dataset: Dataset,
            cap: int = HESSIAN_PARAM_CAP) -> np.ndarray:
    _check_cap(arch, cap)
    p = check_params(arch, params)
    _check_dataset(arch, dataset)
    ws = _Workspace(arch, dataset)
    return fd_hessian(lambda q: _evaluate(arch, q, ws, True, 0.0)[1], p)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError("scores and labels must be vectors of equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("AUC labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
