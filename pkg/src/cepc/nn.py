"""Feed-forward network core with analytic gradients.

Parameters are stored as float32 numpy arrays; reductions (losses, moments)
accumulate in float64. All public operations are deterministic given their
inputs, and every gradient path is verifiable against central finite
differences through grad_check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError, TrainingError
from .rng import RngStream

Matrix = np.ndarray

_ACTIVATIONS = ("tanh", "linear")
_HEADS = ("none", "softmax")


def check_matrix(x: Matrix, name: str) -> Matrix:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        raise InputError(f"{name} must be a float matrix, got dtype {x.dtype}")
    if not np.isfinite(x).all():
        raise InputError(f"{name} contains non-finite entries")
    return x


@dataclass
class Mlp:
    """Stack of dense layers; per-layer activation, optional softmax head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    head: str = "none"

    def validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases) != 0:
            if len(self.weights) != len(self.biases):
                raise ConfigError("weights and biases must pair up")
        if not self.weights:
            raise ConfigError("network needs at least one layer")
        if len(self.activations) != len(self.weights):
            raise ConfigError("one activation per layer required")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        if self.head not in _HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        prev = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {i} has inconsistent shapes {w.shape} / {b.shape}")
            if prev is not None and w.shape[0] != prev:
                raise ShapeError(f"layer {i} input width {w.shape[0]} != previous output {prev}")
            prev = w.shape[1]

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class ForwardTrace:
    """Everything the backward pass needs: inputs, pre/post activations."""

    x: Matrix
    pre: list[Matrix]
    post: list[Matrix]
    logits: Matrix
    outputs: Matrix


def init_params(
    dims: Sequence[int],
    rng: RngStream,
    *,
    final_activation: str = "linear",
    head: str = "none",
) -> Mlp:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    if len(dims) < 2:
        raise ConfigError("need at least an input and an output width")
    for d in dims:
        if not isinstance(d, (int, np.integer)) or d <= 0:
            raise ConfigError(f"layer widths must be positive integers, got {dims}")
    gen = rng.generator()
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    activations = ["tanh"] * (len(weights) - 1) + [final_activation]
    net = Mlp(weights=weights, biases=biases, activations=activations, head=head)
    net.validate()
    return net


def softmax(z: Matrix) -> Matrix:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mlp_forward(net: Mlp, x: Matrix) -> ForwardTrace:
    net.validate()
    x = check_matrix(x, "x")
    if x.shape[1] != net.in_dim:
        raise ShapeError(f"input width {x.shape[1]} != network input {net.in_dim}")
    pre: list[Matrix] = []
    post: list[Matrix] = []
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w + b
        pre.append(z)
        h = np.tanh(z) if act == "tanh" else z
        post.append(h)
    logits = post[-1]
    outputs = softmax(logits) if net.head == "softmax" else logits
    return ForwardTrace(x=x, pre=pre, post=post, logits=logits, outputs=outputs)


def mlp_backward(
    net: Mlp,
    trace: ForwardTrace,
    upstream: Matrix,
    *,
    wrt_logits: bool = False,
    detached: bool = False,
) -> tuple[list[np.ndarray], Matrix]:
    """Backpropagate upstream gradients; returns (param grads, input grads).

    upstream is taken with respect to trace.outputs unless wrt_logits is set,
    in which case the softmax head (if any) is bypassed. detached=True zeroes
    the returned input gradients so nothing flows to upstream producers.
    """
    upstream = check_matrix(upstream, "upstream")
    if upstream.shape != trace.outputs.shape:
        raise ShapeError(
            f"upstream shape {upstream.shape} != output shape {trace.outputs.shape}"
        )
    if net.head == "softmax" and not wrt_logits:
        p = trace.outputs
        g = p * (upstream - (upstream * p).sum(axis=1, keepdims=True))
    else:
        g = upstream
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    for l in range(len(net.weights) - 1, -1, -1):
        if net.activations[l] == "tanh":
            dz = g * (1.0 - trace.post[l] ** 2)
        else:
            dz = g
        inp = trace.x if l == 0 else trace.post[l - 1]
        grads[2 * l] = inp.T @ dz
        grads[2 * l + 1] = dz.sum(axis=0)
        g = dz @ net.weights[l].T
    input_grads = np.zeros_like(g) if detached else g
    return grads, input_grads


def softmax_nll(logits: Matrix, labels: np.ndarray) -> tuple[float, Matrix]:
    """Mean negative log-likelihood; gradient is (softmax - onehot) / rows."""
    logits = check_matrix(logits, "logits")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} != rows {logits.shape[0]}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integers")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    value = float(np.mean(lse - z[np.arange(n), labels]))
    p = softmax(z)
    p[np.arange(n), labels] -= 1.0
    grad = (p / n).astype(logits.dtype)
    return value, grad


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def init_adam(
    params: Sequence[np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> None:
    """One Adam update, in place. Same state and grads give the same params."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("params/grads/state length mismatch")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingError("non-finite gradient in adam_step")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    passed: bool


def grad_check(
    loss_fn: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn(params) must return (scalar value, gradient list). Evaluation runs
    on float64 copies; relative error per tensor is
    ||analytic - fd|| / max(||analytic|| + ||fd||, 1e-12).
    """
    work = [np.array(p, dtype=np.float64) for p in params]
    _, analytic = loss_fn(work)
    per_param: list[float] = []
    for k, p in enumerate(work):
        fd = np.zeros_like(p)
        flat, fdflat = p.reshape(-1), fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi, _ = loss_fn(work)
            flat[j] = orig - h
            lo, _ = loss_fn(work)
            flat[j] = orig
            fdflat[j] = (hi - lo) / (2.0 * h)
        a = np.asarray(analytic[k], dtype=np.float64)
        denom = max(np.linalg.norm(a) + np.linalg.norm(fd), 1e-12)
        per_param.append(float(np.linalg.norm(a - fd) / denom))
    worst = max(per_param) if per_param else 0.0
    return GradCheckReport(max_rel_error=worst, per_param=per_param, passed=worst < tolerance)
