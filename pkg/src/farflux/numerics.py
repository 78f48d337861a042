"""Dense-network numerics: MLPs, reverse-mode gradients, 2D softmax, Adam.

Everything runs in float64. Forward passes are pure functions of
(parameters, input) and safe to call concurrently; optimizer state is
mutated by a single writer. Only the fixed computation graph used by the
two model arms is differentiated here - this is not a general autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Mlp:
    """Fully connected net: ReLU on hidden layers, identity on the output.

    weights[k] has shape [out_k, in_k]; consecutive dims must chain.
    """

    weights: list
    biases: list

    @property
    def dims(self):
        """Layer sizes as (in, h1, ..., out)."""
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_layers(self):
        return len(self.weights)

    def validate(self):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k}: in-dim {w.shape[1]} does not chain "
                                 f"with previous out-dim {self.weights[k - 1].shape[0]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"layer {k}: non-finite parameters")

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(layer_dims, rng):
    """He-style uniform fan-in init, biases zero.

    layer_dims: (in, h1, ..., out). rng: np.random.Generator.
    """
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


class MlpWorkspace:
    """Reusable buffers for chunked passes: transposed weights, one
    activation buffer per layer, one back-gradient buffer per layer.
    Sized for up to `rows` input rows; smaller chunks use row views."""

    def __init__(self, dims, rows):
        self.rows = rows
        self.wt = [np.empty((din, dout))
                   for din, dout in zip(dims[:-1], dims[1:])]
        self.acts = [np.empty((rows, d)) for d in dims[1:]]
        self.back = [np.empty((rows, d)) for d in dims[:-1]]

    def load(self, mlp):
        for buf, w in zip(self.wt, mlp.weights):
            np.copyto(buf, w.T)


def forward_into(mlp, x, ws, keep_activations=False):
    """Forward pass writing activations into workspace buffers. The
    returned arrays are views into `ws` and are only valid until the
    next call."""
    n = x.shape[0]
    acts = [x]
    a = x
    last = mlp.n_layers - 1
    for k, b in enumerate(mlp.biases):
        a = kernels.dense_forward(a, ws.wt[k], b, k < last,
                                  ws.acts[k][:n])
        if keep_activations:
            acts.append(a)
    return (a, acts) if keep_activations else a


def backward_into(mlp, acts, da, ws):
    """Reverse pass from upstream gradient `da` (mutated in place),
    using workspace buffers for the da chain. Returns (grads, dX)."""
    n = da.shape[0]
    grads = [None] * mlp.n_layers
    last = mlp.n_layers - 1
    for k in range(last, -1, -1):
        if k < last:
            da = kernels.relu_backward(da, acts[k + 1])
        grads[k] = (np.dot(da.T, acts[k]), da.sum(axis=0))
        da = np.dot(da, mlp.weights[k], out=ws.back[k][:n])
    return grads, da


def mlp_forward_batch(mlp, x, keep_activations=False):
    """Forward pass on x:[n, in]. Optionally returns the per-layer
    post-activation list needed for the backward pass (inputs first)."""
    if x.ndim != 2 or x.shape[1] != mlp.weights[0].shape[1]:
        raise ShapeError(f"input {x.shape} does not match first layer "
                         f"in-dim {mlp.weights[0].shape[1]}")
    acts = [x]
    a = x
    last = mlp.n_layers - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        a = kernels.dense_forward(a, np.ascontiguousarray(w.T), b, k < last)
        if keep_activations:
            acts.append(a)
    if keep_activations:
        return a, acts
    return a


def mlp_forward(mlp, x):
    """Single-vector forward pass; returns a 1D output vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite input")
    return mlp_forward_batch(mlp, x[None, :])[0]


def mlp_gradients(mlp, x, upstream):
    """Reverse-mode gradients for a batch.

    x: [n, in]; upstream: [n, out] gradient of some scalar loss w.r.t.
    the outputs. Returns ([(dW, db) per layer], dX). The ReLU subgradient
    at exactly zero pre-activation is zero.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.isfinite(upstream).all():
        raise NumericError("non-finite upstream gradient")
    _, acts = mlp_forward_batch(mlp, x, keep_activations=True)
    return _backward_from_acts(mlp, acts, upstream)


def _backward_from_acts(mlp, acts, upstream):
    grads = [None] * mlp.n_layers
    da = upstream
    last = mlp.n_layers - 1
    for k in range(last, -1, -1):
        if k < last:
            da = kernels.relu_backward(da, acts[k + 1])
        grads[k] = (np.dot(da.T, acts[k]), da.sum(axis=0))
        da = np.dot(da, mlp.weights[k])
    return grads, da


def softmax_2d(logits):
    """Softmax over both spatial dimensions of a [L, W] grid.

    Max-subtraction keeps this stable for logits of any finite magnitude;
    the output sums to 1 within 1e-9.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"expected [L, W] logits, got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    el, w = logits.shape
    return kernels.softmax_rows(np.ascontiguousarray(logits.reshape(1, el * w))).reshape(el, w)


@dataclass
class AdamState:
    """First/second moments per parameter array plus the step counter."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_init(params, lr=1e-4):
    return AdamState(m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params], lr=lr)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place. Aborts on non-finite
    gradients without touching parameters or moments."""
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; step aborted")
    state.step += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(p.ravel(), g.ravel(), m.ravel(), v.ravel(),
                            state.step, state.lr, state.beta1, state.beta2,
                            state.eps)
    return params, state
