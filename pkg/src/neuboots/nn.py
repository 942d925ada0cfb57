"""Dense feed-forward networks with reverse-mode gradients and momentum SGD.

Parameters may carry leading "member" axes: a weight of shape ``(K, out, in)``
holds K independent networks that are evaluated and trained in one vectorized
pass. Every function here broadcasts over those axes, so a single network is
just the ``K``-less special case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
OUTPUT_HEADS = ("identity", "softmax")
LOSS_KINDS = ("mse", "cross_entropy", "brier")
LR_SCHEDULES = ("constant", "cosine")

LOG_EPS = 1e-12
MAX_PARAM = 1e8  # larger magnitudes are reported as divergence


@dataclass
class DenseNet:
    """Stack of affine layers ``a -> act(a @ W.T + b)``.

    ``activations[k]`` is applied after layer ``k``; the last layer's
    activation is normally ``identity`` and the ``output`` head (softmax for
    classification) is applied on top of it.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]
    output: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ShapeError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ShapeError("a network needs at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[:-1] != b.shape:
                raise ShapeError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k and self.weights[k - 1].shape[-2] != w.shape[-1]:
                raise ShapeError(
                    f"layer {k}: input dim {w.shape[-1]} != previous output dim "
                    f"{self.weights[k - 1].shape[-2]}"
                )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}; choose from {ACTIVATIONS}")
        if self.output not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {self.output!r}; choose from {OUTPUT_HEADS}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[-1]] + [w.shape[-2] for w in self.weights]

    @property
    def members(self) -> tuple[int, ...]:
        """Leading member axes shared by all parameters (``()`` for one net)."""
        return self.weights[0].shape[:-2]

    @property
    def n_params(self) -> int:
        return sum(w[(0,) * len(self.members)].size + b[(0,) * len(self.members)].size
                   for w, b in zip(self.weights, self.biases))

    def copy(self) -> "DenseNet":
        return replace(self, weights=[w.copy() for w in self.weights],
                       biases=[b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def member(self, i: int) -> "DenseNet":
        """The ``i``-th network of a stacked net (first member axis)."""
        return replace(self, weights=[w[i].copy() for w in self.weights],
                       biases=[b[i].copy() for b in self.biases])

    def unstack(self) -> list["DenseNet"]:
        return [self.member(i) for i in range(self.members[0])]

    @staticmethod
    def stack(nets: Sequence["DenseNet"]) -> "DenseNet":
        first = nets[0]
        for net in nets[1:]:
            if net.sizes != first.sizes or net.activations != first.activations or net.output != first.output:
                raise ShapeError("stacked networks must share an architecture")
        return DenseNet(
            weights=[np.stack([n.weights[k] for n in nets]) for k in range(len(first.weights))],
            biases=[np.stack([n.biases[k] for n in nets]) for k in range(len(first.biases))],
            activations=first.activations,
            output=first.output,
        )


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 100
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (self.weight_decay >= 0 and math.isfinite(self.weight_decay)):
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "constant" or total_steps <= 0:
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def init_net(sizes: Sequence[int], rng: np.random.Generator, *, hidden="relu",
             output: str = "identity", members: tuple[int, ...] = (), gain: float = 1.0) -> DenseNet:
    """He-style uniform fan-in initialization scaled by ``gain``, zero biases.

    ``hidden`` is one activation for every hidden layer or a sequence with
    one entry per hidden layer (``len(sizes) - 2`` of them).
    """
    n_hidden = len(sizes) - 2
    acts = (hidden,) * n_hidden if isinstance(hidden, str) else tuple(hidden)
    if len(acts) != n_hidden:
        raise ShapeError(f"got {len(acts)} hidden activations for {n_hidden} hidden layers")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = gain * math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(*members, fan_out, fan_in)))
        biases.append(np.zeros((*members, fan_out)))
    return DenseNet(weights, biases, acts + ("identity",), output)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_backward(name, z, d):
    if name == "relu":
        return d * (z > 0)
    if name == "tanh":
        return d * (1.0 - np.tanh(z) ** 2)
    return d


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != net.weights[0].shape[-1]:
        raise ShapeError(f"layer 0: input has {x.shape[-1]} columns, expected {net.weights[0].shape[-1]}")
    return x


def _affine(w, b, a):
    return a @ np.swapaxes(w, -1, -2) + b[..., None, :]


def _trace(net: DenseNet, x, feature_scale=None):
    """Forward pass keeping every layer's input and pre-activation.

    ``feature_scale`` multiplies the input of the last layer elementwise
    (broadcast against ``(..., m, S)``); this is where bootstrap block weights
    or dropout masks enter.
    """
    x = _check_input(net, x)
    inputs, pre = [], []
    a = x
    last = len(net.weights) - 1
    for k, (w, b, name) in enumerate(zip(net.weights, net.biases, net.activations)):
        if k == last and feature_scale is not None:
            a = a * feature_scale
        inputs.append(a)
        z = _affine(w, b, a)
        pre.append(z)
        a = _act(name, z)
    return inputs, pre, a


def features(net: DenseNet, x) -> np.ndarray:
    """Output of every layer except the last (the final feature layer)."""
    a = _check_input(net, x)
    for w, b, name in zip(net.weights[:-1], net.biases[:-1], net.activations[:-1]):
        a = _act(name, _affine(w, b, a))
    return a


def head_logits(net: DenseNet, phi: np.ndarray) -> np.ndarray:
    """Last affine layer (plus its activation) applied to final-layer features."""
    return _act(net.activations[-1], _affine(net.weights[-1], net.biases[-1], phi))


def scaled_head_logits(net: DenseNet, phi: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """``head_logits(net, phi * alphas[b])`` for every row b, as one ``(B, m, out)`` array.

    Uses ``(phi * a) @ W.T == phi @ (a[:, None] * W.T)``, scaling the small head
    matrix per row instead of building a ``(B, m, S)`` feature tensor.
    """
    w, b = net.weights[-1], net.biases[-1]
    scaled = alphas[:, :, None] * w.T[None, :, :]
    return _act(net.activations[-1], phi[None, :, :] @ scaled + b)


def apply_output(net: DenseNet, logits: np.ndarray) -> np.ndarray:
    return softmax(logits) if net.output == "softmax" else logits


def logits(net: DenseNet, x, feature_scale=None) -> np.ndarray:
    """Raw network output before the output head."""
    return _trace(net, x, feature_scale)[2]


def forward(net: DenseNet, x, feature_scale=None) -> np.ndarray:
    """Network outputs; probabilities when the output head is softmax."""
    return apply_output(net, logits(net, x, feature_scale))


def _as_targets(outputs, y, kind):
    if kind == "mse":
        # single-output targets may omit the trailing axis: (..., m) instead of (..., m, 1)
        y = np.asarray(y, dtype=float)
        m, d = outputs.shape[-2:]
        if d == 1 and not (y.ndim >= 2 and y.shape[-2:] == (m, 1)):
            y = y[..., None]
        if np.broadcast_shapes(y.shape, outputs.shape) != outputs.shape:
            raise ShapeError(f"targets {y.shape} do not match outputs {outputs.shape}")
        return y
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= outputs.shape[-1]):
        raise ShapeError("class index out of range")
    onehot = np.zeros(np.broadcast_shapes(y.shape, outputs.shape[:-1]) + outputs.shape[-1:])
    np.put_along_axis(onehot, np.broadcast_to(y, onehot.shape[:-1])[..., None].astype(np.intp), 1.0, axis=-1)
    return onehot


def per_sample_loss(outputs, y, kind: str) -> np.ndarray:
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")
    outputs = np.asarray(outputs, dtype=float)
    t = _as_targets(outputs, y, kind)
    if kind == "mse":
        return np.mean((outputs - t) ** 2, axis=-1)
    if kind == "brier":
        return np.sum((outputs - t) ** 2, axis=-1)
    p_true = np.sum(outputs * t, axis=-1)
    return -np.log(np.maximum(p_true, LOG_EPS))


def loss(outputs, y, sample_weights=None, kind: str = "mse"):
    """Weighted mean loss ``(1/m) * sum_i w_i * l_i`` (not normalized by ``sum w``).

    ``outputs`` are post-head values (probabilities for cross-entropy/brier).
    Returns a float, or an array over member axes for stacked outputs.
    """
    ell = per_sample_loss(outputs, y, kind)
    if sample_weights is not None:
        ell = ell * np.asarray(sample_weights, dtype=float)
    out = ell.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    value: float | np.ndarray = field(default=0.0)

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def scaled(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases], c * self.value)


def _output_delta(net, z_last, y, w, kind):
    """Loss value and d(loss)/d(last pre-activation) for the weighted mean loss."""
    m = z_last.shape[-2]
    a = _act(net.activations[-1], z_last)
    out = apply_output(net, a)
    t = _as_targets(out, y, kind)
    ell = per_sample_loss(out, y, kind)
    coef = np.ones(ell.shape) if w is None else np.broadcast_to(np.asarray(w, dtype=float), ell.shape)
    coef = coef / m
    value = (ell * coef).sum(axis=-1)
    if kind == "cross_entropy":
        p_true = np.sum(out * t, axis=-1, keepdims=True)
        live = p_true > LOG_EPS  # gradient vanishes where the log clamp is active
        if net.output == "softmax":
            d_a = (out - t) * live
        else:
            d_a = -t / np.maximum(p_true, LOG_EPS) * live
    else:
        d_out = 2.0 * (out - t)
        if kind == "mse":
            d_out /= out.shape[-1]
        if net.output == "softmax":
            d_a = out * (d_out - np.sum(d_out * out, axis=-1, keepdims=True))
        else:
            d_a = d_out
    return value, _act_backward(net.activations[-1], z_last, d_a * coef[..., None])


def value_and_grad(net: DenseNet, x, y, sample_weights=None, kind: str = "mse",
                   feature_scale=None) -> Gradients:
    """Gradient of the weighted mean loss w.r.t. every parameter.

    For stacked nets the returned value is per member and each member's
    gradient is that of its own loss.
    """
    if sample_weights is not None and np.any(np.asarray(sample_weights) < 0):
        raise ValueError("sample weights must be nonnegative")
    inputs, pre, _ = _trace(net, x, feature_scale)
    value, delta = _output_delta(net, pre[-1], y, sample_weights, kind)
    if not np.all(np.isfinite(value)):
        raise NumericalError("non-finite loss", batch=None)
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    last = len(net.weights) - 1
    for k in range(last, -1, -1):
        gw[k] = np.swapaxes(delta, -1, -2) @ inputs[k]
        gb[k] = delta.sum(axis=-2)
        if net.members and gw[k].shape != net.weights[k].shape:
            gw[k] = np.broadcast_to(gw[k], net.weights[k].shape).copy()
            gb[k] = np.broadcast_to(gb[k], net.biases[k].shape).copy()
        if k == 0:
            break
        d_in = delta @ net.weights[k]
        if k == last and feature_scale is not None:
            d_in = d_in * feature_scale
        delta = _act_backward(net.activations[k - 1], pre[k - 1], d_in)
    value = float(value) if np.ndim(value) == 0 else value
    return Gradients(gw, gb, value)


def grad(net: DenseNet, x, y, sample_weights=None, kind: str = "mse", feature_scale=None) -> Gradients:
    return value_and_grad(net, x, y, sample_weights, kind, feature_scale)


@dataclass
class SgdState:
    velocity: list[np.ndarray] | None = None


def sgd_step(net: DenseNet, grads: Gradients, config: SgdConfig, step_index: int,
             state: SgdState, total_steps: int = 0) -> DenseNet:
    """One momentum-SGD update, in place.

    ``v <- momentum * v + g``; ``theta <- theta - lr * v - lr * wd * theta``
    with the decay term applied to weight matrices only.
    """
    params = net.params()
    gparams = grads.params()
    if len(params) != len(gparams) or any(p.shape != g.shape for p, g in zip(params, gparams)):
        raise ShapeError("gradient structure does not match network parameters")
    lr = config.lr_at(step_index, total_steps)
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    n_w = len(net.weights)
    for i, (p, g, v) in enumerate(zip(params, gparams, state.velocity)):
        v *= config.momentum
        v += g
        if i < n_w and config.weight_decay:
            p -= lr * config.weight_decay * p
        p -= lr * v
    return net


BatchHook = Callable[[np.ndarray], Optional[np.ndarray]]
EpochHook = Callable[[int], tuple]


def _batch_slices(n_members, n, batch_size, rng):
    if n_members:
        perm = np.argsort(rng.random((n_members, n)), axis=1)
    else:
        perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[..., start:start + batch_size]


def train_loop(net: DenseNet, x, y, config: SgdConfig, rng: np.random.Generator, kind: str, *,
               sample_weights=None, epoch_hook: EpochHook | None = None,
               batch_hook: BatchHook | None = None, stacked_data: bool = False) -> list:
    """Mini-batch SGD over ``config.epochs`` epochs; returns the per-epoch loss trace.

    ``epoch_hook(epoch) -> (feature_scale, sample_weights)`` fixes both for a
    whole epoch (either may be None). ``batch_hook(batch_idx) -> feature_scale``
    draws a fresh scale per mini-batch and multiplies any epoch scale.

    With a stacked net every member sees its own shuffle. ``stacked_data``
    means ``x``, ``y`` and weights carry a leading member axis too.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    n = x.shape[-2]
    members = net.members
    k = members[0] if members else 0
    steps_per_epoch = -(-n // config.batch_size)
    total = steps_per_epoch * config.epochs
    state = SgdState()
    trace = []
    step = 0
    for epoch in range(config.epochs):
        scale, weights = (None, sample_weights)
        if epoch_hook is not None:
            scale, hook_w = epoch_hook(epoch)
            if hook_w is not None:
                weights = hook_w if weights is None else weights * hook_w
        total_loss = 0.0
        for idx in _batch_slices(k, n, config.batch_size, rng):
            if idx.ndim == 1:
                xb = x[..., idx, :]
                yb = y[..., idx] if y.ndim == x.ndim - 1 else y[..., idx, :]
                wb = None if weights is None else np.asarray(weights)[..., idx]
            else:
                src_x = x if stacked_data else np.broadcast_to(x, (k, *x.shape))
                xb = np.take_along_axis(src_x, idx[..., None], axis=-2)
                yy = np.asarray(y)
                if not stacked_data:
                    yy = np.broadcast_to(yy, (k, *yy.shape))
                yb = (np.take_along_axis(yy, idx, axis=-1) if yy.ndim == 2
                      else np.take_along_axis(yy, idx[..., None], axis=-2))
                if weights is None:
                    wb = None
                else:
                    ww = np.asarray(weights, dtype=float)
                    ww = ww if ww.ndim == 2 else np.broadcast_to(ww, (k, n))
                    wb = np.take_along_axis(ww, idx, axis=-1)
            fs = scale
            if batch_hook is not None:
                bs = batch_hook(idx)
                fs = bs if fs is None else fs * bs
            try:
                g = value_and_grad(net, xb, yb, wb, kind, fs)
            except NumericalError as exc:
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}",
                                     batch=np.asarray(idx).tolist(), epoch=epoch, step=step) from exc
            sgd_step(net, g, config, step, state, total)
            if not all(np.all(np.abs(p) < MAX_PARAM) for p in net.params()):
                raise NumericalError(f"diverged parameters at epoch {epoch}, step {step}",
                                     batch=np.asarray(idx).tolist(), epoch=epoch, step=step)
            total_loss = total_loss + np.asarray(g.value) * idx.shape[-1]
            step += 1
        trace.append(total_loss / n)
    return trace
