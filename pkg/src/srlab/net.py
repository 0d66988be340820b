"""Quantized linear layers and a small bias-free MLP.

Each linear layer has five quantization knobs: forward activation, forward
weight, backward activation, backward weight and backward upstream
gradient. The forward pass computes ``Q(A_in) @ Q(W)``; the backward pass
re-quantizes ``A_in`` and ``W`` with the backward knobs and the upstream
gradient with its own knob, then forms

    grad_in = Q(dA_out) @ Q(W).T        grad_W = Q(A_in).T @ Q(dA_out)

Nonlinearities and the loss are evaluated in float64. Inputs may hold a
batch of samples as rows; upstream gradients stay per-sample (not divided
by the batch size) until the weight gradient is averaged, so a batched
call equals the mean of per-sample calls.

Threshold draw order, per stream:
  forward (layer 1..n): A_in then W
  backward (layer n..1): A_in, W, then the upstream gradient
Weights passed in precomputed (``weights_fwd`` / ``weights_bwd``) draw nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import DimensionError, as_mat
from .quant import QuantGrid, Rounding, ThresholdStream, quantize


@dataclass(frozen=True)
class Knob:
    grid: QuantGrid
    mode: Rounding

    @classmethod
    def off(cls) -> "Knob":
        return cls(QuantGrid.identity(), Rounding.IDENTITY)

    @property
    def is_identity(self) -> bool:
        return self.mode is Rounding.IDENTITY or self.grid.is_identity

    def apply(self, x: np.ndarray, stream: ThresholdStream | None) -> np.ndarray:
        return quantize(x, self.grid, self.mode, stream)


_OFF = Knob.off()


@dataclass(frozen=True)
class LayerQuantConfig:
    fwd_act: Knob = _OFF
    fwd_w: Knob = _OFF
    bwd_act: Knob = _OFF
    bwd_w: Knob = _OFF
    bwd_grad: Knob = _OFF

    @classmethod
    def full_precision(cls) -> "LayerQuantConfig":
        return cls()

    @classmethod
    def rtn_all(cls, grid: QuantGrid, weight_grid: QuantGrid | None = None) -> "LayerQuantConfig":
        wg = grid if weight_grid is None else weight_grid
        a = Knob(grid, Rounding.RTN)
        w = Knob(wg, Rounding.RTN)
        return cls(a, w, a, w, a)

    @classmethod
    def weight_only(cls, weight_grid: QuantGrid, mode: Rounding) -> "LayerQuantConfig":
        w = Knob(weight_grid, mode)
        return cls(fwd_w=w, bwd_w=w)

    @classmethod
    def sr_mixed(
        cls, grid: QuantGrid, weight_grid: QuantGrid | None = None, weight_mode: Rounding = Rounding.SR
    ) -> "LayerQuantConfig":
        wg = grid if weight_grid is None else weight_grid
        w = Knob(wg, weight_mode)
        s = Knob(grid, Rounding.SR)
        return cls(fwd_act=_OFF, fwd_w=w, bwd_act=s, bwd_w=w, bwd_grad=s)


@dataclass
class LinearCache:
    a_in: np.ndarray
    w: np.ndarray
    w_fwd: np.ndarray


@dataclass
class MlpModel:
    """Bias-free MLP; ``weights[i]`` maps width ``i`` to width ``i+1``."""

    weights: list[np.ndarray]
    activation: str = "relu"
    loss: str = "mse"

    def __post_init__(self):
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in ("mse", "xent"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not self.weights:
            raise ValueError("model needs at least one layer")
        self.weights = [as_mat(w, f"W{i}") for i, w in enumerate(self.weights)]
        for i in range(1, len(self.weights)):
            if self.weights[i - 1].shape[1] != self.weights[i].shape[0]:
                raise DimensionError(
                    f"layer {i - 1} output {self.weights[i - 1].shape[1]} != layer {i} input {self.weights[i].shape[0]}"
                )

    @classmethod
    def init(cls, widths: Sequence[int], seed: int, activation="relu", loss="mse", scale: float = 1.0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        ws = [
            rng.standard_normal((widths[i], widths[i + 1])) * scale * np.sqrt(2.0 / widths[i])
            for i in range(len(widths) - 1)
        ]
        return cls(ws, activation, loss)

    def with_weights(self, weights: Sequence[np.ndarray]) -> "MlpModel":
        return MlpModel([np.asarray(w, dtype=np.float64) for w in weights], self.activation, self.loss)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights)


@dataclass
class PerSampleGradient:
    """Per-layer weight gradients plus the quantized weights they were computed with.

    For a batched call the gradients are the mean over the batch rows.
    """

    grads: list[np.ndarray]
    weights_fwd: list[np.ndarray]
    weights_bwd: list[np.ndarray]
    sample_id: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])


def forward_linear(a_in, w, cfg: LayerQuantConfig, stream: ThresholdStream | None, w_hat=None):
    a_q = cfg.fwd_act.apply(a_in, stream)
    w_q = cfg.fwd_w.apply(w, stream) if w_hat is None else w_hat
    if a_q.shape[1] != w_q.shape[0]:
        raise DimensionError(f"activation {a_q.shape} does not conform with weight {w_q.shape}")
    return a_q @ w_q, LinearCache(a_in, w, w_q)


def _backward_collect(cache, grad_out, cfg, stream, w_hat):
    if cache is None:
        raise ValueError("backward_linear called without a forward cache")
    if grad_out.shape != (cache.a_in.shape[0], cache.w.shape[1]):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match layer output")
    a_q = cfg.bwd_act.apply(cache.a_in, stream)
    w_q = cfg.bwd_w.apply(cache.w, stream) if w_hat is None else w_hat
    g_q = cfg.bwd_grad.apply(grad_out, stream)
    return g_q @ w_q.T, a_q.T @ g_q, w_q


def backward_linear(cache: LinearCache | None, grad_out, cfg: LayerQuantConfig, stream, w_hat=None):
    """Returns ``(grad_in, grad_W)``; ``grad_W`` is summed over batch rows."""
    grad_in, grad_w, _ = _backward_collect(cache, np.asarray(grad_out, dtype=np.float64), cfg, stream, w_hat)
    return grad_in, grad_w


def _loss_and_seed_grad(out: np.ndarray, y: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Mean loss over rows and the per-sample (unscaled) gradient w.r.t. the output."""
    if loss == "mse":
        r = out - y
        return float(np.mean(np.sum(r * r, axis=1))), 2.0 * r
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(np.sum(y * logp, axis=1))), np.exp(logp) - y


def quantize_weights(model: MlpModel, cfgs: Sequence[LayerQuantConfig], stream, which: str = "fwd") -> list[np.ndarray]:
    attr = "fwd_w" if which == "fwd" else "bwd_w"
    return [getattr(c, attr).apply(w, stream) for c, w in zip(cfgs, model.weights)]


def _layer_cfgs(model: MlpModel, cfgs) -> list[LayerQuantConfig]:
    if isinstance(cfgs, LayerQuantConfig):
        return [cfgs] * model.n_layers
    cfgs = list(cfgs)
    if len(cfgs) != model.n_layers:
        raise ValueError(f"{len(cfgs)} layer configs for a {model.n_layers}-layer model")
    return cfgs


def grad_approx(
    model: MlpModel,
    x,
    y,
    cfgs,
    fwd_stream: ThresholdStream | None = None,
    bwd_stream: ThresholdStream | None = None,
    weights_fwd: Sequence[np.ndarray] | None = None,
    weights_bwd: Sequence[np.ndarray] | None = None,
) -> tuple[PerSampleGradient, float]:
    """Quantized forward + backward pass; returns the gradient and the forward loss.

    ``x``/``y`` are one sample (1-D) or a batch (rows). ``cfgs`` is one
    :class:`LayerQuantConfig` per layer, or a single one for all layers.
    ``bwd_stream`` defaults to ``fwd_stream``.
    """
    cfgs = _layer_cfgs(model, cfgs)
    if bwd_stream is None:
        bwd_stream = fwd_stream
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
    if x.shape[1] != model.weights[0].shape[0] or y.shape[1] != model.weights[-1].shape[1]:
        raise DimensionError(f"data shapes {x.shape}, {y.shape} do not fit the model")
    n = model.n_layers
    relu = model.activation == "relu"

    caches: list[LinearCache] = []
    pre: list[np.ndarray] = []
    used_fwd: list[np.ndarray] = []
    a = x
    for i, (w, c) in enumerate(zip(model.weights, cfgs)):
        w_hat = weights_fwd[i] if weights_fwd is not None else None
        try:
            z, cache = forward_linear(a, w, c, fwd_stream, w_hat=w_hat)
        except ValueError as exc:
            raise type(exc)(f"layer {i}: {exc}") from exc
        used_fwd.append(cache.w_fwd)
        caches.append(cache)
        pre.append(z)
        a = np.maximum(z, 0.0) if (relu and i < n - 1) else z

    loss, g = _loss_and_seed_grad(a, y, model.loss)

    b = x.shape[0]
    grads: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    used_bwd: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        c = cfgs[i]
        w_hat = weights_bwd[i] if weights_bwd is not None else None
        try:
            g_in, g_w, w_hat = _backward_collect(caches[i], g, c, bwd_stream, w_hat)
        except ValueError as exc:
            raise type(exc)(f"layer {i}: {exc}") from exc
        grads[i] = g_w / b
        used_bwd[i] = w_hat
        if i > 0:
            g = g_in * (pre[i - 1] > 0) if relu else g_in
    return PerSampleGradient(grads, used_fwd, used_bwd), loss


def loss_and_true_grad(model: MlpModel, x, y) -> tuple[float, list[np.ndarray]]:
    """Full-batch float64 loss and gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0 or x.size == 0:
        raise ValueError("empty dataset")
    est, loss = grad_approx(model, x, y, LayerQuantConfig())
    return loss, est.grads


def loss_only(model: MlpModel, x, y) -> float:
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for i, w in enumerate(model.weights):
        a = a @ w
        if model.activation == "relu" and i < model.n_layers - 1:
            a = np.maximum(a, 0.0)
    return _loss_and_seed_grad(a, np.atleast_2d(y), model.loss)[0]
