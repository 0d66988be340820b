"""Mini-batch gradient estimator and the SGD loop.

Stream derivation (all keyed by the run seed and the step index, so any
single quantization event can be replayed):

  (seed, step, 0)  batch indices (uniform, with replacement)
  (seed, step, 1)  weight thresholds, drawn once per step, forward weights
                   first then (only with split thresholds) backward weights
  (seed, step, 2)  forward activation thresholds
  (seed, step, 3)  backward activation / gradient thresholds

In the batched path the thresholds of one quantization event form a
``(b, width)`` array drawn row-major, so row ``j`` belongs to sample ``j``.
The per-sample path derives its activation streams from
``(seed, step, 2 or 3, j + 1)`` instead.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .net import LayerQuantConfig, MlpModel, PerSampleGradient, grad_approx, loss_and_true_grad, quantize_weights
from .quant import QuantGrid, QuantizationDomainError, Rounding, ThresholdStream

log = logging.getLogger(__name__)

_BATCH, _WEIGHTS, _FWD, _BWD = 0, 1, 2, 3


class NonFiniteGradient(FloatingPointError):
    pass


class ModeTag(enum.Enum):
    FULL_PRECISION = "fp"
    RTN_ALL = "rtn"
    WEIGHT_ONLY_QAT = "wqat"
    SR_MIXED_QAT = "srqat"


@dataclass(frozen=True)
class TrainMode:
    tag: ModeTag
    weight_policy: Rounding = Rounding.SR

    @classmethod
    def parse(cls, text: str, weight_policy: Rounding = Rounding.SR) -> "TrainMode":
        return cls(ModeTag(text.strip().lower()), weight_policy)

    def layer_config(self, grid: QuantGrid, weight_grid: QuantGrid | None = None) -> LayerQuantConfig:
        wg = grid if weight_grid is None else weight_grid
        if self.tag is ModeTag.FULL_PRECISION:
            return LayerQuantConfig.full_precision()
        if self.tag is ModeTag.RTN_ALL:
            return LayerQuantConfig.rtn_all(grid, wg)
        if self.tag is ModeTag.WEIGHT_ONLY_QAT:
            return LayerQuantConfig.weight_only(wg, self.weight_policy)
        return LayerQuantConfig.sr_mixed(grid, wg, self.weight_policy)

    def __str__(self) -> str:
        return self.tag.value


@dataclass(frozen=True)
class TrainConfig:
    mode: TrainMode
    grid: QuantGrid = field(default_factory=QuantGrid.identity)
    batch_size: int = 32
    lr: float = 0.01
    steps: int = 1000
    seed: int = 0
    eval_every: int = 50
    weight_grid: QuantGrid | None = None
    threshold_source: str = "prng"
    split_weight_thresholds: bool = False
    layers: tuple[LayerQuantConfig, ...] | None = None
    smoothness: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.steps < 1 or self.eval_every < 1:
            raise ValueError("steps and eval_every must be >= 1")
        if self.threshold_source not in ("prng", "lfsr6"):
            raise ValueError(f"unknown threshold source {self.threshold_source!r}")

    def layer_configs(self, n_layers: int) -> list[LayerQuantConfig]:
        if self.layers is not None:
            if len(self.layers) != n_layers:
                raise ValueError(f"{len(self.layers)} layer configs for {n_layers} layers")
            return list(self.layers)
        return [self.mode.layer_config(self.grid, self.weight_grid)] * n_layers

    def fingerprint(self) -> str:
        text = "|".join(
            str(v)
            for v in (
                self.mode.tag.value,
                self.mode.weight_policy.value,
                self.grid,
                self.weight_grid,
                self.batch_size,
                repr(self.lr),
                self.steps,
                self.seed,
                self.eval_every,
                self.threshold_source,
                self.split_weight_thresholds,
                self.layers,
            )
        )
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass
class GradientEstimate:
    grads: list[np.ndarray]
    loss: float
    mode: str
    batch_size: int
    seed: int
    step: int
    weights_fwd: list[np.ndarray]
    weights_bwd: list[np.ndarray]
    indices: np.ndarray
    per_sample: list[PerSampleGradient] | None = None

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])


@dataclass
class RunRecord:
    step: int
    train_loss: float
    grad_norm_sq: float
    wallclock: float
    fingerprint: str
    status: str = "ok"


def _stream(cfg: TrainConfig, step: int, *keys: int) -> ThresholdStream:
    return ThresholdStream.derive(cfg.threshold_source, cfg.seed, step, *keys)


def sample_batch(n: int, b: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, step, _BATCH])))
    return rng.integers(0, n, size=b)


def shared_weights(model: MlpModel, cfg: TrainConfig, step: int):
    """Quantized weights for one step, shared by every sample in the batch."""
    cfgs = cfg.layer_configs(model.n_layers)
    ws = _stream(cfg, step, _WEIGHTS)
    w_fwd = quantize_weights(model, cfgs, ws, "fwd")
    if cfg.split_weight_thresholds:
        w_bwd = quantize_weights(model, cfgs, ws, "bwd")
    elif all(c.fwd_w == c.bwd_w for c in cfgs):
        w_bwd = w_fwd
    else:
        # differing knobs: quantize the backward copy separately
        w_bwd = quantize_weights(model, cfgs, ws, "bwd")
    return w_fwd, w_bwd


def minibatch_gradient(
    model: MlpModel, x, y, cfg: TrainConfig, step: int, indices=None, per_sample: bool = False
) -> GradientEstimate:
    """Average of per-sample quantized gradients over one mini-batch.

    Weight thresholds are drawn once and shared by the batch; activation and
    gradient thresholds are fresh for every sample. ``indices`` overrides
    the batch draw (with replacement from ``x``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if indices is None:
        indices = sample_batch(x.shape[0], cfg.batch_size, cfg.seed, step)
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("empty batch")
    cfgs = cfg.layer_configs(model.n_layers)
    w_fwd, w_bwd = shared_weights(model, cfg, step)
    xb, yb = x[indices], y[indices]

    if not per_sample:
        est, loss = grad_approx(
            model, xb, yb, cfgs, _stream(cfg, step, _FWD), _stream(cfg, step, _BWD), w_fwd, w_bwd
        )
        grads, samples = est.grads, None
    else:
        samples = []
        losses = []
        for j in range(len(indices)):
            est, lj = grad_approx(
                model, xb[j], yb[j], cfgs,
                _stream(cfg, step, _FWD, j + 1), _stream(cfg, step, _BWD, j + 1),
                w_fwd, w_bwd,
            )
            est.sample_id = int(indices[j])
            samples.append(est)
            losses.append(lj)
        grads = [np.mean([s.grads[i] for s in samples], axis=0) for i in range(model.n_layers)]
        loss = float(np.mean(losses))
    return GradientEstimate(
        grads, loss, str(cfg.mode), len(indices), cfg.seed, step, w_fwd, w_bwd, indices, samples
    )


def sgd_step(weights: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in layer {i}")
    return [w - lr * g for w, g in zip(weights, grads)]


def train(model: MlpModel, x, y, cfg: TrainConfig) -> list[RunRecord]:
    """Run ``cfg.steps`` SGD steps; evaluate full-batch float64 loss and ``||grad||^2``
    at every multiple of ``eval_every`` (step 0 and the final step included)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if cfg.smoothness is not None and cfg.lr > 1.0 / (4.0 * cfg.smoothness):
        log.warning("lr %.3g exceeds 1/(4L) = %.3g", cfg.lr, 1.0 / (4.0 * cfg.smoothness))
    fp = cfg.fingerprint()
    t0 = time.perf_counter()
    records: list[RunRecord] = []
    weights = list(model.weights)

    def evaluate(t: int) -> bool:
        loss, g = loss_and_true_grad(model.with_weights(weights), x, y)
        gn = float(sum(np.sum(gi * gi) for gi in g))
        ok = math.isfinite(loss) and math.isfinite(gn)
        records.append(RunRecord(t, loss, gn, time.perf_counter() - t0, fp, "ok" if ok else "diverged"))
        return ok

    if not evaluate(0):
        return records
    for t in range(cfg.steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                est = minibatch_gradient(model.with_weights(weights), x, y, cfg, t)
                weights = sgd_step(weights, est.grads, cfg.lr)
            if not all(np.all(np.isfinite(w)) for w in weights):
                raise NonFiniteGradient("weights overflowed")
        except (NonFiniteGradient, QuantizationDomainError) as exc:
            log.info("run %s diverged at step %d: %s", fp, t, exc)
            records.append(RunRecord(t + 1, math.nan, math.nan, time.perf_counter() - t0, fp, "diverged"))
            return records
        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.steps:
            with np.errstate(over="ignore", invalid="ignore"):
                if not evaluate(t + 1):
                    return records
    return records
