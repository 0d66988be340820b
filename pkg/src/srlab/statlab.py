"""Monte Carlo probes for the bias / variance behaviour of SR mini-batch SGD.

All stochastic gates follow one convention: a statistic passes when it is
within ``Z_GATE`` standard errors of its target.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .net import LayerQuantConfig, MlpModel, grad_approx
from .quant import QuantGrid, Rounding, ThresholdStream, quantize, sr_error_variance, threshold_quantize

Z_GATE = 4.0


class UncertifiedSmoothness(ValueError):
    """No certified smoothness constant is available for the model."""


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _quantize_pairs(x: np.ndarray, grid: QuantGrid, mode: Rounding, rng: np.random.Generator) -> np.ndarray:
    if mode is Rounding.SR and not grid.is_identity:
        return np.asarray(threshold_quantize(x, grid, rng.random(x.shape)))
    if mode is Rounding.RTN and not grid.is_identity:
        return np.asarray(threshold_quantize(x, grid, 0.5))
    return x


# ---------------------------------------------------------------------------
# MSE decomposition of one weight-gradient component


@dataclass
class MseDecomposition:
    """Empirical split of the mini-batch gradient MSE.

    ``quant_term`` is the paired Monte Carlo estimate (so ``total == sampling
    + quant + cross`` up to rounding); ``quant_term_conditional`` averages the
    exact per-batch SR variance instead and is an independent estimate of
    the same quantity.
    """

    total_mse: float
    sampling_term: float
    quant_term: float
    cross_term: float
    quant_term_conditional: float
    trials: int
    total_se: float
    sampling_se: float
    quant_se: float
    cross_se: float
    residual_se: float  # stderr of total - sampling - quant_term_conditional

    @property
    def residual(self) -> float:
        return self.total_mse - self.sampling_term - self.quant_term_conditional

    def identity_gap(self) -> float:
        return self.total_mse - (self.sampling_term + self.quant_term + self.cross_term)

    def cross_ok(self) -> bool:
        return abs(self.cross_term) <= Z_GATE * self.cross_se

    def residual_ok(self) -> bool:
        return abs(self.residual) <= Z_GATE * self.residual_se


def mse_decompose(
    a: np.ndarray,
    a_out: np.ndarray,
    b: int,
    grid_a: QuantGrid,
    grid_out: QuantGrid,
    trials: int,
    seed: int = 0,
    i: int = 0,
    j: int = 0,
    mode: Rounding = Rounding.SR,
    replace: bool = True,
) -> MseDecomposition:
    """Decompose ``E[(dW_full - dW_quant_mini)^2]`` for component ``(i, j)``.

    ``a`` holds the full-dataset input activations (D x h1), ``a_out`` the
    upstream gradients (D x h2). Each trial samples a batch of ``b`` rows and
    fresh per-element thresholds.
    """
    a = np.asarray(a, dtype=np.float64)
    a_out = np.asarray(a_out, dtype=np.float64)
    d = a.shape[0]
    if a_out.shape[0] != d or not 1 <= b:
        raise ValueError("need A.rows == Aout.rows and b >= 1")
    if not replace and b > d:
        raise ValueError(f"batch size {b} exceeds dataset size {d} without replacement")
    rng = np.random.default_rng(seed)
    xs, ys = a[:, i], a_out[:, j]
    prod = xs * ys
    # same reduction shape as the batch means, so a full batch reproduces it bit-for-bit
    full = float(np.mean(prod[None, :], axis=1)[0])

    if replace:
        idx = rng.integers(0, d, size=(trials, b))
    else:
        idx = np.sort(np.argsort(rng.random((trials, d)), axis=1)[:, :b], axis=1)
    x, y = xs[idx], ys[idx]
    x_hat = _quantize_pairs(x, grid_a, mode, rng)
    y_hat = _quantize_pairs(y, grid_out, mode, rng)

    true_mini = np.mean(prod[idx], axis=1)
    quant_mini = np.mean(x_hat * y_hat, axis=1)
    e = full - quant_mini
    s = full - true_mini
    q = true_mini - quant_mini

    var_x = sr_error_variance(x, grid_a) if mode is Rounding.SR else np.zeros_like(x)
    var_y = sr_error_variance(y, grid_out) if mode is Rounding.SR else np.zeros_like(y)
    tq_cond = np.sum(x * x * var_y + y * y * var_x + var_x * var_y, axis=1) / (b * b)

    e2, s2, q2, sq = e * e, s * s, q * q, 2.0 * s * q
    total, total_se = _mean_se(e2)
    ts, ts_se = _mean_se(s2)
    tq, tq_se = _mean_se(q2)
    cross, cross_se = _mean_se(sq)
    tqc = float(np.mean(tq_cond))
    _, resid_se = _mean_se(e2 - s2 - tq_cond)
    return MseDecomposition(total, ts, tq, cross, tqc, trials, total_se, ts_se, tq_se, cross_se, resid_se)


# ---------------------------------------------------------------------------
# quantization term vs its analytic bound


@dataclass
class TqCheck:
    measured: float
    stderr: float
    bound: float
    batch_size: int

    @property
    def ok(self) -> bool:
        if self.bound == 0:
            return self.measured == 0
        rel = self.stderr / self.measured if self.measured > 0 else 0.0
        return self.measured <= self.bound * (1.0 + Z_GATE * rel)


def tq_bound(a_col: np.ndarray, out_col: np.ndarray, b: int, step_a: float, step_out: float) -> float:
    """``(E[A^2] dOut^2 + E[Aout^2] dA^2 + dA^2 dOut^2) / b`` with dataset second moments."""
    m2a = float(np.mean(np.square(a_col)))
    m2o = float(np.mean(np.square(out_col)))
    da2, do2 = step_a * step_a, step_out * step_out
    return (m2a * do2 + m2o * da2 + da2 * do2) / b


def tq_bound_check(
    a: np.ndarray,
    a_out: np.ndarray,
    b: int,
    step_a: float,
    step_out: float,
    trials: int,
    seed: int = 0,
    i: int = 0,
    j: int = 0,
) -> TqCheck:
    """Measure the SR quantization term for uniform grids and compare with its bound."""
    a = np.asarray(a, dtype=np.float64)
    a_out = np.asarray(a_out, dtype=np.float64)
    bound = tq_bound(a[:, i], a_out[:, j], b, step_a, step_out)
    dec = mse_decompose(
        a, a_out, b, QuantGrid.uniform(step_a), QuantGrid.uniform(step_out), trials, seed, i, j, Rounding.SR
    )
    return TqCheck(dec.quant_term, dec.quant_se, bound, b)


# ---------------------------------------------------------------------------
# scaling-law fits


@dataclass
class ScalingFit:
    xs: list[float]
    ys: list[float]
    law: str
    slope: float
    intercept: float
    residual: float


def fit_scaling(xs: Sequence[float], ys: Sequence[float], law: str = "inverse_b") -> ScalingFit:
    """Least-squares slope of a scaling law.

    ``inverse_b``: fit ``ln y`` against ``ln x`` (expect -1).
    ``two_pow_minus_2b``: fit ``log2 y`` against ``x`` = bits (expect -2).
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 4 or x.size != y.size:
        raise ValueError("need at least 4 (x, y) points of equal length")
    if np.any(np.diff(x) <= 0):
        raise ValueError("xs must be strictly increasing")
    if np.any(y <= 0):
        raise ValueError("ys must be positive")
    if law == "inverse_b":
        u, v = np.log(x), np.log(y)
    elif law == "two_pow_minus_2b":
        u, v = x, np.log2(y)
    else:
        raise ValueError(f"unknown law {law!r}")
    slope, intercept = np.polyfit(u, v, 1)
    resid = float(np.sqrt(np.mean((v - (slope * u + intercept)) ** 2)))
    return ScalingFit(x.tolist(), y.tolist(), law, float(slope), float(intercept), resid)


# ---------------------------------------------------------------------------
# weight-quantization bias


@dataclass
class BiasReport:
    measured_bias: float
    bound: float
    smoothness: float
    dim: int
    step: float
    mode: str
    trials: int

    @property
    def ok(self) -> bool:
        return self.measured_bias <= self.bound


def least_squares_smoothness(x: np.ndarray) -> float:
    """Smoothness of ``mean ||x W - y||^2`` in ``W``: ``2 lambda_max(X^T X) / n``."""
    x = np.asarray(x, dtype=np.float64)
    return float(2.0 * np.linalg.eigvalsh(x.T @ x / x.shape[0])[-1])


def _full_grad(model: MlpModel, x, y) -> np.ndarray:
    est, _ = grad_approx(model, x, y, LayerQuantConfig())
    return est.flat


def weight_bias(model: MlpModel, x, y, step: float, mode: Rounding, trials: int = 1000, seed: int = 0) -> float:
    """``||grad L(w_hat) - grad L(w)||``; the worst case over ``trials`` draws for SR."""
    grid = QuantGrid.uniform(step)
    g0 = _full_grad(model, x, y)
    n = 1 if mode is not Rounding.SR else trials
    stream = ThresholdStream.prng(seed)
    worst = 0.0
    for _ in range(n):
        w_hat = [quantize(w, grid, mode, stream) for w in model.weights]
        worst = max(worst, float(np.linalg.norm(_full_grad(model.with_weights(w_hat), x, y) - g0)))
    return worst


def bias_check(
    model: MlpModel,
    x,
    y,
    step: float,
    mode: Rounding,
    trials: int = 1000,
    seed: int = 0,
    smoothness: float | None = None,
) -> BiasReport:
    """Compare the weight-quantization gradient bias with ``c * L * sqrt(d) * step``.

    ``c`` is 1/2 for RTN and 1 for SR. ``L`` is computed in closed form for
    one-layer least-squares models; any other model needs ``smoothness``.
    """
    if smoothness is None:
        if model.n_layers != 1 or model.loss != "mse":
            raise UncertifiedSmoothness("smoothness is only known in closed form for 1-layer least squares")
        smoothness = least_squares_smoothness(x)
    if mode is Rounding.IDENTITY:
        raise ValueError("bias_check needs RTN or SR")
    d = model.n_params
    c = 0.5 if mode is Rounding.RTN else 1.0
    bound = c * smoothness * math.sqrt(d) * step
    measured = 0.0 if step == 0 else weight_bias(model, x, y, step, mode, trials, seed)
    return BiasReport(measured, bound, smoothness, d, step, mode.value, trials if mode is Rounding.SR else 1)


# ---------------------------------------------------------------------------
# error-floor probe


@dataclass
class FloorCell:
    label: str
    batch_size: int
    tail_mean: float
    tail_se: float
    n_points: int
    valid: bool
    extra: dict = field(default_factory=dict)


def tail_stats(values: Sequence[float], frac: float = 0.25) -> tuple[float, float, int]:
    """Mean and stderr of the last ``frac`` of a sequence of evaluations."""
    v = np.asarray(values, dtype=np.float64)
    k = max(1, int(math.ceil(len(v) * frac)))
    m, se = _mean_se(v[-k:])
    return m, se, k


def error_floor_probe(model: MlpModel, x, y, cells, seeds: Sequence[int] = (0,), frac: float = 0.25) -> list[FloorCell]:
    """Train every ``(label, TrainConfig)`` in ``cells`` and report the tail ``||grad||^2``.

    The cell value is the mean over seeds of each run's tail-window mean.
    With several seeds the stderr is taken across seeds (tail points of one
    run are autocorrelated); with one seed it falls back to the tail points.
    """
    from dataclasses import replace

    from .trainer import train

    out = []
    for label, cfg in cells:
        means, pts, valid = [], [], True
        for s in seeds:
            recs = train(model, x, y, replace(cfg, seed=s))
            if any(r.status != "ok" for r in recs):
                valid = False
                break
            m, _, k = tail_stats([r.grad_norm_sq for r in recs], frac)
            means.append(m)
            pts.extend(r.grad_norm_sq for r in recs[-k:])
        if not valid:
            out.append(FloorCell(label, cfg.batch_size, math.nan, math.nan, 0, False))
            continue
        m, se = _mean_se(np.array(means))
        if len(means) < 2:
            se = _mean_se(np.array(pts))[1]
        out.append(FloorCell(label, cfg.batch_size, m, se, len(pts), True))
    return out


def as_rows(obj) -> dict:
    return asdict(obj)
