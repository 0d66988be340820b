"""Quantization grids, threshold rounding (RTN / SR) and threshold streams.

Every rounding here goes through one primitive, :func:`threshold_quantize`:
the value is floored onto the grid unless the fractional position inside
the grid cell reaches the threshold ``eps``, in which case it goes up.
``eps = 0.5`` is round-to-nearest with ties toward +inf, ``eps ~ U[0, 1)``
is stochastic rounding.

Grids are uniform (step ``Delta``), an ExMy floating-point format, or the
identity. ExMy formats use exponent bias ``2**(e-1) - 1``, gradual
underflow (the lowest binade's step extends down to zero), no inf/NaN
encodings, and saturate to ``+-max_finite``.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


class QuantizationDomainError(ValueError):
    """Raised for non-finite inputs or thresholds outside ``[0, 1]``."""


class GridKind(enum.Enum):
    UNIFORM = "uniform"
    FLOAT = "float"
    IDENTITY = "identity"


@dataclass(frozen=True)
class QuantGrid:
    """A quantization lattice.

    Use the :meth:`uniform`, :meth:`fp` and :meth:`identity` constructors
    (or :func:`parse_grid`) rather than building one field by field.
    """

    kind: GridKind
    step: float = 0.0
    exp_bits: int = 0
    man_bits: int = 0

    def __post_init__(self):
        if self.kind is GridKind.UNIFORM:
            if not (math.isfinite(self.step) and self.step >= 0):
                raise ValueError(f"uniform step must be finite and >= 0, got {self.step!r}")
        elif self.kind is GridKind.FLOAT:
            if self.exp_bits < 1 or self.man_bits < 0:
                raise ValueError(f"invalid float format E{self.exp_bits}M{self.man_bits}")

    @classmethod
    def uniform(cls, step: float) -> "QuantGrid":
        if step == 0:
            return cls.identity()
        return cls(GridKind.UNIFORM, step=float(step))

    @classmethod
    def fp(cls, exp_bits: int, man_bits: int) -> "QuantGrid":
        return cls(GridKind.FLOAT, exp_bits=int(exp_bits), man_bits=int(man_bits))

    @classmethod
    def identity(cls) -> "QuantGrid":
        return cls(GridKind.IDENTITY)

    @property
    def is_identity(self) -> bool:
        return self.kind is GridKind.IDENTITY

    @property
    def exp_bias(self) -> int:
        return 2 ** (self.exp_bits - 1) - 1

    @property
    def min_exp(self) -> int:
        """Unbiased exponent of the smallest normal binade."""
        return 1 - self.exp_bias

    @property
    def max_exp(self) -> int:
        # all exponent codes are finite values
        return (2**self.exp_bits - 1) - self.exp_bias

    @property
    def max_finite(self) -> float:
        if self.kind is not GridKind.FLOAT:
            return math.inf
        return math.ldexp(2.0 - 2.0**-self.man_bits, self.max_exp)

    def local_step(self, x: ArrayLike) -> ArrayLike:
        """Grid spacing around ``x``: ``Delta`` for uniform grids, ``2**(e - man_bits)`` for ExMy."""
        if self.kind is GridKind.IDENTITY:
            return np.zeros_like(np.asarray(x, dtype=np.float64))[()]
        if self.kind is GridKind.UNIFORM:
            return np.full_like(np.asarray(x, dtype=np.float64), self.step)[()]
        _, e = np.frexp(np.abs(np.asarray(x, dtype=np.float64)))
        binade = np.clip(e - 1, self.min_exp, self.max_exp)
        return np.ldexp(1.0, binade - self.man_bits)

    def spec(self) -> str:
        if self.kind is GridKind.IDENTITY:
            return "id"
        if self.kind is GridKind.UNIFORM:
            return f"u:{self.step!r}"
        return f"fp:E{self.exp_bits}M{self.man_bits}"

    def __str__(self) -> str:
        return self.spec()


_FP_RE = re.compile(r"^(?:fp:)?E(\d+)M(\d+)$", re.IGNORECASE)


def parse_grid(text: str) -> QuantGrid:
    """Parse ``"u:<step>"``, ``"fp:E<e>M<m>"`` (``"E4M1"`` also accepted) or ``"id"``."""
    s = text.strip()
    if s.lower() in ("id", "identity"):
        return QuantGrid.identity()
    if s.lower().startswith("u:"):
        try:
            step = float(s[2:])
        except ValueError:
            raise ValueError(f"bad uniform grid step in {text!r}") from None
        return QuantGrid.uniform(step)
    m = _FP_RE.match(s)
    if m:
        return QuantGrid.fp(int(m.group(1)), int(m.group(2)))
    raise ValueError(f"unrecognised grid spec {text!r}")


# ---------------------------------------------------------------------------
# rounding


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(x)))[0]
        raise QuantizationDomainError(f"non-finite value at index {tuple(int(i) for i in bad)}")


def _round_on_step(x: np.ndarray, step: np.ndarray, eps: np.ndarray) -> np.ndarray:
    r = x / step
    fl = np.floor(r)
    frac = r - fl
    # frac == 0 is already on the grid; without this guard eps == 0 would push
    # grid points up one cell
    up = (frac >= eps) & (frac > 0)
    return (fl + up) * step


def threshold_quantize(x: ArrayLike, grid: QuantGrid, eps: ArrayLike) -> ArrayLike:
    """Floor ``x`` onto ``grid`` unless its fractional cell position is ``>= eps``.

    Works element-wise on arrays; ``eps`` broadcasts against ``x``.
    """
    xa = np.asarray(x, dtype=np.float64)
    ea = np.asarray(eps, dtype=np.float64)
    _check_finite(xa)
    if np.any((ea < 0) | (ea > 1)) or not np.all(np.isfinite(ea)):
        raise QuantizationDomainError("threshold eps must lie in [0, 1]")
    if grid.kind is GridKind.IDENTITY:
        return xa.copy()[()] if xa.ndim else float(xa)
    if grid.kind is GridKind.UNIFORM:
        out = _round_on_step(xa, grid.step, ea)
    else:
        out = _round_on_step(xa, grid.local_step(xa), ea)
        out = np.clip(out, -grid.max_finite, grid.max_finite)
    return out if out.ndim else float(out)


def rtn(x: ArrayLike, grid: QuantGrid) -> ArrayLike:
    """Round to nearest, ties toward +inf."""
    return threshold_quantize(x, grid, 0.5)


def sr(x: ArrayLike, grid: QuantGrid, stream: "ThresholdStream") -> ArrayLike:
    """Stochastic rounding with one fresh threshold per element, drawn row-major."""
    xa = np.asarray(x, dtype=np.float64)
    eps = stream.draw(xa.size).reshape(xa.shape)
    return threshold_quantize(xa, grid, eps)


def sr_matrix(m: np.ndarray, grid: QuantGrid, stream: "ThresholdStream") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        r, c = np.argwhere(~np.isfinite(m))[0]
        raise QuantizationDomainError(f"non-finite entry at (row={r}, col={c})")
    return sr(m, grid, stream)


def sr_error_variance(x: ArrayLike, grid: QuantGrid) -> ArrayLike:
    """Variance ``p(1-p) Delta**2`` of the two-point SR distribution of ``x``."""
    xa = np.asarray(x, dtype=np.float64)
    if grid.kind is GridKind.IDENTITY:
        out = np.zeros_like(xa)
    else:
        step = grid.local_step(xa)
        r = xa / step
        p = r - np.floor(r)
        out = p * (1.0 - p) * step * step
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# threshold streams

LFSR6_PERIOD = 63


def lfsr6_next(state: int) -> tuple[float, int]:
    """One step of the 6-bit Fibonacci LFSR with polynomial x^6 + x^5 + 1.

    Returns the threshold ``state / 64`` for the *input* state and the
    successor state.
    """
    if not isinstance(state, (int, np.integer)) or not 1 <= state <= 63:
        raise QuantizationDomainError(f"LFSR6 state must be in [1, 63], got {state!r}")
    state = int(state)
    bit = (state ^ (state >> 1)) & 1  # taps 6 and 5
    return state / 64.0, (state >> 1) | (bit << 5)


def _lfsr6_cycle() -> tuple[np.ndarray, np.ndarray]:
    order = np.empty(LFSR6_PERIOD, dtype=np.int64)
    pos = np.full(64, -1, dtype=np.int64)
    s = 1
    for k in range(LFSR6_PERIOD):
        order[k] = s
        pos[s] = k
        _, s = lfsr6_next(s)
    return order, pos


_LFSR_ORDER, _LFSR_POS = _lfsr6_cycle()


class Rounding(enum.Enum):
    IDENTITY = "id"
    RTN = "rtn"
    SR = "sr"


@dataclass
class ThresholdStream:
    """Single-owner source of SR thresholds in ``[0, 1)``.

    ``kind`` is ``"prng"`` (numpy PCG64) or ``"lfsr6"``; ``draws`` counts
    thresholds handed out so far.
    """

    kind: str
    seed: int
    draws: int = 0
    _rng: np.random.Generator | None = field(default=None, repr=False)
    _pos: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind == "prng":
            if self._rng is None:
                self._rng = np.random.default_rng(self.seed)
        elif self.kind == "lfsr6":
            if not 1 <= self.seed <= 63:
                raise QuantizationDomainError(f"LFSR6 state must be in [1, 63], got {self.seed}")
            self._pos = int(_LFSR_POS[self.seed])
        else:
            raise ValueError(f"unknown threshold source {self.kind!r}")

    @classmethod
    def prng(cls, seed: int) -> "ThresholdStream":
        return cls("prng", int(seed))

    @classmethod
    def lfsr6(cls, state: int) -> "ThresholdStream":
        return cls("lfsr6", int(state))

    @classmethod
    def from_spec(cls, text: str) -> "ThresholdStream":
        """``"prng:<seed>"`` or ``"lfsr6:<state>"``."""
        kind, _, arg = text.strip().partition(":")
        if kind not in ("prng", "lfsr6") or not arg:
            raise ValueError(f"unrecognised threshold source {text!r}")
        return cls(kind, int(arg))

    @classmethod
    def derive(cls, kind: str, seed: int, *keys: int) -> "ThresholdStream":
        """Independent stream keyed by ``(seed, *keys)``, e.g. (seed, step, tag)."""
        ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])
        if kind == "lfsr6":
            return cls("lfsr6", 1 + int(ss.generate_state(1)[0]) % LFSR6_PERIOD)
        return cls("prng", int(seed), _rng=np.random.Generator(np.random.PCG64(ss)))

    def draw(self, n: int) -> np.ndarray:
        if self.kind == "prng":
            out = self._rng.random(n)
        else:
            idx = (self._pos + np.arange(n)) % LFSR6_PERIOD
            out = _LFSR_ORDER[idx] / 64.0
            self._pos = (self._pos + n) % LFSR6_PERIOD
        self.draws += n
        return out


@dataclass(frozen=True)
class RoundingPolicy:
    """Rounding mode plus, for standalone SR use, a threshold source spec."""

    mode: Rounding
    source: str | None = None

    @classmethod
    def parse(cls, text: str) -> "RoundingPolicy":
        return cls(Rounding(text.strip().lower()))

    def stream(self) -> ThresholdStream:
        if self.source is None:
            raise ValueError("policy has no threshold source")
        return ThresholdStream.from_spec(self.source)


def quantize(x: np.ndarray, grid: QuantGrid, mode: Rounding, stream: ThresholdStream | None = None) -> np.ndarray:
    """Apply one quantization knob to an array.

    SR draws ``x.size`` thresholds from ``stream`` in row-major order; RTN
    and identity draw nothing.
    """
    if mode is Rounding.IDENTITY or grid.is_identity:
        x = np.asarray(x, dtype=np.float64)
        _check_finite(x)
        return x
    if mode is Rounding.RTN:
        return np.asarray(rtn(x, grid))
    if stream is None:
        raise ValueError("stochastic rounding needs a threshold stream")
    return np.asarray(sr(x, grid, stream))
