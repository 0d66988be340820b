"""Experiment spec files.

Grammar, one entry per line::

    # comment (also allowed after a value)
    key = value
    key = [value, value, ...]

Values are bare words or numbers; lists use square brackets and commas.
Every key below is optional except ``name``; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path

from .data import ExternalCsv, SyntheticRegression, Task, TwoBlobClassification
from .quant import QuantGrid, Rounding, parse_grid
from .trainer import ModeTag


class SpecError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Cell:
    index: int
    mode: str
    format: str
    batch_size: int
    lr: float
    seed: int

    @property
    def coords(self) -> tuple:
        return (self.mode, self.format, self.batch_size, self.lr, self.seed)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    task: Task = field(default_factory=SyntheticRegression)
    hidden: tuple[int, ...] = (16,)
    activation: str = "relu"
    loss: str = "mse"
    init_scale: float = 1.0
    data_seed: int = 0
    modes: tuple[str, ...] = ("srqat",)
    weight_policy: str = "sr"
    formats: tuple[str, ...] = ("fp:E4M2",)
    weight_format: str | None = None
    batch_sizes: tuple[int, ...] = (32,)
    learning_rates: tuple[float, ...] = (0.01,)
    seeds: tuple[int, ...] = (0,)
    steps: int = 1000
    eval_every: int = 50
    threshold_source: str = "prng"
    split_weight_thresholds: bool = False
    tail_fraction: float = 0.25
    lemmas: bool = False
    lemma_trials: int = 20000
    output_dir: str = "out"
    workers: int = 1

    def cells(self) -> list[Cell]:
        prod = itertools.product(self.modes, self.formats, self.batch_sizes, self.learning_rates, self.seeds)
        return [Cell(k, *c) for k, c in enumerate(prod)]

    def weight_grid(self) -> QuantGrid | None:
        return None if self.weight_format is None else parse_grid(self.weight_format)

    def weight_rounding(self) -> Rounding:
        return Rounding(self.weight_policy)


def cell_seed(spec_seed: int, cell: Cell) -> int:
    """Stable per-cell seed: first 8 bytes of sha256("seed|mode|format|b|lr"), top bit cleared."""
    text = f"{spec_seed}|{cell.mode}|{cell.format}|{cell.batch_size}|{cell.lr!r}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") & 0x7FFFFFFFFFFFFFFF


_TASK_KEYS = {"task", "n", "d_in", "d_out", "noise_sd", "separation", "csv_path", "n_targets"}


def _scalar(raw: str, kind, key: str, line: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise SpecError(f"bad value {raw!r} for {key!r}", line, key) from None


_TYPES: dict[str, tuple[type, bool]] = {
    # key: (element type, is list)
    "name": (str, False),
    "task": (str, False),
    "n": (int, False),
    "d_in": (int, False),
    "d_out": (int, False),
    "noise_sd": (float, False),
    "separation": (float, False),
    "csv_path": (str, False),
    "n_targets": (int, False),
    "hidden": (int, True),
    "activation": (str, False),
    "loss": (str, False),
    "init_scale": (float, False),
    "data_seed": (int, False),
    "modes": (str, True),
    "weight_policy": (str, False),
    "formats": (str, True),
    "weight_format": (str, False),
    "batch_sizes": (int, True),
    "learning_rates": (float, True),
    "seeds": (int, True),
    "steps": (int, False),
    "eval_every": (int, False),
    "threshold_source": (str, False),
    "split_weight_thresholds": (bool, False),
    "tail_fraction": (float, False),
    "lemmas": (bool, False),
    "lemma_trials": (int, False),
    "output_dir": (str, False),
    "workers": (int, False),
}


def parse_spec(text: str, base_dir: str | Path | None = None) -> ExperimentSpec:
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not eq or not key:
            raise SpecError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key not in _TYPES:
            raise SpecError(f"unknown key {key!r}", lineno, key)
        if key in values:
            raise SpecError(f"duplicate key {key!r}", lineno, key)
        kind, is_list = _TYPES[key]
        if val.startswith("["):
            if not val.endswith("]"):
                raise SpecError(f"unterminated list for {key!r}", lineno, key)
            items = [v.strip() for v in val[1:-1].split(",") if v.strip()]
            if not is_list:
                raise SpecError(f"{key!r} takes a single value, not a list", lineno, key)
            values[key] = tuple(_scalar(v, kind, key, lineno) for v in items)
        elif not val:
            raise SpecError(f"missing value for {key!r}", lineno, key)
        else:
            v = _scalar(val, kind, key, lineno)
            values[key] = (v,) if is_list else v
        lines[key] = lineno

    if "name" not in values:
        raise SpecError("missing required key 'name'", key="name")

    task_kind = values.pop("task", "synthetic_regression")
    task_args = {k: values.pop(k) for k in list(values) if k in _TASK_KEYS}
    try:
        if task_kind == "synthetic_regression":
            task = SyntheticRegression(**{k: v for k, v in task_args.items() if k in ("n", "d_in", "d_out", "noise_sd")})
        elif task_kind == "two_blob":
            task = TwoBlobClassification(**{k: v for k, v in task_args.items() if k in ("n", "d_in", "separation")})
        elif task_kind == "csv":
            if "csv_path" not in task_args:
                raise SpecError("task 'csv' needs csv_path", key="csv_path")
            p = Path(task_args["csv_path"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            task = ExternalCsv(str(p), task_args.get("n_targets", 1))
        else:
            raise SpecError(f"unknown task {task_kind!r}", lines.get("task"), "task")
    except TypeError as exc:
        raise SpecError(str(exc), key="task") from None

    spec = ExperimentSpec(task=task, **values)  # type: ignore[arg-type]
    _validate(spec, lines)
    return spec


def _validate(spec: ExperimentSpec, lines: dict[str, int]) -> None:
    def bad(key, msg):
        raise SpecError(f"{key}: {msg}", lines.get(key), key)

    t = spec.task
    if not isinstance(t, ExternalCsv):
        if t.n < 1:
            bad("n", "must be >= 1")
        if t.d_in < 1:
            bad("d_in", "must be >= 1")
    if isinstance(t, SyntheticRegression):
        if t.d_out < 1:
            bad("d_out", "must be >= 1")
        if t.noise_sd < 0:
            bad("noise_sd", "must be >= 0")
    if any(h < 1 for h in spec.hidden):
        bad("hidden", "widths must be >= 1")
    if spec.activation not in ("relu", "none"):
        bad("activation", "must be relu or none")
    if spec.loss not in ("mse", "xent"):
        bad("loss", "must be mse or xent")
    for m in spec.modes:
        try:
            ModeTag(m)
        except ValueError:
            bad("modes", f"unknown mode {m!r} (fp, rtn, wqat, srqat)")
    if spec.weight_policy not in ("rtn", "sr"):
        bad("weight_policy", "must be rtn or sr")
    for f in spec.formats + ((spec.weight_format,) if spec.weight_format else ()):
        try:
            parse_grid(f)
        except ValueError as exc:
            bad("formats" if f in spec.formats else "weight_format", str(exc))
    for key, seq in (("modes", spec.modes), ("formats", spec.formats), ("batch_sizes", spec.batch_sizes),
                     ("learning_rates", spec.learning_rates), ("seeds", spec.seeds)):
        if not seq:
            bad(key, "list is empty")
    if any(b < 1 for b in spec.batch_sizes):
        bad("batch_sizes", "must be >= 1")
    if any(not lr > 0 for lr in spec.learning_rates):
        bad("learning_rates", "must be > 0")
    if any(s < 0 for s in spec.seeds):
        bad("seeds", "must be >= 0")
    if spec.steps < 1:
        bad("steps", "must be >= 1")
    if spec.eval_every < 1:
        bad("eval_every", "must be >= 1")
    if spec.threshold_source not in ("prng", "lfsr6"):
        bad("threshold_source", "must be prng or lfsr6")
    if not 0 < spec.tail_fraction <= 1:
        bad("tail_fraction", "must be in (0, 1]")
    if spec.lemma_trials < 100:
        bad("lemma_trials", "must be >= 100")
    if spec.workers < 1:
        bad("workers", "must be >= 1")


def load_spec(path: str | Path) -> ExperimentSpec:
    p = Path(path)
    return parse_spec(p.read_text(encoding="utf-8"), base_dir=p.parent)

