"""Sweep execution and CSV output.

CSV files are UTF-8 with ``\\n`` line endings; floats are written with
``repr`` (shortest round-trip form), so output never depends on locale.

runs.csv     run_id, step, loss, grad_norm_sq, mode, format, batch_size, lr, seed
summary.csv  run_id, mode, format, batch_size, lr, seed, status, final_loss,
             tail_mean_grad_norm_sq, tail_stderr, tail_points
lemmas.csv   probe, setting, value, stderr, target, passed
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import statlab
from .config import Cell, ExperimentSpec, cell_seed
from .data import Dataset, generate_dataset
from .net import LayerQuantConfig, MlpModel, grad_approx
from .quant import Rounding, parse_grid
from .trainer import RunRecord, TrainConfig, TrainMode, train

RUNS_COLUMNS = ["run_id", "step", "loss", "grad_norm_sq", "mode", "format", "batch_size", "lr", "seed"]
SUMMARY_COLUMNS = [
    "run_id", "mode", "format", "batch_size", "lr", "seed", "status",
    "final_loss", "tail_mean_grad_norm_sq", "tail_stderr", "tail_points",
]
LEMMA_COLUMNS = ["probe", "setting", "value", "stderr", "target", "passed"]

WORKERS_ENV = "SRLAB_WORKERS"


def fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class CellResult:
    cell: Cell
    run_id: str
    records: list[RunRecord]
    status: str
    error: str = ""

    def summary(self, tail_fraction: float) -> dict:
        c = self.cell
        row = {"run_id": self.run_id, "mode": c.mode, "format": c.format, "batch_size": c.batch_size,
               "lr": c.lr, "seed": c.seed, "status": self.status}
        if self.status == "ok":
            m, se, k = statlab.tail_stats([r.grad_norm_sq for r in self.records], tail_fraction)
            row.update(final_loss=self.records[-1].train_loss, tail_mean_grad_norm_sq=m, tail_stderr=se, tail_points=k)
        else:
            row.update(final_loss=math.nan, tail_mean_grad_norm_sq=math.nan, tail_stderr=math.nan, tail_points=0)
        return row


def build_model(spec: ExperimentSpec, data: Dataset, seed: int) -> MlpModel:
    widths = [data.x.shape[1], *spec.hidden, data.y.shape[1]]
    return MlpModel.init(widths, seed, spec.activation, spec.loss, spec.init_scale)


def train_config(spec: ExperimentSpec, cell: Cell) -> TrainConfig:
    return TrainConfig(
        mode=TrainMode.parse(cell.mode, spec.weight_rounding()),
        grid=parse_grid(cell.format),
        batch_size=cell.batch_size,
        lr=cell.lr,
        steps=spec.steps,
        seed=cell_seed(cell.seed, cell),
        eval_every=spec.eval_every,
        # rtn quantizes all five knobs on the cell format; weight_format only overrides the QAT modes
        weight_grid=None if cell.mode == "rtn" else spec.weight_grid(),
        threshold_source=spec.threshold_source,
        split_weight_thresholds=spec.split_weight_thresholds,
    )


def run_cell(spec: ExperimentSpec, cell: Cell, data: Dataset | None = None) -> CellResult:
    """Run one sweep cell; depends only on ``spec`` and the cell coordinates."""
    run_id = f"{spec.name}-{cell.index:04d}"
    try:
        if data is None:
            data = generate_dataset(spec.task, spec.data_seed)
        model = build_model(spec, data, cell.seed)
        records = train(model, data.x, data.y, train_config(spec, cell))
    except Exception as exc:  # isolate the failing cell, keep the sweep going
        return CellResult(cell, run_id, [], "error", f"{type(exc).__name__}: {exc}")
    status = "ok" if all(r.status == "ok" for r in records) else "diverged"
    return CellResult(cell, run_id, records, status)


def _run_cell_job(args):
    spec, cell = args
    return run_cell(spec, cell)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ExperimentResult:
    exit_code: int
    out_dir: Path
    results: list[CellResult]
    summary: list[dict]
    lemmas: list[dict] | None = None


def run_experiment(spec: ExperimentSpec, out_dir: str | Path | None = None, workers: int | None = None) -> ExperimentResult:
    out = Path(out_dir if out_dir is not None else spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, spec.workers))
    cells = spec.cells()
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_job, [(spec, c) for c in cells]))
    else:
        data = generate_dataset(spec.task, spec.data_seed)
        results = [run_cell(spec, c, data) for c in cells]
    # pool.map preserves submission order, so the merge is in cell order either way

    runs = []
    for res in results:
        c = res.cell
        for r in res.records:
            runs.append({"run_id": res.run_id, "step": r.step, "loss": r.train_loss, "grad_norm_sq": r.grad_norm_sq,
                         "mode": c.mode, "format": c.format, "batch_size": c.batch_size, "lr": c.lr, "seed": c.seed})
    summary = [res.summary(spec.tail_fraction) for res in results]
    _write_csv(out / "runs.csv", RUNS_COLUMNS, runs)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)

    ok = all(r.status == "ok" for r in results)
    lemmas = None
    if spec.lemmas:
        lemmas = lemma_probes(spec)
        _write_csv(out / "lemmas.csv", LEMMA_COLUMNS, lemmas)
        ok = ok and all(r["passed"] != "false" for r in lemmas)
    return ExperimentResult(0 if ok else 1, out, results, summary, lemmas)


def aggregate(summary: list[dict], keys=("mode", "format", "batch_size", "lr")) -> dict[tuple, tuple[float, float, int]]:
    """Mean and across-seed stderr of the tail metric for each group of ``keys``."""
    groups: dict[tuple, list[float]] = {}
    for row in summary:
        if row["status"] != "ok":
            continue
        k = tuple(row[key] for key in keys)
        groups.setdefault(k, []).append(float(row["tail_mean_grad_norm_sq"]))
    out = {}
    for k, v in groups.items():
        a = np.array(v)
        se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
        out[k] = (float(a.mean()), se, a.size)
    return out


# ---------------------------------------------------------------------------
# lemma probes on the spec file's data


def first_layer_factors(model: MlpModel, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """First-layer inputs and per-sample upstream gradients over the whole dataset."""
    acts = []
    a = data.x
    for w in model.weights[:-1]:
        a = a @ w
        if model.activation == "relu":
            a = np.maximum(a, 0.0)
        acts.append(a)
    out = a @ model.weights[-1]
    if model.loss == "mse":
        g = 2.0 * (out - data.y)
    else:
        p = np.exp(out - out.max(axis=1, keepdims=True))
        g = p / p.sum(axis=1, keepdims=True) - data.y
    for i in range(model.n_layers - 1, 0, -1):
        g = g @ model.weights[i].T
        if model.activation == "relu":
            g = g * (acts[i - 1] > 0)
    est, _ = grad_approx(model, data.x, data.y, LayerQuantConfig())
    if not np.allclose(data.x.T @ g / data.x.shape[0], est.grads[0], rtol=1e-9, atol=1e-12):
        raise AssertionError("per-sample upstream gradients disagree with backprop")
    return data.x, g


def _row(probe, setting, value, stderr, target, passed) -> dict:
    return {"probe": probe, "setting": setting, "value": float(value), "stderr": float(stderr),
            "target": target, "passed": "" if passed is None else ("true" if passed else "false")}


def lemma_probes(spec: ExperimentSpec) -> list[dict]:
    """Statistical checks on the spec file's dataset and initial model.

    The decomposition and batch-scaling probes use each of the spec file's
    formats; the bound and precision-scaling probes use uniform grids with
    the step halving per bit. Weight bias is asserted only for one-layer
    least-squares models.
    """
    data = generate_dataset(spec.task, spec.data_seed)
    model = build_model(spec, data, spec.seeds[0])
    a, g = first_layer_factors(model, data)
    j = int(np.argmax(np.mean(g * g, axis=0)))
    trials = spec.lemma_trials
    b0 = spec.batch_sizes[0]
    seed = spec.data_seed
    rows = []

    for f in spec.formats:
        grid = parse_grid(f)
        if grid.is_identity:
            continue
        dec = statlab.mse_decompose(a, g, b0, grid, grid, trials, seed=seed, i=0, j=j)
        rows.append(_row("mse_cross_term", f"{f} b={b0}", dec.cross_term, dec.cross_se, "0", dec.cross_ok()))
        rows.append(_row("mse_residual", f"{f} b={b0}", dec.residual, dec.residual_se, "0", dec.residual_ok()))
        bs = [1, 2, 4, 8, 16, 32]
        tqs = [statlab.mse_decompose(a, g, b, grid, grid, trials, seed=seed + b, i=0, j=j).quant_term for b in bs]
        fit = statlab.fit_scaling(bs, tqs, "inverse_b")
        rows.append(_row("tq_batch_slope", f, fit.slope, fit.residual, "-1 +- 0.15", abs(fit.slope + 1) <= 0.15))

    bits = [0, 1, 2, 3]
    tqs = []
    for bit in bits:
        step = 2.0 ** -bit
        chk = statlab.tq_bound_check(a, g, b0, step, step, trials, seed=seed + bit, i=0, j=j)
        tqs.append(chk.measured)
        rows.append(_row("tq_bound", f"u:{step!r} b={b0}", chk.measured, chk.stderr, f"<= {chk.bound!r}", chk.ok))
    fit = statlab.fit_scaling(bits, tqs, "two_pow_minus_2b")
    rows.append(_row("tq_bits_slope", "u:2^-B", fit.slope, fit.residual, "-2 +- 0.3", abs(fit.slope + 2) <= 0.3))

    wg = spec.weight_grid() or parse_grid(spec.formats[0])
    if not wg.is_identity:
        step = float(np.max(wg.local_step(np.concatenate([w.ravel() for w in model.weights]))))
        certified = model.n_layers == 1 and model.loss == "mse"
        for mode in (Rounding.RTN, Rounding.SR):
            if certified:
                rep = statlab.bias_check(model, data.x, data.y, step, mode, trials=200, seed=seed)
                rows.append(_row(f"weight_bias_{mode.value}", f"step={step!r}", rep.measured_bias, 0.0,
                                 f"<= {rep.bound!r}", rep.ok))
            else:
                # no certified smoothness constant for a multi-layer model: report only
                meas = statlab.weight_bias(model, data.x, data.y, step, mode, trials=200, seed=seed)
                rows.append(_row(f"weight_bias_{mode.value}", f"step={step!r}", meas, 0.0, "", None))
    return rows
