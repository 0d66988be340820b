"""Command line entry point.

Exit codes: 0 when every cell and gate passes, 1 when any gate or cell
fails, 2 for usage and spec errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import SpecError, load_spec
from .data import CsvFormatError
from .quant import QuantizationDomainError, Rounding, ThresholdStream, parse_grid, quantize

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _cmd_run(args) -> int:
    from .experiment import run_experiment

    spec = load_spec(args.spec)
    res = run_experiment(spec, args.out, args.workers)
    bad = [r for r in res.results if r.status != "ok"]
    for r in bad:
        print(f"{r.run_id}: {r.status} {r.error}".rstrip(), file=sys.stderr)
    print(f"{len(res.results)} cells, {len(bad)} failed -> {res.out_dir}")
    if res.lemmas is not None:
        failed = sum(r["passed"] == "false" for r in res.lemmas)
        print(f"{len(res.lemmas)} lemma probes, {failed} failed")
    return res.exit_code


def _cmd_verify(args) -> int:
    from .experiment import LEMMA_COLUMNS, _write_csv, lemma_probes

    spec = load_spec(args.spec)
    rows = lemma_probes(spec)
    out = Path(args.out if args.out is not None else spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "lemmas.csv", LEMMA_COLUMNS, rows)
    for r in rows:
        status = {"true": "PASS", "false": "FAIL", "": "INFO"}[r["passed"]]
        print(f"{status} {r['probe']} [{r['setting']}] value={r['value']:.6g} stderr={r['stderr']:.3g} {r['target']}")
    return EXIT_FAIL if any(r["passed"] == "false" for r in rows) else EXIT_OK


def _cmd_quantize(args) -> int:
    grid = parse_grid(args.grid)
    mode = Rounding(args.mode)
    stream = None
    if mode is Rounding.SR:
        stream = ThresholdStream.prng(args.seed) if args.source == "prng" else ThresholdStream.lfsr6(args.seed)
    for _ in range(args.count):
        print(repr(float(quantize(args.x, grid, mode, stream))))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srlab", description="Stochastic-rounding SGD laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a sweep and write runs.csv / summary.csv")
    r.add_argument("spec")
    r.add_argument("--out", help="output directory (default: output_dir from the spec file)")
    r.add_argument("--workers", type=int, help="worker processes (default: $SRLAB_WORKERS or the spec file)")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify-lemmas", help="run the statistical probes and write lemmas.csv")
    v.add_argument("spec")
    v.add_argument("--out")
    v.set_defaults(func=_cmd_verify)

    q = sub.add_parser("quantize", help="quantize one scalar")
    q.add_argument("x", type=float)
    q.add_argument("--grid", required=True, help="id, u:<step>, or an ExMy format such as E4M2")
    q.add_argument("--mode", choices=["rtn", "sr"], default="rtn")
    q.add_argument("--seed", type=int, default=0, help="PRNG seed, or LFSR state 1..63")
    q.add_argument("--source", choices=["prng", "lfsr6"], default="prng")
    q.add_argument("--count", type=int, default=1, help="number of draws to print")
    q.set_defaults(func=_cmd_quantize)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (SpecError, CsvFormatError, QuantizationDomainError, FileNotFoundError, ValueError) as exc:
        print(f"srlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
