"""Command-line front end.

Every command that writes files also writes a ``*.manifest.json`` next to
its primary output recording the command, parameters, inputs, outputs,
and elapsed time.  Sweeps flush their table after each completed row and
resume from a partial table when rerun with identical parameters.

Exit codes: 0 success, 1 usage error, 2 malformed file, 3 infeasible
budget, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .alloc import (
    ConfigGrid,
    LORA_FORMATS,
    SweepTable,
    brute_force_mckp,
    default_grid,
    lq_lora_init,
    solve_mckp,
    storage_report,
    sweep,
)
from .decompose import lq_decompose
from .errors import FormatError, InfeasibleBudgetError
from .quant import (
    QuantConfig,
    dequantize,
    exact_container_bytes,
    matmul_dequant,
    quantize_nf,
    read_quantized,
    storage_bits_per_param,
    write_quantized,
)
from .tensor_io import (
    FISHER_KINDS,
    MATRIX_KINDS,
    PRESET_NAMES,
    gen_fisher,
    gen_matrix,
    model_preset,
    read_fisher,
    read_tensor,
    write_tensor,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems via exit code 1."""

    def error(self, message):
        raise UsageError(message)


def _workers_default(value):
    if value is not None:
        return value
    return int(os.environ.get("LQDEC_WORKERS", "1"))


def _atomic_write_json(path: Path, payload):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _manifest_path(primary: Path) -> Path:
    return primary.with_name(primary.stem + ".manifest.json")


def _write_manifest(primary: Path, command: str, params: dict, inputs, outputs,
                    elapsed: float, extra: dict = None, manifest: Path = None):
    payload = {
        "command": command,
        "version": __version__,
        "params": params,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "elapsed_seconds": elapsed,
    }
    if extra:
        payload.update(extra)
    _atomic_write_json(manifest or _manifest_path(primary), payload)


def _load_grid(path) -> ConfigGrid:
    if path is None:
        return default_grid()
    with open(path) as fh:
        payload = json.load(fh)
    rows = payload["configs"] if isinstance(payload, dict) else payload
    return ConfigGrid(configs=tuple(QuantConfig(b0, b1, b2, bs0, bs1)
                                    for b0, b1, b2, bs0, bs1 in rows))


def _load_fishers(paths, count):
    if not paths:
        return None
    if len(paths) != count:
        raise UsageError(f"expected {count} fisher files, got {len(paths)}")
    return [read_fisher(p) for p in paths]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_matrix(args) -> int:
    start = time.perf_counter()
    cfg = QuantConfig.parse(args.config) if args.config else None
    m = gen_matrix(args.kind, args.rows, args.cols, seed=args.seed,
                   rank=args.rank, rho=args.rho, config=cfg)
    out = Path(args.output)
    write_tensor(out, m)
    _write_manifest(out, "gen matrix", {
        "kind": args.kind, "rows": args.rows, "cols": args.cols,
        "seed": args.seed, "rank": args.rank, "rho": args.rho,
        "config": args.config,
    }, [], [out], time.perf_counter() - start)
    print(f"wrote {out} ({args.rows}x{args.cols} {args.kind})")
    return 0


def cmd_gen_fisher(args) -> int:
    start = time.perf_counter()
    f = gen_fisher(args.kind, args.rows, args.cols, seed=args.seed)
    out = Path(args.output)
    write_tensor(out, f)
    _write_manifest(out, "gen fisher", {
        "kind": args.kind, "rows": args.rows, "cols": args.cols, "seed": args.seed,
    }, [], [out], time.perf_counter() - start)
    print(f"wrote {out} ({args.rows}x{args.cols} fisher {args.kind})")
    return 0


def cmd_quantize(args) -> int:
    start = time.perf_counter()
    cfg = QuantConfig.parse(args.config)
    m = read_tensor(args.input)
    q = quantize_nf(m, cfg)
    out = Path(args.output)
    write_quantized(out, q)
    nbytes = exact_container_bytes(q.rows, q.cols, cfg)
    bits = storage_bits_per_param(cfg)
    _write_manifest(out, "quantize", {"config": cfg.label()}, [args.input], [out],
                    time.perf_counter() - start,
                    {"container_bytes": nbytes, "bits_per_param": float(bits)})
    print(f"wrote {out} ({nbytes} bytes, {float(bits):.6f} bits/param)")
    return 0


def cmd_dequantize(args) -> int:
    start = time.perf_counter()
    q = read_quantized(args.input)
    m = dequantize(q)
    out = Path(args.output)
    write_tensor(out, m)
    _write_manifest(out, "dequantize", {"config": q.config.label()},
                    [args.input], [out], time.perf_counter() - start)
    print(f"wrote {out} ({q.rows}x{q.cols})")
    return 0


def cmd_decompose(args) -> int:
    start = time.perf_counter()
    cfg = QuantConfig.parse(args.config)
    w = read_tensor(args.input)
    fisher = read_fisher(args.fisher) if args.fisher else None
    res = lq_decompose(w, fisher, cfg, args.rank, max_iters=args.max_iters,
                       seed=args.seed, method=args.method, init=args.init)
    prefix = Path(args.out_prefix)
    q_path = prefix.with_name(prefix.name + ".lqq")
    l1_path = prefix.with_name(prefix.name + ".l1.lqt")
    l2_path = prefix.with_name(prefix.name + ".l2.lqt")
    write_quantized(q_path, res.q)
    write_tensor(l1_path, res.factors.l1)
    write_tensor(l2_path, res.factors.l2)
    inputs = [args.input] + ([args.fisher] if args.fisher else [])
    _write_manifest(q_path, "decompose", {
        "config": cfg.label(), "rank": args.rank, "max_iters": args.max_iters,
        "seed": args.seed, "method": args.method, "init": args.init,
        "fisher": args.fisher,
    }, inputs, [q_path, l1_path, l2_path], time.perf_counter() - start, {
        "error": res.error,
        "error_trace": list(res.error_trace),
        "chosen_iteration": res.chosen_iteration,
        "converged_reason": res.converged_reason,
    })
    print(f"error={res.error:.6e} iterations={len(res.error_trace)} "
          f"chosen={res.chosen_iteration} reason={res.converged_reason}")
    return 0


def _sweep_params(args, inputs, grid: ConfigGrid) -> dict:
    return {
        "inputs": [str(p) for p in inputs],
        "fishers": [str(p) for p in (args.fisher or [])],
        "grid": [list(c.as_tuple()) for c in grid.configs],
        "rank": args.rank,
        "seed": args.seed,
        "method": args.method,
        "max_iters": args.max_iters,
    }


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    grid = _load_grid(args.grid)
    matrices = [read_tensor(p) for p in args.inputs]
    fishers = _load_fishers(args.fisher, len(matrices))
    out = Path(args.output)
    params = _sweep_params(args, args.inputs, grid)

    errors_init = None
    manifest = _manifest_path(out)
    if out.exists() and manifest.exists() and not args.fresh:
        with open(manifest) as fh:
            previous = json.load(fh)
        if previous.get("params") == params:
            with open(out) as fh:
                errors_init = SweepTable.from_json(json.load(fh)).errors
            done = int(np.sum(~np.isnan(errors_init)))
            print(f"resuming: {done}/{errors_init.size} cells already swept")

    # manifest goes down first so an interrupted run can be resumed
    _write_manifest(out, "sweep", params, args.inputs, [out], 0.0)

    def flush(_, table):
        _atomic_write_json(out, table.to_json())

    table = sweep(matrices, fishers, grid, args.rank, seed=args.seed,
                  workers=_workers_default(args.workers), method=args.method,
                  max_iters=args.max_iters, errors_init=errors_init, on_row=flush)
    _atomic_write_json(out, table.to_json())
    _write_manifest(out, "sweep", params, args.inputs, [out],
                    time.perf_counter() - start)
    print(f"wrote {out} ({len(matrices)} matrices x {len(grid)} configs)")
    return 0


def cmd_allocate(args) -> int:
    start = time.perf_counter()
    with open(args.table) as fh:
        table = SweepTable.from_json(json.load(fh))
    budget_bits = Fraction(args.budget_bits_per_param) * sum(table.sizes)
    solver = brute_force_mckp if args.brute_force else solve_mckp
    if args.brute_force:
        solution = solver(table, budget_bits)
    else:
        solution = solver(table, budget_bits, prune=not args.no_prune)
    out = Path(args.output)
    _atomic_write_json(out, solution.to_json())
    _write_manifest(out, "allocate", {
        "table": str(args.table),
        "budget_bits_per_param": args.budget_bits_per_param,
        "brute_force": bool(args.brute_force),
        "prune": not args.no_prune,
    }, [args.table], [out], time.perf_counter() - start)
    used = float(solution.total_storage_bits / sum(table.sizes))
    print(f"total_error={solution.total_error:.6e} bits_per_param={used:.6f} "
          f"optimal={solution.optimal}")
    return 0


def cmd_init(args) -> int:
    start = time.perf_counter()
    grid = _load_grid(args.grid)
    matrices = [read_tensor(p) for p in args.inputs]
    fishers = _load_fishers(args.fisher, len(matrices))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results, solution, table = lq_lora_init(
        matrices, fishers, grid, args.rank,
        budget_bits_per_param=args.budget_bits_per_param, seed=args.seed,
        workers=_workers_default(args.workers), method=args.method,
        max_iters=args.max_iters,
    )

    outputs = [out_dir / "table.json", out_dir / "solution.json"]
    _atomic_write_json(outputs[0], table.to_json())
    _atomic_write_json(outputs[1], solution.to_json())
    per_matrix = []
    for i, (res, ci) in enumerate(zip(results, solution.assignment)):
        stem = out_dir / f"matrix_{i:03d}"
        q_path = stem.with_name(stem.name + ".lqq")
        l1_path = stem.with_name(stem.name + ".l1.lqt")
        l2_path = stem.with_name(stem.name + ".l2.lqt")
        write_quantized(q_path, res.q)
        write_tensor(l1_path, res.factors.l1)
        write_tensor(l2_path, res.factors.l2)
        outputs += [q_path, l1_path, l2_path]
        cfg = table.configs[ci]
        per_matrix.append({
            "input": str(args.inputs[i]),
            "config": cfg.label(),
            "config_index": ci,
            "error": res.error,
            "converged_reason": res.converged_reason,
        })
        print(f"matrix {i}: config={cfg.label()} error={res.error:.6e}")
    _write_manifest(out_dir, "init", {
        "inputs": [str(p) for p in args.inputs],
        "fishers": [str(p) for p in (args.fisher or [])],
        "grid": [list(c.as_tuple()) for c in grid.configs],
        "rank": args.rank,
        "seed": args.seed,
        "method": args.method,
        "max_iters": args.max_iters,
        "budget_bits_per_param": args.budget_bits_per_param,
    }, args.inputs, outputs, time.perf_counter() - start, {
        "matrices": per_matrix,
        "total_error": solution.total_error,
        "bits_per_param": float(solution.total_storage_bits / sum(table.sizes)),
    }, manifest=out_dir / "manifest.json")
    print(f"total_error={solution.total_error:.6e} optimal={solution.optimal}")
    return 0


def _parse_shapes(text):
    shapes = []
    for part in text.split(","):
        rows, _, cols = part.strip().partition("x")
        shapes.append((int(rows), int(cols)))
    return shapes


def cmd_report(args) -> int:
    if (args.preset is None) == (args.shapes is None):
        raise UsageError("exactly one of --preset and --shapes is required")
    shapes = model_preset(args.preset).shapes() if args.preset else _parse_shapes(args.shapes)
    if "," in args.quant_bits:
        quant_bits = [Fraction(b) for b in args.quant_bits.split(",")]
    else:
        quant_bits = Fraction(args.quant_bits)
    if args.lora_bits is not None:
        lora_bits = Fraction(args.lora_bits)
    else:
        lora_bits = LORA_FORMATS[args.lora_format]
    report = storage_report(shapes, quant_bits, args.lora_rank, lora_bits)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = QuantConfig.parse(args.config)
    w = gen_matrix("decaying-spectrum", args.rows, args.cols, seed=args.seed)
    x = gen_matrix("gaussian", 16, args.rows, seed=args.seed + 1)

    start = time.perf_counter()
    q = quantize_nf(w, cfg)
    t_quant = time.perf_counter() - start

    start = time.perf_counter()
    dq = dequantize(q)
    t_dequant = time.perf_counter() - start

    res = lq_decompose(w, None, cfg, args.rank, seed=args.seed)
    factors = res.factors

    start = time.perf_counter()
    y = matmul_dequant(x, res.q, factors)
    t_matmul = time.perf_counter() - start

    start = time.perf_counter()
    dense = dequantize(res.q) + factors.l1 @ factors.l2
    y_ref = x @ dense
    t_dense = time.perf_counter() - start

    rel = float(np.linalg.norm(y - y_ref) / max(np.linalg.norm(y_ref), 1e-30))
    print(f"bench rows={args.rows} cols={args.cols} config={cfg.label()} rank={args.rank}")
    print(f"quantize_seconds={t_quant:.4f}")
    print(f"dequantize_seconds={t_dequant:.4f}")
    print(f"matmul_dequant_seconds={t_matmul:.4f}")
    print(f"dense_matmul_seconds={t_dense:.4f}")
    print(f"matmul_consistency_rel_err={rel:.3e}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="lqdec",
                     description="low-rank plus quantized matrix decomposition")
    parser.add_argument("--version", action="version", version=f"lqdec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic matrices and fishers")
    gen_sub = gen.add_subparsers(dest="what", required=True)

    gm = gen_sub.add_parser("matrix", help="write a synthetic matrix")
    gm.add_argument("output")
    gm.add_argument("--kind", required=True, choices=sorted(MATRIX_KINDS))
    gm.add_argument("--rows", type=int, required=True)
    gm.add_argument("--cols", type=int, required=True)
    gm.add_argument("--seed", type=int, default=0)
    gm.add_argument("--rank", type=int, default=None, help="rank for low-rank matrices")
    gm.add_argument("--rho", type=float, default=0.9, help="decay rate for decaying-spectrum")
    gm.add_argument("--config", default=None, help="quant config for on-grid matrices")
    gm.set_defaults(func=cmd_gen_matrix)

    gf = gen_sub.add_parser("fisher", help="write a synthetic fisher matrix")
    gf.add_argument("output")
    gf.add_argument("--kind", required=True, choices=sorted(FISHER_KINDS))
    gf.add_argument("--rows", type=int, required=True)
    gf.add_argument("--cols", type=int, required=True)
    gf.add_argument("--seed", type=int, default=0)
    gf.set_defaults(func=cmd_gen_fisher)

    qz = sub.add_parser("quantize", help="blockwise normal-float quantization")
    qz.add_argument("input")
    qz.add_argument("output")
    qz.add_argument("--config", required=True, help="b0,b1,b2,B0,B1 e.g. 4,8,fp32,64,256")
    qz.set_defaults(func=cmd_quantize)

    dq = sub.add_parser("dequantize", help="reconstruct a dense matrix")
    dq.add_argument("input")
    dq.add_argument("output")
    dq.set_defaults(func=cmd_dequantize)

    dc = sub.add_parser("decompose", help="alternating low-rank plus quantized split")
    dc.add_argument("input")
    dc.add_argument("--out-prefix", required=True)
    dc.add_argument("--config", required=True)
    dc.add_argument("--rank", type=int, default=1)
    dc.add_argument("--fisher", default=None)
    dc.add_argument("--max-iters", type=int, default=50)
    dc.add_argument("--seed", type=int, default=0)
    dc.add_argument("--method", choices=("exact", "randomized"), default="randomized")
    dc.add_argument("--init", choices=("zero", "quantize"), default="zero")
    dc.set_defaults(func=cmd_decompose)

    sw = sub.add_parser("sweep", help="decompose every matrix under every config")
    sw.add_argument("inputs", nargs="+")
    sw.add_argument("-o", "--output", required=True)
    sw.add_argument("--fisher", action="append", default=None)
    sw.add_argument("--grid", default=None, help="JSON file of configs (default: built-in grid)")
    sw.add_argument("--rank", type=int, default=1)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--method", choices=("exact", "randomized"), default="randomized")
    sw.add_argument("--max-iters", type=int, default=50)
    sw.add_argument("--workers", type=int, default=None,
                    help="parallel workers (default: LQDEC_WORKERS or 1)")
    sw.add_argument("--fresh", action="store_true", help="ignore any resumable partial table")
    sw.set_defaults(func=cmd_sweep)

    al = sub.add_parser("allocate", help="optimal configs under a bit budget")
    al.add_argument("table")
    al.add_argument("-o", "--output", required=True)
    al.add_argument("--budget-bits-per-param", type=float, required=True)
    al.add_argument("--brute-force", action="store_true")
    al.add_argument("--no-prune", action="store_true")
    al.set_defaults(func=cmd_allocate)

    it = sub.add_parser("init", help="sweep, allocate, and write decompositions")
    it.add_argument("inputs", nargs="+")
    it.add_argument("--out-dir", required=True)
    it.add_argument("--budget-bits-per-param", type=float, required=True)
    it.add_argument("--fisher", action="append", default=None)
    it.add_argument("--grid", default=None)
    it.add_argument("--rank", type=int, default=1)
    it.add_argument("--seed", type=int, default=0)
    it.add_argument("--method", choices=("exact", "randomized"), default="randomized")
    it.add_argument("--max-iters", type=int, default=50)
    it.add_argument("--workers", type=int, default=None)
    it.set_defaults(func=cmd_init)

    rp = sub.add_parser("report", help="effective bits per parameter accounting")
    rp.add_argument("--preset", choices=PRESET_NAMES, default=None)
    rp.add_argument("--shapes", default=None, help="comma list like 4096x4096,4096x11008")
    rp.add_argument("--quant-bits", required=True,
                    help="bits per quantized param, one value or comma list")
    rp.add_argument("--lora-rank", type=int, default=0)
    rp.add_argument("--lora-format", choices=sorted(LORA_FORMATS), default="nf8")
    rp.add_argument("--lora-bits", type=float, default=None,
                    help="override bits per adapter param")
    rp.set_defaults(func=cmd_report)

    bn = sub.add_parser("bench", help="time quantize, dequantize, and matmul")
    bn.add_argument("--rows", type=int, default=512)
    bn.add_argument("--cols", type=int, default=512)
    bn.add_argument("--config", default="4,8,fp32,64,256")
    bn.add_argument("--rank", type=int, default=16)
    bn.add_argument("--seed", type=int, default=0)
    bn.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleBudgetError as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return 3
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
