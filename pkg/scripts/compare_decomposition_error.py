"""Compare quantize-only reconstruction against the low-rank-plus-quantized
split across ranks and bit widths.

Example:
    python3 scripts/compare_decomposition_error.py --rows 256 --cols 256 \
        --ranks 16,32,64 --configs 2,2,fp16,16,16 3,8,fp32,64,256 --seeds 3
"""

import argparse

import numpy as np

from lqdec import QuantConfig, dequantize, gen_matrix, lq_decompose, quantize_nf
from lqdec.quant import storage_bits_per_param


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=256)
    parser.add_argument("--cols", type=int, default=256)
    parser.add_argument("--kind", default="gaussian",
                        choices=("gaussian", "decaying-spectrum", "low-rank"))
    parser.add_argument("--rho", type=float, default=0.9,
                        help="spectrum decay for decaying-spectrum matrices")
    parser.add_argument("--ranks", default="16,32,64",
                        help="comma list of adapter ranks")
    parser.add_argument("--configs", nargs="+",
                        default=["2,2,fp16,16,16", "3,8,fp32,64,256",
                                 "4,8,fp32,64,256"],
                        help="quant configs as b0,b1,b2,B0,B1")
    parser.add_argument("--seeds", type=int, default=3,
                        help="number of matrices to average over")
    parser.add_argument("--method", choices=("exact", "randomized"),
                        default="randomized")
    return parser.parse_args()


def main():
    args = parse_args()
    ranks = [int(r) for r in args.ranks.split(",")]
    configs = [QuantConfig.parse(c) for c in args.configs]
    matrices = [gen_matrix(args.kind, args.rows, args.cols, seed=s, rho=args.rho)
                for s in range(args.seeds)]

    print(f"{args.kind} {args.rows}x{args.cols}, mean over {args.seeds} seeds")
    header = f"{'config':>18} {'bits/param':>10} {'rank':>5} " \
             f"{'error':>12} {'vs quant-only':>13}"
    print(header)
    print("-" * len(header))

    for cfg in configs:
        base = np.mean([
            np.linalg.norm(w - dequantize(quantize_nf(w, cfg)))
            for w in matrices
        ])
        print(f"{cfg.label():>18} {float(storage_bits_per_param(cfg)):>10.4f} "
              f"{'-':>5} {base:>12.4f} {'1.000':>13}")
        for rank in ranks:
            err = np.mean([
                lq_decompose(w, None, cfg, rank, seed=s, method=args.method).error
                for s, w in enumerate(matrices)
            ])
            print(f"{cfg.label():>18} {float(storage_bits_per_param(cfg)):>10.4f} "
                  f"{rank:>5} {err:>12.4f} {err / base:>13.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
