"""Iterative split of a matrix into a quantized part plus low-rank factors.

Alternates two projections: factorize the residual W - dequantize(Q),
then re-quantize W - L1 L2.  Neither step is a joint optimum, so the
objective can start climbing; iteration stops on the first increase and
the best iterate seen is returned, not the last one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .factorize import LowRankFactors, factorize, weighted_error
from .quant import QuantConfig, QuantizedMatrix, dequantize, quantize_nf

REASON_INCREASED = "error-increased"
REASON_MAX_ITERS = "max-iters"
REASON_ZERO = "zero-error"

# Relative error floor below which the split is treated as exact.
ZERO_ERROR_RTOL = 1e-7


def derive_seed(seed: int, *parts: int) -> int:
    """Stable per-task seed from a base seed and integer coordinates."""
    ss = np.random.SeedSequence([int(seed), *[int(p) for p in parts]])
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class LQResult:
    """Best iterate of the alternating decomposition."""

    q: QuantizedMatrix
    factors: LowRankFactors
    error_trace: list
    chosen_iteration: int
    converged_reason: str

    @property
    def error(self) -> float:
        return self.error_trace[self.chosen_iteration]


def lq_decompose(w, f=None, cfg: QuantConfig = None, rank: int = 1,
                 max_iters: int = 50, seed: int = 0,
                 method: str = "randomized", init: str = "zero") -> LQResult:
    """Decompose ``w ~ dequantize(Q) + L1 @ L2`` under one config.

    Errors are measured on the dequantized container and the factors at
    serialization precision, in the sqrt(f)-weighted Frobenius norm when
    ``f`` is given, accumulated in float64.  ``init`` selects the initial
    quantized part: "zero" starts the factors on plain W, "quantize"
    starts them on the quantization residual.
    """
    if cfg is None:
        raise ValueError("a quantization config is required")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    if init not in ("zero", "quantize"):
        raise ValueError(f"init must be 'zero' or 'quantize', got {init!r}")
    w32 = np.ascontiguousarray(w, dtype=np.float32)
    if w32.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if not np.all(np.isfinite(w32)):
        raise ValueError("matrix entries must be finite")
    w64 = w32.astype(np.float64)

    reference = weighted_error(w32, None, None, f)
    q = quantize_nf(w32, cfg) if init == "quantize" else None

    trace: list[float] = []
    best = None
    prev = np.inf
    reason = REASON_MAX_ITERS
    for t in range(1, max_iters + 1):
        resid = w64 if q is None else w64 - dequantize(q).astype(np.float64)
        fac = factorize(resid, f, rank, method=method, seed=derive_seed(seed, t))
        fac = LowRankFactors(
            l1=np.ascontiguousarray(fac.l1, dtype=np.float32),
            l2=np.ascontiguousarray(fac.l2, dtype=np.float32),
        )
        q = quantize_nf((w64 - fac.product()).astype(np.float32), cfg)
        eps = weighted_error(w32, dequantize(q), fac, f)
        trace.append(eps)
        if best is None or eps < best[0]:
            best = (eps, q, fac)
        if eps <= ZERO_ERROR_RTOL * reference:
            reason = REASON_ZERO
            break
        if eps > prev:
            reason = REASON_INCREASED
            break
        prev = eps

    chosen = int(np.argmin(trace))
    return LQResult(
        q=best[1],
        factors=best[2],
        error_trace=trace,
        chosen_iteration=chosen,
        converged_reason=reason,
    )
