"""Config sweeps and exact budgeted bit allocation.

Choosing one quantization config per matrix under a total storage budget
is a multiple-choice knapsack: minimize the sum of squared decomposition
errors subject to an exact bit budget.  `solve_mckp` solves it exactly
with per-class dominance pruning and depth-first branch and bound.  The
lower bound at each node is the classic LP relaxation: every remaining
class sits at its cheapest config and budget is spent on convex-hull
upgrade increments in order of error reduction per bit.

Exactness is engineered in three layers: storage is integer arithmetic
(all costs scaled by the common denominator of the grid), objective sums
are exact rationals built from the float error table, and the float LP
bound is only trusted up to a safety margin when pruning.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .decompose import derive_seed, lq_decompose
from .errors import InfeasibleBudgetError
from .quant import QuantConfig, storage_bits_per_param

BRUTE_FORCE_GUARD = 10 ** 7

_DEFAULT_AXES = {
    "b0": (2, 3, 4),
    "b1": (2, 3, 4),
    "b2": ("bf16", "fp16", "fp32"),
    "B0": (16, 32, 64),
    "B1": (16, 64, 256),
}


@dataclass(frozen=True)
class ConfigGrid:
    """Candidate configs offered to the allocator."""

    configs: tuple

    def __post_init__(self):
        if not self.configs:
            raise ValueError("config grid must not be empty")
        if len(set(c.as_tuple() for c in self.configs)) != len(self.configs):
            raise ValueError("config grid contains duplicates")

    def __len__(self) -> int:
        return len(self.configs)

    def __iter__(self):
        return iter(self.configs)


def default_grid() -> ConfigGrid:
    """The standard 243-config search grid (3 choices per knob)."""
    configs = tuple(
        QuantConfig(b0, b1, b2, bs0, bs1)
        for b0 in _DEFAULT_AXES["b0"]
        for b1 in _DEFAULT_AXES["b1"]
        for b2 in _DEFAULT_AXES["b2"]
        for bs0 in _DEFAULT_AXES["B0"]
        for bs1 in _DEFAULT_AXES["B1"]
    )
    return ConfigGrid(configs=configs)


@dataclass
class SweepTable:
    """Per-(matrix, config) squared errors and exact storage costs.

    errors[i, c] is the squared final decomposition error of matrix i
    under config c (NaN marks a cell not swept yet); storage_bits[i][c]
    is the exact rational bit cost sizes[i] * bits_per_param(c).
    """

    sizes: list
    configs: list
    errors: np.ndarray
    storage_bits: list
    fisher_weighted: bool
    rank: int
    seed: int

    def to_json(self) -> dict:
        return {
            "sizes": [int(s) for s in self.sizes],
            "configs": [list(c.as_tuple()) for c in self.configs],
            "errors": [
                [None if math.isnan(e) else float(e) for e in row]
                for row in self.errors
            ],
            "storage_bits": [[float(s) for s in row] for row in self.storage_bits],
            "fisher_weighted": bool(self.fisher_weighted),
            "rank": int(self.rank),
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SweepTable":
        configs = [QuantConfig(b0, b1, b2, bs0, bs1) for b0, b1, b2, bs0, bs1 in payload["configs"]]
        errors = np.array(
            [[np.nan if e is None else float(e) for e in row] for row in payload["errors"]],
            dtype=np.float64,
        ).reshape(len(payload["sizes"]), len(configs))
        # floats serialized from exact binary rationals convert back exactly
        storage = [[Fraction(s) for s in row] for row in payload["storage_bits"]]
        return cls(
            sizes=[int(s) for s in payload["sizes"]],
            configs=configs,
            errors=errors,
            storage_bits=storage,
            fisher_weighted=bool(payload["fisher_weighted"]),
            rank=int(payload["rank"]),
            seed=int(payload["seed"]),
        )


@dataclass
class AllocSolution:
    """One config index per matrix plus exact totals."""

    assignment: list
    total_error: float
    total_storage_bits: Fraction
    budget_bits: Fraction
    optimal: bool

    def to_json(self) -> dict:
        return {
            "assignment": [int(a) for a in self.assignment],
            "total_error": float(self.total_error),
            "total_storage_bits": float(self.total_storage_bits),
            "budget_bits": float(self.budget_bits),
            "optimal": bool(self.optimal),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "AllocSolution":
        return cls(
            assignment=[int(a) for a in payload["assignment"]],
            total_error=float(payload["total_error"]),
            total_storage_bits=Fraction(payload["total_storage_bits"]),
            budget_bits=Fraction(payload["budget_bits"]),
            optimal=bool(payload["optimal"]),
        )


# ---------------------------------------------------------------------------
# sweeping
# ---------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _init_sweep_worker(matrices, fishers, rank, seed, method, max_iters):
    _WORKER_STATE["matrices"] = matrices
    _WORKER_STATE["fishers"] = fishers
    _WORKER_STATE["rank"] = rank
    _WORKER_STATE["seed"] = seed
    _WORKER_STATE["method"] = method
    _WORKER_STATE["max_iters"] = max_iters


def _sweep_cell_worker(task):
    i, c, cfg_tuple = task
    st = _WORKER_STATE
    fisher = None if st["fishers"] is None else st["fishers"][i]
    err = _sweep_cell(
        st["matrices"][i], fisher, QuantConfig(*cfg_tuple),
        st["rank"], st["seed"], i, c, st["method"], st["max_iters"],
    )
    return i, c, err


def _sweep_cell(w, fisher, cfg, rank, seed, i, c, method, max_iters):
    res = lq_decompose(
        w, fisher, cfg, rank,
        max_iters=max_iters, seed=derive_seed(seed, i, c), method=method,
    )
    return res.error ** 2


def sweep(matrices, fishers=None, grid: ConfigGrid = None, rank: int = 1,
          seed: int = 0, workers: int = 1, method: str = "randomized",
          max_iters: int = 50, errors_init=None, on_row=None) -> SweepTable:
    """Decompose every matrix under every grid config.

    Cells are independent jobs keyed by (matrix, config); their seeds
    derive from (seed, i, c) so results do not depend on scheduling or
    worker count.  `errors_init` may carry a partial table (NaN = to do)
    and `on_row` is invoked with (i, table) as each row completes.
    """
    if grid is None:
        raise ValueError("a config grid is required")
    if not matrices:
        raise ValueError("at least one matrix is required")
    if fishers is not None and len(fishers) != len(matrices):
        raise ValueError("fishers list length must match matrices")
    n, c = len(matrices), len(grid.configs)
    if errors_init is not None:
        errors = np.array(errors_init, dtype=np.float64).reshape(n, c).copy()
    else:
        errors = np.full((n, c), np.nan)

    sizes = [int(m.shape[0] * m.shape[1]) for m in matrices]
    storage = [
        [sizes[i] * storage_bits_per_param(cfg) for cfg in grid.configs]
        for i in range(n)
    ]
    table = SweepTable(
        sizes=sizes, configs=list(grid.configs), errors=errors,
        storage_bits=storage, fisher_weighted=fishers is not None,
        rank=rank, seed=seed,
    )

    pending = [(i, ci) for i in range(n) for ci in range(c) if math.isnan(errors[i, ci])]
    remaining_per_row = np.zeros(n, dtype=int)
    for i, _ in pending:
        remaining_per_row[i] += 1

    def finish(i, ci, err):
        errors[i, ci] = err
        remaining_per_row[i] -= 1
        if remaining_per_row[i] == 0 and on_row is not None:
            on_row(i, table)

    if workers <= 1 or len(pending) <= 1:
        for i, ci in pending:
            fisher = None if fishers is None else fishers[i]
            err = _sweep_cell(matrices[i], fisher, grid.configs[ci],
                              rank, seed, i, ci, method, max_iters)
            finish(i, ci, err)
        return table

    tasks = [(i, ci, grid.configs[ci].as_tuple()) for i, ci in pending]
    with ProcessPoolExecutor(
        max_workers=workers,
        initializer=_init_sweep_worker,
        initargs=(matrices, fishers, rank, seed, method, max_iters),
    ) as pool:
        for i, ci, err in pool.map(_sweep_cell_worker, tasks, chunksize=4):
            finish(i, ci, err)
    return table


# ---------------------------------------------------------------------------
# exact multiple-choice knapsack
# ---------------------------------------------------------------------------

def _storage_integers(table: SweepTable, budget_bits):
    """Scale all storage costs to integers plus an integer budget cap.

    Returns (int matrix [N][C], cap) with feasibility total <= cap exactly
    equivalent to the rational comparison against the budget.
    """
    budget = Fraction(budget_bits)
    denom = 1
    for row in table.storage_bits:
        for s in row:
            denom = denom * s.denominator // math.gcd(denom, s.denominator)
    scaled = [[int(s * denom) for s in row] for row in table.storage_bits]
    cap = math.floor(budget * denom)
    return scaled, cap, denom


def _validate_table(table: SweepTable):
    n, c = table.errors.shape
    if n != len(table.sizes) or c != len(table.configs):
        raise ValueError("inconsistent sweep table dimensions")
    if np.isnan(table.errors).any():
        raise ValueError("sweep table has unswept cells")
    if not np.all(np.isfinite(table.errors)):
        raise ValueError("sweep table errors must be finite")
    return n, c


def _exact_objective(errors, assignment) -> Fraction:
    total = Fraction(0)
    for i, ci in enumerate(assignment):
        total += Fraction(float(errors[i, ci]))
    return total


def solve_mckp(table: SweepTable, budget_bits, prune: bool = True) -> AllocSolution:
    """Exact minimum-error assignment under a total bit budget.

    Branch and bound over matrices ordered by error spread, candidates
    ordered best-error-first, pruned against the LP-relaxation bound.
    `prune=False` disables the per-class dominance filter (the search
    still uses LP bounds); it exists to check that pruning is lossless.
    """
    n, c = _validate_table(table)
    budget = Fraction(budget_bits)
    s_int, cap, denom = _storage_integers(table, budget)
    errors = table.errors

    min_storage = sum(min(row) for row in s_int)
    if min_storage > cap:
        raise InfeasibleBudgetError(budget, Fraction(min_storage, denom))

    # Unconstrained fast path: every matrix takes its own best-error
    # config (cheapest storage among exact error ties).
    greedy_best = []
    for i in range(n):
        ci = min(range(c), key=lambda j: (errors[i, j], s_int[i][j]))
        greedy_best.append(ci)
    if sum(s_int[i][greedy_best[i]] for i in range(n)) <= cap:
        return _finish_solution(table, greedy_best, budget)

    # Per-class candidate lists: (storage_int, error, orig_idx), storage
    # ascending.  Dominance keeps only items that strictly improve error.
    classes = []
    for i in range(n):
        items = sorted(
            ((s_int[i][j], float(errors[i, j]), j) for j in range(c)),
            key=lambda t: (t[0], t[1]),
        )
        if prune:
            kept = []
            best_err = math.inf
            for s, e, j in items:
                if e < best_err:
                    kept.append((s, e, j))
                    best_err = e
            items = kept
        classes.append(items)

    # Process classes with the widest error spread first.
    order = sorted(range(n), key=lambda i: classes[i][0][1] - classes[i][-1][1], reverse=True)
    classes = [classes[i] for i in order]
    hulls = [_class_hull(items) for items in classes]
    dfs_candidates = [sorted(items, key=lambda t: (t[1], t[0])) for items in classes]

    # Suffix minima for feasibility and the LP base (cheapest config per
    # remaining class).
    suffix_min_s = [0] * (n + 1)
    suffix_base_e = [0.0] * (n + 1)
    for d in range(n - 1, -1, -1):
        suffix_min_s[d] = suffix_min_s[d + 1] + min(s for s, _, _ in classes[d])
        suffix_base_e[d] = suffix_base_e[d + 1] + hulls[d][0][1]

    increments = _hull_increments(hulls)

    def lp_bound(depth: int, used: int) -> float:
        capacity = cap - used - suffix_min_s[depth]
        if capacity < 0:
            return math.inf
        reduction = 0.0
        for eff, ds, de, cls, _ in increments:
            if cls < depth:
                continue
            if ds <= capacity:
                reduction += de
                capacity -= ds
            else:
                reduction += eff * capacity
                break
        return suffix_base_e[depth] - reduction

    incumbent_assign, incumbent = _greedy_incumbent(classes, hulls, increments, cap, order, n)

    # Depth-first exact search.  Candidate error sums are exact rationals;
    # the float LP bound is only trusted up to a safety margin.
    stack_assign = [0] * n

    def dfs(depth: int, used: int, err_exact: Fraction, err_float: float):
        nonlocal incumbent_assign, incumbent
        if depth == n:
            if err_exact < incumbent:
                incumbent = err_exact
                assignment = [0] * n
                for d, i in enumerate(order):
                    assignment[i] = stack_assign[d]
                incumbent_assign = assignment
            return
        inc_float = float(incumbent)
        margin = 1e-9 * (1.0 + abs(inc_float))
        for s, e, j in dfs_candidates[depth]:
            new_used = used + s
            if new_used + suffix_min_s[depth + 1] > cap:
                continue
            bound = err_float + e + lp_bound(depth + 1, new_used)
            if bound >= inc_float + margin:
                continue
            stack_assign[depth] = j
            dfs(depth + 1, new_used, err_exact + Fraction(e), err_float + e)
            inc_float = float(incumbent)
            margin = 1e-9 * (1.0 + abs(inc_float))

    dfs(0, 0, Fraction(0), 0.0)
    return _finish_solution(table, incumbent_assign, budget)


def _class_hull(items):
    """Lower convex hull of (storage, error) points, storage ascending.

    Membership comparisons are exact: storage values are ints and error
    floats convert to rationals losslessly, so no hull point that could
    support the LP relaxation is ever dropped.
    """
    hull = []
    for s, e, _ in items:
        if hull and s == hull[-1][0]:
            continue  # duplicate storage: the earlier (lower-error) point wins
        if hull and e >= hull[-1][1]:
            continue  # not an improvement, never on the lower hull
        while len(hull) >= 2:
            s0, e0 = hull[-2]
            s1, e1 = hull[-1]
            # pop the middle point when the new increment is at least as
            # efficient as the previous one
            if (Fraction(e1) - Fraction(e)) * (s1 - s0) >= (Fraction(e0) - Fraction(e1)) * (s - s1):
                hull.pop()
            else:
                break
        hull.append((s, e))
    return hull


def _hull_increments(hulls):
    """Upgrade increments of all class hulls, globally sorted.

    Returns (efficiency, delta_storage_int, delta_error, class_idx,
    step_idx) sorted by efficiency descending.  Efficiency is strictly
    decreasing along each exact hull, so a stable tie-break keeps
    within-class sequencing intact.
    """
    increments = []
    for cls_idx, hull in enumerate(hulls):
        for step, ((s0, e0), (s1, e1)) in enumerate(zip(hull, hull[1:])):
            increments.append(((e0 - e1) / (s1 - s0), s1 - s0, e0 - e1, cls_idx, step))
    increments.sort(key=lambda t: (-t[0], t[3], t[4]))
    return increments


def _greedy_incumbent(classes, hulls, increments, cap, order, n):
    """Integral greedy along the LP increments; exact evaluation."""
    used = sum(hull[0][0] for hull in hulls)
    blocked = [False] * n
    taken_steps = [0] * n
    # walk increments most-efficient-first, honoring per-class sequencing
    for _, ds, _, cls, step in increments:
        if blocked[cls] or step != taken_steps[cls]:
            blocked[cls] = True
            continue
        if used + ds <= cap:
            used += ds
            taken_steps[cls] += 1
        else:
            blocked[cls] = True
    # map hull positions back to concrete candidates
    assignment = [0] * n
    exact = Fraction(0)
    for depth, items in enumerate(classes):
        s, e = hulls[depth][taken_steps[depth]]
        j = next(j for si, ei, j in items if si == s and ei == e)
        assignment[order[depth]] = j
        exact += Fraction(e)
    return assignment, exact


def _finish_solution(table: SweepTable, assignment, budget: Fraction) -> AllocSolution:
    total_storage = sum(
        table.storage_bits[i][ci] for i, ci in enumerate(assignment)
    )
    exact_error = _exact_objective(table.errors, assignment)
    return AllocSolution(
        assignment=list(assignment),
        total_error=float(exact_error),
        total_storage_bits=total_storage,
        budget_bits=budget,
        optimal=True,
    )


def brute_force_mckp(table: SweepTable, budget_bits, guard: int = BRUTE_FORCE_GUARD) -> AllocSolution:
    """Exhaustive reference solver for small instances.

    Feasibility uses the same integer-scaled storage as solve_mckp; the
    objective minimum is located with a vectorized float pass, then the
    few candidates within the float-roundoff window are re-evaluated in
    exact arithmetic.
    """
    n, c = _validate_table(table)
    if c ** n > guard:
        raise ValueError(f"instance size {c}**{n} exceeds the brute-force guard {guard}")
    budget = Fraction(budget_bits)
    s_int, cap, denom = _storage_integers(table, budget)

    min_storage = sum(min(row) for row in s_int)
    if min_storage > cap:
        raise InfeasibleBudgetError(budget, Fraction(min_storage, denom))

    if any(abs(v) > (1 << 60) for row in s_int for v in row):
        return _brute_force_python(table, budget, s_int, cap, n, c)
    # any combo fits under a cap this large; clamp so int64 compares are safe
    cap = min(cap, sum(max(row) for row in s_int))

    s_np = np.array(s_int, dtype=np.int64)
    e_np = np.asarray(table.errors, dtype=np.float64)
    total = c ** n
    shape = (c,) * n
    chunk = 1 << 18

    best_float = math.inf
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = np.unravel_index(idx, shape)
        st = np.zeros(idx.size, dtype=np.int64)
        et = np.zeros(idx.size)
        for i in range(n):
            st += s_np[i, digits[i]]
            et += e_np[i, digits[i]]
        feasible = st <= cap
        if feasible.any():
            best_float = min(best_float, float(et[feasible].min()))

    # window covering worst-case float summation error
    bound = n * 2.0 ** -52 * float(np.abs(e_np).max(axis=1).sum())
    window = best_float + 4.0 * bound

    best_exact = None
    best_assign = None
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = np.unravel_index(idx, shape)
        st = np.zeros(idx.size, dtype=np.int64)
        et = np.zeros(idx.size)
        for i in range(n):
            st += s_np[i, digits[i]]
            et += e_np[i, digits[i]]
        for pos in np.nonzero((st <= cap) & (et <= window))[0]:
            assignment = [int(digits[i][pos]) for i in range(n)]
            exact = _exact_objective(table.errors, assignment)
            if best_exact is None or exact < best_exact:
                best_exact = exact
                best_assign = assignment
    return _finish_solution(table, best_assign, budget)


def _brute_force_python(table, budget, s_int, cap, n, c):
    best_exact = None
    best_assign = None
    for combo in itertools.product(range(c), repeat=n):
        if sum(s_int[i][ci] for i, ci in enumerate(combo)) > cap:
            continue
        exact = _exact_objective(table.errors, combo)
        if best_exact is None or exact < best_exact:
            best_exact = exact
            best_assign = list(combo)
    return _finish_solution(table, best_assign, budget)


# ---------------------------------------------------------------------------
# end-to-end initialization and storage accounting
# ---------------------------------------------------------------------------

def lq_lora_init(matrices, fishers=None, grid: ConfigGrid = None, rank: int = 1,
                 budget_bits_per_param=4.0, seed: int = 0, workers: int = 1,
                 method: str = "randomized", max_iters: int = 50):
    """Sweep, allocate, and decompose once more under the chosen configs.

    The budget is average bits per quantized parameter; low-rank factors
    live outside it.  Returns (per-matrix results, solution, sweep table);
    each final decomposition reuses its sweep cell's derived seed, so
    result errors equal the corresponding table entries.
    """
    table = sweep(matrices, fishers, grid, rank, seed=seed, workers=workers,
                  method=method, max_iters=max_iters)
    total_params = sum(table.sizes)
    budget_bits = Fraction(budget_bits_per_param) * total_params
    solution = solve_mckp(table, budget_bits)
    results = []
    for i, ci in enumerate(solution.assignment):
        fisher = None if fishers is None else fishers[i]
        results.append(lq_decompose(
            matrices[i], fisher, table.configs[ci], rank,
            max_iters=max_iters, seed=derive_seed(seed, i, ci), method=method,
        ))
    return results, solution, table


NF8_CONFIG = QuantConfig(8, 8, "fp32", 64, 256)

LORA_FORMATS = {
    "fp16": Fraction(16),
    "nf8": storage_bits_per_param(NF8_CONFIG),
}


@dataclass
class StorageReport:
    """Exact storage accounting for a quantized model plus adapters."""

    total_params: int
    lora_params: int
    quant_bits: Fraction
    lora_bits: Fraction

    @property
    def effective_bits_per_param(self) -> float:
        return float((self.quant_bits + self.lora_bits) / self.total_params)

    @property
    def quant_bytes(self) -> float:
        return float(self.quant_bits / 8)

    @property
    def lora_bytes(self) -> float:
        return float(self.lora_bits / 8)

    def to_json(self) -> dict:
        return {
            "total_params": self.total_params,
            "lora_params": self.lora_params,
            "quant_bits": float(self.quant_bits),
            "lora_bits": float(self.lora_bits),
            "quant_bytes": self.quant_bytes,
            "lora_bytes": self.lora_bytes,
            "effective_bits_per_param": self.effective_bits_per_param,
        }


def storage_report(shapes, quant_bits_per_param, lora_rank: int = 0,
                   lora_bits_per_param=LORA_FORMATS["nf8"]) -> StorageReport:
    """Effective bits per parameter for given shapes and bit assignments.

    `quant_bits_per_param` is either one number for all matrices or a
    per-matrix sequence (e.g. config costs from an allocation).  Rank-r
    adapters add r * (rows + cols) parameters per matrix at
    `lora_bits_per_param` each.
    """
    shapes = list(shapes)
    if not shapes:
        raise ValueError("at least one shape is required")
    if lora_rank < 0:
        raise ValueError("lora_rank must be nonnegative")
    sizes = [int(r) * int(c) for r, c in shapes]
    if isinstance(quant_bits_per_param, (list, tuple)):
        if len(quant_bits_per_param) != len(shapes):
            raise ValueError("per-matrix bits list must match the number of shapes")
        per_matrix = [Fraction(b) for b in quant_bits_per_param]
    else:
        per_matrix = [Fraction(quant_bits_per_param)] * len(shapes)
    quant_bits = sum(s * b for s, b in zip(sizes, per_matrix))
    lora_params = sum(lora_rank * (int(r) + int(c)) for r, c in shapes)
    lora_bits = lora_params * Fraction(lora_bits_per_param)
    return StorageReport(
        total_params=sum(sizes),
        lora_params=lora_params,
        quant_bits=quant_bits,
        lora_bits=lora_bits,
    )


def solution_bits_per_param(table: SweepTable, solution: AllocSolution):
    """Per-matrix bit costs implied by an allocation."""
    return [storage_bits_per_param(table.configs[ci]) for ci in solution.assignment]
