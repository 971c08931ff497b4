"""Differential Evolution, best/1/bin, over a bounded box.

Each generation draws all trial vectors from the current population, then
evaluates them (optionally on a thread pool), then does greedy selection.
All random draws happen in the calling thread, so a run is reproducible
for a given seed whatever the number of workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import OptimizationError, ParameterError


@dataclass
class DEConfig:
    bounds: Sequence = ()
    population_size: int = 24
    max_iterations: int = 200
    crossover_prob: float = 0.7
    weight_range: tuple = (0.5, 1.0)
    termination_ratio: float = 0.002
    seed: int = 0
    seed_initial: bool = True
    initial: Sequence | None = None
    workers: int = 1

    def validate(self) -> np.ndarray:
        b = np.asarray(self.bounds, dtype=np.float64)
        if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
            raise ParameterError("bounds must be a sequence of (low, high) pairs")
        if not np.all(np.isfinite(b)) or np.any(b[:, 0] > b[:, 1]):
            raise ParameterError("bounds must be finite with low <= high")
        if self.population_size < 4:
            raise ParameterError("population_size must be >= 4")
        if self.max_iterations < 0:
            raise ParameterError("max_iterations must be >= 0")
        if not 0.0 < self.crossover_prob <= 1.0:
            raise ParameterError("crossover_prob must be in (0, 1]")
        lo, hi = self.weight_range
        if not 0.0 < lo <= hi < 2.0:
            raise ParameterError("weight_range must lie inside (0, 2)")
        if self.termination_ratio < 0:
            raise ParameterError("termination_ratio must be >= 0")
        return b


@dataclass
class OptimizationTrace:
    """Every evaluated vector, in (iteration, member) order."""

    iterations: list = field(default_factory=list)
    members: list = field(default_factory=list)
    vectors: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    best_vector: np.ndarray | None = None
    best_cost: float = math.inf
    n_iterations: int = 0
    termination_reason: str = ""

    def record(self, iteration: int, member: int, x: np.ndarray, cost: float) -> None:
        self.iterations.append(iteration)
        self.members.append(member)
        self.vectors.append(np.array(x, dtype=np.float64))
        self.costs.append(float(cost))

    def __len__(self):
        return len(self.costs)

    def best_so_far(self) -> np.ndarray:
        """Running minimum of the cost at the end of each iteration."""
        it = np.asarray(self.iterations)
        c = np.asarray(self.costs)
        return np.array([c[it <= k].min() for k in range(it.max() + 1)])


def _converged(costs: np.ndarray, ratio: float) -> bool:
    if not np.all(np.isfinite(costs)):
        return False
    sd = float(np.std(costs))
    return sd == 0.0 or sd < ratio * abs(float(np.mean(costs)))


def minimize(cost: Callable[[np.ndarray], float], cfg: DEConfig) -> OptimizationTrace:
    """Minimise ``cost`` over ``cfg.bounds``.

    Mutant ``best + w (x_r1 - x_r2)`` with ``w ~ U(weight_range)`` per trial,
    binomial crossover with one forced mutant gene, clipping to the box and
    greedy selection. Stops when the population cost std falls below
    ``termination_ratio * |mean|`` (checked after every generation) or after
    ``max_iterations`` generations. Non-finite costs count as +inf.
    """
    bounds = cfg.validate()
    lo, hi = bounds[:, 0], bounds[:, 1]
    dim = len(bounds)
    npop = cfg.population_size
    rng = np.random.default_rng(cfg.seed)
    trace = OptimizationTrace()

    pop = lo + (hi - lo) * rng.random((npop, dim))
    if cfg.seed_initial:
        x0 = np.zeros(dim) if cfg.initial is None else np.asarray(cfg.initial, dtype=np.float64)
        if np.all((x0 >= lo) & (x0 <= hi)):
            pop[0] = x0

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    def evaluate(xs):
        vals = pool.map(cost, xs) if pool is not None else map(cost, xs)
        out = np.array([float(v) for v in vals])
        out[~np.isfinite(out)] = math.inf
        return out

    try:
        costs = evaluate(list(pop))
        for m in range(npop):
            trace.record(0, m, pop[m], costs[m])
        if not np.any(np.isfinite(costs)):
            raise OptimizationError("cost is non-finite for the whole initial population")

        reason = "max_iterations"
        it = 0
        while it < cfg.max_iterations:
            it += 1
            best = pop[int(np.argmin(costs))]
            trials = np.empty_like(pop)
            for i in range(npop):
                others = [k for k in range(npop) if k != i]
                r1, r2 = rng.choice(others, size=2, replace=False)
                w = rng.uniform(*cfg.weight_range)
                mutant = best + w * (pop[r1] - pop[r2])
                cross = rng.random(dim) < cfg.crossover_prob
                cross[rng.integers(dim)] = True
                trials[i] = np.clip(np.where(cross, mutant, pop[i]), lo, hi)
            trial_costs = evaluate(list(trials))
            for m in range(npop):
                trace.record(it, m, trials[m], trial_costs[m])
            better = trial_costs <= costs
            pop[better] = trials[better]
            costs[better] = trial_costs[better]
            if _converged(costs, cfg.termination_ratio):
                reason = "converged"
                break
    finally:
        if pool is not None:
            pool.shutdown()

    k = int(np.argmin(costs))
    trace.best_vector = pop[k].copy()
    trace.best_cost = float(costs[k])
    trace.n_iterations = it
    trace.termination_reason = reason
    return trace


def write_trace_csv(trace: OptimizationTrace, path, param_names: Sequence[str] | None = None) -> None:
    """Columns: iteration, member, one per parameter, cost."""
    dim = len(trace.vectors[0]) if trace.vectors else 0
    names = list(param_names) if param_names is not None else [f"p{i}" for i in range(dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "member", *names, "cost"])
        for it, m, x, c in zip(trace.iterations, trace.members, trace.vectors, trace.costs):
            w.writerow([it, m, *(repr(float(v)) for v in x), repr(c)])


def read_trace_csv(path) -> OptimizationTrace:
    trace = OptimizationTrace()
    with open(Path(path), newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header[:2] != ["iteration", "member"] or header[-1] != "cost":
            raise ParameterError(f"{path}: not a trace CSV")
        for row in rows:
            trace.record(int(row[0]), int(row[1]), [float(v) for v in row[2:-1]], float(row[-1]))
    if trace.costs:
        k = int(np.argmin(trace.costs))
        trace.best_vector = trace.vectors[k]
        trace.best_cost = trace.costs[k]
        trace.n_iterations = max(trace.iterations)
    return trace
