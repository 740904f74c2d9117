"""Two-stage tuning of the controller parameters: swarm search then BFGS.

The optimizers work on a normalized vector ``x`` in ``[0, 1]^n_free``; the
map to physical parameters is affine per entry, in log space for gains and
frequencies. The cost is the worst weighted norm over the local loops,
plus ``penalty`` whenever any local loop is not verified stable.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .controller import ControllerError, ControllerStructure
from .frf import FrfSet
from .shaping import WeightSet, block_norms
from .stability import IntegratorDeclaration, assess_loop, controller_response

log = logging.getLogger("lpvtune")


class TuningConfigError(ValueError):
    """Inconsistent tuning inputs (mode flags, dimensions)."""


@dataclass(frozen=True)
class CostConfig:
    penalty: float = 1e6
    tol_origin: float = 1e-6
    max_step_deg: float = 90.0

    def __post_init__(self):
        if not self.penalty > 0:
            raise ValueError("penalty must be positive")


@dataclass(frozen=True)
class PsoConfig:
    particles: int = 40
    iterations: int = 200
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    seed: int = 0
    vmax_fraction: float = 0.2

    def __post_init__(self):
        if self.particles < 1 or self.iterations < 0:
            raise ValueError("particles must be >= 1 and iterations >= 0")
        if min(self.inertia, self.cognitive, self.social, self.vmax_fraction) <= 0:
            raise ValueError("PSO coefficients must be positive")


@dataclass(frozen=True)
class BfgsConfig:
    max_iter: int = 100
    fd_step: float = 1e-6
    tol: float = 1e-8
    gtol: float = 1e-10
    max_backtracks: int = 30

    def __post_init__(self):
        if self.max_iter < 0 or self.fd_step <= 0 or self.tol <= 0:
            raise ValueError("BFGS settings must be positive")


@dataclass
class SearchResult:
    x: np.ndarray
    cost: float
    trace: list
    evaluations: int


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("AUTOTUNE_THREADS", "1")))
    except ValueError:
        return 1


def _map(func, xs, workers):
    if workers <= 1 or len(xs) <= 1:
        return [func(x) for x in xs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, xs))


def pso_search(cost: Callable, lower, upper, cfg: PsoConfig = PsoConfig(),
               initial=None, callback: Optional[Callable] = None,
               workers: Optional[int] = None) -> SearchResult:
    """Global-best particle swarm inside the box ``[lower, upper]``.

    ``initial`` (optional) seeds particle 0. The returned trace holds the
    best cost after initialization and after every iteration.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("PSO needs finite bounds on every parameter")
    workers = _workers() if workers is None else workers
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.particles, lower.size
    width = upper - lower
    vmax = cfg.vmax_fraction * width
    x = lower + rng.random((n, d)) * width
    if initial is not None:
        x[0] = np.clip(initial, lower, upper)
    v = (2 * rng.random((n, d)) - 1) * vmax
    f = np.array(_map(cost, list(x), workers), dtype=float)
    pbest, pcost = x.copy(), f.copy()
    g = int(np.argmin(pcost))
    gbest, gcost = pbest[g].copy(), float(pcost[g])
    trace = [gcost]
    evals = n
    if callback:
        callback(0, gcost)
    for it in range(1, cfg.iterations + 1):
        r1, r2 = rng.random((n, d)), rng.random((n, d))
        v = (cfg.inertia * v + cfg.cognitive * r1 * (pbest - x)
             + cfg.social * r2 * (gbest - x))
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lower, upper)
        f = np.array(_map(cost, list(x), workers), dtype=float)
        evals += n
        better = f < pcost
        pbest[better], pcost[better] = x[better], f[better]
        g = int(np.argmin(pcost))
        if pcost[g] < gcost:
            gbest, gcost = pbest[g].copy(), float(pcost[g])
        trace.append(gcost)
        if callback:
            callback(it, gcost)
    return SearchResult(gbest, gcost, trace, evals)


def _gradient(cost, x, f0, lower, upper, step):
    g = np.zeros_like(x)
    evals = 0
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        hi, lo = min(x[i] + h, upper[i]), max(x[i] - h, lower[i])
        if hi == lo:
            continue
        xp, xm = x.copy(), x.copy()
        xp[i], xm[i] = hi, lo
        fp = cost(xp) if hi != x[i] else f0
        fm = cost(xm) if lo != x[i] else f0
        evals += (hi != x[i]) + (lo != x[i])
        g[i] = (fp - fm) / (hi - lo)
    return g, evals


def bfgs_refine(cost: Callable, x0, lower, upper, cfg: BfgsConfig = BfgsConfig(),
                callback: Optional[Callable] = None) -> SearchResult:
    """Projected BFGS with central finite-difference gradients.

    Steps are projected onto the box and accepted only under an Armijo
    decrease, so the result never costs more than the start.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f = float(cost(x))
    evals = 1
    trace = [f]
    if callback:
        callback(0, f)
    if x.size == 0:
        return SearchResult(x, f, trace, evals)
    H = np.eye(x.size)
    g, n = _gradient(cost, x, f, lower, upper, cfg.fd_step)
    evals += n
    it = 0
    while it < cfg.max_iter:
        it += 1
        at_lo = (x <= lower) & (g > 0)
        at_hi = (x >= upper) & (g < 0)
        free = ~(at_lo | at_hi)
        pg = np.where(free, g, 0.0)
        if np.linalg.norm(pg) <= cfg.gtol:
            break
        d = -(H @ pg)
        d[~free] = 0.0
        if d @ pg >= 0:
            H = np.eye(x.size)
            d = -pg
        t, accepted = 1.0, False
        for _ in range(cfg.max_backtracks):
            xn = np.clip(x + t * d, lower, upper)
            step = xn - x
            if not np.any(step):
                break
            fn = float(cost(xn))
            evals += 1
            if fn <= f + 1e-4 * (g @ step) and fn < f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.array_equal(H, np.eye(x.size)):
                break
            # curvature model failed: retry this iterate along steepest descent
            H = np.eye(x.size)
            it -= 1
            continue
        gn, n = _gradient(cost, xn, fn, lower, upper, cfg.fd_step)
        evals += n
        s, y = xn - x, gn - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(x.size) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        converged = abs(f - fn) <= cfg.tol * max(abs(f), 1e-300)
        x, f, g = xn, fn, gn
        trace.append(f)
        if callback:
            callback(it, f)
        if converged:
            break
    return SearchResult(x, f, trace, evals)


# -- the tuning problem --------------------------------------------------------

@dataclass
class Evaluation:
    cost: float
    norms: np.ndarray
    verdicts: list
    feasible: bool
    message: str = ""


class TuningProblem:
    """Cost of a controller parameter vector on a set of local FRFs."""

    def __init__(self, frfs: FrfSet, structure: ControllerStructure, weights: WeightSet,
                 decl: Optional[IntegratorDeclaration] = None,
                 cost_cfg: CostConfig = CostConfig(), mode: Optional[str] = None):
        if structure.channels != frfs.n_rb:
            raise TuningConfigError(
                f"controller has {structure.channels} channels, FRF data has {frfs.n_rb}")
        if mode is not None:
            if mode not in ("ct", "dt"):
                raise TuningConfigError(f"unknown mode {mode!r}")
            if (mode == "dt") != frfs.discrete:
                raise TuningConfigError(
                    f"mode {mode!r} does not match {'discrete' if frfs.discrete else 'continuous'}"
                    "-time FRF data")
        if structure.is_scheduled and frfs.n_sched != structure.n_sched:
            raise TuningConfigError(
                f"structure schedules on {structure.n_sched} variables, data has {frfs.n_sched}")
        self.frfs = frfs
        self.structure = structure
        self.weights = weights
        self.decl = decl or IntegratorDeclaration.for_structure(structure)
        if len(self.decl.n_int) != frfs.n_rb:
            raise TuningConfigError("integrator declaration does not match channel count")
        self.cost_cfg = cost_cfg
        self._weights = [weights.evaluate(frfs.omega, loc) for loc in frfs.locals]
        s = structure
        self.free = np.flatnonzero(s.free)
        lo, hi = s.lower[self.free], s.upper[self.free]
        self.log = s.log_scale[self.free]
        self._lo, self._hi = lo.copy(), hi.copy()
        self._lo[self.log], self._hi[self.log] = np.log(lo[self.log]), np.log(hi[self.log])

    @property
    def n_free(self) -> int:
        return self.free.size

    def theta(self, x) -> np.ndarray:
        """Physical parameter vector from normalized coordinates."""
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        raw = self._lo + x * (self._hi - self._lo)
        theta = self.structure.initial.copy()
        theta[self.free] = np.where(self.log, np.exp(raw), raw)
        return theta

    def normalize(self, theta) -> np.ndarray:
        vals = np.asarray(theta, dtype=float)[self.free]
        raw = np.where(self.log, np.log(np.maximum(vals, 1e-300)), vals)
        width = self._hi - self._lo
        safe = np.where(width > 0, width, 1.0)
        return np.clip(np.where(width > 0, (raw - self._lo) / safe, 0.0), 0.0, 1.0)

    def evaluate(self, theta) -> Evaluation:
        cap = 2 * self.cost_cfg.penalty
        n = len(self.frfs.locals)
        try:
            self.structure.check_box(theta)
            for loc in self.frfs.locals:
                self.structure.check_domain(theta, loc.p)
        except ControllerError as exc:
            return Evaluation(cap, np.full(n, np.inf), [], False, str(exc))
        norms, verdicts = np.empty(n), []
        omega, ts = self.frfs.omega, self.frfs.ts
        for i, loc in enumerate(self.frfs.locals):
            K = controller_response(self.structure, theta, loc.p, omega, ts, fast=True)
            verdicts.append(assess_loop(loc.response, K, self.decl,
                                        self.cost_cfg.tol_origin, self.cost_cfg.max_step_deg,
                                        discrete=ts is not None))
            norms[i] = max(block_norms(loc.response, K, self._weights[i]).values())
        feasible = all(v.stable for v in verdicts)
        worst = float(norms.max())
        if not math.isfinite(worst):
            return Evaluation(cap, norms, verdicts, False, "singular closed loop on the grid")
        cost = worst if feasible else self.cost_cfg.penalty + min(worst, self.cost_cfg.penalty)
        return Evaluation(cost, norms, verdicts, feasible)

    def cost(self, theta) -> float:
        return self.evaluate(theta).cost

    def cost_x(self, x) -> float:
        return self.evaluate(self.theta(x)).cost


@dataclass
class TuneResult:
    theta: np.ndarray
    cost: float
    norms: np.ndarray
    verdicts: list
    pso_trace: list
    bfgs_trace: list
    seed: int
    success: bool
    message: str
    evaluations: int
    wall_time: float = field(default=0.0, compare=False)

    @property
    def failed(self) -> bool:
        return not self.success


def _progress(stage, penalty):
    def report(k, best):
        log.info("iter=%d stage=%s best_cost=%.12g feasible=%s", k, stage, best,
                 str(best < penalty).lower())
    return report


def autotune(frfs: FrfSet, structure: ControllerStructure, weights: WeightSet,
             pso: PsoConfig = PsoConfig(), bfgs: BfgsConfig = BfgsConfig(),
             decl: Optional[IntegratorDeclaration] = None,
             cost_cfg: CostConfig = CostConfig(), mode: Optional[str] = None,
             workers: Optional[int] = None) -> TuneResult:
    """Swarm search, BFGS refinement, then independent re-validation."""
    start = time.perf_counter()
    problem = TuningProblem(frfs, structure, weights, decl, cost_cfg, mode)
    penalty = cost_cfg.penalty
    lo, hi = np.zeros(problem.n_free), np.ones(problem.n_free)
    x0 = problem.normalize(structure.initial)
    swarm = pso_search(problem.cost_x, lo, hi, pso, initial=x0,
                       callback=_progress("pso", penalty), workers=workers)
    evals = swarm.evaluations
    if swarm.cost >= penalty:
        x, bfgs_trace = swarm.x, []
    else:
        refined = bfgs_refine(problem.cost_x, swarm.x, lo, hi, bfgs,
                              callback=_progress("bfgs", penalty))
        evals += refined.evaluations
        x, bfgs_trace = (refined.x, refined.trace) if refined.cost <= swarm.cost \
            else (swarm.x, [])
    theta = problem.theta(x)
    final = problem.evaluate(theta)
    if final.feasible:
        success, message = True, "ok"
    elif swarm.cost >= penalty:
        success, message = False, "no stabilizing parameters found"
    else:
        success, message = False, "final verdict not stable: " + "; ".join(
            w for v in final.verdicts for w in v.warnings)[:500]
    return TuneResult(theta, final.cost, final.norms, final.verdicts, swarm.trace,
                      bfgs_trace, pso.seed, success, message, evals,
                      time.perf_counter() - start)


def tune_report(result: TuneResult, structure: ControllerStructure, weights: WeightSet,
                pso: PsoConfig, bfgs: BfgsConfig, cost_cfg: CostConfig,
                extra_config: Optional[dict] = None) -> dict:
    """JSON-ready report; excludes wall time so reruns are byte-identical."""
    config = {"weights": weights.to_dict(), "pso": asdict(pso), "bfgs": asdict(bfgs),
              "cost": asdict(cost_cfg)}
    if extra_config:
        config.update(extra_config)
    return {
        "config": config,
        "seed": result.seed,
        "success": result.success,
        "message": result.message,
        "cost": result.cost,
        "evaluations": result.evaluations,
        "traces": {"pso": list(map(float, result.pso_trace)),
                   "bfgs": list(map(float, result.bfgs_trace))},
        "parameters": [{"filter": lab[0], "name": lab[1], "channel": lab[2],
                        "coefficient": lab[3], "value": float(v)}
                       for lab, v in zip(structure.labels, result.theta)],
        "norms": [float(v) for v in result.norms],
        "verdicts": [v.to_dict() for v in result.verdicts],
    }
