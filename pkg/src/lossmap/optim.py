"""Local quenches (L-BFGS) and basin-hopping global exploration."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MinimizeConfig:
    grad_tol: float = 1e-6  # max-norm
    max_iters: int = 2000
    history_size: int = 10
    initial_step: float = 1.0
    # L2 cap on a single step; keeps quenches inside the starting basin
    max_step: float = 1.0

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ContractError("grad_tol must be positive")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")
        if self.history_size < 1 or not self.max_step > 0 or not self.initial_step > 0:
            raise ContractError("history_size, max_step and initial_step must be positive")


@dataclass
class MinimizeResult:
    params: np.ndarray
    loss_value: float
    grad_norm: float
    converged: bool
    n_iter: int
    n_eval: int
    gradient: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        # unpacks as the (params, loss_value, grad_norm, converged) contract
        return iter((self.params, self.loss_value, self.grad_norm, self.converged))


class _Evaluator:
    def __init__(self, objective):
        self.objective = objective
        self.n_eval = 0
        self.last_finite = None

    def __call__(self, x):
        self.n_eval += 1
        try:
            f, g = self.objective(x)
        except NonFiniteError as exc:
            raise NonFiniteError(str(exc), exc.index, self.last_finite) from exc
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            raise NonFiniteError("non-finite loss or gradient", last_finite=self.last_finite)
        return f, g


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic through two points with slopes; None if ill-posed."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if math.isfinite(t) else None


def strong_wolfe(evaluate, x, f0, g0, direction, alpha0, c1=1e-4, c2=0.9, max_evals=30):
    """Bracketing/zoom line search satisfying the strong Wolfe conditions.

    Returns ``(alpha, f, g)`` or ``None`` when no acceptable step was found.
    """
    dphi0 = float(g0 @ direction)
    if dphi0 >= 0:
        return None

    def phi(a):
        f, g = evaluate(x + a * direction)
        return f, g, float(g @ direction)

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = alpha0
    evals = 0
    best = None
    while evals < max_evals:
        f, g, d = phi(a)
        evals += 1
        if f <= f0 + c1 * a * dphi0 and (best is None or f < best[1]):
            best = (a, f, g)
        if f > f0 + c1 * a * dphi0 or (evals > 1 and f >= f_prev):
            return _zoom(phi, f0, dphi0, a_prev, f_prev, d_prev, a, f, d, c1, c2,
                         max_evals - evals, best)
        if abs(d) <= -c2 * dphi0:
            return a, f, g
        if d >= 0:
            return _zoom(phi, f0, dphi0, a, f, d, a_prev, f_prev, d_prev, c1, c2,
                         max_evals - evals, best)
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
    return best


def _zoom(phi, f0, dphi0, lo, f_lo, d_lo, hi, f_hi, d_hi, c1, c2, budget, best):
    for _ in range(max(budget, 0)):
        width = hi - lo
        t = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
        # keep the trial safely inside the bracket
        lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
        if t is None or not lo_b <= t <= hi_b:
            t = lo + 0.5 * width
        f, g, d = phi(t)
        if f <= f0 + c1 * t * dphi0 and (best is None or f < best[1]):
            best = (t, f, g)
        if f > f0 + c1 * t * dphi0 or f >= f_lo:
            hi, f_hi, d_hi = t, f, d
        else:
            if abs(d) <= -c2 * dphi0:
                return t, f, g
            if d * (hi - lo) >= 0:
                hi, f_hi, d_hi = lo, f_lo, d_lo
            lo, f_lo, d_lo = t, f, d
        if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
            break
    return best


def lbfgs(objective: Callable, x0, cfg: MinimizeConfig = MinimizeConfig(),
          callback: Callable | None = None) -> MinimizeResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    ``objective(x)`` returns ``(value, gradient)``.  Every accepted step
    lowers the objective; ``converged`` means max|grad| <= ``cfg.grad_tol``.
    """
    evaluate = _Evaluator(objective)
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractError("start point must be finite")
    f, g = evaluate(x)
    evaluate.last_finite = x.copy()
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    n_iter = 0
    gnorm = float(np.abs(g).max())
    while gnorm > cfg.grad_tol and n_iter < cfg.max_iters:
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q *= min(1.0, cfg.initial_step / float(np.linalg.norm(g)))
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        direction = -q
        if direction @ g >= 0:
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            direction = -g * min(1.0, cfg.initial_step / float(np.linalg.norm(g)))

        step_norm = float(np.linalg.norm(direction))
        alpha0 = min(1.0, cfg.max_step / step_norm) if step_norm > 0 else 1.0
        found = strong_wolfe(evaluate, x, f, g, direction, alpha0)
        if found is None:
            if not s_hist:
                break  # steepest descent failed too: roundoff floor reached
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            continue
        alpha, f_new, g_new = found
        s = alpha * direction
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        evaluate.last_finite = x.copy()
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s), y_hist.append(y), rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.history_size:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        n_iter += 1
        gnorm = float(np.abs(g).max())
        if callback is not None:
            callback(x, f, g)
    return MinimizeResult(x, float(f), gnorm, gnorm <= cfg.grad_tol, n_iter,
                          evaluate.n_eval, g)


def minimize(objective, start, cfg: MinimizeConfig = MinimizeConfig()) -> MinimizeResult:
    """Quench ``start`` on ``objective`` (a :class:`lossmap.model.Objective`)."""
    return lbfgs(objective, start, cfg)


@dataclass(frozen=True)
class BasinHopConfig:
    n_steps: int = 2000
    perturbation_scale: float = 0.8  # half-width of the uniform kick per coordinate
    metropolis_temperature: float = 0.05
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.n_steps < 0:
            raise ContractError("n_steps must be >= 0")
        if not (self.perturbation_scale > 0 and self.metropolis_temperature > 0
                and self.init_scale > 0):
            raise ContractError("perturbation_scale, temperature and init_scale must be positive")


@dataclass
class HopStep:
    step: int
    loss_value: float
    converged: bool
    accepted: bool
    threshold: float  # acceptance probability used
    draw: float
    result: MinimizeResult = field(repr=False)


def metropolis_accept(candidate_loss: float, anchor_loss: float, temperature: float,
                      draw: float) -> tuple[bool, float]:
    """Accept downhill always, uphill with probability exp(-delta/T)."""
    delta = candidate_loss - anchor_loss
    prob = 1.0 if delta <= 0 else math.exp(-delta / temperature)
    return draw < prob, prob


def hop_walk(objective, cfg: BasinHopConfig, minimize_cfg: MinimizeConfig = MinimizeConfig(),
             start=None, rng: np.random.Generator | None = None) -> list[HopStep]:
    """One basin-hopping walker.

    Step 0 is the quench of the start point; every later step kicks the
    current anchor, quenches, and applies the Metropolis test to the
    quenched losses.  Quenches that miss ``grad_tol`` are rejected.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    size = objective.arch.parameter_count if start is None else len(start)
    x0 = rng.uniform(-cfg.init_scale, cfg.init_scale, size) if start is None else start
    first = lbfgs(objective, x0, minimize_cfg)
    steps = [HopStep(0, first.loss_value, first.converged, True, 1.0, 0.0, first)]
    anchor = first
    for k in range(1, cfg.n_steps + 1):
        kick = rng.uniform(-cfg.perturbation_scale, cfg.perturbation_scale, size)
        draw = float(rng.random())
        res = lbfgs(objective, anchor.params + kick, minimize_cfg)
        if res.converged:
            accepted, prob = metropolis_accept(res.loss_value, anchor.loss_value,
                                               cfg.metropolis_temperature, draw)
        else:
            accepted, prob = False, 0.0
        if accepted:
            anchor = res
        steps.append(HopStep(k, res.loss_value, res.converged, accepted, prob, draw, res))
        log.debug("hop %d loss=%.6g conv=%s acc=%s", k, res.loss_value, res.converged, accepted)
    return steps


def _walker_job(args):
    objective, cfg, minimize_cfg, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    return hop_walk(objective, cfg, minimize_cfg, rng=rng)


def basin_hop(objective, cfg: BasinHopConfig, db, minimize_cfg: MinimizeConfig = MinimizeConfig(),
              n_walkers: int = 1, workers: int = 1, check_index: bool = True,
              only: Sequence[int] | None = None,
              on_walker: Callable[[int, list[HopStep]], None] | None = None):
    """Explore with ``n_walkers`` seeded walkers and merge their minima into ``db``.

    ``cfg.n_steps`` is split evenly across walkers.  Walkers may run in
    ``workers`` processes; results are merged in walker order, so the
    database does not depend on the worker count.  ``only`` restricts the
    run to some walker indices (for resuming) and ``on_walker`` is called
    after each walker has been merged.  Returns the per-walker step traces.
    """
    db.check(objective.fingerprint)
    if n_walkers < 1:
        raise ContractError("n_walkers must be >= 1")
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_walkers)
    per = [cfg.n_steps // n_walkers + (1 if i < cfg.n_steps % n_walkers else 0)
           for i in range(n_walkers)]
    indices = list(range(n_walkers)) if only is None else sorted(set(only))
    jobs = [(objective, replace(cfg, n_steps=per[i]), minimize_cfg, seeds[i]) for i in indices]
    traces = []

    def merge(index, trace):
        for step in trace:
            if step.converged:
                store_minimum(objective, db, step.result, check_index)
        traces.append(trace)
        if on_walker is not None:
            on_walker(index, trace)

    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for index, trace in zip(indices, pool.map(_walker_job, jobs)):
                merge(index, trace)
    else:
        for index, job in zip(indices, jobs):
            merge(index, _walker_job(job))
    return traces


def newton_polish(objective, x, f, g, eigvals, eigvecs, max_iters: int = 8):
    """Full Newton steps from a near-stationary point, kept while max|grad| drops.

    Converges to the nearby stationary point whatever its index, so it serves
    minima and saddles alike.  Returns ``(x, f, g, n_eval)``.
    """
    if np.min(np.abs(eigvals)) < 1e-12:
        return x, f, g, 0
    gnorm = float(np.abs(g).max())
    n_eval = 0
    for _ in range(max_iters):
        trial = x - eigvecs @ ((eigvecs.T @ g) / eigvals)
        try:
            f_new, g_new = objective(trial)
        except NonFiniteError:
            break
        n_eval += 1
        g_new_norm = float(np.abs(g_new).max())
        if not (math.isfinite(f_new) and g_new_norm < gnorm):
            break
        x, f, g, gnorm = trial, f_new, g_new, g_new_norm
    return x, f, g, n_eval


def polish(objective, res: MinimizeResult, max_iters: int = 8) -> tuple[MinimizeResult, float]:
    """Newton refinement of a converged quench with one dense Hessian.

    Soft directions (curvature near the L2 coefficient) leave an L-BFGS end
    point up to ``grad_tol / curvature`` away from the true minimum, which is
    far larger than the deduplication tolerance.  A few Newton steps fix
    that.  Returns the refined result and the lowest Hessian eigenvalue;
    points whose Hessian is not positive definite are returned unchanged.
    """
    eigvals, eigvecs = np.linalg.eigh(objective.hessian(res.params))
    lowest = float(eigvals[0])
    if lowest <= 0:
        return res, lowest
    f, g = (res.loss_value, res.gradient) if res.gradient is not None \
        else objective(res.params)
    x, f, g, n_eval = newton_polish(objective, res.params, f, g, eigvals, eigvecs, max_iters)
    return MinimizeResult(x, float(f), float(np.abs(g).max()), res.converged, res.n_iter,
                          res.n_eval + n_eval, g), lowest


def store_minimum(objective, db, res: MinimizeResult, check_index: bool = True):
    """Polish a converged quench and insert it; records the lowest eigenvalue if new."""
    lowest = None
    if hasattr(objective, "hessian"):
        res, lowest = polish(objective, res)
    mid, new = db.insert_minimum(res.params, res.loss_value, res.grad_norm)
    if new and check_index and lowest is not None:
        db.minimum(mid).min_hessian_eigenvalue = lowest
    return mid, new
