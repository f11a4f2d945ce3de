"""Transition-state search: elastic band, eigenvector following, connection loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import symmetry
from .errors import ContractError, NonFiniteError, TransitionStateFailure
from .landscape import LandscapeDatabase
from .optim import MinimizeConfig, lbfgs, newton_polish, polish, store_minimum

log = logging.getLogger(__name__)

TS_GRAD_TOL = 1e-5
EIG_TOL = 1e-6
DISPLACEMENT = 1e-3
# quench settings for the two displaced descents off a saddle
DESCENT_CONFIG = MinimizeConfig(max_step=0.1)


@dataclass(frozen=True)
class BandConfig:
    n_images: int = 15  # interior images
    spring_constant: float = 1.0
    band_grad_tol: float = 1e-3
    max_band_iters: int = 500
    climb_after: int = 20
    time_step: float = 0.1
    max_move: float = 0.2

    def __post_init__(self):
        if self.n_images < 3:
            raise ContractError("n_images must be >= 3")
        if not self.spring_constant > 0 or not self.band_grad_tol > 0:
            raise ContractError("spring_constant and band_grad_tol must be positive")
        if self.max_band_iters < 1:
            raise ContractError("max_band_iters must be >= 1")


@dataclass(frozen=True)
class RefineConfig:
    ts_grad_tol: float = TS_GRAD_TOL
    eig_tol: float = EIG_TOL
    max_iters: int = 200
    trust_radius: float = 0.1
    max_trust: float = 0.5
    hessian_every: int = 5
    displacement: float = DISPLACEMENT


@dataclass
class Candidate:
    params: np.ndarray
    loss_value: float
    image: int
    converged: bool


@dataclass
class BandResult:
    candidates: list[Candidate]
    converged: bool
    n_iter: int
    path: np.ndarray
    energies: np.ndarray


@dataclass
class RefinedSaddle:
    params: np.ndarray
    loss_value: float
    grad_norm: float
    negative_eigenvalue: float
    eigenvector: np.ndarray
    n_iter: int
    eigenvalues: np.ndarray


def _tangent(path, energies, i):
    """Upwinded tangent of Henkelman and Jonsson at interior image ``i``."""
    fwd = path[i + 1] - path[i]
    bwd = path[i] - path[i - 1]
    e_prev, e, e_next = energies[i - 1], energies[i], energies[i + 1]
    if e_next > e > e_prev:
        tau = fwd
    elif e_next < e < e_prev:
        tau = bwd
    else:
        d_max = max(abs(e_next - e), abs(e_prev - e))
        d_min = min(abs(e_next - e), abs(e_prev - e))
        if e_next > e_prev:
            tau = fwd * d_max + bwd * d_min
        else:
            tau = fwd * d_min + bwd * d_max
    norm = np.linalg.norm(tau)
    return tau / norm if norm > 0 else tau


def _band_forces(objective, path, end_energies, cfg, climb):
    n = len(path)
    energies = np.empty(n)
    energies[0], energies[-1] = end_energies
    grads = np.zeros_like(path)
    for i in range(1, n - 1):
        energies[i], grads[i] = objective(path[i])
    forces = np.zeros_like(path)
    top = 1 + int(np.argmax(energies[1:-1]))
    for i in range(1, n - 1):
        tau = _tangent(path, energies, i)
        g = grads[i]
        g_par = (g @ tau) * tau
        if climb and i == top:
            forces[i] = -g + 2.0 * g_par
        else:
            spring = cfg.spring_constant * (np.linalg.norm(path[i + 1] - path[i])
                                            - np.linalg.norm(path[i] - path[i - 1]))
            forces[i] = -(g - g_par) + spring * tau
    return energies, forces


def band_search(objective: Callable, start, end, cfg: BandConfig = BandConfig()) -> BandResult:
    """Relax a linear chain between two minima with a climbing-image elastic band.

    Returns the interior images that are local maxima of the loss along the
    relaxed chain, highest first.  An unconverged band still yields its
    best candidates, flagged ``converged=False``.
    """
    a = np.asarray(start, dtype=float)
    b = np.asarray(end, dtype=float)
    if a.shape != b.shape:
        raise ContractError("band endpoints differ in shape")
    if np.array_equal(a, b):
        raise ContractError("band endpoints are identical")
    ts = np.linspace(0.0, 1.0, cfg.n_images + 2)[:, None]
    path = (1.0 - ts) * a + ts * b
    end_energies = (objective(a)[0], objective(b)[0])

    # FIRE integrator on interior images
    velocity = np.zeros_like(path)
    dt, alpha, n_pos = cfg.time_step, 0.1, 0
    converged = False
    climb = False
    n_iter = 0
    for n_iter in range(1, cfg.max_band_iters + 1):
        energies, forces = _band_forces(objective, path, end_energies, cfg, climb)
        residual = float(np.abs(forces[1:-1]).max())
        if residual <= cfg.band_grad_tol and climb:
            converged = True
            break
        if not climb and (n_iter > cfg.climb_after or residual <= 10 * cfg.band_grad_tol):
            climb = True
            continue
        power = float((forces * velocity).sum())
        if power > 0:
            f_norm = np.linalg.norm(forces)
            v_norm = np.linalg.norm(velocity)
            velocity = (1 - alpha) * velocity + alpha * forces * (v_norm / f_norm)
            n_pos += 1
            if n_pos > 5:
                dt = min(dt * 1.1, 10 * cfg.time_step)
                alpha *= 0.99
        else:
            velocity[:] = 0.0
            dt *= 0.5
            alpha = 0.1
            n_pos = 0
        velocity += dt * forces
        move = dt * velocity
        biggest = np.linalg.norm(move, axis=1).max()
        if biggest > cfg.max_move:
            move *= cfg.max_move / biggest
        path[1:-1] += move[1:-1]
    else:
        energies, _ = _band_forces(objective, path, end_energies, cfg, climb)

    candidates = [Candidate(path[i].copy(), float(energies[i]), i, converged)
                  for i in range(1, len(path) - 1)
                  if energies[i] >= energies[i - 1] and energies[i] >= energies[i + 1]]
    candidates.sort(key=lambda c: (-c.loss_value, c.image))
    return BandResult(candidates, converged, n_iter, path, energies)


def _bofill_update(hess, step, dgrad):
    r = dgrad - hess @ step
    rs = float(r @ step)
    ss = float(step @ step)
    rr = float(r @ r)
    if ss == 0 or rr == 0:
        return hess
    phi = rs * rs / (rr * ss)
    ms = np.outer(r, r) / rs if abs(rs) > 1e-14 * math.sqrt(rr * ss) else 0.0
    psb = (np.outer(r, step) + np.outer(step, r)) / ss - rs * np.outer(step, step) / ss**2
    return hess + phi * ms + (1 - phi) * psb


def _prfo_step(eigvals, eigvecs, grad):
    """Partitioned rational-function step: maximize along mode 0, minimize the rest."""
    gt = eigvecs.T @ grad
    lam0, g0 = eigvals[0], gt[0]
    mu_up = 0.5 * lam0 + 0.5 * math.sqrt(lam0 * lam0 + 4.0 * g0 * g0)
    up = -g0 / (lam0 - mu_up) if lam0 != mu_up else 0.0
    rest_l, rest_g = eigvals[1:], gt[1:]
    size = len(rest_l)
    aug = np.zeros((size + 1, size + 1))
    aug[np.arange(size), np.arange(size)] = rest_l
    aug[:size, size] = rest_g
    aug[size, :size] = rest_g
    mu_down = min(float(np.linalg.eigvalsh(aug)[0]), 0.0)
    denom = rest_l - mu_down
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    down = -rest_g / denom
    return eigvecs @ np.concatenate([[up], down])


def refine_ts(objective, candidate, cfg: RefineConfig = RefineConfig()) -> RefinedSaddle:
    """Eigenvector-following refinement to an index-1 saddle.

    Steps uphill along the lowest Hessian mode and downhill along all others
    inside an adaptive trust radius.  Raises ``TransitionStateFailure`` when
    the end point is not index one or the iteration cap is hit.
    """
    x = np.array(candidate, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractError("candidate must be finite")
    f, g = objective(x)
    hess = objective.hessian(x)
    fresh = True
    trust = cfg.trust_radius
    since_hessian = 0
    for it in range(cfg.max_iters + 1):
        gnorm = float(np.abs(g).max())
        if gnorm <= cfg.ts_grad_tol:
            if not fresh:
                hess = objective.hessian(x)
            # pin the saddle down far below the tolerance so repeats deduplicate
            eigvals, eigvecs = np.linalg.eigh(hess)
            polished, f, g, _ = newton_polish(objective, x, f, g, eigvals, eigvecs)
            if polished is not x:
                x, hess = polished, objective.hessian(polished)
            return _classify(x, f, float(np.abs(g).max()), hess, it, cfg)
        if it == cfg.max_iters:
            break
        if since_hessian >= cfg.hessian_every and not fresh:
            hess = objective.hessian(x)
            since_hessian = 0
            fresh = True
        eigvals, eigvecs = np.linalg.eigh(hess)
        step = _prfo_step(eigvals, eigvecs, g)
        norm = float(np.linalg.norm(step))
        if norm > trust:
            step *= trust / norm
        try:
            f_new, g_new = objective(x + step)
        except NonFiniteError as exc:
            raise TransitionStateFailure(f"non-finite loss during refinement: {exc}") from exc
        # judge the step by the change in gradient norm predicted by the model
        predicted = g + hess @ step
        actual = float(np.linalg.norm(g_new))
        ratio_ok = actual <= 1.5 * float(np.linalg.norm(predicted)) + 1e-12
        if ratio_ok or np.linalg.norm(g_new) < np.linalg.norm(g):
            hess = _bofill_update(hess, step, g_new - g)
            x, f, g = x + step, f_new, g_new
            fresh = False
            since_hessian += 1
            if ratio_ok and np.linalg.norm(step) >= 0.9 * trust:
                trust = min(2.0 * trust, cfg.max_trust)
        else:
            trust = max(0.25 * trust, 1e-6)
            hess = objective.hessian(x)
            fresh = True
            since_hessian = 0
    eigvals = np.linalg.eigvalsh(objective.hessian(x))
    raise TransitionStateFailure(f"no convergence in {cfg.max_iters} iterations "
                                 f"(grad max-norm {float(np.abs(g).max()):.3g})", eigvals[:5])


def _classify(x, f, gnorm, hess, it, cfg) -> RefinedSaddle:
    eigvals, eigvecs = np.linalg.eigh(hess)
    n_neg = int((eigvals < -cfg.eig_tol).sum())
    if n_neg != 1:
        kind = "minimum (index 0)" if n_neg == 0 else f"index-{n_neg} saddle"
        raise TransitionStateFailure(f"converged to a {kind}; lowest eigenvalues "
                                     f"{np.array2string(eigvals[:4], precision=3)}", eigvals[:5])
    return RefinedSaddle(x, float(f), gnorm, float(eigvals[0]), eigvecs[:, 0], it, eigvals)


def descend_from_saddle(objective, saddle: RefinedSaddle, cfg: RefineConfig = RefineConfig(),
                        quench: MinimizeConfig = DESCENT_CONFIG):
    """Quench from both sides of the saddle along its unstable mode (Newton-polished)."""
    out = []
    for sign in (1.0, -1.0):
        start = saddle.params + sign * cfg.displacement * saddle.eigenvector
        res = lbfgs(objective, start, quench)
        out.append(polish(objective, res)[0] if res.converged else res)
    return out


@dataclass
class ConnectionAttempt:
    pair: tuple[int, int]
    ok: bool
    barrier: float
    new_ts: list[int]
    new_minima: list[int]
    failures: list[str]

    def log_line(self) -> str:
        return (f"TS-ATTEMPT pair={self.pair[0]},{self.pair[1]} "
                f"outcome={'ok' if self.ok else 'fail'} barrier={self.barrier:.10g}")


def verify_ts(objective, db: LandscapeDatabase, ts, cfg: RefineConfig = RefineConfig(),
              quench: MinimizeConfig = DESCENT_CONFIG) -> list[str]:
    """Re-check a stored transition state; returns the failed conditions (empty if fine)."""
    problems = []
    f, g = objective(ts.params)
    gnorm = float(np.abs(g).max())
    if gnorm > cfg.ts_grad_tol:
        problems.append(f"grad max-norm {gnorm:.3g} > {cfg.ts_grad_tol}")
    eigvals, eigvecs = np.linalg.eigh(objective.hessian(ts.params))
    n_neg = int((eigvals < -cfg.eig_tol).sum())
    if n_neg != 1:
        problems.append(f"{n_neg} negative eigenvalues")
        return problems
    ends = [db.minimum(ts.min_a), db.minimum(ts.min_b)]
    if f < max(m.loss_value for m in ends) - 1e-9:
        problems.append("saddle lies below an endpoint")
    saddle = RefinedSaddle(ts.params, f, gnorm, float(eigvals[0]), eigvecs[:, 0], 0, eigvals)
    reached = descend_from_saddle(objective, saddle, cfg, quench)
    arch = db.arch
    tol = db.dedup_tol

    def same(res, m):
        return res.converged and symmetry.are_equivalent(arch, res.params, m.params, tol)

    a, b = ends
    if not ((same(reached[0], a) and same(reached[1], b))
            or (same(reached[0], b) and same(reached[1], a))):
        problems.append("displaced quenches do not reach the recorded endpoints")
    return problems


def try_connect(objective, db: LandscapeDatabase, id_a: int, id_b: int,
                band: BandConfig = BandConfig(), refine: RefineConfig = RefineConfig(),
                quench: MinimizeConfig = DESCENT_CONFIG) -> ConnectionAttempt:
    """One double-ended search between two stored minima; mutates ``db``."""
    m_a, m_b = db.minimum(id_a), db.minimum(id_b)
    end = symmetry.closest_image(db.arch, m_a.params, m_b.params)
    attempt = ConnectionAttempt((id_a, id_b), False, math.nan, [], [], [])
    try:
        result = band_search(objective, m_a.params, end, band)
    except ContractError as exc:
        attempt.failures.append(str(exc))
        return attempt
    for cand in result.candidates:
        try:
            saddle = refine_ts(objective, cand.params, refine)
        except TransitionStateFailure as exc:
            attempt.failures.append(str(exc))
            continue
        ends = descend_from_saddle(objective, saddle, refine, quench)
        if not all(r.converged for r in ends):
            attempt.failures.append("displaced quench did not converge")
            continue
        ids = []
        for r in ends:
            mid, new = store_minimum(objective, db, r)
            ids.append(mid)
            if new:
                attempt.new_minima.append(mid)
        if saddle.loss_value < max(db.minimum(i).loss_value for i in ids) - 1e-9:
            attempt.failures.append("saddle below its own endpoints")
            continue
        if ids[0] == ids[1]:
            attempt.failures.append(f"saddle connects minimum {ids[0]} to itself")
            continue
        ts_id, new = db.insert_transition_state(saddle.params, saddle.loss_value,
                                                saddle.grad_norm, saddle.negative_eigenvalue,
                                                ids[0], ids[1])
        if new:
            attempt.new_ts.append(ts_id)
        barrier = saddle.loss_value - max(db.minimum(i).loss_value for i in ids)
        attempt.ok = True
        attempt.barrier = barrier if math.isnan(attempt.barrier) else max(attempt.barrier, barrier)
    return attempt


def _closest_cross_pair(db: LandscapeDatabase, skip: set,
                        focus: int | None = None) -> tuple[int, int] | None:
    """Nearest untried pair of minima in different components.

    With ``focus`` set, one side must lie in the component holding that
    minimum.
    """
    comps = db.components()
    if len(comps) < 2:
        return None
    comp_of = {m: c for c, members in enumerate(comps) for m in members}
    ids = [m.id for m in db.minima]
    coords = np.array([m.params for m in db.minima])
    home = None if focus is None else comp_of[focus]
    best = None
    for i in range(len(ids)):
        d = np.linalg.norm(coords[i + 1:] - coords[i], axis=1)
        for off in np.argsort(d, kind="stable"):
            j = i + 1 + int(off)
            pair = (ids[i], ids[j])
            ci, cj = comp_of[ids[i]], comp_of[ids[j]]
            if ci == cj or pair in skip or (home is not None and home not in (ci, cj)):
                continue
            if best is None or d[off] < best[0]:
                best = (float(d[off]), pair)
            break
    return None if best is None else best[1]


def connect_landscape(objective, db: LandscapeDatabase, budget: int,
                      band: BandConfig = BandConfig(), refine: RefineConfig = RefineConfig(),
                      quench: MinimizeConfig = DESCENT_CONFIG,
                      report: Callable[[str], None] | None = print,
                      tried: set | None = None,
                      on_attempt: Callable[[ConnectionAttempt], None] | None = None,
                      focus_global: bool = False) -> list[ConnectionAttempt]:
    """Greedily join components via the nearest cross-component pair of minima.

    Stops when one component remains, the attempt budget is spent, or no
    untried pair is left.  Every attempt is reported as a ``TS-ATTEMPT`` line.
    ``tried`` holds pairs already attempted (it is updated in place), which
    lets an interrupted run pick up where it stopped.

    With ``focus_global`` the budget goes first to pairs that join some
    other minimum to the global minimum's component; the plain rule takes
    over once no such pair is left.
    """
    db.check(objective.fingerprint)
    attempts: list[ConnectionAttempt] = []
    tried = set() if tried is None else tried
    while len(attempts) < budget and len(db) >= 2:
        pair = None
        if focus_global:
            pair = _closest_cross_pair(db, tried, db.global_minimum.id)
        if pair is None:
            pair = _closest_cross_pair(db, tried)
        if pair is None:
            break
        tried.add(pair)
        attempt = try_connect(objective, db, *pair, band=band, refine=refine, quench=quench)
        attempts.append(attempt)
        if report is not None:
            report(attempt.log_line())
        if on_attempt is not None:
            on_attempt(attempt)
        log.debug("attempt %s: %s", pair, attempt.failures)
    return attempts
