from __future__ import annotations

import re

import numpy as np
import pytest

from lossmap import data, model, optim, saddle, symmetry
from lossmap.errors import ContractError, TransitionStateFailure
from lossmap.landscape import LandscapeDatabase
from lossmap.model import Architecture

from conftest import double_well, muller_like


def test_double_well_band_finds_the_barrier():
    result = saddle.band_search(double_well(), np.array([-1.0]), np.array([1.0]))
    assert result.converged
    assert len(result.candidates) == 1
    top = result.candidates[0]
    assert abs(top.params[0]) < 1e-3 and abs(top.loss_value - 1.0) < 1e-5


def test_band_on_two_dimensional_surface():
    surface = muller_like()
    result = saddle.band_search(surface, np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
    ts = saddle.refine_ts(surface, result.candidates[0].params)
    assert np.abs(ts.params).max() < 1e-6
    assert ts.negative_eigenvalue == pytest.approx(-4.0, rel=1e-4)
    ends = saddle.descend_from_saddle(surface, ts)
    assert sorted(round(r.params[0], 6) for r in ends) == [-1.0, 1.0]


def test_band_rejects_identical_endpoints():
    with pytest.raises(ContractError):
        saddle.band_search(double_well(), np.array([1.0]), np.array([1.0]))


def test_band_is_deterministic():
    surface = muller_like()
    a = saddle.band_search(surface, np.array([-1.0, 0.1]), np.array([1.0, -0.2]))
    b = saddle.band_search(surface, np.array([-1.0, 0.1]), np.array([1.0, -0.2]))
    assert [c.params.tolist() for c in a.candidates] == [c.params.tolist() for c in b.candidates]


def test_unconverged_band_flags_candidates():
    cfg = saddle.BandConfig(max_band_iters=1)
    result = saddle.band_search(muller_like(), np.array([-1.0, 0.0]), np.array([1.0, 0.3]), cfg)
    assert not result.converged
    assert result.candidates and not any(c.converged for c in result.candidates)


def test_refine_keeps_an_exact_saddle():
    ts = saddle.refine_ts(double_well(), np.array([0.0]))
    assert abs(ts.params[0]) <= 1e-8 and ts.n_iter == 0
    assert ts.negative_eigenvalue == pytest.approx(-4.0)


def test_refine_near_a_minimum_fails():
    with pytest.raises(TransitionStateFailure, match="index 0"):
        saddle.refine_ts(double_well(), np.array([1.0 + 1e-7]))
    # no gradient along the soft mode, so the walk falls into the minimum
    with pytest.raises(TransitionStateFailure, match="index 0"):
        saddle.refine_ts(muller_like(), np.array([0.98, 0.0]))
    with pytest.raises(TransitionStateFailure, match="no convergence"):
        saddle.refine_ts(muller_like(), np.array([0.98, 0.3]), saddle.RefineConfig(max_iters=5))


def test_band_config_validation():
    with pytest.raises(ContractError):
        saddle.BandConfig(n_images=2)


@pytest.fixture(scope="module")
def net_db():
    ds = data.standardize(data.gen_checkerboard(200, 2, seed=3))
    objective = model.Objective(Architecture(2, (3,), 2), ds, l2=1e-3)
    db = LandscapeDatabase.for_objective(objective)
    optim.basin_hop(objective, optim.BasinHopConfig(n_steps=12, perturbation_scale=1.5, seed=11),
                    db, n_walkers=2)
    return objective, db


def test_symmetric_endpoints_have_a_positive_barrier(net_db):
    objective, db = net_db
    arch = objective.arch
    m = db.global_minimum
    rng = np.random.default_rng(0)
    g = symmetry.GroupElement((np.array([2, 0, 1]),), (np.array([-1.0, 1.0, 1.0]),))
    image = symmetry.apply_symmetry(arch, m.params, g)
    result = saddle.band_search(objective, m.params, image)
    assert result.candidates
    assert all(c.loss_value >= m.loss_value for c in result.candidates)
    # oracle: dense scans along the straight path and two bent paths all rise above the minimum
    ts = np.linspace(0.0, 1.0, 401)
    for bend in (np.zeros(arch.parameter_count), 0.3 * rng.normal(size=arch.parameter_count),
                 0.3 * rng.normal(size=arch.parameter_count)):
        path = [(1 - t) * m.params + t * image + 4 * t * (1 - t) * bend for t in ts]
        assert max(objective.value(p) for p in path) > m.loss_value + 1e-6
    assert result.candidates[0].loss_value > m.loss_value + 1e-6


def test_connect_two_minima_and_verify(net_db):
    objective, base = net_db
    assert len(base) == 2
    db = LandscapeDatabase.from_dict(base.to_dict())
    lines = []
    attempts = saddle.connect_landscape(objective, db, budget=5, report=lines.append)
    assert len(db.components()) == 1 and len(db.transition_states) >= 1
    assert len(attempts) == len(lines) >= 1
    for line in lines:
        assert re.fullmatch(r"TS-ATTEMPT pair=\d+,\d+ outcome=(ok|fail) barrier=\S+", line)
    for ts in db.transition_states:
        assert saddle.verify_ts(objective, db, ts) == []
        eigvals = np.linalg.eigvalsh(objective.hessian(ts.params))
        assert (eigvals < -1e-6).sum() == 1
        ends = (db.minimum(ts.min_a).loss_value, db.minimum(ts.min_b).loss_value)
        assert ts.loss_value >= max(ends) - 1e-9
    # already connected: nothing more to do
    before = db.to_dict()
    assert saddle.connect_landscape(objective, db, budget=5, report=None) == []
    assert db.to_dict() == before


def test_connect_single_minimum_is_a_no_op(net_db):
    objective, base = net_db
    db = LandscapeDatabase.for_objective(objective)
    m = base.global_minimum
    db.insert_minimum(m.params, m.loss_value, m.grad_norm)
    before = db.to_dict()
    assert saddle.connect_landscape(objective, db, budget=3, report=None) == []
    assert db.to_dict() == before


def test_verify_flags_a_bogus_transition_state(net_db):
    objective, base = net_db
    db = LandscapeDatabase.from_dict(base.to_dict())
    a, b = db.minima[:2]
    db.insert_transition_state(0.5 * (a.params + b.params), 1.0, 0.0, -1.0, a.id, b.id)
    problems = saddle.verify_ts(objective, db, db.transition_states[0])
    assert problems and "grad" in problems[0]
