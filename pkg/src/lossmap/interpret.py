"""Conserved weights inside disconnectivity-graph groups, and ablations.

A weight is conserved in a group when its population standard deviation
across the canonical parameter vectors of the group's minima falls below a
threshold ``n``.  Ablation experiments then check that scrambling the
conserved weights hurts the classifier more than disturbing a random set of
the same size by the same L2 amount.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import symmetry
from .errors import ContractError
from .landscape import DisconnectivityGraph, LandscapeDatabase
from .model import Architecture, EdgeIndex

DEFAULT_SIGMA = 0.01
MODES = ("shuffle", "perturb")


class ConservedWeight(NamedTuple):
    edge: EdgeIndex
    mean: float
    sigma: float


def _edge_dict(edge: EdgeIndex) -> dict:
    return {"layer": edge.layer, "from": edge.from_node, "to": edge.to_node,
            "is_bias": edge.is_bias}


def _edge_from_dict(d: dict) -> EdgeIndex:
    return EdgeIndex(int(d["layer"]), int(d["from"]), int(d["to"]), bool(d["is_bias"]))


@dataclass
class ConservedWeightReport:
    group_label: str
    member_count: int
    sigma_threshold: float
    conserved: list[ConservedWeight]
    trivially_conserved: bool
    members: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "group": self.group_label,
            "n": self.sigma_threshold,
            "member_count": self.member_count,
            "members": list(self.members),
            "trivially_conserved": self.trivially_conserved,
            "conserved": [{"edge": _edge_dict(c.edge), "mean": c.mean, "sigma": c.sigma}
                          for c in self.conserved],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConservedWeightReport":
        return cls(d["group"], int(d["member_count"]), float(d["n"]),
                   [ConservedWeight(_edge_from_dict(c["edge"]), float(c["mean"]),
                                    float(c["sigma"])) for c in d["conserved"]],
                   bool(d["trivially_conserved"]), tuple(d.get("members", ())))

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2) + "\n").encode()

    def to_table(self) -> str:
        lines = [f"group {self.group_label}: {self.member_count} minima, n = {self.sigma_threshold:g}"]
        if self.trivially_conserved:
            lines.append("warning: single-member group, every weight is trivially conserved")
        lines.append(f"{'edge':<14}{'mean':>14}{'sigma':>14}")
        for c in self.conserved:
            lines.append(f"{str(c.edge):<14}{c.mean:>14.6g}{c.sigma:>14.3e}")
        if not self.conserved:
            lines.append("(no conserved weights)")
        return "\n".join(lines) + "\n"


def conserved_weights(db: LandscapeDatabase, graph: DisconnectivityGraph, level: int,
                      node_index: int, n: float = DEFAULT_SIGMA) -> ConservedWeightReport:
    """Weights whose spread over the group's minima is below ``n``.

    ``n = 0`` is allowed and always yields an empty list.
    """
    if not (math.isfinite(n) and n >= 0):
        raise ContractError(f"sigma threshold must be a finite number >= 0, got {n}")
    node = graph.node(level, node_index)
    arch = db.arch
    stack = np.array([symmetry.canonicalize(arch, db.minimum(i).params) for i in node.members])
    means = stack.mean(axis=0)
    sigmas = stack.std(axis=0)
    if len(node.members) == 1:
        sigmas = np.zeros_like(sigmas)
    edges = arch.edges()
    picked = sorted((float(sigmas[i]), edges[i], i) for i in range(len(edges)) if sigmas[i] < n)
    conserved = [ConservedWeight(edge, float(means[i]), sigma) for sigma, edge, i in picked]
    return ConservedWeightReport(node.label, len(node.members), float(n), conserved,
                                 len(node.members) == 1, tuple(node.members))


class InputRelevance(NamedTuple):
    input_node: int
    edges: tuple[EdgeIndex, ...]

    @property
    def count(self) -> int:
        return len(self.edges)


def input_relevance(report: ConservedWeightReport, arch: Architecture) -> list[InputRelevance]:
    """Group conserved first-layer weights by the input feature they read."""
    by_input: dict[int, list[EdgeIndex]] = {}
    for c in report.conserved:
        arch.position(c.edge)  # rejects edges from another architecture
        if c.edge.layer == 1 and not c.edge.is_bias:
            by_input.setdefault(c.edge.from_node, []).append(c.edge)
    summary = [InputRelevance(k, tuple(v)) for k, v in by_input.items()]
    return sorted(summary, key=lambda r: (-r.count, r.input_node))


def _positions(arch: Architecture, target: Sequence[EdgeIndex]) -> np.ndarray:
    pos = np.array([arch.position(EdgeIndex(*e)) for e in target], dtype=np.int64)
    if len(set(pos.tolist())) != len(pos):
        raise ContractError("target set lists the same weight twice")
    return pos


def _shuffle(params: np.ndarray, pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if len(pos) < 2:
        raise ContractError("shuffling fewer than two weights is the identity; "
                            "use perturb mode or a larger target set")
    identity = np.arange(len(pos))
    perm = rng.permutation(len(pos))
    while np.array_equal(perm, identity):
        perm = rng.permutation(len(pos))
    out = params.copy()
    out[pos] = params[pos[perm]]
    return out


def _perturb(params: np.ndarray, pos: np.ndarray, norm: float,
             rng: np.random.Generator) -> np.ndarray:
    if not (math.isfinite(norm) and norm >= 0):
        raise ContractError(f"perturbation norm must be finite and >= 0, got {norm}")
    if len(pos) == 0:
        raise ContractError("empty target set")
    direction = rng.standard_normal(len(pos))
    while not np.any(direction):
        direction = rng.standard_normal(len(pos))
    out = params.copy()
    out[pos] += direction * (norm / np.linalg.norm(direction))
    return out


def ablate(arch: Architecture, params, target: Sequence[EdgeIndex], mode: str,
           rng: np.random.Generator, norm: float | None = None) -> tuple[np.ndarray, float]:
    """Scramble the target weights.

    ``shuffle`` permutes their values with a random non-identity permutation;
    ``perturb`` adds a random direction supported on them with L2 length
    ``norm``.  Returns the new vector and ``|new - old|``.
    """
    p = np.array(params, dtype=float)
    if p.shape != (arch.parameter_count,):
        raise ContractError(f"expected {arch.parameter_count} parameters, got shape {p.shape}")
    pos = _positions(arch, target)
    if mode == "shuffle":
        out = _shuffle(p, pos, rng)
    elif mode == "perturb":
        if norm is None:
            raise ContractError("perturb mode needs a norm")
        out = _perturb(p, pos, norm, rng)
    else:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    return out, float(np.linalg.norm(out - p))


class Stats(NamedTuple):
    mean: float
    min: float
    max: float
    std: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "Stats | None":
        if not values:
            return None
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        return cls(mean, min(values), max(values), math.sqrt(var))


@dataclass
class AblationReport:
    group_label: str
    target_set: list[EdgeIndex]
    mode: str
    perturbation_norm: float
    baseline_auc: float
    baseline_minimum: int
    ablated_auc_stats: Stats | None
    random_control_stats: Stats | None
    trials: int
    seed: int
    ablated_aucs: list[float] = field(default_factory=list)
    control_aucs: list[float] = field(default_factory=list)
    applied_norms: list[float] = field(default_factory=list)
    control_sets: list[list[EdgeIndex]] = field(default_factory=list)

    @property
    def gap(self) -> float | None:
        """Control mean minus ablated mean."""
        if self.ablated_auc_stats is None:
            return None
        return self.random_control_stats.mean - self.ablated_auc_stats.mean

    def to_dict(self) -> dict:
        def stats(s):
            return None if s is None else s._asdict()
        return {
            "group": self.group_label,
            "target_set": [_edge_dict(e) for e in self.target_set],
            "mode": self.mode,
            "perturbation_norm": self.perturbation_norm,
            "baseline_minimum": self.baseline_minimum,
            "baseline_auc": self.baseline_auc,
            "ablated_auc_stats": stats(self.ablated_auc_stats),
            "random_control_stats": stats(self.random_control_stats),
            "gap": self.gap,
            "trials": self.trials,
            "seed": self.seed,
            "ablated_aucs": self.ablated_aucs,
            "control_aucs": self.control_aucs,
            "applied_norms": self.applied_norms,
            "control_sets": [[_edge_dict(e) for e in s] for s in self.control_sets],
        }

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2) + "\n").encode()

    def to_table(self) -> str:
        lines = [f"ablation of group {self.group_label}: {len(self.target_set)} target weights, "
                 f"{self.trials} trials, seed {self.seed}",
                 f"baseline AUC (minimum {self.baseline_minimum}): {self.baseline_auc:.4f}"]
        if self.trials:
            lines.append(f"{'':<10}{'mean':>10}{'min':>10}{'max':>10}{'std':>10}")
            for name, s in (("ablated", self.ablated_auc_stats),
                            ("control", self.random_control_stats)):
                lines.append(f"{name:<10}" + "".join(f"{v:>10.4f}" for v in s))
            lines.append(f"gap (control - ablated): {self.gap:.4f}")
        return "\n".join(lines) + "\n"


def ablation_experiment(objective, db: LandscapeDatabase, report: ConservedWeightReport,
                        trials: int, seed: int, mode: str = "shuffle",
                        norm: float | None = None) -> AblationReport:
    """Compare scrambling the conserved set against norm-matched random controls.

    The baseline is the lowest-loss minimum of the report's group.  Trial
    ``t`` draws from its own child of ``SeedSequence(seed)``: first the target
    ablation, then a control set of equal size disjoint from the target,
    perturbed by the norm the target ablation actually applied.
    """
    db.check(objective.fingerprint)
    if trials < 0:
        raise ContractError("trials must be >= 0")
    if not report.conserved:
        raise ContractError(f"group {report.group_label} has no conserved weights at "
                            f"n = {report.sigma_threshold:g}; try a larger n")
    if not report.members:
        raise ContractError("report does not list its member minima")
    arch = db.arch
    best = min((db.minimum(i) for i in report.members), key=lambda m: (m.loss_value, m.id))
    target = [c.edge for c in report.conserved]
    target_pos = _positions(arch, target)
    others = np.setdiff1d(np.arange(arch.parameter_count), target_pos)
    if len(others) < len(target):
        raise ContractError("not enough weights outside the target set for a control of "
                            "equal size")
    if mode == "shuffle" and len(target) < 2:
        raise ContractError("a single conserved weight cannot be shuffled; use mode='perturb'")

    edges = arch.edges()
    out = AblationReport(report.group_label, target, mode, 0.0,
                         objective.auc(best.params), best.id, None, None, trials, seed)
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        ablated, applied = ablate(arch, best.params, target, mode, rng, norm)
        control_pos = np.sort(rng.choice(others, size=len(target), replace=False))
        assert not np.intersect1d(control_pos, target_pos).size
        control_set = [edges[i] for i in control_pos]
        controlled, _ = ablate(arch, best.params, control_set, "perturb", rng, applied)
        out.ablated_aucs.append(objective.auc(ablated))
        out.control_aucs.append(objective.auc(controlled))
        out.applied_norms.append(applied)
        out.control_sets.append(control_set)
    out.ablated_auc_stats = Stats.of(out.ablated_aucs)
    out.random_control_stats = Stats.of(out.control_aucs)
    if out.applied_norms:
        out.perturbation_norm = math.fsum(out.applied_norms) / len(out.applied_norms)
    return out
