"""Database of minima and transition states, superbasins and disconnectivity graphs."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import symmetry
from .errors import ContractError, FingerprintMismatch, PersistenceError
from .model import Architecture

FORMAT_VERSION = 1
DEDUP_TOL = 1e-4


@dataclass
class Minimum:
    id: int
    params: np.ndarray
    loss_value: float
    grad_norm: float
    discovery_count: int = 1
    min_hessian_eigenvalue: float | None = None


@dataclass
class TransitionState:
    id: int
    params: np.ndarray
    loss_value: float
    grad_norm: float
    negative_eigenvalue: float
    min_a: int
    min_b: int


class UnionFind:
    def __init__(self, items=()):
        self.parent = {x: x for x in items}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        # smaller root id wins so component roots are insertion-order free
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True

    def groups(self) -> list[list]:
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return [sorted(g) for g in out.values()]


def _hex(values) -> list[str]:
    return [float(v).hex() for v in values]


def _unhex(values) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=float)


def _opt_hex(value):
    return None if value is None else float(value).hex()


def _opt_unhex(value):
    return None if value is None else float.fromhex(value)


class LandscapeDatabase:
    """Deduplicated minima and transition states on one loss surface.

    Minima are stored in canonical (orbit representative) coordinates and two
    candidates within ``DEDUP_TOL`` of each other up to symmetry are merged.
    Mutation is single-writer.
    """

    def __init__(self, arch: Architecture, fingerprint: str, dedup_tol: float = DEDUP_TOL):
        self.arch = arch
        self.fingerprint = fingerprint
        self.dedup_tol = dedup_tol
        self.minima: list[Minimum] = []
        self.transition_states: list[TransitionState] = []
        self.next_min_id = 1
        self.next_ts_id = 1
        self._canon = np.empty((0, arch.parameter_count))
        self._by_id: dict[int, Minimum] = {}
        self._margins: list[float] = []
        self._enumerable = (len(arch.hidden_layers) == 1
                            and arch.hidden_layers[0] <= symmetry.ENUMERATION_LIMIT)

    @classmethod
    def for_objective(cls, objective) -> "LandscapeDatabase":
        return cls(objective.arch, objective.fingerprint)

    def check(self, fingerprint: str) -> None:
        if fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"database fingerprint {self.fingerprint} does not match {fingerprint}")

    def __len__(self) -> int:
        return len(self.minima)

    def minimum(self, min_id: int) -> Minimum:
        try:
            return self._by_id[min_id]
        except KeyError:
            raise ContractError(f"no minimum with id {min_id}") from None

    def find_minimum(self, params) -> int | None:
        """Id of a stored minimum orbit-equivalent to ``params``, if any."""
        if not self.minima:
            return None
        canon = symmetry.canonicalize(self.arch, params)
        return self._match(canon, params)

    def _match(self, canon: np.ndarray, raw: np.ndarray) -> int | None:
        if not len(self._canon):
            return None
        dist = np.abs(self._canon - canon).max(axis=1)
        best = int(np.argmin(dist))
        if dist[best] <= self.dedup_tol:
            return self.minima[best].id
        # canonical forms near a sort or sign tie can differ for equivalent points
        if not self._enumerable:
            return None
        near = symmetry.tie_margin(self.arch, raw) < 10 * self.dedup_tol
        for i, m in enumerate(self.minima):
            if (near or self._margins[i] < 10 * self.dedup_tol) and \
                    symmetry.are_equivalent(self.arch, m.params, raw, self.dedup_tol):
                return m.id
        return None

    def insert_minimum(self, params, loss_value: float, grad_norm: float,
                       min_hessian_eigenvalue: float | None = None,
                       fingerprint: str | None = None) -> tuple[int, bool]:
        if fingerprint is not None:
            self.check(fingerprint)
        raw = np.asarray(params, dtype=float)
        canon = symmetry.canonicalize(self.arch, raw)
        hit = self._match(canon, raw)
        if hit is not None:
            self._by_id[hit].discovery_count += 1
            return hit, False
        m = Minimum(self.next_min_id, canon, float(loss_value), float(grad_norm), 1,
                    None if min_hessian_eigenvalue is None else float(min_hessian_eigenvalue))
        self.next_min_id += 1
        self._add_minimum(m)
        return m.id, True

    def _add_minimum(self, m: Minimum) -> None:
        self.minima.append(m)
        self._by_id[m.id] = m
        self._canon = np.vstack([self._canon, m.params[None, :]])
        if self._enumerable:
            self._margins.append(symmetry.tie_margin(self.arch, m.params))

    def insert_transition_state(self, params, loss_value: float, grad_norm: float,
                                negative_eigenvalue: float, min_a: int, min_b: int,
                                fingerprint: str | None = None) -> tuple[int, bool]:
        if fingerprint is not None:
            self.check(fingerprint)
        self.minimum(min_a), self.minimum(min_b)
        canon = symmetry.canonicalize(self.arch, params)
        pair = {min_a, min_b}
        for ts in self.transition_states:
            if {ts.min_a, ts.min_b} == pair and \
                    symmetry.are_equivalent(self.arch, ts.params, canon, self.dedup_tol):
                return ts.id, False
        a, b = sorted((min_a, min_b))
        ts = TransitionState(self.next_ts_id, canon, float(loss_value), float(grad_norm),
                             float(negative_eigenvalue), a, b)
        self.next_ts_id += 1
        self.transition_states.append(ts)
        return ts.id, True

    @property
    def global_minimum(self) -> Minimum:
        if not self.minima:
            raise ContractError("database has no minima")
        return min(self.minima, key=lambda m: (m.loss_value, m.id))

    def superbasins_at(self, epsilon: float) -> list[list[int]]:
        """Components of minima below ``epsilon`` joined by transition states below it.

        Each component is a sorted id list; components are ordered by their
        lowest member loss (then id).
        """
        below = [m.id for m in self.minima if m.loss_value <= epsilon]
        uf = UnionFind(below)
        for ts in self.transition_states:
            if ts.loss_value <= epsilon and ts.min_a in uf.parent and ts.min_b in uf.parent:
                uf.union(ts.min_a, ts.min_b)
        return self._ordered(uf.groups())

    def components(self) -> list[list[int]]:
        return self.superbasins_at(np.inf)

    def _ordered(self, groups: list[list[int]]) -> list[list[int]]:
        def key(group):
            best = min(group, key=lambda i: (self._by_id[i].loss_value, i))
            return self._by_id[best].loss_value, best
        return sorted(groups, key=key)

    # persistence

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "fingerprint": self.fingerprint,
            "arch": self.arch.to_dict(),
            "dedup_tol": _opt_hex(self.dedup_tol),
            "next_ids": [self.next_min_id, self.next_ts_id],
            "minima": [{"id": m.id, "loss": m.loss_value.hex(), "grad_norm": m.grad_norm.hex(),
                        "params": _hex(m.params), "discovery_count": m.discovery_count,
                        "min_hessian_eigenvalue": _opt_hex(m.min_hessian_eigenvalue)}
                       for m in self.minima],
            "transition_states": [{"id": t.id, "loss": t.loss_value.hex(),
                                   "grad_norm": t.grad_norm.hex(),
                                   "neg_eig": t.negative_eigenvalue.hex(),
                                   "min_a": t.min_a, "min_b": t.min_b, "params": _hex(t.params)}
                                  for t in self.transition_states],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LandscapeDatabase":
        if doc.get("version") != FORMAT_VERSION:
            raise PersistenceError(f"unsupported database version {doc.get('version')!r}")
        try:
            arch = Architecture.from_dict(doc["arch"])
            db = cls(arch, doc["fingerprint"], _opt_unhex(doc.get("dedup_tol")) or DEDUP_TOL)
            for m in doc["minima"]:
                params = _unhex(m["params"])
                if params.shape != (arch.parameter_count,):
                    raise PersistenceError(f"minimum {m['id']} has the wrong parameter count")
                db._add_minimum(Minimum(int(m["id"]), params, float.fromhex(m["loss"]),
                                        float.fromhex(m["grad_norm"]), int(m["discovery_count"]),
                                        _opt_unhex(m.get("min_hessian_eigenvalue"))))
            for t in doc["transition_states"]:
                ts = TransitionState(int(t["id"]), _unhex(t["params"]), float.fromhex(t["loss"]),
                                     float.fromhex(t["grad_norm"]), float.fromhex(t["neg_eig"]),
                                     int(t["min_a"]), int(t["min_b"]))
                db.minimum(ts.min_a), db.minimum(ts.min_b)
                db.transition_states.append(ts)
            db.next_min_id, db.next_ts_id = (int(v) for v in doc["next_ids"])
        except (KeyError, TypeError, ValueError) as exc:
            raise PersistenceError(f"malformed database document: {exc}") from exc
        return db

    def __eq__(self, other) -> bool:
        if not isinstance(other, LandscapeDatabase):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def save(self, path) -> None:
        atomic_write(path, (json.dumps(self.to_dict(), indent=1) + "\n").encode())

    @classmethod
    def load(cls, path, fingerprint: str | None = None) -> "LandscapeDatabase":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise PersistenceError(f"{path}: not a valid database file ({exc})") from exc
        if not isinstance(doc, dict):
            raise PersistenceError(f"{path}: not a valid database file")
        db = cls.from_dict(doc)
        if fingerprint is not None:
            db.check(fingerprint)
        return db


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# disconnectivity graphs

@dataclass
class GraphNode:
    level: int
    index: int
    members: tuple[int, ...]
    parent: str | None = None
    children: list[str] = field(default_factory=list)

    @property
    def label(self) -> str:
        return f"{self.level}_{self.index}"


@dataclass
class DisconnectivityGraph:
    n_levels: int
    e_top: float
    e_bottom: float
    delta: float
    nodes: dict[str, GraphNode]
    minimum_loss: dict[int, float]

    def threshold(self, level: int) -> float:
        return self.e_top - (level - 1) * self.delta

    def level_nodes(self, level: int) -> list[GraphNode]:
        return sorted((n for n in self.nodes.values() if n.level == level), key=lambda n: n.index)

    def node(self, level: int, index: int) -> GraphNode:
        try:
            return self.nodes[f"{level}_{index}"]
        except KeyError:
            raise ContractError(f"no group {level}_{index}; available: "
                                f"{', '.join(self.labels())}") from None

    def labels(self) -> list[str]:
        return [n.label for n in sorted(self.nodes.values(), key=lambda n: (n.level, n.index))]

    def roots(self) -> list[GraphNode]:
        return self.level_nodes(1)

    def leaf_node(self, min_id: int) -> GraphNode:
        """Deepest node containing a minimum."""
        best = None
        for n in self.nodes.values():
            if min_id in n.members and (best is None or n.level > best.level):
                best = n
        if best is None:
            raise ContractError(f"minimum {min_id} is not in the graph")
        return best

    def branching_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes.values() if len(n.children) >= 2]

    def roster(self) -> list[tuple[str, int]]:
        return [(label, len(self.nodes[label].members)) for label in self.labels()]


def parse_group_label(label: str) -> tuple[int, int]:
    """``"25_7"`` -> (25, 7)."""
    parts = label.strip().split("_")
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise ContractError(f"group label must look like LEVEL_NODE, got {label!r}")
    level, index = int(parts[0]), int(parts[1])
    if level < 1 or index < 1:
        raise ContractError(f"group label must use 1-based numbers, got {label!r}")
    return level, index


def build_disconnectivity(db: LandscapeDatabase, n_levels: int = 25) -> DisconnectivityGraph:
    if not db.minima:
        raise ContractError("cannot build a disconnectivity graph from an empty database")
    if n_levels < 2:
        raise ContractError("n_levels must be >= 2")
    e_bottom = db.global_minimum.loss_value
    peak = max([m.loss_value for m in db.minima] + [t.loss_value for t in db.transition_states])
    e_top = peak + 1e-12
    delta = (e_top - e_bottom) / n_levels
    nodes: dict[str, GraphNode] = {}
    previous: list[GraphNode] = []
    for level in range(1, n_levels + 1):
        eps = e_top - (level - 1) * delta
        current = []
        for index, members in enumerate(db.superbasins_at(eps), start=1):
            node = GraphNode(level, index, tuple(members))
            for parent in previous:
                if members[0] in parent.members:
                    node.parent = parent.label
                    parent.children.append(node.label)
                    break
            nodes[node.label] = node
            current.append(node)
        previous = current
    return DisconnectivityGraph(n_levels, e_top, e_bottom, delta, nodes,
                                {m.id: m.loss_value for m in db.minima})


def _leaf_order(graph: DisconnectivityGraph) -> list[int]:
    order: list[int] = []

    def visit(node: GraphNode):
        if not node.children:
            order.extend(sorted(node.members, key=lambda i: (graph.minimum_loss[i], i)))
            return
        covered = set()
        for label in node.children:
            child = graph.nodes[label]
            visit(child)
            covered.update(child.members)
        # minima that sit between this level and the next hang off this node
        order.extend(sorted((m for m in node.members if m not in covered),
                            key=lambda i: (graph.minimum_loss[i], i)))

    for root in graph.roots():
        visit(root)
    return order


def _layout(graph: DisconnectivityGraph):
    """x positions for minima (leaf order) and nodes (mean of their minima)."""
    xs = {m: float(i) for i, m in enumerate(_leaf_order(graph))}
    node_x = {label: float(np.mean([xs[m] for m in n.members]))
              for label, n in graph.nodes.items()}
    return xs, node_x


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def emit_graph(graph: DisconnectivityGraph, db: LandscapeDatabase, fmt: str) -> bytes:
    if fmt == "json":
        return _emit_json(graph).encode()
    if fmt == "dot":
        return _emit_dot(graph).encode()
    if fmt == "svg":
        return _emit_svg(graph).encode()
    raise ContractError(f"unknown graph format {fmt!r}; use dot, svg or json")


def _emit_json(graph: DisconnectivityGraph) -> str:
    nodes = [{"label": n.label, "level": n.level, "index": n.index, "parent": n.parent,
              "members": list(n.members), "y": graph.threshold(n.level)}
             for n in (graph.nodes[label] for label in graph.labels())]
    minima = [{"id": m, "loss": loss, "node": graph.leaf_node(m).label}
              for m, loss in sorted(graph.minimum_loss.items())]
    doc = {"levels": graph.n_levels, "e_top": graph.e_top, "e_bottom": graph.e_bottom,
           "delta": graph.delta, "nodes": nodes, "minima": minima}
    return json.dumps(doc, indent=1) + "\n"


def _emit_dot(graph: DisconnectivityGraph) -> str:
    lines = ["digraph disconnectivity {", "  rankdir=TB;", "  node [shape=point];"]
    for label in graph.labels():
        n = graph.nodes[label]
        lines.append(f'  "{label}" [label="{label}", shape=plaintext, '
                     f'y="{_fmt(graph.threshold(n.level))}", members={len(n.members)}];')
    for label in graph.labels():
        n = graph.nodes[label]
        if n.parent is not None:
            lines.append(f'  "{n.parent}" -> "{label}";')
    for m, loss in sorted(graph.minimum_loss.items()):
        lines.append(f'  "min{m}" [label="{m}", y="{_fmt(loss)}"];')
        lines.append(f'  "{graph.leaf_node(m).label}" -> "min{m}" [style=bold];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _emit_svg(graph: DisconnectivityGraph, width: int = 640, height: int = 480) -> str:
    xs, node_x = _layout(graph)
    margin_l, margin_r, margin_t, margin_b = 70, 20, 20, 30
    n_leaves = max(len(xs), 1)
    lo = min(graph.minimum_loss.values())
    hi = graph.e_top
    span = hi - lo if hi > lo else 1.0

    def px(x):
        if n_leaves == 1:
            return margin_l + (width - margin_l - margin_r) / 2
        return margin_l + x / (n_leaves - 1) * (width - margin_l - margin_r)

    def py(y):
        return margin_t + (hi - y) / span * (height - margin_t - margin_b)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<line x1="{margin_l - 10}" y1="{margin_t}" x2="{margin_l - 10}" '
           f'y2="{height - margin_b}" stroke="black"/>']
    for tick in np.linspace(lo, hi, 5):
        y = py(tick)
        out.append(f'<line x1="{margin_l - 14}" y1="{y:.2f}" x2="{margin_l - 10}" y2="{y:.2f}" '
                   'stroke="black"/>')
        out.append(f'<text x="{margin_l - 16}" y="{y + 4:.2f}" font-size="10" '
                   f'text-anchor="end">{tick:.4g}</text>')
    out.append('<g stroke="black" stroke-width="1" fill="none">')
    for label in graph.labels():
        n = graph.nodes[label]
        if n.parent is None:
            continue
        x0, y0 = px(node_x[n.parent]), py(graph.threshold(n.level - 1))
        x1, y1 = px(node_x[label]), py(graph.threshold(n.level))
        out.append(f'<line class="branch" x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}"/>')
    for m in sorted(graph.minimum_loss):
        leaf = graph.leaf_node(m)
        x0, y0 = px(node_x[leaf.label]), py(graph.threshold(leaf.level))
        x1, y1 = px(xs[m]), py(graph.minimum_loss[m])
        out.append(f'<line class="stem" data-minimum="{m}" x1="{x0:.2f}" y1="{y0:.2f}" '
                   f'x2="{x1:.2f}" y2="{y1:.2f}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
