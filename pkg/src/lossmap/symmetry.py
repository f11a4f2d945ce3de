"""Hidden-unit permutation and sign-flip symmetries of a tanh network.

A group element carries, for every hidden layer, a permutation and a sign
vector.  Applying it makes new unit ``i`` a copy of old unit ``perm[i]``
with incoming weights, bias and outgoing weights multiplied by
``signs[i]``; because tanh is odd the network function is unchanged.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import Architecture, check_params


@dataclass(frozen=True, eq=False)
class GroupElement:
    perms: tuple[np.ndarray, ...]
    signs: tuple[np.ndarray, ...]

    def __post_init__(self):
        perms = tuple(np.asarray(p, dtype=np.int64) for p in self.perms)
        signs = tuple(np.asarray(s, dtype=float) for s in self.signs)
        if len(perms) != len(signs):
            raise ContractError("one permutation and one sign vector per hidden layer")
        for p, s in zip(perms, signs):
            if p.shape != s.shape or not np.array_equal(np.sort(p), np.arange(len(p))):
                raise ContractError("permutation is not a bijection of matching length")
            if not np.all(np.abs(s) == 1.0):
                raise ContractError("signs must be +1 or -1")
        object.__setattr__(self, "perms", perms)
        object.__setattr__(self, "signs", signs)

    def __eq__(self, other):
        if not isinstance(other, GroupElement) or len(self.perms) != len(other.perms):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.perms, other.perms)) and \
            all(np.array_equal(a, b) for a, b in zip(self.signs, other.signs))

    @classmethod
    def identity(cls, arch: Architecture) -> "GroupElement":
        return cls(tuple(np.arange(n) for n in arch.hidden_layers),
                   tuple(np.ones(n) for n in arch.hidden_layers))

    @classmethod
    def random(cls, arch: Architecture, rng: np.random.Generator) -> "GroupElement":
        return cls(tuple(rng.permutation(n) for n in arch.hidden_layers),
                   tuple(rng.choice([-1.0, 1.0], size=n) for n in arch.hidden_layers))

    def compose(self, other: "GroupElement") -> "GroupElement":
        """``self.compose(other)`` acts like applying ``other`` first, then ``self``."""
        perms, signs = [], []
        for p_g, s_g, p_h, s_h in zip(self.perms, self.signs, other.perms, other.signs):
            perms.append(p_h[p_g])
            signs.append(s_g * s_h[p_g])
        return GroupElement(tuple(perms), tuple(signs))

    def inverse(self) -> "GroupElement":
        perms, signs = [], []
        for p, s in zip(self.perms, self.signs):
            inv = np.argsort(p)
            perms.append(inv)
            signs.append(s[inv])
        return GroupElement(tuple(perms), tuple(signs))

    def fits(self, arch: Architecture) -> bool:
        return tuple(len(p) for p in self.perms) == arch.hidden_layers


def group_order(arch: Architecture) -> int:
    """Exact number of permutation/sign-flip elements, prod(n_l! * 2**n_l)."""
    return math.prod(math.factorial(n) * 2**n for n in arch.hidden_layers)


def all_elements(arch: Architecture):
    """Every group element; only sensible for tiny hidden layers."""
    per_layer = []
    for n in arch.hidden_layers:
        per_layer.append([(np.array(p), np.array(s, dtype=float))
                          for p in itertools.permutations(range(n))
                          for s in itertools.product((1.0, -1.0), repeat=n)])
    for combo in itertools.product(*per_layer):
        yield GroupElement(tuple(c[0] for c in combo), tuple(c[1] for c in combo))


def apply_symmetry(arch: Architecture, params, g: GroupElement) -> np.ndarray:
    if not g.fits(arch):
        raise ContractError("group element does not match the hidden layer widths")
    out = np.array(check_params(arch, params), dtype=float)
    mats = arch.unpack(out)
    for layer, (perm, sign) in enumerate(zip(g.perms, g.signs)):
        incoming, outgoing = mats[layer], mats[layer + 1]
        incoming[:] = sign[:, None] * incoming[perm]
        outgoing[:, :-1] = outgoing[:, :-1][:, perm] * sign[None, :]
    return out


def _sign_reference(incoming: np.ndarray, outgoing: np.ndarray) -> float:
    """Value whose sign must be made non-negative for one unit.

    ``incoming`` is the unit's weights followed by its bias, ``outgoing``
    the weights leaving it.
    """
    w = incoming[:-1]
    if np.any(w != 0):
        return w[int(np.argmax(np.abs(w)))]
    if incoming[-1] != 0:
        return incoming[-1]
    if np.any(outgoing != 0):
        return outgoing[int(np.argmax(np.abs(outgoing)))]
    return 1.0


def _unit_order(incoming: np.ndarray) -> list[int]:
    norms = np.sqrt((incoming**2).sum(axis=1))
    return sorted(range(len(incoming)), key=lambda j: (-norms[j], tuple(incoming[j])))


def canonical_element(arch: Architecture, params) -> GroupElement:
    """The group element that maps ``params`` onto its canonical image."""
    p = np.array(check_params(arch, params), dtype=float)
    mats = arch.unpack(p)
    perms, signs = [], []
    for layer, n in enumerate(arch.hidden_layers):
        incoming, outgoing = mats[layer], mats[layer + 1]
        sign = np.array([-1.0 if _sign_reference(incoming[j], outgoing[:, j]) < 0 else 1.0
                         for j in range(n)])
        signed = sign[:, None] * incoming
        perm = np.array(_unit_order(signed), dtype=np.int64)
        perms.append(perm)
        signs.append(sign[perm])
        # fix this layer in place so the next layer sees canonical columns
        incoming[:] = signed[perm]
        outgoing[:, :-1] = (outgoing[:, :-1] * sign[None, :])[:, perm]
    return GroupElement(tuple(perms), tuple(signs))


def canonicalize(arch: Architecture, params) -> np.ndarray:
    """Distinguished representative of the orbit of ``params``.

    Per hidden layer (first to last): flip each unit so the largest-magnitude
    entry of its incoming weight vector is positive (earliest index on ties;
    an all-zero vector defers to the bias, then the outgoing weights), then
    order units by descending norm of incoming weights plus bias, breaking
    exact ties by ascending lexicographic order of that vector.
    """
    return apply_symmetry(arch, params, canonical_element(arch, params))


def orbit_key(arch: Architecture, params) -> tuple:
    """Total order under which ``canonicalize`` returns the orbit minimum."""
    p = check_params(arch, params)
    mats = arch.unpack(p)
    key: list = []
    for layer, n in enumerate(arch.hidden_layers):
        incoming, outgoing = mats[layer], mats[layer + 1]
        unsigned = sum(_sign_reference(incoming[j], outgoing[:, j]) < 0 for j in range(n))
        key.append(unsigned)
        norms = np.sqrt((incoming**2).sum(axis=1))
        for j in range(n):
            key.append(-norms[j])
            key.extend(incoming[j])
    key.extend(p[arch.offsets[len(arch.hidden_layers)]:])
    return tuple(key)


def orbit(arch: Architecture, params) -> np.ndarray:
    """All images of ``params`` as rows (duplicates kept)."""
    return np.array([apply_symmetry(arch, params, g) for g in all_elements(arch)])


def canonical_distance(arch: Architecture, p1, p2) -> float:
    return float(np.abs(canonicalize(arch, p1) - canonicalize(arch, p2)).max())


ENUMERATION_LIMIT = 6
ALIGNMENT_LIMIT = 50_000


def closest_image(arch: Architecture, reference, params) -> np.ndarray:
    """Orbit image of ``params`` nearest to ``reference`` (Euclidean).

    Falls back to the canonical form when the group is too large to scan.
    """
    if group_order(arch) > ALIGNMENT_LIMIT:
        return canonicalize(arch, params)
    images = orbit(arch, params)
    d = ((images - np.asarray(reference, dtype=float))**2).sum(axis=1)
    return images[int(np.argmin(d))]


def tie_margin(arch: Architecture, params) -> float:
    """How close ``params`` is to a point where the canonical choice flips.

    The smallest of: gaps between neighbouring unit norms, gaps between the
    two largest incoming magnitudes of a unit, and the magnitude of each
    unit's sign-deciding entry.
    """
    mats = arch.unpack(canonicalize(arch, params))
    margin = math.inf
    for layer in range(len(arch.hidden_layers)):
        incoming = mats[layer]
        norms = np.sqrt((incoming**2).sum(axis=1))
        if len(norms) > 1:
            margin = min(margin, float(np.abs(np.diff(norms)).min()))
        mags = np.sort(np.abs(incoming[:, :-1]), axis=1)
        margin = min(margin, float(mags[:, -1].min()))
        if mags.shape[1] > 1:
            margin = min(margin, float((mags[:, -1] - mags[:, -2]).min()))
    return margin


def are_equivalent(arch: Architecture, p1, p2, tol: float) -> bool:
    """True iff the canonical forms agree to ``tol`` in the max-norm.

    Canonical forms can disagree when two units have nearly equal norms (or
    a sign choice is nearly ambiguous) and a small change flips it.  For one
    small hidden layer, a mismatch where either vector lies within ``10 * tol``
    of such a flip is re-checked against every image of ``p2``.
    """
    if not tol > 0:
        raise ContractError("tol must be positive")
    c1 = canonicalize(arch, p1)
    dist = float(np.abs(c1 - canonicalize(arch, p2)).max())
    if dist <= tol:
        return True
    if (len(arch.hidden_layers) == 1 and arch.hidden_layers[0] <= ENUMERATION_LIMIT
            and min(tie_margin(arch, p1), tie_margin(arch, p2)) < 10 * tol):
        return bool(np.abs(orbit(arch, p2) - c1).max(axis=1).min() <= tol)
    return False
