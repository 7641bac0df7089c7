"""Lattice geometries and coupling graphs for the disordered XY model.

All coupling strengths are linear frequencies in MHz (J/2pi).
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BondKind",
    "Geometry",
    "SiteId",
    "Bond",
    "CouplingGraph",
    "build_rectangle",
    "build_chain",
    "effective_coupling",
]


class BondKind(str, enum.Enum):
    NN = "NN"
    NNN = "NNN"


class Geometry(str, enum.Enum):
    CHAIN = "Chain"
    LADDER = "Ladder"
    RECTANGLE = "Rectangle"
    CUSTOM = "Custom"


@dataclass(frozen=True, order=True)
class SiteId:
    index: int
    row: int
    col: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"site index must be non-negative, got {self.index}")


@dataclass(frozen=True)
class Bond:
    a: SiteId
    b: SiteId
    strength: float
    kind: BondKind = BondKind.NN

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"bond endpoints coincide: {self.a}")
        if not math.isfinite(self.strength):
            raise ValueError(f"bond strength must be finite, got {self.strength}")
        dr = abs(self.a.row - self.b.row)
        dc = abs(self.a.col - self.b.col)
        if self.kind is BondKind.NN and dr + dc != 1:
            raise ValueError(f"NN bond between non-adjacent sites {self.a}, {self.b}")
        if self.kind is BondKind.NNN and not (dr == 1 and dc == 1):
            raise ValueError(f"NNN bond between non-diagonal sites {self.a}, {self.b}")

    @property
    def pair(self) -> tuple[int, int]:
        return tuple(sorted((self.a.index, self.b.index)))


@dataclass(frozen=True)
class CouplingGraph:
    """Sites plus weighted NN/NNN bonds.

    Immutable; bonds are validated on construction (unique unordered pairs,
    endpoints present). A disconnected graph only triggers a warning.
    """

    sites: tuple[SiteId, ...]
    bonds: tuple[Bond, ...]
    geometry: Geometry = Geometry.CUSTOM
    rows: int | None = None
    cols: int | None = None
    _by_index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "bonds", tuple(self.bonds))
        object.__setattr__(self, "geometry", Geometry(self.geometry))
        indices = [s.index for s in self.sites]
        if sorted(indices) != list(range(len(indices))):
            raise ValueError("site indices must be exactly 0..L-1")
        if len({(s.row, s.col) for s in self.sites}) != len(self.sites):
            raise ValueError("duplicate (row, col) coordinates")
        by_index = {s.index: s for s in self.sites}
        seen = set()
        for bond in self.bonds:
            for end in (bond.a, bond.b):
                if by_index.get(end.index) != end:
                    raise ValueError(f"bond endpoint {end} is not a site of the graph")
            if bond.pair in seen:
                raise ValueError(f"duplicate bond between sites {bond.pair}")
            seen.add(bond.pair)
        object.__setattr__(self, "_by_index", by_index)
        if len(self.sites) > 1 and not self.is_connected():
            warnings.warn("coupling graph is not connected", stacklevel=3)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def site(self, index: int) -> SiteId:
        return self._by_index[index]

    def site_at(self, row: int, col: int) -> SiteId:
        for s in self.sites:
            if s.row == row and s.col == col:
                return s
        raise KeyError((row, col))

    def bonds_of_kind(self, kind: BondKind) -> list[Bond]:
        return [b for b in self.bonds if b.kind is BondKind(kind)]

    def bond_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(i, j, strength)`` arrays over all bonds."""
        i = np.array([b.a.index for b in self.bonds], dtype=np.int64)
        j = np.array([b.b.index for b in self.bonds], dtype=np.int64)
        J = np.array([b.strength for b in self.bonds], dtype=np.float64)
        return i, j, J

    def is_connected(self) -> bool:
        adj: dict[int, list[int]] = {s.index: [] for s in self.sites}
        for b in self.bonds:
            adj[b.a.index].append(b.b.index)
            adj[b.b.index].append(b.a.index)
        start = self.sites[0].index
        seen = {start}
        stack = [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.sites)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.value,
            "rows": self.rows,
            "cols": self.cols,
            "sites": [[s.index, s.row, s.col] for s in self.sites],
            "bonds": [[b.a.index, b.b.index, b.strength, b.kind.value] for b in self.bonds],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CouplingGraph":
        sites = [SiteId(int(i), int(r), int(c)) for i, r, c in data["sites"]]
        by_index = {s.index: s for s in sites}
        bonds = [
            Bond(by_index[int(a)], by_index[int(b)], float(strength), BondKind(kind))
            for a, b, strength, kind in data["bonds"]
        ]
        return cls(tuple(sites), tuple(bonds), Geometry(data["geometry"]),
                   data.get("rows"), data.get("cols"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CouplingGraph":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _perturbed(strengths: Sequence[float], spread: float, seed: int | None) -> list[float]:
    if spread == 0.0:
        return list(strengths)
    if spread < 0 or not math.isfinite(spread):
        raise ValueError(f"spread must be a finite non-negative number, got {spread}")
    rng = np.random.Generator(np.random.Philox(0 if seed is None else seed))
    noise = rng.uniform(-spread, spread, size=len(strengths))
    return [s + float(d) for s, d in zip(strengths, noise)]


def build_rectangle(rows: int, cols: int, j_nn: float, j_nnn: float, *,
                    spread: float = 0.0, seed: int | None = None) -> CouplingGraph:
    """Rectangular array with NN bonds and both plaquette-diagonal NNN bonds.

    Sites are indexed row-major. ``spread`` adds a seeded uniform
    perturbation in ``[-spread, spread]`` to every bond, modelling device
    spread of the couplers.
    """
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be positive integers, got {rows}x{cols}")
    if rows * cols < 2:
        raise ValueError("a lattice needs at least two sites")
    if not (math.isfinite(j_nn) and math.isfinite(j_nnn)):
        raise ValueError("couplings must be finite")
    sites = [SiteId(r * cols + c, r, c) for r in range(rows) for c in range(cols)]

    def at(r: int, c: int) -> SiteId:
        return sites[r * cols + c]

    pairs: list[tuple[SiteId, SiteId, BondKind]] = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                pairs.append((at(r, c), at(r, c + 1), BondKind.NN))
            if r + 1 < rows:
                pairs.append((at(r, c), at(r + 1, c), BondKind.NN))
    for r in range(rows - 1):
        for c in range(cols - 1):
            pairs.append((at(r, c), at(r + 1, c + 1), BondKind.NNN))
            pairs.append((at(r, c + 1), at(r + 1, c), BondKind.NNN))

    base = [j_nn if kind is BondKind.NN else j_nnn for _, _, kind in pairs]
    strengths = _perturbed(base, spread, seed)
    bonds = tuple(Bond(a, b, s, kind) for (a, b, kind), s in zip(pairs, strengths))
    if rows == 1 or cols == 1:
        geometry = Geometry.CHAIN
    elif rows == 2 or cols == 2:
        geometry = Geometry.LADDER
    else:
        geometry = Geometry.RECTANGLE
    return CouplingGraph(tuple(sites), bonds, geometry, rows, cols)


def build_chain(n: int, j_nn: float, *, spread: float = 0.0, seed: int | None = None) -> CouplingGraph:
    if int(n) != n or n < 2:
        raise ValueError(f"a chain needs n >= 2 sites, got {n}")
    return build_rectangle(1, n, j_nn, 0.0, spread=spread, seed=seed)


def effective_coupling(g12: float, g1c: float, g2c: float, w1: float, w2: float, wc: float) -> float:
    """Qubit-coupler-qubit effective coupling, all arguments in MHz."""
    if wc == w1 or wc == w2:
        raise ZeroDivisionError("coupler frequency is resonant with a qubit")
    return g12 + 0.5 * g1c * g2c * (1.0 / (w1 - wc) + 1.0 / (w2 - wc))


def graph_from_pairs(pairs: Iterable[tuple[tuple[int, int], tuple[int, int], float]]) -> CouplingGraph:
    """Custom graph from ``((row, col), (row, col), strength)`` triples.

    Bond kind is inferred from the geometry of the pair.
    """
    coords: dict[tuple[int, int], SiteId] = {}
    triples = list(pairs)
    for a, b, _ in triples:
        for rc in (a, b):
            if tuple(rc) not in coords:
                coords[tuple(rc)] = None  # type: ignore[assignment]
    ordered = sorted(coords)
    sites = [SiteId(k, r, c) for k, (r, c) in enumerate(ordered)]
    lookup = {(s.row, s.col): s for s in sites}
    bonds = []
    for a, b, strength in triples:
        sa, sb = lookup[tuple(a)], lookup[tuple(b)]
        kind = BondKind.NN if abs(sa.row - sb.row) + abs(sa.col - sb.col) == 1 else BondKind.NNN
        bonds.append(Bond(sa, sb, float(strength), kind))
    return CouplingGraph(tuple(sites), tuple(bonds), Geometry.CUSTOM)
