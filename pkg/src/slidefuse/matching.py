"""Deformation-free landmark matching between consecutive slides.

The matcher associates landmarks of two approximately rigidly registered
slides without warping either one. Instead of a single global combinatorial
problem, each landmark g of the source slide is matched independently: the
candidates are the target landmarks within ``d_match`` of g, and the cost of
a candidate h is the minimal energy of assigning g's d_sub-neighbourhood to
h's d_sub-neighbourhood.

The energy of pairing a source neighbour ``g`` with a target neighbour ``h``
(for centres ``g_i`` and ``h_j``) is

    angle(g, h_j, h) / 90 + |dist(g_i, g) - dist(h_j, h)| / dist(g_i, g)

with the angle at h_j in degrees, in [0, 180]. A candidate's energy is the
minimum over injective neighbour assignments of the sum of the n cheapest
pair energies, n = min(N, #source neighbours, #target neighbours). Keeping
only the n best associations tolerates neighbours that appear or disappear
between sections.

Matching runs in both directions and only the associations found in both are
kept; that consistency filter is the sole rejection mechanism (an optional
energy cap can be enabled on top).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .model import (
    ChainRow,
    Landmark,
    MatchChain,
    MatchPair,
    MatchSet,
    SlideGraph,
    auto_d_sub,
    build_slide_graph,
)

__all__ = [
    "MatchParams",
    "CandidateSet",
    "neighbor_energy",
    "neighbor_energy_matrix",
    "assignment_energy",
    "candidate_sets",
    "match_directed",
    "match_bidirectional",
    "match_landmarks",
    "resolve_d_sub",
    "chain_matches",
]

# Internal sentinel for degenerate pairings (coincident points across slides
# make the angle undefined). Large enough to never beat a real energy, small
# enough to keep the assignment solver's arithmetic finite.
_BAD_ENERGY = 1e30

Point = tuple[float, float]


@dataclass(frozen=True)
class MatchParams:
    """Tuning knobs of the matcher.

    d_match : candidate search radius in um.
    n_neighbors : number of neighbour associations summed into the energy (N).
    d_sub : subgraph edge length in um, or "auto" to derive it from the
        landmark distribution so that at least ``subgraph_coverage`` of the
        landmarks have N+1 neighbours.
    energy_cap : optional maximum accepted candidate energy; disabled by
        default, where bidirectional consistency is the only filter.
    """

    d_match: float = 300.0
    n_neighbors: int = 4
    d_sub: Union[float, str] = "auto"
    energy_cap: Optional[float] = None
    subgraph_coverage: float = 0.9

    def __post_init__(self) -> None:
        if self.d_match <= 0:
            raise ValueError(f"d_match must be positive, got {self.d_match}")
        if self.n_neighbors < 1:
            raise ValueError(f"n_neighbors must be >= 1, got {self.n_neighbors}")
        if isinstance(self.d_sub, str):
            if self.d_sub != "auto":
                raise ValueError(f"d_sub must be a length in um or 'auto', got {self.d_sub!r}")
        elif self.d_sub <= 0:
            raise ValueError(f"d_sub must be positive, got {self.d_sub}")
        if self.energy_cap is not None and self.energy_cap <= 0:
            raise ValueError(f"energy_cap must be positive, got {self.energy_cap}")

    @classmethod
    def tissue_preset(cls, **overrides) -> "MatchParams":
        """Defaults for real whole-slide sections (d_match=300 um, N=4)."""
        return cls(**{"d_match": 300.0, "n_neighbors": 4, **overrides})

    @classmethod
    def synthetic_preset(cls, **overrides) -> "MatchParams":
        """Defaults for the 300x300 synthetic benchmark (d_match=80, N=3).

        Uses full subgraph coverage: the simulated fields are small and have
        no real tissue border, so every centroid keeps N+1 neighbours and
        clean data matches perfectly.
        """
        return cls(
            **{"d_match": 80.0, "n_neighbors": 3, "subgraph_coverage": 1.0, **overrides}
        )


@dataclass(frozen=True)
class CandidateSet:
    """Target landmarks within d_match of one source landmark."""

    g_id: str
    candidates: tuple[str, ...]


def neighbor_energy(g_i: Point, g: Point, h_j: Point, h: Point) -> float:
    """Energy of pairing source neighbour g with target neighbour h.

    ``g_i`` is the source landmark being matched and ``h_j`` the candidate it
    is tested against. Zero exactly when the angle at h_j between g and h is
    zero and the two neighbour distances are equal. Raises on coincident
    points, where the angle or the distance ratio is undefined.
    """
    ux, uy = g[0] - h_j[0], g[1] - h_j[1]
    vx, vy = h[0] - h_j[0], h[1] - h_j[1]
    d_g = math.hypot(g[0] - g_i[0], g[1] - g_i[1])
    d_h = math.hypot(vx, vy)
    if d_g == 0.0 or d_h == 0.0 or (ux == 0.0 and uy == 0.0):
        raise ValueError("degenerate geometry: coincident points")
    angle = math.degrees(math.atan2(abs(ux * vy - uy * vx), ux * vx + uy * vy))
    return angle / 90.0 + abs(d_g - d_h) / d_g


def neighbor_energy_matrix(
    g_i: Point,
    g_neighbors: np.ndarray,
    h_j: Point,
    h_neighbors: np.ndarray,
) -> np.ndarray:
    """All pair energies between two neighbourhoods, as an (a, b) matrix.

    Degenerate pairings (a neighbour coinciding with a centre) get a large
    sentinel energy instead of raising, so the assignment step simply avoids
    them.
    """
    gn = np.asarray(g_neighbors, dtype=float).reshape(-1, 2)
    hn = np.asarray(h_neighbors, dtype=float).reshape(-1, 2)
    u = gn - np.asarray(h_j, dtype=float)  # rays h_j -> g
    v = hn - np.asarray(h_j, dtype=float)  # rays h_j -> h
    d_g = np.hypot(gn[:, 0] - g_i[0], gn[:, 1] - g_i[1])
    d_h = np.hypot(v[:, 0], v[:, 1])
    u_norm = np.hypot(u[:, 0], u[:, 1])

    cross = np.abs(u[:, 0:1] * v[None, :, 1] - u[:, 1:2] * v[None, :, 0])
    dot = u @ v.T
    angle = np.degrees(np.arctan2(cross, dot))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(d_g[:, None] - d_h[None, :]) / d_g[:, None]
    energies = angle / 90.0 + ratio

    bad_rows = (d_g == 0.0) | (u_norm == 0.0)
    bad_cols = d_h == 0.0
    if bad_rows.any():
        energies[bad_rows, :] = _BAD_ENERGY
    if bad_cols.any():
        energies[:, bad_cols] = _BAD_ENERGY
    return energies


def _min_partial_assignment(cost: np.ndarray, n: int) -> float:
    """Minimum total cost of an injective assignment of exactly n pairs.

    Minimising, over injective neighbour mappings, the sum of the n cheapest
    pair energies is the same as picking the cheapest injective set of n
    pairs outright, which a square assignment solver handles after padding
    with zero-cost dummy rows and columns (costs are nonnegative, so the
    dummies never displace a cheaper real pair).
    """
    a, b = cost.shape
    size = a + b - n
    padded = np.zeros((size, size), dtype=float)
    padded[:a, :b] = cost
    rows, cols = linear_sum_assignment(padded)
    real = (rows < a) & (cols < b)
    chosen = np.sort(cost[rows[real], cols[real]])[:n]
    # fsum keeps the result independent of summation order, so equal pair
    # sets always produce bit-identical energies
    return math.fsum(float(c) for c in chosen)


def assignment_energy(
    g_neighbors: Sequence[Point] | np.ndarray,
    h_neighbors: Sequence[Point] | np.ndarray,
    g_i: Point,
    h_j: Point,
    n_neighbors: int,
) -> float:
    """Energy of matching candidate h_j to landmark g_i.

    The minimum over injective mappings of g_i's neighbourhood into h_j's of
    the sum of the n lowest pair energies, n = min(n_neighbors, sizes). When
    a neighbourhood has fewer than ``n_neighbors`` members, n shrinks rather
    than rejecting the candidate, so boundary landmarks stay matchable.
    Returns ``inf`` when every assignment of n pairs hits degenerate
    geometry.
    """
    gn = np.asarray(g_neighbors, dtype=float).reshape(-1, 2)
    hn = np.asarray(h_neighbors, dtype=float).reshape(-1, 2)
    if gn.shape[0] == 0 or hn.shape[0] == 0:
        raise ValueError("assignment energy needs nonempty neighbourhoods")
    if n_neighbors < 1:
        raise ValueError(f"n_neighbors must be >= 1, got {n_neighbors}")
    cost = neighbor_energy_matrix(g_i, gn, h_j, hn)
    n = min(n_neighbors, gn.shape[0], hn.shape[0])
    total = _min_partial_assignment(cost, n)
    return math.inf if total >= _BAD_ENERGY else total


def candidate_sets(G: SlideGraph, H: SlideGraph, d_match: float) -> tuple[CandidateSet, ...]:
    """Per-source candidate targets within d_match, sorted by id."""
    if d_match <= 0:
        raise ValueError(f"d_match must be positive, got {d_match}")
    if len(H) == 0:
        return tuple(CandidateSet(g_id, ()) for g_id in G.ids)
    h_ids = H.ids
    tree = cKDTree(H.positions())
    out = []
    for lm in G.landmarks:
        idx = tree.query_ball_point((lm.x, lm.y), r=float(d_match))
        out.append(CandidateSet(lm.id, tuple(sorted(h_ids[i] for i in idx))))
    return tuple(out)


def _best_candidate(
    G: SlideGraph,
    H: SlideGraph,
    cand: CandidateSet,
    n_neighbors: int,
) -> Optional[tuple[float, str, str]]:
    """Lowest-energy candidate for one source landmark, or None.

    Ties at exactly equal energy go to the smallest h_id, keeping the result
    independent of input order.
    """
    g_nbrs = G.neighbor_ids(cand.g_id)
    if not g_nbrs or not cand.candidates:
        return None
    g_i = G.coords(cand.g_id)
    gn = np.array([G.coords(i) for i in g_nbrs], dtype=float)
    best: Optional[tuple[float, str]] = None
    for h_id in cand.candidates:
        h_nbrs = H.neighbor_ids(h_id)
        if not h_nbrs:
            continue
        hn = np.array([H.coords(i) for i in h_nbrs], dtype=float)
        energy = assignment_energy(gn, hn, g_i, H.coords(h_id), n_neighbors)
        if not math.isfinite(energy):
            continue
        if best is None or (energy, h_id) < best:
            best = (energy, h_id)
    if best is None:
        return None
    return (best[0], cand.g_id, best[1])


def match_directed(
    G: SlideGraph,
    H: SlideGraph,
    params: MatchParams,
    threads: int = 1,
) -> MatchSet:
    """One-way matching of G's landmarks onto H.

    Every source landmark with at least one candidate and one neighbour gets
    the candidate minimising the assignment energy; conflicts (one target
    claimed by several sources) keep only the lowest-energy claim, ties
    broken lexicographically by (g_id, h_id). When ``energy_cap`` is set,
    surviving pairs above the cap are dropped. The result is injective both
    ways. Landmarks with no candidates or no neighbours are left unmatched.

    The per-source subproblems are independent; ``threads`` > 1 evaluates
    them in a thread pool. The output is identical for any thread count.
    """
    cands = candidate_sets(G, H, params.d_match)
    n = params.n_neighbors
    if threads > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            picks = list(pool.map(lambda c: _best_candidate(G, H, c, n), cands))
    else:
        picks = [_best_candidate(G, H, c, n) for c in cands]

    claims: dict[str, tuple[float, str, str]] = {}
    for pick in picks:
        if pick is None:
            continue
        h_id = pick[2]
        held = claims.get(h_id)
        if held is None or pick < held:
            claims[h_id] = pick
    kept = sorted(claims.values(), key=lambda t: t[1])
    if params.energy_cap is not None:
        kept = [t for t in kept if t[0] <= params.energy_cap]
    pairs = tuple(MatchPair(g_id, h_id, energy) for energy, g_id, h_id in kept)
    return MatchSet(
        source_slide=G.slide_id,
        target_slide=H.slide_id,
        direction="directed",
        pairs=pairs,
    )


def match_bidirectional(
    G: SlideGraph,
    H: SlideGraph,
    params: MatchParams,
    threads: int = 1,
) -> MatchSet:
    """Associations found consistently in both matching directions.

    A pair (g, h) survives exactly when h is g's match in the G-to-H run and
    g is h's match in the H-to-G run; its recorded energy is the G-to-H one.
    """
    forward = match_directed(G, H, params, threads=threads)
    backward = match_directed(H, G, params, threads=threads)
    reverse = {(p.h_id, p.g_id) for p in backward.pairs}
    pairs = tuple(p for p in forward.pairs if (p.g_id, p.h_id) in reverse)
    return MatchSet(
        source_slide=G.slide_id,
        target_slide=H.slide_id,
        direction="bidirectional",
        pairs=pairs,
    )


def resolve_d_sub(
    params: MatchParams,
    landmarks_a: Iterable[Landmark],
    landmarks_b: Iterable[Landmark],
) -> float:
    """Concrete subgraph distance for a slide pair.

    With d_sub="auto" each slide gets the smallest distance covering
    ``subgraph_coverage`` of its landmarks with N+1 neighbours, and the pair
    uses the larger of the two so both sides satisfy the coverage policy.
    """
    if not isinstance(params.d_sub, str):
        return float(params.d_sub)
    da = auto_d_sub(landmarks_a, params.n_neighbors, params.subgraph_coverage)
    db = auto_d_sub(landmarks_b, params.n_neighbors, params.subgraph_coverage)
    return max(da, db)


def match_landmarks(
    landmarks_a: Iterable[Landmark],
    landmarks_b: Iterable[Landmark],
    params: MatchParams,
    threads: int = 1,
    slide_a: Optional[str] = None,
    slide_b: Optional[str] = None,
) -> MatchSet:
    """Convenience wrapper: build both graphs and match bidirectionally."""
    lms_a = tuple(landmarks_a)
    lms_b = tuple(landmarks_b)
    d_sub = resolve_d_sub(params, lms_a, lms_b)
    G = build_slide_graph(lms_a, d_sub, slide_id=slide_a)
    H = build_slide_graph(lms_b, d_sub, slide_id=slide_b)
    return match_bidirectional(G, H, params, threads=threads)


def chain_matches(pairwise: Sequence[MatchSet]) -> MatchChain:
    """Chain pairwise bidirectional matchings into per-landmark rows.

    ``pairwise`` must connect consecutive slides in order (set k links slide
    k to slide k+1). Rows are the maximal paths through the matchings; rows
    that do not span the whole stack are retained and can be filtered with
    ``MatchChain.complete_rows``.
    """
    if not pairwise:
        raise ValueError("need at least one pairwise match set")
    slide_ids = [pairwise[0].source_slide]
    for ms in pairwise:
        if ms.source_slide != slide_ids[-1]:
            raise ValueError(
                f"match sets out of order: expected source {slide_ids[-1]!r}, "
                f"got {ms.source_slide!r}"
            )
        if ms.target_slide in slide_ids:
            raise ValueError(f"slide {ms.target_slide!r} repeats in the stack")
        slide_ids.append(ms.target_slide)

    forward = [ms.mapping() for ms in pairwise]
    matched_ahead: list[set[str]] = [set(m.values()) for m in forward]

    rows = []
    n_slides = len(slide_ids)
    for start in range(n_slides - 1):
        # chains starting here: landmarks not reached from the previous slide
        starters = set(forward[start])
        if start > 0:
            starters -= matched_ahead[start - 1]
        for g_id in sorted(starters):
            ids: list[Optional[str]] = [None] * n_slides
            ids[start] = g_id
            current = g_id
            pos = start
            while pos < n_slides - 1 and current in forward[pos]:
                current = forward[pos][current]
                pos += 1
                ids[pos] = current
            rows.append(ChainRow(tuple(ids)))
    return MatchChain(slide_ids=tuple(slide_ids), rows=tuple(rows))
