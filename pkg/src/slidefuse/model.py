"""Domain model shared by the whole pipeline.

All geometry lives in micrometres (um) in a single registered frame. Pixel
inputs are converted to um at load time (see :mod:`slidefuse.io`), so every
distance computed downstream is unit-consistent across scanners and
magnifications.

The types here are immutable after construction and safe to share between
concurrent readers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional

import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import Point, Polygon

__all__ = [
    "Landmark",
    "SlideGraph",
    "MatchPair",
    "MatchSet",
    "ChainRow",
    "MatchChain",
    "CellMap",
    "GroundTruthMatches",
    "build_slide_graph",
    "auto_d_sub",
]


@dataclass(frozen=True)
class Landmark:
    """A point landmark (one glomerulus slice) in the registered frame.

    Parameters
    ----------
    id : str
        Identifier, unique within its slide.
    x, y : float
        Centroid position in um.
    slide_id : str
        Slide the landmark belongs to.
    boundary : tuple of (x, y), optional
        Outline polygon in um. When present it must be a simple closed
        polygon with at least 3 vertices that contains (or touches) the
        centroid. Operations that need an outline (densities, boundary
        distances) fail explicitly when it is absent.
    """

    id: str
    x: float
    y: float
    slide_id: str = ""
    boundary: Optional[tuple[tuple[float, float], ...]] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("landmark id must be a nonempty string")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"landmark {self.id!r}: coordinates must be finite")
        if self.boundary is not None:
            pts = tuple((float(px), float(py)) for px, py in self.boundary)
            object.__setattr__(self, "boundary", pts)
            self._validate_boundary(pts)

    def _validate_boundary(self, pts: tuple[tuple[float, float], ...]) -> None:
        if len(pts) < 3:
            raise ValueError(f"landmark {self.id!r}: boundary needs >= 3 vertices")
        if not all(math.isfinite(px) and math.isfinite(py) for px, py in pts):
            raise ValueError(f"landmark {self.id!r}: boundary vertices must be finite")
        poly = Polygon(pts)
        if (not poly.is_valid) or poly.area <= 0.0:
            raise ValueError(f"landmark {self.id!r}: boundary is not a simple polygon")
        if not poly.covers(Point(self.x, self.y)):
            raise ValueError(
                f"landmark {self.id!r}: boundary does not contain the centroid"
            )

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)

    def polygon(self) -> Polygon:
        """Boundary as a shapely polygon. Raises when no boundary is stored."""
        if self.boundary is None:
            raise ValueError(f"landmark {self.id!r} has no boundary polygon")
        return Polygon(self.boundary)


@dataclass(frozen=True, eq=False)
class SlideGraph:
    """All landmarks of one slide plus its distance-bounded edge structure.

    Two landmarks are connected exactly when their Euclidean distance is
    <= ``d_sub``. The neighbourhood of a landmark (its connected vertices)
    is the local geometric signature used by the matcher.

    Built via :func:`build_slide_graph`; treat instances as read-only.
    """

    slide_id: str
    d_sub: float
    landmarks: tuple[Landmark, ...]  # sorted by id
    _by_id: dict[str, Landmark] = field(repr=False)
    _neighbors: dict[str, tuple[str, ...]] = field(repr=False)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(lm.id for lm in self.landmarks)

    def __len__(self) -> int:
        return len(self.landmarks)

    def landmark(self, landmark_id: str) -> Landmark:
        return self._by_id[landmark_id]

    def coords(self, landmark_id: str) -> tuple[float, float]:
        lm = self._by_id[landmark_id]
        return (lm.x, lm.y)

    def neighbor_ids(self, landmark_id: str) -> tuple[str, ...]:
        """Ids of landmarks within d_sub of the given one (itself excluded)."""
        return self._neighbors[landmark_id]

    def positions(self) -> np.ndarray:
        """(n, 2) array of centroids, ordered like ``landmarks``."""
        return np.array([(lm.x, lm.y) for lm in self.landmarks], dtype=float).reshape(-1, 2)

    @property
    def edges(self) -> frozenset[tuple[str, str]]:
        """Unordered edge set as (a, b) tuples with a < b."""
        out = set()
        for a, nbrs in self._neighbors.items():
            for b in nbrs:
                out.add((a, b) if a < b else (b, a))
        return frozenset(out)


def build_slide_graph(
    landmarks: Iterable[Landmark],
    d_sub: float,
    slide_id: Optional[str] = None,
) -> SlideGraph:
    """Build the d_sub-bounded graph over a slide's landmarks.

    The edge set is exactly the set of unordered pairs at Euclidean distance
    <= ``d_sub``; there are no self edges. The result is independent of the
    input iteration order.
    """
    if d_sub <= 0:
        raise ValueError(f"d_sub must be positive, got {d_sub}")
    lms = sorted(landmarks, key=lambda lm: lm.id)
    by_id: dict[str, Landmark] = {}
    for lm in lms:
        if lm.id in by_id:
            raise ValueError(f"duplicate landmark id {lm.id!r} in slide")
        by_id[lm.id] = lm
    slides = {lm.slide_id for lm in lms if lm.slide_id}
    if len(slides) > 1:
        raise ValueError(f"landmarks from multiple slides: {sorted(slides)}")
    if slide_id is None:
        slide_id = slides.pop() if slides else ""

    nbr_sets: dict[str, set[str]] = {lm.id: set() for lm in lms}
    if len(lms) >= 2:
        coords = np.array([(lm.x, lm.y) for lm in lms], dtype=float)
        tree = cKDTree(coords)
        for i, j in tree.query_pairs(r=float(d_sub)):
            nbr_sets[lms[i].id].add(lms[j].id)
            nbr_sets[lms[j].id].add(lms[i].id)
    neighbors = {k: tuple(sorted(v)) for k, v in nbr_sets.items()}
    return SlideGraph(
        slide_id=slide_id,
        d_sub=float(d_sub),
        landmarks=tuple(lms),
        _by_id=by_id,
        _neighbors=neighbors,
    )


def auto_d_sub(
    landmarks: Iterable[Landmark],
    n_neighbors: int,
    coverage: float = 0.9,
) -> float:
    """Smallest edge length giving most landmarks at least N+1 neighbours.

    Returns the smallest d such that at least ``coverage`` of the landmarks
    have >= ``n_neighbors + 1`` neighbours within d, computed exactly from
    the sorted (N+1)-th nearest-neighbour distances. A coverage of 0 still
    returns the minimum positive (N+1)-NN distance, never 0.
    """
    if n_neighbors < 1:
        raise ValueError(f"n_neighbors must be >= 1, got {n_neighbors}")
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage must be in [0, 1], got {coverage}")
    lms = sorted(landmarks, key=lambda lm: lm.id)
    n = len(lms)
    if n <= n_neighbors + 1:
        raise ValueError(
            f"need more than {n_neighbors + 1} landmarks to size subgraphs, got {n}"
        )
    coords = np.array([(lm.x, lm.y) for lm in lms], dtype=float)
    tree = cKDTree(coords)
    # column 0 is the point itself; column N+1 is the (N+1)-th neighbour
    dists, _ = tree.query(coords, k=n_neighbors + 2)
    knn = np.sort(dists[:, n_neighbors + 1])
    # small slack so coverage * n landing on an integer is not pushed up by
    # float rounding (e.g. 0.7 * 10 == 7.000000000000001)
    k = max(1, min(n, math.ceil(coverage * n - 1e-9)))
    return float(knn[k - 1])


Direction = Literal["directed", "bidirectional"]


@dataclass(frozen=True)
class MatchPair:
    """One landmark association with its assignment energy (dimensionless)."""

    g_id: str
    h_id: str
    energy: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "energy", float(self.energy))
        if not (math.isfinite(self.energy) and self.energy >= 0.0):
            raise ValueError(
                f"pair ({self.g_id!r}, {self.h_id!r}): energy must be finite and >= 0"
            )


@dataclass(frozen=True)
class MatchSet:
    """Landmark associations between two slides.

    ``direction`` is "directed" for a one-way matching from ``source_slide``
    to ``target_slide`` and "bidirectional" for the consistency-filtered
    intersection of both directions (energies are then the source-to-target
    energies). Pairs are injective on both sides and sorted by g_id.
    """

    source_slide: str
    target_slide: str
    direction: Direction
    pairs: tuple[MatchPair, ...]

    def __post_init__(self) -> None:
        if self.direction not in ("directed", "bidirectional"):
            raise ValueError(f"unknown direction {self.direction!r}")
        pairs = tuple(sorted(self.pairs, key=lambda p: (p.g_id, p.h_id)))
        object.__setattr__(self, "pairs", pairs)
        g_ids = [p.g_id for p in pairs]
        h_ids = [p.h_id for p in pairs]
        if len(set(g_ids)) != len(g_ids) or len(set(h_ids)) != len(h_ids):
            raise ValueError("match set is not injective on both sides")

    def __len__(self) -> int:
        return len(self.pairs)

    def mapping(self) -> dict[str, str]:
        """g_id -> h_id."""
        return {p.g_id: p.h_id for p in self.pairs}

    def pair_ids(self) -> frozenset[tuple[str, str]]:
        return frozenset((p.g_id, p.h_id) for p in self.pairs)


@dataclass(frozen=True)
class ChainRow:
    """One landmark tracked across an ordered slide stack.

    ``ids`` has one slot per slide; ``None`` marks slides where the chain is
    absent, which may only happen at the ends (chains are paths through
    consecutive pairwise matchings, so no interior gaps are possible).
    """

    ids: tuple[Optional[str], ...]

    def __post_init__(self) -> None:
        present = [i for i, v in enumerate(self.ids) if v is not None]
        if len(present) < 2:
            raise ValueError("a chain row needs at least two linked landmarks")
        if present != list(range(present[0], present[-1] + 1)):
            raise ValueError(f"chain row has interior gaps: {self.ids}")

    @property
    def complete(self) -> bool:
        return all(v is not None for v in self.ids)

    @property
    def key(self) -> str:
        """Stable row identifier: slot ids joined by '|', blanks for gaps."""
        return "|".join(v if v is not None else "" for v in self.ids)


@dataclass(frozen=True)
class MatchChain:
    """Rows of landmark ids chained across an ordered list of slides."""

    slide_ids: tuple[str, ...]
    rows: tuple[ChainRow, ...]

    def __post_init__(self) -> None:
        if len(self.slide_ids) < 2:
            raise ValueError("a chain needs at least two slides")
        for row in self.rows:
            if len(row.ids) != len(self.slide_ids):
                raise ValueError(
                    f"row {row.ids} does not span the {len(self.slide_ids)} slides"
                )

    def complete_rows(self) -> tuple[ChainRow, ...]:
        return tuple(r for r in self.rows if r.complete)

    def partial_rows(self) -> tuple[ChainRow, ...]:
        return tuple(r for r in self.rows if not r.complete)


@dataclass(frozen=True, eq=False)
class CellMap:
    """Centroids of one segmented cell type on one slide, in um."""

    slide_id: str
    cell_type: str
    points: np.ndarray  # (n, 2) float64

    def __post_init__(self) -> None:
        if not self.cell_type:
            raise ValueError("cell_type must be nonempty")
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError(f"cell map {self.cell_type!r}: points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True, eq=False)
class GroundTruthMatches:
    """Manually curated association groups across two or more slides.

    Each row maps slide id -> landmark id for the slides where the structure
    was annotated; unpaired landmarks appear as single-entry rows. A landmark
    id occurs in at most one row per slide.
    """

    slide_ids: tuple[str, ...]
    rows: tuple[dict[str, str], ...]

    def __post_init__(self) -> None:
        if len(self.slide_ids) < 2:
            raise ValueError("ground truth needs at least two slides")
        seen: dict[str, set[str]] = {s: set() for s in self.slide_ids}
        for row in self.rows:
            if not row:
                raise ValueError("empty ground-truth row")
            for slide, lm_id in row.items():
                if slide not in seen:
                    raise ValueError(f"row references unknown slide {slide!r}")
                if lm_id in seen[slide]:
                    raise ValueError(
                        f"landmark {lm_id!r} occurs twice in slide {slide!r}"
                    )
                seen[slide].add(lm_id)

    def universe(self, slide_id: str) -> frozenset[str]:
        """All landmark ids the truth knows about for one slide."""
        self._check_slide(slide_id)
        return frozenset(row[slide_id] for row in self.rows if slide_id in row)

    def pairs(self, slide_a: str, slide_b: str) -> frozenset[tuple[str, str]]:
        """True associations between two slides, as (id_in_a, id_in_b)."""
        self._check_slide(slide_a)
        self._check_slide(slide_b)
        return frozenset(
            (row[slide_a], row[slide_b])
            for row in self.rows
            if slide_a in row and slide_b in row
        )

    def unpaired_ids(self, slide_a: str, slide_b: str) -> tuple[frozenset[str], frozenset[str]]:
        """Landmarks of each slide with no true partner in the other slide."""
        self._check_slide(slide_a)
        self._check_slide(slide_b)
        only_a = frozenset(
            row[slide_a] for row in self.rows if slide_a in row and slide_b not in row
        )
        only_b = frozenset(
            row[slide_b] for row in self.rows if slide_b in row and slide_a not in row
        )
        return only_a, only_b

    def _check_slide(self, slide_id: str) -> None:
        if slide_id not in self.slide_ids:
            raise ValueError(
                f"slide {slide_id!r} not covered by ground truth {self.slide_ids}"
            )
