"""Feature extraction over matched-landmark neighbourhoods and PCA ranking.

Each matched landmark is analysed in a square window centred on its own
centroid in every slide, so features never inherit residual rigid
registration error. Two kinds of features are produced:

* per-slide features (cell densities inside and outside the landmark
  outline, mean cell distance to the outline), concatenated across slides
  through the match chain;
* cross-slide features combining cell populations from different slides
  after translating each window to a common local frame (window centre at
  the origin).

The resulting matrix feeds an unsupervised ranking score: the projection of
the standardized features onto their first principal component, min-max
normalized to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import shapely
from scipy.spatial.distance import cdist
from shapely.geometry import Polygon, box

from .model import CellMap, Landmark, MatchChain

__all__ = [
    "NeighbourhoodSpec",
    "Window",
    "RegionDensity",
    "FeatureMatrix",
    "RankScore",
    "density_inside",
    "density_outside",
    "mean_distance_to_glomerulus",
    "mean_pairwise_distance",
    "build_feature_matrix",
    "pca_rank",
    "feature_columns",
]


@dataclass(frozen=True)
class NeighbourhoodSpec:
    """Square analysis window, given by its side length in um."""

    size: float = 258.0

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError(f"window size must be positive, got {self.size}")

    def window_at(self, center: tuple[float, float]) -> "Window":
        return Window(center=(float(center[0]), float(center[1])), side=self.size)


@dataclass(frozen=True)
class Window:
    """A concrete axis-aligned square window (closed on its boundary)."""

    center: tuple[float, float]
    side: float

    @property
    def area(self) -> float:
        return self.side * self.side

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        half = self.side / 2.0
        cx, cy = self.center
        return (np.abs(pts[:, 0] - cx) <= half) & (np.abs(pts[:, 1] - cy) <= half)

    def shapely_box(self):
        half = self.side / 2.0
        cx, cy = self.center
        return box(cx - half, cy - half, cx + half, cy + half)


@dataclass(frozen=True)
class RegionDensity:
    """A cell count over a region area, kept separate so the counting
    identity (inside count + outside count = window count) stays exact."""

    count: int
    area_um2: float

    @property
    def density(self) -> float:
        """Cells per um^2; NaN when the region has zero area."""
        if self.area_um2 <= 0.0:
            return math.nan
        return self.count / self.area_um2


def _window_points(cells: CellMap, window: Window) -> np.ndarray:
    pts = cells.points
    if pts.shape[0] == 0:
        return pts
    return pts[window.contains(pts)]


def _require_boundary(glom: Landmark) -> Polygon:
    if glom.boundary is None:
        raise ValueError(
            f"landmark {glom.id!r} has no boundary; density and distance "
            "features need the outline polygon"
        )
    return glom.polygon()


def density_inside(cells: CellMap, glom: Landmark, spec: NeighbourhoodSpec) -> RegionDensity:
    """Cell density strictly inside outline-and-window intersection."""
    poly = _require_boundary(glom)
    window = spec.window_at(glom.xy)
    region = poly.intersection(window.shapely_box())
    if region.is_empty or region.area <= 0.0:
        raise ValueError(f"landmark {glom.id!r}: outline does not overlap the window")
    pts = _window_points(cells, window)
    count = 0
    if pts.shape[0]:
        count = int(np.count_nonzero(shapely.contains_properly(region, shapely.points(pts))))
    return RegionDensity(count=count, area_um2=float(region.area))


def density_outside(cells: CellMap, glom: Landmark, spec: NeighbourhoodSpec) -> RegionDensity:
    """Cell density over the window minus the outline.

    Cells exactly on the outline count as outside, so the inside and outside
    counts always partition the in-window cells.
    """
    poly = _require_boundary(glom)
    window = spec.window_at(glom.xy)
    region = poly.intersection(window.shapely_box())
    pts = _window_points(cells, window)
    inside = 0
    if pts.shape[0] and not region.is_empty:
        inside = int(np.count_nonzero(shapely.contains_properly(region, shapely.points(pts))))
    return RegionDensity(
        count=int(pts.shape[0]) - inside,
        area_um2=float(window.area - region.area),
    )


def mean_distance_to_glomerulus(
    cells: CellMap, glom: Landmark, spec: NeighbourhoodSpec
) -> Optional[float]:
    """Mean distance from in-window cells outside the outline to its nearest
    boundary point. None when no cell contributes."""
    poly = _require_boundary(glom)
    window = spec.window_at(glom.xy)
    pts = _window_points(cells, window)
    if pts.shape[0] == 0:
        return None
    outside = ~shapely.contains_properly(poly, shapely.points(pts))
    pts = pts[outside]
    if pts.shape[0] == 0:
        return None
    dists = shapely.distance(shapely.points(pts), poly.exterior)
    return float(np.mean(dists))


def mean_pairwise_distance(
    cells_a: CellMap, cells_b: CellMap, window: Window
) -> Optional[float]:
    """Mean distance from each in-window a-cell to its nearest in-window
    b-cell. None when either restriction is empty."""
    pts_a = _window_points(cells_a, window)
    pts_b = _window_points(cells_b, window)
    if pts_a.shape[0] == 0 or pts_b.shape[0] == 0:
        return None
    return float(np.mean(np.min(cdist(pts_a, pts_b), axis=1)))


def feature_columns(home_types: Sequence[str], shared_type: str) -> tuple[str, ...]:
    """Canonical column names, in their fixed order.

    For each slide's home cell type: density inside, density outside and
    distance to the outline (3 blocks of len(home_types) columns). Then the
    cross-slide block: mean shared-type density inside and outside over the
    slides, distance from each home type to the pooled shared cells, and the
    mean shared-to-outline distance over the slides. Repeated home types get
    a slide-ordinal suffix to keep names unique.
    """
    shared = shared_type.lower()
    homes = [t.lower() for t in home_types]
    seen: dict[str, int] = {}
    tags = []
    for k, t in enumerate(homes):
        if homes.count(t) > 1:
            tags.append(f"{t}_s{k + 1}")
        else:
            tags.append(t)
        seen[t] = seen.get(t, 0) + 1
    cols = [f"density_inside_{t}" for t in tags]
    cols += [f"density_outside_{t}" for t in tags]
    cols += [f"dist_to_glom_{t}" for t in tags]
    cols += [f"density_inside_{shared}_mean", f"density_outside_{shared}_mean"]
    cols += [f"dist_{t}_to_{shared}" for t in tags]
    cols += [f"dist_{shared}_to_glom_mean"]
    return tuple(cols)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Matched-landmark rows by named feature columns; NaN marks undefined
    entries (rows containing any are excluded from the PCA score)."""

    row_ids: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray  # (n_rows, n_cols) float64

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float).reshape(len(self.row_ids), -1)
        if vals.shape[1] != len(self.columns):
            raise ValueError(
                f"value shape {vals.shape} does not match {len(self.columns)} columns"
            )
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("feature column names must be unique")
        if len(set(self.row_ids)) != len(self.row_ids):
            raise ValueError("feature row ids must be unique")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def complete_mask(self) -> np.ndarray:
        return ~np.isnan(self.values).any(axis=1)


def _as_type_maps(
    cellmaps: Mapping[str, Mapping[str, CellMap] | Iterable[CellMap]],
) -> dict[str, dict[str, CellMap]]:
    out: dict[str, dict[str, CellMap]] = {}
    for slide_id, maps in cellmaps.items():
        if isinstance(maps, Mapping):
            out[slide_id] = dict(maps)
        else:
            out[slide_id] = {cm.cell_type: cm for cm in maps}
    return out


def _as_landmark_maps(
    gloms: Mapping[str, Mapping[str, Landmark] | Iterable[Landmark]],
) -> dict[str, dict[str, Landmark]]:
    out: dict[str, dict[str, Landmark]] = {}
    for slide_id, lms in gloms.items():
        if isinstance(lms, Mapping):
            out[slide_id] = dict(lms)
        else:
            out[slide_id] = {lm.id: lm for lm in lms}
    return out


def _offset_points(cells: CellMap, window: Window) -> np.ndarray:
    pts = _window_points(cells, window)
    return pts - np.asarray(window.center, dtype=float)


def build_feature_matrix(
    chain: MatchChain,
    cellmaps: Mapping[str, Mapping[str, CellMap] | Iterable[CellMap]],
    gloms: Mapping[str, Mapping[str, Landmark] | Iterable[Landmark]],
    spec: NeighbourhoodSpec = NeighbourhoodSpec(),
    shared_type: str = "CD3",
) -> FeatureMatrix:
    """Assemble the per-chain feature matrix over a slide stack.

    Every slide must provide a cell map for ``shared_type`` plus exactly one
    other cell type (its home type, e.g. the macrophage subtype highlighted
    by that slide's staining). Only chain rows spanning all slides are used.
    Distance features with no contributing cells are NaN; such rows are
    reported and skipped by :func:`pca_rank`.
    """
    type_maps = _as_type_maps(cellmaps)
    lm_maps = _as_landmark_maps(gloms)

    home_types: list[str] = []
    for slide_id in chain.slide_ids:
        if slide_id not in type_maps:
            raise ValueError(f"no cell maps for slide {slide_id!r}")
        if slide_id not in lm_maps:
            raise ValueError(f"no landmarks for slide {slide_id!r}")
        types = set(type_maps[slide_id])
        if shared_type not in types:
            raise ValueError(f"slide {slide_id!r} is missing cell type {shared_type!r}")
        others = sorted(types - {shared_type})
        if len(others) != 1:
            raise ValueError(
                f"slide {slide_id!r} must have exactly one cell type besides "
                f"{shared_type!r}, found {others or 'none'}"
            )
        home_types.append(others[0])

    columns = feature_columns(home_types, shared_type)
    rows = chain.complete_rows()
    values = np.empty((len(rows), len(columns)), dtype=float)
    spec_origin = spec.window_at((0.0, 0.0))

    for r, row in enumerate(rows):
        homes_in: list[float] = []
        homes_out: list[float] = []
        homes_glom: list[float] = []
        shared_in: list[float] = []
        shared_out: list[float] = []
        shared_glom: list[Optional[float]] = []
        home_offsets: list[np.ndarray] = []
        pooled_shared: list[np.ndarray] = []

        for k, slide_id in enumerate(chain.slide_ids):
            lm_id = row.ids[k]
            assert lm_id is not None
            try:
                lm = lm_maps[slide_id][lm_id]
            except KeyError:
                raise ValueError(
                    f"chain references unknown landmark {lm_id!r} in slide {slide_id!r}"
                ) from None
            window = spec.window_at(lm.xy)
            home = type_maps[slide_id][home_types[k]]
            shared = type_maps[slide_id][shared_type]

            homes_in.append(density_inside(home, lm, spec).density)
            homes_out.append(density_outside(home, lm, spec).density)
            d = mean_distance_to_glomerulus(home, lm, spec)
            homes_glom.append(math.nan if d is None else d)
            shared_in.append(density_inside(shared, lm, spec).density)
            shared_out.append(density_outside(shared, lm, spec).density)
            shared_glom.append(mean_distance_to_glomerulus(shared, lm, spec))
            home_offsets.append(_offset_points(home, window))
            pooled_shared.append(_offset_points(shared, window))

        pool = np.concatenate(pooled_shared, axis=0)
        pool_map = CellMap(slide_id="", cell_type=shared_type, points=pool)
        homes_shared: list[float] = []
        for k in range(len(chain.slide_ids)):
            a_map = CellMap(slide_id="", cell_type=home_types[k], points=home_offsets[k])
            d = mean_pairwise_distance(a_map, pool_map, spec_origin)
            homes_shared.append(math.nan if d is None else d)

        defined_sg = [v for v in shared_glom if v is not None]
        shared_glom_mean = float(np.mean(defined_sg)) if defined_sg else math.nan

        values[r, :] = (
            homes_in
            + homes_out
            + homes_glom
            + [float(np.mean(shared_in)), float(np.mean(shared_out))]
            + homes_shared
            + [shared_glom_mean]
        )

    return FeatureMatrix(
        row_ids=tuple(row.key for row in rows),
        columns=columns,
        values=values,
    )


@dataclass(frozen=True, eq=False)
class RankScore:
    """First-principal-component ranking over the feature matrix rows."""

    row_ids: tuple[str, ...]
    scores: np.ndarray  # in [0, 1], aligned with row_ids
    loadings: dict[str, float]
    explained_variance: float
    dropped_columns: tuple[str, ...]
    excluded_rows: tuple[str, ...]


def pca_rank(matrix: FeatureMatrix) -> RankScore:
    """Score every complete row by its leading principal component.

    Columns are standardized to zero mean and unit variance (population
    convention); zero-variance columns are dropped and reported. The score
    is the projection onto the leading eigenvector of the covariance of the
    standardized features, with the sign fixed so the largest-magnitude
    loading is positive, then min-max normalized to [0, 1]. Rows with any
    undefined feature are excluded and reported.
    """
    complete = matrix.complete_mask()
    excluded = tuple(rid for rid, ok in zip(matrix.row_ids, complete) if not ok)
    kept_ids = tuple(rid for rid, ok in zip(matrix.row_ids, complete) if ok)
    data = matrix.values[complete]
    if data.shape[0] < 2:
        raise ValueError(
            f"PCA ranking needs at least 2 complete rows, got {data.shape[0]}"
        )

    std = data.std(axis=0)
    usable = std > 0.0
    dropped = tuple(c for c, ok in zip(matrix.columns, usable) if not ok)
    kept_cols = tuple(c for c, ok in zip(matrix.columns, usable) if ok)
    if len(kept_cols) < 2:
        raise ValueError(
            f"PCA ranking needs at least 2 varying columns, got {len(kept_cols)}"
        )
    centered = (data[:, usable] - data[:, usable].mean(axis=0)) / std[usable]

    cov = centered.T @ centered / centered.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    leading = eigvecs[:, -1]
    pivot = int(np.argmax(np.abs(leading)))
    if leading[pivot] < 0:
        leading = -leading
    explained = float(eigvals[-1] / eigvals.sum())

    raw = centered @ leading
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= lo:
        raise ValueError("ranking is degenerate: all rows project identically")
    scores = (raw - lo) / (hi - lo)
    scores.setflags(write=False)
    return RankScore(
        row_ids=kept_ids,
        scores=scores,
        loadings={c: float(w) for c, w in zip(kept_cols, leading)},
        explained_variance=explained,
        dropped_columns=dropped,
        excluded_rows=excluded,
    )
