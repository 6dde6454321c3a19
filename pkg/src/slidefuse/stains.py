"""Colour deconvolution of RGB tiles into stain channels and cell centroids.

Brightfield RGB intensities are converted to optical densities (Beer-Lambert,
log base 10), unmixed with a predetermined stain matrix into per-stain
concentration channels, and the channels of interest are thresholded into
8-connected components whose centroids become cell positions in the
registered frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .model import CellMap

__all__ = [
    "StainMatrix",
    "RgbTile",
    "UnmixResult",
    "optical_density",
    "unmix",
    "extract_cells",
]

_CONNECT_8 = np.ones((3, 3), dtype=int)


@dataclass(frozen=True, eq=False)
class StainMatrix:
    """Three labeled stain vectors in optical-density space.

    Each row is one stain's OD proportions per RGB channel; rows are
    normalized to unit Euclidean norm at construction and must be
    nonnegative. The matrix must be invertible; its condition number is
    exposed so ill-conditioned stain combinations can be flagged.
    """

    labels: tuple[str, str, str]
    od_vectors: np.ndarray  # (3, 3), rows are stains

    def __post_init__(self) -> None:
        if len(self.labels) != 3 or len(set(self.labels)) != 3:
            raise ValueError("need exactly 3 distinct stain labels")
        vectors = np.asarray(self.od_vectors, dtype=float)
        if vectors.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("stain vectors must be finite")
        if np.any(vectors < 0):
            raise ValueError("stain vectors must be nonnegative")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise ValueError("stain vectors must be nonzero")
        vectors = vectors / norms[:, None]
        if abs(np.linalg.det(vectors)) < 1e-12:
            raise ValueError("stain matrix is singular; vectors are not independent")
        vectors.setflags(write=False)
        object.__setattr__(self, "od_vectors", vectors)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.od_vectors))

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.od_vectors)

    def channel(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValueError(
                f"unknown stain {label!r}; available: {list(self.labels)}"
            ) from None


@dataclass(frozen=True, eq=False)
class RgbTile:
    """An 8-bit RGB tile with its position in the registered frame.

    ``origin`` is the um position of the tile's top-left corner; pixel (r, c)
    is centred at origin + (c + 0.5, r + 0.5) * resolution.
    """

    pixels: np.ndarray  # (h, w, 3) uint8
    resolution_um_per_px: float
    origin: tuple[float, float] = (0.0, 0.0)
    slide_id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"tile must be (h, w, 3), got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"tile samples must be uint8, got {px.dtype}")
        if self.resolution_um_per_px <= 0:
            raise ValueError("resolution must be positive")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


def optical_density(
    tile: RgbTile | np.ndarray,
    background: Sequence[float] = (255.0, 255.0, 255.0),
) -> np.ndarray:
    """Per-pixel optical densities, OD_c = -log10(max(I_c, 1) / I0_c).

    Intensities are clamped at 1 before the log so saturated black pixels
    stay finite. OD is nonnegative wherever I <= I0. Accepts an RgbTile or a
    raw (h, w, 3) intensity array on the same 0..255 scale (the array form
    permits quantization-free synthetic input).
    """
    i0 = np.asarray(background, dtype=float).reshape(3)
    if np.any(i0 <= 0):
        raise ValueError("background intensities must be positive")
    raw = tile.pixels if isinstance(tile, RgbTile) else np.asarray(tile)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"intensity array must be (h, w, 3), got {raw.shape}")
    intensities = np.maximum(raw.astype(float), 1.0)
    return -np.log10(intensities / i0)


@dataclass(frozen=True, eq=False)
class UnmixResult:
    """Stain concentrations plus the fraction of clamped negative values."""

    concentrations: np.ndarray  # (h, w, 3), channel order = StainMatrix.labels
    clamp_fraction: float


def unmix(od_tile: np.ndarray, matrix: StainMatrix) -> UnmixResult:
    """Linear unmixing of an OD tile into per-stain concentrations.

    Solves od = c @ M per pixel with M the stain matrix (rows are stains).
    Negative concentrations are clamped to zero and their fraction reported.
    """
    od = np.asarray(od_tile, dtype=float)
    if od.ndim != 3 or od.shape[2] != 3:
        raise ValueError(f"OD tile must be (h, w, 3), got {od.shape}")
    raw = od @ matrix.inverse()
    negative = raw < 0
    clamp_fraction = float(np.count_nonzero(negative)) / raw.size if raw.size else 0.0
    return UnmixResult(
        concentrations=np.where(negative, 0.0, raw), clamp_fraction=clamp_fraction
    )


def extract_cells(
    concentrations: np.ndarray,
    matrix: StainMatrix,
    channel: str,
    threshold: float,
    min_area_um2: float,
    max_area_um2: float,
    resolution_um_per_px: float,
    origin: tuple[float, float] = (0.0, 0.0),
    slide_id: str = "",
) -> CellMap:
    """Threshold one concentration channel into cell centroids.

    Pixels at or above ``threshold`` are grouped into 8-connected components;
    components with area outside [min_area_um2, max_area_um2] are dropped and
    the survivors' pixel centroids are mapped to um via the tile origin and
    resolution (pixel-centre convention).
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if min_area_um2 < 0 or max_area_um2 < min_area_um2:
        raise ValueError("need 0 <= min_area_um2 <= max_area_um2")
    if resolution_um_per_px <= 0:
        raise ValueError("resolution must be positive")
    conc = np.asarray(concentrations, dtype=float)
    if conc.ndim != 3 or conc.shape[2] != 3:
        raise ValueError(f"concentration tile must be (h, w, 3), got {conc.shape}")

    mask = conc[:, :, matrix.channel(channel)] >= threshold
    labels, n_components = ndimage.label(mask, structure=_CONNECT_8)
    points = []
    if n_components:
        px_area = resolution_um_per_px ** 2
        component_ids = np.arange(1, n_components + 1)
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, component_ids)
        centroids = ndimage.center_of_mass(mask, labels, component_ids)
        for size, (row, col) in zip(sizes, centroids):
            area = float(size) * px_area
            if min_area_um2 <= area <= max_area_um2:
                x = origin[0] + (col + 0.5) * resolution_um_per_px
                y = origin[1] + (row + 0.5) * resolution_um_per_px
                points.append((x, y))
    points.sort()
    return CellMap(
        slide_id=slide_id,
        cell_type=channel,
        points=np.array(points, dtype=float).reshape(-1, 2),
    )
