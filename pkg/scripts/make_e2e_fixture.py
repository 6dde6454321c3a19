#!/usr/bin/env python3
"""Regenerate the bundled 4-slide end-to-end fixture in tests/data/e2e.

Forty landmarks with star-shaped outlines are placed in a 1000x1000 um field
and copied into four slides with a small per-slide jitter, mimicking
consecutive sections. Each slide gets a shared CD3 cell population plus one
slide-specific macrophage population. The generating correspondence is saved
as ground truth (ids are shared across slides, g00..g39).

Deterministic; run from the repository root:

    python scripts/make_e2e_fixture.py
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from slidefuse.io import save_cell_maps, save_ground_truth, save_landmarks
from slidefuse.model import CellMap, GroundTruthMatches, Landmark

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "e2e"

FIELD = 1000.0
N_LANDMARKS = 40
MIN_SPACING = 115.0
JITTER_SIGMA = 4.0
SLIDES = ("cd3_cd68", "cd3_cd163", "cd3_cd206", "cd3_ms4a4a")
HOME_TYPES = ("CD68", "CD163", "CD206", "MS4A4A")
N_CD3 = 1600
N_HOME = 1300
SEED = 1928374655


def sample_centres(rng: np.random.Generator) -> np.ndarray:
    centres: list[tuple[float, float]] = []
    while len(centres) < N_LANDMARKS:
        x, y = rng.uniform(80.0, FIELD - 80.0, size=2)
        if all(math.hypot(x - cx, y - cy) >= MIN_SPACING for cx, cy in centres):
            centres.append((float(x), float(y)))
    return np.array(centres)


def outline(rng: np.random.Generator, cx: float, cy: float) -> tuple:
    base = np.arange(12) + rng.uniform(0.0, 0.5, 12)
    angles = 2.0 * math.pi * base / 12
    radii = rng.uniform(42.0, 68.0, 12)
    return tuple(
        (cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)
    )


def main() -> None:
    rng = np.random.default_rng(SEED)
    OUT.mkdir(parents=True, exist_ok=True)
    centres = sample_centres(rng)

    slide_entries = []
    for slide, home in zip(SLIDES, HOME_TYPES):
        jitter = rng.normal(0.0, JITTER_SIGMA, size=centres.shape)
        landmarks = []
        for i, (cx, cy) in enumerate(centres + jitter):
            landmarks.append(
                Landmark(
                    id=f"g{i:02d}", x=cx, y=cy, slide_id=slide,
                    boundary=outline(rng, cx, cy),
                )
            )
        lm_path = OUT / f"landmarks_{slide}.csv"
        save_landmarks(lm_path, landmarks)

        cell_maps = [
            CellMap(
                slide_id=slide, cell_type="CD3",
                points=rng.uniform(0.0, FIELD, size=(N_CD3, 2)),
            ),
            CellMap(
                slide_id=slide, cell_type=home,
                points=rng.uniform(0.0, FIELD, size=(N_HOME, 2)),
            ),
        ]
        cells_path = OUT / f"cells_{slide}.csv"
        save_cell_maps(cells_path, cell_maps)
        slide_entries.append(
            {"id": slide, "landmarks": lm_path.name, "cells": cells_path.name}
        )

    truth = GroundTruthMatches(
        slide_ids=SLIDES,
        rows=tuple({s: f"g{i:02d}" for s in SLIDES} for i in range(N_LANDMARKS)),
    )
    save_ground_truth(OUT / "ground_truth.csv", truth)

    config = {
        "slides": slide_entries,
        "match": {"d_match": 80.0, "n_neighbors": 3, "d_sub": "auto"},
        "window_um": 258.0,
        "shared_cell_type": "CD3",
        "seed": 0,
        "threads": 1,
    }
    (OUT / "stack.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"fixture written to {OUT}")


if __name__ == "__main__":
    main()
