"""Synthetic benchmark: paired point fields with known ground truth.

Reproduces the matcher's validation protocol: pairs of square fields share a
set of base centroids, the second copy optionally perturbed by an isotropic
Gaussian shift (the Shift experiment), and both sides optionally polluted
with spurious unpaired centroids (the Unpaired experiment). Every generated
pair carries its generating correspondence, so matching output can be scored
exactly.

Field units are treated as um so the matcher presets apply directly; only
distance ratios matter to the energy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .evaluation import MatchMetrics, evaluate
from .matching import MatchParams, match_landmarks
from .model import GroundTruthMatches, Landmark

__all__ = [
    "SyntheticConfig",
    "ExperimentRow",
    "RepetitionRecord",
    "generate_pair",
    "run_experiment",
    "SHIFT",
    "UNPAIRED",
]

SHIFT = "shift"
UNPAIRED = "unpaired"
_EXPERIMENT_CODES = {SHIFT: 0, UNPAIRED: 1}

SeedLike = Union[int, Sequence[int], np.random.SeedSequence]


@dataclass(frozen=True)
class SyntheticConfig:
    """Protocol parameters for the synthetic experiments."""

    field_size: tuple[float, float] = (300.0, 300.0)
    n_points: int = 30
    n_repetitions: int = 50
    sigma_shift: tuple[float, ...] = tuple(float(s) for s in range(12))
    unpaired_fraction: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    rng_seed: int = 0
    slide_a: str = "A"
    slide_b: str = "B"

    def __post_init__(self) -> None:
        if self.n_points <= 0 or self.n_repetitions <= 0:
            raise ValueError("n_points and n_repetitions must be positive")
        if min(self.field_size) <= 0:
            raise ValueError("field_size must be positive")
        if any(s < 0 for s in self.sigma_shift):
            raise ValueError("shift sigmas must be >= 0")
        if any(f < 0 for f in self.unpaired_fraction):
            raise ValueError("unpaired fractions must be >= 0")


def _draw_distinct_point(rng: np.random.Generator, size, taken: set) -> tuple[float, float]:
    # exact coincidences are measure-zero but would make within-slide
    # distances degenerate; redraw them
    for _ in range(1000):
        x = float(rng.uniform(0.0, size[0]))
        y = float(rng.uniform(0.0, size[1]))
        if (x, y) not in taken:
            taken.add((x, y))
            return x, y
    raise RuntimeError("could not draw a distinct point")


def generate_pair(
    config: SyntheticConfig,
    sigma: float,
    unpaired: float,
    seed: SeedLike,
) -> tuple[tuple[Landmark, ...], tuple[Landmark, ...], GroundTruthMatches]:
    """One synthetic slide pair plus its generating correspondence.

    ``n_points`` base centroids are drawn uniformly in the field and copied
    to the second slide; the copies are shifted per coordinate by independent
    Gaussian noise with standard deviation ``sigma``. Then
    ``floor(unpaired * n_points)`` spurious centroids are added independently
    to each side and listed as unpaired in the truth.
    """
    rng = np.random.default_rng(seed)
    w, h = config.field_size
    n = config.n_points

    taken_a: set = set()
    taken_b: set = set()
    base = [_draw_distinct_point(rng, (w, h), taken_a) for _ in range(n)]
    shifts = rng.normal(0.0, sigma, size=(n, 2)) if sigma > 0 else np.zeros((n, 2))

    lms_a = []
    lms_b = []
    rows: list[dict[str, str]] = []
    for i, (x, y) in enumerate(base):
        a_id = f"a{i:03d}"
        b_id = f"b{i:03d}"
        bx, by = x + float(shifts[i, 0]), y + float(shifts[i, 1])
        if (bx, by) in taken_b:  # pragma: no cover - measure zero
            bx, by = _draw_distinct_point(rng, (w, h), taken_b)
        taken_b.add((bx, by))
        lms_a.append(Landmark(id=a_id, x=x, y=y, slide_id=config.slide_a))
        lms_b.append(Landmark(id=b_id, x=bx, y=by, slide_id=config.slide_b))
        rows.append({config.slide_a: a_id, config.slide_b: b_id})

    n_spurious = int(unpaired * n)
    for k in range(n_spurious):
        x, y = _draw_distinct_point(rng, (w, h), taken_a)
        a_id = f"a{n + k:03d}"
        lms_a.append(Landmark(id=a_id, x=x, y=y, slide_id=config.slide_a))
        rows.append({config.slide_a: a_id})
    for k in range(n_spurious):
        x, y = _draw_distinct_point(rng, (w, h), taken_b)
        b_id = f"b{n + k:03d}"
        lms_b.append(Landmark(id=b_id, x=x, y=y, slide_id=config.slide_b))
        rows.append({config.slide_b: b_id})

    truth = GroundTruthMatches(
        slide_ids=(config.slide_a, config.slide_b), rows=tuple(rows)
    )
    return tuple(lms_a), tuple(lms_b), truth


@dataclass(frozen=True)
class RepetitionRecord:
    experiment: str
    level: float
    repetition: int
    metrics: MatchMetrics


@dataclass(frozen=True)
class ExperimentRow:
    """Mean metrics over the repetitions of one parameter level.

    Means are taken over the repetitions where a metric is defined; a metric
    undefined in every repetition stays ``None``.
    """

    experiment: str
    level: float
    n_repetitions: int
    sensitivity: Optional[float]
    precision: Optional[float]
    specificity: Optional[float]
    npv: Optional[float]


def _mean_defined(values: list[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def run_experiment(
    config: SyntheticConfig,
    experiments: Sequence[str] = (SHIFT, UNPAIRED),
    params: Optional[MatchParams] = None,
    threads: int = 1,
    collect_repetitions: bool = False,
) -> tuple[list[ExperimentRow], list[RepetitionRecord]]:
    """Run the Shift and/or Unpaired sweeps and average the metrics.

    The Shift experiment sweeps the Gaussian shift sigma with no spurious
    centroids; the Unpaired experiment sweeps the spurious fraction with no
    shift. Each repetition's RNG stream derives deterministically from
    (rng_seed, experiment, level index, repetition index), so repetitions
    are independent and the output does not depend on execution order.
    """
    if params is None:
        params = MatchParams.synthetic_preset()
    rows: list[ExperimentRow] = []
    records: list[RepetitionRecord] = []
    for experiment in experiments:
        if experiment not in _EXPERIMENT_CODES:
            raise ValueError(f"unknown experiment {experiment!r}")
        code = _EXPERIMENT_CODES[experiment]
        levels = config.sigma_shift if experiment == SHIFT else config.unpaired_fraction
        for level_idx, level in enumerate(levels):
            sigma, unpaired = (level, 0.0) if experiment == SHIFT else (0.0, level)
            per_rep: dict[str, list[Optional[float]]] = {
                "sensitivity": [], "precision": [], "specificity": [], "npv": []
            }
            for rep in range(config.n_repetitions):
                seed = np.random.SeedSequence(
                    [config.rng_seed, code, level_idx, rep]
                )
                lms_a, lms_b, truth = generate_pair(config, sigma, unpaired, seed)
                predicted = match_landmarks(lms_a, lms_b, params, threads=threads)
                metrics = evaluate(predicted, truth)
                for name in per_rep:
                    per_rep[name].append(getattr(metrics, name))
                if collect_repetitions:
                    records.append(
                        RepetitionRecord(experiment, float(level), rep, metrics)
                    )
            rows.append(
                ExperimentRow(
                    experiment=experiment,
                    level=float(level),
                    n_repetitions=config.n_repetitions,
                    sensitivity=_mean_defined(per_rep["sensitivity"]),
                    precision=_mean_defined(per_rep["precision"]),
                    specificity=_mean_defined(per_rep["specificity"]),
                    npv=_mean_defined(per_rep["npv"]),
                )
            )
    return rows, records
