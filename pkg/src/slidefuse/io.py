"""File formats: landmark CSV, ground-truth CSV, match/chain TSV, cell CSV,
stain config JSON, tiles with sidecars, feature/score/metrics outputs.

All text outputs are UTF-8 with LF line endings and '.' decimal separators.
Floats are written with repr so files round-trip bit-identically.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import IO, Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .evaluation import MatchMetrics
from .features import FeatureMatrix, RankScore
from .model import (
    CellMap,
    ChainRow,
    GroundTruthMatches,
    Landmark,
    MatchChain,
    MatchPair,
    MatchSet,
)
from .stains import RgbTile, StainMatrix
from .synthetic import ExperimentRow, RepetitionRecord

__all__ = [
    "load_landmarks",
    "save_landmarks",
    "load_ground_truth",
    "save_ground_truth",
    "save_match_set",
    "load_match_set",
    "save_chain",
    "load_chain",
    "save_cell_maps",
    "load_cell_maps",
    "load_stain_config",
    "load_tile",
    "metrics_to_json",
    "save_metrics",
    "save_experiment_rows",
    "save_repetition_records",
    "save_feature_matrix",
    "load_feature_matrix",
    "save_scores",
    "save_loadings",
    "save_histogram",
    "save_overlay",
]

_UNDEFINED = "undefined"


def _fmt(x: float) -> str:
    return repr(float(x))


def _open_read(path: Path | str) -> IO[str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return p.open("r", encoding="utf-8", newline="")


def _open_write(path: Path | str) -> IO[str]:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.open("w", encoding="utf-8", newline="\n")


# -- landmarks -------------------------------------------------------------

def _parse_boundary(text: str, scale: float, path, lineno: int):
    pts = []
    for token in text.strip().split(";"):
        token = token.strip()
        if not token:
            continue
        parts = token.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: bad boundary vertex {token!r}")
        pts.append((float(parts[0]) * scale, float(parts[1]) * scale))
    return tuple(pts) if pts else None


def load_landmarks(path: Path | str, slide_id: str) -> tuple[Landmark, ...]:
    """Read a landmark CSV, converting coordinates to um.

    The file may start with '#'-prefixed key=value preamble lines declaring
    ``units`` (um or px, default um) and ``resolution_um_per_px`` (required
    for px inputs). The CSV header is ``id,x,y`` with an optional
    ``boundary`` column holding 'x1 y1;x2 y2;...' outlines.
    """
    preamble: dict[str, str] = {}
    rows: list[tuple[int, list[str]]] = []
    with _open_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped.lstrip("#").strip()
                if "=" in body:
                    key, value = body.split("=", 1)
                    preamble[key.strip()] = value.strip()
                continue
            rows.append((lineno, next(csv.reader([line]))))

    units = preamble.get("units", "um")
    if units not in ("um", "px"):
        raise ValueError(f"{path}: unknown units {units!r} (expected um or px)")
    scale = 1.0
    if units == "px":
        if "resolution_um_per_px" not in preamble:
            raise ValueError(f"{path}: px units need a resolution_um_per_px preamble")
        scale = float(preamble["resolution_um_per_px"])
        if scale <= 0:
            raise ValueError(f"{path}: resolution must be positive")

    if not rows:
        return ()
    header_line, header = rows[0]
    header = [h.strip() for h in header]
    if header[:3] != ["id", "x", "y"] or (len(header) == 4 and header[3] != "boundary") or len(header) > 4:
        raise ValueError(f"{path}:{header_line}: expected header id,x,y[,boundary]")
    has_boundary = len(header) == 4

    out: list[Landmark] = []
    seen: set[str] = set()
    for lineno, row in rows[1:]:
        if len(row) < 3 or (len(row) > (4 if has_boundary else 3)):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        lm_id = row[0].strip()
        if not lm_id:
            raise ValueError(f"{path}:{lineno}: empty landmark id")
        if lm_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate landmark id {lm_id!r}")
        seen.add(lm_id)
        try:
            x = float(row[1]) * scale
            y = float(row[2]) * scale
            boundary = None
            if has_boundary and len(row) == 4 and row[3].strip():
                boundary = _parse_boundary(row[3], scale, path, lineno)
            out.append(Landmark(id=lm_id, x=x, y=y, slide_id=slide_id, boundary=boundary))
        except ValueError as exc:
            msg = str(exc)
            if str(path) in msg:
                raise
            raise ValueError(f"{path}:{lineno}: {msg}") from None
    return tuple(out)


def save_landmarks(path: Path | str, landmarks: Iterable[Landmark]) -> None:
    """Write a landmark CSV in um."""
    lms = sorted(landmarks, key=lambda lm: lm.id)
    has_boundary = any(lm.boundary is not None for lm in lms)
    with _open_write(path) as fh:
        fh.write("# units=um\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "x", "y", "boundary"] if has_boundary else ["id", "x", "y"])
        for lm in lms:
            row = [lm.id, _fmt(lm.x), _fmt(lm.y)]
            if has_boundary:
                row.append(
                    ";".join(f"{_fmt(px)} {_fmt(py)}" for px, py in lm.boundary)
                    if lm.boundary
                    else ""
                )
            writer.writerow(row)


# -- ground truth ----------------------------------------------------------

def load_ground_truth(path: Path | str) -> GroundTruthMatches:
    """Read an association-group CSV: columns are slide ids, one row per
    group, empty cells where a slide has no member."""
    with _open_read(path) as fh:
        reader = csv.reader(fh)
        table = [row for row in reader if any(cell.strip() for cell in row)]
    if not table:
        raise ValueError(f"{path}: empty ground-truth file")
    slide_ids = tuple(c.strip() for c in table[0])
    rows = []
    for row in table[1:]:
        entry = {
            slide_ids[i]: cell.strip()
            for i, cell in enumerate(row)
            if i < len(slide_ids) and cell.strip()
        }
        rows.append(entry)
    return GroundTruthMatches(slide_ids=slide_ids, rows=tuple(rows))


def save_ground_truth(path: Path | str, truth: GroundTruthMatches) -> None:
    with _open_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(truth.slide_ids)
        for row in truth.rows:
            writer.writerow([row.get(s, "") for s in truth.slide_ids])


# -- match sets and chains ---------------------------------------------------

def _direction_label(ms: MatchSet) -> str:
    arrow = "<->" if ms.direction == "bidirectional" else "->"
    return f"{ms.source_slide}{arrow}{ms.target_slide}"


def save_match_set(path_or_file: Path | str | IO[str], ms: MatchSet) -> None:
    """Write a match TSV: g_id, h_id, energy, direction."""
    own = not hasattr(path_or_file, "write")
    fh = _open_write(path_or_file) if own else path_or_file
    try:
        label = _direction_label(ms)
        fh.write("g_id\th_id\tenergy\tdirection\n")
        for p in ms.pairs:
            fh.write(f"{p.g_id}\t{p.h_id}\t{_fmt(p.energy)}\t{label}\n")
    finally:
        if own:
            fh.close()


def load_match_set(path: Path | str) -> MatchSet:
    with _open_read(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split("\t") != ["g_id", "h_id", "energy", "direction"]:
        raise ValueError(f"{path}: expected a match TSV header")
    pairs = []
    label: Optional[str] = None
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 columns")
        pairs.append(MatchPair(cells[0], cells[1], float(cells[2])))
        if label is None:
            label = cells[3]
        elif label != cells[3]:
            raise ValueError(f"{path}:{lineno}: mixed directions in one file")
    if label is None:
        raise ValueError(f"{path}: empty match file has no direction metadata")
    if "<->" in label:
        source, target = label.split("<->")
        direction = "bidirectional"
    elif "->" in label:
        source, target = label.split("->")
        direction = "directed"
    else:
        raise ValueError(f"{path}: bad direction label {label!r}")
    return MatchSet(
        source_slide=source, target_slide=target,
        direction=direction, pairs=tuple(pairs),
    )


def save_chain(path_or_file: Path | str | IO[str], chain: MatchChain) -> None:
    """Write a chain TSV: one column per slide, empty cells for absences."""
    own = not hasattr(path_or_file, "write")
    fh = _open_write(path_or_file) if own else path_or_file
    try:
        fh.write("\t".join(chain.slide_ids) + "\n")
        for row in chain.rows:
            fh.write("\t".join(v if v is not None else "" for v in row.ids) + "\n")
    finally:
        if own:
            fh.close()


def load_chain(path: Path | str) -> MatchChain:
    with _open_read(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty chain file")
    slide_ids = tuple(lines[0].split("\t"))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(slide_ids):
            raise ValueError(f"{path}:{lineno}: expected {len(slide_ids)} columns")
        rows.append(ChainRow(tuple(c if c else None for c in cells)))
    return MatchChain(slide_ids=slide_ids, rows=tuple(rows))


# -- cell maps ---------------------------------------------------------------

def save_cell_maps(path: Path | str, cellmaps: Iterable[CellMap]) -> None:
    """Write one slide's cell maps as a cell_type,x,y CSV."""
    with _open_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_type", "x", "y"])
        for cm in sorted(cellmaps, key=lambda c: c.cell_type):
            for x, y in cm.points:
                writer.writerow([cm.cell_type, _fmt(x), _fmt(y)])


def load_cell_maps(path: Path | str, slide_id: str) -> dict[str, CellMap]:
    """Read a cell_type,x,y CSV into per-type cell maps."""
    with _open_read(path) as fh:
        reader = csv.reader(fh)
        table = [row for row in reader if row]
    if not table or [c.strip() for c in table[0]] != ["cell_type", "x", "y"]:
        raise ValueError(f"{path}: expected header cell_type,x,y")
    buckets: dict[str, list[tuple[float, float]]] = {}
    for lineno, row in enumerate(table[1:], start=2):
        if len(row) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 columns")
        try:
            buckets.setdefault(row[0].strip(), []).append((float(row[1]), float(row[2])))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad coordinate in {row!r}") from None
    return {
        cell_type: CellMap(
            slide_id=slide_id,
            cell_type=cell_type,
            points=np.array(points, dtype=float).reshape(-1, 2),
        )
        for cell_type, points in buckets.items()
    }


# -- stain config and tiles ---------------------------------------------------

def load_stain_config(path: Path | str):
    """Read a stain config JSON.

    Schema: ``{"stains": [{"label", "od_vector", optional "threshold",
    "min_area_um2", "max_area_um2"}, ...], "background": [r, g, b]}``.
    Returns (StainMatrix, background array, segmentation settings per label);
    only stains with a threshold entry are segmentation targets.
    """
    with _open_read(path) as fh:
        cfg = json.load(fh)
    stains = cfg.get("stains")
    if not stains or len(stains) != 3:
        raise ValueError(f"{path}: stain config needs exactly 3 stains")
    labels = tuple(s["label"] for s in stains)
    vectors = np.array([s["od_vector"] for s in stains], dtype=float)
    matrix = StainMatrix(labels=labels, od_vectors=vectors)
    background = np.asarray(cfg.get("background", [255.0, 255.0, 255.0]), dtype=float)
    segmentation = {
        s["label"]: {
            "threshold": float(s["threshold"]),
            "min_area_um2": float(s.get("min_area_um2", 0.0)),
            "max_area_um2": float(s.get("max_area_um2", np.inf)),
        }
        for s in stains
        if "threshold" in s
    }
    return matrix, background, segmentation


def load_tile(image_path: Path | str) -> RgbTile:
    """Read a PNG/PPM tile plus its '<name>.json' sidecar (origin_um,
    resolution_um_per_px, optional slide_id)."""
    p = Path(image_path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    sidecar = p.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"tile sidecar not found: {sidecar}")
    with sidecar.open("r", encoding="utf-8") as fh:
        meta = json.load(fh)
    with Image.open(p) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    origin = meta.get("origin_um", [0.0, 0.0])
    return RgbTile(
        pixels=pixels,
        resolution_um_per_px=float(meta["resolution_um_per_px"]),
        origin=(float(origin[0]), float(origin[1])),
        slide_id=str(meta.get("slide_id", "")),
    )


# -- metrics and experiment results -------------------------------------------

def _metric_cell(value: Optional[float]) -> object:
    return _UNDEFINED if value is None else value


def metrics_to_json(metrics: MatchMetrics) -> dict:
    return {
        "counts": {
            "tp": metrics.counts.tp,
            "fp": metrics.counts.fp,
            "fn": metrics.counts.fn,
            "tn": metrics.counts.tn,
        },
        "sensitivity": _metric_cell(metrics.sensitivity),
        "precision": _metric_cell(metrics.precision),
        "specificity": _metric_cell(metrics.specificity),
        "npv": _metric_cell(metrics.npv),
    }


def save_metrics(path: Path | str, metrics: MatchMetrics) -> None:
    with _open_write(path) as fh:
        json.dump(metrics_to_json(metrics), fh, indent=2)
        fh.write("\n")


def _metric_text(value: Optional[float]) -> str:
    return _UNDEFINED if value is None else _fmt(value)


def save_experiment_rows(path_or_file: Path | str | IO[str], rows: Sequence[ExperimentRow]) -> None:
    own = not hasattr(path_or_file, "write")
    fh = _open_write(path_or_file) if own else path_or_file
    try:
        fh.write("experiment,level,sensitivity,precision,specificity,npv\n")
        for row in rows:
            fh.write(
                f"{row.experiment},{_fmt(row.level)},{_metric_text(row.sensitivity)},"
                f"{_metric_text(row.precision)},{_metric_text(row.specificity)},"
                f"{_metric_text(row.npv)}\n"
            )
    finally:
        if own:
            fh.close()


def save_repetition_records(path: Path | str, records: Sequence[RepetitionRecord]) -> None:
    with _open_write(path) as fh:
        fh.write(
            "experiment,level,repetition,tp,fp,fn,tn,"
            "sensitivity,precision,specificity,npv\n"
        )
        for rec in records:
            m = rec.metrics
            fh.write(
                f"{rec.experiment},{_fmt(rec.level)},{rec.repetition},"
                f"{m.counts.tp},{m.counts.fp},{m.counts.fn},{m.counts.tn},"
                f"{_metric_text(m.sensitivity)},{_metric_text(m.precision)},"
                f"{_metric_text(m.specificity)},{_metric_text(m.npv)}\n"
            )


# -- features, scores, histograms ---------------------------------------------

def save_feature_matrix(path: Path | str, matrix: FeatureMatrix) -> None:
    """Write the feature CSV; undefined entries are written as nan."""
    with _open_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("chain_id",) + matrix.columns)
        for rid, row in zip(matrix.row_ids, matrix.values):
            writer.writerow([rid] + [_fmt(v) for v in row])


def load_feature_matrix(path: Path | str) -> FeatureMatrix:
    with _open_read(path) as fh:
        reader = csv.reader(fh)
        table = [row for row in reader if row]
    if not table or not table[0] or table[0][0] != "chain_id":
        raise ValueError(f"{path}: expected a feature CSV with a chain_id column")
    columns = tuple(table[0][1:])
    row_ids = []
    values = []
    for lineno, row in enumerate(table[1:], start=2):
        if len(row) != len(columns) + 1:
            raise ValueError(f"{path}:{lineno}: expected {len(columns) + 1} columns")
        row_ids.append(row[0])
        values.append([float(v) for v in row[1:]])
    return FeatureMatrix(
        row_ids=tuple(row_ids),
        columns=columns,
        values=np.array(values, dtype=float).reshape(len(row_ids), len(columns)),
    )


def save_scores(path: Path | str, score: RankScore) -> None:
    with _open_write(path) as fh:
        fh.write("chain_id,score\n")
        for rid, s in zip(score.row_ids, score.scores):
            fh.write(f"{rid},{_fmt(s)}\n")


def save_loadings(path: Path | str, score: RankScore) -> None:
    with _open_write(path) as fh:
        json.dump(
            {
                "explained_variance": score.explained_variance,
                "loadings": score.loadings,
                "dropped_columns": list(score.dropped_columns),
                "excluded_rows": list(score.excluded_rows),
            },
            fh,
            indent=2,
        )
        fh.write("\n")


def save_histogram(path: Path | str, scores: np.ndarray, bins: int = 10) -> None:
    """Write score-distribution histogram data: bin edges plus counts."""
    counts, edges = np.histogram(np.asarray(scores, dtype=float), bins=bins, range=(0.0, 1.0))
    with _open_write(path) as fh:
        fh.write("bin_left,bin_right,count\n")
        for i, c in enumerate(counts):
            fh.write(f"{_fmt(edges[i])},{_fmt(edges[i + 1])},{int(c)}\n")


def save_overlay(
    path: Path | str,
    score: RankScore,
    positions: Mapping[str, tuple[float, float]],
) -> None:
    """Write chain_id,x,y,score rows for spatial rank maps; positions map
    chain ids to reference coordinates (e.g. the first slide's centroid)."""
    with _open_write(path) as fh:
        fh.write("chain_id,x,y,score\n")
        for rid, s in zip(score.row_ids, score.scores):
            x, y = positions[rid]
            fh.write(f"{rid},{_fmt(x)},{_fmt(y)},{_fmt(s)}\n")
