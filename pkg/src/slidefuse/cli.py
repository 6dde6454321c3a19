"""Command-line pipeline driver.

Subcommands cover the pipeline stages and the synthetic validation:

* ``match``       pairwise bidirectional landmark matching plus chaining
* ``simulate``    synthetic Shift / Unpaired robustness sweeps
* ``evaluate``    confusion metrics of a match file against ground truth
* ``deconvolve``  colour deconvolution of RGB tiles into cell-centroid CSVs
* ``features``    per-chain feature matrix over the slide stack
* ``rank``        PCA ranking score, histogram and spatial overlay

Inputs come from a JSON config file (``--config``) with per-flag overrides;
all randomness flows through the single configured seed, and outputs are
bit-identical for any ``--threads`` value.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__, io
from .evaluation import evaluate
from .features import NeighbourhoodSpec, build_feature_matrix, pca_rank
from .matching import MatchParams, chain_matches, match_landmarks
from .model import CellMap
from .stains import extract_cells, optical_density, unmix
from .synthetic import SHIFT, UNPAIRED, SyntheticConfig, run_experiment


@dataclass
class SlideEntry:
    id: str
    landmarks: Optional[Path] = None
    cells: Optional[Path] = None


@dataclass
class PipelineConfig:
    """Run configuration; JSON file fields with flag overrides on top."""

    slides: list[SlideEntry] = field(default_factory=list)
    d_match: float = 300.0
    n_neighbors: int = 4
    d_sub: Union[float, str] = "auto"
    energy_cap: Optional[float] = None
    window_um: float = 258.0
    shared_cell_type: str = "CD3"
    stain_config: Optional[Path] = None
    out_dir: Path = Path("out")
    seed: int = 0
    threads: int = 1

    def match_params(self) -> MatchParams:
        return MatchParams(
            d_match=self.d_match,
            n_neighbors=self.n_neighbors,
            d_sub=self.d_sub,
            energy_cap=self.energy_cap,
        )


def _load_config(path: Optional[str]) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    with p.open("r", encoding="utf-8") as fh:
        raw = json.load(fh)
    base = p.parent

    def _resolve(value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        q = Path(value)
        return q if q.is_absolute() else base / q

    for entry in raw.get("slides", []):
        cfg.slides.append(
            SlideEntry(
                id=entry["id"],
                landmarks=_resolve(entry.get("landmarks")),
                cells=_resolve(entry.get("cells")),
            )
        )
    match = raw.get("match", {})
    cfg.d_match = float(match.get("d_match", cfg.d_match))
    cfg.n_neighbors = int(match.get("n_neighbors", cfg.n_neighbors))
    cfg.d_sub = match.get("d_sub", cfg.d_sub)
    if cfg.energy_cap is None and match.get("energy_cap") is not None:
        cfg.energy_cap = float(match["energy_cap"])
    cfg.window_um = float(raw.get("window_um", cfg.window_um))
    cfg.shared_cell_type = raw.get("shared_cell_type", cfg.shared_cell_type)
    if raw.get("stain_config") is not None:
        cfg.stain_config = _resolve(raw["stain_config"])
    if raw.get("out_dir") is not None:
        cfg.out_dir = _resolve(raw["out_dir"])
    cfg.seed = int(raw.get("seed", cfg.seed))
    cfg.threads = int(raw.get("threads", cfg.threads))
    return cfg


def _apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if getattr(args, "d_match", None) is not None:
        cfg.d_match = args.d_match
    if getattr(args, "n_neighbors", None) is not None:
        cfg.n_neighbors = args.n_neighbors
    if getattr(args, "d_sub", None) is not None:
        cfg.d_sub = args.d_sub if args.d_sub == "auto" else float(args.d_sub)
    if getattr(args, "out_dir", None) is not None:
        cfg.out_dir = Path(args.out_dir)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg


def _config_of(args: argparse.Namespace) -> PipelineConfig:
    return _apply_overrides(_load_config(args.config), args)


def _load_slide_landmarks(cfg: PipelineConfig) -> dict[str, tuple]:
    out = {}
    for entry in cfg.slides:
        if entry.landmarks is None:
            raise ValueError(f"slide {entry.id!r} has no landmarks path configured")
        out[entry.id] = io.load_landmarks(entry.landmarks, entry.id)
    return out


# -- subcommands ---------------------------------------------------------------

def cmd_match(args: argparse.Namespace) -> int:
    cfg = _config_of(args)
    if len(cfg.slides) < 2:
        raise ValueError("matching needs at least 2 configured slides")
    landmarks = _load_slide_landmarks(cfg)
    params = cfg.match_params()
    ordered = [e.id for e in cfg.slides]

    pairwise = []
    for a, b in zip(ordered, ordered[1:]):
        ms = match_landmarks(
            landmarks[a], landmarks[b], params, threads=cfg.threads,
            slide_a=a, slide_b=b,
        )
        out = cfg.out_dir / f"match_{a}__{b}.tsv"
        io.save_match_set(out, ms)
        print(f"{a} -> {b}: {len(ms)} bidirectional pairs -> {out}")
        pairwise.append(ms)

    chain = chain_matches(pairwise)
    chain_path = cfg.out_dir / "chains.tsv"
    io.save_chain(chain_path, chain)
    print(
        f"chains: {len(chain.rows)} rows "
        f"({len(chain.complete_rows())} complete) -> {chain_path}"
    )
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config_of(args)
    synth = SyntheticConfig(
        n_repetitions=args.repetitions, rng_seed=cfg.seed
    )
    experiments = (SHIFT, UNPAIRED) if args.experiment == "both" else (args.experiment,)
    params = MatchParams.synthetic_preset(
        **(
            {}
            if args.d_match is None and args.n_neighbors is None
            else {
                "d_match": args.d_match or 80.0,
                "n_neighbors": args.n_neighbors or 3,
            }
        )
    )
    rows, records = run_experiment(
        synth,
        experiments=experiments,
        params=params,
        threads=cfg.threads,
        collect_repetitions=args.per_repetition is not None,
    )
    out = cfg.out_dir / "simulation.csv"
    io.save_experiment_rows(out, rows)
    print(f"{len(rows)} experiment levels -> {out}")
    if args.per_repetition is not None:
        io.save_repetition_records(Path(args.per_repetition), records)
        print(f"{len(records)} repetition records -> {args.per_repetition}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    predicted = io.load_match_set(args.predicted)
    truth = io.load_ground_truth(args.truth)
    metrics = evaluate(predicted, truth)
    payload = io.metrics_to_json(metrics)
    if args.out is not None:
        io.save_metrics(Path(args.out), metrics)
    print(json.dumps(payload, indent=2))
    return 0


def cmd_deconvolve(args: argparse.Namespace) -> int:
    cfg = _config_of(args)
    stain_path = Path(args.stain_config) if args.stain_config else cfg.stain_config
    if stain_path is None:
        raise ValueError("deconvolve needs a stain config (--stain-config)")
    matrix, background, segmentation = load_stain_config_checked(stain_path)
    tiles_dir = Path(args.tiles)
    if not tiles_dir.is_dir():
        raise FileNotFoundError(f"tile directory not found: {tiles_dir}")
    tile_paths = sorted(
        p for p in tiles_dir.iterdir() if p.suffix.lower() in (".png", ".ppm")
    )
    if not tile_paths:
        raise ValueError(f"no .png or .ppm tiles in {tiles_dir}")

    print(f"stain matrix condition number: {matrix.condition_number:.3f}")
    per_slide: dict[str, dict[str, list[np.ndarray]]] = {}
    skipped = 0
    for tile_path in tile_paths:
        try:
            tile = io.load_tile(tile_path)
        except Exception as exc:  # unreadable tile: warn, count, continue
            print(f"warning: skipping {tile_path}: {exc}", file=sys.stderr)
            skipped += 1
            continue
        od = optical_density(tile, background)
        result = unmix(od, matrix)
        for label, settings in segmentation.items():
            cm = extract_cells(
                result.concentrations,
                matrix,
                label,
                threshold=settings["threshold"],
                min_area_um2=settings["min_area_um2"],
                max_area_um2=settings["max_area_um2"],
                resolution_um_per_px=tile.resolution_um_per_px,
                origin=tile.origin,
                slide_id=tile.slide_id,
            )
            if len(cm):
                per_slide.setdefault(tile.slide_id, {}).setdefault(label, []).append(
                    cm.points
                )

    for slide_id in sorted(per_slide):
        maps = [
            CellMap(
                slide_id=slide_id,
                cell_type=label,
                points=np.concatenate(chunks, axis=0),
            )
            for label, chunks in sorted(per_slide[slide_id].items())
        ]
        out = cfg.out_dir / f"cells_{slide_id or 'unknown'}.csv"
        io.save_cell_maps(out, maps)
        print(f"{slide_id or 'unknown'}: {sum(len(m) for m in maps)} cells -> {out}")
    print(f"tiles processed={len(tile_paths) - skipped} skipped={skipped}")
    return 0


def load_stain_config_checked(path: Path):
    matrix, background, segmentation = io.load_stain_config(path)
    if not segmentation:
        raise ValueError(f"{path}: no stain has a threshold entry to segment")
    return matrix, background, segmentation


def cmd_features(args: argparse.Namespace) -> int:
    cfg = _config_of(args)
    if len(cfg.slides) < 2:
        raise ValueError("feature extraction needs the configured slide stack")
    chain_path = Path(args.chains) if args.chains else cfg.out_dir / "chains.tsv"
    chain = io.load_chain(chain_path)
    landmarks = _load_slide_landmarks(cfg)
    cellmaps = {}
    for entry in cfg.slides:
        if entry.cells is None:
            raise ValueError(f"slide {entry.id!r} has no cells path configured")
        cellmaps[entry.id] = io.load_cell_maps(entry.cells, entry.id)

    matrix = build_feature_matrix(
        chain,
        cellmaps,
        {s: {lm.id: lm for lm in lms} for s, lms in landmarks.items()},
        spec=NeighbourhoodSpec(size=cfg.window_um),
        shared_type=cfg.shared_cell_type,
    )
    out = cfg.out_dir / "features.csv"
    io.save_feature_matrix(out, matrix)
    n_partial = len(chain.rows) - len(chain.complete_rows())
    if n_partial:
        print(f"note: {n_partial} partial chain rows excluded from features")
    print(f"{len(matrix.row_ids)} rows x {len(matrix.columns)} features -> {out}")
    return 0


def cmd_rank(args: argparse.Namespace) -> int:
    cfg = _config_of(args)
    features_path = Path(args.features) if args.features else cfg.out_dir / "features.csv"
    matrix = io.load_feature_matrix(features_path)
    score = pca_rank(matrix)

    io.save_scores(cfg.out_dir / "scores.csv", score)
    io.save_loadings(cfg.out_dir / "loadings.json", score)
    io.save_histogram(cfg.out_dir / "score_histogram.csv", score.scores, bins=args.bins)
    written = ["scores.csv", "loadings.json", "score_histogram.csv"]

    if cfg.slides and cfg.slides[0].landmarks is not None:
        first = cfg.slides[0]
        by_id = {lm.id: lm for lm in io.load_landmarks(first.landmarks, first.id)}
        positions = {}
        for rid in score.row_ids:
            first_id = rid.split("|")[0]
            if first_id in by_id:
                positions[rid] = by_id[first_id].xy
        if len(positions) == len(score.row_ids):
            io.save_overlay(cfg.out_dir / "score_overlay.csv", score, positions)
            written.append("score_overlay.csv")

    if score.excluded_rows:
        print(
            f"note: {len(score.excluded_rows)} rows with undefined features "
            f"excluded from the ranking: {', '.join(score.excluded_rows)}"
        )
    if score.dropped_columns:
        print(f"note: zero-variance columns dropped: {', '.join(score.dropped_columns)}")
    print(
        f"{len(score.row_ids)} scores (explained variance "
        f"{score.explained_variance:.3f}) -> {', '.join(written)}"
    )
    return 0


# -- parser ---------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="pipeline config JSON")
    sub.add_argument("--out-dir", help="output directory")
    sub.add_argument("--seed", type=int, help="RNG seed")
    sub.add_argument("--threads", type=int, help="worker thread count")
    sub.add_argument("--d-match", type=float, dest="d_match", help="candidate radius in um")
    sub.add_argument(
        "--n-neighbors", type=int, dest="n_neighbors",
        help="neighbour associations per energy (N)",
    )
    sub.add_argument("--d-sub", dest="d_sub", help="subgraph edge length in um, or 'auto'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidefuse",
        description="Fuse consecutive differently stained slide sections by "
        "landmark matching, then extract multi-stain features and ranks.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("match", help="match landmarks across the slide stack")
    _add_common(p)
    p.set_defaults(func=cmd_match)

    p = subs.add_parser("simulate", help="run the synthetic robustness sweeps")
    _add_common(p)
    p.add_argument(
        "--experiment", choices=(SHIFT, UNPAIRED, "both"), default="both"
    )
    p.add_argument("--repetitions", type=int, default=50)
    p.add_argument(
        "--per-repetition", dest="per_repetition",
        help="also dump per-repetition metrics to this CSV",
    )
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("evaluate", help="score a match file against ground truth")
    p.add_argument("--predicted", required=True, help="match TSV")
    p.add_argument("--truth", required=True, help="ground-truth CSV")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("deconvolve", help="unmix RGB tiles into cell CSVs")
    _add_common(p)
    p.add_argument("--tiles", required=True, help="directory of PNG/PPM tiles with sidecars")
    p.add_argument("--stain-config", dest="stain_config", help="stain config JSON")
    p.set_defaults(func=cmd_deconvolve)

    p = subs.add_parser("features", help="build the per-chain feature matrix")
    _add_common(p)
    p.add_argument("--chains", help="chain TSV (default: <out-dir>/chains.tsv)")
    p.set_defaults(func=cmd_features)

    p = subs.add_parser("rank", help="PCA ranking score over the feature matrix")
    _add_common(p)
    p.add_argument("--features", help="feature CSV (default: <out-dir>/features.csv)")
    p.add_argument("--bins", type=int, default=10, help="histogram bin count")
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
