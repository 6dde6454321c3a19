import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from slidefuse import __version__, io
from slidefuse.cli import main

FIXTURE = Path(__file__).parent / "data" / "e2e"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip() == f"slidefuse {__version__}"

    @pytest.mark.parametrize(
        "command", ["match", "simulate", "evaluate", "deconvolve", "features", "rank"]
    )
    def test_help_available(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        assert command in capsys.readouterr().out


class TestMatchCommand:
    def test_fixture_stack(self, tmp_path, capsys):
        code, out, err = run(
            capsys, "match", "--config", FIXTURE / "stack.json", "--out-dir", tmp_path
        )
        assert code == 0, err
        chain = io.load_chain(tmp_path / "chains.tsv")
        assert chain.slide_ids == ("cd3_cd68", "cd3_cd163", "cd3_cd206", "cd3_ms4a4a")
        assert len(chain.complete_rows()) >= 35
        # the fixture shares landmark ids across slides, so a correct chain
        # row repeats one id four times
        for row in chain.complete_rows():
            assert len(set(row.ids)) == 1

    def test_identity_match_of_identical_files(self, tmp_path, capsys):
        lms = FIXTURE / "landmarks_cd3_cd68.csv"
        config = {
            "slides": [
                {"id": "s1", "landmarks": str(lms)},
                {"id": "s2", "landmarks": str(lms)},
            ],
            "match": {"d_match": 80.0, "n_neighbors": 3, "d_sub": "auto"},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        code, out, err = run(
            capsys, "match", "--config", cfg_path, "--out-dir", tmp_path / "out"
        )
        assert code == 0, err
        ms = io.load_match_set(tmp_path / "out" / "match_s1__s2.tsv")
        assert ms.mapping() == {f"g{i:02d}": f"g{i:02d}" for i in range(40)}
        assert all(p.energy == 0.0 for p in ms.pairs)

    def test_missing_input_exits_2(self, tmp_path, capsys):
        config = {
            "slides": [
                {"id": "s1", "landmarks": "does_not_exist.csv"},
                {"id": "s2", "landmarks": "also_missing.csv"},
            ]
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        code, out, err = run(capsys, "match", "--config", cfg_path)
        assert code == 2
        assert "does_not_exist.csv" in err

    def test_needs_two_slides(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"slides": []}))
        code, _, err = run(capsys, "match", "--config", cfg_path)
        assert code == 2
        assert "2 configured slides" in err


class TestSimulateCommand:
    def test_default_shift_sweep_has_12_levels(self, tmp_path, capsys):
        code, out, err = run(
            capsys, "simulate", "--experiment", "shift", "--repetitions", "2",
            "--out-dir", tmp_path, "--seed", "3",
        )
        assert code == 0, err
        lines = (tmp_path / "simulation.csv").read_text().strip().split("\n")
        assert lines[0] == "experiment,level,sensitivity,precision,specificity,npv"
        assert len(lines) == 13
        levels = [float(l.split(",")[1]) for l in lines[1:]]
        assert levels == [float(s) for s in range(12)]

    def test_unpaired_sweep_levels(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "simulate", "--experiment", "unpaired", "--repetitions", "2",
            "--out-dir", tmp_path, "--seed", "3",
        )
        assert code == 0, err
        lines = (tmp_path / "simulation.csv").read_text().strip().split("\n")
        levels = [float(l.split(",")[1]) for l in lines[1:]]
        assert levels == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]

    def test_same_seed_byte_identical(self, tmp_path, capsys):
        for sub in ("a", "b"):
            code, _, err = run(
                capsys, "simulate", "--experiment", "shift", "--repetitions", "2",
                "--out-dir", tmp_path / sub, "--seed", "11",
            )
            assert code == 0, err
        assert (tmp_path / "a" / "simulation.csv").read_bytes() == (
            tmp_path / "b" / "simulation.csv"
        ).read_bytes()

    def test_per_repetition_dump(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "simulate", "--experiment", "unpaired", "--repetitions", "2",
            "--out-dir", tmp_path, "--seed", "1",
            "--per-repetition", tmp_path / "reps.csv",
        )
        assert code == 0, err
        lines = (tmp_path / "reps.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + 6 * 2


class TestEvaluateCommand:
    def test_metrics_json(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        run(capsys, "match", "--config", FIXTURE / "stack.json", "--out-dir", out_dir)
        code, out, err = run(
            capsys, "evaluate",
            "--predicted", out_dir / "match_cd3_cd68__cd3_cd163.tsv",
            "--truth", FIXTURE / "ground_truth.csv",
            "--out", tmp_path / "metrics.json",
        )
        assert code == 0, err
        payload = json.loads(out)
        assert payload["sensitivity"] >= 0.9
        assert payload["precision"] >= 0.95
        assert json.loads((tmp_path / "metrics.json").read_text()) == payload

    def test_unknown_id_exits_2(self, tmp_path, capsys):
        (tmp_path / "pred.tsv").write_text(
            "g_id\th_id\tenergy\tdirection\nzz\tb1\t0.0\tA<->B\n"
        )
        (tmp_path / "gt.csv").write_text("A,B\na1,b1\n")
        code, _, err = run(
            capsys, "evaluate", "--predicted", tmp_path / "pred.tsv",
            "--truth", tmp_path / "gt.csv",
        )
        assert code == 2
        assert "unknown" in err


def write_stain_fixture(tmp_path):
    vectors = np.array(
        [
            [0.650, 0.704, 0.286],
            [0.268, 0.570, 0.776],
            [0.214, 0.851, 0.478],
        ]
    )
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    cfg = {
        "stains": [
            {"label": "haematoxylin", "od_vector": vectors[0].tolist()},
            {"label": "dab", "od_vector": vectors[1].tolist(),
             "threshold": 0.25, "min_area_um2": 0.5, "max_area_um2": 500.0},
            {"label": "fastred", "od_vector": vectors[2].tolist(),
             "threshold": 0.25, "min_area_um2": 0.5, "max_area_um2": 500.0},
        ],
        "background": [255, 255, 255],
    }
    stain_path = tmp_path / "stains.json"
    stain_path.write_text(json.dumps(cfg))

    tiles = tmp_path / "tiles"
    tiles.mkdir()
    conc = np.zeros((32, 32, 3))
    conc[4:9, 4:9, 1] = 1.0     # dab blob
    conc[20:24, 10:14, 2] = 1.0  # fastred blob
    od = conc @ vectors
    pixels = np.clip(np.rint(255.0 * 10.0 ** (-od)), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(tiles / "t0.png")
    (tiles / "t0.json").write_text(
        json.dumps(
            {"origin_um": [100.0, 50.0], "resolution_um_per_px": 0.5,
             "slide_id": "s1"}
        )
    )
    return stain_path, tiles


class TestDeconvolveCommand:
    def test_extracts_blob_centroids(self, tmp_path, capsys):
        stain_path, tiles = write_stain_fixture(tmp_path)
        code, out, err = run(
            capsys, "deconvolve", "--tiles", tiles, "--stain-config", stain_path,
            "--out-dir", tmp_path / "out",
        )
        assert code == 0, err
        assert "skipped=0" in out
        maps = io.load_cell_maps(tmp_path / "out" / "cells_s1.csv", "s1")
        assert set(maps) == {"dab", "fastred"}
        assert maps["dab"].points[0] == pytest.approx(
            [100.0 + 6.5 * 0.5, 50.0 + 6.5 * 0.5]
        )
        # fastred occupies rows 20..23 and cols 10..13: centroid (22.0, 12.0)
        assert maps["fastred"].points[0] == pytest.approx(
            [100.0 + 12.0 * 0.5, 50.0 + 22.0 * 0.5]
        )

    def test_unreadable_tile_skipped_with_warning(self, tmp_path, capsys):
        stain_path, tiles = write_stain_fixture(tmp_path)
        (tiles / "broken.png").write_text("not a png")
        (tiles / "broken.json").write_text(
            json.dumps({"origin_um": [0, 0], "resolution_um_per_px": 0.5})
        )
        code, out, err = run(
            capsys, "deconvolve", "--tiles", tiles, "--stain-config", stain_path,
            "--out-dir", tmp_path / "out",
        )
        assert code == 0
        assert "skipping" in err
        assert "skipped=1" in out

    def test_missing_tiles_dir(self, tmp_path, capsys):
        stain_path, _ = write_stain_fixture(tmp_path)
        code, _, err = run(
            capsys, "deconvolve", "--tiles", tmp_path / "nope",
            "--stain-config", stain_path,
        )
        assert code == 2
        assert "nope" in err


class TestFeaturesAndRank:
    def test_full_pipeline(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        for cmd in ("match", "features", "rank"):
            code, out, err = run(
                capsys, cmd, "--config", FIXTURE / "stack.json", "--out-dir", out_dir
            )
            assert code == 0, f"{cmd}: {err}"
        matrix = io.load_feature_matrix(out_dir / "features.csv")
        assert len(matrix.columns) == 19
        assert matrix.complete_mask().all()

        scores = (out_dir / "scores.csv").read_text().strip().split("\n")
        assert len(scores) == len(matrix.row_ids) + 1
        hist = (out_dir / "score_histogram.csv").read_text().strip().split("\n")
        assert sum(int(l.split(",")[2]) for l in hist[1:]) == len(matrix.row_ids)
        overlay = (out_dir / "score_overlay.csv").read_text().strip().split("\n")
        assert len(overlay) == len(matrix.row_ids) + 1
        loadings = json.loads((out_dir / "loadings.json").read_text())
        assert 0.0 < loadings["explained_variance"] <= 1.0
        assert len(loadings["loadings"]) == 19

    def test_rank_without_features_file_exits_2(self, tmp_path, capsys):
        code, _, err = run(capsys, "rank", "--out-dir", tmp_path)
        assert code == 2
        assert "features.csv" in err
