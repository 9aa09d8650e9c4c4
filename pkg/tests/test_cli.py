import json

import pytest

from mvmatch.cli import main
from mvmatch.config import PipelineConfig, save_config
from mvmatch.grids import read_warp_file
from mvmatch.tracks import read_tracks_tsv


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    """Small sizes so the CLI chain stays quick."""
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    cfg = PipelineConfig(track_tokens=32, matcher_samples=300,
                         base_resolution=48, targets_per_group=3)
    save_config(path, cfg)
    return str(path)


@pytest.fixture(scope="module")
def planar_scene(tmp_path_factory, fast_config):
    out = tmp_path_factory.mktemp("scene")
    rc = main(["gen-scene", "--kind", "planar", "--views", "4",
               "--image-size", "48", "--seed", "5", "--out", str(out),
               "--config", fast_config])
    assert rc == 0
    return out / "scene.json"


@pytest.fixture(scope="module")
def matched_dir(tmp_path_factory, planar_scene, fast_config):
    out = tmp_path_factory.mktemp("warps")
    rc = main(["match", "--scene", str(planar_scene), "--seed", "3",
               "--out", str(out), "--config", fast_config])
    assert rc == 0
    return out


class TestGenScene:
    def test_writes_scene(self, planar_scene):
        payload = json.loads(planar_scene.read_text())
        assert payload["kind"] == "planar"
        assert len(payload["homographies"]) == 4

    def test_point_cloud(self, tmp_path):
        rc = main(["gen-scene", "--kind", "point-cloud", "--views", "3",
                   "--image-size", "32", "--points", "500", "--seed", "2",
                   "--out", str(tmp_path)])
        assert rc == 0
        payload = json.loads((tmp_path / "scene.json").read_text())
        assert payload["kind"] == "point_cloud"
        assert len(payload["points"]) == 500


class TestBuildTracks:
    def test_writes_tracks(self, tmp_path, planar_scene, fast_config):
        rc = main(["build-tracks", "--scene", str(planar_scene), "--seed", "1",
                   "--out", str(tmp_path), "--config", fast_config])
        assert rc == 0
        tracks, v = read_tracks_tsv(tmp_path / "tracks.tsv")
        assert v == 4
        assert len(tracks) == 32


class TestSampleGroups:
    def test_full_budget(self, tmp_path, planar_scene, fast_config):
        rc = main(["sample-groups", "--scene", str(planar_scene), "--seed", "0",
                   "--out", str(tmp_path), "--budget", "full",
                   "--config", fast_config])
        assert rc == 0
        payload = json.loads((tmp_path / "groups.json").read_text())
        stage1 = [g for g in payload["groups"] if g["stage"] == 1]
        assert len(stage1) == 8  # ceil(4 * sqrt(4))
        assert {g["source"] for g in stage1} == {0, 1, 2, 3}

    def test_half_budget(self, tmp_path, planar_scene, fast_config):
        rc = main(["sample-groups", "--scene", str(planar_scene), "--seed", "0",
                   "--out", str(tmp_path), "--budget", "half",
                   "--config", fast_config])
        assert rc == 0
        payload = json.loads((tmp_path / "groups.json").read_text())
        assert len([g for g in payload["groups"] if g["stage"] == 1]) == 4

    def test_overlap_from_warp_files(self, tmp_path, matched_dir, fast_config):
        rc = main(["sample-groups", "--warps", str(matched_dir), "--seed", "0",
                   "--out", str(tmp_path), "--config", fast_config])
        assert rc == 0
        payload = json.loads((tmp_path / "groups.json").read_text())
        assert len(payload["groups"]) >= 4

    def test_overlap_from_descriptor_table(self, tmp_path, fast_config):
        import numpy as np
        rng = np.random.default_rng(0)
        table = tmp_path / "desc.tsv"
        rows = rng.uniform(0.1, 1.0, size=(5, 8))
        table.write_text("\n".join("\t".join(f"{v:.6f}" for v in row)
                                   for row in rows) + "\n")
        rc = main(["sample-groups", "--descriptors", str(table), "--seed", "0",
                   "--out", str(tmp_path), "--config", fast_config])
        assert rc == 0
        payload = json.loads((tmp_path / "groups.json").read_text())
        stage1 = [g for g in payload["groups"] if g["stage"] == 1]
        assert {g["source"] for g in stage1} == {0, 1, 2, 3, 4}

    def test_missing_inputs_rejected(self, tmp_path):
        rc = main(["sample-groups", "--seed", "0", "--out", str(tmp_path)])
        assert rc == 2


class TestMatch:
    def test_emits_warps_and_manifest(self, matched_dir):
        warps = sorted(matched_dir.glob("*.mvwf"))
        assert len(warps) == 3
        w = read_warp_file(warps[0])
        assert w.targets.shape == (48, 48, 2)
        manifest = json.loads((matched_dir / "manifest.json").read_text())
        assert manifest["groups"][0]["targets"] == [1, 2, 3]
        assert manifest["strides"] == [8, 4, 2, 1]

    def test_with_group_manifest(self, tmp_path, planar_scene, fast_config):
        gdir = tmp_path / "groups"
        gdir.mkdir()
        (gdir / "groups.json").write_text(json.dumps({
            "groups": [{"source": 0, "targets": [1], "stage": 1},
                       {"source": 1, "targets": [0], "stage": 2}]}))
        out = tmp_path / "warps"
        rc = main(["match", "--scene", str(planar_scene), "--seed", "3",
                   "--out", str(out), "--groups", str(gdir / "groups.json"),
                   "--config", fast_config])
        assert rc == 0
        assert len(sorted(out.glob("*.mvwf"))) == 2


@pytest.fixture(scope="module")
def both_dirs(tmp_path_factory, planar_scene, fast_config):
    gdir = tmp_path_factory.mktemp("g")
    (gdir / "groups.json").write_text(json.dumps({
        "groups": [{"source": 0, "targets": [1, 2], "stage": 1},
                   {"source": 1, "targets": [0], "stage": 2},
                   {"source": 2, "targets": [0], "stage": 2}]}))
    warps = tmp_path_factory.mktemp("w")
    rc = main(["match", "--scene", str(planar_scene), "--seed", "3",
               "--out", str(warps), "--groups", str(gdir / "groups.json"),
               "--config", fast_config])
    assert rc == 0
    return warps


class TestPostprocessAndEval:
    def test_postprocess(self, tmp_path, both_dirs, fast_config):
        rc = main(["postprocess", "--warps", str(both_dirs), "--seed", "0",
                   "--out", str(tmp_path), "--config", fast_config])
        assert rc == 0
        stats = json.loads((tmp_path / "stats.json").read_text())
        assert 0.0 <= stats["kept_match_rate"] <= 1.0
        header = (tmp_path / "sfm_tracks.tsv").read_text().splitlines()[0]
        assert header.startswith("# V=")

    def test_eval_homography(self, tmp_path, both_dirs, planar_scene, fast_config):
        rc = main(["eval-homography", "--scene", str(planar_scene),
                   "--warps", str(both_dirs), "--seed", "0",
                   "--out", str(tmp_path), "--threshold", "1,3,5",
                   "--config", fast_config])
        assert rc == 0
        lines = (tmp_path / "homography_auc.csv").read_text().splitlines()
        assert lines[0] == "solver,threshold_px,auc,pairs"
        assert len(lines) == 7  # 2 solvers x 3 thresholds

    def test_eval_homography_rejects_point_cloud(self, tmp_path, fast_config):
        rc = main(["gen-scene", "--kind", "point-cloud", "--views", "2",
                   "--image-size", "32", "--points", "200", "--seed", "1",
                   "--out", str(tmp_path)])
        assert rc == 0
        rc = main(["eval-homography", "--scene", str(tmp_path / "scene.json"),
                   "--warps", str(tmp_path), "--out", str(tmp_path)])
        assert rc == 2


class TestEvalTriangulation:
    def test_round_trip(self, tmp_path):
        rc = main(["gen-scene", "--kind", "point-cloud", "--views", "4",
                   "--image-size", "64", "--points", "2000", "--seed", "9",
                   "--out", str(tmp_path)])
        assert rc == 0
        scene_path = tmp_path / "scene.json"
        # build a track file from exact projections of a few scene points
        from mvmatch.oracle import load_scene
        scene = load_scene(scene_path)
        lines = ["# V=4\tT=20", "token_id\tview_id\tx\ty"]
        for tid in range(20):
            p = scene.points[tid * 5]
            for v, cam in enumerate(scene.cameras):
                uv, depth = cam.project(p[None])
                if depth[0] > 0:
                    lines.append(f"{tid}\t{v}\t{uv[0,0]:.6f}\t{uv[0,1]:.6f}")
        tracks_path = tmp_path / "tracks.tsv"
        tracks_path.write_text("\n".join(lines) + "\n")
        rc = main(["eval-triangulation", "--scene", str(scene_path),
                   "--tracks", str(tracks_path), "--out", str(tmp_path),
                   "--threshold", "0.01,0.05", "--seed", "0"])
        assert rc == 0
        rows = (tmp_path / "triangulation.csv").read_text().splitlines()
        assert rows[0] == "threshold,accuracy,completeness,triangulated,skipped"
        first = rows[1].split(",")
        assert float(first[1]) == 1.0  # exact tracks triangulate exactly


class TestDeterminism:
    def test_cli_outputs_byte_identical(self, tmp_path, planar_scene, fast_config):
        outs = []
        for run in ("a", "b"):
            d = tmp_path / run
            rc = main(["match", "--scene", str(planar_scene), "--seed", "7",
                       "--out", str(d), "--config", fast_config])
            assert rc == 0
            rc = main(["postprocess", "--warps", str(d), "--seed", "7",
                       "--out", str(d / "post"), "--config", fast_config])
            assert rc == 0
            outs.append(d)
        for rel in sorted(p.relative_to(outs[0])
                          for p in outs[0].rglob("*") if p.is_file()):
            a = (outs[0] / rel).read_bytes()
            b = (outs[1] / rel).read_bytes()
            assert a == b, f"{rel} differs between identical runs"


class TestConfigFile:
    def test_init_config_round_trip(self, tmp_path):
        rc = main(["init-config", "--out", str(tmp_path), "--seed", "0"])
        assert rc == 0
        from mvmatch.config import load_config
        cfg = load_config(tmp_path / "config.json")
        assert cfg == PipelineConfig()

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"bogus": 1}')
        from mvmatch.config import load_config
        with pytest.raises(ValueError, match="bogus"):
            load_config(path)
