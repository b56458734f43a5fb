import numpy as np
import pytest

from patchvote import dataio
from patchvote.cli import main
from patchvote.geometry import (
    from_vector,
    random_transform,
    rotation_angle,
    to_vector,
)
from patchvote.shapes import make_blob


@pytest.fixture(scope="module")
def model_ply(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "rock.ply"
    dataio.save_cloud(make_blob(2200, seed=5), path)
    return path


@pytest.fixture(scope="module")
def db_path(tmp_path_factory, model_ply):
    out = tmp_path_factory.mktemp("db") / "rock.db"
    code = main(["make-patches", "--model", str(model_ply), "--out", str(out),
                 "--num", "250", "--k", "4", "--seed", "3", "--object-id", "rock"])
    assert code == 0
    return out


class TestMakePatches:
    def test_missing_model_exits_2(self, tmp_path, capsys):
        code = main(["make-patches", "--model", str(tmp_path / "nope.ply"),
                     "--out", str(tmp_path / "x.db")])
        assert code == 2
        assert "nope.ply" in capsys.readouterr().err

    def test_reports_counts(self, model_ply, tmp_path, capsys):
        out = tmp_path / "db.bin"
        code = main(["make-patches", "--model", str(model_ply), "--out", str(out),
                     "--num", "60", "--k", "0", "--seed", "1"])
        assert code == 0
        text = capsys.readouterr().out
        assert "records" in text and "dropped" in text
        assert out.exists()

    def test_k_zero_database_valid(self, model_ply, tmp_path):
        out = tmp_path / "k0.db"
        assert main(["make-patches", "--model", str(model_ply), "--out", str(out),
                     "--num", "40", "--k", "0", "--seed", "1"]) == 0
        from patchvote.patches import load_database
        db = load_database(out)
        assert all(r.neighbor_ids == [] for r in db.records)


class TestEstimate:
    def test_synth_round_trip_exact(self, model_ply, tmp_path, capsys):
        # noiseless synthetic scene built at the same sampling density and
        # seed as the database: the recovered pose must be essentially exact
        scene = tmp_path / "scene.ply"
        ann = tmp_path / "scene.txt"
        assert main(["synth", "--model", str(model_ply), "--out", str(scene),
                     "--annotation", str(ann), "--seed", "11"]) == 0
        db = tmp_path / "match.db"
        assert main(["make-patches", "--model", str(model_ply), "--out", str(db),
                     "--num", "120", "--k", "4", "--seed", "3"]) == 0
        results = tmp_path / "results.txt"
        code = main(["estimate", "--db", str(db), "--scene", str(scene),
                     "--out", str(results), "--m", "120", "--seed", "3"])
        assert code == 0
        gt = dataio.load_annotations(ann)[0].gt_pose
        records, _ = dataio.load_results(results)
        assert len(records) >= 1
        est = records[0][1]
        from patchvote.geometry import object_diameter
        model_pts, _ = dataio.load_cloud(model_ply)
        d = object_diameter(model_pts)
        assert np.linalg.norm(est.translation - gt.translation) < 1e-4 * d
        assert rotation_angle(est.rotation, gt.rotation) < np.deg2rad(0.1)
        out = capsys.readouterr().out
        assert "stage" in out  # per-stage timing printed

    def test_empty_segment_exits_3(self, db_path, tmp_path):
        # depth/mask pair with no labeled pixels
        depth = np.zeros((8, 8), dtype=np.uint16)
        mask = np.zeros((8, 8), dtype=np.uint8)
        dpath, mpath = tmp_path / "d.pgm", tmp_path / "m.pgm"
        dataio.save_pgm(depth, dpath)
        dataio.save_pgm(mask, mpath)
        cfgp = tmp_path / "c.cfg"
        cfgp.write_text("fx = 500\nfy = 500\ncx = 4\ncy = 4\n")
        code = main(["estimate", "--db", str(db_path), "--depth", str(dpath),
                     "--mask", str(mpath), "--class-id", "1",
                     "--out", str(tmp_path / "r.txt"), "--config", str(cfgp)])
        assert code == 3

    def test_depth_mask_path(self, model_ply, db_path, tmp_path):
        # project a posed model into a synthetic depth/mask pair, then
        # estimate from those files end to end
        model_pts, _ = dataio.load_cloud(model_ply)
        rng = np.random.default_rng(4)
        pose = random_transform(rng, max_translation=0.05)
        pose.translation[2] += 1.0  # keep the object in front of the camera
        posed = pose.apply(model_pts)
        intr = dataio.CameraIntrinsics(fx=400.0, fy=400.0, cx=64.0, cy=64.0,
                                       depth_scale=1e-4)
        u = np.round(posed[:, 0] / posed[:, 2] * intr.fx + intr.cx).astype(int)
        v = np.round(posed[:, 1] / posed[:, 2] * intr.fy + intr.cy).astype(int)
        depth = np.zeros((128, 128), dtype=np.uint16)
        mask = np.zeros((128, 128), dtype=np.uint8)
        keep = (u >= 0) & (u < 128) & (v >= 0) & (v < 128)
        raw = np.round(posed[:, 2] / intr.depth_scale).astype(np.uint16)
        for uu, vv, dd in zip(u[keep], v[keep], raw[keep]):
            if depth[vv, uu] == 0 or dd < depth[vv, uu]:
                depth[vv, uu] = dd
                mask[vv, uu] = 7
        dpath, mpath = tmp_path / "depth.pgm", tmp_path / "mask.pgm"
        dataio.save_pgm(depth, dpath)
        dataio.save_pgm(mask, mpath)
        cfgp = tmp_path / "cam.cfg"
        cfgp.write_text("fx = 400\nfy = 400\ncx = 64\ncy = 64\ndepth_scale = 1e-4\n")
        results = tmp_path / "res.txt"
        code = main(["estimate", "--db", str(db_path), "--depth", str(dpath),
                     "--mask", str(mpath), "--class-id", "7", "--m", "0",
                     "--out", str(results), "--config", str(cfgp), "--seed", "3"])
        assert code == 0
        records, _ = dataio.load_results(results)
        assert records
        # quantized back-projection: expect a rough but sane pose
        from patchvote.geometry import object_diameter
        d = object_diameter(model_pts)
        err = np.linalg.norm(records[0][1].translation - pose.translation)
        assert err < 0.5 * d

    def test_deterministic_output_body(self, model_ply, db_path, tmp_path):
        scene = tmp_path / "s.ply"
        ann = tmp_path / "s.txt"
        main(["synth", "--model", str(model_ply), "--out", str(scene),
              "--annotation", str(ann), "--seed", "6", "--noise", "0.003",
              "--crop", "0.2"])
        bodies = []
        for i in (1, 2):
            out = tmp_path / f"r{i}.txt"
            code = main(["estimate", "--db", str(db_path), "--scene", str(scene),
                         "--out", str(out), "--seed", "3", "--m", "0"])
            assert code == 0
            bodies.append([l for l in out.read_text().splitlines()
                           if not l.startswith("#")])
        assert bodies[0] == bodies[1]


class TestEvaluate:
    def _setup(self, tmp_path, model_ply, offset_frac):
        from patchvote.geometry import object_diameter
        model_pts, _ = dataio.load_cloud(model_ply)
        d = object_diameter(model_pts)
        models_dir = tmp_path / "models"
        models_dir.mkdir(exist_ok=True)
        dataio.save_cloud(model_pts, models_dir / "rock.ply")
        pose = random_transform(np.random.default_rng(8), max_translation=0.3)
        gt_file = tmp_path / "gt.txt"
        dataio.save_annotations(gt_file, [dataio.SceneAnnotation("rock", pose)])
        est = from_vector(to_vector(pose) + np.array([offset_frac * d, 0, 0, 0, 0, 0]))
        res_file = tmp_path / "res.txt"
        from patchvote.metrics import DetectionResult
        dataio.save_results(res_file, detections=[DetectionResult("rock", est, 1.0)])
        return res_file, gt_file, models_dir

    def test_perfect_fixture(self, tmp_path, model_ply, capsys):
        res, gt, models = self._setup(tmp_path, model_ply, 0.0)
        assert main(["evaluate", "--results", str(res), "--gt", str(gt),
                     "--models", str(models)]) == 0
        out = capsys.readouterr().out
        assert "1.000" in out

    def test_shifted_fixture_scores_zero(self, tmp_path, model_ply, capsys):
        res, gt, models = self._setup(tmp_path, model_ply, 0.2)
        assert main(["evaluate", "--results", str(res), "--gt", str(gt),
                     "--models", str(models)]) == 0
        report = capsys.readouterr().out
        assert "0.000" in report

    def test_exit_zero_even_when_poor(self, tmp_path, model_ply):
        res, gt, models = self._setup(tmp_path, model_ply, 0.5)
        assert main(["evaluate", "--results", str(res), "--gt", str(gt),
                     "--models", str(models), "--coeff", "0.1"]) == 0

    def test_parse_error_exits_2(self, tmp_path, model_ply):
        res, gt, models = self._setup(tmp_path, model_ply, 0.0)
        bad = tmp_path / "bad.txt"
        bad.write_text("obj x R 1 0 0 0 1 0 0 0 -1 t 0 0 0\n")
        assert main(["evaluate", "--results", str(bad), "--gt", str(gt),
                     "--models", str(models)]) == 2


class TestAblate:
    def test_three_rows_and_monotone_time(self, model_ply, tmp_path, capsys):
        scenes = tmp_path / "scenes"
        scenes.mkdir()
        for i in range(2):
            main(["synth", "--model", str(model_ply), "--out",
                  str(scenes / f"s{i}.ply"), "--annotation",
                  str(scenes / f"s{i}.txt"), "--seed", str(20 + i)])
        table = tmp_path / "table.txt"
        plot = tmp_path / "sweep.png"
        code = main(["ablate", "--sweep", "k", "--range", "0..2",
                     "--model", str(model_ply), "--scenes", str(scenes),
                     "--num", "150", "--seed", "3", "--m", "0",
                     "--out", str(table), "--plot", str(plot)])
        assert code == 0
        rows = [l.split() for l in table.read_text().splitlines()
                if not l.startswith("#")]
        assert len(rows) == 3
        times = [float(r[2]) for r in rows]
        assert all(a <= b + 1e-12 for a, b in zip(times, times[1:]))
        assert plot.exists() and plot.stat().st_size > 0

    def test_invalid_range_is_usage_error(self, model_ply, tmp_path):
        assert main(["ablate", "--sweep", "k", "--range", "5..2",
                     "--model", str(model_ply), "--scenes", str(tmp_path)]) == 1

    def test_single_k(self, model_ply, tmp_path):
        scenes = tmp_path / "scenes"
        scenes.mkdir()
        main(["synth", "--model", str(model_ply), "--out", str(scenes / "a.ply"),
              "--annotation", str(scenes / "a.txt"), "--seed", "30"])
        table = tmp_path / "t.txt"
        code = main(["ablate", "--sweep", "k", "--range", "2..2",
                     "--model", str(model_ply), "--scenes", str(scenes),
                     "--num", "120", "--seed", "3", "--m", "0", "--out", str(table)])
        assert code == 0
        rows = [l for l in table.read_text().splitlines() if not l.startswith("#")]
        assert len(rows) == 1


class TestSynthTrainOverlay:
    def test_synth_deterministic(self, model_ply, tmp_path):
        outs = []
        for i in (1, 2):
            scene = tmp_path / f"sc{i}.ply"
            main(["synth", "--model", str(model_ply), "--out", str(scene),
                  "--annotation", str(tmp_path / f"an{i}.txt"),
                  "--seed", "12", "--noise", "0.01", "--crop", "0.3"])
            outs.append(scene.read_bytes())
        assert outs[0] == outs[1]

    def test_synth_explicit_pose(self, model_ply, tmp_path):
        ann_path = tmp_path / "ann.txt"
        main(["synth", "--model", str(model_ply), "--out", str(tmp_path / "s.ply"),
              "--annotation", str(ann_path), "--pose", "0.1,0,0,0,0,1.2"])
        ann = dataio.load_annotations(ann_path)[0]
        assert np.allclose(to_vector(ann.gt_pose), [0.1, 0, 0, 0, 0, 1.2], atol=1e-9)

    def test_train_zero_epochs_produces_loadable_weights(self, db_path, tmp_path):
        weights = tmp_path / "w.bin"
        curve = tmp_path / "loss.csv"
        code = main(["train", "--db", str(db_path), "--out", str(weights),
                     "--epochs", "0", "--batch-size", "16", "--seed", "1",
                     "--loss-curve", str(curve)])
        assert code == 0
        from patchvote.regressor import MLPRegressor
        model = MLPRegressor.load(weights)
        pred = model.predict(np.zeros(model.d_f))
        assert np.all(np.isfinite(pred.vector))
        assert curve.read_text().startswith("epoch,")

    def test_plot_overlay(self, model_ply, tmp_path):
        scene = tmp_path / "sc.ply"
        ann = tmp_path / "an.txt"
        main(["synth", "--model", str(model_ply), "--out", str(scene),
              "--annotation", str(ann), "--seed", "2"])
        pose = dataio.load_annotations(ann)[0].gt_pose
        res = tmp_path / "res.txt"
        from patchvote.metrics import DetectionResult
        dataio.save_results(res, detections=[DetectionResult("rock", pose, 1.0)])
        out = tmp_path / "overlay.png"
        code = main(["plot-overlay", "--scene", str(scene), "--model", str(model_ply),
                     "--results", str(res), "--out", str(out)])
        assert code == 0
        assert out.exists() and out.stat().st_size > 0

    def test_unknown_command_usage(self):
        assert main(["frobnicate"]) == 1
