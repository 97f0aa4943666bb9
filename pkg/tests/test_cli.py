import csv
import json

import numpy as np
import pytest

from seqamodal.cli import dataset_digest_excluding_manifest, main
from seqamodal.occlusion import layer_union_masks
from seqamodal.scene import read_dataset


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared gen -> train -> infer chain at minimal scale."""
    ws = tmp_path_factory.mktemp("cli")
    assert run("gen", "--num-scenes", "5", "--size", "32", "--max-objects", "3",
               "--seed", "7", "--out", str(ws / "ds")) == 0
    assert run("train", "--data", str(ws / "ds"), "--steps", "15", "--batch", "8",
               "--T", "20", "--base-width", "8", "--depth", "2",
               "--time-embed-dim", "16", "--checkpoint-every", "0",
               "--seed", "3", "--out", str(ws / "run")) == 0
    assert run("infer", "--ckpt", str(ws / "run" / "checkpoint.ckpt"),
               "--data", str(ws / "ds"), "--k", "2", "--seed", "1",
               "--out", str(ws / "preds")) == 0
    return ws


class TestGen:
    def test_deterministic_digests(self, tmp_path):
        for sub in ("a", "b"):
            assert run("gen", "--num-scenes", "4", "--size", "32",
                       "--max-objects", "3", "--seed", "9",
                       "--out", str(tmp_path / sub)) == 0
        assert dataset_digest_excluding_manifest(tmp_path / "a") == \
            dataset_digest_excluding_manifest(tmp_path / "b")

    def test_max_objects_one_gives_nmax_one(self, tmp_path):
        assert run("gen", "--num-scenes", "3", "--max-objects", "1",
                   "--seed", "1", "--out", str(tmp_path / "d")) == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["n_max"] == 1

    def test_manifest_area_matches_recount(self, tmp_path):
        assert run("gen", "--num-scenes", "4", "--max-objects", "3",
                   "--seed", "2", "--out", str(tmp_path / "d")) == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        scenes = read_dataset(tmp_path / "d")
        areas = [int(o.amodal_mask.sum()) for s in scenes for o in s.objects]
        assert manifest["area_min"] == min(areas)

    def test_bad_flags_exit_one(self, tmp_path):
        assert run("gen", "--min-objects", "5", "--max-objects", "2",
                   "--out", str(tmp_path / "x")) == 1


class TestTrain:
    def test_run_manifest_written(self, workspace):
        manifest = json.loads((workspace / "run" / "run_manifest.json").read_text())
        assert manifest["command"] == "train"
        assert "dataset" in manifest["digests"]
        assert "checkpoint" in manifest["digests"]

    def test_default_lr_matches_recipe(self, workspace):
        cfg = json.loads((workspace / "run" / "train_config.json").read_text())
        assert cfg["learning_rate"] == 1e-4

    def test_missing_dataset_exit_one(self, tmp_path):
        assert run("train", "--data", str(tmp_path / "nope")) == 1

    def test_perturbed_fraction_tracks_ratio(self, workspace, tmp_path):
        out = tmp_path / "noisy"
        assert run("train", "--data", str(workspace / "ds"), "--steps", "40",
                   "--batch", "16", "--T", "20", "--base-width", "8",
                   "--depth", "2", "--time-embed-dim", "16",
                   "--checkpoint-every", "0", "--noise-ratio", "0.1",
                   "--out", str(out)) == 0
        with open(out / "training_log.csv") as f:
            rows = list(csv.DictReader(f))
        frac = float(rows[-1]["perturbed_fraction"])
        # eligible share is below 1.0 (single-layer scenes are skipped)
        assert 0.02 <= frac <= 0.15

    def test_resume_step_numbering(self, workspace, tmp_path):
        out = tmp_path / "resumed"
        assert run("train", "--data", str(workspace / "ds"), "--steps", "5",
                   "--batch", "8", "--T", "20", "--base-width", "8",
                   "--depth", "2", "--time-embed-dim", "16",
                   "--checkpoint-every", "0",
                   "--resume", str(workspace / "run" / "checkpoint.ckpt"),
                   "--out", str(out)) == 0
        with open(out / "training_log.csv") as f:
            steps = [int(r["step"]) for r in csv.DictReader(f)]
        assert steps[0] > 15 and steps == sorted(steps)


class TestInfer:
    def test_bundles_have_stop_reason(self, workspace):
        taus = list((workspace / "preds").glob("*/tau.json"))
        assert len(taus) == 5
        for tau_file in taus:
            tau = json.loads(tau_file.read_text())
            assert tau["stop_reason"] in ("max_layers", "null_prediction",
                                          "area_below_min")

    def test_default_k_is_three(self, workspace, tmp_path):
        out = tmp_path / "k3"
        assert run("infer", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"),
                   "--data", str(workspace / "ds"), "--seed", "2",
                   "--out", str(out)) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["K"] == 3

    def test_n_max_bound_respected(self, workspace, tmp_path):
        out = tmp_path / "nmax"
        assert run("infer", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"),
                   "--data", str(workspace / "ds"), "--k", "2",
                   "--n-max", "2", "--out", str(out)) == 0
        for tau_file in out.glob("*/tau.json"):
            tau = json.loads(tau_file.read_text())
            assert len(tau["layers"]) <= 2

    def test_requires_data_or_image(self, workspace):
        assert run("infer", "--ckpt",
                   str(workspace / "run" / "checkpoint.ckpt")) == 1


class TestEval:
    def test_eval_runs_and_reports(self, workspace, tmp_path):
        out = tmp_path / "report"
        assert run("eval", "--pred", str(workspace / "preds"),
                   "--data", str(workspace / "ds"), "--out", str(out)) == 0
        assert (out / "report.csv").exists()
        assert (out / "report.md").exists()

    def test_identity_predictions_score_one(self, workspace, tmp_path):
        # feed ground truth as predictions
        from seqamodal.inference import LayerPrediction, MaskSequence, write_bundle
        scenes = read_dataset(workspace / "ds")
        pred_root = tmp_path / "gt_preds"
        for scene in scenes:
            seq = MaskSequence(stop_reason="null_prediction")
            for k, m in enumerate(layer_union_masks(scene), start=1):
                seq.tau.append(LayerPrediction(
                    samples=[m], mean_map=m.astype(float), selected=m,
                    selected_index=0, layer_index=k))
            write_bundle(seq, pred_root / scene.scene_id)
        out = tmp_path / "gt_report"
        assert run("eval", "--pred", str(pred_root),
                   "--data", str(workspace / "ds"), "--out", str(out)) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["ap_with_layer"] == 1.0
        assert report["ap_without_layer"] == 1.0
        for pl in report["per_layer"]:
            assert pl["mean_iou"] == 1.0 and pl["ap"] == 1.0

    def test_digest_mismatch_rejected_without_force(self, workspace, tmp_path):
        assert run("gen", "--num-scenes", "5", "--size", "32",
                   "--max-objects", "3", "--seed", "8",
                   "--out", str(tmp_path / "other_ds")) == 0
        # same scene count so bundle lookup succeeds; digest differs
        assert run("eval", "--pred", str(workspace / "preds"),
                   "--data", str(tmp_path / "other_ds"),
                   "--out", str(tmp_path / "r")) == 1

    def test_rerun_byte_identical(self, workspace, tmp_path):
        outs = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            assert run("eval", "--pred", str(workspace / "preds"),
                       "--data", str(workspace / "ds"), "--out", str(out)) == 0
            outs.append((out / "report.csv").read_bytes())
        assert outs[0] == outs[1]


class TestAblate:
    def test_ensemble_table_shape(self, workspace, tmp_path):
        out = tmp_path / "ens"
        assert run("ablate", "ensemble", "--ckpt",
                   str(workspace / "run" / "checkpoint.ckpt"),
                   "--data", str(workspace / "ds"), "--k", "1,2",
                   "--seed", "0", "--out", str(out)) == 0
        with open(out / "ensemble.csv") as f:
            rows = list(csv.DictReader(f))
        ks = {r["K"] for r in rows}
        assert ks == {"1", "2"}
        # row count = |K_values| x layers
        n_layers = len({r["layer"] for r in rows})
        assert len(rows) == 2 * n_layers

    def test_selection_report_format(self, workspace, tmp_path):
        out = tmp_path / "sel"
        assert run("ablate", "selection", "--ckpt",
                   str(workspace / "run" / "checkpoint.ckpt"),
                   "--data", str(workspace / "ds"), "--k-base", "2",
                   "--seed", "0", "--out", str(out)) == 0
        with open(out / "selection.csv") as f:
            rows = list(csv.DictReader(f))
        assert rows
        for r in rows:
            # absolute values and deltas both present
            assert {"layer", "ap_select", "ap_mean", "delta"} <= set(r)

    def test_noise_requires_train_data(self, workspace, tmp_path):
        assert run("ablate", "noise", "--data", str(workspace / "ds"),
                   "--out", str(tmp_path / "n")) == 1

    def test_noise_sweep_tiny(self, workspace, tmp_path):
        out = tmp_path / "noise"
        assert run("ablate", "noise", "--data", str(workspace / "ds"),
                   "--train-data", str(workspace / "ds"),
                   "--levels", "0,0.2", "--steps", "10", "--T", "15",
                   "--batch", "8", "--base-width", "8", "--depth", "2",
                   "--k", "1", "--out", str(out)) == 0
        with open(out / "noise.csv") as f:
            rows = list(csv.DictReader(f))
        levels = {r["noise_level"] for r in rows}
        assert "0" in levels or "0.000000" in levels
        assert len(levels) == 2
