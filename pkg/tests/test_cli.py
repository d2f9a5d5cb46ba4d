import json
from pathlib import Path

import pytest
import yaml

from ego2front.cli import main
from ego2front.config import config_digest, save_resolved
from ego2front.datapipe import DatasetManifest
from ego2front.toydata import generate_toy_dataset
from tests.conftest import tiny_config


@pytest.fixture(scope="module")
def prep_fixture(tmp_path_factory):
    """The 3-frontal / 30-ego pairing fixture with known timestamps."""
    root = tmp_path_factory.mktemp("prepfx")
    generate_toy_dataset(
        root, subjects=1, frontals_per_subject=3, egos_per_frontal=10, image_size=32, seed=1
    )
    return root


@pytest.fixture(scope="module")
def cli_cfg_path(tmp_path_factory):
    cfg = tiny_config()
    cfg.train.steps = 8
    cfg.train.checkpoint_every = 4
    cfg.train.log_every = 1
    cfg.codec.pretrain_steps = 30
    cfg.eval.sample_steps = 3
    cfg.sample.steps = 3
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    save_resolved(cfg, path)
    return path


@pytest.fixture(scope="module")
def prepped_manifest(prep_fixture):
    out = prep_fixture / "manifest.jsonl"
    code = main(
        [
            "prep",
            "--ego-dir", str(prep_fixture / "ego"),
            "--frontal-dir", str(prep_fixture / "frontal"),
            "--mask-dir", str(prep_fixture / "masks"),
            "--out", str(out),
            "--window", "5.0",
            "--per-frontal", "10",
            "--val-fraction", "0.34",
        ]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_run(cli_cfg_path, prepped_manifest, tmp_path_factory):
    out_root = tmp_path_factory.mktemp("runs")
    code = main(
        [
            "train",
            "--config", str(cli_cfg_path),
            "--manifest", str(prepped_manifest),
            "--out-root", str(out_root),
        ]
    )
    assert code == 0
    run_dirs = list(out_root.glob("run_*"))
    assert len(run_dirs) == 1
    return run_dirs[0]


class TestPrep:
    def test_manifest_has_three_entries_with_capped_egos(self, prepped_manifest):
        manifest = DatasetManifest.load(prepped_manifest)
        assert len(manifest.entries) == 3
        for e in manifest.entries:
            assert 1 <= len(e.ego_paths) <= 10

    def test_rerun_is_byte_identical(self, prep_fixture, prepped_manifest):
        out2 = prepped_manifest.parent / "again.jsonl"
        code = main(
            [
                "prep",
                "--ego-dir", str(prep_fixture / "ego"),
                "--frontal-dir", str(prep_fixture / "frontal"),
                "--mask-dir", str(prep_fixture / "masks"),
                "--out", str(out2),
                "--window", "5.0",
                "--per-frontal", "10",
                "--val-fraction", "0.34",
            ]
        )
        assert code == 0
        assert out2.read_bytes() == prepped_manifest.read_bytes()

    def test_empty_frontal_dir_fails(self, tmp_path):
        (tmp_path / "ego").mkdir()
        (tmp_path / "frontal").mkdir()
        code = main(
            [
                "prep",
                "--ego-dir", str(tmp_path / "ego"),
                "--frontal-dir", str(tmp_path / "frontal"),
                "--out", str(tmp_path / "m.jsonl"),
            ]
        )
        assert code == 1
        assert not (tmp_path / "m.jsonl").exists()

    def test_unknown_flag_is_user_error(self):
        assert main(["prep", "--nope"]) == 1


class TestTrain:
    def test_outputs_in_config_hash_dir(self, trained_run, cli_cfg_path):
        cfg = tiny_config()
        raw = yaml.safe_load(Path(cli_cfg_path).read_text())
        assert trained_run.name.startswith("run_")
        assert (trained_run / "config.yaml").exists()
        assert (trained_run / "checkpoint.pt").exists()
        assert (trained_run / "checkpoint_init.pt").exists()
        assert (trained_run / "metrics.jsonl").exists()
        assert (trained_run / "loss_curves.png").exists()
        assert not (trained_run / "run.lock").exists()
        persisted = yaml.safe_load((trained_run / "config.yaml").read_text())
        assert persisted == raw

    def test_resume_continues_to_target(self, cli_cfg_path, prepped_manifest, trained_run):
        code = main(
            [
                "train",
                "--config", str(cli_cfg_path),
                "--manifest", str(prepped_manifest),
                "--out-root", str(trained_run.parent),
                "--resume",
            ]
        )
        assert code == 0

    def test_unknown_config_key_listed(self, prepped_manifest, tmp_path):
        code = main(
            [
                "train",
                "--manifest", str(prepped_manifest),
                "--out-root", str(tmp_path),
                "--set", "train.nonsense=3",
            ]
        )
        assert code == 1

    def test_locked_directory_refused(self, cli_cfg_path, prepped_manifest, tmp_path):
        cfg_digest_dir = None
        import ego2front.config as cfgmod

        cfg = cfgmod.load_config(cli_cfg_path)
        cfg_digest_dir = tmp_path / f"run_{config_digest(cfg)}"
        cfg_digest_dir.mkdir(parents=True)
        (cfg_digest_dir / "run.lock").touch()
        code = main(
            [
                "train",
                "--config", str(cli_cfg_path),
                "--manifest", str(prepped_manifest),
                "--out-root", str(tmp_path),
            ]
        )
        assert code == 1


class TestInfer:
    def test_deterministic_byte_identical_outputs(self, trained_run, prep_fixture, tmp_path, prepped_manifest):
        manifest = DatasetManifest.load(prepped_manifest)
        entry = manifest.entries[0]
        args = [
            "infer",
            "--checkpoint", str(trained_run / "checkpoint.pt"),
            "--ego", str(prep_fixture / entry.ego_paths[0]),
            "--mask", str(prep_fixture / entry.pose_mask_path),
            "--steps", "3",
            "--seed", "11",
        ]
        code = main(args + ["--out", str(tmp_path / "a.png")])
        assert code == 0
        code = main(args + ["--out", str(tmp_path / "b.png")])
        assert code == 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        assert (tmp_path / "a_grid.png").exists()
        assert json.loads((tmp_path / "a.json").read_text())["seed"] == 11

    def test_single_step_path(self, trained_run, prep_fixture, prepped_manifest, tmp_path):
        manifest = DatasetManifest.load(prepped_manifest)
        entry = manifest.entries[0]
        code = main(
            [
                "infer",
                "--checkpoint", str(trained_run / "checkpoint.pt"),
                "--ego", str(prep_fixture / entry.ego_paths[0]),
                "--mask", str(prep_fixture / entry.pose_mask_path),
                "--out", str(tmp_path / "one.png"),
                "--steps", "1",
            ]
        )
        assert code == 0

    def test_output_resolution_matches_config(self, trained_run, prep_fixture, prepped_manifest, tmp_path):
        from PIL import Image

        manifest = DatasetManifest.load(prepped_manifest)
        entry = manifest.entries[0]
        out = tmp_path / "r.png"
        main(
            [
                "infer",
                "--checkpoint", str(trained_run / "checkpoint.pt"),
                "--ego", str(prep_fixture / entry.ego_paths[0]),
                "--mask", str(prep_fixture / entry.pose_mask_path),
                "--out", str(out),
                "--steps", "2",
            ]
        )
        with Image.open(out) as im:
            assert im.size == (32, 32)

    def test_wrong_resolution_rejected(self, trained_run, tmp_path):
        from ego2front.tensors import ImageTensor, save_image
        import torch

        big = ImageTensor(torch.zeros(3, 64, 64))
        save_image(big, tmp_path / "big.png")
        code = main(
            [
                "infer",
                "--checkpoint", str(trained_run / "checkpoint.pt"),
                "--ego", str(tmp_path / "big.png"),
                "--mask", str(tmp_path / "big.png"),
                "--out", str(tmp_path / "x.png"),
            ]
        )
        assert code == 1


class TestEval:
    def test_stub_identity_hits_caps(self, prepped_manifest, cli_cfg_path, tmp_path):
        code = main(
            [
                "eval",
                "--manifest", str(prepped_manifest),
                "--split", "train",
                "--report-dir", str(tmp_path / "rep"),
                "--stub-identity",
                "--config", str(cli_cfg_path),
            ]
        )
        assert code == 0
        tsv = (tmp_path / "rep" / "report.tsv").read_text()
        rows = {}
        for line in tsv.splitlines():
            if line.startswith("#") or line.startswith("region"):
                continue
            region, metric, mean, std = line.split("\t")
            rows[(region, metric)] = (float(mean), float(std))
        assert rows[("full", "psnr")] == (99.0, 0.0)
        assert rows[("full", "ssim")] == (1.0, 0.0)
        assert rows[("full", "perceptual")] == (0.0, 0.0)
        assert (tmp_path / "rep" / "report.png").exists()
        assert (tmp_path / "rep" / "report.txt").exists()

    def test_model_eval_runs(self, trained_run, prepped_manifest, tmp_path):
        code = main(
            [
                "eval",
                "--checkpoint", str(trained_run / "checkpoint.pt"),
                "--manifest", str(prepped_manifest),
                "--split", "train",
                "--report-dir", str(tmp_path / "rep"),
                "--max-samples", "2",
            ]
        )
        assert code == 0
        preds = list((tmp_path / "rep" / "predictions").glob("*.png"))
        assert len(preds) == 2

    def test_empty_split_nonzero_exit(self, prepped_manifest, tmp_path, cli_cfg_path):
        code = main(
            [
                "eval",
                "--manifest", str(prepped_manifest),
                "--split", "nosuch",
                "--report-dir", str(tmp_path / "rep"),
                "--stub-identity",
                "--config", str(cli_cfg_path),
            ]
        )
        assert code == 1


class TestRank:
    def write_reference_ballots(self, path: Path):
        lines = ["# rater_id, methods best-to-worst"]
        orders = (
            [("anim_b", "anim_a", "anim_c", "anim_d")] * 4
            + [("anim_c", "anim_b", "anim_a", "anim_d")] * 1
            + [("anim_a", "anim_b", "anim_d", "anim_c")] * 10
            + [("anim_a", "anim_b", "anim_c", "anim_d")] * 26
        )
        for i, order in enumerate(orders):
            lines.append(f"r{i:02d}," + ",".join(order))
        path.write_text("\n".join(lines) + "\n")

    def test_reference_ballots_conserve_total(self, tmp_path):
        ballots = tmp_path / "ballots.csv"
        self.write_reference_ballots(ballots)
        code = main(["rank", "--ballots", str(ballots), "--out-dir", str(tmp_path / "out")])
        assert code == 0
        tsv = (tmp_path / "out" / "rank.tsv").read_text()
        scores = {}
        for line in tsv.splitlines():
            if line.startswith("#") or line.startswith("method"):
                continue
            method, borda, mean_rank = line.split("\t")
            scores[method] = (int(borda), float(mean_rank))
        assert sum(s for s, _ in scores.values()) == 246
        assert scores["anim_a"][0] == 117
        assert abs(scores["anim_a"][1] - 1.15) < 0.01
        assert (tmp_path / "out" / "rank.png").exists()

    def test_missing_file_user_error(self, tmp_path):
        assert main(["rank", "--ballots", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)]) == 1


@pytest.mark.slow
class TestAblate:
    def test_two_by_two_matrix(self, prepped_manifest, tmp_path):
        cfg = tiny_config()
        cfg.train.steps = 2
        cfg.train.checkpoint_every = 2
        cfg.codec.pretrain_steps = 10
        cfg.eval.sample_steps = 2
        cfg_path = tmp_path / "base.yaml"
        save_resolved(cfg, cfg_path)
        out_root = tmp_path / "ablation"
        code = main(
            [
                "ablate",
                "--config", str(cfg_path),
                "--manifest", str(prepped_manifest),
                "--out-root", str(out_root),
                "--axes", "control,perc_loss",
                "--max-samples", "1",
            ]
        )
        assert code == 0
        lines = [
            l for l in (out_root / "ablation.tsv").read_text().splitlines()
            if not l.startswith(("#", "variant"))
        ]
        assert len(lines) == 4
        digests = [l.split("\t")[1] for l in lines]
        assert len(set(digests)) == 4
        variants = [l.split("\t")[0] for l in lines]
        assert "control-on+perc-on" in variants and "control-off+perc-off" in variants
        assert (out_root / "ablation.png").exists()

    def test_unknown_axis_rejected(self, prepped_manifest, tmp_path):
        code = main(
            [
                "ablate",
                "--manifest", str(prepped_manifest),
                "--out-root", str(tmp_path),
                "--axes", "wings",
            ]
        )
        assert code == 1
