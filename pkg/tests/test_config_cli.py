"""Config parsing, CLI surface, pipeline stage wiring."""

import os
import subprocess
import sys

import numpy as np
import pytest

from anomaly3d import cli, io_formats, pipeline
from anomaly3d.config import default_config, parse_config
from anomaly3d.errors import ConfigError, MissingArtifactError


def write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, "\n# nothing here\n"))
        base = default_config()
        assert cfg.schedule.stage1_epochs == base.schedule.stage1_epochs == 250
        assert cfg.schedule.scr_start == 200
        assert cfg.schedule.stage2_epochs == 15
        assert cfg.schedule.dpca_start == 10
        assert cfg.loss.tau == 0.07
        assert cfg.loss.scr_lambda == 1.0
        assert cfg.loss.lambda_con == 0.05
        assert cfg.loss.alpha == 0.5
        assert cfg.schedule.lr == 1e-3
        assert cfg.schedule.batch == 4

    def test_dotted_keys_assign_sections(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, """
            loss.scr_lambda = 2.0          # reweighting strength
            schedule.stage1_epochs = 12
            schedule.scr_start = 9
            views.count = 3
            data.category = torus
            seed = 7
        """))
        assert cfg.loss.scr_lambda == 2.0
        assert cfg.schedule.stage1_epochs == 12
        assert cfg.views.count == 3
        assert cfg.data.category == "torus"
        assert cfg.seed == 7

    def test_unknown_key_is_error_with_line(self, tmp_path):
        with pytest.raises(ConfigError, match="line 2.*mystery"):
            parse_config(write_config(tmp_path, "\nmystery.knob = 1\n"))

    def test_type_error_names_key(self, tmp_path):
        with pytest.raises(ConfigError, match="loss.tau"):
            parse_config(write_config(tmp_path, "loss.tau = warm\n"))

    def test_activation_after_stage_end_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="activation after stage end"):
            parse_config(write_config(tmp_path,
                                      "schedule.scr_start = 300\nschedule.stage1_epochs = 250\n"))

    def test_out_of_range_alpha_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="alpha"):
            parse_config(write_config(tmp_path, "loss.alpha = 1.5\n"))

    def test_angle_list_parsing(self, tmp_path):
        cfg = parse_config(write_config(tmp_path,
                                        "views.count = 2\nviews.angles = 0.0, 0.628\n"))
        assert cfg.views.angles == (0.0, 0.628)
        assert cfg.views.to_spec().view_count == 2


def tiny_config(tmp_path, **overrides):
    cfg = default_config()
    cfg.out_dir = str(tmp_path / "run")
    cfg.data.train_count = 4
    cfg.data.test_count = 2
    cfg.data.points = 1200
    cfg.data.test_categories = ("box",)
    cfg.schedule.stage1_epochs = 4
    cfg.schedule.scr_start = 2
    cfg.schedule.stage2_epochs = 2
    cfg.schedule.dpca_start = 1
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


class TestPipeline:
    def test_full_pipeline_emits_report(self, tmp_path):
        cfg = tiny_config(tmp_path)
        reports = pipeline.run_pipeline(cfg)
        assert set(reports) == {"fused", "r_a-only", "r-only"}
        assert os.path.exists(os.path.join(cfg.out_dir, "report.txt"))
        assert os.path.exists(os.path.join(cfg.out_dir, "report.tsv"))

    def test_missing_artifact_names_stage(self, tmp_path):
        cfg = tiny_config(tmp_path)
        with pytest.raises(MissingArtifactError, match="gen"):
            pipeline.stage_render(cfg)

    def test_infer_needs_only_rendering_features(self, tmp_path):
        cfg = tiny_config(tmp_path)
        pipeline.run_pipeline(cfg, ("gen", "render", "encode", "align", "prompt"))
        # Strip the RGB modality from every test-split cache; inference
        # must not notice.
        from anomaly3d.encoder import load_cache, save_cache, MODALITY_RENDER
        feats_dir = os.path.join(cfg.out_dir, "features", "test")
        for name in os.listdir(feats_dir):
            path = os.path.join(feats_dir, name)
            sets = [fs for fs in load_cache(path) if fs.modality == MODALITY_RENDER]
            save_cache(sets, path)
        pipeline.stage_infer(cfg)
        pipeline.stage_eval(cfg)

    def test_stage_rerun_is_bit_identical(self, tmp_path):
        cfg = tiny_config(tmp_path)
        pipeline.run_pipeline(cfg)
        report_path = os.path.join(cfg.out_dir, "report.txt")
        ckpt_path = os.path.join(cfg.out_dir, "ckpts", "stage2.a3ck")
        report1 = open(report_path, "rb").read()
        ckpt1 = open(ckpt_path, "rb").read()
        os.remove(report_path)
        os.remove(ckpt_path)
        pipeline.stage_prompt(cfg)
        pipeline.stage_infer(cfg)
        pipeline.stage_eval(cfg)
        assert open(report_path, "rb").read() == report1
        assert open(ckpt_path, "rb").read() == ckpt1

    def test_different_seed_same_schemas(self, tmp_path):
        cfg = tiny_config(tmp_path)
        pipeline.run_pipeline(cfg)
        cfg2 = tiny_config(tmp_path)
        cfg2.out_dir = str(tmp_path / "run2")
        cfg2.seed = 1
        pipeline.run_pipeline(cfg2)
        c1 = io_formats.read_checkpoint(os.path.join(cfg.out_dir, "ckpts", "stage2.a3ck"))
        c2 = io_formats.read_checkpoint(os.path.join(cfg2.out_dir, "ckpts", "stage2.a3ck"))
        assert set(c1) == set(c2)
        assert any(not np.array_equal(c1[k], c2[k]) for k in c1)

    def test_threads_produce_same_artifacts(self, tmp_path):
        cfg = tiny_config(tmp_path)
        pipeline.run_pipeline(cfg, ("gen", "render", "encode"))
        cfg2 = tiny_config(tmp_path)
        cfg2.out_dir = str(tmp_path / "run_mt")
        cfg2.threads = 4
        pipeline.run_pipeline(cfg2, ("gen", "render", "encode"))
        for split in ("train", "test"):
            d1 = os.path.join(cfg.out_dir, "features", split)
            d2 = os.path.join(cfg2.out_dir, "features", split)
            for name in sorted(os.listdir(d1)):
                a = open(os.path.join(d1, name), "rb").read()
                b = open(os.path.join(d2, name), "rb").read()
                assert a == b

    def test_bench_report_fields(self, tmp_path):
        cfg = tiny_config(tmp_path)
        pipeline.run_pipeline(cfg, ("gen", "render", "encode", "align", "prompt"))
        report = pipeline.bench(cfg, repeats=30)
        assert report["repeats"] >= 30
        assert report["batch_size"] == 1.0
        assert abs(report["throughput_fps"] - 1.0 / report["median_latency_s"]) < 1e-9

    def test_export_scr_weights(self, tmp_path):
        cfg = tiny_config(tmp_path)
        pipeline.run_pipeline(cfg, ("gen", "render", "encode"))
        paths = pipeline.export_scr_weights(cfg)
        assert len(paths) == cfg.views.count
        w = io_formats.read_scores(paths[0])
        n_patches = (cfg.views.height // cfg.encoder.patch_size) ** 2
        assert w.shape == (n_patches,)
        assert np.all(w > 1.0) and np.all(w < 1.0 + cfg.loss.scr_lambda)


class TestCli:
    def _run(self, args):
        return cli.main(args)

    def test_gradcheck_quick(self, capsys):
        assert self._run(["--seed", "3", "gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "ok" in out and "FAIL" not in out

    def test_exit_code_on_config_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("loss.alpha = 3\n")
        assert self._run(["--config", str(bad), "gen-synth"]) == cli.EXIT_CONFIG

    def test_exit_code_on_missing_artifact(self, tmp_path):
        assert self._run(["--out-dir", str(tmp_path / "void"), "render"]) == cli.EXIT_MISSING

    def test_gen_and_render_subcommands(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("\n".join([
            "data.train_count = 2", "data.test_count = 2",
            "data.points = 800", "data.test_categories = box",
            f"out_dir = {tmp_path / 'out'}",
        ]) + "\n")
        assert self._run(["--config", str(cfgfile), "gen-synth"]) == 0
        assert self._run(["--config", str(cfgfile), "render"]) == 0
        assert os.path.exists(tmp_path / "out" / "views" / "train")

    def test_module_entrypoint(self):
        proc = subprocess.run([sys.executable, "-m", "anomaly3d.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen-synth" in proc.stdout
