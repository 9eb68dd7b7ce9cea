"""CLI tests: config parsing, manifest/summary artifacts, error paths, and
the cheap subcommands end to end."""

import json
import os

import numpy as np
import pytest

from sphere.cli import (ConfigError, DEFAULT_CONFIG, load_config, main,
                        parse_config_text, train_config_from)


class TestConfigParser:
    def test_sections_and_values(self):
        text = """
        [train]
        lr = 0.01
        channels = 8,16
        use_phi = false

        [data]
        n_per_class = 50
        """
        cfg = parse_config_text(text)
        assert cfg["train.lr"] == 0.01
        assert cfg["train.channels"] == (8, 16)
        assert cfg["train.use_phi"] is False
        assert cfg["data.n_per_class"] == 50

    def test_comments_ignored(self):
        cfg = parse_config_text("[train]\nlr = 0.5  # half\n")
        assert cfg["train.lr"] == 0.5

    def test_unknown_key_rejected_with_position(self):
        with pytest.raises(ConfigError, match=r":2:"):
            parse_config_text("[train]\nwarp_factor = 9\n")

    def test_malformed_line_reports_position(self):
        with pytest.raises(ConfigError, match=r":2:"):
            parse_config_text("[train]\nthis is not a pair\n")

    def test_bad_value_type(self):
        with pytest.raises(ConfigError, match="lr"):
            parse_config_text("[train]\nlr = fast\n")

    def test_overrides_win(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[train]\nlr = 0.5\n")
        cfg = load_config(str(p), ["train.lr=0.25"])
        assert cfg["train.lr"] == 0.25

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/path.cfg", [])

    def test_train_config_from(self):
        cfg = dict(DEFAULT_CONFIG)
        cfg["train.channels"] = (4, 8)
        cfg["train.epochs"] = 6
        tc = train_config_from(cfg, seed=7)
        assert tc.channels == (4, 8)
        assert tc.epochs == 6
        assert tc.seed == 7


class TestArtifacts:
    def test_oja_demo_writes_manifest_and_summary(self, tmp_path):
        out = str(tmp_path / "run")
        assert main(["--out", out, "oja-demo"]) == 0
        manifest = (tmp_path / "run" / "manifest.txt").read_text()
        assert "command = oja-demo" in manifest
        assert "seed = 0" in manifest
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["schema"] == 1
        assert summary["abs_cos"] >= 0.99

    def test_verify_lemma_summary(self, tmp_path):
        out = str(tmp_path / "run")
        code = main(["--out", out, "verify-lemma", "--M", "8", "--steps", "6000"])
        assert code == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["ratio"] <= 1.05
        assert summary["converged"] is True
        # metrics log is line-delimited json
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert all(json.loads(l) for l in lines)

    def test_identical_invocations_byte_identical_summaries(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert main(["--out", out, "--seed", "4", "verify-lemma",
                         "--M", "4", "--steps", "4000"]) == 0
        sa = (tmp_path / "a" / "summary.json").read_bytes()
        sb = (tmp_path / "b" / "summary.json").read_bytes()
        assert sa == sb

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("[train]\nbogus = 1\n")
        code = main(["--config", str(p), "--out", str(tmp_path / "r"), "oja-demo"])
        assert code == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert record["error"] == "ConfigError"
        assert "bogus" in record["message"]


class TestGradcheckCommand:
    def test_exit_zero_and_small_errors(self, tmp_path):
        out = str(tmp_path / "run")
        assert main(["--out", out, "gradcheck"]) == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["pass"] is True
        assert summary["worst"] <= 1e-4
