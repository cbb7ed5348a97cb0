from __future__ import annotations

import hashlib
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from signrep.cli import feature_path, main
from signrep.config import ConfigError, RunConfig, parse_bool
from signrep.retrieval import TAU_GRID, RetrievalIndex, read_features, retrieval_metrics

TINY = """\
# miniature run for tests
classes = 3
samples_per_class = 4
height = 8
width = 8
patch_s = 4
embed_dim = 8
heads = 2
blocks = 1
pairs = 2
steps = 4
eval_every = 2
"""


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    out = root / "run"
    for cmd in ("generate", "pretrain", "extract", "retrieve", "classdist", "finetune", "report"):
        assert main([cmd, "--config", str(root / "tiny.cfg"), "--out", str(out)]) == 0, cmd
    return root, out


def cli(root: Path, *args: str) -> int:
    return main([*args, "--config", str(root / "tiny.cfg"), "--out", str(root / "run")])


class TestRunConfig:
    def test_text_round_trip(self):
        cfg = RunConfig(seed=3, weighted=False)
        assert RunConfig.parse(cfg.dumps()).to_dict() == cfg.to_dict()

    def test_every_key_has_default(self):
        table = RunConfig.defaults()
        assert RunConfig().to_dict() == table
        assert {"w_var", "w_cov", "w_adv", "kappa", "psi_lh_kpt", "w_activity", "tau_step", "stride"} <= set(table)

    def test_every_key_documented(self):
        readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
        for key in RunConfig.defaults():
            if key.startswith(("w_", "psi_")) and key not in ("w_var", "w_cov", "w_adv"):
                assert key.split("_", 1)[1] in readme, key
            else:
                assert f"`{key}`" in readme, key

    def test_defaults_feed_the_library(self):
        cfg = RunConfig()
        assert np.array_equal(cfg.tau_grid(), TAU_GRID)
        p = cfg.pretrain()
        assert (p.lr, p.mask_ratio, p.steps, p.pairs) == (1e-4, 0.8, 2000, 8)
        assert (p.weights.var, p.weights.cov, p.weights.adv, p.weights.kappa) == (1.0, 0.004, 2.0, 0.2)

    def test_prior_weight_override(self):
        cfg = RunConfig.parse("w_lh_dist = 3.5\npsi_body_kpt = 2\n")
        assert cfg.loss_weights().prior["lh_dist"] == 3.5
        assert cfg.loss_weights().scales["body_kpt"] == 2.0

    @pytest.mark.parametrize("text, match", [
        ("bogus = 1\n", "unknown config keys: bogus"),
        ("steps = lots\n", "steps: cannot read"),
        ("steps = 2.5\n", "steps: cannot read"),
        ("weighted = maybe\n", "weighted: cannot read"),
        ("just a line\n", "expected key = value"),
        ("seed = 1\nseed = 2\n", "duplicate key"),
        ("tau_min = 0.5\ntau_max = 0.1\n", "tau_min"),
    ])
    def test_rejects(self, text, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.parse(text)

    def test_comments_and_blanks(self):
        assert RunConfig.parse("\n# note\nseed = 4  # trailing\n").seed == 4

    @pytest.mark.parametrize("text, value", [("true", True), ("False", False), ("1", True), ("off", False)])
    def test_parse_bool(self, text, value):
        assert parse_bool(text) is value

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(tmp_path / "nope.cfg")


@pytest.mark.slow
class TestPipeline:
    def test_artifacts(self, run):
        _, out = run
        for name in ("data/manifest.json", "checkpoint.srck", "train_log.csv", "retrieval_weighted.csv",
                     "topk_weighted.csv", "phi.csv", "tau.csv", "recognition.csv", "summary.txt", "loss_curve.csv"):
            assert (out / name).is_file(), name
        for split in ("train", "test"):
            for weighted in (True, False):
                assert feature_path(out, split, weighted).is_file()
        assert (out / "train_log.csv").read_text().splitlines()[0] == "step,lr,recon,var,cov,adv,total,E_M,E_U"
        assert len((out / "loss_curve.csv").read_text().splitlines()) == 5

    def test_resolved_config_recorded(self, run, caplog):
        root, out = run
        with caplog.at_level(logging.INFO, logger="signrep"):
            assert cli(root, "retrieve", "--seed", "5", "-v") == 0
        assert "config seed = 5" in caplog.text
        saved = RunConfig.load(out / "config_retrieve.txt")
        assert saved.seed == 5 and saved.embed_dim == 8 and saved.steps == 4
        assert cli(root, "retrieve") == 0

    def test_retrieve_is_byte_identical(self, run):
        root, out = run
        first = (out / "retrieval_weighted.csv").read_bytes(), (out / "topk_weighted.csv").read_bytes()
        assert cli(root, "retrieve") == 0
        assert ((out / "retrieval_weighted.csv").read_bytes(), (out / "topk_weighted.csv").read_bytes()) == first

    def test_avg_variant(self, run):
        root, out = run
        assert cli(root, "retrieve", "--weighted", "false") == 0
        db, db_y, _ = read_features(feature_path(out, "train", False))
        q, q_y, _ = read_features(feature_path(out, "test", False))
        index = RetrievalIndex.build(db, db_y)
        m = retrieval_metrics([index.class_rank(z, int(y)) for z, y in zip(q, q_y)])
        header, row = (out / "retrieval_avg.csv").read_text().splitlines()
        values = dict(zip(header.split(","), row.split(",")))
        assert values["variant"] == "avg"
        assert [float(values[k]) for k in ("dcg", "mrr", "rec1", "rec5")] == [m["dcg"], m["mrr"], m["rec1"], m["rec5"]]

    def test_commands_leave_inputs_alone(self, run):
        root, out = run
        before = tree_digest(out / "data"), (out / "checkpoint.srck").read_bytes()
        stores = {p.name: p.read_bytes() for p in out.glob("features_*.srft")}
        for cmd in ("extract", "retrieve", "classdist", "report"):
            assert cli(root, cmd) == 0
        assert (tree_digest(out / "data"), (out / "checkpoint.srck").read_bytes()) == before
        assert {p.name: p.read_bytes() for p in out.glob("features_*.srft")} == stores

    def test_kappa_flag(self, run):
        root, out = run
        assert cli(root, "finetune", "--kappa", "0") == 0
        assert (out / "recognition.csv").read_text().splitlines()[1].startswith("0.0,")
        assert cli(root, "finetune") == 0


class TestDiagnostics:
    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("steps = 4\nlearning_rate = 1\n")
        assert main(["generate", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 1
        assert "unknown config keys: learning_rate" in capsys.readouterr().err

    def test_missing_inputs(self, tmp_path, capsys):
        assert main(["pretrain", "--out", str(tmp_path)]) == 1
        assert "missing dataset manifest" in capsys.readouterr().err
        assert main(["retrieve", "--out", str(tmp_path)]) == 1
        assert "missing feature store" in capsys.readouterr().err

    def test_bad_flag_value(self, tmp_path, capsys):
        assert main(["retrieve", "--weighted", "perhaps", "--out", str(tmp_path)]) == 1
        assert "not a boolean" in capsys.readouterr().err

    def test_invalid_weights(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("w_var = -1\n")
        assert main(["generate", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 1
        assert "non-negative" in capsys.readouterr().err

    @pytest.mark.slow
    def test_checkpoint_mismatch(self, run, tmp_path, capsys):
        root, out = run
        (tmp_path / "wide.cfg").write_text(TINY.replace("embed_dim = 8", "embed_dim = 16"))
        code = main(["extract", "--config", str(tmp_path / "wide.cfg"), "--out", str(tmp_path / "o"),
                     "--checkpoint", str(out / "checkpoint.srck")])
        assert code == 1 and "does not match" in capsys.readouterr().err

    def test_corrupt_feature_store(self, tmp_path, capsys):
        (tmp_path / "features_train_weighted.srft").write_bytes(b"garbage")
        (tmp_path / "features_test_weighted.srft").write_bytes(b"garbage")
        assert main(["retrieve", "--out", str(tmp_path)]) == 1
        assert "error" in capsys.readouterr().err

    def test_thread_cap_validated(self, tmp_path):
        env = dict(os.environ, SIGNREP_THREADS="zero")
        proc = subprocess.run([sys.executable, "-m", "signrep.cli", "report", "--out", str(tmp_path)],
                              env=env, capture_output=True, text=True)
        assert proc.returncode != 0 and "SIGNREP_THREADS" in proc.stderr

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 2
