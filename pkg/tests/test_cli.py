import json
import os
from pathlib import Path

import pytest
import yaml

from adatrig.cli import main
from adatrig.config import DEFAULT_CONFIG, config_hash, load_config
from adatrig.errors import ValidationError


def tiny_overrides(root, **extra):
    """Config overrides for a seconds-scale synthetic run."""
    base = {
        "data.synthetic": "default",
        "data.synthetic_params.n_templates": 10,
        "data.synthetic_params.n_content": 24,
        "data.synthetic_params.n_sentences": [40, 40],
        "data.synthetic_params.densities": [0.08, 0.08],
        "features.word_dim": 8,
        "model.hidden": 8,
        "training.max_epochs": 2,
        "training.patience": 2,
        "training.seed": 7,
        "output.root": str(root),
    }
    base.update(extra)
    return [f"--set={k}={json.dumps(v) if isinstance(v, list) else v}" for k, v in base.items()]


class TestConfig:
    def test_defaults_materialized(self):
        cfg = load_config(None)
        assert cfg == load_config(None)
        assert cfg["training"]["batch_size"] == 16
        assert cfg["training"]["max_epochs"] == 1000
        assert cfg["training"]["finetune_epochs"] == 10
        assert cfg["training"]["lambda_grid"] == [0.1, 0.2, 0.5, 1.0, 2.0, 5.0]

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("training:\n  learning_rat: 0.1\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="unknown config key"):
            load_config(p)

    def test_unknown_nested_key_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("data:\n  synthetic_params:\n    n_template: 3\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="synthetic_params.n_template"):
            load_config(p)

    def test_set_override(self):
        cfg = load_config(None, ["training.lambda=2.5", "model.learner=LSTM"])
        assert cfg["training"]["lambda"] == 2.5
        assert cfg["model"]["learner"] == "LSTM"

    def test_set_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown config key"):
            load_config(None, ["training.lamda=2.5"])

    def test_mode_typo_rejected(self):
        with pytest.raises(ValidationError, match="mode"):
            load_config(None, ["training.mode=adversarial"])

    def test_hash_stable_and_sensitive(self):
        a = load_config(None)
        b = load_config(None)
        c = load_config(None, ["training.seed=99"])
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)

    def test_config_round_trips_through_file(self, tmp_path):
        cfg = load_config(None, ["training.lambda=0.2"])
        from adatrig.config import save_config

        save_config(cfg, tmp_path / "c.yaml")
        again = load_config(tmp_path / "c.yaml")
        assert again == cfg

    def test_env_output_root_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ADATRIG_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
        cfg = load_config(None)
        assert cfg["output"]["root"] == str(tmp_path / "elsewhere")


class TestCliBasics:
    def test_version_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "adatrig" in capsys.readouterr().out

    def test_unknown_command_is_validation_error(self):
        assert main(["frobnicate"]) == 1

    def test_bad_config_key_exit_1(self, tmp_path):
        assert main(["train", "--set", "nope.nope=1"]) == 1

    def test_missing_data_exit_1(self, tmp_path):
        assert main(["train", "--set", f"output.root={tmp_path}"]) == 1

    def test_missing_corpus_file_exit_1(self, tmp_path):
        code = main(
            [
                "train",
                "--set", "data.source=/nonexistent/src.tsv",
                "--set", "data.target=/nonexistent/tgt.tsv",
                "--set", f"output.root={tmp_path}",
            ]
        )
        assert code == 1


class TestSynthAndPrepare:
    def test_synth_writes_pair(self, tmp_path):
        assert main(["synth"] + tiny_overrides(tmp_path)) == 0
        prepared = tmp_path / "prepared"
        assert (prepared / "synth-src.tsv").exists()
        assert (prepared / "synth-tgt.tsv").exists()
        assert (prepared / "synth-src.meta.json").exists()
        assert (prepared / "synthetic_spec.yaml").exists()

    def test_prepare_writes_stats_and_vocab(self, tmp_path):
        assert main(["prepare"] + tiny_overrides(tmp_path)) == 0
        stats = json.loads((tmp_path / "prepared" / "stats.json").read_text())
        assert set(stats) == {"synth-src", "synth-tgt"}
        for blob in stats.values():
            assert blob["n_tokens"] > 0
            assert 0 < blob["density"] < 1
            assert blob["splits"] == {"train": 4, "dev": 1, "test": 1} or blob["splits"]
        assert (tmp_path / "prepared" / "vocab.json").exists()

    def test_prepare_rerun_is_idempotent_bytewise(self, tmp_path):
        args = ["prepare"] + tiny_overrides(tmp_path)
        assert main(args) == 0
        first = {
            p.name: p.read_bytes()
            for p in (tmp_path / "prepared").iterdir()
            if p.suffix in (".tsv", ".json")
        }
        assert main(args) == 0
        for p in (tmp_path / "prepared").iterdir():
            if p.name in first:
                assert p.read_bytes() == first[p.name], p.name

    def test_prepare_realis_filter_reduces_events(self, tmp_path):
        from adatrig.corpus import Corpus, Token, TaggedSentence, write_corpus, split_corpus

        sents = []
        for i in range(6):
            attrs = {"tense": "FUTURE"} if i % 2 else None
            sents.append(
                TaggedSentence(
                    f"d{i}", 0,
                    (Token("will"), Token("boom", None, attrs)),
                    ("O", "EVENT"),
                )
            )
        corpus = split_corpus(Corpus("raw_src", tuple(sents)), (0.5, 0.25, 0.25), 1)
        write_corpus(corpus, tmp_path / "raw_src.tsv")
        write_corpus(Corpus("raw_tgt", corpus.sentences, dict(corpus.splits)), tmp_path / "raw_tgt.tsv")
        code = main(
            [
                "prepare",
                "--set", f"data.source={tmp_path / 'raw_src.tsv'}",
                "--set", f"data.target={tmp_path / 'raw_tgt.tsv'}",
                "--set", "data.realis_filter=true",
                "--set", f"output.root={tmp_path / 'out'}",
            ]
        )
        assert code == 0
        stats = json.loads((tmp_path / "out" / "prepared" / "stats.json").read_text())
        assert stats["raw_src"]["n_events"] == 3  # half the events were unrealized


class TestTrain:
    def test_supervised_run_writes_artifacts(self, tmp_path):
        assert main(["train"] + tiny_overrides(tmp_path)) == 0
        run_dir = tmp_path / "runs" / "supervised-bilstm-seed7"
        assert (run_dir / "config.yaml").exists()
        assert (run_dir / "trainlog.jsonl").exists()
        assert (run_dir / "best.ckpt" / "params.bin").exists()
        assert (run_dir / "final.ckpt" / "params.bin").exists()
        result = json.loads((run_dir / "result.json").read_text())
        assert result["mode"] == "supervised"
        assert "in_domain_test_f1" in result["metrics"]
        log_lines = (run_dir / "trainlog.jsonl").read_text().strip().split("\n")
        assert len(log_lines) == result["metrics"]["n_epochs"]

    def test_same_config_same_metrics(self, tmp_path):
        args1 = ["train"] + tiny_overrides(tmp_path / "a")
        args2 = ["train"] + tiny_overrides(tmp_path / "b")
        assert main(args1) == 0
        assert main(args2) == 0
        r1 = json.loads((tmp_path / "a" / "runs" / "supervised-bilstm-seed7" / "result.json").read_text())
        r2 = json.loads((tmp_path / "b" / "runs" / "supervised-bilstm-seed7" / "result.json").read_text())
        assert r1["metrics"] == r2["metrics"]
        assert r1["config_hash"] != r2["config_hash"]  # output.root differs

    def test_ada_run_reports_domain_metrics(self, tmp_path):
        args = ["train"] + tiny_overrides(tmp_path, **{"training.mode": "ada"})
        assert main(args) == 0
        run_dir = tmp_path / "runs" / "ada-bilstm-seed7"
        result = json.loads((run_dir / "result.json").read_text())
        assert "heldout_domain_acc" in result["metrics"]
        entry = json.loads((run_dir / "trainlog.jsonl").read_text().strip().split("\n")[0])
        assert entry["domain_loss"] is not None

    def test_feda_run(self, tmp_path):
        args = ["train"] + tiny_overrides(tmp_path, **{"training.mode": "feda"})
        assert main(args) == 0
        result = json.loads(
            (tmp_path / "runs" / "feda-bilstm-seed7" / "result.json").read_text()
        )
        assert "target_test_f1" in result["metrics"]

    def test_writes_stay_inside_output_root(self, tmp_path, monkeypatch):
        workdir = tmp_path / "cwd"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        out = tmp_path / "sandboxed"
        assert main(["train"] + tiny_overrides(out)) == 0
        assert list(workdir.iterdir()) == []  # nothing leaked into the cwd


class TestEval:
    def test_matrix_and_disagreements(self, tmp_path):
        assert main(["train"] + tiny_overrides(tmp_path)) == 0
        args = ["train"] + tiny_overrides(tmp_path, **{"training.mode": "ada", "training.seed": 8})
        assert main(args) == 0
        ck1 = tmp_path / "runs" / "supervised-bilstm-seed7" / "best.ckpt"
        ck2 = tmp_path / "runs" / "ada-bilstm-seed8" / "best.ckpt"
        code = main(
            ["eval"]
            + tiny_overrides(tmp_path)
            + ["--set", f"eval.models=[{ck1}, {ck2}]"]
        )
        assert code == 0
        run_dir = tmp_path / "runs" / "eval"
        matrix = json.loads((run_dir / "matrix.json").read_text())
        assert len(matrix["cells"]) == 4
        assert (run_dir / "matrix.txt").exists()
        assert (run_dir / "disagreements_synth-src.tsv").exists()
        assert (run_dir / "disagreements_synth-tgt.tsv").exists()

    def test_eval_without_models_exit_1(self, tmp_path):
        assert main(["eval"] + tiny_overrides(tmp_path)) == 1


class TestSelftrainCommand:
    def test_writes_pseudo_labels_and_report(self, tmp_path):
        args = ["selftrain"] + tiny_overrides(
            tmp_path,
            **{
                "training.mode": "ada",
                "selftrain.student": "BILSTM",
                "selftrain.labeled_fraction": 0.05,
                "selftrain.student_max_epochs": 2,
            },
        )
        assert main(args) == 0
        run_dir = tmp_path / "runs" / "selftrain"
        assert (run_dir / "pseudo_labels.tsv").exists()
        report = json.loads((run_dir / "selftrain_report.json").read_text())
        assert report["n_label_passes"] == 1
        assert "teacher" in report and "student" in report
        assert (run_dir / "student.ckpt" / "params.bin").exists()
        # pseudo labels are a loadable corpus in the standard format
        from adatrig.corpus import load_corpus

        pseudo = load_corpus(run_dir / "pseudo_labels.tsv")
        assert len(pseudo.sentences) > 0


class TestFinetuneCommand:
    def test_writes_curve(self, tmp_path):
        args = ["finetune"] + tiny_overrides(
            tmp_path,
            **{
                "training.mode": "ada",
                "finetune.percents": [0.05, 0.1],
                "training.finetune_epochs": 2,
            },
        ) + ["--set", "training.seeds=[1, 2]"]
        assert main(args) == 0
        run_dir = tmp_path / "runs" / "finetune"
        curve = json.loads((run_dir / "curve.json").read_text())
        assert len(curve["rows"]) == 2
        assert all(len(r["per_seed"]) == 2 for r in curve["rows"])
        tsv = (run_dir / "curve.tsv").read_text().strip().split("\n")
        assert tsv[0].startswith("percent")
        assert len(tsv) == 3


class TestSweepCommand:
    def test_small_grid(self, tmp_path):
        args = ["sweep"] + tiny_overrides(
            tmp_path,
            **{"training.mode": "ada", "training.max_epochs": 1, "training.patience": 1},
        ) + ["--set", "training.lambda_grid=[0.1, 1.0]", "--set", "training.seeds=[1]"]
        assert main(args) == 0
        sweep = json.loads((tmp_path / "runs" / "sweep" / "sweep.json").read_text())
        assert len(sweep["runs"]) == 2
        assert len(sweep["aggregate"]) == 2
        assert sum(a["best"] for a in sweep["aggregate"]) == 1
        for lam in (0.1, 1.0):
            for seed in (1,):
                assert (tmp_path / "runs" / "sweep" / f"lam{lam}-seed{seed}" / "result.json").exists()

    def test_empty_grid_exit_1(self, tmp_path):
        args = ["sweep"] + tiny_overrides(tmp_path, **{"training.mode": "ada"}) + [
            "--set", "training.lambda_grid=[]",
        ]
        assert main(args) == 1
