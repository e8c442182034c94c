import json
import random

import pytest
import yaml

from ssmrecall import cli
from ssmrecall.pipeline import ExperimentConfig, Run, run_experiment, sha256_file
from ssmrecall.ssm import load_model, param_checksum

WORDS = ("the a model state token reads keeps memory of text and number layer scan "
         "early late recall loses decoder encoder window value").split()


def _prose(rng, n_words):
    out = []
    for i in range(n_words):
        out.append(str(rng.randint(0, 999)) if rng.random() < 0.08 else rng.choice(WORDS))
        if i % 12 == 11:
            out[-1] += "."
    return " ".join(out)


def write_corpora(root):
    rng = random.Random(0)
    (root / "train.txt").write_text(_prose(rng, 3000))
    (root / "val.txt").write_text(_prose(rng, 300))
    with open(root / "eval.jsonl", "w") as fh:
        for k in range(12):
            fh.write(json.dumps({"text": _prose(rng, 20), "source": "docs" if k % 2 else "notes"}) + "\n")
    with open(root / "paired.jsonl", "w") as fh:
        for k in range(6):
            t = _prose(rng, 10)
            fh.write(json.dumps({"text": t, "pair_id": k, "variant": "as_written"}) + "\n")
            fh.write(json.dumps({"text": t.upper(), "pair_id": k, "variant": "upper_case"}) + "\n")
    with open(root / "tags.conll", "w") as fh:
        for s in range(40):
            for _ in range(6):
                w = rng.choice(WORDS + ["12", "7"])
                fh.write(f"{w}\t{'NUM' if w.isdigit() else ('DET' if w in ('the', 'a') else 'WORD')}\n")
            fh.write("\n")
    cfg = {
        "train_data": {"path": "train.txt"},
        "validation_data": {"path": "val.txt"},
        "eval_data": [{"path": "eval.jsonl", "format": "jsonl"}],
        "annotations": [{"path": "tags.conll", "format": "conll", "scheme": "tags"}],
        "paired": {"path": "paired.jsonl", "format": "jsonl"},
        "lengths": [4],
        "model": {"n_layers": 1, "d_model": 16, "d_inner": 32, "d_state": 4},
        "pretrain": {"steps": 8, "window": 32, "batch_size": 8},
        "train": {"eval_every": 4, "patience_window": 8, "max_steps": 8, "batch_size": 8,
                  "validation_size": 8, "max_gen_tokens": 10, "learning_rate": 1e-3},
        "evaluation": {"n_per_source": 8, "n_synthetic": 8, "n_repeated": 4, "min_frequency": 2,
                       "min_support": 5, "max_gen_tokens": 10},
    }
    path = root / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpora(root)
    return root


@pytest.fixture(scope="module")
def smoke_run(corpus_dir, tmp_path_factory):
    cfg = ExperimentConfig.load(corpus_dir / "exp.yaml")
    return run_experiment(cfg, tmp_path_factory.mktemp("run") / "a")


def test_smoke_run_layout(smoke_run):
    assert sorted(p.name for p in (smoke_run / "decoders").iterdir()) == ["L4.ckpt"]
    assert sorted(p.name for p in (smoke_run / "training").iterdir()) == ["train_L4.jsonl"]
    kinds = sorted(p.name for p in (smoke_run / "records").iterdir())
    assert kinds == ["annotated-tags_L4.jsonl", "natural_L4.jsonl", "paired_L4.jsonl",
                     "repeated_L4.jsonl", "synthetic_L4.jsonl"]
    assert (smoke_run / "analysis" / "tables.json").exists()
    assert (smoke_run / "reports" / "ttests.csv").exists()
    assert (smoke_run / "figures" / "f1_by_length.png").exists()


def test_manifest_lists_every_file(smoke_run):
    m = json.loads((smoke_run / "manifest.json").read_text())
    files = {str(p.relative_to(smoke_run)) for p in smoke_run.rglob("*") if p.is_file()} - {"manifest.json"}
    assert set(m["files"]) == files
    for rel, digest in m["files"].items():
        assert sha256_file(smoke_run / rel) == digest
    assert m["stages"] == {s: "complete" for s in ("train", "evaluate", "analyze", "report")}
    assert m["seed"] == 0 and m["decisions"]["early_stopping_reference"] == "best_so_far"


def test_manifest_encoder_checksum(smoke_run):
    m = json.loads((smoke_run / "manifest.json").read_text())
    enc, _ = load_model(smoke_run / "encoder.ckpt")
    assert m["encoder_checksum_pre"] == m["encoder_checksum_post"] == param_checksum(enc)


def test_rerun_is_byte_identical(smoke_run, corpus_dir, tmp_path):
    cfg = ExperimentConfig.load(corpus_dir / "exp.yaml")
    again = run_experiment(cfg, tmp_path / "b")
    for sub in ("records", "reports", "analysis"):
        for p in sorted((smoke_run / sub).rglob("*.*")):
            assert p.read_bytes() == (again / p.relative_to(smoke_run)).read_bytes(), p


def test_failed_stage_is_recorded_and_resume_skips_training(smoke_run, corpus_dir, tmp_path):
    cfg = ExperimentConfig.load(corpus_dir / "exp.yaml")
    run = Run(cfg, tmp_path / "c")
    run.train()
    ckpt = (tmp_path / "c" / "decoders" / "L4.ckpt").read_bytes()
    with pytest.raises(FileNotFoundError):
        run.evaluate([8])
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert m["stages"] == {"train": "complete", "evaluate": "failed"}
    resumed = Run(cfg, tmp_path / "c", resume=True)
    resumed.train()
    assert (tmp_path / "c" / "decoders" / "L4.ckpt").read_bytes() == ckpt
    resumed.evaluate()
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["stages"]["evaluate"] == "complete"


def test_config_paths_and_validation(corpus_dir):
    raw = yaml.safe_load((corpus_dir / "exp.yaml").read_text())
    cfg = ExperimentConfig.from_dict(raw, base_dir=corpus_dir)
    assert cfg.resolve("train.txt") == (corpus_dir / "train.txt").resolve()
    assert cfg.train_config(4).sequence_length == 4 and cfg.train_config(4).seed == 4
    bad = dict(raw, validation_data={"path": "train.txt"})
    with pytest.raises(ValueError, match="distinct"):
        ExperimentConfig.from_dict(bad, base_dir=corpus_dir)
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict(dict(raw, lenghts=[4]), base_dir=corpus_dir)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(dict(raw, lengths=[0]), base_dir=corpus_dir)


def test_cli_run_all_and_stage_verbs(corpus_dir, tmp_path, monkeypatch, capsys):
    out = tmp_path / "cli"
    assert cli.main(["run-all", "--config", str(corpus_dir / "exp.yaml"), "--out", str(out), "--seed", "1"]) == 0
    assert yaml.safe_load((out / "config.yaml").read_text())["seed"] == 1
    before = (out / "reports" / "f1_by_length.csv").read_bytes()
    with pytest.raises(SystemExit, match="not empty"):
        cli.main(["run-all", "--config", str(corpus_dir / "exp.yaml"), "--out", str(out)])
    # stage verbs reuse the run directory's own config
    assert cli.main(["analyze", "--out", str(out)]) == 0
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "reports" / "f1_by_length.csv").read_bytes() == before
    with pytest.raises(SystemExit, match="needs --out"):
        cli.main(["evaluate", "--config", str(corpus_dir / "exp.yaml")])
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit, match="--config is required"):
        cli.main(["train"])


def test_cli_parser_flags():
    args = cli.build_parser().parse_args(
        ["train", "--config", "c.yaml", "--length", "4", "--length", "8", "--max-steps", "9", "--resume"])
    assert args.length == [4, 8] and args.max_steps == 9 and args.resume
