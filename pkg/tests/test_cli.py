"""End-to-end CLI behavior: flows, files, exit codes, config precedence.

Everything runs in-process through cli.main so coverage and monkeypatching
work; each writing command gets its own directory under tmp_path.
"""

import json
import os

import pytest

from sevae import __version__, cli
from sevae.data import load_corpus, make_synthetic_corpus, write_jsonl

DISC_OPTS = ["--opt", "embed_dim=8", "--opt", "hidden_dim=8"]
VAE_OPTS = [
    "--opt", "enc_embed_dim=8", "--opt", "enc_layers=1", "--opt", "enc_heads=2",
    "--opt", "max_len=32", "--opt", "latent_dim=4", "--opt", "dec_embed_dim=8",
    "--opt", "dec_hidden_dim=8", "--opt", "dec_layers=1", "--opt", "dec_heads=2",
]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    rc = cli.main([
        "synth", "--out", str(out), "--n-per-label", "3",
        "--val-per-label", "2", "--test-per-label", "2", "--seed", "5",
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def disc_run(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("disc-run")
    rc = cli.main([
        "train", "--model", "disc",
        "--train", str(synth_dir / "train.jsonl"),
        "--val", str(synth_dir / "val.jsonl"),
        "--test", str(synth_dir / "test.jsonl"),
        "--out", str(out), "--max-epochs", "2", "--batch", "8", *DISC_OPTS,
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def vae_run(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("vae-run")
    rc = cli.main([
        "train", "--model", "vae-bow",
        "--train", str(synth_dir / "train.jsonl"),
        "--out", str(out), "--max-epochs", "1", "--batch", "8", *VAE_OPTS,
    ])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# parsing, usage, version


def test_no_subcommand_is_usage_error(capsys):
    assert cli.main([]) == 1
    assert "a subcommand is required" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_required_flag(capsys, tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "x")]) == 1
    assert "--model is required" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()  # nothing written on usage errors


def test_invalid_model_choice(capsys, tmp_path):
    rc = cli.main(["train", "--model", "rnn-svm", "--train", "t", "--out", str(tmp_path)])
    assert rc == 1
    assert "invalid choice" in capsys.readouterr().err


def test_missing_input_file_is_data_error(capsys):
    assert cli.main(["stats", "--in", "/nonexistent/corpus.jsonl"]) == 2
    assert "cannot read" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# synth + stats


def test_synth_outputs(synth_dir):
    for name, n in (("train.jsonl", 21), ("val.jsonl", 14), ("test.jsonl", 14)):
        clauses = load_corpus(synth_dir / name)
        assert len(clauses) == n
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["seed"] == 5
    assert manifest["tool_version"] == __version__
    assert manifest["inputs"] == {}
    assert manifest["config"]["n_per_label"] == 3
    assert set(manifest) == {
        "command", "config", "config_digest", "inputs", "seed",
        "tool_version", "timestamp",
    }


def test_stats_tables(capsys, synth_dir):
    assert cli.main(["stats", "--in", str(synth_dir / "train.jsonl")]) == 0
    out = capsys.readouterr().out
    assert "clauses 21" in out
    for label in ("STATE", "EVENT", "REPORT", "GENERIC", "GENERALIZING",
                  "QUESTION", "IMPERATIVE"):
        assert f"label {label} 3" in out
    assert "genre " in out


def test_stats_combines_multiple_files(capsys, synth_dir):
    rc = cli.main(["stats", "--in", str(synth_dir / "val.jsonl"),
                   "--in", str(synth_dir / "test.jsonl")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "label STATE 4" in out  # 2 + 2 per label across the two files


# ---------------------------------------------------------------------------
# train / eval


def test_train_writes_expected_files(disc_run):
    for name in ("manifest.json", "split.json", "train_log.jsonl",
                 "model.ckpt", "eval_test.json"):
        assert (disc_run / name).exists(), name
    manifest = json.loads((disc_run / "manifest.json").read_text())
    assert manifest["config"]["model"] == "disc"
    assert manifest["config"]["spec"]["options"]["embed_dim"] == 8
    assert manifest["config"]["train_config"]["max_epochs"] == 2
    assert len(manifest["inputs"]) == 3
    split = json.loads((disc_run / "split.json").read_text())
    assert len(split["train"]) == 21
    assert len(split["validation"]) == 14
    assert len(split["test"]) == 14


def test_train_log_is_jsonl(disc_run):
    lines = (disc_run / "train_log.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    assert [r["epoch"] for r in records] == list(range(len(records)))
    assert all("val_macro_f1" in r for r in records)


def test_eval_reproduces_training_test_metrics(tmp_path, synth_dir, disc_run):
    out = tmp_path / "eval"
    rc = cli.main(["eval", "--ckpt", str(disc_run / "model.ckpt"),
                   "--data", str(synth_dir / "test.jsonl"), "--out", str(out)])
    assert rc == 0
    got = json.loads((out / "eval.json").read_text())
    want = json.loads((disc_run / "eval_test.json").read_text())
    for key in ("accuracy", "macro_f1", "per_class", "confusion"):
        assert got[key] == want[key], key


def test_eval_rejects_garbage_checkpoint(capsys, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    rc = cli.main(["eval", "--ckpt", str(bad), "--data", "x", "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "magic" in capsys.readouterr().err


def test_train_with_subsample_k(tmp_path, synth_dir):
    out = tmp_path / "k2"
    rc = cli.main([
        "train", "--model", "disc", "--train", str(synth_dir / "train.jsonl"),
        "--out", str(out), "--k", "2", "--max-epochs", "1", "--batch", "8",
        "--seed", "3", *DISC_OPTS,
    ])
    assert rc == 0
    split = json.loads((out / "split.json").read_text())
    assert len(split["train"]) == 14  # 2 per label
    assert "k=2" in split["provenance"]
    assert "seed=3" in split["provenance"]


def test_train_leaves_cwd_untouched(tmp_path, monkeypatch, synth_dir):
    workdir = tmp_path / "cwd"
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    out = tmp_path / "run"
    rc = cli.main([
        "train", "--model", "disc", "--train", str(synth_dir / "train.jsonl"),
        "--out", str(out), "--max-epochs", "1", "--batch", "8", *DISC_OPTS,
    ])
    assert rc == 0
    assert os.listdir(workdir) == []
    assert sorted(os.listdir(synth_dir)) == [
        "manifest.json", "test.jsonl", "train.jsonl", "val.jsonl",
    ]


# ---------------------------------------------------------------------------
# config files


def test_config_file_precedence(tmp_path, synth_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# comments and dashed keys are fine\n"
        "max-epochs = 1\n"
        "seed = 9\n"
        "batch = 8\n"
    )
    out = tmp_path / "out"
    rc = cli.main([
        "train", "--model", "disc", "--train", str(synth_dir / "train.jsonl"),
        "--out", str(out), "--config", str(cfg), "--seed", "3", *DISC_OPTS,
    ])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3          # flag beats file
    assert manifest["config"]["max_epochs"] == 1    # file beats default
    assert manifest["config"]["patience"] == 5      # builtin default
    assert manifest["seed"] == 3


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("verbosity = 3\n")
    rc = cli.main(["stats", "--in", "whatever.jsonl", "--config", str(cfg)])
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err


def test_config_file_can_supply_required_flags(capsys, tmp_path, synth_dir):
    cfg = tmp_path / "in.cfg"
    cfg.write_text(f"in = {synth_dir / 'train.jsonl'}\n")
    assert cli.main(["stats", "--config", str(cfg)]) == 0
    assert "clauses 21" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# convert


def test_convert_with_field_map(capsys, tmp_path):
    src = tmp_path / "foreign.jsonl"
    rows = [
        {"sentence": "the cat sat .", "tag": "STATE", "genre": "news"},
        {"sentence": "the dog ran .", "tag": "EVENT", "genre": "news"},
    ]
    src.write_text("".join(json.dumps(r) + "\n" for r in rows))
    out = tmp_path / "converted"
    rc = cli.main(["convert", "--in", str(src), "--out", str(out),
                   "--map", "text=sentence", "--map", "label=tag"])
    assert rc == 0
    assert "wrote 2 clauses" in capsys.readouterr().out
    clauses = load_corpus(out / "converted.jsonl")
    assert [cl.tokens for cl in clauses] == [["the", "cat", "sat", "."],
                                             ["the", "dog", "ran", "."]]
    assert clauses[0].label.name == "STATE"


# ---------------------------------------------------------------------------
# sweep / crossgenre


def test_sweep_outputs(tmp_path, synth_dir):
    out = tmp_path / "sweep"
    rc = cli.main([
        "sweep", "--models", "disc", "--ks", "2", "--seeds", "1,2",
        "--train", str(synth_dir / "train.jsonl"),
        "--val", str(synth_dir / "val.jsonl"),
        "--test", str(synth_dir / "test.jsonl"),
        "--out", str(out), "--max-epochs", "1", "--batch", "8", *DISC_OPTS,
    ])
    assert rc == 0
    lines = (out / "sweep.tsv").read_text().splitlines()
    assert lines[0] == "model\tk\tseed\taccuracy\tmacro_f1"
    assert len(lines) == 3
    assert [l.split("\t")[:3] for l in lines[1:]] == [["disc", "2", "1"], ["disc", "2", "2"]]
    alines = (out / "sweep_aggregates.tsv").read_text().splitlines()
    assert alines[0] == "model\tk\tmean_accuracy\tstd_accuracy\tmean_macro_f1\tstd_macro_f1"
    assert len(alines) == 2
    meta = json.loads((out / "sweep_meta.json").read_text())
    assert len(meta["rows"]) == 2
    got = [l.split("\t") for l in lines[1:]]
    for row, cells in zip(meta["rows"], got):
        assert row[:3] == [cells[0], int(cells[1]), int(cells[2])]
        assert row[3] == float(cells[3]) and row[4] == float(cells[4])


def test_sweep_rejects_unknown_model(capsys, tmp_path):
    rc = cli.main(["sweep", "--models", "disc,bogus", "--train", "t",
                   "--test", "t", "--out", str(tmp_path / "s")])
    assert rc == 2
    assert "unknown model 'bogus'" in capsys.readouterr().err


def test_crossgenre_outputs(tmp_path):
    corpus = make_synthetic_corpus(6, seed=0, genres=("news", "fiction"))
    data = tmp_path / "two-genre.jsonl"
    write_jsonl(corpus, data)
    out = tmp_path / "xg"
    rc = cli.main([
        "crossgenre", "--model", "disc", "--data", str(data),
        "--genres", "news", "--out", str(out),
        "--max-epochs", "1", "--batch", "8", *DISC_OPTS,
    ])
    assert rc == 0
    lines = (out / "crossgenre.tsv").read_text().splitlines()
    assert lines[0] == "model\tgenre\taccuracy\tmacro_f1"
    assert len(lines) == 2
    assert lines[1].split("\t")[:2] == ["disc", "news"]
    meta = json.loads((out / "crossgenre_meta.json").read_text())
    assert len(meta["rows"]) == 1


# ---------------------------------------------------------------------------
# gradcheck exit codes (suite itself is exercised elsewhere; stub it here)


def _fake_suite(passed):
    def suite(seeds=(0, 1, 2), **kwargs):
        return {"disc": {"max_rel_err": 1e-6 if passed else 0.5,
                         "passed": passed, "seconds": 0.01}}
    return suite


def test_gradcheck_pass_exit_code(capsys, monkeypatch, tmp_path):
    monkeypatch.setattr(cli.verify, "gradient_suite", _fake_suite(True))
    out = tmp_path / "gc"
    assert cli.main(["gradcheck", "--out", str(out)]) == 0
    assert "pass" in capsys.readouterr().out
    blob = json.loads((out / "gradcheck.json").read_text())
    assert blob["results"]["disc"]["passed"] is True


def test_gradcheck_failure_exit_code(capsys, monkeypatch):
    monkeypatch.setattr(cli.verify, "gradient_suite", _fake_suite(False))
    assert cli.main(["gradcheck"]) == 3
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "gradient check failed" in captured.err


# ---------------------------------------------------------------------------
# export-latents


def test_export_latents_from_vae_checkpoint(tmp_path, synth_dir, vae_run):
    out = tmp_path / "lat"
    rc = cli.main(["export-latents", "--ckpt", str(vae_run / "model.ckpt"),
                   "--data", str(synth_dir / "val.jsonl"), "--out", str(out)])
    assert rc == 0
    lines = (out / "latents.tsv").read_text().splitlines()
    assert lines[0] == "doc_id\tpar_id\tclause_idx\tlabel\tgenre\tmu_0\tmu_1\tmu_2\tmu_3"
    assert len(lines) == 15  # header + one row per clause
    cells = lines[1].split("\t")
    assert len(cells) == 9
    float(cells[5])  # posterior means parse as floats


def test_export_latents_rejects_baseline_checkpoint(capsys, tmp_path, synth_dir, disc_run):
    rc = cli.main(["export-latents", "--ckpt", str(disc_run / "model.ckpt"),
                   "--data", str(synth_dir / "val.jsonl"),
                   "--out", str(tmp_path / "nope")])
    assert rc == 2
    assert "no latent space" in capsys.readouterr().err
