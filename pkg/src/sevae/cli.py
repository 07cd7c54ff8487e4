"""Command-line entry point.

Subcommands: convert, stats, synth, train, eval, sweep, crossgenre,
gradcheck, export-latents. Exit codes: 0 success, 1 usage error, 2 data or
checkpoint error, 3 numerical failure (non-finite values, graph misuse, or
a failed gradient check).

Every flag can instead come from a flat key=value config file given with
--config (keys are the flag names with dashes as underscores; repeatable
flags take comma-separated entries). An explicit flag always overrides the
file. Each writing subcommand takes --out and touches nothing outside that
directory; a manifest.json recording the command line, the effective
config and its digest, input file digests, seed, version, and timestamp is
written there before any other output.
"""

import argparse
import hashlib
import json
import multiprocessing
import os
import sys
import time
from dataclasses import replace

from . import __version__, harness, vae, verify
from .data import (
    SEType, Split, genre_counts, label_counts, load_corpus,
    make_synthetic_corpus, manifest_digest, split_manifest,
    subsample_per_label, write_jsonl,
)
from .errors import CheckpointError, DataError, GraphError, NumericsError
from .models import MODEL_NAMES, default_spec, spec_hash


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# flag schemas: dest -> (type, default, required, extra argparse kwargs)
# type is one of str/int/float or "list" (repeatable flag; comma-separated
# in a config file). Defaults live here, not in argparse, so a config file
# can fill any flag the command line left out.

_TRAIN_FLAGS = {
    "lr": (float, None, False, {"help": "learning rate (default 1e-3, 5e-4 for vae-*)"}),
    "max_epochs": (int, 50, False, {}),
    "patience": (int, 5, False, {"help": "epochs without validation gain before stopping"}),
    "seed": (int, 0, False, {}),
    "batch": (int, 32, False, {"help": "logical batch size"}),
    "grad_clip": (float, 5.0, False, {}),
    "weight_decay": (float, 0.0, False, {}),
    "beta_schedule": (str, "fixed", False, {"choices": ("fixed", "linear")}),
    "beta_warmup_steps": (int, 0, False, {}),
    "opt": ("list", [], False, {"help": "model option override key=value, repeatable"}),
}

_SCHEMAS = {
    "convert": {
        "infile": (str, None, True, {"flag": "--in"}),
        "out": (str, None, True, {}),
        "map": ("list", [], False, {"help": "field mapping ours=theirs, repeatable"}),
        "name": (str, "converted.jsonl", False, {"help": "output file name"}),
    },
    "stats": {
        "infiles": ("list", None, True, {"flag": "--in"}),
    },
    "synth": {
        "out": (str, None, True, {}),
        "n_per_label": (int, 60, False, {}),
        "val_per_label": (int, 20, False, {}),
        "test_per_label": (int, 40, False, {}),
        "seed": (int, 0, False, {}),
        "noise": (float, 0.5, False, {}),
        "genre_salience": (float, 0.5, False, {}),
    },
    "train": {
        "model": (str, None, True, {"choices": MODEL_NAMES}),
        "train": (str, None, True, {}),
        "val": (str, None, False, {}),
        "test": (str, None, False, {}),
        "out": (str, None, True, {}),
        "k": (int, None, False, {"help": "subsample k clauses per label before training"}),
        **_TRAIN_FLAGS,
    },
    "eval": {
        "ckpt": (str, None, True, {}),
        "data": (str, None, True, {}),
        "out": (str, None, True, {}),
    },
    "sweep": {
        "models": ("list", None, True, {"help": "model names, repeatable or comma-separated"}),
        "ks": ("list", ["4", "8", "16", "32", "64", "100", "400", "600", "1000"], False, {}),
        "seeds": ("list", ["1", "2", "3", "4", "5"], False, {}),
        "train": (str, None, True, {}),
        "val": (str, None, False, {}),
        "test": (str, None, True, {}),
        "out": (str, None, True, {}),
        "jobs": (int, 1, False, {}),
        **_TRAIN_FLAGS,
    },
    "crossgenre": {
        "model": (str, None, True, {"choices": MODEL_NAMES}),
        "data": (str, None, True, {}),
        "genres": ("list", [], False, {"help": "target genres (default: all present)"}),
        "out": (str, None, True, {}),
        "jobs": (int, 1, False, {}),
        **_TRAIN_FLAGS,
    },
    "gradcheck": {
        "seeds": ("list", ["0", "1", "2"], False, {}),
        "out": (str, None, False, {"help": "optionally write gradcheck.json here"}),
    },
    "export-latents": {
        "ckpt": (str, None, True, {}),
        "data": (str, None, True, {}),
        "out": (str, None, True, {}),
    },
}

_DESCRIPTIONS = {
    "convert": "Convert a foreign JSONL file to the corpus schema.",
    "stats": "Print clause/label/genre tables for one or more corpus files.",
    "synth": "Generate a synthetic fixture corpus (train/val/test).",
    "train": "Train one model and checkpoint the best state.",
    "eval": "Evaluate a checkpoint on a corpus file.",
    "sweep": "k-per-label low-resource sweep over models and seeds.",
    "crossgenre": "Leave-one-genre-out training and evaluation loop.",
    "gradcheck": "Finite-difference verification of every training objective.",
    "export-latents": "Write posterior means for every clause to TSV.",
}


def build_parser():
    parser = _Parser(prog="sevae", description="Situation-entity clause classification toolkit.")
    parser.add_argument("--version", action="version", version=f"sevae {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    for command, schema in _SCHEMAS.items():
        sub = subs.add_parser(command, description=_DESCRIPTIONS[command])
        for dest, (typ, _default, _required, extra) in schema.items():
            extra = dict(extra)
            flag = extra.pop("flag", "--" + dest.replace("_", "-"))
            if typ == "list":
                sub.add_argument(flag, dest=dest, action="append", default=None, **extra)
            else:
                sub.add_argument(flag, dest=dest, type=typ, default=None, **extra)
        sub.add_argument("--config", default=None, help="key=value config file")
    return parser


def _parse_config_file(path):
    values = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc.strerror}") from None
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(raw, typ, dest):
    try:
        if typ == "list":
            return [x.strip() for x in raw.split(",") if x.strip()]
        return typ(raw)
    except (TypeError, ValueError):
        raise DataError(f"bad value {raw!r} for config key {dest}") from None


def _config_key_map(schema):
    """Config keys are the flag names; the dest spelling works too."""
    keys = {}
    for dest, (_typ, _default, _required, extra) in schema.items():
        flag = extra.get("flag", "--" + dest.replace("_", "-"))
        keys[flag.lstrip("-").replace("-", "_")] = dest
        keys[dest] = dest
    return keys


def _effective(args, command):
    """Merge precedence: explicit flag > config file > builtin default."""
    schema = _SCHEMAS[command]
    key_map = _config_key_map(schema)
    file_values = {}
    for key, raw in (_parse_config_file(args.config) if args.config else {}).items():
        if key not in key_map:
            raise DataError(f"unknown config key {key!r} for {command}")
        file_values[key_map[key]] = raw
    cfg = {}
    for dest, (typ, default, required, extra) in schema.items():
        value = getattr(args, dest)
        if value is None and dest in file_values:
            value = _coerce(file_values[dest], typ, dest)
        if value is None:
            value = default
        if typ == "list" and value is not None:
            value = [x.strip() for entry in value for x in entry.split(",") if x.strip()]
        if value is None and required:
            flag = extra.get("flag", "--" + dest.replace("_", "-"))
            raise UsageError(f"{command}: {flag} is required")
        choices = extra.get("choices")
        if choices and value is not None and value not in choices:
            raise UsageError(f"{command}: invalid value {value!r}; choose from {', '.join(choices)}")
        cfg[dest] = value
    return cfg


def _sha256_file(path):
    h = hashlib.sha256()
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, cfg, inputs, seed):
    os.makedirs(out_dir, exist_ok=True)
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": list(sys.argv) if sys.argv else ["sevae"],
        "config": cfg,
        "config_digest": hashlib.sha256(blob.encode()).hexdigest(),
        "inputs": {p: _sha256_file(p) for p in inputs},
        "seed": seed,
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _split_pairs(entries, what):
    pairs = {}
    for entry in entries:
        if "=" not in entry:
            raise DataError(f"{what} expects key=value, got {entry!r}")
        key, _, value = entry.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def _int_list(values, what):
    try:
        return [int(v) for v in values]
    except ValueError:
        raise DataError(f"{what} expects integers, got {values!r}") from None


def _train_config(model_name, cfg):
    keys = ("lr", "max_epochs", "patience", "seed", "grad_clip", "weight_decay",
            "beta_schedule", "beta_warmup_steps")
    overrides = {k: cfg[k] for k in keys if cfg.get(k) is not None}
    overrides["logical_batch"] = cfg["batch"]
    return harness.default_train_config(model_name, **overrides)


def _load_split(cfg):
    train = load_corpus(cfg["train"])
    validation = load_corpus(cfg["val"]) if cfg.get("val") else []
    test = load_corpus(cfg["test"]) if cfg.get("test") else []
    split = Split(train, validation, test, "file-given")
    if cfg.get("k"):
        split = subsample_per_label(train, cfg["k"], cfg["seed"], validation, test)
    return split


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_convert(cfg):
    schema = _split_pairs(cfg["map"], "--map")
    clauses = load_corpus(cfg["infile"], schema)
    _write_manifest(cfg["out"], cfg, [cfg["infile"]], seed=None)
    out_path = os.path.join(cfg["out"], cfg["name"])
    write_jsonl(clauses, out_path)
    print(f"wrote {len(clauses)} clauses to {out_path}")
    return 0


def _cmd_stats(cfg):
    combined = []
    for path in cfg["infiles"]:
        clauses = load_corpus(path)
        combined.extend(clauses)
        print(f"file {path} clauses {len(clauses)}")
    labels = label_counts(combined)
    for lab in SEType:
        print(f"label {lab.name} {labels[lab]}")
    for genre, n in sorted(genre_counts(combined).items()):
        print(f"genre {genre} {n}")
    return 0


def _cmd_synth(cfg):
    _write_manifest(cfg["out"], cfg, [], seed=cfg["seed"])
    parts = (("train", cfg["n_per_label"], cfg["seed"]),
             ("val", cfg["val_per_label"], cfg["seed"] + 1),
             ("test", cfg["test_per_label"], cfg["seed"] + 2))
    for name, n, seed in parts:
        clauses = make_synthetic_corpus(n, seed, cfg["noise"], cfg["genre_salience"])
        path = os.path.join(cfg["out"], f"{name}.jsonl")
        write_jsonl(clauses, path)
        print(f"wrote {len(clauses)} clauses to {path}")
    return 0


def _cmd_train(cfg):
    split = _load_split(cfg)
    spec = default_spec(cfg["model"], **_split_pairs(cfg["opt"], "--opt"))
    train_cfg = _train_config(cfg["model"], cfg)
    inputs = [p for p in (cfg["train"], cfg["val"], cfg["test"]) if p]
    manifest_cfg = dict(cfg, spec=spec.to_json(), train_config=train_cfg.to_json())
    _write_manifest(cfg["out"], manifest_cfg, inputs, seed=train_cfg.seed)
    with open(os.path.join(cfg["out"], "split.json"), "w", encoding="utf-8") as fh:
        json.dump(split_manifest(split), fh)
        fh.write("\n")
    log_path = os.path.join(cfg["out"], "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        result = harness.train(
            spec, split, train_cfg,
            log_hook=lambda rec: (fh.write(json.dumps(rec) + "\n"), fh.flush()),
        )
    ckpt_path = os.path.join(cfg["out"], "model.ckpt")
    harness.save_checkpoint(result, ckpt_path, meta={
        "split_provenance": split.provenance,
        "split_digest": manifest_digest(split_manifest(split)),
        "manifest": "manifest.json",
    })
    print(f"trained {cfg['model']} for {len(result.log)} epochs; checkpoint at {ckpt_path}")
    if split.test:
        meta = {"spec_hash": spec_hash(spec), "model": cfg["model"],
                "provenance": split.provenance, "seed": train_cfg.seed,
                "manifest": "manifest.json"}
        report = harness.evaluate(result.model, split.test, result.vocab, meta)
        with open(os.path.join(cfg["out"], "eval_test.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2)
            fh.write("\n")
        print(f"test accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f}")
    return 0


def _cmd_eval(cfg):
    model, vocab, meta = harness.load_checkpoint(cfg["ckpt"])
    clauses = load_corpus(cfg["data"])
    _write_manifest(cfg["out"], cfg, [cfg["ckpt"], cfg["data"]], seed=meta.get("seed"))
    report = harness.evaluate(model, clauses, vocab, dict(meta, manifest="manifest.json"))
    with open(os.path.join(cfg["out"], "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
    print(f"accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f}")
    return 0


def _sweep_cell(job):
    spec_json, k, seed, paths, cfg_json = job
    from .models import ModelSpec
    spec = ModelSpec.from_json(spec_json)
    train_cs = load_corpus(paths["train"])
    val_cs = load_corpus(paths["val"]) if paths.get("val") else []
    test_cs = load_corpus(paths["test"])
    split = subsample_per_label(train_cs, k, seed, val_cs, test_cs)
    result = harness.train(spec, split, harness.TrainConfig(**cfg_json))
    meta = {"spec_hash": spec_hash(spec), "model": spec.name,
            "provenance": split.provenance, "seed": seed}
    report = harness.evaluate(result.model, split.test, result.vocab, meta)
    return (spec.name, k, seed, report.accuracy, report.macro_f1)


def _run_jobs(worker, jobs, n_jobs):
    if n_jobs > 1:
        with multiprocessing.Pool(n_jobs) as pool:
            return pool.map(worker, jobs)
    return [worker(job) for job in jobs]


def _cmd_sweep(cfg):
    model_names = cfg["models"]
    for name in model_names:
        if name not in MODEL_NAMES:
            raise DataError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
    ks = _int_list(cfg["ks"], "--ks")
    seeds = _int_list(cfg["seeds"], "--seeds")
    opts = _split_pairs(cfg["opt"], "--opt")
    specs = [default_spec(name, **opts) for name in model_names]
    paths = {"train": cfg["train"], "val": cfg["val"], "test": cfg["test"]}
    inputs = [p for p in paths.values() if p]
    _write_manifest(cfg["out"], dict(cfg, models=model_names, ks=ks, seeds=seeds),
                    inputs, seed=cfg["seed"])
    jobs = []
    for spec in specs:
        base = _train_config(spec.name, cfg)
        for k in ks:
            for seed in seeds:
                jobs.append((spec.to_json(), k, seed, paths,
                             replace(base, seed=seed).to_json()))
    rows = _run_jobs(_sweep_cell, jobs, cfg["jobs"])
    aggregates = harness.aggregate_sweep(rows)
    harness.write_sweep_tsv(rows, os.path.join(cfg["out"], "sweep.tsv"))
    harness.write_sweep_aggregates_tsv(aggregates, os.path.join(cfg["out"], "sweep_aggregates.tsv"))
    sidecar = {"manifest": "manifest.json",
               "rows": [list(r) for r in rows],
               "aggregates": [list(a) for a in aggregates]}
    with open(os.path.join(cfg["out"], "sweep_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    for name, k, mean_acc, _sa, mean_f1, _sf in aggregates:
        print(f"{name} k={k} mean_accuracy={mean_acc:.4f} mean_macro_f1={mean_f1:.4f}")
    return 0


def _crossgenre_cell(job):
    spec_json, target, path, cfg_json = job
    from .models import ModelSpec
    spec = ModelSpec.from_json(spec_json)
    corpus = load_corpus(path)
    rows = harness.run_cross_genre(spec, corpus, harness.TrainConfig(**cfg_json), [target])
    return rows[0]


def _cmd_crossgenre(cfg):
    corpus = load_corpus(cfg["data"])
    present = sorted({cl.genre for cl in corpus})
    if len(present) < 2:
        raise DataError("cross-genre evaluation needs at least 2 genres")
    targets = cfg["genres"] or present
    spec = default_spec(cfg["model"], **_split_pairs(cfg["opt"], "--opt"))
    train_cfg = _train_config(cfg["model"], cfg)
    _write_manifest(cfg["out"], dict(cfg, targets=targets, spec=spec.to_json()),
                    [cfg["data"]], seed=train_cfg.seed)
    jobs = [(spec.to_json(), t, cfg["data"], train_cfg.to_json()) for t in targets]
    rows = _run_jobs(_crossgenre_cell, jobs, cfg["jobs"])
    harness.write_cross_genre_tsv(rows, os.path.join(cfg["out"], "crossgenre.tsv"))
    with open(os.path.join(cfg["out"], "crossgenre_meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"manifest": "manifest.json", "rows": [list(r) for r in rows]}, fh, indent=2)
        fh.write("\n")
    for name, genre, acc, f1 in rows:
        print(f"{name} genre={genre} accuracy={acc:.4f} macro_f1={f1:.4f}")
    return 0


def _cmd_gradcheck(cfg):
    seeds = tuple(_int_list(cfg["seeds"], "--seeds"))
    results = verify.gradient_suite(seeds=seeds)
    width = max(len(n) for n in results)
    all_passed = True
    for name, r in results.items():
        status = "pass" if r["passed"] else "FAIL"
        all_passed &= r["passed"]
        print(f"{name:{width}s}  max_rel_err {r['max_rel_err']:.3e}  {status}  ({r['seconds']:.1f}s)")
    if cfg["out"]:
        _write_manifest(cfg["out"], cfg, [], seed=None)
        with open(os.path.join(cfg["out"], "gradcheck.json"), "w", encoding="utf-8") as fh:
            json.dump({"manifest": "manifest.json", "results": results}, fh, indent=2)
            fh.write("\n")
    if not all_passed:
        raise NumericsError("gradient check failed; see table above")
    return 0


def _cmd_export_latents(cfg):
    model, vocab, meta = harness.load_checkpoint(cfg["ckpt"])
    if not hasattr(model, "latent_mean"):
        raise DataError("checkpointed model has no latent space to export")
    clauses = load_corpus(cfg["data"])
    _write_manifest(cfg["out"], cfg, [cfg["ckpt"], cfg["data"]], seed=meta.get("seed"))
    rows = vae.export_latents(model, clauses, vocab)
    out_path = os.path.join(cfg["out"], "latents.tsv")
    vae.write_latents_tsv(rows, model.latent_dim, out_path)
    print(f"wrote {len(rows)} rows to {out_path}")
    return 0


_COMMANDS = {
    "convert": _cmd_convert,
    "stats": _cmd_stats,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "crossgenre": _cmd_crossgenre,
    "gradcheck": _cmd_gradcheck,
    "export-latents": _cmd_export_latents,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            print("sevae: a subcommand is required", file=sys.stderr)
            return 1
        return _COMMANDS[args.command](_effective(args, args.command))
    except UsageError as exc:
        print(f"sevae: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"sevae: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, GraphError) as exc:
        print(f"sevae: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
