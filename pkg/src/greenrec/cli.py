"""Command-line pipeline: synth -> build-vocab -> pretrain -> encode ->
train -> evaluate -> profile -> report.

One JSON config file drives every stage; each command validates its own
section, checks its upstream artifacts (refusing stale caches by hash),
writes its outputs under the run directory, and appends a line to
``manifest.jsonl``. Re-running a command whose config, inputs, and
artifacts all hash identically reuses the existing artifact.

Exit codes: 0 success, 2 config error, 3 stale or missing artifact,
4 training divergence.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evalgreen, recsys, synth
from .checkpoint import CheckpointError, file_sha256, load_params, save_params
from .corpus import (CorpusError, FieldLimits, Vocabulary, build_vocabulary,
                     load_behaviors, load_news, tokenize_corpus)
from .mft import MftConfig, MftModel, PretrainConfig, TrainingDiverged, pretrain
from .recsys import DownstreamConfig, NewsSourceMode, build_model, build_source, score_records
from .repstore import CacheError, ProvenanceError, build_cache, load_cache, save_cache

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    """The config file is missing, malformed, or fails validation."""


class StaleArtifactError(IOError):
    """An upstream artifact is missing or its provenance hash mismatches."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

DEFAULTS = {
    "seed": 0,
    "vocab": {"min_count": 1},
    "corpus": {"title_len": 20, "category_len": 1, "abstract_len": 40, "max_history": 30},
    "mft": {"d": 64, "layers": 3, "heads": 4, "mask_ratio": 0.15,
            "fa_negative_ratio": 0.5, "lr": 5e-4, "batch_size": 64, "epochs": 3},
    "downstream": {"model": "matching", "mode": "frozen", "d_model": 64, "heads": 2,
                   "negatives": 4, "cross_layers": 2, "tower": [64, 32],
                   "lr": 1e-3, "batch_size": 64, "epochs": 3},
    "energy": {"power_kw": 0.35, "carbon_g_per_kwh": 722.0},
    "profile": {"batch_size": 64, "thresholds": None},
    "synth": {},
}


def load_config(path, overrides):
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if "paths" not in cfg:
        raise ConfigError("config is missing the 'paths' section")
    merged = {k: ({**v, **cfg.get(k, {})} if isinstance(v, dict) else cfg.get(k, v))
              for k, v in DEFAULTS.items()}
    merged["paths"] = cfg["paths"]
    if overrides.seed is not None:
        merged["seed"] = overrides.seed
    if overrides.out is not None:
        merged["paths"]["out"] = overrides.out
    if "out" not in merged["paths"]:
        raise ConfigError("config paths section must name an 'out' directory")
    return merged


def require_path(cfg, key):
    paths = cfg["paths"]
    if key not in paths:
        raise ConfigError(f"config paths section is missing '{key}'")
    p = Path(paths[key])
    if not p.exists():
        raise StaleArtifactError(f"required input '{key}' does not exist: {p}")
    return p


def out_dir(cfg):
    d = Path(cfg["paths"]["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def section_digest(cfg, *sections):
    doc = {"seed": cfg["seed"]}
    for s in sections:
        doc[s] = cfg.get(s)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def field_limits(cfg):
    c = cfg["corpus"]
    try:
        return FieldLimits(title=c["title_len"], category=c["category_len"],
                           abstract=c["abstract_len"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad corpus section: {exc}") from exc


def mft_config(cfg):
    m, c = cfg["mft"], cfg["corpus"]
    try:
        return MftConfig(d=m["d"], layers=m["layers"], heads=m["heads"],
                         title_len=c["title_len"], category_len=c["category_len"],
                         abstract_len=c["abstract_len"], mask_ratio=m["mask_ratio"],
                         fa_negative_ratio=m["fa_negative_ratio"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad mft section: {exc}") from exc


def downstream_config(cfg, args):
    d = dict(cfg["downstream"])
    if getattr(args, "model", None):
        d["model"] = args.model
    if getattr(args, "mode", None):
        d["mode"] = args.mode
    try:
        mode = NewsSourceMode(d["mode"])
        return DownstreamConfig(model=d["model"], mode=mode, d_model=d["d_model"],
                                heads=d["heads"], negatives=d["negatives"],
                                cross_layers=d["cross_layers"], tower=tuple(d["tower"]),
                                max_history=cfg["corpus"]["max_history"], lr=d["lr"],
                                batch_size=d["batch_size"], epochs=d["epochs"],
                                seed=cfg["seed"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad downstream section: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def manifest_path(cfg):
    return out_dir(cfg) / "manifest.jsonl"


def read_manifest(cfg):
    path = manifest_path(cfg)
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def append_manifest(cfg, entry):
    with open(manifest_path(cfg), "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def hash_files(paths):
    return {str(p): file_sha256(p).hex() for p in paths}


def find_reusable(cfg, command, digest, inputs):
    """A previous manifest line whose config, inputs, and artifacts all
    still match lets the command reuse its artifacts untouched."""
    for entry in reversed(read_manifest(cfg)):
        if entry.get("command") != command or entry.get("config_digest") != digest:
            continue
        if entry.get("inputs") != inputs or entry.get("exit_status") != 0:
            continue
        arts = entry.get("artifacts", {})
        if arts and all(Path(p).exists() and file_sha256(p).hex() == h for p, h in arts.items()):
            return entry
    return None


def run_command(cfg, command, digest, inputs, produce, extra=None):
    """Shared execute-or-reuse wrapper around one pipeline stage."""
    input_hashes = hash_files(inputs)
    prior = find_reusable(cfg, command, digest, input_hashes)
    if prior is not None:
        print(f"{command}: artifacts up to date, reusing")
        return prior
    start = time.perf_counter()
    artifacts, more = produce()
    entry = {
        "command": command,
        "config_digest": digest,
        "inputs": input_hashes,
        "artifacts": hash_files(artifacts),
        "wall_clock_s": time.perf_counter() - start,
        "exit_status": 0,
        "extra": {**(extra or {}), **(more or {})},
    }
    append_manifest(cfg, entry)
    return entry


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------

def load_corpus(cfg):
    news_path = require_path(cfg, "news")
    vocab_path = out_dir(cfg) / "vocab.txt"
    if not vocab_path.exists():
        raise StaleArtifactError(f"vocabulary not built yet: {vocab_path} (run build-vocab)")
    vocab = Vocabulary.load(vocab_path)
    articles = tokenize_corpus(load_news(news_path), vocab, field_limits(cfg))
    return vocab, articles, news_path, vocab_path


def load_encoder(cfg, vocab):
    ckpt_path = out_dir(cfg) / "mft.ckpt"
    if not ckpt_path.exists():
        raise StaleArtifactError(f"encoder checkpoint not found: {ckpt_path} (run pretrain)")
    model = MftModel(mft_config(cfg), len(vocab), seed=cfg["seed"])
    model.params.load_arrays(load_params(ckpt_path))
    return model, ckpt_path


def load_split(cfg, key, articles):
    path = require_path(cfg, key)
    return load_behaviors(path, articles, max_history=cfg["corpus"]["max_history"]), path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg, args):
    digest = section_digest(cfg, "synth")
    try:
        scfg = synth.SynthConfig(**{**cfg["synth"], "seed": cfg["seed"]})
    except TypeError as exc:
        raise ConfigError(f"bad synth section: {exc}") from exc
    data_dir = out_dir(cfg) / "data"
    defaults = {"news": data_dir / "news.jsonl",
                "behaviors_train": data_dir / "behaviors_train.tsv",
                "behaviors_val": data_dir / "behaviors_val.tsv",
                "behaviors_test": data_dir / "behaviors_test.tsv"}
    targets = {k: Path(cfg["paths"].get(k, v)) for k, v in defaults.items()}

    def produce():
        data = synth.generate(scfg)
        tmp = synth.write_dataset(data, data_dir)
        for key, written in tmp.items():
            targets[key].parent.mkdir(parents=True, exist_ok=True)
            if written != targets[key]:
                targets[key].write_bytes(written.read_bytes())
                written.unlink()
        return list(targets.values()), {"articles": len(data.news_rows),
                                        "unseen": len(data.unseen_ids)}

    run_command(cfg, "synth", digest, [], produce)
    print(f"synth: wrote dataset under {targets['news'].parent}")
    return EXIT_OK


def cmd_build_vocab(cfg, args):
    news_path = require_path(cfg, "news")
    digest = section_digest(cfg, "vocab")
    vocab_path = out_dir(cfg) / "vocab.txt"

    def produce():
        vocab = build_vocabulary(news_path, min_count=cfg["vocab"]["min_count"])
        vocab.save(vocab_path)
        return [vocab_path], {"vocab_size": len(vocab)}

    entry = run_command(cfg, "build-vocab", digest, [news_path], produce)
    print(f"build-vocab: N = {entry['extra'].get('vocab_size', '?')} -> {vocab_path}")
    return EXIT_OK


def cmd_pretrain(cfg, args):
    vocab, articles, news_path, vocab_path = load_corpus(cfg)
    digest = section_digest(cfg, "mft", "corpus")
    ckpt_path = out_dir(cfg) / "mft.ckpt"
    log_path = out_dir(cfg) / "pretrain_log.jsonl"

    def produce():
        model = MftModel(mft_config(cfg), len(vocab), seed=cfg["seed"])
        m = cfg["mft"]
        pcfg = PretrainConfig(epochs=m["epochs"], batch_size=m["batch_size"],
                              lr=m["lr"], seed=cfg["seed"])
        try:
            result = pretrain(model, list(articles.values()), pcfg)
        except TrainingDiverged as exc:
            save_params(out_dir(cfg) / "mft.diverged.ckpt", exc.last_good)
            raise
        save_params(ckpt_path, model.params.arrays())
        with open(log_path, "w", encoding="utf-8") as f:
            for row in result.history:
                f.write(json.dumps(row) + "\n")
        return [ckpt_path, log_path], {"train_articles": result.train_size,
                                       "val_articles": result.val_size,
                                       "final": result.history[-1]}

    entry = run_command(cfg, "pretrain", digest, [news_path, vocab_path], produce)
    print(f"pretrain: {entry['extra'].get('final', {})}")
    return EXIT_OK


def cmd_encode(cfg, args):
    vocab, articles, news_path, vocab_path = load_corpus(cfg)
    model, ckpt_path = load_encoder(cfg, vocab)
    digest = section_digest(cfg, "mft", "corpus")
    cache_path = out_dir(cfg) / "news.cache"

    def produce():
        counter = recsys.EncoderCallCounter()
        cache = build_cache(model, articles.values(), file_sha256(ckpt_path),
                            file_sha256(vocab_path), counter=counter)
        save_cache(cache, cache_path)
        return [cache_path], {"entries": len(cache),
                              "cache_build_calls": counter.cache_build_calls}

    entry = run_command(cfg, "encode", digest, [news_path, vocab_path, ckpt_path], produce)
    print(f"encode: {entry['extra'].get('entries', '?')} vectors -> {cache_path}")
    return EXIT_OK


def _train_deps(cfg, dcfg, articles, vocab):
    """Mode-specific inputs for training/evaluation source construction."""
    if dcfg.mode == NewsSourceMode.FROZEN_CACHE:
        cache_path = out_dir(cfg) / "news.cache"
        if not cache_path.exists():
            raise StaleArtifactError(f"representation cache not found: {cache_path} (run encode)")
        _, ckpt_path = load_encoder(cfg, vocab)
        vocab_path = out_dir(cfg) / "vocab.txt"
        try:
            cache = load_cache(cache_path, expect_model_hash=file_sha256(ckpt_path),
                               expect_vocab_hash=file_sha256(vocab_path))
        except ProvenanceError as exc:
            raise StaleArtifactError(
                f"{exc} (re-run encode after pretrain/build-vocab changes)") from exc
        return {"cache": cache}, [cache_path]
    if dcfg.mode == NewsSourceMode.ID_EMBEDDING:
        return {"news_ids": list(articles)}, []
    model, ckpt_path = load_encoder(cfg, vocab)
    return {"mft_model": model, "articles_by_id": articles}, [ckpt_path]


def _eval_auc(dcfg):
    def fn(model, source, records):
        pairs = score_records(model, source, records, dcfg)
        return evalgreen.aggregate_impressions(pairs).auc
    return fn


def cmd_train(cfg, args):
    vocab, articles, news_path, vocab_path = load_corpus(cfg)
    dcfg = downstream_config(cfg, args)
    deps, dep_paths = _train_deps(cfg, dcfg, articles, vocab)
    train_load, train_path = load_split(cfg, "behaviors_train", articles)
    val_records = None
    if "behaviors_val" in cfg["paths"]:
        val_load, _ = load_split(cfg, "behaviors_val", articles)
        val_records = val_load.records
    digest = section_digest(cfg, "downstream", "corpus")
    tag = f"{dcfg.model}_{dcfg.mode.value}"
    model_path = out_dir(cfg) / f"downstream_{tag}.ckpt"
    log_path = out_dir(cfg) / f"train_{tag}_log.jsonl"

    def produce():
        try:
            result = recsys.train_downstream(dcfg, train_load.records,
                                             val_records=val_records,
                                             eval_fn=_eval_auc(dcfg), **deps)
        except TrainingDiverged as exc:
            save_params(out_dir(cfg) / f"downstream_{tag}.diverged.ckpt", exc.last_good)
            raise
        named = {p.name: p.data for p in result.model.parameters() + result.source.trainable_params()}
        save_params(model_path, named)
        with open(log_path, "w", encoding="utf-8") as f:
            for row in result.history:
                f.write(json.dumps(row) + "\n")
        return [model_path, log_path], {
            "model": dcfg.model, "mode": dcfg.mode.value,
            "train_wall_s": result.wall_seconds,
            "dropped_records": train_load.dropped,
            "cache_build_calls": result.counter.cache_build_calls,
            "downstream_calls": result.counter.downstream_calls,
            "final": result.history[-1],
        }

    entry = run_command(cfg, "train", digest, [news_path, vocab_path, train_path] + dep_paths,
                        produce)
    extra = entry["extra"]
    print(f"train[{tag}]: encoder calls downstream={extra.get('downstream_calls')} "
          f"final={extra.get('final')}")
    return EXIT_OK


def _restore_downstream(cfg, dcfg, articles, vocab):
    tag = f"{dcfg.model}_{dcfg.mode.value}"
    model_path = out_dir(cfg) / f"downstream_{tag}.ckpt"
    if not model_path.exists():
        raise StaleArtifactError(f"trained model not found: {model_path} (run train)")
    named = load_params(model_path)
    deps, _ = _train_deps(cfg, dcfg, articles, vocab)
    source = build_source(dcfg.mode, counter=recsys.EncoderCallCounter(),
                          d_model=dcfg.d_model, seed=dcfg.seed, **deps)
    model = build_model(dcfg, source)
    model.params.load_arrays(named)
    if source.trainable_params():
        registry = getattr(source, "params", None)
        if registry is not None:
            registry.load_arrays(named)
        else:  # e2e: encoder params live under their own names
            source.model.params.load_arrays(named)
    return model, source, model_path


def cmd_evaluate(cfg, args):
    vocab, articles, news_path, vocab_path = load_corpus(cfg)
    dcfg = downstream_config(cfg, args)
    model, source, model_path = _restore_downstream(cfg, dcfg, articles, vocab)
    test_load, test_path = load_split(cfg, "behaviors_test", articles)
    digest = section_digest(cfg, "downstream", "energy")
    tag = f"{dcfg.model}_{dcfg.mode.value}"
    metrics_path = out_dir(cfg) / f"metrics_{tag}.json"

    def produce():
        pairs = score_records(model, source, test_load.records, dcfg)
        report = evalgreen.aggregate_impressions(pairs)
        with open(metrics_path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return [metrics_path], {"model": dcfg.model, "mode": dcfg.mode.value,
                                "metrics": report.to_dict()}

    entry = run_command(cfg, "evaluate", digest, [model_path, test_path], produce)
    print(f"evaluate[{tag}]: {entry['extra'].get('metrics')}")
    return EXIT_OK


def cmd_profile(cfg, args):
    _, articles, news_path, vocab_path = load_corpus(cfg)
    train_load, train_path = load_split(cfg, "behaviors_train", articles)
    digest = section_digest(cfg, "profile", "corpus")
    json_path = out_dir(cfg) / "redundancy.json"
    csv_path = out_dir(cfg) / "redundancy_cdf.csv"

    def produce():
        stats = evalgreen.profile_redundancy(train_load.records,
                                             batch_size=cfg["profile"]["batch_size"],
                                             thresholds=cfg["profile"]["thresholds"])
        evalgreen.write_report(json_path, redundancy=stats, cdf_csv_path=csv_path)
        return [json_path, csv_path], {"epoch_mean": stats.epoch_mean,
                                       "per_user_mean": stats.per_user_mean}

    entry = run_command(cfg, "profile", digest, [train_path], produce)
    print(f"profile: mean appearances per epoch = {entry['extra'].get('epoch_mean'):.2f}")
    return EXIT_OK


def _run_energy(cfg, manifest, mode_tag):
    """Wall seconds attributed to a run: training, plus the cache build
    (encode) for frozen-cache runs."""
    seconds = 0.0
    found = False
    for entry in manifest:
        ex = entry.get("extra", {})
        if entry.get("command") == "train" and f"{ex.get('model')}_{ex.get('mode')}" == mode_tag:
            seconds += ex.get("train_wall_s", entry.get("wall_clock_s", 0.0))
            found = True
    if mode_tag.endswith("_frozen"):
        for entry in manifest:
            if entry.get("command") == "encode":
                seconds += entry.get("wall_clock_s", 0.0)
                break
    return seconds if found else None


def cmd_report(cfg, args):
    digest = section_digest(cfg, "energy")
    manifest = read_manifest(cfg)
    energy_cfg = cfg["energy"]
    report_path = out_dir(cfg) / "report.json"

    def produce():
        runs = {}
        for entry in manifest:
            if entry.get("command") != "evaluate":
                continue
            ex = entry["extra"]
            tag = f"{ex['model']}_{ex['mode']}"
            seconds = _run_energy(cfg, manifest, tag)
            energy = None
            if seconds is not None:
                energy = evalgreen.energy_report(
                    energy_cfg["power_kw"], seconds / 3600.0,
                    energy_cfg["carbon_g_per_kwh"], auc_value=ex["metrics"]["auc"])
            runs[tag] = {
                "metrics": ex["metrics"],
                "wall_seconds": seconds,
                "energy": energy.to_dict() if energy else None,
            }
        comparisons = {}
        pairs = [(a, b) for a in runs for b in runs
                 if a.endswith("_e2e") and b.endswith("_frozen")
                 and a.split("_")[0] == b.split("_")[0]]
        for e2e_tag, frozen_tag in pairs:
            e, fz = runs[e2e_tag]["energy"], runs[frozen_tag]["energy"]
            if not e or not fz or fz["co2e_g"] == 0:
                continue
            key = e2e_tag.split("_")[0]
            comparisons[key] = {
                "co2e_e2e_g": e["co2e_g"],
                "co2e_frozen_g": fz["co2e_g"],
                "co2e_ratio_e2e_over_frozen": e["co2e_g"] / fz["co2e_g"],
                "apc_e2e": e["apc"],
                "apc_frozen": fz["apc"],
                "apc_ratio_frozen_over_e2e": (fz["apc"] / e["apc"]) if e["apc"] else None,
            }
        doc = {"runs": runs, "comparisons": comparisons}
        red_path = out_dir(cfg) / "redundancy.json"
        if red_path.exists():
            with open(red_path, encoding="utf-8") as f:
                doc["redundancy"] = json.load(f).get("redundancy")
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        return [report_path], {"runs": list(runs), "comparisons": comparisons}

    entry = run_command(cfg, "report", digest, [], produce)
    print(f"report: {report_path}")
    for key, comp in entry["extra"].get("comparisons", {}).items():
        print(f"  {key}: co2e ratio e2e/frozen = {comp['co2e_ratio_e2e_over_frozen']:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "encode": cmd_encode,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "profile": cmd_profile,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="greenrec",
                                     description="Two-stage encode-once news recommendation pipeline")
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in ("train", "evaluate"):
            p.add_argument("--model", choices=["matching", "ranking"], default=None)
            p.add_argument("--mode", choices=[m.value for m in NewsSourceMode], default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StaleArtifactError, ProvenanceError, CacheError, CheckpointError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (last good parameters saved)", file=sys.stderr)
        return EXIT_DIVERGED
    except CorpusError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
