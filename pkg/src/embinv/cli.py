"""``embinv`` command line: dataset building, training, inversion, evaluation,
defense sweeps and analyses, each writing into one run directory.

Configuration comes from built-in defaults, then an optional YAML file
(``--config``), then flags. Every command writes ``manifests/<command>.json``
(``train-<role>.json`` for training)
holding the fully resolved config and the code version.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError

logger = logging.getLogger("embinv")

DEFAULTS: dict = {
    "run_dir": "runs/default",
    "seed": 0,
    "workers": 1,
    "embedder": {
        "kind": "synthetic",      # synthetic | local-encoder | remote-api
        "model": None,            # sentence-transformers name or remote model name
        "dim": 32,
        "seed": 0,
        "tokenizer_id": "whitespace",
        "max_input_tokens": 512,
        "base_url": None,         # remote-api; falls back to EMBED_API_BASE_URL
    },
    "data": {
        "corpus": None,           # JSONL path; when null the synthetic corpus is used
        "synthetic": {"n": 2000, "vocab_size": 256, "max_len": 8, "min_len": 1,
                      "branching": 4, "seed": 0, "unique_bags": True},
        "max_tokens": 32,
        "eval_fraction": 0.1,
    },
    "model": {"d_enc": 128, "s": 16, "n_heads": 4, "enc_layers": 2, "dec_layers": 2,
              "ffn_dim": 256, "dropout": 0.0, "activation": "gelu", "feedback": True},
    "train": {"role": "base", "resume": False, "lr": 2e-4, "epochs": 100, "batch_size": 128,
              "warmup_fraction": 0.05, "weight_decay": 0.0, "grad_clip": 1.0, "max_steps": None},
    "decode": {"steps": 20, "beam_width": 1, "feedback": True, "init": "base"},
    "eval": {"split": "eval", "limit": None, "set_f1": False},
    "defense": {"lambdas": [0.0, 0.001, 0.01, 0.1, 1.0], "n_queries": 100},
    "analyze": {"what": ["closeness", "frequency", "scatter"]},
}


# -- config resolution -----------------------------------------------------------

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
        cfg = _merge(cfg, doc)
    flags: dict = {}
    for dotted, attr in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set_path(flags, dotted, value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(flags, key, yaml.safe_load(raw))
    return _merge(cfg, flags)


# flag destination -> dotted config key
FLAG_KEYS = {
    "run_dir": "run_dir", "seed": "seed", "workers": "workers",
    "data.corpus": "corpus",
    "train.role": "role", "train.resume": "resume", "train.epochs": "epochs",
    "train.max_steps": "max_steps",
    "decode.steps": "steps", "decode.beam_width": "beam_width",
    "decode.feedback": "feedback", "decode.init": "init",
    "eval.split": "split", "eval.limit": "limit",
    "defense.lambdas": "lambdas", "analyze.what": "what",
}


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(cfg: dict, command: str, extra: dict | None = None) -> Path:
    run = Path(cfg["run_dir"])
    (run / "manifests").mkdir(parents=True, exist_ok=True)
    path = run / "manifests" / f"{command}.json"
    doc = {"command": command, "version": code_version(), "config": cfg,
           "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})}
    path.write_text(json.dumps(doc, indent=2, default=str))
    return path


# -- shared plumbing -------------------------------------------------------------

def make_embedder(cfg: dict):
    from .embedders import CallableEmbedder, SyntheticEmbedder

    e = cfg["embedder"]
    kind = e["kind"]
    if kind == "synthetic":
        return SyntheticEmbedder(dim=e["dim"], seed=e["seed"], tokenizer_id=e["tokenizer_id"],
                                 max_input_tokens=e["max_input_tokens"])
    if kind == "local-encoder":
        if not e["model"]:
            raise ConfigError("embedder.model is required for a local encoder")
        return CallableEmbedder.from_sentence_transformers(e["model"], e["max_input_tokens"])
    if kind == "remote-api":
        from .remote import Endpoint, RemoteEmbedder
        if not e["model"]:
            raise ConfigError("embedder.model is required for a remote embedder")
        ep = (Endpoint(e["base_url"], e["model"], os.environ.get("EMBED_API_KEY"))
              if e["base_url"] else Endpoint.from_env(e["model"]))
        return RemoteEmbedder(ep, dimension=e["dim"], max_input_tokens=e["max_input_tokens"],
                              max_in_flight=max(1, cfg["workers"]))
    raise ConfigError(f"embedder.kind must be synthetic, local-encoder or remote-api, got {kind!r}")


def _paths(cfg: dict) -> dict[str, Path]:
    run = Path(cfg["run_dir"])
    return {"run": run, "data": run / "data", "cache": run / "data" / "cache",
            "base": run / "checkpoints" / "base", "corrector": run / "checkpoints" / "corrector",
            "corrector_text_only": run / "checkpoints" / "corrector-text-only"}


def _cache(cfg: dict, embedder, writable: bool = True):
    from .cache import EmbeddingCache
    return EmbeddingCache.for_embedder(_paths(cfg)["cache"], embedder, writable=writable)


def load_split(cfg: dict, split: str, embedder=None):
    from .corpus import read_manifest
    p = _paths(cfg)["data"] / f"{split}.jsonl"
    if not p.exists():
        raise ConfigError(f"dataset split {p} not found; run build-dataset first")
    embedder = embedder or make_embedder(cfg)
    return read_manifest(p, _cache(cfg, embedder), embedder)


def load_models(cfg: dict, need_base: bool = True):
    from .inference import Models
    from .training import load_model
    p = _paths(cfg)
    for role in ("base", "corrector") if need_base else ("corrector",):
        if not (p[role] / "weights.pt").exists():
            raise ConfigError(f"no {role} checkpoint under {p[role]}; run train --role {role}")
    base = load_model(p["base"]) if (p["base"] / "weights.pt").exists() else None
    corrector = p["corrector"]
    if not cfg["decode"]["feedback"] and (p["corrector_text_only"] / "weights.pt").exists():
        # a corrector trained without phi(x_t) is the proper no-feedback ablation
        corrector = p["corrector_text_only"]
        logger.info("using text-only corrector from %s", corrector)
    return Models(base, load_model(corrector))


def beam_config(cfg: dict):
    from .inference import BeamConfig
    d = cfg["decode"]
    return BeamConfig(width=int(d["beam_width"]), max_rounds=int(d["steps"]),
                      feedback=bool(d["feedback"]), initializer=str(d["init"]), seed=cfg["seed"])


def _eval_slice(cfg: dict, embedder):
    data = load_split(cfg, cfg["eval"]["split"], embedder)
    if cfg["eval"]["limit"] is not None:
        data = data[: int(cfg["eval"]["limit"])]
    if not data:
        raise ConfigError("evaluation slice is empty")
    return data


# -- commands --------------------------------------------------------------------

def cmd_build_dataset(cfg: dict) -> dict:
    from .corpus import (build_inversion_dataset, documents_to_truncated, ingest_corpus,
                         split_train_eval, synthetic_corpus, write_corpus, write_manifest as wm)

    d = cfg["data"]
    tok_id = cfg["embedder"]["tokenizer_id"]
    p = _paths(cfg)
    p["data"].mkdir(parents=True, exist_ok=True)
    if d["corpus"]:
        src = Path(d["corpus"])
        if not src.exists():
            raise ConfigError(f"data.corpus: file {src} does not exist")
        result = ingest_corpus(src, tok_id, d["max_tokens"])
        truncated = result.documents
        extra = {"bad_lines": result.bad_lines, "dropped_empty": result.n_dropped_empty}
    else:
        syn = d["synthetic"]
        docs = synthetic_corpus(syn["n"], syn["vocab_size"], syn["max_len"], syn["min_len"],
                                branching=syn["branching"], seed=syn["seed"],
                                unique_bags=bool(syn["unique_bags"]))
        write_corpus(docs, p["data"] / "corpus.jsonl")
        truncated = documents_to_truncated(docs, tok_id, d["max_tokens"])
        extra = {}
    embedder = make_embedder(cfg)
    cache = _cache(cfg, embedder)
    dataset = build_inversion_dataset(truncated, embedder, cache=cache, workers=cfg["workers"])
    train, ev = split_train_eval(dataset, d["eval_fraction"], seed=cfg["seed"])
    wm(train, p["data"] / "train.jsonl", embedder.model_id)
    wm(ev, p["data"] / "eval.jsonl", embedder.model_id)
    logger.info("dataset: %d train / %d eval examples, %d embedder queries",
                len(train), len(ev), embedder.n_queries)
    return {"n_train": len(train), "n_eval": len(ev), "embedder_queries": embedder.n_queries,
            **extra}


def _vocab_for(cfg: dict, train) -> list[str]:
    from .corpus import synthetic_vocabulary
    from .tokens import Vocab
    seqs = [ex.tokens.tokens for ex in train]
    if not cfg["data"]["corpus"]:
        seqs.append(synthetic_vocabulary(cfg["data"]["synthetic"]["vocab_size"]))
    return Vocab.build(seqs).tokens


def cmd_train(cfg: dict) -> dict:
    from .corpus import generate_hypothesis_dataset
    from .models import InverterConfig
    from .training import Hyperparams, load_checkpoint, save_checkpoint, train_base, train_corrector

    t = cfg["train"]
    role = t["role"]
    if role not in ("base", "corrector"):
        raise ConfigError(f"train.role must be base or corrector, got {role!r}")
    embedder = make_embedder(cfg)
    train = load_split(cfg, "train", embedder)
    ev = load_split(cfg, "eval", embedder)
    hp = Hyperparams(lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"],
                     warmup_fraction=t["warmup_fraction"], weight_decay=t["weight_decay"],
                     grad_clip=t["grad_clip"], seed=cfg["seed"], max_steps=t["max_steps"])
    p = _paths(cfg)
    text_only = role == "corrector" and not cfg["model"]["feedback"]
    out = p["corrector_text_only" if text_only else role]
    state = None
    if t["resume"]:
        if not (out / "weights.pt").exists():
            raise ConfigError(f"train.resume: no checkpoint at {out}")
        state = load_checkpoint(out, len(train))
        state.hyperparams = hp
        logger.info("resuming %s from step %d", role, state.step)
    config = InverterConfig(vocab=_vocab_for(cfg, train), embed_dim=embedder.dim,
                            tokenizer_id=cfg["embedder"]["tokenizer_id"],
                            max_tokens=cfg["data"]["max_tokens"], role=role,
                            embedder=embedder.descriptor.to_dict(), **cfg["model"])
    if state is not None:
        config = state.config
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    extra: dict = {}
    if role == "base":
        state = train_base(train, config, hp, embedder.embed_empty(), eval_dataset=ev,
                           metrics_path=metrics, state=state)
    else:
        from .training import load_model
        if not (p["base"] / "weights.pt").exists():
            raise ConfigError(f"no base checkpoint under {p['base']}; run train --role base")
        base = load_model(p["base"])
        records = generate_hypothesis_dataset(base, train, embedder)
        eval_records = generate_hypothesis_dataset(base, ev, embedder)
        closeness = float(np.mean([r.cosine for r in records]))
        extra["mean_hypothesis_cosine"] = closeness
        logger.info("mean training hypothesis cosine %.4f", closeness)
        state = train_corrector(records, config, hp, eval_records=eval_records,
                                metrics_path=metrics, state=state)
    save_checkpoint(state, out)
    last = state.history[-1] if state.history else {}
    return {"role": role, "step": state.step, "final_loss": last.get("loss"),
            "eval_loss": last.get("eval_loss"), "checkpoint": str(out), **extra}


def _run_inversion(cfg: dict, write_traces_to: Path | None):
    from .inference import invert_sbeam_batch, write_traces
    from .metrics import evaluate_dataset

    embedder = make_embedder(cfg)
    data = _eval_slice(cfg, embedder)
    bc = beam_config(cfg)
    models = load_models(cfg, need_base=bc.initializer == "base")
    traces: list = []

    def run(emb, targets, conf):
        out = invert_sbeam_batch(models, emb, targets, conf)
        traces.extend(out)
        return out

    report = evaluate_dataset(run, data, bc, embedder, dataset_id=cfg["eval"]["split"],
                              tokenizer_id=cfg["embedder"]["tokenizer_id"],
                              set_f1=cfg["eval"]["set_f1"], keep_examples=True)
    if write_traces_to is not None and len(traces) == len(data):
        write_traces(traces, write_traces_to)
    queries = sum(t.total_queries for t in traces)
    return report, queries


def cmd_invert(cfg: dict) -> dict:
    out = _paths(cfg)["run"] / "invert"
    out.mkdir(parents=True, exist_ok=True)
    report, queries = _run_inversion(cfg, out / "traces.jsonl")
    report.to_json(out / "report.json")
    print(_table([report]))
    return {"report": report.to_dict(), "embedder_queries": queries}


def _table(reports) -> str:
    from .metrics import format_table
    return format_table(reports)


def cmd_evaluate(cfg: dict) -> dict:
    from .metrics import FULL_SCALE_REFERENCE
    out = _paths(cfg)["run"] / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    report, queries = _run_inversion(cfg, None)
    report.to_json(out / "report.json")
    table = _table([report])
    (out / "table.txt").write_text(
        table + "\n\nreference only (full-scale, not reproduced here):\n"
        + _table(FULL_SCALE_REFERENCE) + "\n")
    print(table)
    return {"report": report.to_dict(), "embedder_queries": queries}


def cmd_defend(cfg: dict) -> dict:
    from .defense import noise_sweep, self_retrieval_task

    lambdas = [float(x) for x in cfg["defense"]["lambdas"]]
    if not lambdas:
        raise ConfigError("defense.lambdas must not be empty")
    embedder = make_embedder(cfg)
    data = _eval_slice(cfg, embedder)
    bc = beam_config(cfg)
    models = load_models(cfg, need_base=bc.initializer == "base")
    docs = load_split(cfg, "train", embedder) + data
    task = self_retrieval_task(docs, cfg["defense"]["n_queries"], seed=cfg["seed"])
    out = _paths(cfg)["run"] / "defend"
    points = noise_sweep(embedder, lambdas, data, task, models, bc, seed=cfg["seed"],
                         out_dir=out)
    for pt in points:
        print(f"lambda={pt.lam:<8g} ndcg@10={pt.ndcg_at_10:.4f} bleu={pt.reconstruction.bleu:6.2f} "
              f"cos={pt.reconstruction.cos:.4f}")
    return {"points": [pt.row() for pt in points],
            "csv": str(out / "tradeoff.csv"), "plot": str(out / "tradeoff.png")}


def cmd_analyze(cfg: dict) -> dict:
    from collections import Counter

    from .corpus import generate_hypothesis_dataset
    from .inference import analyze_hypothesis_closeness
    from .metrics import ReconstructionReport, cosine_bleu_scatter, frequency_bucketed_accuracy

    what = cfg["analyze"]["what"]
    what = [what] if isinstance(what, str) else list(what)
    unknown = set(what) - {"closeness", "frequency", "scatter"}
    if unknown:
        raise ConfigError(f"analyze.what: unknown analyses {sorted(unknown)}")
    out = _paths(cfg)["run"] / "analyze"
    out.mkdir(parents=True, exist_ok=True)
    embedder = make_embedder(cfg)
    result: dict = {}
    if "closeness" in what:
        models = load_models(cfg, need_base=True)
        train = load_split(cfg, "train", embedder)
        records = generate_hypothesis_dataset(models.base, train, embedder)
        hist = analyze_hypothesis_closeness(records, out_dir=out)
        result["closeness"] = {k: hist[k] for k in ("mean", "n") if k in hist}
    report = None
    if {"frequency", "scatter"} & set(what):
        src = _paths(cfg)["run"] / "invert" / "report.json"
        if src.exists():
            report = ReconstructionReport(**json.loads(src.read_text()))
        else:
            report, _ = _run_inversion(cfg, None)
        if not report.examples:
            raise ConfigError(f"{src} has no per-example records; rerun invert")
    if "frequency" in what:
        train = load_split(cfg, "train", embedder)
        counts = Counter(t for ex in train for t in ex.tokens.tokens)
        fb = frequency_bucketed_accuracy([e["pred"] for e in report.examples],
                                         [e["truth"] for e in report.examples], counts,
                                         plot_path=out / "frequency.png")
        (out / "frequency.json").write_text(json.dumps(fb.to_dict(), indent=2))
        result["frequency"] = fb.to_dict()
    if "scatter" in what:
        cosine_bleu_scatter(report, out / "cosine_bleu.png")
        result["scatter"] = str(out / "cosine_bleu.png")
    return result


COMMANDS = {
    "build-dataset": cmd_build_dataset, "train": cmd_train, "invert": cmd_invert,
    "evaluate": cmd_evaluate, "defend": cmd_defend, "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--run-dir", dest="run_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="parallel embedder calls")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key, e.g. --set model.s=4")
    common.add_argument("-v", "--verbose", action="store_true")

    decode = argparse.ArgumentParser(add_help=False)
    decode.add_argument("--steps", type=int, help="correction rounds (0 = base model only)")
    decode.add_argument("--beam-width", dest="beam_width", type=int)
    decode.add_argument("--no-feedback", dest="feedback", action="store_const", const=False)
    decode.add_argument("--init", help="base | random | fixed:<text or preset>")
    decode.add_argument("--split", choices=["train", "eval"])
    decode.add_argument("--limit", type=int)

    parser = argparse.ArgumentParser(prog="embinv", description="Embedding inversion experiments: build datasets, train, invert, "
                                     "evaluate, sweep the noise defense and analyze runs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    b = sub.add_parser("build-dataset", parents=[common], help="embed a corpus into a dataset")
    b.add_argument("--corpus", help="JSONL corpus path (default: synthetic corpus)")
    t = sub.add_parser("train", parents=[common], help="train the base or corrector model")
    t.add_argument("--role", choices=["base", "corrector"])
    t.add_argument("--resume", action="store_const", const=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    sub.add_parser("invert", parents=[common, decode], help="invert the evaluation slice")
    sub.add_parser("evaluate", parents=[common, decode], help="reconstruction metrics table")
    d = sub.add_parser("defend", parents=[common, decode], help="noise defense sweep")
    d.add_argument("--lambdas", type=lambda s: [float(x) for x in s.split(",")],
                   help="comma-separated noise levels")
    a = sub.add_parser("analyze", parents=[common, decode], help="diagnostic analyses")
    a.add_argument("--what", type=lambda s: s.split(","),
                   help="comma-separated: closeness,frequency,scatter")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        for key in ("seed", "workers"):
            if not isinstance(cfg[key], int) or cfg[key] < (1 if key == "workers" else 0):
                raise ConfigError(f"{key} must be a {'positive' if key == 'workers' else 'non-negative'} integer")
        import torch
        torch.manual_seed(cfg["seed"])
        np.random.seed(cfg["seed"])
        name = f"train-{cfg['train']['role']}" if args.command == "train" else args.command
        manifest = write_manifest(cfg, name)
        result = COMMANDS[args.command](cfg)
        write_manifest(cfg, name, {"result": result, "status": "ok"})
        logger.info("manifest written to %s", manifest)
        return 0
    except ConfigError as exc:
        print(f"embinv: config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("embinv: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  (runtime failures map to exit code 1)
        logger.debug("command failed", exc_info=True)
        print(f"embinv: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
