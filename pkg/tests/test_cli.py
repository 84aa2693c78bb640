import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from embinv.cli import main
from embinv.inference import base_generate
from embinv.metrics import exact_match
from embinv.training import load_model

TINY = {
    "data": {"synthetic": {"n": 160, "vocab_size": 24, "max_len": 4}, "max_tokens": 4},
    "model": {"d_enc": 16, "s": 2, "n_heads": 2, "enc_layers": 1, "dec_layers": 1, "ffn_dim": 32},
    "train": {"epochs": 2, "batch_size": 32},
    "decode": {"steps": 2},
    "defense": {"lambdas": [0, 0.1], "n_queries": 10},
}


def _cfg(tmp, **over):
    doc = json.loads(json.dumps(TINY))
    doc["run_dir"] = str(tmp / "run")
    for k, v in over.items():
        doc.setdefault(k, {}).update(v) if isinstance(v, dict) else doc.__setitem__(k, v)
    path = tmp / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _cfg(tmp)
    assert main(["build-dataset", "--config", cfg]) == 0
    assert main(["train", "--config", cfg, "--role", "base"]) == 0
    assert main(["train", "--config", cfg, "--role", "corrector"]) == 0
    return tmp, cfg


def _manifest(run, name):
    return json.loads((run / "manifests" / f"{name}.json").read_text())


def test_build_manifest_and_idempotent_rebuild(trained):
    tmp, cfg = trained
    run = tmp / "run"
    m = _manifest(run, "build-dataset")
    assert m["status"] == "ok" and m["config"]["data"]["max_tokens"] == 4 and m["version"]
    assert m["result"]["embedder_queries"] > 0
    assert main(["build-dataset", "--config", cfg]) == 0
    assert _manifest(run, "build-dataset")["result"]["embedder_queries"] == 0


def test_train_writes_metrics_and_resumes(trained):
    tmp, cfg = trained
    run = tmp / "run"
    rows = [json.loads(x) for x in (run / "checkpoints/base/metrics.jsonl").read_text().splitlines()]
    assert rows and "loss" in rows[-1]
    step = _manifest(run, "train-base")["result"]["step"]
    resumed = tmp / "resume"
    shutil.copytree(run, resumed)
    assert main(["train", "--config", cfg, "--run-dir", str(resumed), "--role", "base",
                 "--resume", "--epochs", "3"]) == 0
    assert _manifest(resumed, "train-base")["result"]["step"] > step
    assert "mean_hypothesis_cosine" in _manifest(run, "train-corrector")["result"]


def test_seeded_train_reproduces_step10_loss(trained, tmp_path):
    tmp, cfg = trained
    losses = []
    for name in ("a", "b"):
        d = tmp_path / name
        shutil.copytree(tmp / "run" / "data", d / "data")
        assert main(["train", "--config", cfg, "--run-dir", str(d), "--role", "base",
                     "--max-steps", "10"]) == 0
        rows = [json.loads(x) for x in (d / "checkpoints/base/metrics.jsonl").read_text().splitlines()]
        losses.append([r["loss"] for r in rows if r.get("step") == 10])
    assert losses[0] and losses[0] == losses[1]


def test_invert_zero_steps_equals_base_greedy(trained, capsys):
    tmp, cfg = trained
    run = tmp / "run"
    assert main(["invert", "--config", cfg, "--steps", "0"]) == 0
    assert "bleu" in capsys.readouterr().out
    rep = json.loads((run / "invert/report.json").read_text())
    assert rep["method"] == "base [0 steps]"
    base = load_model(run / "checkpoints/base")
    targets = [json.loads(x) for x in (run / "data/eval.jsonl").read_text().splitlines()]
    from embinv.cli import load_split, make_embedder, resolve_config, build_parser
    conf = resolve_config(build_parser().parse_args(["invert", "--config", cfg]))
    emb = make_embedder(conf)
    data = load_split(conf, "eval", emb)
    preds = [r[0].text for r in base_generate(base, np.stack([x.target_embedding for x in data]))]
    expected = 100 * np.mean([exact_match(p, x.text) for p, x in zip(preds, data)])
    assert rep["exact"] == pytest.approx(expected) and rep["n"] == len(targets)
    lines = (run / "invert/traces.jsonl").read_text().splitlines()
    assert len(lines) == len(data)  # one round-0 line per job


def test_beam_width_one_and_init_sweep(trained):
    tmp, cfg = trained
    run = tmp / "run"
    for init in ("base", "random", "fixed:the32"):
        assert main(["invert", "--config", cfg, "--init", init, "--beam-width", "1"]) == 0
        assert _manifest(run, "invert")["config"]["decode"]["init"] == init
    assert main(["invert", "--config", cfg, "--no-feedback", "--limit", "3"]) == 0
    assert _manifest(run, "invert")["result"]["report"]["n"] == 3


def test_text_only_corrector_serves_no_feedback(trained):
    tmp, cfg = trained
    run = tmp / "run"
    assert main(["train", "--config", cfg, "--role", "corrector", "--set", "model.feedback=false"]) == 0
    ckpt = run / "checkpoints/corrector-text-only"
    assert load_model(ckpt).config.feedback is False
    assert load_model(run / "checkpoints/corrector").config.feedback is True
    assert main(["invert", "--config", cfg, "--no-feedback", "--beam-width", "1"]) == 0
    rounds = [json.loads(x) for x in (run / "invert/traces.jsonl").read_text().splitlines()]
    assert all(r["queries"]["feedback"] == 0 for r in rounds)


def test_defend_honors_grid_and_matches_invert(trained):
    tmp, cfg = trained
    run = tmp / "run"
    assert main(["defend", "--config", cfg, "--lambdas", "0,0.01,1"]) == 0
    with open(run / "defend/tradeoff.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["lambda"]) for r in rows] == [0, 0.01, 1]
    assert (run / "defend/tradeoff.png").stat().st_size > 0
    assert float(rows[0]["ndcg"]) == 1.0
    assert main(["invert", "--config", cfg]) == 0
    rep = json.loads((run / "invert/report.json").read_text())
    assert float(rows[0]["bleu"]) == pytest.approx(rep["bleu"], abs=1e-9)
    assert float(rows[0]["cos"]) == pytest.approx(rep["cos"], abs=1e-9)


def test_evaluate_and_analyze(trained):
    tmp, cfg = trained
    run = tmp / "run"
    assert main(["evaluate", "--config", cfg]) == 0
    assert "reference only" in (run / "evaluate/table.txt").read_text()
    assert main(["analyze", "--config", cfg]) == 0
    for f in ("hypothesis_closeness.json", "frequency.png", "cosine_bleu.png"):
        assert (run / "analyze" / f).exists()


# -- exit codes -------------------------------------------------------------------------------

def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    assert main(["build-dataset", "--config", cfg, "--set", "data.bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_corpus_names_the_key(tmp_path, capsys):
    cfg = _cfg(tmp_path, data={"corpus": str(tmp_path / "nope.jsonl")})
    assert main(["build-dataset", "--config", cfg]) == 2
    assert "data.corpus" in capsys.readouterr().err


def test_flags_override_file(tmp_path):
    cfg = _cfg(tmp_path, seed=4)
    assert main(["build-dataset", "--config", cfg, "--seed", "9"]) == 0
    assert _manifest(tmp_path / "run", "build-dataset")["config"]["seed"] == 9


def test_bad_values_and_missing_checkpoints(tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["build-dataset", "--config", cfg, "--workers", "0"]) == 2
    assert main(["invert", "--config", cfg]) == 2  # nothing built or trained yet


def test_runtime_error_exit_code(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    assert main(["build-dataset", "--config", cfg]) == 0
    (tmp_path / "run/data/train.jsonl").write_text("{broken\n")
    assert main(["train", "--config", cfg, "--role", "base"]) == 1
    assert "error" in capsys.readouterr().err
