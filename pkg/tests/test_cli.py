import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from halide import __version__
from halide.cli import main
from halide.dataset import load_dataset
from halide.pipeline import TrainedModel

FAST = {"K": 1, "seg": {"Q": 2, "max_ticc_iter": 5}, "em": {"O": 2, "m_steps": 20, "max_em_iter": 4,
                                                            "em_restarts": 1, "init_restarts": 1},
        "irl_steps": 30}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps({"N": 9, "T_min": 25, "T_max": 35, "seed": 3,
                                                "cohorts": ["S21", "F21", "S22"]}))
    (root / "cfg.json").write_text(json.dumps(FAST))
    assert main(["synth", "--spec", str(root / "spec.json"), "--out", str(root / "d.jsonl"),
                 "--truth", str(root / "truth.json")]) == 0
    return root


def _manifest(path):
    return json.loads((path.parent / (path.name + ".manifest.json")).read_text())


def test_synth_writes_data_truth_and_manifest(work):
    d = load_dataset(work / "d.jsonl")
    assert len(d) == 9 and d.state_dim == 6
    truth = json.loads((work / "truth.json").read_text())
    assert set(truth["regimes"]) == set(d.ids)
    man = _manifest(work / "d.jsonl")
    assert man["command"] == "synth" and man["seed"] == 3 and man["version"] == __version__
    assert len(man["inputs"]["spec"]["sha256"]) == 64


def test_full_chain(work):
    w = str(work)
    assert main(["rank", "--data", f"{w}/d.jsonl", "--out", f"{w}/rank.jsonl"]) == 0
    ranks = [json.loads(line) for line in open(work / "rank.jsonl")]
    assert len(ranks) == 9 and {"id", "nlg", "z", "weight", "qlg"} <= set(ranks[0])

    assert main(["segment", "--data", f"{w}/d.jsonl", "--config", f"{w}/cfg.json", "--out", f"{w}/seg.jsonl"]) == 0
    rows = [json.loads(line) for line in open(work / "seg.jsonl")]
    assert rows[0]["type"] == "segmentation" and len(rows[0]["models"]) == 2 and len(rows) == 10

    assert main(["train", "--data", f"{w}/d.jsonl", "--seg", f"{w}/seg.jsonl", "--weights",
                 f"{w}/rank.jsonl", "--config", f"{w}/cfg.json", "--out", f"{w}/trained.json"]) == 0
    trained = TrainedModel.load(work / "trained.json")
    assert len(trained.mixture.policies) == 2

    assert main(["fit", "--data", f"{w}/d.jsonl", "--config", f"{w}/cfg.json", "--seed", "7",
                 "--out", f"{w}/model.json"]) == 0
    model = TrainedModel.load(work / "model.json")
    assert model.config.seed == 7 and _manifest(work / "model.json")["config_hash"] == model.config.hash()

    assert main(["predict", "--model", f"{w}/model.json", "--data", f"{w}/d.jsonl", "--out", f"{w}/p.jsonl"]) == 0
    preds = [json.loads(line) for line in open(work / "p.jsonl")]
    d = load_dataset(work / "d.jsonl")
    assert len(preds) == sum(len(tr) for tr in d)
    assert all(abs(sum(p["probs"]) - 1) < 1e-9 for p in preds)

    # the same predictions evaluated as a two-method, two-fold grid
    for m in ("A", "B"):
        (work / "grid" / m).mkdir(parents=True)
        for f in (0, 1):
            (work / "grid" / m / f"fold{f}.jsonl").write_text((work / "p.jsonl").read_text())
    assert main(["eval", "--preds", f"{w}/grid", "--out", f"{w}/rep.csv", "--cd", f"{w}/cd.csv"]) == 0
    assert (work / "cd_jaccard.csv").exists()
    rows = list(csv.DictReader(open(work / "rep.csv")))
    assert len(rows) == 8 and rows[0]["method"] == "A"


def test_bench_small(work):
    w = str(work)
    out = work / "bench"
    assert main(["bench", "--data", f"{w}/d.jsonl", "--config", f"{w}/cfg.json", "--outdir", str(out),
                 "--methods", "HALIDE", "BC_E", "--threads", "2"]) == 0
    for m in ("HALIDE", "BC_E"):
        assert sorted(p.name for p in (out / "preds" / m).iterdir()) == ["fold0.jsonl", "fold1.jsonl"]
    assert (out / "report.csv").exists() and (out / "cd.csv").exists() and (out / "cd_jaccard.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["threads"] == 2


def test_usage_errors(work, capsys):
    assert main([]) == 1
    assert main(["nope"]) == 1
    assert main(["rank", "--out", str(work / "x")]) == 1
    assert main(["train", "--seg", "s", "--out", "o"]) == 1
    assert main(["fit", "--data", str(work / "d.jsonl"), "--out", "o", "--threads", "0"]) == 1
    capsys.readouterr()
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_data_errors_name_the_line(work, capsys):
    lines = (work / "d.jsonl").read_text().splitlines()
    lines[3] = lines[3][:40]
    bad = work / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["rank", "--data", str(bad), "--out", str(work / "r.jsonl")]) == 2
    err = capsys.readouterr().err
    assert "line 4" in err and json.loads(err.strip().splitlines()[-1])["event"] == "data_error"
    assert main(["fit", "--data", str(work / "missing.jsonl"), "--out", str(work / "m.json")]) == 2
    (work / "badcfg.json").write_text('{"K": 0}')
    assert main(["fit", "--data", str(work / "d.jsonl"), "--config", str(work / "badcfg.json"),
                 "--out", str(work / "m.json")]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "halide.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
