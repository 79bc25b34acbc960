import json
import subprocess
import sys

import numpy as np
import pytest

from gsn.cli import main
from gsn.graph import RelationalGraph, SequenceNode, serialize_graphs
from gsn.training import load_checkpoint

SPEC = "kind = {kind}\nnum_nodes = 5\nmin_len = 3\nmax_len = 5\ntrain_size = 8\ndev_size = 5\n"
CONFIG = "dim = 4\nepochs = 2\nlr = 0.003\ntask = {task}\n"


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = {}
    for kind in ("bridge-span", "support-chain"):
        spec = write(root / f"{kind}.spec", SPEC.format(kind=kind))
        assert main(["gen", "--config", spec, "--out", str(root / kind)]) == 0
        out[kind] = root / kind
    return out


def test_gen_is_byte_identical(tmp_path):
    spec = write(tmp_path / "s.spec", SPEC.format(kind="bridge-span"))
    for d in ("a", "b"):
        assert main(["gen", "--config", spec, "--out", str(tmp_path / d)]) == 0
    for name in ("train.gsn", "dev.gsn", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 17
    assert main(["gen", "--config", spec, "--seed", "5", "--out", str(tmp_path / "c")]) == 0
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["seed"] == 5
    run = json.loads((tmp_path / "c" / "run_manifest.json").read_text())
    assert run["command"] == "gen" and run["config"]["seed"] == "5"


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["gen", "--config", str(tmp_path / "missing.spec"), "--out", str(tmp_path)]) == 2
    assert "cannot read" in capsys.readouterr().err
    assert main(["gen", "--config", write(tmp_path / "bad.spec", "hops = 0\n"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", write(tmp_path / "bad.cfg", "lam = 3\n"), "--data", str(tmp_path)]) == 2
    assert main(["bogus"]) == 2


def test_task_label_mismatch_fails_before_training(data, tmp_path):
    cfg = write(tmp_path / "c.cfg", CONFIG.format(task="span-only"))
    assert main(["train", "--config", cfg, "--data", str(data["support-chain"]),
                 "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o" / "checkpoint.gsnckpt").exists()


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write(root / "joint.cfg", CONFIG.format(task="joint"))
    assert main(["train", "--quiet", "--config", cfg, "--data", str(data["bridge-span"]),
                 "--out", str(root / "gsn")]) == 0
    return root, cfg


def test_train_outputs_and_eval_consistency(trained, data, capsys):
    root, _ = trained
    run = root / "gsn"
    history = [json.loads(line) for line in (run / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [1, 2]
    metrics = json.loads((run / "metrics.json").read_text())
    for key in ("ans_em", "ans_f1", "sup_em", "sup_f1", "joint_em", "joint_f1"):
        assert key in metrics
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "checkpoint.gsnckpt"), "--data", str(data["bridge-span"])]) == 0
    printed = capsys.readouterr().out
    assert printed == (run / "metrics.txt").read_text()
    assert (run / "eval_dev.json").read_text() == (run / "metrics.json").read_text()
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["command"] == "eval" and manifest["kernel_backend"] in ("cython", "python")


def test_baseline_flag_switches_pipeline(trained, data):
    root, cfg = trained
    assert main(["train", "--quiet", "--config", cfg, "--baseline", "gcn", "--data", str(data["bridge-span"]),
                 "--out", str(root / "gcn")]) == 0
    ck = load_checkpoint(root / "gcn" / "checkpoint.gsnckpt")
    gsn = load_checkpoint(root / "gsn" / "checkpoint.gsnckpt")
    assert ck.config == gsn.config.replace(baseline="gcn")
    assert any(k.startswith("gcn.") for k in ck.params) and not any(k.startswith("gsn.") for k in ck.params)


def test_eval_config_guard(trained, data, tmp_path):
    root, _ = trained
    cfg = write(tmp_path / "m.cfg", CONFIG.format(task="joint"))
    assert main(["eval", "--config", cfg, "--combiner", "mean", "--checkpoint",
                 str(root / "gsn" / "checkpoint.gsnckpt"), "--data", str(data["bridge-span"]),
                 "--out", str(tmp_path)]) == 2


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "coattn" in out and "max_rel_err=" in out and "FAIL" not in out


def edge_graph():
    nodes = (SequenceNode(0, tokens=(1, 2, 3)), SequenceNode(1, tokens=(4, 5, 6, 7)),
             SequenceNode(2, tokens=(8, 9)))
    rels = (frozenset({(0, 1)}), frozenset({(0, 1)}), frozenset({(1, 2)}))
    return RelationalGraph(nodes, rels, question=(1, 4), answer=(0, 0, 0))


def test_dump_attn(trained, tmp_path):
    root, _ = trained
    graph = write(tmp_path / "g.gsn", serialize_graphs([edge_graph()]))
    ck = str(root / "gsn" / "checkpoint.gsnckpt")
    base = ["dump-attn", "--checkpoint", ck, "--graph", graph, "--node", "0", "--neighbor", "1"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    rows = (tmp_path / "a" / "attn_g0_l0_r0_0_1.csv").read_text().strip().split("\n")
    assert rows[0] == ",1,2,3" and len(rows) == 1 + 4
    assert all(len(r.split(",")) == 4 for r in rows)
    sums = np.array([[float(x) for x in r.split(",")[1:]] for r in rows[1:]]).sum(axis=0)
    assert np.allclose(sums, 1.0, atol=5e-6)
    assert (tmp_path / "a" / "attn_g0_l0_r0_0_1.pgm").read_bytes().startswith(b"P5\n3 4\n255\n")

    assert main(base + ["--relation", "1", "--layer", "1", "--out", str(tmp_path / "b")]) == 0
    other = (tmp_path / "b" / "attn_g0_l1_r1_0_1.csv").read_text()
    assert other != (tmp_path / "a" / "attn_g0_l0_r0_0_1.csv").read_text()

    assert main(base + ["--relation", "2", "--out", str(tmp_path / "c")]) == 2
    bad = ["dump-attn", "--checkpoint", ck, "--graph", graph, "--node", "0", "--neighbor", "2",
           "--out", str(tmp_path / "d")]
    assert main(bad) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gsn.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
