import json

import pytest

from blockprune.cli import main

CONFIG = """
[data]
seed = 0
per_class = 40
[train]
seed = 0
epochs = 2
[prune]
r = 0.5
bo = 4
bi = 4
l = 2
finetune_epochs = 1
S = 2
P = 1
Q = 0
"""


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    lines = [line for line in out.splitlines() if line.strip()]
    assert len(lines) == 1, out  # exactly one JSON document
    return code, json.loads(lines[0])


@pytest.fixture
def workdir(tmp_path, capsys):
    (tmp_path / "run.ini").write_text(CONFIG)
    code, doc = run(capsys, "pretrain", "--config", str(tmp_path / "run.ini"),
                    "--out", str(tmp_path / "dense.bpck"))
    assert code == 0 and doc["epochs"] == 2
    return tmp_path


@pytest.mark.parametrize("method, zeros", [("smart", 885), ("awg", 885), ("magnitude", 885)])
def test_prune_methods(workdir, capsys, method, zeros):
    out = workdir / f"{method}.bpck"
    code, doc = run(capsys, "prune", "--method", method, "--config", str(workdir / "run.ini"),
                    "--init", str(workdir / "dense.bpck"), "--out", str(out))
    assert code == 0
    assert doc["zero_blocks"] == zeros and doc["block_sparsity"] == 0.5
    for key in ("accuracy", "loss", "block_sparsity", "element_sparsity", "mac_reduction"):
        assert key in doc
    assert out.exists()
    assert (workdir / f"{method}.bpck.diagnostics.csv").read_text().startswith("iter,tau,t,")
    saved = json.loads((workdir / f"{method}.bpck.metrics.json").read_text())
    assert saved["accuracy"] == doc["accuracy"]


def test_cli_resume_reproduces_uninterrupted_run(workdir, capsys):
    cfg, init = str(workdir / "run.ini"), str(workdir / "dense.bpck")
    _, full = run(capsys, "prune", "--method", "smart", "--config", cfg, "--init", init,
                  "--out", str(workdir / "full.bpck"))
    _, part = run(capsys, "prune", "--method", "smart", "--config", cfg, "--init", init,
                  "--out", str(workdir / "part.bpck"), "--stop-at", "5")
    assert part["finished"] is False
    _, done = run(capsys, "prune", "--method", "smart", "--config", cfg,
                  "--resume", str(workdir / "part.bpck"), "--out", str(workdir / "done.bpck"))
    assert done["loss"] == full["loss"] and done["accuracy"] == full["accuracy"]
    assert done["dense_accuracy"] == full["dense_accuracy"]


def test_repeated_commands_are_bit_identical(workdir, capsys):
    cfg = str(workdir / "run.ini")
    run(capsys, "pretrain", "--config", cfg, "--out", str(workdir / "again.bpck"))
    assert (workdir / "again.bpck").read_bytes() == (workdir / "dense.bpck").read_bytes()


def test_usage_and_config_errors(workdir, capsys, tmp_path):
    cfg = str(workdir / "run.ini")
    code, doc = run(capsys, "pretrain", "--config", str(tmp_path / "missing.ini"), "--out", "x")
    assert code == 2 and "missing.ini" in doc["error"]
    code, _ = run(capsys, "prune", "--method", "pdp", "--config", cfg, "--out", "x")
    assert code == 2
    code, doc = run(capsys, "prune", "--method", "smart", "--config", cfg,
                    "--init", str(tmp_path / "nope.bpck"), "--out", "x")
    assert code == 2 and "nope.bpck" in doc["error"]
    (tmp_path / "bad.ini").write_text(CONFIG + "bogus = 1\n")
    code, doc = run(capsys, "pretrain", "--config", str(tmp_path / "bad.ini"), "--out", "x")
    assert code == 2 and "bogus" in doc["error"]


def test_corrupt_checkpoint_is_runtime_error(workdir, capsys):
    raw = (workdir / "dense.bpck").read_bytes()
    (workdir / "corrupt.bpck").write_bytes(raw[:40] + b"\xff" + raw[41:])
    code, doc = run(capsys, "prune", "--method", "magnitude", "--config", str(workdir / "run.ini"),
                    "--init", str(workdir / "corrupt.bpck"), "--out", str(workdir / "o.bpck"))
    assert code == 3 and "checksum" in doc["error"]


def test_report_rows_and_medians(tmp_path, capsys):
    runs = tmp_path / "runs"
    runs.mkdir()
    accs = {}
    for method in ("smart", "awg", "magnitude"):
        for r in (0.3, 0.5, 0.7):
            for seed in (0, 1, 2):
                acc = 0.5 + 0.1 * seed + r / 10 + len(method) / 100
                accs.setdefault((method, r), []).append(acc)
                doc = {"method": method, "r": r, "seed": seed, "accuracy": acc, "loss": 1.0,
                       "block_sparsity": r, "element_sparsity": r, "mac_reduction": r / 2}
                (runs / f"{method}-{r}-{seed}.metrics.json").write_text(json.dumps(doc))
    (runs / "broken.json").write_text("{not json")
    code, doc = run(capsys, "report", "--runs", str(runs), "--out", str(tmp_path / "t.csv"))
    assert code == 0 and doc["rows"] == 27
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 28 and lines[0].startswith("method,r,seed,accuracy")
    assert lines[1].startswith("awg,0.3,0,")
    for (method, r), values in accs.items():
        assert doc["medians"][method][repr(r)]["accuracy"] == sorted(values)[1]


def test_report_empty_dir(tmp_path, capsys):
    code, doc = run(capsys, "report", "--runs", str(tmp_path), "--out", str(tmp_path / "t.csv"))
    assert code == 0 and doc["rows"] == 0
    assert (tmp_path / "t.csv").read_text().splitlines() == [
        "method,r,seed,accuracy,loss,block_sparsity,element_sparsity,mac_reduction,source"]
