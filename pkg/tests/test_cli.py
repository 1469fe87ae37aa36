import json

import pytest

from seqnas.cli import main
from seqnas.data import TaskSpec, save_manifests

TINY = """
name = "cli"
seed = 0
out_dir = "{out}"
protocols = ["only-ft", "mask-ft"]

[space]
depths = [1, 2]
widths = [64]
modules = ["CNN", "LSTM"]
h0 = 64
targets = {{ 1 = 2, 2 = 2 }}

[pretrain]
steps = 4
batch_size = 4

[finetune]
lr = 2e-3
epochs = 1
warmup_steps = 1
max_len = 16

[[tasks]]
task_id = 0
motif = "TATA"
n = 30
length = 12
seed = 1
description = "find the TATA box upstream of genes"

[[tasks]]
task_id = 1
motif = "GGCC"
n = 30
length = 12
seed = 2
description = "detect restriction site GGCC"
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY.format(out=root / "run"))
    assert main(["run", "--config", str(cfg)]) == 0
    return root


def test_space_command(capsys, tmp_path):
    assert main(["space", "--out", str(tmp_path / "s.json")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["paths"] == 360 and stats["by_depth"] == {"3": 60, "4": 100, "5": 100, "6": 100}
    assert len(json.loads((tmp_path / "s.json").read_text())) == 360


def test_tokenize_commands(capsys, tmp_path):
    corpus = tmp_path / "c.txt"
    corpus.write_text("ACACAC\nACGT\n")
    main(["tokenize", "train", "--kind", "bpe", "--vocab-size", "11", "--corpus", str(corpus),
          "--out", str(tmp_path / "t.json")])
    capsys.readouterr()
    main(["tokenize", "encode", "--tokenizer", str(tmp_path / "t.json"), "ACAC"])
    assert capsys.readouterr().out.split() == ["10"]  # AC=9, ACAC=10


def test_run_and_rank(run_dir, capsys):
    main(["rank", "--run-dir", str(run_dir / "run"), "--protocol", "mask-ft"])
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and lines[0].split()[0] == "1"


def test_eval_and_supernet_resume(run_dir, capsys):
    cfg = str(run_dir / "tiny.toml")
    assert main(["supernet", "pretrain", "--config", cfg, "--objective", "mm"]) == 0
    assert main(["eval", "--config", cfg, "--protocol", "only-ft"]) == 0
    assert "0 new records" in capsys.readouterr().out


def test_report_command(run_dir, capsys):
    main(["report", "--run-dir", str(run_dir / "run"), "--kind", "correlation"])
    assert capsys.readouterr().out.strip().endswith("correlation.csv")


def test_predict_commands(run_dir, capsys):
    rd = str(run_dir / "run")
    main(["predict", "train", "--run-dir", rd, "--train-tasks", "0", "--test-tasks", "1", "--epochs", "2"])
    main(["predict", "rank", "--run-dir", rd, "--task", "1", "--k", "2"])
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out[-2:]) == 2 and all(x.startswith("d") for x in out[-2:])
    main(["predict", "eval", "--run-dir", rd, "--train-tasks", "0", "--test-tasks", "1"])
    assert "spearman" in json.loads(capsys.readouterr().out)


@pytest.mark.parametrize("mode", ["agent", "rag"])
def test_agent_recommend(run_dir, capsys, mode):
    q = run_dir / "query.json"
    save_manifests([TaskSpec(9, "look for TATA boxes in promoters")], q)
    trace = run_dir / f"trace-{mode}.json"
    main(["agent", "recommend", "--run-dir", str(run_dir / "run"), "--task", str(q), "--mode", mode,
          "--m", "2", "--trace", str(trace)])
    names = capsys.readouterr().out.split()
    assert len(names) == 2
    assert json.loads(trace.read_text())


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
