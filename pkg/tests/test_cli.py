import json
import subprocess
import sys

import pytest

from tracemia.cli import main
from tracemia.dataset import load_dataset


def test_segment_and_validate(tmp_path, capsys):
    doc = tmp_path / "essay.txt"
    doc.write_text(" ".join(f"w{i}" for i in range(100)))
    out = tmp_path / "ds.jsonl"
    assert main(["dataset", "segment", str(doc), "-o", str(out), "--lengths", "32,64", "--label", "member"]) == 0
    ds = load_dataset(out)
    assert sorted(s.token_length for s in ds.sequences) == [32, 32, 32, 64]
    assert {s.document_id for s in ds.sequences} == {"essay"}
    capsys.readouterr()
    assert main(["dataset", "validate", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_sequences"] == 4


def test_segment_jsonl_documents(tmp_path):
    src = tmp_path / "docs.jsonl"
    src.write_text("\n".join(json.dumps({"document_id": f"d{i}", "text": "a b c d " * 10,
                                         "label": "member" if i else "non_member"}) for i in range(2)))
    out = tmp_path / "ds.jsonl"
    assert main(["dataset", "segment", str(src), "-o", str(out), "--lengths", "16"]) == 0
    labels = {s.document_id: s.label for s in load_dataset(out).sequences}
    assert labels == {"d0": "non_member", "d1": "member"}


def test_bad_input_exits_one(tmp_path, capsys):
    assert main(["dataset", "validate", str(tmp_path / "absent.jsonl")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_attack_flag(tmp_path, capsys):
    cfg = tmp_path / "demo"
    assert main(["simulate", "demo", str(cfg), "--n-member", "4", "--n-non-member", "4"]) == 0
    code = main(["run", "--config", str(cfg / "config.yaml"), "--attacks", "blackspectrum,bogus"])
    assert code == 1 and "bogus" in capsys.readouterr().err
    assert not (cfg / "out").exists()


def test_stagewise_cli_and_report(tmp_path, capsys):
    d = tmp_path / "demo"
    main(["simulate", "demo", str(d), "--n-member", "8", "--n-non-member", "8",
          "--attacks", "blackspectrum,thinking_token"])
    cfg = str(d / "config.yaml")
    assert main(["anchors", "build", "--config", cfg]) == 0
    assert (d / "out" / "axis.json").exists()
    assert main(["attack", "run", "--config", cfg]) == 0
    assert main(["eval", "--config", cfg, "--fpr-budget", "0.1"]) == 0
    capsys.readouterr()
    assert main(["report", "--config", cfg]) == 0
    text = capsys.readouterr().out
    assert "TPR@10%FPR" in text and "blackspectrum" in text and "thinking_token" in text
    assert main(["report", "--output-dir", str(tmp_path / "nothing")]) == 1


def test_console_script_demo_run(tmp_path):
    d = tmp_path / "demo"
    proc = subprocess.run([sys.executable, "-m", "tracemia.cli", "simulate", "demo", str(d), "--run",
                           "--n-member", "8", "--n-non-member", "8", "--attacks", "blackspectrum"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "Sequence-level results" in proc.stdout
    again = subprocess.run([sys.executable, "-m", "tracemia.cli", "run", "--config", str(d / "config.yaml"),
                            "--offline"], capture_output=True, text=True)
    assert again.returncode == 0, again.stderr
    assert "network calls: 0" in again.stdout


@pytest.mark.parametrize("argv", [[], ["attack"], ["run"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2
