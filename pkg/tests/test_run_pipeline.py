import subprocess
import sys

from rchc import run_pipeline
from rchc.run_pipeline import build_stages, run_stages


def test_stage_order(tmp_path):
    stages = build_stages("run.env", tmp_path, 2019)
    assert [name for name, _ in stages] == [
        "gen-data", "train-source", "eval-source", "adapt-shot", "adapt-rchc", "threshold-stats", "export-embeddings",
    ]
    adapt_shot = dict(stages)["adapt-shot"]
    assert adapt_shot[adapt_shot.index("--mode") + 1] == "shot"
    assert str(tmp_path / "rchc" / "seed_2019" / "target_final.npz") in dict(stages)["threshold-stats"]


def test_stops_at_first_failure(monkeypatch, capsys):
    calls = []

    def fake_run(command, **kwargs):
        calls.append(command)
        code = 3 if command[3] == "train-source" else 0
        return subprocess.CompletedProcess(command, code, stdout="", stderr="")

    monkeypatch.setattr(run_pipeline.subprocess, "run", fake_run)
    stages = [("gen-data", ["gen-data"]), ("train-source", ["train-source"]), ("adapt", ["adapt"])]
    assert run_stages(stages) == 3
    assert [c[3] for c in calls] == ["gen-data", "train-source"]
    assert calls[0][:3] == [sys.executable, "-m", "rchc.cli"]
    assert "Stopping execution" in capsys.readouterr().err


def test_all_stages_succeed(monkeypatch):
    monkeypatch.setattr(
        run_pipeline.subprocess, "run",
        lambda command, **kwargs: subprocess.CompletedProcess(command, 0, stdout="ok", stderr=""),
    )
    assert run_stages([("a", ["a"]), ("b", ["b"])]) == 0
