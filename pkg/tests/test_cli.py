import json

import numpy as np
import pytest

import scenario
from emoflow.cli import main, render_inspect
from emoflow.images import blank_png
from emoflow.knowledge import load_tree
from emoflow.labels import MIKELS
from test_orchestrator import check_golden


def snapshot(root):
    return {p: p.read_bytes() for p in root.rglob("*") if p.is_file()}


@pytest.fixture
def job_file(tmp_path):
    (tmp_path / "src.png").write_bytes(blank_png(color=(30, 60, 90)))

    def write(**fields):
        path = tmp_path / "job.json"
        path.write_text(json.dumps({"source_image": "src.png", "target_emotion": "awe", "seed": 1, **fields}))
        return path

    return write


def test_run_creates_one_directory_per_branch(tmp_path, job_file, capsys):
    out = tmp_path / "run"
    assert main(["--out", str(out), "run", str(job_file(k=5)), "--parallelism", "2"]) == 0
    assert sorted(p.name for p in (out / "branches").iterdir()) == ["1", "2", "3", "4", "5"]
    assert "job " in capsys.readouterr().out


def test_stop_then_resume(tmp_path, job_file):
    spec = str(job_file(k=2))
    assert main(["--out", str(tmp_path / "full"), "run", spec]) == 0
    assert main(["--out", str(tmp_path / "cut"), "run", spec, "--stop-after", "pre_creation"]) == 3
    assert main(["--out", str(tmp_path / "cut"), "run", "--resume"]) == 0
    assert (tmp_path / "cut" / "audit.log").read_bytes() == (tmp_path / "full" / "audit.log").read_bytes()


def test_inspect_golden_and_read_only(tmp_path, capsys):
    scenario.run(tmp_path / "w", tmp_path / "run")
    before = snapshot(tmp_path / "run")
    assert main(["inspect", str(tmp_path / "run")]) == 0
    text = capsys.readouterr().out
    assert text == render_inspect(tmp_path / "run")
    assert "object not added" in text and "escalation" in text
    check_golden("scenario_inspect.txt", text.encode())
    assert snapshot(tmp_path / "run") == before


def test_inspect_corrupt_directory_exits_nonzero(tmp_path, capsys):
    scenario.run(tmp_path / "w", tmp_path / "run")
    (tmp_path / "run" / "audit.log").write_text("")
    assert main(["inspect", str(tmp_path / "run")]) == 2
    assert "audit.log" in capsys.readouterr().err


def test_metrics_on_identical_outputs(tmp_path, job_file, capsys):
    spec = str(job_file(k=1))
    main(["--out", str(tmp_path / "a"), "run", spec])
    main(["--out", str(tmp_path / "b"), "run", spec])
    capsys.readouterr()
    report_path = tmp_path / "report.json"
    assert main(["--out", str(report_path), "metrics", str(tmp_path / "a"), str(tmp_path / "b")]) == 0
    report = json.loads(report_path.read_text())
    assert report["aggregate"]["sem_d"] == pytest.approx(0.0, abs=1e-12)
    assert report["aggregate"]["lpips"] == 0.0
    assert report["counts"]["samples"] == 2
    assert "Sem-D" in capsys.readouterr().out


def test_build_kb_then_run_with_it(tmp_path, job_file, capsys):
    rng = np.random.default_rng(0)
    items = []
    for e, emotion in enumerate(MIKELS[:2]):
        centre = rng.normal(size=8)
        for i in range(6):
            items.append({"id": f"{emotion}-{i}", "emotion": emotion, "embedding": (centre + 0.01 * rng.normal(size=8)).tolist(), "caption": f"{emotion} scene {i}"})
    (tmp_path / "items.json").write_text(json.dumps(items))
    kb = tmp_path / "kb"
    assert main(["--out", str(kb), "build-kb", str(tmp_path / "items.json")]) == 0
    tree = load_tree(kb)
    assert len(tree.nodes) == 2
    (tmp_path / "cfg.json").write_text(json.dumps({"knowledge_base": "kb"}))
    assert main(["--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "run"), "run", str(job_file(k=2))]) == 0
    planning = json.loads((tmp_path / "run" / "planning.json").read_text())
    assert any(n.startswith("awe-") for n in planning["pool"])


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])
    assert main(["--out", str(tmp_path / "r"), "run", str(tmp_path / "missing.json")]) == 2
    assert main(["inspect", str(tmp_path / "nowhere")]) == 2
