import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from vinseg import io as vio
from vinseg.cli import main
from vinseg.head import head_init

SMALL_CONFIG = {
    "dataset": {"n_train": 2, "n_val": 1},
    "scene": {"ground_points": 3000, "wall_points": 800, "vegetation_points": 150},
    "train": {"epochs": 2, "steps_per_epoch": 10, "batch_size": 256, "hidden": [16, 16]},
}


def digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def run_pipeline(root: Path, threads: int, seed: int = 3) -> dict:
    """synth -> train -> infer -> ics -> panoptic -> eval; returns output digests."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    common = ["--config", str(cfg), "--seed", str(seed), "--threads", str(threads)]
    d = root / "data"
    steps = [
        ["synth", "--out", str(d)],
        ["train", "--scenes", str(d / "train"), "--val", str(d / "val"), "--out", str(root / "params.json"),
         "--history", str(root / "history.csv")],
        ["infer", "--params", str(root / "params.json"), "--cloud", str(d / "val"), "--out", str(root / "pred")],
        ["ics", "--boxes", str(d / "val/scene_0000.dets.json"), "--cloud", str(d / "val/scene_0000.cloud"),
         "--labels", str(root / "pred/scene_0000.pred.labels"), "--out-boxes", str(root / "ics_boxes.json"),
         "--out-labels", str(root / "ics.labels"), "--log", str(root / "ics.log")],
        ["panoptic", "--boxes", str(root / "ics_boxes.json"), "--cloud", str(d / "val/scene_0000.cloud"),
         "--labels", str(root / "ics.labels"), "--out", str(root / "pan.labels")],
        ["eval", "--pred", str(root / "pred"), "--gt", str(d / "val"), "--out", str(root / "report.json"),
         "--rows", str(root / "rows.csv")],
        ["plotdata", "--report", str(root / "report.json"), "--out", str(root / "plot.csv")],
    ]
    for step in steps:
        before = {k: v for k, v in digest(root).items() if k != "cfg.json"}
        assert main([step[0], *common, *step[1:]]) == 0, step[0]
        after = digest(root)
        # existing files are never rewritten by a later step
        assert all(after[k] == v for k, v in before.items()), step[0]
    return digest(root)


def test_pipeline_end_to_end(tmp_path):
    out = run_pipeline(tmp_path / "a", threads=1)
    assert "report.json" in out and "pred/scene_0000.pred.labels" in out
    rep = vio.read_report(tmp_path / "a/report.json")
    assert 0 <= rep["aggregate"]["miou"] <= 1
    assert (tmp_path / "a/plot.csv").read_text() == (tmp_path / "a/rows.csv").read_text()


def test_threads_and_reruns_bit_identical(tmp_path):
    a = run_pipeline(tmp_path / "a", threads=1)
    b = run_pipeline(tmp_path / "b", threads=3)
    c = run_pipeline(tmp_path / "c", threads=1)
    assert a == b == c


def test_ics_zero_noise_log_empty(tmp_path):
    cfg = dict(SMALL_CONFIG, detections={"center_sigma": 0, "size_sigma": 0, "yaw_sigma": 0, "p_flip": 0})
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "d"), "--count", "1"]) == 0
    s = tmp_path / "d/train/scene_0000"
    rc = main(["ics", "--boxes", f"{s}.dets.json", "--cloud", f"{s}.cloud", "--labels", f"{s}.labels",
               "--out-boxes", str(tmp_path / "b.json"), "--out-labels", str(tmp_path / "l.labels"),
               "--log", str(tmp_path / "log.txt")])
    assert rc == 0
    assert (tmp_path / "log.txt").read_text() == ""
    assert (tmp_path / "l.labels").read_bytes() == Path(f"{s}.labels").read_bytes()


def test_eval_self_is_perfect(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "1"]) == 0
    lab = tmp_path / "d/train/scene_0000.labels"
    assert main(["eval", "--pred", str(lab), "--gt", str(lab), "--out", str(tmp_path / "r.json")]) == 0
    agg = vio.read_report(tmp_path / "r.json")["aggregate"]
    assert agg["miou"] == 1.0 and agg["pq"] == 1.0


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--cases", "2"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--bogus"])
    assert e.value.code == 2
    assert main(["plotdata", "--report", str(tmp_path / "missing.json")]) == 3
    (tmp_path / "bad.json").write_text('{"train": {"epochs": 0}}')
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == 4
    (tmp_path / "bad.cloud").write_bytes(b"XXXX\0\0\0\0")
    (tmp_path / "p.json").write_text(json.dumps(vio.params_to_doc(head_init(0, 10, 6, (4,)))))
    assert main(["infer", "--params", str(tmp_path / "p.json"), "--cloud", str(tmp_path / "bad.cloud"),
                 "--out", str(tmp_path / "o.labels")]) == 5
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("vinseg ") for line in err[-3:])


def test_env_threads(tmp_path, monkeypatch):
    monkeypatch.setenv("VIN_THREADS", "nope")
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "1"]) == 2


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vinseg.cli", "plotdata", "--report", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert r.returncode == 3 and r.stderr.count("\n") == 1
