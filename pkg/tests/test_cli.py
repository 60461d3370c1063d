import json
import subprocess
import sys

import pytest

from volnav.cli import main

from conftest import SMALL

SETS = [x for kv in SMALL for x in ("--set", kv)]


def run(*args):
    return subprocess.run([sys.executable, "-m", "volnav.cli", *args], capture_output=True, text=True)


def test_unknown_flag_exits_2():
    r = run("gen-scene", "--bogus")
    assert r.returncode == 2 and "usage" in r.stderr


def test_unknown_config_key_exits_2(tmp_path):
    r = run("gen-scene", "--out", str(tmp_path / "s"), "--set", "nonsense=1")
    assert r.returncode == 2 and len(r.stderr.strip().splitlines()) == 1


def test_runtime_error_exits_1(tmp_path):
    r = run("annotate", "--scene", str(tmp_path / "missing"))
    assert r.returncode == 1 and len(r.stderr.strip().splitlines()) == 1


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-scene", "--seed", "1", "--out", str(d / "s"), "--episodes", str(d / "eps.jsonl"),
                 "--num-episodes", "2", *SETS]) == 0
    return d


def test_pipeline(workdir, capsys):
    d = workdir
    assert main(["annotate", "--scene", str(d / "s"), "--viewpoint", "all", "--jobs", "2", *SETS]) == 0
    assert (d / "s" / "annotations.vna").stat().st_size > 0
    assert main(["encode", "--scene", str(d / "s"), "--viewpoint", "r0c", "--out", str(d / "ver.vnpt"),
                 "--annotations", str(d / "s" / "annotations.vna"), "--pred-out", str(d / "pred.vna"), *SETS]) == 0
    out = capsys.readouterr().out
    assert "15x15x4 -> 30x30x8" in out and "loss.total" in out

    (d / "mem.txt").write_text("visited r0c\n")
    from volnav.scene import load_scene

    scene = load_scene(d / "s")
    pos = scene.graph.positions
    lines = ["current r0c " + " ".join(map(repr, map(float, pos["r0c"])))]
    lines += ["candidate %s %s" % (c, " ".join(map(repr, map(float, pos[c])))) for c in scene.graph.neighbors("r0c")]
    (d / "mem.txt").write_text("\n".join(lines) + "\n")
    assert main(["policy-step", "--ver", str(d / "ver.vnpt"), "--graph", str(d / "mem.txt"), *SETS]) == 0
    rows = [line.split() for line in capsys.readouterr().out.splitlines()]
    assert rows[0][0] == "r0c" and sum(float(p) for _, p in rows) == pytest.approx(1.0)

    assert main(["simulate", "--scene", str(d / "s"), "--episodes", str(d / "eps.jsonl"), "--out",
                 str(d / "t.txt"), *SETS]) == 0
    assert main(["evaluate", "--trajectories", str(d / "t.txt"), "--episodes", str(d / "eps.jsonl"), "--scene",
                 str(d / "s"), "--perception", f"{d / 'pred.vna'},{d / 's' / 'annotations.vna'}",
                 "--out", str(d / "report.txt"), *SETS]) == 0
    report = json.loads((d / "report.json").read_text())
    assert report["nav"]["episodes"] == 2 and 0 <= report["nav"]["SR"] <= 1
    assert "mIoU" in report["perception"]
    text = (d / "report.txt").read_text().splitlines()
    assert any(line.startswith("nav.SPL ") for line in text)


def test_simulate_is_byte_identical(workdir):
    d = workdir
    for name in ("a.txt", "b.txt"):
        assert main(["simulate", "--scene", str(d / "s"), "--episodes", str(d / "eps.jsonl"), "--mode", "sample",
                     "--out", str(d / name), *SETS]) == 0
    assert (d / "a.txt").read_bytes() == (d / "b.txt").read_bytes()


def test_trilinear_flag(workdir, capsys):
    d = workdir
    assert main(["encode", "--scene", str(d / "s"), "--viewpoint", "r0c", "--out", str(d / "v2.vnpt"),
                 "--set", "upsample=trilinear", *SETS]) == 0
    assert "15x15x4 -> 30x30x8" in capsys.readouterr().out
