"""Command line entry points and exit codes."""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import config
from conftest import icosphere
from geometry import RigidTransform, save_geometry
from main import main
from template import InteractionTemplate


@pytest.fixture(autouse=True)
def shipped_config(monkeypatch):
    monkeypatch.setattr(config, "_CONFIG", None)
    monkeypatch.delenv("NIFT_CONFIG", raising=False)


def test_gen_shapes_writes_meshes_and_demos(tmp_path, capsys):
    code = main(["--seed", "1", "gen-shapes", "--kind", "mug", "--count", "2", "--task", "grasp",
                 "--out", str(tmp_path)])

    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert len(result["files"]) == 2
    assert result["seed"] == 1
    assert (tmp_path / "gripper-proxy.obj").exists()
    demo = json.loads((tmp_path / "mug_000.demo.json").read_text())
    assert demo["source"] == "mug_000.obj"


def test_scf_command(tmp_path):
    save_geometry(icosphere(2), tmp_path / "sphere.obj")
    (tmp_path / "points.json").write_text(json.dumps([[0.0, 0.0, 0.0], [0.2, 0.1, 0.0]]))
    out = tmp_path / "scf.json"

    code = main(["--seed", "0", "--threads", "1", "scf", "--object", str(tmp_path / "sphere.obj"),
                 "--points", str(tmp_path / "points.json"), "--order", "2", "--dirs", "64", "--out", str(out)])

    assert code == 0
    result = json.loads(out.read_text())
    assert result["order"] == 2
    assert np.asarray(result["descriptors"]).shape == (2, 3)


def test_mismatched_field_is_a_runtime_error(tmp_path):
    save_geometry(icosphere(2), tmp_path / "target.obj")
    template = InteractionTemplate(
        query_points=np.array([[0.0, 0.0, 1.5], [0.1, 0.0, 1.5], [0.0, 0.1, 1.5], [0.1, 0.1, 1.5]]),
        descriptors=np.ones((4, 3)),
        anchor_pose_ref=RigidTransform.identity(),
        field_fingerprint="analytic:scf:n2:d64:fibonacci",
    )
    template.save(tmp_path / "template.json")

    code = main(["--seed", "0", "imitate", "--template", str(tmp_path / "template.json"),
                 "--target", str(tmp_path / "target.obj"), "--field", "analytic"])

    assert code == 1


def test_missing_input_is_a_runtime_error(tmp_path):
    (tmp_path / "points.json").write_text("[[0, 0, 0]]")

    code = main(["--seed", "0", "scf", "--object", str(tmp_path / "absent.obj"),
                 "--points", str(tmp_path / "points.json")])

    assert code == 1



def test_scf_query_outside_the_object_domain_is_a_runtime_error(tmp_path):
    save_geometry(icosphere(2), tmp_path / "sphere.obj")
    (tmp_path / "points.json").write_text(json.dumps([[0.0, 0.0, 0.0], [9.0, 0.0, 0.0]]))

    code = main(["--seed", "0", "scf", "--object", str(tmp_path / "sphere.obj"),
                 "--points", str(tmp_path / "points.json"), "--order", "2", "--dirs", "64"])

    assert code == 1


def _bench(tmp_path, seed: int, name: str) -> str:
    suite = {"name": "s", "seed": 0, "dump_failures": False, "harness": {"penetration_samples": 64},
             "entries": [{"category": "mug", "task": "grasp", "regimes": ["upright"], "methods": ["self"],
                          "trials": 2, "demos": 1, "scf_orders": [2]}]}
    suite_path = tmp_path / "suite.json"
    suite_path.write_text(json.dumps(suite))
    out_dir = tmp_path / name

    code = main(["--seed", str(seed), "--out-dir", str(out_dir), "bench", "--suite", str(suite_path)])

    assert code == 0
    assert json.loads((out_dir / "report.json").read_text())["seed"] == seed
    return (out_dir / "report.csv").read_text()


def test_bench_seed_flag_overrides_the_suite_seed(tmp_path):
    first = _bench(tmp_path, 1, "a")
    again = _bench(tmp_path, 1, "b")
    other = _bench(tmp_path, 2, "c")

    assert first == again
    assert first != other

@pytest.mark.parametrize("argv", [[], ["imitate"], ["--seed", "x", "gen-shapes", "--kind", "mug"],
                                  ["gen-shapes", "--kind", "teapot"]])
def test_usage_errors(argv):
    assert main(argv) == 2
