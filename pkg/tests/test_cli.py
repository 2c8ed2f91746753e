import json
import subprocess
import sys
from pathlib import Path

import pytest

from pyror.cli import describe_report, main
from pyror.graph import graph_to_dict, import_json
from pyror.archspec import ArchConfig

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_describe_110_48(capsys):
    code, out, _ = run(capsys, "describe", "--depth", "110", "--alpha", "48", "--json", "-")
    doc = json.loads(out)
    assert code == 0
    assert doc["total_blocks"] == 54 and doc["final_width"] == 64
    assert abs(doc["total_params"] - 1.7e6) / 1.7e6 < 0.05
    assert doc["weighted_layers"] == 110


def test_describe_text_and_file(capsys, tmp_path):
    path = tmp_path / "r.json"
    code, out, _ = run(capsys, "describe", "--depth", "110", "--alpha", "270", "--json", str(path))
    assert code == 0 and "final width 286" in out
    assert json.loads(path.read_text())["final_width"] == 286


def test_describe_golden():
    golden = json.loads((DATA / "describe_d8_a3.json").read_text())
    assert describe_report(ArchConfig(8, 3)) == golden


@pytest.mark.parametrize("depth, alpha", [(8, 0), (14, 7), (110, 84)])
def test_describe_schema_stable(depth, alpha):
    golden = json.loads((DATA / "describe_d8_a3.json").read_text())
    doc = describe_report(ArchConfig(depth, alpha))
    assert doc.keys() == golden.keys()
    assert doc["config"].keys() == golden["config"].keys()
    assert doc["params_by_level"].keys() == golden["params_by_level"].keys()
    assert doc["groups"][0].keys() == golden["groups"][0].keys()


def test_bad_depth_is_validation_error(capsys):
    code, out, err = run(capsys, "describe", "--depth", "9", "--alpha", "3")
    assert code == 1 and "depth must be 6n+2" in err and out == ""


def test_bad_flag_type_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["describe", "--depth", "eight"])
    assert exc.value.code == 1


def test_missing_depth(capsys):
    code, _, err = run(capsys, "describe", "--alpha", "3")
    assert code == 1 and "depth" in err


def test_config_file_and_override(capsys, tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("depth = 14\nalpha = 12\nblock_variant = preact\n")
    _, out, _ = run(capsys, "describe", "--config", str(cfg), "--json", "-")
    assert json.loads(out)["config"]["block_variant"] == "preact"
    _, out, _ = run(capsys, "describe", "--config", str(cfg), "--alpha", "20",
                    "--block_variant", "pyramid-bn", "--json", "-")
    doc = json.loads(out)
    assert doc["final_width"] == 36 and doc["config"]["depth"] == 14
    assert doc["config"]["block_variant"] == "pyramid-bn"


def test_sample_sd_deterministic(capsys):
    argv = ("sample-sd", "--blocks", "54", "--p-terminal", "0.5", "--seed", "1", "--draws", "3")
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv)
    doc = json.loads(a)
    assert a == b
    assert len(doc["masks"]) == 3 and all(len(m) == 54 for m in doc["masks"])
    assert doc["survival_probs"][-1] == 0.5


def test_export_roundtrip(capsys, tmp_path):
    path = tmp_path / "g.json"
    assert run(capsys, "export", "--depth", "8", "--alpha", "0", "-o", str(path))[0] == 0
    from pyror.graph import build_graph
    g = import_json(path.read_text())
    assert graph_to_dict(g) == graph_to_dict(build_graph(ArchConfig(8, 0)))
    code, out, _ = run(capsys, "validate", "--graph", str(path))
    assert code == 0 and json.loads(out)["valid"]


def test_validate_broken_graph(capsys, tmp_path):
    path = tmp_path / "g.json"
    run(capsys, "export", "--depth", "8", "--alpha", "0", "-o", str(path))
    doc = json.loads(path.read_text())
    doc["nodes"] = [n for n in doc["nodes"] if n["kind"] != "project" or n["provenance"]["level"] != "root"]
    path.write_text(json.dumps(doc))
    code, out, _ = run(capsys, "validate", "--graph", str(path))
    assert code == 1 and not json.loads(out)["valid"]


def test_gradcheck_prints_pass(capsys):
    code, out, _ = run(capsys, "gradcheck", "--depth", "8", "--alpha", "3", "--variant", "pyramid-bn")
    assert code == 0 and "max rel err < 1e-4: PASS" in out


def test_gradcheck_with_mask(capsys):
    code, out, _ = run(capsys, "gradcheck", "--depth", "8", "--alpha", "3", "--variant", "preact",
                       "--sd-mask", "1,0,1")
    assert code == 0 and "PASS" in out
    code, _, err = run(capsys, "gradcheck", "--depth", "8", "--alpha", "3", "--sd-mask", "1,0")
    assert code == 1


def test_train_then_eval(capsys, tmp_path):
    ck = tmp_path / "ck"
    code, out, _ = run(capsys, "train", "--depth", "8", "--alpha", "3", "--synthetic", "2:8",
                       "--synthetic-size", "8", "--smoke", "--epochs", "2", "--batch-size", "8",
                       "--log", str(tmp_path / "log.ndjson"), "--checkpoint-dir", str(ck))
    assert code == 0
    doc = json.loads(out)
    assert doc["steps"] == 4 and doc["config"]["num_classes"] == 2
    assert len((tmp_path / "log.ndjson").read_text().splitlines()) == 2
    code, out, _ = run(capsys, "eval", "--checkpoint", doc["checkpoint"], "--synthetic", "2:8",
                       "--synthetic-size", "8")
    assert code == 0
    metrics = json.loads(out)
    assert 0 <= metrics["top1_error"] <= 1 and metrics["count"] == 16


def test_train_without_data(capsys):
    code, _, err = run(capsys, "train", "--depth", "8", "--alpha", "3")
    assert code == 1 and "dataset" in err


def test_eval_missing_checkpoint(capsys, tmp_path):
    code, _, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--synthetic", "2:4")
    assert code == 1


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "pyror.cli", "describe", "--depth", "8",
                          "--alpha", "3", "--json", "-"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout) == json.loads((DATA / "describe_d8_a3.json").read_text())
