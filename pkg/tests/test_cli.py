import json
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import yaml

from mote.cli import main
from mote.model import load_model
from mote.routing import format_expert_tuples, parse_expert_tuples

SVG = "{http://www.w3.org/2000/svg}"

TINY = {
    "train": {"model": {"n_layers": 2, "n_routed_experts": 8, "top_k": 2, "d_model": 32, "d_expert_hidden": 16},
              "steps": 600, "stop_accuracy": 1.0, "data": ["behavior"]},
}

REPORT_SCHEMA = {
    "version": int,
    "dataset_id": str,
    "config_hash": str,
    "seeds": dict,
    "tuning": dict,
    "distinctive": dict,
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "config.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(d / "model.npz")]) == 0
    assert main(["record", "--checkpoint", str(d / "model.npz"), "--out", str(d / "traces.jsonl")]) == 0
    return d


def test_missing_config_is_a_usage_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert "nope.yaml" in capsys.readouterr().err


def test_bad_flag_exits_with_usage_code():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1


def test_missing_checkpoint_is_a_data_error(tmp_path):
    assert main(["record", "--checkpoint", str(tmp_path / "x.npz"), "--out", str(tmp_path / "t.jsonl")]) == 2


def test_gen_data_writes_dataset_and_resolved_config(tmp_path):
    out = tmp_path / "b.jsonl"
    assert main(["gen-data", "--template", "behavior", "--out", str(out), "--heldout-fraction", "0.25"]) == 0
    n_train = len(out.read_text().splitlines())
    n_held = len((tmp_path / "b.heldout.jsonl").read_text().splitlines())
    assert n_train + n_held == 256
    resolved = yaml.safe_load((tmp_path / "b.config.yaml").read_text())
    assert resolved["heldout_fraction"] == 0.25 and resolved["template"] == "behavior"


def test_train_checkpoint_reloads_and_is_repeatable(run, tmp_path):
    model = load_model(run / "model.npz")
    assert model.config.top_k == 2 and model.config.n_layers == 2
    cfg = run / "config.yaml"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "again.npz")]) == 0
    assert (tmp_path / "again.loss.csv").read_text() == (run / "model.loss.csv").read_text()
    resolved = yaml.safe_load((run / "model.config.yaml").read_text())
    assert resolved["steps"] == 600 and resolved["seed"] == 0


def test_ftri_outputs(run, tmp_path):
    out = tmp_path / "ftri"
    assert main(["ftri", "--traces", str(run / "traces.jsonl"), "--n", "10", "--out-dir", str(out)]) == 0
    text = (out / "refused_experts.txt").read_text()
    addrs = parse_expert_tuples(text)
    assert len(addrs) == 10
    assert format_expert_tuples(addrs) == text
    root = ET.parse(out / "refused_ftri.svg").getroot()
    assert len(root.findall(f".//{SVG}rect")) == 2 * 8
    assert len(root.findall(f".//{SVG}circle")) == 10
    rows = (out / "refused_ftri.csv").read_text().splitlines()
    assert rows[0] == "layer_id,expert_id,value" and len(rows) == 1 + 16


def test_ftri_empty_class_is_a_data_error(run, tmp_path, capsys):
    assert main(["ftri", "--traces", str(run / "traces.jsonl"), "--target", "LANG_B", "--out-dir", str(tmp_path)]) == 2
    assert "LANG_B" in capsys.readouterr().err


def test_experiment_report_schema_and_determinism(run, tmp_path):
    args = ["experiment", "--checkpoint", str(run / "model.npz"), "--suppress", "[(0, 1), (1, 2)]",
            "--control-seeds", "0", "1"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    a = (tmp_path / "a.json").read_text()
    assert a == (tmp_path / "b.json").read_text()
    d = json.loads(a)
    for key, typ in REPORT_SCHEMA.items():
        assert isinstance(d[key], typ), key
    assert "random_control" in d and len(d["random_control"]["runs"]) == 2
    m = np.array(d["distinctive"]["matrix"]["counts"])
    assert m.sum() == 256
    assert d["tuning"]["suppressed"] == [[0, 1], [1, 2]]


def test_experiment_without_controls_has_no_control_section(run, tmp_path):
    out = tmp_path / "r.json"
    assert main(["experiment", "--checkpoint", str(run / "model.npz"), "--suppress", "[(0, 1)]",
                 "--control-seeds", "--out", str(out)]) == 0
    assert "random_control" not in json.loads(out.read_text())


def test_tuning_file_flag(run, tmp_path):
    tf = tmp_path / "experts.txt"
    tf.write_text("# list of (layer id, routed expert id)\n[(0, 3), (1, 5)]\n")
    out = tmp_path / "q.json"
    assert main(["quality", "--checkpoint", str(run / "model.npz"), "--tuning-file", str(tf), "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["tuning"]["suppressed"] == [[0, 3], [1, 5]]
    bad = tmp_path / "bad.txt"
    bad.write_text("[(0, x)]")
    assert main(["quality", "--checkpoint", str(run / "model.npz"), "--tuning-file", str(bad), "--out", str(out)]) == 2


def test_project_csv_and_svg(run, tmp_path):
    traces = (run / "traces.jsonl").read_text().splitlines()
    small = tmp_path / "three.jsonl"
    small.write_text("\n".join(traces[:4]) + "\n")  # header line plus three traces
    out = tmp_path / "p"
    args = ["project", "--traces", str(small), "--iterations", "300", "--seed", "3"]
    assert main(args + ["--out-dir", str(out)]) == 0
    csv1 = (out / "embedding.csv").read_text()
    assert len(csv1.splitlines()) == 4
    assert main(args + ["--out-dir", str(tmp_path / "p2")]) == 0
    assert (tmp_path / "p2" / "embedding.csv").read_text() == csv1
    classes = {line.split(",")[-1] for line in csv1.splitlines()[1:]}
    legend = ET.parse(out / "embedding.svg").getroot().find(f".//{SVG}g[@class='legend']")
    assert len(legend.findall(f"{SVG}text")) == len(classes)


def test_numeric_failure_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"train": {**TINY["train"], "learning_rate": 1e30, "steps": 30}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.npz")]) == 3
    assert not (tmp_path / "m.npz").exists()


def test_unknown_setting_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  stepz: 3\n")
    assert main(["train", "--config", str(cfg)]) == 1


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("train", "gen-data", "record", "ftri", "project", "experiment", "quality"):
        assert re.search(rf"\b{cmd}\b", text)
