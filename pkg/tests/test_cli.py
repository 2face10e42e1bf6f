import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from pillarflow.cli import main
from pillarflow.flownet import NetConfig, init_params, save_checkpoint
from pillarflow.io import read_flow, read_pcbin, write_pcbin

SMALL = """[run]
n_train = 4
n_val = 2
n_frames = 4
[train]
epochs = 1
[scene]
n_ground = 1500
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.ini").write_text(SMALL)
    assert main(["simulate", "--config", str(d / "small.ini"), "--out", str(d / "data"), "--seed", "3"]) == 0
    assert main(["simulate", "--config", str(d / "small.ini"), "--out", str(d / "seq"), "--seed", "3",
                 "--sequence"]) == 0
    save_checkpoint(d / "zero.pfw", init_params(NetConfig.desk(), 0), NetConfig.desk())
    return d


def run(work, *argv):
    return main([argv[0], "--config", str(work / "small.ini")] + list(argv[1:]))


def test_usage_errors_exit_1(work, tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["infer", "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.ini").write_text("[run]\nbogus = 1\n")
    assert main(["gradcheck", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == 1
    assert run(work, "baseline", "ogm", "--manifest", str(work / "data" / "manifest.csv"), "--out", str(tmp_path)) == 1
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_2(work, tmp_path):
    assert run(work, "infer", "--checkpoint", str(tmp_path / "missing.pfw"), "--prev", "a", "--curr", "b",
               "--out", str(tmp_path)) == 2
    flow = work / "data" / "samples" / "val_00000" / "gt.flow"
    (tmp_path / "cut.flow").write_bytes(flow.read_bytes()[:40])
    assert run(work, "eval-flow", "--pred", str(tmp_path / "cut.flow"), "--gt", str(flow), "--out", str(tmp_path)) == 2


def test_simulate_is_reproducible(work, tmp_path):
    assert main(["simulate", "--config", str(work / "small.ini"), "--out", str(tmp_path), "--seed", "3"]) == 0
    a = json.loads((work / "data" / "run_manifest.json").read_text())
    b = json.loads((tmp_path / "run_manifest.json").read_text())
    assert a["outputs"] == b["outputs"] and a["config_sha256"] == b["config_sha256"]
    assert a["seed"] == 3 and "numpy" in a["versions"]


def test_infer_zero_head_identical_sweeps(work, tmp_path):
    s = work / "data" / "samples" / "val_00000"
    curr = read_pcbin(s / "curr.pcbin")
    write_pcbin(tmp_path / "prev.pcbin", dataclasses.replace(curr, timestamp=curr.timestamp - 0.1))
    out = tmp_path / "inf"
    assert run(work, "infer", "--checkpoint", str(work / "zero.pfw"), "--prev", str(tmp_path / "prev.pcbin"),
               "--curr", str(s / "curr.pcbin"), "--image", "--out", str(out)) == 0
    f = read_flow(out / "flow.flow")
    assert f.valid.any() and not f.values.any()
    assert (out / "flow.ppm").read_bytes().startswith(b"P6")
    # same sweep twice has no elapsed time: a data error, not a crash
    assert run(work, "infer", "--checkpoint", str(work / "zero.pfw"), "--prev", str(s / "curr.pcbin"),
               "--curr", str(s / "curr.pcbin"), "--out", str(out)) == 2


def test_eval_flow_self_is_zero(work, tmp_path):
    flow = work / "data" / "samples" / "val_00001" / "gt.flow"
    assert run(work, "eval-flow", "--pred", str(flow), "--gt", str(flow), "--out", str(tmp_path)) == 0
    rows = dict(line.split(",") for line in (tmp_path / "flow_report.csv").read_text().splitlines()[1:])
    for k in ("rmse_dynamic", "rmse_static", "rmse_average", "aae"):
        assert rows[k] in ("", "0.0")


def test_train_infer_baselines(work, tmp_path):
    manifest = str(work / "data" / "manifest.csv")
    assert run(work, "train", "--manifest", manifest, "--out", str(tmp_path / "tr")) == 0
    lines = (tmp_path / "tr" / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,mean_loss,rmse_dynamic,rmse_static" and len(lines) == 2
    for m in ("icp", "dogma"):
        assert run(work, "baseline", m, "--manifest", manifest, "--out", str(tmp_path / m)) == 0
        assert len(list((tmp_path / m / f"{m}_flows").glob("*.flow"))) == 2
    assert json.loads((tmp_path / "icp" / "icp_metrics.json").read_text())["rmse_static"] is None
    ogm = NetConfig.desk(input_mode="ogm")
    save_checkpoint(tmp_path / "ogm.pfw", init_params(ogm, 0), ogm)
    assert run(work, "baseline", "ogm", "--manifest", manifest, "--checkpoint", str(tmp_path / "ogm.pfw"),
               "--out", str(tmp_path / "ogm")) == 0
    assert run(work, "baseline", "ogm", "--manifest", manifest, "--checkpoint", str(work / "zero.pfw"),
               "--out", str(tmp_path / "ogm2")) == 1


def test_track_and_eval_track(work, tmp_path):
    seq = str(work / "seq" / "sequence")
    assert run(work, "track", "--sequence", seq, "--out", str(tmp_path / "a")) == 0
    assert run(work, "track", "--sequence", seq, "--checkpoint", str(work / "zero.pfw"), "--out", str(tmp_path / "b")) == 0
    assert (tmp_path / "a" / "tracks.csv").read_text().startswith("t,track_id,x,y,vx,vy,ax,ay,assoc_cluster_id")
    assert run(work, "eval-track", "--tracks", str(tmp_path / "b" / "tracks.csv"), "--sequence", seq,
               "--out", str(tmp_path / "e")) == 0
    rep = (tmp_path / "e" / "track_report.csv").read_text().splitlines()
    assert rep[0] == "category,mean,p95,count" and len(rep) == 6


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--ops-only", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "correlation" in out and "bilinear_warp" in out
    assert main(["gradcheck", "--ops-only", "--tol", "1e-30", "--out", str(tmp_path)]) == 2
    man = json.loads((tmp_path / "run_manifest.json").read_text())
    assert man["command"] == "gradcheck" and "gradcheck.csv" in man["outputs"]
