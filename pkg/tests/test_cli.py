import numpy as np
import pytest

from panelnet import erpt
from panelnet.autodiff import checkpoint as ckpt
from panelnet.cli import main

DESK = """task=depth
scale=desk
height=128
width=256
interval=64
stride=16
batch=1
steps=1
eval_every=1
augment=none
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["render", "--out", str(root / "data"), "--count", "2", "--seed", "3",
                 "--height", "128", "--width", "256"]) == 0
    (root / "desk.cfg").write_text(DESK)
    assert main(["train", "--config", str(root / "desk.cfg"), "--data", str(root / "data"),
                 "--out", str(root / "run"), "--deterministic"]) == 0
    return root


def test_render_layout(workspace):
    scenes = sorted(p.name for p in (workspace / "data").iterdir())
    assert scenes == ["scene_00000", "scene_00001"]


def test_train_outputs(workspace, capsys):
    for name in ("metrics.csv", "loss.csv", "last.pnck", "best.pnck"):
        assert (workspace / "run" / name).exists()


def test_eval_inject_gt(workspace, capsys):
    code = main(["eval", "--checkpoint", str(workspace / "run" / "last.pnck"),
                 "--data", str(workspace / "data"), "--task", "depth", "--inject-gt"])
    out, err = capsys.readouterr()
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "step,mre,mae,rmse,rmse_log,d1,d2,d3,miou,macc,iou3d"
    assert lines[1].startswith("1,0.000000,0.000000,0.000000,0.000000,1.000000,1.000000,1.000000")
    assert "merge=confidence" in err


def test_eval_merge_modes(workspace, capsys):
    rows = {}
    for mode in ("confidence", "uniform"):
        assert main(["eval", "--checkpoint", str(workspace / "run" / "last.pnck"),
                     "--data", str(workspace / "data"), "--task", "depth", "--merge", mode]) == 0
        out, err = capsys.readouterr()
        assert f"merge={mode}" in err
        rows[mode] = out.splitlines()
    assert rows["confidence"][0] == rows["uniform"][0]
    assert rows["confidence"][1] != rows["uniform"][1]


def test_infer(workspace, tmp_path):
    out = tmp_path / "pred.erpt"
    code = main(["infer", "--checkpoint", str(workspace / "run" / "last.pnck"),
                 "--input", str(workspace / "data" / "scene_00000" / "rgb.erpt"), "--out", str(out)])
    assert code == 0
    pred = erpt.read(out)
    assert pred.shape == (1, 128, 256) and np.all(pred > 0)


def test_panelize(workspace, tmp_path):
    src = workspace / "data" / "scene_00000" / "sem.erpt"
    assert main(["panelize", "--input", str(src), "--interval", "64", "--stride", "16",
                 "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("panel_*.erpt"))) == 16
    assert np.array_equal(erpt.read(tmp_path / "reassembled.erpt"), erpt.read(src))
    assert erpt.read(tmp_path / "panel_001.erpt").shape == (1, 128, 64)


def test_gradcheck_module(capsys):
    assert main(["gradcheck", "--module", "attention", "--seeds", "2"]) == 0
    assert capsys.readouterr().out.count("ok") == 2
    assert main(["gradcheck", "--module", "losses", "--seeds", "1"]) == 0
    assert capsys.readouterr().out.count("ok") == 4


def test_exit_code_config(workspace, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text(DESK + "learning_rate=0.1\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["panelize", "--input", "x", "--interval", "64", "--stride", "5",
                 "--out", str(tmp_path)]) in (2, 3)
    assert main(["gradcheck", "--module", "nonexistent"]) == 2
    assert main(["render", "--out", str(tmp_path), "--count", "1", "--width", "100"]) == 2
    assert main(["frobnicate"]) == 2


def test_exit_code_data(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "desk.cfg"), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.pnck"),
                 "--data", str(workspace / "data"), "--task", "depth"]) == 3
    garbage = tmp_path / "g.pnck"
    garbage.write_bytes(b"not a checkpoint")
    assert main(["infer", "--checkpoint", str(garbage), "--input", "x", "--out", "y"]) == 3


def test_exit_code_numeric(workspace, tmp_path):
    entries = ckpt.load(workspace / "run" / "last.pnck")
    entries["decoder.head.bias"] = np.full_like(entries["decoder.head.bias"], np.nan)
    broken = tmp_path / "nan.pnck"
    ckpt.save(broken, entries)
    cfg = tmp_path / "two.cfg"
    cfg.write_text(DESK.replace("steps=1", "steps=2"))
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "o"), "--resume", str(broken)])
    assert code == 4
