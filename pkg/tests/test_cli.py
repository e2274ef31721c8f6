import csv
import io
import json

import numpy as np
import pytest

from mvcvox import fileio
from mvcvox.cli import OPTIONS, build_parser, main, resolve
from mvcvox.model import load_checkpoint

from conftest import sphere_grid

TINY = ["--scenes", "5", "--test-scenes", "2", "--views", "2", "--res", "16", "--img", "32", "--seed", "4"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(root), *TINY]) == 0
    return root


# -- gen ----------------------------------------------------------------------

def test_gen_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--scenes", "10", "--views", "6", "--res", "32", "--img", "64",
                       "--seed", "7", "--out", str(tmp_path))
    assert code == 0
    assert len(list((tmp_path / "scenes").iterdir())) == 10
    assert len(list(tmp_path.rglob("*.pgm"))) == 60 and len(list(tmp_path.rglob("*.vxg"))) == 60
    assert "images 60" in out and "grids 60" in out
    nbytes = sum(p.stat().st_size for p in tmp_path.rglob("*") if p.is_file())
    assert f"bytes {nbytes}" in out


def test_gen_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen", "--out", str(tmp_path / name), "--depth", *TINY)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


def test_gen_zero_views_is_a_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--out", str(tmp_path), "--views", "0")
    assert code == 2 and "--views" in err


def test_unknown_flag_is_rejected(capsys):
    assert run(capsys, "gen", "--out", "x", "--colour", "red")[0] == 2


# -- train --------------------------------------------------------------------

def test_train_3d_vs_mvc(tiny_data, tmp_path, capsys):
    lmvc = {}
    for loss in ("3d", "mvc"):
        ck = tmp_path / f"{loss}.prm"
        code, out, _ = run(capsys, "train", "--data", str(tiny_data), "--out", str(ck), "--loss", loss,
                           "--views", "2", "--epochs", "2", "--lr", "1e-3", "--val-points", "100")
        assert code == 0 and ck.exists()
        hist = read_csv(f"{ck}.csv")
        assert [r["epoch"] for r in hist] == ["0", "1", "2"]
        lmvc[loss] = [float(r["lmvc"]) for r in hist]
    assert all(v == 0.0 for v in lmvc["3d"])
    assert all(v > 0.0 for v in lmvc["mvc"])


def test_train_history_is_deterministic(tiny_data, tmp_path, capsys):
    args = ["train", "--data", str(tiny_data), "--views", "2", "--epochs", "2", "--lr", "1e-3",
            "--val-points", "100", "--seed", "5"]
    for name in ("a", "b"):
        assert run(capsys, *args, "--out", str(tmp_path / f"{name}.prm"))[0] == 0
    assert (tmp_path / "a.prm.csv").read_bytes() == (tmp_path / "b.prm.csv").read_bytes()
    assert (tmp_path / "a.prm").read_bytes() == (tmp_path / "b.prm").read_bytes()


def test_train_zero_epochs_saves_initial_params(tiny_data, tmp_path, capsys):
    from mvcvox.model import init_params

    ck = tmp_path / "m.prm"
    assert run(capsys, "train", "--data", str(tiny_data), "--out", str(ck), "--epochs", "0", "--seed", "3")[0] == 0
    p = load_checkpoint(ck)
    assert np.array_equal(p.values, init_params(p.arch, 3).values)


def test_train_view_count_not_dividing_the_rig_rerenders(tiny_data, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", str(tiny_data), "--out", str(tmp_path / "m.prm"),
                     "--views", "3", "--epochs", "1", "--val-points", "50")
    assert code == 0


def test_train_missing_dataset_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m.prm"))
    assert code == 3 and "manifest.json" in err


def test_train_bad_loss_name(tiny_data, tmp_path, capsys):
    assert run(capsys, "train", "--data", str(tiny_data), "--out", str(tmp_path / "m"), "--loss", "2d")[0] == 2


def test_default_lambda_is_two_tenths():
    args = build_parser().parse_args(["train"])
    assert resolve("train", args)["lambda"] == 0.2


# -- eval ---------------------------------------------------------------------

def test_eval_self_is_perfect(tiny_data, tmp_path, capsys):
    table = tmp_path / "m.csv"
    maps = tmp_path / "maps"
    code, out, _ = run(capsys, "eval", "--data", str(tiny_data), "--self", "--csv", str(table),
                       "--error-maps", str(maps), "--points", "500")
    assert code == 0
    rows = read_csv(table)
    assert len(rows) == 2 + 1 and rows[-1]["sample"] == "mean"
    assert all(float(r["iou"]) == 1.0 and float(r["cd"]) == 0.0 for r in rows)
    assert out == table.read_text()
    plys = sorted(maps.iterdir())
    assert len(plys) == 2
    mesh, q = fileio.read_ply(plys[0])
    assert len(q) == len(mesh.vertices) and q.max() < 0.2


def test_eval_checkpoint(tiny_data, tmp_path, capsys):
    ck = tmp_path / "m.prm"
    assert run(capsys, "train", "--data", str(tiny_data), "--out", str(ck), "--epochs", "1",
               "--val-points", "50")[0] == 0
    code, out, _ = run(capsys, "eval", "--data", str(tiny_data), "--checkpoint", str(ck), "--split", "train",
                       "--points", "200")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 3 + 1
    assert all(0.0 <= float(r["iou"]) <= 1.0 for r in rows)


def test_eval_missing_checkpoint(tiny_data, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--data", str(tiny_data), "--checkpoint", str(tmp_path / "no.prm"))
    assert code == 3 and "no.prm" in err


def test_eval_needs_one_source(tiny_data, capsys):
    assert run(capsys, "eval", "--data", str(tiny_data))[0] == 2


# -- mesh ---------------------------------------------------------------------

def test_mesh_from_grid(tmp_path, capsys):
    fileio.write_vxg(tmp_path / "s.vxg", sphere_grid(16, 0.6))
    counts = []
    for ext in ("obj", "ply"):
        code, out, _ = run(capsys, "mesh", "--grid", str(tmp_path / "s.vxg"), "--out", str(tmp_path / f"s.{ext}"))
        assert code == 0
        counts.append(out)
    assert counts[0] == counts[1]
    obj = fileio.read_obj(tmp_path / "s.obj")
    ply, _ = fileio.read_ply(tmp_path / "s.ply")
    assert obj.is_closed() and len(obj.vertices) == len(ply.vertices)


def test_mesh_iso_out_of_range(tmp_path, capsys):
    code, _, err = run(capsys, "mesh", "--grid", "g.vxg", "--iso", "1.5", "--out", str(tmp_path / "m.obj"))
    assert code == 2 and "iso" in err


def test_mesh_missing_grid(tmp_path, capsys):
    assert run(capsys, "mesh", "--grid", str(tmp_path / "none.vxg"), "--out", str(tmp_path / "m.obj"))[0] == 3


def test_mesh_from_checkpoint_and_image(tiny_data, tmp_path, capsys):
    ck = tmp_path / "m.prm"
    assert run(capsys, "train", "--data", str(tiny_data), "--out", str(ck), "--epochs", "0")[0] == 0
    img = tiny_data / "scenes" / "00000" / "view0.pgm"
    code, out, _ = run(capsys, "mesh", "--checkpoint", str(ck), "--image", str(img), "--out", str(tmp_path / "m.ply"))
    assert code == 0 and out.startswith("vertices")


# -- options ------------------------------------------------------------------

@pytest.mark.parametrize("command", sorted(OPTIONS))
def test_help_lists_every_flag_with_default(command, capsys):
    assert main([command, "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())
    for flag, _, _, _ in OPTIONS[command]:
        assert flag in text
    assert text.count("(default:") + text.count("(required)") >= len(OPTIONS[command])


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 7, "lr": 0.01, "views": 4}))
    args = build_parser().parse_args(["train", "--config", str(cfg), "--views", "6"])
    o = resolve("train", args)
    assert (o["epochs"], o["lr"], o["views"], o["batch"]) == (7, 0.01, 6, 4)


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epoch": 7}))
    code, _, err = run(capsys, "train", "--config", str(cfg), "--data", "d", "--out", "o")
    assert code == 2 and "epoch" in err


def test_config_list_and_switch_values(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"parts": [2, 4], "depth": True}))
    o = resolve("gen", build_parser().parse_args(["gen", "--config", str(cfg)]))
    assert o["parts"] == (2, 4) and o["depth"] is True


# -- ablate -------------------------------------------------------------------

def test_small_ablation_report(tiny_data, tmp_path, capsys):
    report = tmp_path / "r.csv"
    code, out, _ = run(capsys, "ablate", "--data", str(tiny_data), "--views", "1,2", "--seeds", "2", "--workers", "2",
                       "--epochs", "1", "--out", str(report))
    assert code == 0
    rows = read_csv(report)
    cond = [r for r in rows if r["row"] == "condition"]
    seeds = [r for r in rows if r["row"] == "seed"]
    assert [(r["views"], r["loss"]) for r in cond] == [("1", "3d"), ("1", "mvc"), ("2", "3d"), ("2", "mvc")]
    assert len(seeds) == 8 and all(r["seed"] == "median" for r in cond)
    assert "margin" in out
