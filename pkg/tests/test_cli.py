import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from avatarlight.checkpoint import load_checkpoint
from avatarlight.cli import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, build_parser, main, resolve_options
from avatarlight.imageio import read_pfm, write_pfm
from avatarlight.pbr import load_probes, save_probes
from avatarlight.train import TrainConfig, new_stage1_maps

RES = 24


def _sha_images(root):
    import hashlib
    h = hashlib.sha256()
    for p in sorted((root / "images").glob("*.pfm")):
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--preset", "capsule-specular", "--seed", "4", "--resolution", str(RES),
                 "--out", str(root / "ds")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(data):
    root = data
    assert main(["train-geo", "--dataset", str(root / "ds"), "--steps", "2", "--out", str(root / "s1")]) == EXIT_OK
    assert main(["train-mat", "--dataset", str(root / "ds"), "--stage1", str(root / "s1" / "stage1.ckpt"),
                 "--steps", "2", "--out", str(root / "s2")]) == EXIT_OK
    return root


# --- gen -----------------------------------------------------------------------------

def test_gen_layout_and_determinism(data, tmp_path):
    m = json.loads((data / "ds" / "manifest.json").read_text())
    assert len(m["frames"]) == 24
    assert main(["gen", "--preset", "capsule-specular", "--seed", "4", "--resolution", str(RES),
                 "--out", str(tmp_path / "again")]) == EXIT_OK
    assert _sha_images(tmp_path / "again") == _sha_images(data / "ds")


def test_gen_unknown_preset_is_usage_error(tmp_path, capsys):
    assert main(["gen", "--preset", "capsule-velvet", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["gen", "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_unknown_command():
    assert main(["paint"]) == EXIT_USAGE


# --- option resolution ----------------------------------------------------------------

def test_env_and_config_precedence(tmp_path, monkeypatch):
    parser = build_parser()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 7, "steps": 11, "lr_hash": 0.02}))
    a = resolve_options(parser, ["train-geo", "--config", str(cfg)])
    assert (a.seed, a.steps, a.extra) == (7, 11, {"lr_hash": 0.02})
    monkeypatch.setenv("PHYNES_SEED", "5")
    a = resolve_options(parser, ["train-geo", "--config", str(cfg)])
    assert a.seed == 5 and a.steps == 11
    a = resolve_options(parser, ["train-geo", "--config", str(cfg), "--seed", "6"])
    assert a.seed == 6
    monkeypatch.setenv("PHYNES_CONFIG", str(cfg))
    monkeypatch.setenv("PHYNES_FREEZE_PROBES", "true")
    a = resolve_options(parser, ["train-mat"])
    assert a.steps == 11 and a.freeze_probes is True
    assert resolve_options(build_parser(), ["check"]).threads is None


def test_bad_env_value(monkeypatch):
    monkeypatch.setenv("PHYNES_SEED", "many")
    assert main(["check"]) == EXIT_VALIDATION


def test_unknown_training_key_rejected(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 1.0}))
    assert main(["train-geo", "--dataset", str(data / "ds"), "--config", str(cfg), "--out", str(tmp_path)]) \
        == EXIT_VALIDATION


# --- training ---------------------------------------------------------------------------

def test_zero_step_training_writes_initialization(data, tmp_path):
    assert main(["train-geo", "--dataset", str(data / "ds"), "--steps", "0", "--out", str(tmp_path)]) == EXIT_OK
    ck = load_checkpoint(tmp_path / "stage1.ckpt")
    geo, dtx = new_stage1_maps(ck.maps["geo"].config["pose_dim"], TrainConfig())
    assert np.array_equal(ck.maps["geo"].params, geo.params)
    assert np.array_equal(ck.maps["dtx"].params, dtx.params)
    run = json.loads((tmp_path / "run_manifest.json").read_text())
    assert run["command"] == "train-geo" and run["config"]["steps"] == 0


def test_training_outputs(trained):
    s2 = load_checkpoint(trained / "s2" / "stage2.ckpt")
    assert {"geo", "dtx", "alb", "rgh"} <= set(s2.maps)
    m = json.loads((trained / "s2" / "stage2_manifest.json").read_text())
    assert m["config"]["stage"] == "mat" and m["steps_run"] == 2


def test_train_missing_inputs(data, tmp_path):
    assert main(["train-geo", "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert main(["train-mat", "--dataset", str(data / "ds"), "--stage1", str(tmp_path / "nope.ckpt"),
                 "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert main(["train-geo", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_VALIDATION


# --- render / relight --------------------------------------------------------------------

def _render(trained, out, *extra):
    return main(["render", "--checkpoint", str(trained / "s2" / "stage2.ckpt"), "--dataset", str(trained / "ds"),
                 "--frame", "3", "--out", str(out), *extra])


def test_render_outputs_and_determinism(trained, tmp_path):
    assert _render(trained, tmp_path / "a") == EXIT_OK
    assert _render(trained, tmp_path / "b") == EXIT_OK
    name = "003_p0_c3"
    for sub in ("images/" + name + ".pfm", "images/" + name + ".png", "aux/" + name + "_albedo.pfm",
                "aux/" + name + "_roughness.pfm", "aux/" + name + "_normal.pfm", "aux/" + name + "_visibility.pfm",
                "probes.json", "meshes/mesh_pose0.json"):
        assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes(), sub
    assert read_pfm(tmp_path / "a" / "images" / (name + ".pfm")).shape == (RES, RES, 3)


def test_render_stage1_checkpoint(trained, tmp_path):
    assert main(["render", "--checkpoint", str(trained / "s1" / "stage1.ckpt"), "--dataset", str(trained / "ds"),
                 "--frame", "0", "--width", "12", "--height", "12", "--out", str(tmp_path)]) == EXIT_OK
    assert read_pfm(tmp_path / "images" / "000_p0_c0.pfm").shape == (12, 12, 3)
    assert not (tmp_path / "probes.json").exists()


def test_relight_reproduces_and_scales(trained, tmp_path):
    assert _render(trained, tmp_path / "r") == EXIT_OK
    probes = tmp_path / "r" / "probes.json"
    ck, ds = str(trained / "s2" / "stage2.ckpt"), str(trained / "ds")
    assert main(["relight", "--checkpoint", ck, "--dataset", ds, "--probes", str(probes), "--frame", "3",
                 "--out", str(tmp_path / "same")]) == EXIT_OK
    name = "images/003_p0_c3.pfm"
    base = read_pfm(tmp_path / "r" / name)
    assert np.array_equal(read_pfm(tmp_path / "same" / name), base)

    p = load_probes(probes)
    p.radiance = p.radiance * 2
    save_probes(p, tmp_path / "double.json")
    assert main(["relight", "--checkpoint", ck, "--dataset", ds, "--probes", str(tmp_path / "double.json"),
                 "--frame", "3", "--out", str(tmp_path / "dbl")]) == EXIT_OK
    assert np.array_equal(read_pfm(tmp_path / "dbl" / name), base * 2)


def test_relight_errors(trained, tmp_path):
    from avatarlight.pbr import LightProbeArray
    ck, ds = str(trained / "s2" / "stage2.ckpt"), str(trained / "ds")
    save_probes(LightProbeArray.uniform(1.0, 64), tmp_path / "p64.json")
    assert main(["relight", "--checkpoint", ck, "--dataset", ds, "--probes", str(tmp_path / "p64.json"),
                 "--frame", "0", "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    assert main(["relight", "--checkpoint", ck, "--dataset", ds, "--frame", "0",
                 "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    assert main(["relight", "--checkpoint", str(trained / "s1" / "stage1.ckpt"), "--dataset", ds,
                 "--probes", str(trained / "ds" / "gt" / "probes.json"), "--out", str(tmp_path / "x")]) \
        == EXIT_VALIDATION
    assert main(["render", "--checkpoint", ck, "--dataset", ds, "--frame", "99",
                 "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    assert main(["render", "--dataset", ds, "--out", str(tmp_path / "x")]) == EXIT_VALIDATION


# --- eval ---------------------------------------------------------------------------------

def test_eval_ground_truth_against_itself(data, tmp_path):
    ds = data / "ds"
    assert main(["eval", "--pred", str(ds), "--gt", str(ds), "--out", str(tmp_path)]) == EXIT_OK
    r = json.loads((tmp_path / "metrics.json").read_text())
    assert r["mean_psnr"] == 99.0
    assert r["mean_ssim"] == pytest.approx(1.0, abs=1e-12)
    assert len(r["geometry"]) == 3 and r["mean_chamfer"] < 1e-4


def test_eval_half_brightness_is_aligned(data, tmp_path):
    pred = tmp_path / "pred"
    (pred / "images").mkdir(parents=True)
    for p in (data / "ds" / "images").glob("*.pfm"):
        write_pfm(pred / "images" / p.name, read_pfm(p) * np.float32(0.5))
    assert main(["eval", "--pred", str(pred), "--gt", str(data / "ds"), "--out", str(tmp_path / "m")]) == EXIT_OK
    r = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert r["mean_psnr_aligned"] == 99.0
    assert r["mean_psnr"] < 40
    assert "geometry" not in r


def test_eval_missing_prediction(data, tmp_path):
    (tmp_path / "images").mkdir()
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(data / "ds"), "--out", str(tmp_path)]) \
        == EXIT_VALIDATION


# --- check / entry point --------------------------------------------------------------------

def test_check_passes(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path)]) == EXIT_OK
    res = json.loads((tmp_path / "check.json").read_text())
    assert res and all(r["passed"] for r in res)
    assert "FAIL" not in capsys.readouterr().out


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "avatarlight.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen", "train-geo", "train-mat", "render", "relight", "eval", "check"):
        assert cmd in out.stdout
    if shutil.which("avatarlight"):
        assert subprocess.run(["avatarlight", "--help"], capture_output=True).returncode == 0
