import dataclasses
import hashlib
import json
import struct

import numpy as np
import pytest

from avatarlight.body import face_normals, load_body, pose_body, vertex_normals
from avatarlight.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from avatarlight.dataset import DatasetError, load_dataset
from avatarlight.fields import NeuralMap, TextureMap
from avatarlight.imageio import read_image, read_mask, read_pfm, to_ldr, write_mask, write_pfm, write_png
from avatarlight.pbr import load_probes, render_pbr
from avatarlight.synthetic import (
    BUMP_AMPLITUDE, PresetError, build_scene, generate_synthetic, load_gt_mesh, load_gt_textures,
)

RES = 32


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def bumpy(tmp_path_factory):
    root = tmp_path_factory.mktemp("bumpy")
    generate_synthetic(root, "capsule-bumpy", seed=7, resolution=RES)
    return root


# --- image IO -------------------------------------------------------------------------

def test_pfm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.normal(size=(5, 7, 3)).astype(np.float32)
    mono = rng.random((4, 6)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", rgb)
    write_pfm(tmp_path / "b.pfm", mono)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), rgb)
    assert np.array_equal(read_pfm(tmp_path / "b.pfm"), mono)
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "c.pfm", np.zeros((2, 2, 4)))


def test_pfm_layout_little_endian_bottom_up(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    body = raw[len(b"Pf\n3 2\n-1.0\n"):]
    assert struct.unpack("<6f", body) == (3, 4, 5, 0, 1, 2)


def test_big_endian_pfm_is_read(tmp_path):
    img = np.array([[1.5, -2.0]], dtype=np.float32)
    (tmp_path / "be.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + img.astype(">f4").tobytes())
    assert np.array_equal(read_pfm(tmp_path / "be.pfm"), img)


def test_png_and_mask(tmp_path):
    rad = np.array([[[0.0, 0.5, 1.0], [2.0, -1.0, 0.25]]])
    assert to_ldr(rad).tolist() == [[[0, round(255 * 0.5 ** (1 / 2.2)), 255], [255, 0, round(255 * 0.25 ** (1 / 2.2))]]]
    write_png(tmp_path / "a.png", rad)
    back = read_image(tmp_path / "a.png")
    assert back.shape == (1, 2, 3)
    assert abs(back[0, 0, 1] - 0.5) < 0.01
    m = np.random.default_rng(1).random((9, 5)) > 0.5
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)


# --- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip_and_resave(tmp_path):
    maps = {"geo": NeuralMap("geo", 6, zero_head=False, seed=1), "alb": NeuralMap("alb", 6, seed=2)}
    tensors = {"beta": np.array([0.05]), "probes_raw": np.random.default_rng(0).normal(size=(128, 3))}
    save_checkpoint(tmp_path / "a.ckpt", maps, tensors, {"stage": 1})
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.meta == {"stage": 1}
    assert "geo" in ck and "beta" in ck and "nope" not in ck
    for k, m in maps.items():
        assert np.array_equal(ck.maps[k].params, m.params)
        assert ck.maps[k].config == m.config
    assert np.array_equal(ck.tensors["probes_raw"], tensors["probes_raw"].astype(np.float32))
    save_checkpoint(tmp_path / "b.ckpt", ck.maps, ck.tensors, ck.meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"rgh": NeuralMap("rgh", 6)}, {})
    data = bytearray((tmp_path / "a.ckpt").read_bytes())
    data[40] ^= 0x01
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(data[:30]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


# --- synthetic generator --------------------------------------------------------------

def test_unknown_preset():
    with pytest.raises(PresetError):
        build_scene("capsule-velvet")


def test_generator_layout(bumpy):
    manifest = json.loads((bumpy / "manifest.json").read_text())
    assert len(manifest["frames"]) == 24
    assert {(f["pose_index"], f["camera_index"]) for f in manifest["frames"]} == {(p, c) for p in range(3) for c in range(8)}
    ds = load_dataset(bumpy)
    assert len(ds.poses) == 3
    fr = ds.frames[0]
    assert fr.image.shape == (RES, RES, 3) and fr.mask.shape == (RES, RES)
    assert fr.mask.any()
    for key in ("albedo", "roughness", "probes"):
        assert ds.gt_path(key).is_file()
    assert len(manifest["gt"]["relight"]) == 4


def test_generator_is_deterministic(bumpy, tmp_path):
    generate_synthetic(tmp_path, "capsule-bumpy", seed=7, resolution=RES)
    assert _digest(tmp_path) == _digest(bumpy)
    other = tmp_path / "other"
    generate_synthetic(other, "capsule-bumpy", seed=8, resolution=RES)
    assert read_pfm(other / "images" / "000_p0_c0.pfm").tobytes() != read_pfm(bumpy / "images" / "000_p0_c0.pfm").tobytes()


def test_generator_fixed_point(bumpy):
    # re-render every frame from the stored ground-truth files only
    ds = load_dataset(bumpy)
    body = load_body(bumpy / "gt" / "body.json")
    alb, rgh = load_gt_textures(bumpy)
    probes = load_probes(bumpy / "gt" / "probes.json")
    meshes = [load_gt_mesh(bumpy / m) for m in ds.manifest["gt"]["meshes"]]
    for fr in ds.frames:
        V = meshes[fr.pose_index].vertices
        mesh = dataclasses.replace(pose_body(body, fr.pose), vertices=V,
                                   vertex_normals=vertex_normals(V, body.faces),
                                   face_normals=face_normals(V, body.faces))
        out = render_pbr(fr.camera, body, fr.pose, None, TextureMap(alb), TextureMap(rgh), probes,
                         ds.manifest["specular"], mesh=mesh)
        assert np.array_equal(out.radiance.astype(np.float32), read_pfm(fr.image_path))
        assert np.array_equal(out.mask, fr.mask)


def test_bumpy_ground_truth_amplitude(bumpy):
    ds = load_dataset(bumpy)
    body = ds.body
    for p, rel in enumerate(ds.manifest["gt"]["meshes"]):
        gt = load_gt_mesh(bumpy / rel)
        d = np.linalg.norm(gt.vertices - pose_body(body, ds.poses[p]).vertices, axis=1)
        assert d.max() == pytest.approx(BUMP_AMPLITUDE, abs=1e-12)


def test_lambert_furnace_preset(tmp_path):
    generate_synthetic(tmp_path, "capsule-lambert", seed=0, resolution=RES)
    ds = load_dataset(tmp_path)
    for fr in ds.frames:
        px = fr.image[fr.mask]
        # white Lambert under unit isotropic light on a convex body: 1 up to quadrature
        assert np.all(np.abs(px - 1.0) <= 0.05)


def test_textures_in_range():
    for preset in ("capsule-lambert", "capsule-specular", "capsule-bumpy"):
        s = build_scene(preset, seed=3)
        assert s.albedo.min() > 0 and s.albedo.max() < 1 or preset == "capsule-lambert"
        assert s.roughness.min() > 0.04 and s.roughness.max() < 1


# --- dataset errors -------------------------------------------------------------------

def test_dataset_errors(bumpy, tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{broken")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    m = json.loads((bumpy / "manifest.json").read_text())
    m["frames"] = []
    (tmp_path / "gt").mkdir()
    (tmp_path / "gt" / "body.json").write_bytes((bumpy / "gt" / "body.json").read_bytes())
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="no frames"):
        load_dataset(tmp_path)


def test_dataset_image_size_checked(bumpy, tmp_path):
    ds = load_dataset(bumpy)
    fr = ds.frames[0]
    write_pfm(tmp_path / "wrong.pfm", np.zeros((RES + 1, RES, 3)))
    fr.image_path = tmp_path / "wrong.pfm"
    fr._image = None
    with pytest.raises(DatasetError):
        _ = fr.image


def test_content_hash_tracks_images(bumpy, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(bumpy, copy)
    assert load_dataset(copy).content_hash() == load_dataset(bumpy).content_hash()
    img = read_pfm(copy / "images" / "000_p0_c0.pfm")
    img[0, 0, 0] += 1
    write_pfm(copy / "images" / "000_p0_c0.pfm", img)
    assert load_dataset(copy).content_hash() != load_dataset(bumpy).content_hash()
