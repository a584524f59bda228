"""Two-stage optimization.

Stage 1 fits the offset and texture maps (plus the density sharpness) to
multi-view images through the volume renderer. Stage 2 freezes geometry and
fits albedo, roughness and probe radiances through the PBR renderer.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .body import DEFAULT_OFFSET_CAP, deform, mesh_bvh, pose_body
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import Dataset
from .fields import AdamState, MapOptimizer, NeuralMap, adam_step, snap_f32
from .losses import (LossWeights, MeshTopology, bce_background, entropy_reg, material_loss, mesh_loss,
                     mse_loss, smooth_reg)
from .pbr import (LightProbeArray, ShadingInputs, fibonacci_directions, prepare_frame, probe_raw_grad,
                  shade_backward, shade_points, softplus_inverse)
from .volume import BETA_MIN, Stage1Scene, backward_rays_stage1, render_rays_stage1

logger = logging.getLogger(__name__)

EDGE_PX = 2


class NumericError(RuntimeError):
    """Training produced a non-finite loss; the last good state was checkpointed."""


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "geo"
    steps: int = 4000
    rays_per_step: int = 128
    pixels_per_step: int = 1024
    frames_per_step: int = 2
    bg_fraction: float = 0.1
    # share of foreground and background rays drawn next to the mask boundary
    edge_fraction: float = 0.5
    lr_hash: float = 5e-3
    lr_dense: float = 5e-4
    lr_probes: float = 2e-2
    lr_beta: float = 1e-2  # on log(beta)
    beta_init: float = 0.05
    offset_cap: float = DEFAULT_OFFSET_CAP
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100
    jitter: bool = True
    cull_eps: float = 1e-12
    width: int = 64
    encoder: str = "hash"
    encoder_options: dict = field(default_factory=dict)
    freeze_probes: bool = False
    # roughness stays at its initial value while albedo and probes settle
    rgh_warmup_steps: int = 500
    probe_init: float = 0.5
    n_probes: int = 128
    specular: bool | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    # edge term measures length change against the posed template instead of absolute length
    edge_rest_length: bool = True
    # optional early stop on a fixed evaluation ray set (stage 1)
    eval_every: int = 0
    eval_rays: int = 4096
    target_mse: float | None = None
    # stop once this much training time has elapsed (excludes evaluation)
    max_train_seconds: float | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.rgh_warmup_steps < 0:
            raise TrainingError("rgh_warmup_steps must be non-negative")
        for k in ("steps", "rays_per_step", "pixels_per_step", "frames_per_step", "log_every"):
            v = getattr(self, k)
            if v < (0 if k == "steps" else 1):
                raise TrainingError(f"{k} must be positive, got {v}")
        if self.stage not in ("geo", "mat"):
            raise TrainingError(f"stage must be 'geo' or 'mat', got {self.stage!r}")
        if not 0.0 <= self.bg_fraction < 1.0:
            raise TrainingError("bg_fraction must be in [0, 1)")
        if not 0.0 <= self.edge_fraction <= 1.0:
            raise TrainingError("edge_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class RunResult:
    maps: dict
    tensors: dict
    history: list
    manifest: dict
    wall_time: float = 0.0
    reached_target_at: float | None = None


def _loss_table(history, every: int = 100) -> list:
    table = []
    for s in range(0, len(history), every):
        chunk = history[s:s + every]
        row = {"step": chunk[-1]["step"]}
        for k in chunk[0]:
            if k != "step":
                row[k] = float(np.mean([h[k] for h in chunk]))
        table.append(row)
    return table


def _write_manifest(out_dir, name: str, manifest: dict) -> None:
    if out_dir is None:
        return
    p = Path(out_dir) / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


# --- stage 1 -----------------------------------------------------------------------

class VertexNeighbourhood:
    """Random texel points a short way into a face incident to each vertex.

    The mesh regulariser reads the offset field at these points instead of at the
    exact vertex texels. A field with fine hash levels can otherwise move the
    vertex texels on their own, which the photometric loss never sees.
    """

    def __init__(self, faces, corner_uv, reach: float = 0.25):
        faces = np.asarray(faces)
        self.corner_uv = np.asarray(corner_uv, dtype=np.float64)
        self.reach = reach
        flat = faces.ravel()
        order = np.argsort(flat, kind="stable")
        self.face, self.corner = order // 3, order % 3
        self.count = np.bincount(flat, minlength=int(flat.max()) + 1)
        self.start = np.concatenate([[0], np.cumsum(self.count)[:-1]])

    def sample(self, rng) -> np.ndarray:
        n = len(self.count)
        k = self.start + np.minimum((rng.random(n) * self.count).astype(np.int64), self.count - 1)
        f, c = self.face[k], self.corner[k]
        own = self.corner_uv[f, c]
        a = rng.uniform(0.0, self.reach, (n, 2))
        return (own + a[:, :1] * (self.corner_uv[f, (c + 1) % 3] - own)
                + a[:, 1:] * (self.corner_uv[f, (c + 2) % 3] - own))


class _Frame1:
    def __init__(self, fr, offset_box):
        self.record = fr
        self.pose = fr.pose
        self.pose_index = fr.pose_index
        o, d = fr.camera.pixel_rays()
        self.origins, self.dirs = o, d
        self.target = fr.image.reshape(-1, 3)
        mask = fr.mask.ravel()
        from .volume import ray_box
        _, _, inbox = ray_box(o, d, *offset_box)
        self.fg = np.nonzero(mask)[0]
        self.bg = np.nonzero(~mask & inbox)[0]
        # pixels within EDGE_PX of the silhouette, on either side
        m2 = fr.mask
        near_bg = binary_dilation(~m2, iterations=EDGE_PX).ravel()
        near_fg = binary_dilation(m2, iterations=EDGE_PX).ravel()
        self.fg_edge = np.nonzero(mask & near_bg)[0]
        self.bg_edge = np.nonzero(~mask & inbox & near_fg)[0]


def _stage1_setup(dataset: Dataset, cfg: TrainConfig):
    body = dataset.body
    scenes = {}
    for fr in dataset.frames:
        if fr.pose_index not in scenes:
            scenes[fr.pose_index] = Stage1Scene(body, fr.pose, None, cfg.offset_cap)
    frames = [_Frame1(fr, scenes[fr.pose_index].box) for fr in dataset.frames]
    return scenes, frames


def new_stage1_maps(pose_dim: int, cfg: TrainConfig):
    geo = NeuralMap("geo", pose_dim, width=cfg.width, encoder=cfg.encoder,
                    encoder_options=cfg.encoder_options or None, offset_cap=cfg.offset_cap, seed=cfg.seed)
    dtx = NeuralMap("dtx", pose_dim, width=cfg.width, encoder=cfg.encoder,
                    encoder_options=cfg.encoder_options or None, seed=cfg.seed + 1)
    return geo, dtx


def eval_ray_set(frames, n_rays: int, seed: int):
    """Fixed (frame, pixel) pairs for progress evaluation: covered pixels plus nearby background."""
    rng = np.random.default_rng(seed + 7919)
    per = max(1, n_rays // len(frames))
    sel = []
    for i, f in enumerate(frames):
        n_bg = min(len(f.bg), per // 10)
        px = np.concatenate([rng.choice(f.fg, per - n_bg), rng.choice(f.bg, n_bg) if n_bg else []]).astype(np.int64)
        sel.append((i, px))
    return sel


def eval_stage1_rays(scenes, frames, sel, geo, dtx, beta, body, offset_cap) -> float:
    """MSE of midpoint-sampled renders over a fixed ray set."""
    err, n = 0.0, 0
    done = set()
    for i, px in sel:
        f = frames[i]
        sc = scenes[f.pose_index]
        if f.pose_index not in done:
            sc.update_geometry(geo)
            done.add(f.pose_index)
        res = render_rays_stage1(sc, f.origins[px], f.dirs[px], geo, dtx, beta)
        err += float(np.sum((res.color - f.target[px]) ** 2))
        n += res.color.size
    return err / n


def train_stage1(dataset: Dataset, cfg: TrainConfig, out_dir=None, init: Checkpoint | None = None,
                 progress=None) -> RunResult:
    """Fit geo/dtx/beta to the dataset images; deterministic for a fixed seed."""
    if not dataset.frames:
        raise TrainingError("empty dataset")
    body = dataset.body
    pose_dim = 3 * body.n_joints
    rng = np.random.default_rng(cfg.seed)
    start_step = 0
    history = []
    if init is not None:
        geo, dtx = init.maps["geo"], init.maps["dtx"]
        beta = float(init.tensors["beta"][0])
        start_step = int(init.meta.get("step", 0))
        history = list(init.meta.get("history", []))
    else:
        geo, dtx = new_stage1_maps(pose_dim, cfg)
        beta = float(np.float32(cfg.beta_init))
    opt_geo = MapOptimizer(geo, cfg.lr_hash, cfg.lr_dense)
    opt_dtx = MapOptimizer(dtx, cfg.lr_hash, cfg.lr_dense)
    beta_vec = np.array([beta])
    # Adam runs on log(beta) so steps are relative; beta_vec holds the f32-snapped value itself
    log_beta = np.log(beta_vec)
    beta_grad = np.zeros(1)
    beta_state = AdamState.zeros(1)
    if init is not None:
        _restore_adam(init, "geo", opt_geo.state)
        _restore_adam(init, "dtx", opt_dtx.state)
        _restore_adam(init, "beta", beta_state)
    # replay the generator so a resumed run sees the same ray stream as an uninterrupted one
    scenes, frames = _stage1_setup(dataset, cfg)
    topo = MeshTopology(body.faces, len(body.vertices))
    nbhd = VertexNeighbourhood(body.faces, body.uv)
    w = cfg.weights
    rest = {pi: np.linalg.norm(sc.base.vertices[topo.edges[:, 0]] - sc.base.vertices[topo.edges[:, 1]], axis=1)
            if cfg.edge_rest_length else None for pi, sc in scenes.items()}
    n_frames = min(cfg.frames_per_step, len(frames))
    per_frame = max(1, cfg.rays_per_step // n_frames)
    n_bg = int(round(cfg.bg_fraction * per_frame))
    sel = eval_ray_set(frames, cfg.eval_rays, cfg.seed) if cfg.eval_every else None
    reached_at = None
    train_time = 0.0
    meta_base = {"stage": "geo", "config": cfg.to_dict(), "dataset_hash": dataset.content_hash(), "seed": cfg.seed}

    def snapshot(step):
        return dict(maps={"geo": geo, "dtx": dtx},
                    tensors={"beta": beta_vec.copy(), **_adam_tensors("geo", opt_geo.state),
                             **_adam_tensors("dtx", opt_dtx.state), **_adam_tensors("beta", beta_state)},
                    meta={**meta_base, "step": step, "history": history})

    for step in range(start_step):
        _draw_stage1(rng, frames, n_frames, per_frame, n_bg, cfg.jitter, skip=True, edge_fraction=cfg.edge_fraction)

    for step in range(start_step, cfg.steps):
        t0 = time.perf_counter()
        picks = _draw_stage1(rng, frames, n_frames, per_frame, n_bg, cfg.jitter, edge_fraction=cfg.edge_fraction)
        meshes = {}
        for fi, _, _, _ in picks:
            pi = frames[fi].pose_index
            if pi not in meshes:
                sc = scenes[pi]
                mesh = deform(body, sc.pose, geo, cfg.offset_cap, base=sc.base)
                meshes[pi] = mesh
                sc.mesh, sc.mesh_bvh = mesh, mesh_bvh(mesh)
        total_rays = sum(len(fg) + len(bg) for _, fg, bg, _ in picks)
        total_bg = sum(len(bg) for _, _, bg, _ in picks)
        loss_mse = loss_bg = 0.0
        d_beta = 0.0
        results = []
        for fi, fg, bg, seed in picks:
            f = frames[fi]
            px = np.concatenate([fg, bg])
            res = render_rays_stage1(scenes[f.pose_index], f.origins[px], f.dirs[px], geo, dtx, beta_vec[0],
                                     rng=np.random.default_rng(seed) if seed is not None else None,
                                     cull_eps=cfg.cull_eps)
            r = res.color - f.target[px]
            loss_mse += float(np.sum(r * r)) / (3 * total_rays)
            dC = 2.0 * r / (3 * total_rays)
            dA = np.zeros(len(px))
            if len(bg) and w.background > 0:
                a = np.clip(res.opacity[len(fg):], 0.0, 1.0 - 1e-6)
                loss_bg += w.background * float(-np.log1p(-a).sum()) / total_bg
                dA[len(fg):] = w.background / ((1.0 - a) * total_bg)
            results.append((res, dC, dA))
        # backward after all forwards: each render result keeps its own map caches
        for res, dC, dA in results:
            d_beta += backward_rays_stage1(res, geo, dtx, dC, dA)
        loss_mesh = 0.0
        mesh_rng = np.random.default_rng([cfg.seed, step, 0x6D657368])
        for pi in meshes:
            base = scenes[pi].base
            l, cache = geo.forward(nbhd.sample(mesh_rng), scenes[pi].pose)
            l = l[:, 0]
            inside = np.abs(l) < cfg.offset_cap
            l = np.clip(l, -cfg.offset_cap, cfg.offset_cap)
            val, dV, _ = mesh_loss(base.vertices + l[:, None] * base.vertex_normals, topo, w, rest[pi])
            loss_mesh += val / len(meshes)
            d_off = np.einsum("va,va->v", dV, base.vertex_normals) * inside / len(meshes)
            geo.backward(d_off[:, None], cache)
        loss = loss_mse + loss_bg + loss_mesh
        if not np.isfinite(loss):
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "stage1_last_good.ckpt", **snapshot(step))
            raise NumericError(f"non-finite loss at step {step}")
        beta_grad[0] = d_beta * beta_vec[0]
        opt_geo.step()
        opt_dtx.step()
        log_beta[0] = np.log(beta_vec[0])
        adam_step(log_beta, beta_grad, beta_state, cfg.lr_beta)
        beta_vec[0] = max(np.exp(log_beta[0]), BETA_MIN)
        snap_f32(beta_vec)
        train_time += time.perf_counter() - t0
        history.append({"step": step + 1, "loss": loss, "mse": loss_mse, "bg": loss_bg, "mesh": loss_mesh,
                        "beta": float(beta_vec[0])})
        if progress is not None and (step + 1) % cfg.log_every == 0:
            progress(history[-1])
        if (step + 1) % cfg.log_every == 0:
            logger.info("stage1 step %d loss %.3e mse %.3e beta %.4f", step + 1, loss, loss_mse, beta_vec[0])
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"stage1_step{step + 1:05d}.ckpt", **snapshot(step + 1))
        if sel is not None and (step + 1) % cfg.eval_every == 0:
            m = eval_stage1_rays(scenes, frames, sel, geo, dtx, beta_vec[0], body, cfg.offset_cap)
            history[-1]["eval_mse"] = m
            if cfg.target_mse is not None and m < cfg.target_mse:
                reached_at = train_time
                logger.info("eval mse %.3e below target after %.1f s", m, train_time)
                break
        if cfg.max_train_seconds is not None and train_time >= cfg.max_train_seconds:
            logger.info("training time budget of %.1f s used up at step %d", cfg.max_train_seconds, step + 1)
            break

    snap = snapshot(len(history) and history[-1]["step"] or start_step)
    manifest = {**meta_base, "dataset": str(dataset.root), "wall_time_s": train_time, "steps_run": len(history),
                "loss_table": _loss_table([{k: v for k, v in h.items() if k != "eval_mse"} for h in history]),
                "final_beta": float(beta_vec[0])}
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "stage1.ckpt", **snap)
        _write_manifest(out_dir, "stage1_manifest.json", manifest)
    return RunResult(snap["maps"], snap["tensors"], history, manifest, train_time, reached_at)


def _split_draw(rng, pool, edge, n, edge_fraction):
    ne = int(round(edge_fraction * n)) if len(edge) else 0
    return np.concatenate([rng.choice(edge, ne), rng.choice(pool, n - ne)]).astype(np.int64)


def _draw_stage1(rng, frames, n_frames, per_frame, n_bg, jitter, skip=False, edge_fraction=0.0):
    picks = []
    chosen = rng.choice(len(frames), n_frames, replace=False)
    for fi in chosen:
        f = frames[fi]
        nb = min(n_bg, len(f.bg))
        fg = _split_draw(rng, f.fg, f.fg_edge, per_frame - nb, edge_fraction)
        bg = _split_draw(rng, f.bg, f.bg_edge, nb, edge_fraction) if nb else np.zeros(0, dtype=np.int64)
        seed = int(rng.integers(2 ** 63)) if jitter else None
        picks.append((int(fi), fg, bg, seed))
    return picks


def _adam_tensors(name, state: AdamState) -> dict:
    return {f"adam/{name}/m": state.m, f"adam/{name}/v": state.v,
            f"adam/{name}/step": np.array([state.step], dtype=np.float64)}


def _restore_adam(ckpt: Checkpoint, name, state: AdamState) -> None:
    key = f"adam/{name}/m"
    if key in ckpt.tensors and ckpt.tensors[key].shape == state.m.shape:
        state.m[:] = ckpt.tensors[key]
        state.v[:] = ckpt.tensors[f"adam/{name}/v"]
        state.step = int(ckpt.tensors[f"adam/{name}/step"][0])


def render_stage1_image(dataset_frame, geo, dtx, beta, body, offset_cap=DEFAULT_OFFSET_CAP, scene=None):
    from .volume import render_image_stage1
    return render_image_stage1(dataset_frame.camera, body, geo, dtx, dataset_frame.pose, beta, offset_cap,
                               scene=scene)


def evaluate_stage1(dataset: Dataset, geo, dtx, beta, offset_cap=DEFAULT_OFFSET_CAP, frames=None) -> dict:
    """Full-image MSE per frame using deterministic midpoint sampling."""
    scenes = {}
    per_frame = []
    for i, fr in enumerate(dataset.frames):
        if frames is not None and i not in frames:
            continue
        if fr.pose_index not in scenes:
            scenes[fr.pose_index] = Stage1Scene(dataset.body, fr.pose, geo, offset_cap)
        img, _ = render_stage1_image(fr, geo, dtx, beta, dataset.body, offset_cap, scenes[fr.pose_index])
        per_frame.append(float(np.mean((img - fr.image) ** 2)))
    return {"mse_per_frame": per_frame, "mse": float(np.mean(per_frame))}


# --- stage 2 -----------------------------------------------------------------------

def subset_shading(si: ShadingInputs, idx) -> ShadingInputs:
    return ShadingInputs(si.normals[idx], si.view[idx], si.W[idx], si.cos_i[idx], si.cos_o[idx])


class _Frame2:
    def __init__(self, fr, pbr_frame):
        self.record = fr
        self.pose = fr.pose
        self.frame = pbr_frame
        self.target = fr.image.reshape(-1, 3)[pbr_frame.pixels]


def stage2_frames(dataset: Dataset, geo, n_probes: int = 128, offset_cap=DEFAULT_OFFSET_CAP):
    dirs = fibonacci_directions(n_probes)
    meshes = {}
    out = []
    for fr in dataset.frames:
        if fr.pose_index not in meshes:
            mesh = deform(dataset.body, fr.pose, geo, offset_cap) if geo is not None else pose_body(dataset.body, fr.pose)
            meshes[fr.pose_index] = (mesh, mesh_bvh(mesh))
        mesh, bvh = meshes[fr.pose_index]
        out.append(_Frame2(fr, prepare_frame(mesh, fr.camera, dirs, bvh=bvh)))
    return out


def material_loss_on_frames(frames, alb, rgh, radiance, specular: bool) -> float:
    total = 0.0
    for f in frames:
        a = np.asarray(alb.query_batch(f.frame.uv, f.pose, retain=False)).reshape(-1, 3)
        r = np.asarray(rgh.query_batch(f.frame.uv, f.pose, retain=False)).reshape(-1)
        Lo = shade_points(f.frame.shading, a, r, radiance, fibonacci_directions(len(radiance)), specular)
        total += material_loss(Lo, f.target)[0]
    return total


def new_stage2_maps(pose_dim: int, cfg: TrainConfig):
    alb = NeuralMap("alb", pose_dim, width=cfg.width, encoder=cfg.encoder,
                    encoder_options=cfg.encoder_options or None, seed=cfg.seed + 2)
    rgh = NeuralMap("rgh", pose_dim, width=cfg.width, encoder=cfg.encoder,
                    encoder_options=cfg.encoder_options or None, seed=cfg.seed + 3)
    return alb, rgh


def train_stage2(dataset: Dataset, stage1: Checkpoint, cfg: TrainConfig, out_dir=None,
                 init: Checkpoint | None = None, progress=None) -> RunResult:
    """Fit albedo, roughness and probe radiances with geometry frozen."""
    if not dataset.frames:
        raise TrainingError("empty dataset")
    if "geo" not in stage1.maps:
        raise TrainingError("stage-1 checkpoint has no geo map")
    body = dataset.body
    pose_dim = 3 * body.n_joints
    geo = stage1.maps["geo"]
    dtx = stage1.maps.get("dtx")
    specular = bool(dataset.manifest.get("specular", True)) if cfg.specular is None else cfg.specular
    rng = np.random.default_rng(cfg.seed)
    history, start_step = [], 0
    if init is not None:
        alb, rgh = init.maps["alb"], init.maps["rgh"]
        raw = init.tensors["probes_raw"].copy()
        start_step = int(init.meta.get("step", 0))
        history = list(init.meta.get("history", []))
    else:
        alb, rgh = new_stage2_maps(pose_dim, cfg)
        raw = np.full((cfg.n_probes, 3), softplus_inverse(cfg.probe_init))
        snap_f32(raw)
    raw_grad = np.zeros_like(raw)
    opt_alb = MapOptimizer(alb, cfg.lr_hash, cfg.lr_dense)
    opt_rgh = MapOptimizer(rgh, cfg.lr_hash, cfg.lr_dense)
    probe_state = AdamState.zeros(raw.size)
    if init is not None:
        _restore_adam(init, "alb", opt_alb.state)
        _restore_adam(init, "rgh", opt_rgh.state)
        _restore_adam(init, "probes", probe_state)
    dirs = fibonacci_directions(len(raw))
    frames = stage2_frames(dataset, geo, len(raw), cfg.offset_cap)
    w = cfg.weights
    n_frames = min(cfg.frames_per_step, len(frames))
    per_frame = max(2, cfg.pixels_per_step // n_frames)
    beta = stage1.tensors.get("beta", np.array([cfg.beta_init]))
    meta_base = {"stage": "mat", "config": cfg.to_dict(), "dataset_hash": dataset.content_hash(), "seed": cfg.seed, "specular": specular}
    train_time = 0.0

    def snapshot(step):
        maps = {"geo": geo, "alb": alb, "rgh": rgh}
        if dtx is not None:
            maps["dtx"] = dtx
        return dict(maps=maps,
                    tensors={"beta": np.asarray(beta), "probes_raw": raw.copy(),
                             "probes_radiance": np.logaddexp(0.0, raw),
                             **_adam_tensors("alb", opt_alb.state), **_adam_tensors("rgh", opt_rgh.state),
                             **_adam_tensors("probes", probe_state)},
                    meta={**meta_base, "step": step, "history": history})

    for step in range(start_step):
        _draw_stage2(rng, frames, n_frames, per_frame)

    for step in range(start_step, cfg.steps):
        t0 = time.perf_counter()
        radiance = np.logaddexp(0.0, raw)
        picks = _draw_stage2(rng, frames, n_frames, per_frame)
        loss_mat = loss_reg = 0.0
        d_rad = np.zeros_like(raw)
        for fi, idx, reg_seed in picks:
            f = frames[fi]
            uv = f.frame.uv[idx]
            si = subset_shading(f.frame.shading, idx)
            a, ca = alb.forward(uv, f.pose)
            r, cr = rgh.forward(uv, f.pose)
            r = r[:, 0]
            Lo = shade_points(si, a, r, radiance, dirs, specular)
            val, dLo = material_loss(Lo, f.target[idx])
            loss_mat += val
            da, dr, dR = shade_backward(si, a, r, radiance, dirs, dLo, specular)
            d_rad += dR
            if w.entropy > 0:
                ev, eg = entropy_reg(a)
                loss_reg += w.entropy * ev / n_frames
                da = da + w.entropy * eg / n_frames
            alb.backward(da, ca)
            rgh.backward(dr[:, None], cr)
            reg_rng = np.random.default_rng(reg_seed)
            if w.alb_smooth > 0:
                loss_reg += w.alb_smooth * smooth_reg(alb, uv, f.pose, reg_rng, w.jitter_mu, w.jitter_var,
                                                      backward_scale=w.alb_smooth)
            if w.rgh_smooth > 0:
                loss_reg += w.rgh_smooth * smooth_reg(rgh, uv, f.pose, reg_rng, w.jitter_mu, w.jitter_var,
                                                      backward_scale=w.rgh_smooth)
        loss = loss_mat + loss_reg
        if not np.isfinite(loss):
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "stage2_last_good.ckpt", **snapshot(step))
            raise NumericError(f"non-finite loss at step {step}")
        opt_alb.step()
        if step < cfg.rgh_warmup_steps:
            rgh.zero_grad()
        else:
            opt_rgh.step()
        if cfg.freeze_probes:
            raw_grad[:] = 0.0
        else:
            raw_grad[:] = probe_raw_grad(raw, d_rad)
            flat, gflat = raw.reshape(-1), raw_grad.reshape(-1)
            adam_step(flat, gflat, probe_state, cfg.lr_probes)
            snap_f32(raw)
        train_time += time.perf_counter() - t0
        history.append({"step": step + 1, "loss": loss, "material": loss_mat, "reg": loss_reg})
        if progress is not None and (step + 1) % cfg.log_every == 0:
            progress(history[-1])
        if (step + 1) % cfg.log_every == 0:
            logger.info("stage2 step %d loss %.4e", step + 1, loss)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"stage2_step{step + 1:05d}.ckpt", **snapshot(step + 1))

    snap = snapshot(history[-1]["step"] if history else start_step)
    manifest = {**meta_base, "dataset": str(dataset.root), "wall_time_s": train_time, "steps_run": len(history),
                "loss_table": _loss_table(history)}
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "stage2.ckpt", **snap)
        _write_manifest(out_dir, "stage2_manifest.json", manifest)
    return RunResult(snap["maps"], snap["tensors"], history, manifest, train_time)


def _draw_stage2(rng, frames, n_frames, per_frame):
    picks = []
    for fi in rng.choice(len(frames), n_frames, replace=False):
        n = len(frames[fi].frame.pixels)
        idx = rng.choice(n, min(per_frame, n), replace=False)
        picks.append((int(fi), np.sort(idx), int(rng.integers(2 ** 63))))
    return picks


def probes_from_checkpoint(ckpt: Checkpoint) -> LightProbeArray:
    if "probes_raw" not in ckpt.tensors:
        raise TrainingError("checkpoint holds no probe radiances")
    return LightProbeArray.from_raw(ckpt.tensors["probes_raw"])


def load_stage(path) -> Checkpoint:
    return load_checkpoint(path)
