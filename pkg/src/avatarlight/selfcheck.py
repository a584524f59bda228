"""Quick built-in consistency checks run by ``avatarlight check``.

Each check compares a fast code path against an independent slow one
(brute force, finite differences, closed form). The whole suite takes a few
seconds.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from .body import PoseParams, make_capsule, make_icosphere, pose_body
from .fields import NeuralMap
from .losses import MeshTopology, mesh_loss
from .pbr import LightProbeArray, brdf_eval, shade
from .raster import build_bvh, closest_hit_batch
from .volume import composite, composite_backward, density


def brute_force_hits(vertices, faces, origins, dirs, tmin=1e-6):
    """Moller-Trumbore against every triangle; returns (t, face) with inf/-1 for misses."""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    e1, e2 = v1 - v0, v2 - v0
    t_best = np.full(len(origins), np.inf)
    f_best = np.full(len(origins), -1)
    for r, (o, d) in enumerate(zip(origins, dirs)):
        p = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, p)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o - v0
        u = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1)
        v = (q @ d) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > tmin)
        if hit.any():
            t = np.where(hit, t, np.inf)
            k = int(np.argmin(t))
            t_best[r], f_best[r] = t[k], k
    return t_best, f_best


def _check_raycast(rng):
    body = make_icosphere(2)
    o = rng.normal(size=(200, 3)) * 2.5
    d = rng.normal(size=(200, 3)) - 0.3 * o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, f, _ = closest_hit_batch(build_bvh(body.vertices, body.faces), o, d)
    tb, fb = brute_force_hits(body.vertices, body.faces, o, d)
    both = np.isfinite(tb)
    ok = np.array_equal(np.isfinite(t), both) and np.allclose(t[both], tb[both], atol=1e-9)
    return ok, f"{int(both.sum())} hits, max |dt| {np.max(np.abs(t[both] - tb[both]), initial=0.0):.1e}"


def _fd_map(kind, rng, encoder="hash"):
    m = NeuralMap(kind, 6, width=16, encoder=encoder, zero_head=False, seed=int(rng.integers(1 << 30)))
    uv = rng.uniform(0.05, 0.95, size=(12, 2))
    pose = rng.normal(size=6) * 0.3
    out, cache = m.forward(uv, pose)
    wvec = rng.normal(size=out.shape)
    m.zero_grad()
    m.backward(wvec, cache)
    g = m.grads.copy()
    worst = 0.0
    for group in ("hash", "dense"):
        idx = np.flatnonzero(m.group_mask(group))
        if group == "hash":
            idx = idx[np.abs(g[idx]) > 0]
        if len(idx) == 0:
            continue
        for i in rng.choice(idx, size=min(8, len(idx)), replace=False):
            old = m.params[i]
            h = 1e-4
            m.params[i] = old + h
            fp = np.sum(m.forward(uv, pose)[0] * wvec)
            m.params[i] = old - h
            fm = np.sum(m.forward(uv, pose)[0] * wvec)
            m.params[i] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - g[i]) / max(1e-3, abs(fd) + abs(g[i])))
    return worst < 1e-5, f"max relative error {worst:.1e}"


def _check_composite(rng):
    S = 9
    sigma = rng.uniform(0, 5, size=(3, S))
    delta = rng.uniform(0.01, 0.2, size=(3, S))
    colors = rng.uniform(size=(3, S, 3))
    C, A, w, T = composite(sigma, delta, colors)
    dC = rng.normal(size=(3, 3))
    dA = rng.normal(size=3)
    ds, _ = composite_backward(sigma, delta, colors, w, T, dC, dA)
    h = 1e-6
    worst = 0.0
    for r in range(3):
        for s in range(S):
            sp, sm = sigma.copy(), sigma.copy()
            sp[r, s] += h
            sm[r, s] -= h
            Cp, Ap, _, _ = composite(sp, delta, colors)
            Cm, Am, _, _ = composite(sm, delta, colors)
            fd = (np.sum((Cp - Cm) * dC) + np.sum((Ap - Am) * dA)) / (2 * h)
            worst = max(worst, abs(fd - ds[r, s]))
    closed = 1.0 - np.exp(-np.sum(sigma * delta, axis=1))
    ok = worst < 1e-6 and np.allclose(A, closed, atol=1e-12) and np.allclose(w.sum(1), A)
    return ok, f"max |fd - analytic| {worst:.1e}"


def _check_density():
    beta = 0.05
    ok = np.isclose(density(np.array([0.0]), beta)[0], 0.5 / beta) and density(np.array([1.0]), beta)[0] < 1e-6
    return bool(ok), f"sigma(0) = {density(np.array([0.0]), beta)[0]:.4f}"


def _check_furnace():
    probes = LightProbeArray.uniform(1.0)
    n = np.array([0.0, 1.0, 0.0])
    v = np.array([0.3, 0.9, 0.1])
    v /= np.linalg.norm(v)
    L = shade(n, v, np.ones(3), 0.5, probes, np.ones(probes.n), specular=False)
    err = float(np.max(np.abs(L - 1.0)))
    return err < 1e-3, f"white Lambert under unit light: {L[0]:.6f}"


def _check_reciprocity(rng):
    n = np.array([0.0, 0.0, 1.0])
    wi = rng.normal(size=(50, 3))
    wo = rng.normal(size=(50, 3))
    wi[:, 2] = np.abs(wi[:, 2])
    wo[:, 2] = np.abs(wo[:, 2])
    wi /= np.linalg.norm(wi, axis=1, keepdims=True)
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    rough = rng.uniform(0.1, 1.0, size=50)
    alb = rng.uniform(size=(50, 3))
    a = brdf_eval(alb, rough, wi, wo, n)
    b = brdf_eval(alb, rough, wo, wi, n)
    err = float(np.max(np.abs(a - b)))
    return err < 1e-12 and bool(np.all(a >= 0)), f"max asymmetry {err:.1e}"


def _check_mesh_loss(rng):
    body = make_capsule(8, 6)
    V = pose_body(body, PoseParams(np.zeros((2, 3)), np.zeros(3))).vertices + rng.normal(size=body.vertices.shape) * 0.01
    topo = MeshTopology(body.faces, len(V))
    _, g, _ = mesh_loss(V, topo)
    h = 1e-6
    worst = 0.0
    for _ in range(10):
        i, k = int(rng.integers(len(V))), int(rng.integers(3))
        Vp, Vm = V.copy(), V.copy()
        Vp[i, k] += h
        Vm[i, k] -= h
        fd = (mesh_loss(Vp, topo)[0] - mesh_loss(Vm, topo)[0]) / (2 * h)
        worst = max(worst, abs(fd - g[i, k]))
    return worst < 1e-6, f"max |fd - analytic| {worst:.1e}"


def _check_checkpoint(rng):
    from .checkpoint import load_checkpoint, save_checkpoint
    m = NeuralMap("alb", 6, width=16, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a.ckpt", Path(tmp) / "b.ckpt"
        save_checkpoint(a, {"alb": m}, {"x": rng.normal(size=4)})
        ck = load_checkpoint(a)
        save_checkpoint(b, ck.maps, ck.tensors)
        same = a.read_bytes() == b.read_bytes()
        uv = rng.uniform(size=(20, 2))
        pose = np.zeros(6)
        eq = np.array_equal(m.query_batch(uv, pose), ck.maps["alb"].query_batch(uv, pose))
    return same and eq, "byte-identical re-save" if same else "re-save differs"


def run_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    checks = [
        ("ray casting vs brute force", lambda: _check_raycast(rng)),
        ("geo map gradient", lambda: _fd_map("geo", rng)),
        ("dtx map gradient", lambda: _fd_map("dtx", rng)),
        ("alb map gradient", lambda: _fd_map("alb", rng)),
        ("rgh map gradient", lambda: _fd_map("rgh", rng)),
        ("positional-encoding map gradient", lambda: _fd_map("dtx", rng, encoder="posenc")),
        ("compositing gradient", lambda: _check_composite(rng)),
        ("density at the surface", _check_density),
        ("Lambert furnace", _check_furnace),
        ("BRDF reciprocity", lambda: _check_reciprocity(rng)),
        ("mesh regulariser gradient", lambda: _check_mesh_loss(rng)),
        ("checkpoint round trip", lambda: _check_checkpoint(rng)),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
