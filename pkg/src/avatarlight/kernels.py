"""Compiled geometry kernels: ray/triangle tests, BVH traversal, closest points,
z-buffer rasterization and shadow-ray visibility.

Every kernel works on plain arrays so it can be called from numba or numpy code.
BVH arrays follow the layout produced by :func:`avatarlight.raster.build_bvh`:
``lo``/``hi`` node bounds, ``left``/``right`` children (-1 on leaves),
``start``/``count`` ranges into the ``prims`` permutation (``count > 0`` on leaves).
"""

import numpy as np
from numba import config, njit, prange

# prefer OpenMP; the bundled TBB is often too old and only produces a warning
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

INF = np.inf
_STACK = 128


@njit(cache=True, inline="always")
def _ray_triangle(ox, oy, oz, dx, dy, dz, verts, a, b, c):
    """Moller-Trumbore. Returns (t, u, v) with t = -1 on a miss."""
    ax, ay, az = verts[a, 0], verts[a, 1], verts[a, 2]
    e1x, e1y, e1z = verts[b, 0] - ax, verts[b, 1] - ay, verts[b, 2] - az
    e2x, e2y, e2z = verts[c, 0] - ax, verts[c, 1] - ay, verts[c, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    # scale-aware parallel/degenerate rejection
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x
    nn = nx * nx + ny * ny + nz * nz
    dn = dx * dx + dy * dy + dz * dz
    # |det| <= 1e-12 |n| |d|, squared
    if nn == 0.0 or det * det <= 1e-24 * nn * dn:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@njit(cache=True, inline="always")
def _slab(lo, hi, n, ox, oy, oz, ix, iy, iz, tmin, tmax):
    t1 = (lo[n, 0] - ox) * ix
    t2 = (hi[n, 0] - ox) * ix
    t0 = min(t1, t2)
    tf = max(t1, t2)
    t1 = (lo[n, 1] - oy) * iy
    t2 = (hi[n, 1] - oy) * iy
    t0 = max(t0, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t1 = (lo[n, 2] - oz) * iz
    t2 = (hi[n, 2] - oz) * iz
    t0 = max(t0, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t0 = max(t0, tmin)
    tf = min(tf, tmax)
    if t0 <= tf:
        return t0
    return INF


@njit(cache=True, inline="always")
def _inv(d):
    if d == 0.0:
        return 1e300
    return 1.0 / d


@njit(cache=True)
def closest_hit_one(ox, oy, oz, dx, dy, dz, tmin, tmax,
                    lo, hi, left, right, start, count, prims, verts, faces):
    ix, iy, iz = _inv(dx), _inv(dy), _inv(dz)
    stack = np.empty(_STACK, np.int64)
    stack[0] = 0
    sp = 1
    best_t = tmax
    best_f = -1
    bu = 0.0
    bv = 0.0
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if _slab(lo, hi, n, ox, oy, oz, ix, iy, iz, tmin, best_t) == INF:
            continue
        if count[n] > 0:
            for k in range(start[n], start[n] + count[n]):
                f = prims[k]
                t, u, v = _ray_triangle(ox, oy, oz, dx, dy, dz, verts,
                                        faces[f, 0], faces[f, 1], faces[f, 2])
                if t > tmin and (t < best_t or (t == best_t and f < best_f)):
                    best_t = t
                    best_f = f
                    bu = u
                    bv = v
        else:
            l = left[n]
            r = right[n]
            tl = _slab(lo, hi, l, ox, oy, oz, ix, iy, iz, tmin, best_t)
            tr = _slab(lo, hi, r, ox, oy, oz, ix, iy, iz, tmin, best_t)
            if tl <= tr:
                if tr != INF:
                    stack[sp] = r
                    sp += 1
                if tl != INF:
                    stack[sp] = l
                    sp += 1
            else:
                if tl != INF:
                    stack[sp] = l
                    sp += 1
                stack[sp] = r
                sp += 1
    return best_t, best_f, bu, bv


@njit(cache=True, parallel=True)
def closest_hit_batch(origins, dirs, tmin, tmax,
                      lo, hi, left, right, start, count, prims, verts, faces):
    m = origins.shape[0]
    t_out = np.full(m, np.inf)
    f_out = np.full(m, -1, np.int64)
    bary = np.zeros((m, 3))
    for i in prange(m):
        t, f, u, v = closest_hit_one(origins[i, 0], origins[i, 1], origins[i, 2],
                                     dirs[i, 0], dirs[i, 1], dirs[i, 2], tmin, tmax[i],
                                     lo, hi, left, right, start, count, prims, verts, faces)
        if f >= 0:
            t_out[i] = t
            f_out[i] = f
            bary[i, 0] = 1.0 - u - v
            bary[i, 1] = u
            bary[i, 2] = v
    return t_out, f_out, bary


@njit(cache=True)
def any_hit_one(ox, oy, oz, dx, dy, dz, tmin, tmax,
                lo, hi, left, right, start, count, prims, verts, faces):
    return _any_hit(ox, oy, oz, dx, dy, dz, tmin, tmax,
                    lo, hi, left, right, start, count, prims, verts, faces, np.empty(_STACK, np.int64))


@njit(cache=True, inline="always")
def _any_hit(ox, oy, oz, dx, dy, dz, tmin, tmax,
             lo, hi, left, right, start, count, prims, verts, faces, stack):
    ix, iy, iz = _inv(dx), _inv(dy), _inv(dz)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if _slab(lo, hi, n, ox, oy, oz, ix, iy, iz, tmin, tmax) == INF:
            continue
        if count[n] > 0:
            for k in range(start[n], start[n] + count[n]):
                f = prims[k]
                t, u, v = _ray_triangle(ox, oy, oz, dx, dy, dz, verts,
                                        faces[f, 0], faces[f, 1], faces[f, 2])
                if t > tmin and t < tmax:
                    return True
        else:
            stack[sp] = left[n]
            stack[sp + 1] = right[n]
            sp += 2
    return False


@njit(cache=True, parallel=True)
def any_hit_batch(origins, dirs, tmin, tmax,
                  lo, hi, left, right, start, count, prims, verts, faces):
    m = origins.shape[0]
    out = np.zeros(m, np.bool_)
    for i in prange(m):
        out[i] = any_hit_one(origins[i, 0], origins[i, 1], origins[i, 2],
                             dirs[i, 0], dirs[i, 1], dirs[i, 2], tmin, tmax[i],
                             lo, hi, left, right, start, count, prims, verts, faces)
    return out


@njit(cache=True, parallel=True)
def visibility_batch(points, normals, probe_dirs, eps,
                     lo, hi, left, right, start, count, prims, verts, faces):
    """Binary per-probe visibility: back-facing or occluded probes get 0."""
    m = points.shape[0]
    k = probe_dirs.shape[0]
    vis = np.zeros((m, k), np.uint8)
    for i in prange(m):
        stack = np.empty(_STACK, np.int64)
        nx, ny, nz = normals[i, 0], normals[i, 1], normals[i, 2]
        ox = points[i, 0] + eps * nx
        oy = points[i, 1] + eps * ny
        oz = points[i, 2] + eps * nz
        for j in range(k):
            dx, dy, dz = probe_dirs[j, 0], probe_dirs[j, 1], probe_dirs[j, 2]
            if dx * nx + dy * ny + dz * nz <= 0.0:
                continue
            if not _any_hit(ox, oy, oz, dx, dy, dz, 0.0, np.inf,
                            lo, hi, left, right, start, count, prims, verts, faces, stack):
                vis[i, j] = 1
    return vis


@njit(cache=True, inline="always")
def _closest_on_triangle(px, py, pz, verts, a, b, c):
    """Closest point on triangle abc to p, as barycentrics (Ericson's region test)."""
    ax, ay, az = verts[a, 0], verts[a, 1], verts[a, 2]
    abx, aby, abz = verts[b, 0] - ax, verts[b, 1] - ay, verts[b, 2] - az
    acx, acy, acz = verts[c, 0] - ax, verts[c, 1] - ay, verts[c, 2] - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - verts[b, 0], py - verts[b, 1], pz - verts[b, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = px - verts[c, 0], py - verts[c, 1], pz - verts[c, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    s = va + vb + vc
    if s == 0.0:
        return 1.0, 0.0, 0.0
    v = vb / s
    w = vc / s
    return 1.0 - v - w, v, w


@njit(cache=True, inline="always")
def _box_dist2(lo, hi, n, px, py, pz):
    d = 0.0
    if px < lo[n, 0]:
        d += (lo[n, 0] - px) ** 2
    elif px > hi[n, 0]:
        d += (px - hi[n, 0]) ** 2
    if py < lo[n, 1]:
        d += (lo[n, 1] - py) ** 2
    elif py > hi[n, 1]:
        d += (py - hi[n, 1]) ** 2
    if pz < lo[n, 2]:
        d += (lo[n, 2] - pz) ** 2
    elif pz > hi[n, 2]:
        d += (pz - hi[n, 2]) ** 2
    return d


@njit(cache=True)
def closest_point_one(px, py, pz, lo, hi, left, right, start, count, prims, verts, faces):
    stack = np.empty(_STACK, np.int64)
    stack[0] = 0
    sp = 1
    best = np.inf
    best_f = -1
    b0 = 1.0
    b1 = 0.0
    b2 = 0.0
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if _box_dist2(lo, hi, n, px, py, pz) > best:
            continue
        if count[n] > 0:
            for k in range(start[n], start[n] + count[n]):
                f = prims[k]
                a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
                w0, w1, w2 = _closest_on_triangle(px, py, pz, verts, a, b, c)
                qx = w0 * verts[a, 0] + w1 * verts[b, 0] + w2 * verts[c, 0]
                qy = w0 * verts[a, 1] + w1 * verts[b, 1] + w2 * verts[c, 1]
                qz = w0 * verts[a, 2] + w1 * verts[b, 2] + w2 * verts[c, 2]
                d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
                if d2 < best or (d2 == best and f < best_f):
                    best = d2
                    best_f = f
                    b0, b1, b2 = w0, w1, w2
        else:
            l = left[n]
            r = right[n]
            dl = _box_dist2(lo, hi, l, px, py, pz)
            dr = _box_dist2(lo, hi, r, px, py, pz)
            if dl <= dr:
                stack[sp] = r
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = r
            sp += 2
    return best_f, b0, b1, b2


@njit(cache=True, parallel=True)
def closest_point_batch(points, lo, hi, left, right, start, count, prims, verts, faces):
    m = points.shape[0]
    f_out = np.empty(m, np.int64)
    bary = np.empty((m, 3))
    for i in prange(m):
        f, w0, w1, w2 = closest_point_one(points[i, 0], points[i, 1], points[i, 2],
                                          lo, hi, left, right, start, count, prims,
                                          verts, faces)
        f_out[i] = f
        bary[i, 0] = w0
        bary[i, 1] = w1
        bary[i, 2] = w2
    return f_out, bary


@njit(cache=True)
def rasterize_kernel(cam_verts, faces, fx, fy, cx, cy, width, height, znear):
    """Z-buffered rasterization of front faces in camera space (+z forward).

    Triangles fully in front of ``znear`` use screen-space edge functions with
    perspective-correct barycentrics; triangles crossing the near plane fall
    back to per-pixel ray tests so no clipping is needed.
    """
    depth = np.full((height, width), np.inf)
    fid = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    nf = faces.shape[0]
    for f in range(nf):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = cam_verts[a, 2], cam_verts[b, 2], cam_verts[c, 2]
        if z0 <= znear and z1 <= znear and z2 <= znear:
            continue
        e1x = cam_verts[b, 0] - cam_verts[a, 0]
        e1y = cam_verts[b, 1] - cam_verts[a, 1]
        e1z = z1 - z0
        e2x = cam_verts[c, 0] - cam_verts[a, 0]
        e2y = cam_verts[c, 1] - cam_verts[a, 1]
        e2z = z2 - z0
        nx = e1y * e2z - e1z * e2y
        ny = e1z * e2x - e1x * e2z
        nz = e1x * e2y - e1y * e2x
        # camera sits at the origin; front faces point toward it
        if nx * cam_verts[a, 0] + ny * cam_verts[a, 1] + nz * z0 >= 0.0:
            continue
        if z0 > znear and z1 > znear and z2 > znear:
            sx0 = fx * cam_verts[a, 0] / z0 + cx
            sy0 = fy * cam_verts[a, 1] / z0 + cy
            sx1 = fx * cam_verts[b, 0] / z1 + cx
            sy1 = fy * cam_verts[b, 1] / z1 + cy
            sx2 = fx * cam_verts[c, 0] / z2 + cx
            sy2 = fy * cam_verts[c, 1] / z2 + cy
            area = (sx1 - sx0) * (sy2 - sy0) - (sx2 - sx0) * (sy1 - sy0)
            if area == 0.0:
                continue
            xmin = max(int(np.ceil(min(sx0, sx1, sx2) - 0.5)), 0)
            xmax = min(int(np.floor(max(sx0, sx1, sx2) - 0.5)), width - 1)
            ymin = max(int(np.ceil(min(sy0, sy1, sy2) - 0.5)), 0)
            ymax = min(int(np.floor(max(sy0, sy1, sy2) - 0.5)), height - 1)
            inv_area = 1.0 / area
            for j in range(ymin, ymax + 1):
                py = j + 0.5
                for i in range(xmin, xmax + 1):
                    px = i + 0.5
                    l0 = ((sx1 - px) * (sy2 - py) - (sx2 - px) * (sy1 - py)) * inv_area
                    l1 = ((sx2 - px) * (sy0 - py) - (sx0 - px) * (sy2 - py)) * inv_area
                    l2 = 1.0 - l0 - l1
                    if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                        continue
                    q0 = l0 / z0
                    q1 = l1 / z1
                    q2 = l2 / z2
                    qs = q0 + q1 + q2
                    z = 1.0 / qs
                    if z < depth[j, i]:
                        depth[j, i] = z
                        fid[j, i] = f
                        bary[j, i, 0] = q0 * z
                        bary[j, i, 1] = q1 * z
                        bary[j, i, 2] = q2 * z
        else:
            for j in range(height):
                ry = (j + 0.5 - cy) / fy
                for i in range(width):
                    rx = (i + 0.5 - cx) / fx
                    t, u, v = _ray_triangle(0.0, 0.0, 0.0, rx, ry, 1.0, cam_verts, a, b, c)
                    if t > znear and t < depth[j, i]:
                        depth[j, i] = t
                        fid[j, i] = f
                        bary[j, i, 0] = 1.0 - u - v
                        bary[j, i, 1] = u
                        bary[j, i, 2] = v
    return fid, bary, depth
