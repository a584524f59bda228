"""Pose-conditioned 2D neural maps over the texel domain.

A map is ``head(trunk(concat(encode(uv), embed(pose))))`` with hand-written
reverse-mode gradients. All trainable scalars of a map live in one flat float64
vector (``NeuralMap.params``) with a twin gradient buffer; layer weights are
views into it. Parameters are kept on the float32 grid so checkpoints round-trip
bit-exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.special import expit

logger = logging.getLogger(__name__)

KINDS = ("geo", "dtx", "alb", "rgh")

ARCHITECTURES = {
    # layers = hidden fully connected layers before the output head
    "geo": {"layers": 3, "activation": "softplus", "residual": True, "out_dim": 1},
    "dtx": {"layers": 5, "activation": "relu", "residual": False, "out_dim": 3},
    "alb": {"layers": 5, "activation": "softplus", "residual": False, "out_dim": 3},
    "rgh": {"layers": 5, "activation": "softplus", "residual": False, "out_dim": 1},
}

HASH_PRIMES = (np.uint64(2654435761), np.uint64(805459861))


@njit(cache=True, parallel=True)
def _dense(x, w_t, b):
    # fixed k-order accumulation per output, so a row's value does not depend on batch size or threads
    n, k = x.shape
    m = w_t.shape[1]
    out = np.empty((n, m))
    for i in prange(n):
        o = out[i]
        for j in range(m):
            o[j] = b[j]
        for p in range(k):
            xv = x[i, p]
            wr = w_t[p]
            for j in range(m):
                o[j] += xv * wr[j]
    return out


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _dense(np.ascontiguousarray(x), np.ascontiguousarray(w.T), b)


def softplus(z):
    # same value as logaddexp(0, z), about 3x faster
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def snap_f32(a: np.ndarray) -> None:
    """Round in place to the nearest float32 value."""
    np.copyto(a, a.astype(np.float32))


class HashGrid2D:
    """Multiresolution hash encoding of uv in [0, 1]^2 with bilinear interpolation."""

    kind = "hash"

    def __init__(self, n_levels: int = 8, base_resolution: int = 16, max_resolution: int = 512,
                 log2_table_size: int = 14, n_features: int = 2):
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 2 ** log2_table_size
        if n_levels > 1:
            growth = (max_resolution / base_resolution) ** (1.0 / (n_levels - 1))
        else:
            growth = 1.0
        self.resolutions = [int(round(base_resolution * growth ** l)) for l in range(n_levels)]
        self.options = dict(n_levels=n_levels, base_resolution=base_resolution,
                            max_resolution=max_resolution, log2_table_size=log2_table_size,
                            n_features=n_features)
        self.n_params = n_levels * self.table_size * n_features
        self.out_dim = n_levels * n_features
        self.clamp_warnings = 0
        self.table = None
        self.grad = None

    def bind(self, params: np.ndarray, grads: np.ndarray) -> None:
        shape = (self.n_levels, self.table_size, self.n_features)
        self.table = params.reshape(shape)
        self.grad = grads.reshape(shape)

    def init(self, rng: np.random.Generator) -> None:
        self.table[...] = rng.uniform(-1e-4, 1e-4, size=self.table.shape)

    def level_index(self, level: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        side = self.resolutions[level] + 1
        if side * side <= self.table_size:
            return iy * side + ix
        h = (ix.astype(np.uint64) * HASH_PRIMES[0]) ^ (iy.astype(np.uint64) * HASH_PRIMES[1])
        return (h % np.uint64(self.table_size)).astype(np.int64)

    def _clamp(self, uv):
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        outside = (uv < 0.0) | (uv > 1.0)
        if outside.any():
            self.clamp_warnings += int(outside.any(axis=1).sum())
            logger.debug("clamped %d uv queries into [0, 1]^2", int(outside.any(axis=1).sum()))
            uv = np.clip(uv, 0.0, 1.0)
        return uv

    def forward(self, uv):
        uv = self._clamp(uv)
        n = len(uv)
        F = self.n_features
        feats = np.empty((n, self.out_dim))
        idx = np.empty((self.n_levels, 4, n), dtype=np.int64)
        wts = np.empty((self.n_levels, 4, n))
        for l, res in enumerate(self.resolutions):
            x = uv * res
            i0 = np.minimum(np.floor(x).astype(np.int64), res - 1)
            f = x - i0
            fx, fy = f[:, 0], f[:, 1]
            ix, iy = i0[:, 0], i0[:, 1]
            idx[l, 0] = self.level_index(l, ix, iy)
            idx[l, 1] = self.level_index(l, ix + 1, iy)
            idx[l, 2] = self.level_index(l, ix, iy + 1)
            idx[l, 3] = self.level_index(l, ix + 1, iy + 1)
            wts[l, 0] = (1 - fx) * (1 - fy)
            wts[l, 1] = fx * (1 - fy)
            wts[l, 2] = (1 - fx) * fy
            wts[l, 3] = fx * fy
            t = self.table[l]
            feats[:, l * F:(l + 1) * F] = (wts[l, 0, :, None] * t[idx[l, 0]] + wts[l, 1, :, None] * t[idx[l, 1]]
                                           + wts[l, 2, :, None] * t[idx[l, 2]] + wts[l, 3, :, None] * t[idx[l, 3]])
        return feats, (idx, wts)

    def backward(self, d_feats: np.ndarray, cache) -> None:
        idx, wts = cache
        F, T = self.n_features, self.table_size
        for l in range(self.n_levels):
            flat_idx = idx[l].ravel()
            for f in range(F):
                w = (wts[l] * d_feats[:, l * F + f]).ravel()
                self.grad[l, :, f] += np.bincount(flat_idx, weights=w, minlength=T)


class PositionalEncoding2D:
    """Dense sinusoidal encoding [uv, sin(2^k pi uv), cos(2^k pi uv)]; no parameters."""

    kind = "posenc"

    def __init__(self, n_frequencies: int = 10):
        self.n_frequencies = n_frequencies
        self.options = dict(n_frequencies=n_frequencies)
        self.n_params = 0
        self.out_dim = 2 + 4 * n_frequencies
        self.clamp_warnings = 0

    def bind(self, params, grads) -> None:
        pass

    def init(self, rng) -> None:
        pass

    def forward(self, uv):
        uv = np.clip(np.asarray(uv, dtype=np.float64).reshape(-1, 2), 0.0, 1.0)
        freqs = np.pi * 2.0 ** np.arange(self.n_frequencies)
        arg = (uv[:, :, None] * freqs).reshape(len(uv), -1)
        return np.concatenate([uv, np.sin(arg), np.cos(arg)], axis=1), None

    def backward(self, d_feats, cache) -> None:
        pass


ENCODERS = {"hash": HashGrid2D, "posenc": PositionalEncoding2D}


def pose_input(pose, n: int, pose_dim: int) -> np.ndarray:
    """Normalize a pose argument to an (n, pose_dim) or (pose_dim,) array."""
    if hasattr(pose, "features"):
        pose = pose.features
    if pose is None:
        pose = np.zeros(pose_dim)
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-1] != pose_dim:
        raise ValueError(f"pose input has {pose.shape[-1]} features, map expects {pose_dim}")
    if pose.ndim == 2 and len(pose) != n:
        raise ValueError("per-sample pose array must match the uv batch length")
    return pose


class NeuralMap:
    """One of the four texel-space maps (geo, dtx, alb, rgh).

    Output ranges: geo in (-cap, cap) via scaled tanh, dtx/alb in (0, 1) via
    sigmoid, rgh in (r_min, 1) via a shifted sigmoid.
    """

    def __init__(self, kind: str, pose_dim: int, *, width: int = 64, pose_embed_dim: int = 8,
                 encoder: str = "hash", encoder_options: dict | None = None,
                 offset_cap: float = 0.10, r_min: float = 0.04, seed: int = 0,
                 layers: int | None = None, zero_head: bool | None = None):
        if kind not in ARCHITECTURES:
            raise ValueError(f"unknown map kind {kind!r}")
        arch = ARCHITECTURES[kind]
        self.kind = kind
        self.pose_dim = pose_dim
        self.width = width
        self.n_layers = arch["layers"] if layers is None else layers
        self.activation = arch["activation"]
        self.residual = arch["residual"]
        self.out_dim = arch["out_dim"]
        self.offset_cap = offset_cap
        self.r_min = r_min
        # the offset field starts at exactly zero, i.e. on the body surface
        self.zero_head = (kind == "geo") if zero_head is None else zero_head
        self.encoder = ENCODERS[encoder](**(encoder_options or {}))
        self.config = dict(kind=kind, pose_dim=pose_dim, width=width, pose_embed_dim=pose_embed_dim,
                           encoder=encoder, encoder_options=self.encoder.options,
                           offset_cap=offset_cap, r_min=r_min, seed=seed, layers=self.n_layers,
                           zero_head=self.zero_head)

        layout = [("encoder", (self.encoder.n_params,), "hash")]
        layout += [("pose_w", (pose_embed_dim, pose_dim), "dense"), ("pose_b", (pose_embed_dim,), "dense")]
        fan_in = self.encoder.out_dim + pose_embed_dim
        for i in range(self.n_layers):
            layout += [(f"w{i}", (width, fan_in), "dense"), (f"b{i}", (width,), "dense")]
            fan_in = width
        if self.residual:
            layout += [("res_w", (width, width), "dense"), ("res_b", (width,), "dense")]
        layout += [("head_w", (self.out_dim, width), "dense"), ("head_b", (self.out_dim,), "dense")]

        total = sum(int(np.prod(s)) for _, s, _ in layout)
        self.params = np.zeros(total)
        self.grads = np.zeros(total)
        self.slices = {}
        self._p = {}
        self._g = {}
        off = 0
        for name, shape, group in layout:
            size = int(np.prod(shape))
            self.slices[name] = (slice(off, off + size), group)
            self._p[name] = self.params[off:off + size].reshape(shape)
            self._g[name] = self.grads[off:off + size].reshape(shape)
            off += size
        self.encoder.bind(self.params[self.slices["encoder"][0]], self.grads[self.slices["encoder"][0]])
        self._cache = None
        self.init(seed)

    # --- parameters -------------------------------------------------------------
    def init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        self.params[:] = 0.0
        self.encoder.init(rng)
        for name, (sl, group) in self.slices.items():
            w = self._p[name]
            if group != "dense" or w.ndim != 2:
                continue
            if name == "head_w" and self.zero_head:
                continue
            fan_in = max(w.shape[1], 1)
            w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
        snap_f32(self.params)
        self.grads[:] = 0.0

    @property
    def n_params(self) -> int:
        return len(self.params)

    def group_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(len(self.params), dtype=bool)
        for sl, g in self.slices.values():
            if g == group:
                mask[sl] = True
        return mask

    def param_view(self, name: str) -> np.ndarray:
        return self._p[name]

    def grad_view(self, name: str) -> np.ndarray:
        return self._g[name]

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def copy(self) -> "NeuralMap":
        other = NeuralMap(**{k: v for k, v in self.config.items() if k != "kind"}, kind=self.kind)
        other.params[:] = self.params
        return other

    # --- forward / backward -----------------------------------------------------
    def _act(self, z):
        return softplus(z) if self.activation == "softplus" else np.maximum(z, 0.0)

    def _act_grad(self, h):
        # derivative expressed through the activation output: sigmoid(z) = 1 - exp(-softplus(z))
        return -np.expm1(-h) if self.activation == "softplus" else (h > 0.0).astype(np.float64)

    def _bounds(self):
        if self.kind == "geo":
            return -self.offset_cap, self.offset_cap
        return (self.r_min, 1.0) if self.kind == "rgh" else (0.0, 1.0)

    def _transform(self, o):
        if self.kind == "geo":
            out = self.offset_cap * np.tanh(o)
        else:
            out = expit(o)
            if self.kind == "rgh":
                out = self.r_min + (1.0 - self.r_min) * out
        # tanh/sigmoid round onto their asymptotes for large |o|; keep the range open
        lo, hi = self._bounds()
        return np.clip(out, np.nextafter(lo, hi), np.nextafter(hi, lo))

    def _transform_grad(self, o, out):
        if self.kind == "geo":
            t = out / self.offset_cap
            return self.offset_cap * (1.0 - t * t)
        s = expit(o)
        g = s * (1.0 - s)
        return (1.0 - self.r_min) * g if self.kind == "rgh" else g

    def forward(self, uv, pose):
        """Evaluate on a batch; returns ``(out (N, out_dim), cache)``."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        n = len(uv)
        pf = pose_input(pose, n, self.pose_dim)
        enc, enc_cache = self.encoder.forward(uv)
        if pf.ndim == 1:
            emb = np.broadcast_to(dense(pf[None], self._p["pose_w"], self._p["pose_b"]), (n, self._p["pose_b"].size))
        else:
            emb = dense(pf, self._p["pose_w"], self._p["pose_b"])
        h = np.concatenate([enc, emb], axis=1)
        inputs = [h]
        for i in range(self.n_layers):
            z = dense(h, self._p[f"w{i}"], self._p[f"b{i}"])
            h = self._act(z)
            inputs.append(h)
        zr = None
        if self.residual:
            zr = dense(h, self._p["res_w"], self._p["res_b"])
            h = h + softplus(zr)
        o = dense(h, self._p["head_w"], self._p["head_b"])
        out = self._transform(o)
        cache = dict(n=n, pf=pf, enc_cache=enc_cache, inputs=inputs, zr=zr, h_out=h, o=o, out=out,
                     enc_dim=enc.shape[1])
        return out, cache

    def backward(self, d_out, cache=None) -> None:
        """Accumulate dLoss/dparams into ``grads`` given dLoss/doutput for a batch."""
        if cache is None:
            cache = self._cache
        if cache is None:
            raise RuntimeError("backward called without a retained forward pass")
        d_out = np.asarray(d_out, dtype=np.float64).reshape(cache["n"], self.out_dim)
        g = self._g
        do = d_out * self._transform_grad(cache["o"], cache["out"])
        h = cache["h_out"]
        g["head_w"] += do.T @ h
        g["head_b"] += do.sum(axis=0)
        dh = do @ self._p["head_w"]
        if self.residual:
            hin = cache["inputs"][-1]
            dzr = dh * expit(cache["zr"])
            g["res_w"] += dzr.T @ hin
            g["res_b"] += dzr.sum(axis=0)
            dh = dh + dzr @ self._p["res_w"]
        for i in reversed(range(self.n_layers)):
            dz = dh * self._act_grad(cache["inputs"][i + 1])
            g[f"w{i}"] += dz.T @ cache["inputs"][i]
            g[f"b{i}"] += dz.sum(axis=0)
            dh = dz @ self._p[f"w{i}"]
        ed = cache["enc_dim"]
        d_emb = dh[:, ed:]
        pf = cache["pf"]
        if pf.ndim == 1:
            g["pose_w"] += np.outer(d_emb.sum(axis=0), pf)
        else:
            g["pose_w"] += d_emb.T @ pf
        g["pose_b"] += d_emb.sum(axis=0)
        self.encoder.backward(dh[:, :ed], cache["enc_cache"])

    def query_batch(self, uvs, pose, retain: bool = True) -> np.ndarray:
        out, cache = self.forward(uvs, pose)
        self._cache = cache if retain else None
        return out[:, 0].copy() if self.out_dim == 1 else out

    def query(self, uv, pose):
        out, _ = self.forward(np.asarray(uv, dtype=np.float64).reshape(1, 2), pose)
        return float(out[0, 0]) if self.out_dim == 1 else out[0].copy()


class ConstantMap:
    """Map returning the same value everywhere (forward only)."""

    def __init__(self, value, out_dim: int = 1):
        self.value = np.broadcast_to(np.asarray(value, dtype=np.float64), (out_dim,)).copy()
        self.out_dim = out_dim

    def query_batch(self, uvs, pose=None, retain: bool = False):
        n = len(np.asarray(uvs).reshape(-1, 2))
        out = np.tile(self.value, (n, 1))
        return out[:, 0] if self.out_dim == 1 else out

    def query(self, uv, pose=None):
        return float(self.value[0]) if self.out_dim == 1 else self.value.copy()


class TextureMap:
    """Baked texture sampled bilinearly at texel centers, clamp-to-edge (forward only).

    ``texture`` is (R_v, R_u) or (R_v, R_u, C); row index follows v, column follows u.
    """

    def __init__(self, texture: np.ndarray):
        tex = np.asarray(texture, dtype=np.float64)
        self.texture = tex if tex.ndim == 3 else tex[..., None]
        self.out_dim = self.texture.shape[2]

    def query_batch(self, uvs, pose=None, retain: bool = False):
        uv = np.clip(np.asarray(uvs, dtype=np.float64).reshape(-1, 2), 0.0, 1.0)
        rv, ru = self.texture.shape[:2]
        x = uv[:, 0] * ru - 0.5
        y = uv[:, 1] * rv - 0.5
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        x0c, x1c = np.clip(x0, 0, ru - 1), np.clip(x0 + 1, 0, ru - 1)
        y0c, y1c = np.clip(y0, 0, rv - 1), np.clip(y0 + 1, 0, rv - 1)
        t = self.texture
        out = ((1 - fx) * (1 - fy) * t[y0c, x0c] + fx * (1 - fy) * t[y0c, x1c]
               + (1 - fx) * fy * t[y1c, x0c] + fx * fy * t[y1c, x1c])
        return out[:, 0] if self.out_dim == 1 else out

    def query(self, uv, pose=None):
        out = self.query_batch(np.asarray(uv).reshape(1, 2))
        return float(out[0]) if self.out_dim == 1 else out[0]


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """In-place Adam update with bias correction; zeroes ``grads`` afterwards.

    ``lr`` may be a scalar or a per-parameter array. Non-finite gradients skip
    the step (counted in ``state.skipped``).
    """
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        logger.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        grads[:] = 0.0
        return params
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    grads[:] = 0.0
    return params


class MapOptimizer:
    """Adam over one NeuralMap with per-group learning rates (hash table vs dense layers)."""

    def __init__(self, nmap: NeuralMap, lr_hash: float, lr_dense: float):
        self.map = nmap
        self.lr = np.where(nmap.group_mask("hash"), lr_hash, lr_dense)
        self.state = AdamState.zeros(nmap.n_params)

    def step(self) -> None:
        adam_step(self.map.params, self.map.grads, self.state, self.lr)
        snap_f32(self.map.params)
