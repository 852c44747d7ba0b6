"""Gaussian primitives, voxel grids and Gaussian-to-voxel splatting."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .numerics import check_finite, layer_norm, layer_norm_backward, sigmoid, silu, silu_grad

QUAT_TOL = 1e-6
DEFAULT_CUTOFF = 3.0
EMPTY_CLASS = 0


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------

def quat_to_rotmat(q):
    """Rotation matrices from unit quaternions in w-x-y-z order, shape (..., 3, 3)."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(dR, q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    G = dR
    dq = np.empty_like(q)
    dq[..., 0] = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
                      - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    dq[..., 1] = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0]
                      - 2 * x * G[..., 1, 1] - w * G[..., 1, 2] + z * G[..., 2, 0]
                      + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dq[..., 2] = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2]
                      + x * G[..., 1, 0] + z * G[..., 1, 2] - w * G[..., 2, 0]
                      + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dq[..., 3] = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2]
                      + w * G[..., 1, 0] - 2 * z * G[..., 1, 1] + y * G[..., 1, 2]
                      + x * G[..., 2, 0] + y * G[..., 2, 1])
    return dq


def normalize_quat(q):
    q = np.asarray(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero quaternion")
    return q / n


def normalize_quat_backward(dqhat, q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qhat = q / n
    return (dqhat - qhat * np.sum(qhat * dqhat, axis=-1, keepdims=True)) / n


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def covariance(r, s):
    """``R S S^T R^T`` for a unit quaternion ``r`` and positive scales ``s``."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if abs(np.linalg.norm(r) - 1.0) > QUAT_TOL:
        raise ValueError(f"rotation quaternion is not unit length: |r| = {np.linalg.norm(r)}")
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    R = quat_to_rotmat(r)
    M = R * s[None, :]
    return M @ M.T


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

@dataclass
class Gaussian:
    """One primitive in natural (constrained) coordinates."""

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    logits: np.ndarray
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))


ARRAY_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "logits", "features")


@dataclass
class GaussianSet:
    """Primitives stored in unconstrained coordinates.

    ``log_scales`` and ``opacity_logits`` keep scale positive and opacity in
    [0, 1] for any real value; ``quats`` are renormalised on every write.
    """

    means: np.ndarray           # (N, 3)
    quats: np.ndarray           # (N, 4) w-x-y-z
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    logits: np.ndarray          # (N, C)
    features: np.ndarray        # (N, F)

    def __post_init__(self):
        self.quats = normalize_quat(self.quats)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(),
            rotation=self.quats[i].copy(),
            scale=np.exp(self.log_scales[i]),
            opacity=float(sigmoid(self.opacity_logits[i])),
            logits=self.logits[i].copy(),
            feature=self.features[i].copy(),
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(a.copy() for a in self.arrays()))

    def arrays(self):
        return (self.means, self.quats, self.log_scales, self.opacity_logits,
                self.logits, self.features)

    def as_dict(self):
        return dict(zip(ARRAY_FIELDS, self.arrays()))

    def take(self, index) -> "GaussianSet":
        return GaussianSet(*(a[index] for a in self.arrays()))

    def with_features(self, features) -> "GaussianSet":
        out = replace(self)
        out.features = features
        return out

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianSet":
        gaussians = list(gaussians)
        op = np.clip([g.opacity for g in gaussians], 1e-12, 1 - 1e-12)
        return cls(
            means=np.array([g.mean for g in gaussians], dtype=float),
            quats=np.array([g.rotation for g in gaussians], dtype=float),
            log_scales=np.log(np.array([g.scale for g in gaussians], dtype=float)),
            opacity_logits=np.log(op) - np.log1p(-op),
            logits=np.array([g.logits for g in gaussians], dtype=float),
            features=np.array([g.feature for g in gaussians], dtype=float),
        )

    @classmethod
    def concatenate(cls, parts) -> "GaussianSet":
        parts = list(parts)
        return cls(*(np.concatenate(col, axis=0) for col in zip(*(p.arrays() for p in parts))))


def evaluate_gaussian(x, g: Gaussian):
    """Semantic contribution of one Gaussian at world point ``x``."""
    d = np.asarray(x, dtype=float) - np.asarray(g.mean, dtype=float)
    sigma = covariance(g.rotation, g.scale)
    maha = float(d @ np.linalg.solve(sigma, d))
    return g.opacity * np.exp(-0.5 * maha) * np.asarray(g.logits, dtype=float)


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    origin: tuple
    voxel_size: float
    shape: tuple  # (X, Y, Z)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad grid shape {self.shape}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def num_voxels(self) -> int:
        X, Y, Z = self.shape
        return X * Y * Z

    @property
    def lower(self):
        return np.asarray(self.origin)

    @property
    def upper(self):
        return np.asarray(self.origin) + self.voxel_size * np.asarray(self.shape)

    def centers(self):
        """World coordinates of all voxel centres, row-major (X, Y, Z), shape (V, 3)."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.voxel_size
                for a, n in enumerate(self.shape)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def flat_index(self, ijk):
        ijk = np.asarray(ijk)
        X, Y, Z = self.shape
        return (ijk[..., 0] * Y + ijk[..., 1]) * Z + ijk[..., 2]


@dataclass
class VoxelGrid:
    spec: GridSpec
    logits: np.ndarray                 # (X, Y, Z, C)
    labels: np.ndarray | None = None   # (X, Y, Z)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]

    def with_labels(self) -> "VoxelGrid":
        return VoxelGrid(self.spec, self.logits, argmax_labels(self.logits))


def argmax_labels(logits):
    """Per-voxel index of the largest logit; ties go to the lowest class."""
    logits = np.asarray(logits)
    if logits.shape[-1] < 1:
        raise ValueError("need at least one class")
    return np.argmax(logits, axis=-1).astype(np.int64)


# --------------------------------------------------------------------------
# splatting
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _box_bounds(means, radius, org, vs, dims):
    n = means.shape[0]
    lo = np.empty((n, 3), np.int64)
    hi = np.empty((n, 3), np.int64)
    for i in range(n):
        for ax in range(3):
            l = int(np.ceil((means[i, ax] - radius[i] - org[ax]) / vs - 0.5))
            h = int(np.floor((means[i, ax] + radius[i] - org[ax]) / vs - 0.5))
            lo[i, ax] = min(max(l, 0), dims[ax] - 1)
            hi[i, ax] = min(max(h, -1), dims[ax] - 1)
    return lo, hi


@numba.njit(cache=True)
def _pairs_kernel(means, radius, org, vs, dims, lo, hi, fill, gid, vid):
    """Count (``fill`` False) or write the candidate pairs; returns the count."""
    k = 0
    Y, Z = dims[1], dims[2]
    for i in range(means.shape[0]):
        r2 = radius[i] * radius[i]
        for ix in range(lo[i, 0], hi[i, 0] + 1):
            dx = org[0] + (ix + 0.5) * vs - means[i, 0]
            for iy in range(lo[i, 1], hi[i, 1] + 1):
                dy = org[1] + (iy + 0.5) * vs - means[i, 1]
                for iz in range(lo[i, 2], hi[i, 2] + 1):
                    dz = org[2] + (iz + 0.5) * vs - means[i, 2]
                    if dx * dx + dy * dy + dz * dz <= r2:
                        if fill:
                            gid[k] = i
                            vid[k] = (ix * Y + iy) * Z + iz
                        k += 1
    return k


def splat_pairs(means, log_scales, spec: GridSpec, cutoff_k: float = DEFAULT_CUTOFF):
    """(gaussian index, flat voxel index) pairs with the voxel centre inside
    radius ``cutoff_k * max(scale)``.  Pairs are grouped by Gaussian."""
    means = np.ascontiguousarray(means, dtype=float)
    n = means.shape[0]
    V = spec.num_voxels
    if n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if np.isinf(cutoff_k):
        gid = np.repeat(np.arange(n), V)
        vid = np.tile(np.arange(V), n)
        return gid, vid
    if not cutoff_k > 0:
        raise ValueError("cutoff_k must be positive")
    radius = cutoff_k * np.exp(np.max(log_scales, axis=1))
    org = np.asarray(spec.origin, dtype=float)
    dims = np.asarray(spec.shape, dtype=np.int64)
    vs = float(spec.voxel_size)
    lo, hi = _box_bounds(means, radius, org, vs, dims)
    empty = np.zeros(0, np.int64)
    total = _pairs_kernel(means, radius, org, vs, dims, lo, hi, False, empty, empty)
    gid = np.empty(total, np.int64)
    vid = np.empty(total, np.int64)
    _pairs_kernel(means, radius, org, vs, dims, lo, hi, True, gid, vid)
    return gid, vid


@numba.njit(cache=True, inline="always")
def _pair_terms(p, gid, vid, means, R, s, org, vs, Y, Z):
    """Offset ``d`` from the mean, whitened ``z = R^T d / s`` and the kernel value."""
    i = gid[p]
    v = vid[p]
    ix = v // (Y * Z)
    iy = (v // Z) % Y
    iz = v % Z
    d0 = org[0] + (ix + 0.5) * vs - means[i, 0]
    d1 = org[1] + (iy + 0.5) * vs - means[i, 1]
    d2 = org[2] + (iz + 0.5) * vs - means[i, 2]
    z0 = (R[i, 0, 0] * d0 + R[i, 1, 0] * d1 + R[i, 2, 0] * d2) / s[i, 0]
    z1 = (R[i, 0, 1] * d0 + R[i, 1, 1] * d1 + R[i, 2, 1] * d2) / s[i, 1]
    z2 = (R[i, 0, 2] * d0 + R[i, 1, 2] * d1 + R[i, 2, 2] * d2) / s[i, 2]
    g = np.exp(-0.5 * (z0 * z0 + z1 * z1 + z2 * z2))
    return i, v, d0, d1, d2, z0, z1, z2, g


@numba.njit(cache=True)
def _splat_forward(gid, vid, means, R, s, sig, logits, org, vs, Y, Z, out):
    C = logits.shape[1]
    for p in range(gid.shape[0]):
        i, v, d0, d1, d2, z0, z1, z2, g = _pair_terms(p, gid, vid, means, R, s, org, vs, Y, Z)
        a = sig[i] * g
        for k in range(C):
            out[v, k] += a * logits[i, k]


@numba.njit(cache=True)
def _splat_backward(dout, gid, vid, means, R, s, sig, logits, org, vs, Y, Z,
                    dmeans, dlogs, dsig, dlogits, dR):
    C = logits.shape[1]
    for p in range(gid.shape[0]):
        i, v, d0, d1, d2, z0, z1, z2, g = _pair_terms(p, gid, vid, means, R, s, org, vs, Y, Z)
        a = sig[i] * g
        da = 0.0
        for k in range(C):
            dlogits[i, k] += a * dout[v, k]
            da += dout[v, k] * logits[i, k]
        dsig[i] += g * da
        dq = -sig[i] * da * g                  # 2 * d/d(mahalanobis)
        dz0 = z0 * dq
        dz1 = z1 * dq
        dz2 = z2 * dq
        dlogs[i, 0] -= dz0 * z0
        dlogs[i, 1] -= dz1 * z1
        dlogs[i, 2] -= dz2 * z2
        dy0 = dz0 / s[i, 0]
        dy1 = dz1 / s[i, 1]
        dy2 = dz2 / s[i, 2]
        for r in range(3):
            dmeans[i, r] -= R[i, r, 0] * dy0 + R[i, r, 1] * dy1 + R[i, r, 2] * dy2
        dR[i, 0, 0] += d0 * dy0
        dR[i, 0, 1] += d0 * dy1
        dR[i, 0, 2] += d0 * dy2
        dR[i, 1, 0] += d1 * dy0
        dR[i, 1, 1] += d1 * dy1
        dR[i, 1, 2] += d1 * dy2
        dR[i, 2, 0] += d2 * dy0
        dR[i, 2, 1] += d2 * dy1
        dR[i, 2, 2] += d2 * dy2


def _grid_args(spec: GridSpec):
    X, Y, Z = spec.shape
    return np.asarray(spec.origin, dtype=float), float(spec.voxel_size), Y, Z


def splat(gset: GaussianSet, spec: GridSpec, cutoff_k: float = DEFAULT_CUTOFF,
          pairs=None, quats=None):
    """Sum every Gaussian's contribution into the voxel centres it covers.

    ``pairs`` freezes the covered set (as returned in the cache).  ``quats``
    may be passed unnormalised; the backward pass differentiates through the
    normalisation.  Returns ``(logits (X, Y, Z, C), cache)``.
    """
    C = gset.num_classes
    X, Y, Z = spec.shape
    raw_q = gset.quats if quats is None else np.asarray(quats)
    if pairs is None:
        pairs = splat_pairs(gset.means, gset.log_scales, spec, cutoff_k)
    gid, vid = pairs
    out = np.zeros((spec.num_voxels, C), dtype=float)
    cache = {"pairs": pairs, "spec": spec, "raw_q": raw_q, "gset": gset}
    if gid.size == 0:
        return out.reshape(X, Y, Z, C), cache
    qhat = normalize_quat(raw_q)
    R = np.ascontiguousarray(quat_to_rotmat(qhat))
    s = np.exp(gset.log_scales)
    sig = sigmoid(gset.opacity_logits)
    means = np.ascontiguousarray(gset.means, dtype=float)
    logits = np.ascontiguousarray(gset.logits, dtype=float)
    _splat_forward(gid, vid, means, R, s, sig, logits, *_grid_args(spec), out)
    check_finite("splat output", out)
    cache.update(qhat=qhat, R=R, s=s, sig=sig, means=means, logits=logits)
    return out.reshape(X, Y, Z, C), cache


def splat_backward(dlogits, cache):
    """Gradients w.r.t. means, raw quats, log-scales, opacity logits, logits."""
    gset = cache["gset"]
    n, C = gset.logits.shape
    gid, vid = cache["pairs"]
    grads = {
        "means": np.zeros((n, 3)),
        "quats": np.zeros(np.shape(cache["raw_q"])),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros(n),
        "logits": np.zeros((n, C)),
    }
    if gid.size == 0:
        return grads
    dout = np.ascontiguousarray(np.asarray(dlogits, dtype=float).reshape(-1, C))
    dsig = np.zeros(n)
    dR = np.zeros((n, 3, 3))
    sig = cache["sig"]
    _splat_backward(dout, gid, vid, cache["means"], cache["R"], cache["s"], sig, cache["logits"],
                    *_grid_args(cache["spec"]), grads["means"], grads["log_scales"], dsig,
                    grads["logits"], dR)
    grads["opacity_logits"] = dsig * sig * (1 - sig)
    dqhat = quat_to_rotmat_backward(dR, cache["qhat"])
    grads["quats"] = normalize_quat_backward(dqhat, cache["raw_q"])
    return grads


def splat_dense(gset: GaussianSet, spec: GridSpec):
    """Reference splat: evaluate every Gaussian at every voxel centre."""
    out = np.zeros((spec.num_voxels, gset.num_classes))
    centers = spec.centers()
    for i in range(len(gset)):
        g = gset[i]
        for v, x in enumerate(centers):
            out[v] += evaluate_gaussian(x, g)
    return out.reshape(spec.shape + (gset.num_classes,))


def predict_occupancy(gset: GaussianSet, spec: GridSpec, cutoff_k: float = DEFAULT_CUTOFF) -> VoxelGrid:
    logits, _ = splat(gset, spec, cutoff_k)
    return VoxelGrid(spec, logits, argmax_labels(logits))


# --------------------------------------------------------------------------
# per-Gaussian refinement block: f <- f + FFN(LN(f))
# --------------------------------------------------------------------------

def init_refine_params(rng, dim: int, hidden: int | None = None, zero_out: bool = False):
    hidden = hidden or 2 * dim
    p = {
        "ln_g": np.ones(dim),
        "ln_b": np.zeros(dim),
        "w1": rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim)),
        "b2": np.zeros(dim),
    }
    if zero_out:
        p["w2"][:] = 0.0
    return p


def refine_block(f, p):
    y, ln_cache = layer_norm(f, p["ln_g"], p["ln_b"])
    h = y @ p["w1"] + p["b1"]
    act = silu(h)
    out = f + act @ p["w2"] + p["b2"]
    return out, (ln_cache, y, h, act)


def refine_block_backward(dout, cache, p):
    ln_cache, y, h, act = cache
    grads = {
        "w2": act.T @ dout,
        "b2": dout.sum(axis=0),
    }
    dh = (dout @ p["w2"].T) * silu_grad(h)
    grads["w1"] = y.T @ dh
    grads["b1"] = dh.sum(axis=0)
    dy = dh @ p["w1"].T
    dx, grads["ln_g"], grads["ln_b"] = layer_norm_backward(dy, ln_cache)
    return dout + dx, grads
