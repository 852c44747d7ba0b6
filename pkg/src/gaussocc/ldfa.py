"""Lifting sensor features onto Gaussian anchors.

LiDAR: points are mean-pooled into a C x D x H x W volume whose vertical axis
is a stack of D depth planes.  Each anchor samples every plane at P deformable
keypoints, planes are mean-pooled into K chunks (under a random depth
permutation while training), a cross-depth attention over chunks yields a
modulation vector, and a soft gate blends it with the mean over planes.

Camera: each anchor is projected through a pinhole camera and the image
feature map is sampled at P deformable keypoints around the projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (scaled_dot_attention, scaled_dot_attention_backward, sigmoid, softmax,
                       softmax_backward)

POINT_CHANNELS = 3  # (intensity, 1, normalised height)


# --------------------------------------------------------------------------
# data containers
# --------------------------------------------------------------------------

@dataclass
class FeatureVolume:
    values: np.ndarray  # (C, D, H, W); D runs along z, H along y, W along x
    origin: tuple
    voxel_size: float

    @property
    def shape(self):
        return self.values.shape

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def depth(self) -> int:
        return self.values.shape[1]

    def planes(self):
        """Channel-last copy, shape (D, H, W, C)."""
        return np.ascontiguousarray(np.transpose(self.values, (1, 2, 3, 0)))

    def to_plane_coords(self, xyz):
        """World points to continuous (u, v) cell coordinates (integer = cell centre)."""
        xyz = np.asarray(xyz)
        u = (xyz[..., 0] - self.origin[0]) / self.voxel_size - 0.5
        v = (xyz[..., 1] - self.origin[1]) / self.voxel_size - 0.5
        return u, v


@dataclass
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray   # world -> camera, (3, 3)
    position: np.ndarray   # camera centre in world coordinates
    width: int
    height: int
    near: float = 1e-3

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.position = np.asarray(self.position, dtype=float)
        if self.fx == 0 or self.fy == 0:
            raise ValueError("camera intrinsics are singular")

    def to_camera(self, xyz):
        return (np.asarray(xyz) - self.position) @ self.rotation.T

    def project(self, xyz):
        """Pixel coordinates (u, v), depth, and the in-front mask."""
        pc = self.to_camera(xyz)
        depth = pc[..., 2]
        front = depth > self.near
        safe = np.where(front, depth, 1.0)
        u = self.fx * pc[..., 0] / safe + self.cx
        v = self.fy * pc[..., 1] / safe + self.cy
        return u, v, depth, front

    @classmethod
    def look_at(cls, position, target, width, height, fov_deg=60.0, up=(0.0, 0.0, 1.0)):
        position = np.asarray(position, dtype=float)
        fwd = np.asarray(target, dtype=float) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, rot, position, width, height)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "position": self.position.tolist(),
                "width": self.width, "height": self.height, "near": self.near}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CameraFeatureMap:
    values: np.ndarray  # (C, H_img, W_img)
    camera: PinholeCamera

    def channel_last(self):
        return np.ascontiguousarray(np.transpose(self.values, (1, 2, 0)))[None]


@dataclass
class ChunkPlan:
    perm: np.ndarray      # pi over depth indices
    chunks: list          # index sets S_k (positions into the permuted order)

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    def pooling_matrix(self, depth: int):
        """(K, D) matrix A with C_k = sum_d A[k, d] F_depth[d]."""
        A = np.zeros((len(self.chunks), depth))
        for k, idx in enumerate(self.chunks):
            A[k, self.perm[idx]] += 1.0 / len(idx)
        return A


def make_chunk_plan(depth: int, num_chunks: int, rng=None) -> ChunkPlan:
    """Split D planes into K near-equal chunks; shuffle plane order when ``rng`` is given."""
    if num_chunks < 1 or depth < num_chunks:
        raise ValueError(f"need 1 <= K <= D, got K={num_chunks}, D={depth}")
    perm = np.arange(depth) if rng is None else rng.permutation(depth)
    return ChunkPlan(perm, np.array_split(np.arange(depth), num_chunks))


# --------------------------------------------------------------------------
# voxel feature encoder
# --------------------------------------------------------------------------

def point_cloud_to_volume(points, origin, voxel_size, dhw) -> FeatureVolume:
    """Mean of per-point (intensity, 1, normalised height) features per cell."""
    D, H, W = (int(v) for v in dhw)
    values = np.zeros((POINT_CHANNELS, D, H, W))
    points = np.asarray(points, dtype=float).reshape(-1, 4)
    if points.shape[0] == 0:
        return FeatureVolume(values, tuple(origin), float(voxel_size))
    org = np.asarray(origin, dtype=float)
    ijk = np.floor((points[:, :3] - org) / voxel_size).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.array([W, H, D])), axis=1)
    pts, ijk = points[inside], ijk[inside]
    flat = (ijk[:, 2] * H + ijk[:, 1]) * W + ijk[:, 0]
    feats = np.stack([pts[:, 3], np.ones(len(pts)), (pts[:, 2] - org[2]) / (D * voxel_size)], axis=1)
    count = np.bincount(flat, minlength=D * H * W)
    occupied = count > 0
    for c in range(POINT_CHANNELS):
        s = np.bincount(flat, weights=feats[:, c], minlength=D * H * W)
        values[c].reshape(-1)[occupied] = s[occupied] / count[occupied]
    return FeatureVolume(values, tuple(float(v) for v in origin), float(voxel_size))


# --------------------------------------------------------------------------
# bilinear sampling (zero padding)
# --------------------------------------------------------------------------

def bilinear_sample(planes, plane_idx, u, v):
    """Sample channel-last ``planes`` (D, H, W, C) at continuous (u=col, v=row).

    ``plane_idx``, ``u`` and ``v`` broadcast to a common shape S; returns
    ``(values S + (C,), cache)``.  Corners outside the map contribute zero.
    """
    D, H, W, C = planes.shape
    plane_idx, u, v = np.broadcast_arrays(plane_idx, u, v)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    corners = []
    out = np.zeros(u.shape + (C,), dtype=planes.dtype)
    for dv_, du_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cu = u0 + du_
        cv = v0 + dv_
        ok = (cu >= 0) & (cu < W) & (cv >= 0) & (cv < H)
        val = planes[plane_idx, np.clip(cv, 0, H - 1), np.clip(cu, 0, W - 1)]
        val = val * ok[..., None]
        wu = fu if du_ else 1.0 - fu
        wv = fv if dv_ else 1.0 - fv
        out += (wu * wv)[..., None] * val
        corners.append(val)
    return out, (corners, fu, fv)


def bilinear_sample_backward(dout, cache):
    """Gradient w.r.t. the sampling coordinates (u, v)."""
    (f00, f01, f10, f11), fu, fv = cache
    # f{row}{col}: row offset along v, column offset along u
    dfdu = (1.0 - fv)[..., None] * (f01 - f00) + fv[..., None] * (f11 - f10)
    dfdv = (1.0 - fu)[..., None] * (f10 - f00) + fu[..., None] * (f11 - f01)
    return np.sum(dout * dfdu, axis=-1), np.sum(dout * dfdv, axis=-1)


def deformable_sample(feature_map, base_uv, offsets, weights):
    """Weighted sum of bilinear samples at ``base_uv + offsets`` on one plane.

    ``feature_map`` is (C, H, W); ``offsets`` is (P, 2) in cell units;
    ``weights`` is (P,).  Returns a C-vector.
    """
    planes = np.transpose(np.asarray(feature_map, dtype=float), (1, 2, 0))[None]
    offsets = np.asarray(offsets, dtype=float).reshape(-1, 2)
    u = base_uv[0] + offsets[:, 0]
    v = base_uv[1] + offsets[:, 1]
    samples, _ = bilinear_sample(planes, 0, u, v)
    return np.asarray(weights, dtype=float) @ samples


# --------------------------------------------------------------------------
# LDFA building blocks
# --------------------------------------------------------------------------

def chunk_aggregate(depth_features, plan: ChunkPlan):
    """Mean-pool (..., D, C) plane features into (..., K, C) chunks."""
    A = plan.pooling_matrix(depth_features.shape[-2])
    return np.einsum("kd,...dc->...kc", A, depth_features), A


def cross_depth_modulation(chunks, p):
    """Self-attention over chunks, mean over the chunk axis -> (..., C)."""
    Q = chunks @ p["wq"]
    K = chunks @ p["wk"]
    V = chunks @ p["wv"]
    att, w = scaled_dot_attention(Q, K, V)
    return att.mean(axis=-2), (chunks, Q, K, V, w)


def cross_depth_modulation_backward(dM, cache, p):
    chunks, Q, K, V, w = cache
    nk = chunks.shape[-2]
    datt = np.repeat(dM[..., None, :] / nk, nk, axis=-2)
    dQ, dK, dV = scaled_dot_attention_backward(datt, Q, K, V, w)
    c2 = chunks.reshape(-1, chunks.shape[-1])
    grads = {
        "wq": c2.T @ dQ.reshape(-1, dQ.shape[-1]),
        "wk": c2.T @ dK.reshape(-1, dK.shape[-1]),
        "wv": c2.T @ dV.reshape(-1, dV.shape[-1]),
    }
    dchunks = dQ @ p["wq"].T + dK @ p["wk"].T + dV @ p["wv"].T
    return dchunks, grads


def gated_global_fusion(M, G, alpha):
    return alpha * M + (1.0 - alpha) * G


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def ring_offsets(P: int, radius: float = 1.0):
    """Keypoint 0 at the anchor, the rest evenly spaced on a ring."""
    off = np.zeros((P, 2))
    if P > 1:
        ang = 2 * np.pi * np.arange(P - 1) / (P - 1)
        off[1:, 0] = radius * np.cos(ang)
        off[1:, 1] = radius * np.sin(ang)
    return off


def init_ldfa_params(rng, feat_dim: int, depth: int, keypoints: int = 4,
                     channels: int = POINT_CHANNELS, att_dim: int = 8, ring: float = 1.0):
    D, P, C = depth, keypoints, channels
    return {
        "off_w": rng.normal(0.0, 0.01, (feat_dim, D * P * 2)),
        "off_b": np.tile(ring_offsets(P, ring)[None], (D, 1, 1)).reshape(-1),
        "wt_w": rng.normal(0.0, 0.01, (feat_dim, D * P)),
        "wt_b": np.zeros(D * P),
        "wq": rng.normal(0.0, 1.0 / np.sqrt(C), (C, att_dim)),
        "wk": rng.normal(0.0, 1.0 / np.sqrt(C), (C, att_dim)),
        "wv": np.eye(C) + rng.normal(0.0, 0.1, (C, C)),
        "alpha_logit": np.zeros(()),
    }


def init_camera_params(rng, feat_dim: int, keypoints: int = 4, ring: float = 1.0):
    P = keypoints
    return {
        "off_w": rng.normal(0.0, 0.01, (feat_dim, P * 2)),
        "off_b": ring_offsets(P, ring).reshape(-1),
        "wt_w": rng.normal(0.0, 0.01, (feat_dim, P)),
        "wt_b": np.zeros(P),
    }


# --------------------------------------------------------------------------
# full LiDAR lift
# --------------------------------------------------------------------------

def _keypoints(feats, p, lead_shape):
    off = (feats @ p["off_w"] + p["off_b"]).reshape(lead_shape + (-1, 2))
    wl = (feats @ p["wt_w"] + p["wt_b"]).reshape(lead_shape + (-1,))
    return off, wl, softmax(wl, axis=-1)


def ldfa_lift(means, feats, vol: FeatureVolume, p, plan: ChunkPlan, planes=None):
    """LiDAR feature per anchor, shape (N, C).  Returns ``(F_out, cache)``."""
    N = means.shape[0]
    D = vol.depth
    if planes is None:
        planes = vol.planes()
    off, wl, w = _keypoints(feats, p, (N, D))
    u0, v0 = vol.to_plane_coords(means)
    u = u0[:, None, None] + off[..., 0]
    v = v0[:, None, None] + off[..., 1]
    plane_idx = np.arange(D)[None, :, None]
    samples, bcache = bilinear_sample(planes, plane_idx, u, v)   # (N, D, P, C)
    depth_feat = np.einsum("ndp,ndpc->ndc", w, samples)
    chunks, A = chunk_aggregate(depth_feat, plan)
    M, mcache = cross_depth_modulation(chunks, p)
    G = depth_feat.mean(axis=1)
    alpha = sigmoid(p["alpha_logit"])
    out = gated_global_fusion(M, G, alpha)
    cache = dict(feats=feats, w=w, samples=samples, bcache=bcache, A=A, mcache=mcache,
                 M=M, G=G, alpha=alpha, voxel_size=vol.voxel_size, D=D)
    return out, cache


def ldfa_lift_backward(dout, cache, p):
    """Returns ``(param_grads, dmeans, dfeats)``."""
    alpha, M, G = cache["alpha"], cache["M"], cache["G"]
    D = cache["D"]
    grads = {"alpha_logit": np.asarray(np.sum(dout * (M - G)) * alpha * (1 - alpha))}
    dM = alpha * dout
    dG = (1.0 - alpha) * dout
    dchunks, mg = cross_depth_modulation_backward(dM, cache["mcache"], p)
    grads.update(mg)
    ddepth = np.einsum("kd,nkc->ndc", cache["A"], dchunks) + dG[:, None, :] / D
    w, samples = cache["w"], cache["samples"]
    dw = np.einsum("ndc,ndpc->ndp", ddepth, samples)
    dsamples = w[..., None] * ddepth[:, :, None, :]
    du, dv = bilinear_sample_backward(dsamples, cache["bcache"])
    return _keypoint_backward(grads, cache["feats"], p, w, dw, du, dv, cache["voxel_size"])


def _keypoint_backward(grads, feats, p, w, dw, du, dv, scale):
    n = feats.shape[0]
    dwl = softmax_backward(dw, w, axis=-1).reshape(n, -1)
    doff = np.stack([du, dv], axis=-1).reshape(n, -1)
    grads["off_w"] = feats.T @ doff
    grads["off_b"] = doff.sum(axis=0)
    grads["wt_w"] = feats.T @ dwl
    grads["wt_b"] = dwl.sum(axis=0)
    dfeats = doff @ p["off_w"].T + dwl @ p["wt_w"].T
    axes = tuple(range(1, du.ndim))
    dmeans = np.zeros((n, 3))
    dmeans[:, 0] = du.sum(axis=axes) / scale
    dmeans[:, 1] = dv.sum(axis=axes) / scale
    return grads, dmeans, dfeats


def column_mean_lift(means, vol: FeatureVolume, planes=None):
    """Non-deformable fallback: mean over planes of the sample at the anchor column."""
    if planes is None:
        planes = vol.planes()
    D = vol.depth
    u, v = vol.to_plane_coords(means)
    samples, bcache = bilinear_sample(planes, np.arange(D)[None, :], u[:, None], v[:, None])
    return samples.mean(axis=1), dict(bcache=bcache, D=D, voxel_size=vol.voxel_size)


def column_mean_lift_backward(dout, cache):
    D = cache["D"]
    ds = np.repeat(dout[:, None, :] / D, D, axis=1)
    du, dv = bilinear_sample_backward(ds, cache["bcache"])
    dmeans = np.zeros((dout.shape[0], 3))
    dmeans[:, 0] = du.sum(axis=1) / cache["voxel_size"]
    dmeans[:, 1] = dv.sum(axis=1) / cache["voxel_size"]
    return dmeans


# --------------------------------------------------------------------------
# camera lift
# --------------------------------------------------------------------------

def camera_lift(means, feats, cam: CameraFeatureMap, p, image=None):
    """Camera feature per anchor, shape (N, C_cam); anchors behind the camera get zeros."""
    N = means.shape[0]
    if image is None:
        image = cam.channel_last()
    camera = cam.camera
    u0, v0, depth, front = camera.project(means)
    off, wl, w = _keypoints(feats, p, (N,))
    u = u0[:, None] + off[..., 0]
    v = v0[:, None] + off[..., 1]
    samples, bcache = bilinear_sample(image, 0, u, v)       # (N, P, C)
    out = np.einsum("np,npc->nc", w, samples) * front[:, None]
    cache = dict(feats=feats, w=w, samples=samples, bcache=bcache, front=front,
                 means=means, depth=depth)
    return out, cache


def camera_lift_backward(dout, cache, p, camera: PinholeCamera):
    front = cache["front"]
    dout = dout * front[:, None]
    w, samples = cache["w"], cache["samples"]
    dw = np.einsum("nc,npc->np", dout, samples)
    dsamples = w[..., None] * dout[:, None, :]
    du, dv = bilinear_sample_backward(dsamples, cache["bcache"])
    grads, _, dfeats = _keypoint_backward({}, cache["feats"], p, w, dw, du, dv, 1.0)
    # chain (u0, v0) back through the pinhole projection
    pc = camera.to_camera(cache["means"])
    Z = np.where(front, pc[:, 2], 1.0)
    gu = du.sum(axis=1) * front
    gv = dv.sum(axis=1) * front
    dpc = np.stack([gu * camera.fx / Z, gv * camera.fy / Z,
                    -(gu * camera.fx * pc[:, 0] + gv * camera.fy * pc[:, 1]) / Z**2], axis=1)
    dmeans = dpc @ camera.rotation
    return grads, dmeans, dfeats
