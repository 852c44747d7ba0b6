"""Synthetic labelled scenes with LiDAR and camera observations.

A scene is a list of primitive shapes rasterised onto the voxel grid (later
shapes overwrite earlier ones).  LiDAR points are drawn uniformly inside
surface voxels with a per-class intensity signature; the camera map is a
ray-cast of the label grid carrying a per-class colour plus normalised depth.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .ldfa import CameraFeatureMap, FeatureVolume, PinholeCamera, point_cloud_to_volume
from .numerics import make_rng
from .scene import GridSpec

EMPTY, GROUND, BOX, CYLINDER = 0, 1, 2, 3
CLASS_NAMES = ("empty", "ground", "box", "cylinder")
INTENSITY = {GROUND: 0.2, BOX: 0.6, CYLINDER: 0.9}
PALETTE = np.array([[0.0, 0.0, 0.0],
                    [0.35, 0.55, 0.25],
                    [0.85, 0.45, 0.20],
                    [0.25, 0.40, 0.85]])
CAMERA_CHANNELS = 4
NIGHT_FLOOR = 0.1


@dataclass
class Shape:
    """``kind`` is ground, box or cylinder.

    ground: ``height``.  box: ``center``, ``half``, ``yaw``.
    cylinder: ``center`` (x, y), ``radius``, ``z0``, ``z1``.
    """

    kind: str
    label: int
    params: dict

    def contains(self, xyz):
        x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
        p = self.params
        if self.kind == "ground":
            return z < p["height"]
        if self.kind == "box":
            c = np.asarray(p["center"], dtype=float)
            ca, sa = np.cos(p["yaw"]), np.sin(p["yaw"])
            dx, dy, dz = x - c[0], y - c[1], z - c[2]
            lx = ca * dx + sa * dy
            ly = -sa * dx + ca * dy
            h = p["half"]
            return (np.abs(lx) <= h[0]) & (np.abs(ly) <= h[1]) & (np.abs(dz) <= h[2])
        if self.kind == "cylinder":
            c = p["center"]
            r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2
            return (r2 <= p["radius"] ** 2) & (z >= p["z0"]) & (z <= p["z1"])
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class SceneSpec:
    grid: GridSpec
    shapes: list = field(default_factory=list)
    num_classes: int = 4
    points_per_voxel: float = 2.0
    intensity_noise: float = 0.05
    camera_noise: float = 0.02
    image_size: tuple = (48, 64)  # (H, W)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        for s in self.shapes:
            if not 0 < s.label < self.num_classes:
                raise ValueError(f"shape label {s.label} outside [1, {self.num_classes})")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    labels: np.ndarray          # (X, Y, Z) int
    points: np.ndarray          # (N, 4) x, y, z, intensity
    volume: FeatureVolume
    camera: CameraFeatureMap
    seed: int

    @property
    def grid(self) -> GridSpec:
        return self.spec.grid


def rasterize(shapes, grid: GridSpec):
    centers = grid.centers()
    labels = np.zeros(grid.num_voxels, dtype=np.int64)
    for s in shapes:
        labels[s.contains(centers)] = s.label
    return labels.reshape(grid.shape)


def surface_mask(labels):
    """Occupied voxels with at least one empty (or out-of-grid) 6-neighbour above/side."""
    occ = labels > 0
    pad = np.pad(occ, 1, constant_values=False)
    exposed = np.zeros_like(occ)
    X, Y, Z = occ.shape
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1)):
        sl = [slice(1, X + 1), slice(1, Y + 1), slice(1, Z + 1)]
        sl[axis] = slice(1 + shift, (X, Y, Z)[axis] + 1 + shift)
        exposed |= ~pad[tuple(sl)]
    return occ & exposed


def sample_lidar(labels, grid: GridSpec, rng, points_per_voxel=2.0, intensity_noise=0.05):
    idx = np.flatnonzero(surface_mask(labels).reshape(-1))
    if idx.size == 0:
        return np.zeros((0, 4))
    counts = rng.poisson(points_per_voxel, idx.size)
    vox = np.repeat(idx, counts)
    ijk = np.stack(np.unravel_index(vox, grid.shape), axis=1)
    lo = np.asarray(grid.origin) + ijk * grid.voxel_size
    xyz = lo + rng.uniform(0.0, 1.0, (vox.size, 3)) * grid.voxel_size
    cls = labels.reshape(-1)[vox]
    sig = np.array([INTENSITY.get(int(c), 0.5) for c in range(labels.max() + 1)])[cls]
    inten = np.clip(sig + rng.normal(0.0, intensity_noise, vox.size), 0.0, 1.0)
    return np.column_stack([xyz, inten])


def default_camera(grid: GridSpec, image_size=(48, 64)) -> PinholeCamera:
    lo, hi = grid.lower, grid.upper
    ext = hi - lo
    centre = lo + 0.5 * ext
    pos = np.array([centre[0], lo[1] - 0.2 * ext[1], hi[2] + 0.45 * ext[1]])
    target = np.array([centre[0], centre[1] + 0.05 * ext[1], lo[2]])
    H, W = image_size
    return PinholeCamera.look_at(pos, target, W, H, fov_deg=80.0)


def render_camera(labels, grid: GridSpec, camera: PinholeCamera, num_classes=4):
    """Ray-cast the label grid: per-pixel class colour plus normalised hit depth."""
    H, W = camera.height, camera.width
    vs, us = np.mgrid[0:H, 0:W].astype(float)
    dirs_cam = np.stack([(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy,
                         np.ones_like(us)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ camera.rotation                       # camera -> world
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    far = float(np.linalg.norm(grid.upper - grid.lower) + np.linalg.norm(
        camera.position - 0.5 * (grid.upper + grid.lower)))
    step = 0.5 * grid.voxel_size
    ts = np.arange(step, far, step)
    pts = camera.position + dirs[:, None, :] * ts[None, :, None]
    ijk = np.floor((pts - np.asarray(grid.origin)) / grid.voxel_size).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.array(grid.shape)), axis=-1)
    ijk = np.where(inside[..., None], ijk, 0)
    lab = np.where(inside, labels[ijk[..., 0], ijk[..., 1], ijk[..., 2]], 0)
    hit = lab > 0
    any_hit = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    cls = np.where(any_hit, lab[np.arange(len(lab)), first], 0)
    depth = np.where(any_hit, ts[first] / far, 1.0)
    pal = PALETTE if num_classes <= len(PALETTE) else np.vstack(
        [PALETTE, make_rng(7).uniform(0, 1, (num_classes - len(PALETTE), 3))])
    img = np.concatenate([pal[cls], depth[:, None]], axis=1)
    return img.reshape(H, W, CAMERA_CHANNELS).transpose(2, 0, 1)


def lidar_volume(points, grid: GridSpec) -> FeatureVolume:
    X, Y, Z = grid.shape
    return point_cloud_to_volume(points, grid.origin, grid.voxel_size, (Z, Y, X))


def generate_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    rng = make_rng(seed)
    grid = spec.grid
    labels = rasterize(spec.shapes, grid)
    if spec.shapes:
        points = sample_lidar(labels, grid, rng, spec.points_per_voxel, spec.intensity_noise)
    else:
        points = np.zeros((0, 4))
    cam = default_camera(grid, spec.image_size)
    img = render_camera(labels, grid, cam, spec.num_classes)
    if spec.camera_noise > 0:
        img = img + rng.normal(0.0, spec.camera_noise, img.shape)
    return SyntheticScene(spec, labels, points, lidar_volume(points, grid),
                          CameraFeatureMap(img, cam), seed)


def random_scene_spec(rng, grid: GridSpec, num_classes=4, boxes=(2, 4), cylinders=(1, 3)):
    lo, hi = grid.lower, grid.upper
    ext = hi - lo
    vs = grid.voxel_size
    ground_h = lo[2] + vs * rng.integers(1, 3)
    shapes = [Shape("ground", GROUND, {"height": float(ground_h)})]
    for _ in range(rng.integers(boxes[0], boxes[1] + 1)):
        half = rng.uniform(0.08, 0.18, 3) * ext[[0, 1, 1]]
        half[2] = rng.uniform(0.1, 0.35) * ext[2]
        centre = lo + rng.uniform(0.15, 0.85, 3) * ext
        centre[2] = ground_h + half[2]
        shapes.append(Shape("box", BOX, {"center": centre.tolist(), "half": half.tolist(),
                                         "yaw": float(rng.uniform(0, np.pi))}))
    for _ in range(rng.integers(cylinders[0], cylinders[1] + 1)):
        c = lo[:2] + rng.uniform(0.1, 0.9, 2) * ext[:2]
        shapes.append(Shape("cylinder", CYLINDER, {
            "center": c.tolist(), "radius": float(rng.uniform(0.05, 0.1) * ext[0]),
            "z0": float(ground_h), "z1": float(ground_h + rng.uniform(0.3, 0.8) * ext[2])}))
    return SceneSpec(grid=grid, shapes=[s for s in shapes if s.label < num_classes],
                     num_classes=num_classes)


# --------------------------------------------------------------------------
# degradations
# --------------------------------------------------------------------------

def _energy(x):
    return float(np.sum(np.square(x)))


def degrade(scene: SyntheticScene, mode: str, severity: float, seed: int = 0,
            floor: float = NIGHT_FLOOR) -> SyntheticScene:
    """Rain: LiDAR dropout and range noise.  Night: camera attenuation and noise.

    Night output energy never exceeds ``((1 - s) + s * floor)`` times the
    clean energy.  Ground truth is untouched.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if mode not in ("rain", "night"):
        raise ValueError(f"unknown degradation {mode!r}")
    if severity == 0.0:
        return scene
    rng = make_rng(seed)
    if mode == "rain":
        pts = scene.points
        keep = rng.random(len(pts)) >= 0.6 * severity
        pts = pts[keep].copy()
        rel = pts[:, :3] - scene.camera.camera.position
        rng_noise = rng.normal(0.0, 0.5 * severity * scene.grid.voxel_size, len(pts))
        pts[:, :3] += rel / np.maximum(np.linalg.norm(rel, axis=1, keepdims=True), 1e-9) * rng_noise[:, None]
        pts[:, 3] = np.clip(pts[:, 3] * (1.0 - 0.5 * severity), 0.0, 1.0)
        return dataclasses.replace(scene, points=pts, volume=lidar_volume(pts, scene.grid))
    img = scene.camera.values
    gain = (1.0 - severity) + severity * floor
    out = gain * img + rng.normal(0.0, 0.3 * severity * np.sqrt(np.mean(img**2)), img.shape)
    cap = gain * _energy(img)
    e = _energy(out)
    if e > cap:
        out *= np.sqrt(cap / e)
    return dataclasses.replace(scene, camera=CameraFeatureMap(out, scene.camera.camera))
