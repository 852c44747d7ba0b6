"""Binary and text file formats.

All binary layouts are little-endian and start with a 16-byte header: a
12-byte magic string followed by a u32 format version.

* voxel grid: u32 X, Y, Z, C; f32 origin[3]; f32 voxel_size; f32 logits
  (row-major X, Y, Z, C); u16 labels (row-major X, Y, Z).
* feature volume: same layout with extents C, D, H, W and no label block.
* Gaussian set: flat f32 records (mean[3], quat[4], log_scale[3],
  opacity_logit, logits[C], feature[F]) plus a JSON sidecar holding C and F.
* tensor: u32 dtype code, u32 ndim, u64 dims, raw data.
* checkpoint: u32 JSON length, JSON header, then f64 payload in header order.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .scene import GaussianSet, GridSpec, VoxelGrid

VERSION = 1
MAGIC_GRID = b"GOCC-VOXGRID"
MAGIC_VOLUME = b"GOCC-FEATVOL"
MAGIC_GAUSS = b"GOCC-GAUSSET"
MAGIC_TENSOR = b"GOCC-TENSOR\0"
MAGIC_CKPT = b"GOCC-CHECKPT"
DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "<u2"}


class FormatError(ValueError):
    """A file is malformed, truncated or of the wrong kind."""


def _header(magic: bytes) -> bytes:
    assert len(magic) == 12
    return magic + struct.pack("<I", VERSION)


class _Reader:
    def __init__(self, data: bytes, magic: bytes, what: str):
        if len(data) < 16 or data[:12] != magic:
            raise FormatError(f"not a {what} file")
        (ver,) = struct.unpack_from("<I", data, 12)
        if ver != VERSION:
            raise FormatError(f"unsupported {what} version {ver}")
        self.data, self.pos, self.what = data, 16, what

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated {self.what} file")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, dtype, count):
        nbytes = np.dtype(dtype).itemsize * count
        if self.pos + nbytes > len(self.data):
            raise FormatError(f"truncated {self.what} file")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += nbytes
        return out

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"trailing bytes in {self.what} file")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, data: bytes):
    with open(path, "wb") as fh:
        fh.write(data)


# --------------------------------------------------------------------------
# voxel grid
# --------------------------------------------------------------------------

def encode_voxel_grid(grid: VoxelGrid) -> bytes:
    X, Y, Z = grid.spec.shape
    C = grid.logits.shape[-1]
    if grid.logits.shape != (X, Y, Z, C):
        raise FormatError("logit array does not match the grid shape")
    labels = grid.labels
    if labels is None:
        labels = np.zeros((X, Y, Z), dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise FormatError("labels do not fit in u16")
    parts = [_header(MAGIC_GRID), struct.pack("<4I", X, Y, Z, C),
             struct.pack("<4f", *grid.spec.origin, grid.spec.voxel_size),
             np.ascontiguousarray(grid.logits, dtype="<f4").tobytes(),
             np.ascontiguousarray(labels, dtype="<u2").tobytes()]
    return b"".join(parts)


def decode_voxel_grid(data: bytes) -> VoxelGrid:
    r = _Reader(data, MAGIC_GRID, "voxel grid")
    X, Y, Z, C = r.unpack("<4I")
    ox, oy, oz, vs = r.unpack("<4f")
    if min(X, Y, Z) < 1 or not vs > 0:
        raise FormatError("invalid grid extents")
    logits = r.array("<f4", X * Y * Z * C).astype(np.float64).reshape(X, Y, Z, C)
    labels = r.array("<u2", X * Y * Z).astype(np.int64).reshape(X, Y, Z)
    r.finish()
    spec = GridSpec((float(ox), float(oy), float(oz)), float(vs), (X, Y, Z))
    return VoxelGrid(spec, logits, labels)


def write_voxel_grid(path, grid: VoxelGrid):
    _write_bytes(path, encode_voxel_grid(grid))


def read_voxel_grid(path) -> VoxelGrid:
    return decode_voxel_grid(_read_bytes(path))


# --------------------------------------------------------------------------
# feature volume
# --------------------------------------------------------------------------

def encode_feature_volume(vol) -> bytes:
    C, D, H, W = vol.values.shape
    return b"".join([_header(MAGIC_VOLUME), struct.pack("<4I", C, D, H, W),
                     struct.pack("<4f", *vol.origin, vol.voxel_size),
                     np.ascontiguousarray(vol.values, dtype="<f4").tobytes()])


def decode_feature_volume(data: bytes):
    from .ldfa import FeatureVolume

    r = _Reader(data, MAGIC_VOLUME, "feature volume")
    C, D, H, W = r.unpack("<4I")
    ox, oy, oz, vs = r.unpack("<4f")
    values = r.array("<f4", C * D * H * W).astype(np.float64).reshape(C, D, H, W)
    r.finish()
    return FeatureVolume(values, (float(ox), float(oy), float(oz)), float(vs))


def write_feature_volume(path, vol):
    _write_bytes(path, encode_feature_volume(vol))


def read_feature_volume(path):
    return decode_feature_volume(_read_bytes(path))


# --------------------------------------------------------------------------
# Gaussian set (+ JSON sidecar)
# --------------------------------------------------------------------------

def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def encode_gaussians(gset: GaussianSet):
    rec = np.concatenate([gset.means, gset.quats, gset.log_scales, gset.opacity_logits[:, None],
                          gset.logits, gset.features], axis=1)
    meta = {"count": len(gset), "num_classes": gset.num_classes, "feature_dim": gset.feature_dim,
            "record": ["mean[3]", "quat[4]", "log_scale[3]", "opacity_logit", "logits[C]",
                       "feature[F]"], "version": VERSION}
    body = _header(MAGIC_GAUSS) + np.ascontiguousarray(rec, dtype="<f4").tobytes()
    return body, json.dumps(meta, sort_keys=True, indent=1) + "\n"


def decode_gaussians(data: bytes, sidecar: str) -> GaussianSet:
    try:
        meta = json.loads(sidecar)
        N, C, F = int(meta["count"]), int(meta["num_classes"]), int(meta["feature_dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad Gaussian sidecar: {exc}") from None
    width = 11 + C + F
    r = _Reader(data, MAGIC_GAUSS, "Gaussian set")
    rec = r.array("<f4", N * width).astype(np.float64).reshape(N, width)
    r.finish()
    return GaussianSet(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10], rec[:, 11:11 + C],
                       rec[:, 11 + C:])


def write_gaussians(path, gset: GaussianSet):
    body, meta = encode_gaussians(gset)
    _write_bytes(path, body)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write(meta)


def read_gaussians(path) -> GaussianSet:
    with open(sidecar_path(path), encoding="utf-8") as fh:
        meta = fh.read()
    return decode_gaussians(_read_bytes(path), meta)


# --------------------------------------------------------------------------
# generic tensors
# --------------------------------------------------------------------------

def encode_tensor(a) -> bytes:
    a = np.asarray(a)
    for code, dt in DTYPES.items():
        if np.dtype(dt) == a.dtype.newbyteorder("<"):
            break
    else:
        raise FormatError(f"unsupported dtype {a.dtype}")
    return b"".join([_header(MAGIC_TENSOR), struct.pack("<2I", code, a.ndim),
                     struct.pack(f"<{a.ndim}Q", *a.shape),
                     np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()])


def decode_tensor(data: bytes):
    r = _Reader(data, MAGIC_TENSOR, "tensor")
    code, ndim = r.unpack("<2I")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = r.unpack(f"<{ndim}Q")
    out = r.array(DTYPES[code], int(np.prod(shape, dtype=np.int64))).reshape(shape).copy()
    r.finish()
    return out.astype(out.dtype.newbyteorder("="))


def write_tensor(path, a):
    _write_bytes(path, encode_tensor(a))


def read_tensor(path):
    return decode_tensor(_read_bytes(path))


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return {"__uint64__": [int(v) for v in x.ravel()]}
    if isinstance(x, np.integer):
        return int(x)
    return x


def _unjson(x):
    if isinstance(x, dict):
        if "__uint64__" in x:
            return np.array(x["__uint64__"], dtype=np.uint64)
        return {k: _unjson(v) for k, v in x.items()}
    return x


def encode_checkpoint(state, config_text: str) -> bytes:
    from .model import tree_items

    entries, blobs = [], []
    for group in ("params", "m", "v"):
        for path, a in tree_items(getattr(state, group)):
            a = np.asarray(a, dtype="<f8")
            entries.append({"group": group, "path": path, "shape": list(a.shape)})
            blobs.append(np.ascontiguousarray(a).tobytes())
    head = {"step": state.step, "rng_state": _jsonable(state.rng_state), "config": config_text,
            "entries": entries}
    hj = json.dumps(head, sort_keys=True).encode()
    return b"".join([_header(MAGIC_CKPT), struct.pack("<I", len(hj)), hj] + blobs)


def decode_checkpoint(data: bytes):
    """Returns ``(TrainState, config)``."""
    from .config import from_ini
    from .model import tree_items
    from .training import TrainState

    r = _Reader(data, MAGIC_CKPT, "checkpoint")
    (n,) = r.unpack("<I")
    if r.pos + n > len(data):
        raise FormatError("truncated checkpoint header")
    try:
        head = json.loads(data[r.pos:r.pos + n])
    except ValueError as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    r.pos += n
    cfg = from_ini(head["config"])
    state = TrainState.create(cfg)
    slots = {g: dict(tree_items(getattr(state, g))) for g in ("params", "m", "v")}
    seen = 0
    for e in head["entries"]:
        target = slots[e["group"]].get(e["path"])
        if target is None or list(target.shape) != e["shape"]:
            raise FormatError(f"checkpoint tensor {e['group']}/{e['path']} does not match config")
        target[...] = r.array("<f8", target.size).reshape(target.shape)
        seen += 1
    r.finish()
    if seen != sum(len(s) for s in slots.values()):
        raise FormatError("checkpoint is missing tensors")
    state.step = int(head["step"])
    state.rng_state = _unjson(head["rng_state"])
    return state, cfg


def write_checkpoint(path, state, cfg):
    from .config import to_ini

    _write_bytes(path, encode_checkpoint(state, to_ini(cfg)))


def read_checkpoint(path):
    return decode_checkpoint(_read_bytes(path))


# --------------------------------------------------------------------------
# scenes (directory of files) and text export
# --------------------------------------------------------------------------

def write_scene(directory, scene):
    os.makedirs(directory, exist_ok=True)
    spec = scene.spec
    meta = {
        "seed": scene.seed, "num_classes": spec.num_classes,
        "grid": {"origin": list(spec.grid.origin), "voxel_size": spec.grid.voxel_size,
                 "shape": list(spec.grid.shape)},
        "shapes": [{"kind": s.kind, "label": s.label, "params": s.params} for s in spec.shapes],
        "points_per_voxel": spec.points_per_voxel, "intensity_noise": spec.intensity_noise,
        "camera_noise": spec.camera_noise, "image_size": list(spec.image_size),
        "camera": scene.camera.camera.to_dict(), "version": VERSION,
    }
    with open(os.path.join(directory, "scene.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    C = spec.num_classes
    gt = VoxelGrid(spec.grid, np.eye(C)[scene.labels], scene.labels)
    write_voxel_grid(os.path.join(directory, "labels.vox"), gt)
    write_tensor(os.path.join(directory, "points.bin"), np.asarray(scene.points, dtype=np.float64))
    write_tensor(os.path.join(directory, "camera.bin"), np.asarray(scene.camera.values, dtype=np.float64))
    write_feature_volume(os.path.join(directory, "volume.fvol"), scene.volume)


def read_scene(directory):
    from .ldfa import CameraFeatureMap, PinholeCamera
    from .synthetic import SceneSpec, Shape, SyntheticScene, lidar_volume

    try:
        with open(os.path.join(directory, "scene.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        g = meta["grid"]
        grid = GridSpec(tuple(g["origin"]), float(g["voxel_size"]), tuple(g["shape"]))
        shapes = [Shape(s["kind"], int(s["label"]), s["params"]) for s in meta["shapes"]]
        spec = SceneSpec(grid, shapes, int(meta["num_classes"]), meta["points_per_voxel"],
                         meta["intensity_noise"], meta["camera_noise"], tuple(meta["image_size"]))
        cam = PinholeCamera.from_dict(meta["camera"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot read scene in {directory}: {exc}") from None
    labels = read_voxel_grid(os.path.join(directory, "labels.vox")).labels
    if labels.shape != tuple(grid.shape):
        raise FormatError("label grid does not match scene grid")
    points = read_tensor(os.path.join(directory, "points.bin"))
    image = read_tensor(os.path.join(directory, "camera.bin"))
    return SyntheticScene(spec, labels, points, lidar_volume(points, grid),
                          CameraFeatureMap(image, cam), int(meta["seed"]))


def export_grid_text(grid: VoxelGrid, include_empty: bool = False, empty_label: int = 0) -> str:
    """One ``x y z label`` line per voxel centre (occupied voxels only by default)."""
    labels = grid.labels if grid.labels is not None else np.argmax(grid.logits, axis=-1)
    centers = grid.spec.centers()
    flat = labels.reshape(-1)
    keep = np.ones(flat.size, bool) if include_empty else flat != empty_label
    return "".join(f"{x!r} {y!r} {z!r} {int(k)}\n" for (x, y, z), k in zip(centers[keep].tolist(), flat[keep]))
