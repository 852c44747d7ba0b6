import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaussocc import io
from gaussocc.config import ConfigError, ModelConfig, config_hash, from_ini, to_ini, with_overrides
from gaussocc.ldfa import FeatureVolume
from gaussocc.numerics import make_rng
from gaussocc.scene import GaussianSet, GridSpec, VoxelGrid
from gaussocc.synthetic import generate_scene, random_scene_spec
from gaussocc.training import TrainState


def small_config(**kw):
    cfg = from_ini("""
[model]
num_gaussians = 6
feat_dim = 4
[grid]
shape = 6, 6, 4
[lift]
depth_planes = 4
chunks = 2
[head]
blocks = 1
state_dim = 2
bands = 1
""")
    return with_overrides(cfg, **kw) if kw else cfg


def voxel_grid(seed=0, shape=(3, 4, 2), C=3):
    rng = make_rng(seed)
    logits = rng.normal(size=shape + (C,)).astype(np.float32).astype(np.float64)
    return VoxelGrid(GridSpec((0.5, -1.0, 0.25), 0.5, shape), logits, np.argmax(logits, axis=-1))


def gaussian_set(seed=0, n=5, C=3, F=2):
    rng = make_rng(seed)
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    return GaussianSet(f32(rng.normal(size=(n, 3))), f32(rng.normal(size=(n, 4))),
                       f32(rng.normal(size=(n, 3))), f32(rng.normal(size=n)),
                       f32(rng.normal(size=(n, C))), f32(rng.normal(size=(n, F))))


def files_bytes(directory):
    return {name: open(os.path.join(directory, name), "rb").read() for name in sorted(os.listdir(directory))}


# --------------------------------------------------------------------------
# binary formats
# --------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_voxel_grid_round_trip(seed, tmp_path):
    g = voxel_grid(seed)
    data = io.encode_voxel_grid(g)
    back = io.decode_voxel_grid(data)
    assert io.encode_voxel_grid(back) == data
    assert np.array_equal(back.labels, g.labels)
    assert np.array_equal(back.logits, g.logits)
    io.write_voxel_grid(tmp_path / "a.vox", back)
    assert (tmp_path / "a.vox").read_bytes() == data


def test_feature_volume_round_trip():
    vol = FeatureVolume(make_rng(1).normal(size=(2, 3, 4, 5)), (0.0, 1.0, 2.0), 0.25)
    data = io.encode_feature_volume(vol)
    assert io.encode_feature_volume(io.decode_feature_volume(data)) == data


def test_gaussian_round_trip(tmp_path):
    g = gaussian_set()
    io.write_gaussians(tmp_path / "g.bin", g)
    back = io.read_gaussians(tmp_path / "g.bin")
    first = (tmp_path / "g.bin").read_bytes(), (tmp_path / "g.bin.json").read_bytes()
    io.write_gaussians(tmp_path / "h.bin", back)
    assert ((tmp_path / "h.bin").read_bytes(), (tmp_path / "h.bin.json").read_bytes()) == first
    assert len(back) == 5 and back.num_classes == 3 and back.feature_dim == 2


@given(st.sampled_from(["<f8", "<f4", "<i8", "<u2"]), st.lists(st.integers(0, 4), max_size=3))
def test_tensor_round_trip(dtype, shape):
    a = (np.arange(int(np.prod(shape, dtype=int))) % 7).astype(dtype).reshape(shape)
    data = io.encode_tensor(a)
    back = io.decode_tensor(data)
    assert back.dtype == a.dtype and back.shape == a.shape and np.array_equal(back, a)
    assert io.encode_tensor(back) == data


def test_tensor_rejects_unknown_dtype():
    with pytest.raises(io.FormatError):
        io.encode_tensor(np.zeros(3, dtype=np.complex128))


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing"])
def test_corrupt_grid_files_rejected(mutate):
    data = bytearray(io.encode_voxel_grid(voxel_grid()))
    if mutate == "magic":
        data[0:4] = b"XXXX"
    elif mutate == "version":
        data[12] = 9
    elif mutate == "truncate":
        data = data[:-3]
    else:
        data += b"\0"
    with pytest.raises(io.FormatError):
        io.decode_voxel_grid(bytes(data))


def test_wrong_kind_rejected():
    with pytest.raises(io.FormatError):
        io.decode_tensor(io.encode_voxel_grid(voxel_grid()))


def test_bad_sidecar_rejected():
    body, _ = io.encode_gaussians(gaussian_set())
    with pytest.raises(io.FormatError):
        io.decode_gaussians(body, "{not json")
    with pytest.raises(io.FormatError):
        io.decode_gaussians(body, '{"count": 5, "num_classes": 3, "feature_dim": 7}')


def test_labels_must_fit_u16():
    g = voxel_grid()
    g.labels[0, 0, 0] = 70000
    with pytest.raises(io.FormatError):
        io.encode_voxel_grid(g)


# --------------------------------------------------------------------------
# scenes and export
# --------------------------------------------------------------------------

def test_scene_directory_round_trip(tmp_path):
    grid = GridSpec((0.0, 0.0, 0.0), 0.5, (8, 8, 4))
    spec = random_scene_spec(make_rng(2), grid)
    spec.image_size = (6, 8)
    sc = generate_scene(spec, 2)
    io.write_scene(tmp_path / "a", sc)
    back = io.read_scene(tmp_path / "a")
    io.write_scene(tmp_path / "b", back)
    assert files_bytes(tmp_path / "a") == files_bytes(tmp_path / "b")
    assert np.array_equal(back.labels, sc.labels)


def test_missing_scene_is_format_error(tmp_path):
    with pytest.raises(io.FormatError):
        io.read_scene(tmp_path)


def test_export_one_voxel_one_line():
    labels = np.zeros((3, 3, 3), dtype=int)
    labels[1, 2, 0] = 2
    g = VoxelGrid(GridSpec((0.0, 0.0, 0.0), 0.5, (3, 3, 3)), np.zeros((3, 3, 3, 3)), labels)
    text = io.export_grid_text(g)
    assert text == "0.75 1.25 0.25 2\n"
    assert len(io.export_grid_text(g, include_empty=True).splitlines()) == 27


# --------------------------------------------------------------------------
# config and checkpoint
# --------------------------------------------------------------------------

def test_config_round_trip_bit_exact():
    cfg = with_overrides(ModelConfig(), **{"optim.lr": 0.1 + 0.2, "smooth.xi": 1e-300, "init_scale": 1 / 3,
                                           "fusion.mode": "concat", "lift.use_ldfa": False,
                                           "grid.origin": (-0.1, 2.5, 1e-17)})
    back = from_ini(to_ini(cfg))
    assert back == cfg
    assert back.optim.lr == 0.1 + 0.2
    assert to_ini(back) == to_ini(cfg)
    assert config_hash(back) == config_hash(cfg)


def test_config_hash_changes_with_fields():
    assert config_hash(ModelConfig()) != config_hash(with_overrides(ModelConfig(), seed=1))


@pytest.mark.parametrize("text", [
    "[model]\nnum_gaussians = 0\n",
    "[model]\nbogus = 1\n",
    "[nonsense]\n",
    "[fusion]\nmode = mean\n",
    "[lift]\nuse_ldfa = maybe\n",
    "[lift]\nchunks = 40\n",
    "[head]\nbits = 0\n",
    "[loss]\nce = 0.0\nlovasz = 0.0\n",
    "no section header",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        from_ini(text)


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    state = TrainState.create(cfg)
    state.step = 7
    rng = state.rng()
    rng.random(3)
    state.rng_state = rng.bit_generator.state
    path = tmp_path / "c.ckpt"
    io.write_checkpoint(path, state, cfg)
    back, cfg2 = io.read_checkpoint(path)
    assert cfg2 == cfg and back.step == 7
    assert back.rng().random() == state.rng().random()
    io.write_checkpoint(tmp_path / "d.ckpt", back, cfg2)
    assert (tmp_path / "d.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_config_mismatch(tmp_path):
    state = TrainState.create(small_config())
    data = io.encode_checkpoint(state, to_ini(small_config(feat_dim=8)))
    with pytest.raises(io.FormatError):
        io.decode_checkpoint(data)
