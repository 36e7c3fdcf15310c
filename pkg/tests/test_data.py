import numpy as np
import pytest
from PIL import Image

from lightdepth import data
from lightdepth.data import DataError, SyntheticDataset


def write_pair(root, name, rgb, depth_raw):
    (root / "rgb").mkdir(exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    Image.fromarray(rgb, "RGB").save(root / "rgb" / name)
    Image.fromarray(depth_raw).save(root / "depth" / name)
    return f"rgb/{name},depth/{name}"


@pytest.fixture
def tiny_manifest(tmp_path):
    rows = []
    for i in range(2):
        rgb = np.full((4, 6, 3), 255, dtype=np.uint8)
        depth = np.full((4, 6), 5000, dtype=np.uint16)
        depth[0, 0] = 0
        depth[1, 1] = 12000
        rows.append(write_pair(tmp_path, f"{i}.png", rgb, depth))
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    return tmp_path / "m.csv"


# --------------------------------------------------------------- manifest
def test_manifest_preserves_order(tiny_manifest):
    m = data.load_manifest(tiny_manifest)
    assert len(m) == 2
    assert m.ids() == ["rgb/0.png", "rgb/1.png"]


def test_missing_depth_names_row(tiny_manifest):
    text = tiny_manifest.read_text() + "rgb/0.png,depth/nope.png\n"
    tiny_manifest.write_text(text)
    with pytest.raises(DataError, match="row 3"):
        data.load_manifest(tiny_manifest)


def test_malformed_row(tiny_manifest):
    tiny_manifest.write_text("rgb/0.png\n")
    with pytest.raises(DataError, match="row 1"):
        data.load_manifest(tiny_manifest)


def test_duplicate_ids(tiny_manifest):
    first = tiny_manifest.read_text().splitlines()[0]
    tiny_manifest.write_text(f"{first}\n{first}\n")
    with pytest.raises(DataError, match="duplicate"):
        data.load_manifest(tiny_manifest)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        data.load_manifest(tmp_path / "nope.csv")


# ---------------------------------------------------------------- samples
def test_sample_units_and_mask(tiny_manifest):
    s = data.load_sample(data.load_manifest(tiny_manifest), 0)
    assert s.rgb.shape == (3, 4, 6) and s.rgb.dtype == np.float32
    assert np.all(s.rgb == 1.0)
    assert s.depth.depth[2, 2] == 5.0
    assert not s.depth.valid[0, 0]
    assert not s.depth.valid[1, 1]  # beyond 10 m
    assert s.depth.valid.sum() == 22


def test_extent_mismatch(tmp_path):
    row = write_pair(tmp_path, "a.png", np.zeros((4, 4, 3), np.uint8), np.ones((4, 5), np.uint16))
    (tmp_path / "m.csv").write_text(row + "\n")
    with pytest.raises(DataError, match="extent"):
        data.load_sample(data.load_manifest(tmp_path / "m.csv"), 0)


def test_eight_bit_depth_scale(tmp_path):
    row = write_pair(tmp_path, "a.png", np.zeros((2, 2, 3), np.uint8), np.full((2, 2), 255, np.uint8))
    (tmp_path / "m.csv").write_text(row + "\n")
    m = data.load_manifest(tmp_path / "m.csv", depth_scale=data.EIGHT_BIT_DEPTH_SCALE)
    np.testing.assert_allclose(data.load_sample(m, 0).depth.depth, 10.0)


# ----------------------------------------------------------- augmentation
def test_flip_twice_is_identity():
    s = data.synth_scene(3)
    back = data.flip_sample(data.flip_sample(s))
    assert np.array_equal(back.rgb, s.rgb) and np.array_equal(back.depth.depth, s.depth.depth)


def test_flip_couples_rgb_and_depth():
    s = data.synth_scene(5)
    f = data.augment_flip(s, np.random.default_rng(0), p=1.0)
    assert np.array_equal(f.rgb, s.rgb[:, :, ::-1])
    assert np.array_equal(f.depth.depth, s.depth.depth[:, ::-1])
    assert np.array_equal(f.depth.valid, s.depth.valid[:, ::-1])


def test_flip_frequency():
    s = data.synth_scene(0, 16, 16)
    flips = sum(not np.array_equal(data.augment_flip(s, data.flip_rng(11, 0, i)).rgb, s.rgb)
                for i in range(10_000))
    assert 0.48 <= flips / 10_000 <= 0.52


# ---------------------------------------------------------------- batches
def test_batch_sizes():
    plan = data.make_batches(SyntheticDataset(5, 16, 16), 2, shuffle_seed=0, epoch=0)
    assert plan.sizes() == [2, 2, 1]
    assert [len(b.ids) for b in plan] == [2, 2, 1]


def test_batch_layout():
    b = data.make_batches(SyntheticDataset(3, 16, 16), 2, 0, 0).batch(0)
    assert b.rgb.shape == (2, 3, 16, 16) and b.rgb.dtype == np.float32
    assert b.target.shape == b.mask.shape == (2, 1, 8, 8)
    assert b.target[b.mask].min() >= 1.0 and b.target[b.mask].max() <= 10.0


def test_order_deterministic_and_epoch_dependent():
    for seed in range(20):
        assert np.array_equal(data.epoch_order(6, seed, 0), data.epoch_order(6, seed, 0))
    differs = [not np.array_equal(data.epoch_order(3, s, 0), data.epoch_order(3, s, 1))
               for s in range(20)]
    assert sum(differs) >= 10


def stream(workers):
    ds = SyntheticDataset(7, 16, 16, seed=2)
    plan = data.make_batches(ds, 3, shuffle_seed=9, epoch=1, augment=True, workers=workers)
    return [(b.rgb.tobytes(), b.target.tobytes(), b.mask.tobytes(), tuple(b.ids)) for b in plan]


def test_stream_identical_across_worker_counts():
    assert stream(1) == stream(1) == stream(4)


def test_area_downsample_skips_invalid():
    vals = np.array([[2.0, 4.0], [6.0, 0.0]])
    valid = np.array([[True, True], [True, False]])
    out, ok = data.area_downsample2x(vals, valid)
    assert ok.all() and out[0, 0] == pytest.approx(4.0)
    out, ok = data.area_downsample2x(vals, np.zeros_like(valid))
    assert not ok.any()


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        data.make_batches(SyntheticDataset(0), 2, 0, 0)


# -------------------------------------------------------------- synthetic
def test_synth_deterministic_and_in_range():
    a, b = data.synth_scene(4), data.synth_scene(4)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth.depth, b.depth.depth)
    assert a.depth.depth.min() >= 1.0 and a.depth.depth.max() <= 10.0


def test_synth_seeds_are_distinct():
    maps = [data.synth_scene(s, 16, 16).depth.depth for s in range(100)]
    keys = {m.tobytes() for m in maps}
    assert len(keys) == 100


def test_written_dataset_round_trips(tmp_path):
    path = data.write_synthetic_dataset(tmp_path, 3, 16, 16, seed=1)
    m = data.load_manifest(path)
    s = data.load_sample(m, 1)
    ref = data.synth_scene(2, 16, 16)
    np.testing.assert_allclose(s.depth.depth, ref.depth.depth, atol=5e-4)
    np.testing.assert_allclose(s.rgb, ref.rgb, atol=0.5 / 255 + 1e-6)
