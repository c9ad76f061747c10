import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedverify import data as ds
from fedverify.errors import CapabilityError, ConfigError, FormatError


def test_synthetic_shapes_and_labels():
    d = ds.gen_synthetic(10, 64, 20, 0.3, 0.05, seed=1)
    assert len(d) == 200 and d.feature_dim == 64
    assert np.array_equal(d.class_histogram(), np.full(10, 20))
    assert d.image_shape == (8, 8, 1)


def test_synthetic_same_seed_bitwise_identical():
    a = ds.gen_synthetic(5, 16, 30, 0.2, 0.1, seed=7)
    b = ds.gen_synthetic(5, 16, 30, 0.2, 0.1, seed=7)
    c = ds.gen_synthetic(5, 16, 30, 0.2, 0.1, seed=8)
    assert a.x.tobytes() == b.x.tobytes() and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)


def test_no_rare_samples_within_six_sigma():
    spread = 0.2
    d = ds.gen_synthetic(4, 9, 200, spread, 0.0, seed=3)
    centers, _ = ds._synthetic_centers(4, 9, 3, 2, 0.35)
    dev = np.abs(d.x - centers[d.y])
    assert dev.max() <= 6 * spread


def test_rare_fraction_moves_samples_off_centre():
    spread = 0.05
    d = ds.gen_synthetic(3, 16, 100, spread, 0.2, seed=2)
    centers, _ = ds._synthetic_centers(3, 16, 2, 2, 0.35)
    # base noise has norm about spread * sqrt(16) = 0.2; rare clusters sit ~0.35 * 4 away
    far = np.linalg.norm(d.x - centers[d.y], axis=1) > 3 * spread * 4
    assert far.sum() == 3 * 20


def test_synthetic_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        ds.gen_synthetic(0, 4, 4)
    with pytest.raises(ConfigError):
        ds.gen_synthetic(2, 4, 4, cluster_spread=0.0)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        ds.Dataset(np.zeros((2, 3)), np.array([0, 5]), 3)
    with pytest.raises(ConfigError):
        ds.Dataset(np.array([[np.nan]]), np.array([0]), 2)
    with pytest.raises(ConfigError):
        ds.Dataset(np.zeros((1, 5)), np.array([0]), 2, (2, 2, 1))


# --- IDX ---


def _write_pair(tmp_path, images, labels):
    ds.write_idx(tmp_path / "img.idx", images)
    ds.write_idx(tmp_path / "lab.idx", labels)
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(2, 4, 6), dtype=np.uint8)
    labels = np.array([3, 9], dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, images, labels)
    d = ds.load_idx(ip, lp)
    assert d.image_shape == (4, 6, 1)
    assert np.array_equal(np.round(d.x * 255).astype(np.uint8).reshape(2, 4, 6), images)
    assert np.array_equal(d.y, labels)


def test_idx_downscale_averages_2x2_blocks(tmp_path):
    images = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
    ip, lp = _write_pair(tmp_path, images, np.array([1], dtype=np.uint8))
    d = ds.load_idx(ip, lp, downscale=True)
    expected = np.array([[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]]) / 4 / 255
    assert d.image_shape == (2, 2, 1)
    assert np.allclose(d.x[0], expected.ravel())


def test_idx_labels_with_image_magic_rejected(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    ds.write_idx(tmp_path / "img.idx", images)
    # a labels file carrying the images magic 0x00000803
    (tmp_path / "lab.idx").write_bytes(struct.pack(">I", 0x00000803) + struct.pack(">3I", 1, 2, 2) + bytes(4))
    with pytest.raises(FormatError, match="magic"):
        ds.load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")


def test_idx_truncated_reports_offset(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((3, 2, 2), dtype=np.uint8), np.zeros(3, dtype=np.uint8))
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-3])
    with pytest.raises(FormatError) as info:
        ds.load_idx(ip, lp)
    assert info.value.offset == len(raw) - 3


def _mnist_dir():
    d = os.environ.get("FEDVERIFY_MNIST_DIR")
    return Path(d) if d else None


@pytest.mark.skipif(_mnist_dir() is None, reason="set FEDVERIFY_MNIST_DIR to the MNIST IDX files")
def test_mnist_training_files():
    root = _mnist_dir()
    d = ds.load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    assert len(d) == 60000 and d.feature_dim == 784
    assert set(np.unique(d.y)) == set(range(10))
    small = ds.load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte", downscale=True)
    assert small.feature_dim == 196


# --- blob cache ---


def test_blob_round_trip(tmp_path):
    d = ds.gen_synthetic(3, 16, 5, seed=4)
    ds.save_dataset(tmp_path / "d.vfds", d)
    back = ds.load_dataset(tmp_path / "d.vfds")
    assert back.x.tobytes() == d.x.tobytes()
    assert np.array_equal(back.y, d.y)
    assert back.image_shape == d.image_shape and back.class_count == d.class_count
    assert ds.dataset_to_bytes(back) == ds.dataset_to_bytes(d)


def test_blob_bad_magic_and_truncation():
    raw = ds.dataset_to_bytes(ds.gen_synthetic(2, 4, 3, seed=0))
    with pytest.raises(FormatError):
        ds.dataset_from_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(FormatError):
        ds.dataset_from_bytes(raw[:-1])


# --- partitions ---


def test_iid_hundred_into_ten_blocks():
    p = ds.partition_iid(100, 10, seed=0)
    assert np.array_equal(p.sizes(), np.full(10, 10))


def test_iid_rejects_more_participants_than_samples():
    with pytest.raises(ConfigError):
        ds.partition_iid(5, 6, seed=0)


def test_dirichlet_large_alpha_close_to_iid():
    d = ds.gen_synthetic(10, 4, 200, seed=0)
    p = ds.partition_dirichlet(d, 10, 1e6, seed=0)
    for i in range(10):
        hist = np.bincount(d.y[p.indices(i)], minlength=10) / len(p.indices(i))
        assert np.abs(hist - 0.1).max() <= 0.05


def test_dirichlet_smaller_alpha_more_skewed():
    d = ds.gen_synthetic(10, 4, 100, seed=0)
    tv = {a: np.mean([ds.total_variation_from_global(d, ds.partition_dirichlet(d, 10, a, seed=s))
                      for s in range(20)]) for a in (0.5, 0.9)}
    assert tv[0.5] > tv[0.9]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(1, 20), st.integers(0, 1000))
def test_iid_partition_is_exact_cover(total, n, seed):
    if n > total:
        return
    p = ds.partition_iid(total, n, seed)
    joined = np.sort(np.concatenate([p.indices(i) for i in range(n)]))
    assert np.array_equal(joined, np.arange(total))
    assert p.sizes().max() - p.sizes().min() <= 1


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 50.0), st.integers(2, 8), st.integers(0, 1000))
def test_dirichlet_partition_is_exact_cover(alpha, n, seed):
    d = ds.gen_synthetic(4, 2, 25, seed=1)
    try:
        p = ds.partition_dirichlet(d, n, alpha, seed)
    except ConfigError:
        return  # very small alpha can fail to fill every block
    joined = np.sort(np.concatenate([p.indices(i) for i in range(n)]))
    assert np.array_equal(joined, np.arange(len(d)))


# --- triggers ---


def test_trigger_size5_opaque_on_32x32():
    shape = (32, 32, 1)
    x = np.random.default_rng(0).uniform(0, 0.5, size=32 * 32)
    out = ds.apply_trigger(x, ds.TriggerSpec(size=5, transparency=0.0), shape)
    changed = out != x
    assert changed.sum() == 25
    assert np.all(out[changed] == 1.0)
    img = changed.reshape(32, 32)
    assert img[27:, 27:].all()


def test_trigger_fully_transparent_is_identity():
    x = np.linspace(0, 1, 64)
    assert np.array_equal(ds.apply_trigger(x, ds.TriggerSpec(size=3, transparency=1.0), (8, 8, 1)), x)


def test_trigger_transparency_blend():
    x = np.full(64, 0.5)
    out = ds.apply_trigger(x, ds.TriggerSpec(size=2, transparency=0.6), (8, 8, 1))
    m = ds.TriggerSpec(size=2).mask((8, 8, 1))
    assert np.allclose(out[m], 0.4 + 0.6 * 0.5)
    assert np.array_equal(out[~m], x[~m])


@pytest.mark.parametrize("position,corner", [("top_left", (0, 0)), ("top_right", (0, 7)),
                                             ("bottom_left", (7, 0)), ("bottom_right", (7, 7))])
def test_trigger_positions(position, corner):
    m = ds.TriggerSpec(size=2, position=position).mask((8, 8, 1)).reshape(8, 8)
    assert m[corner] and m.sum() == 4


def test_trigger_validation():
    with pytest.raises(ConfigError):
        ds.TriggerSpec(size=0)
    with pytest.raises(ConfigError):
        ds.TriggerSpec(transparency=1.5)
    with pytest.raises(ConfigError):
        ds.TriggerSpec(size=9).mask((8, 8, 1))
    with pytest.raises(CapabilityError):
        ds.TriggerSpec().mask(None)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.sampled_from(ds.CORNERS), st.integers(0, 1000))
def test_opaque_trigger_idempotent(size, position, seed):
    shape = (8, 8, 1)
    trig = ds.TriggerSpec(size=size, transparency=0.0, position=position)
    x = np.random.default_rng(seed).uniform(size=(3, 64))
    once = ds.apply_trigger(x, trig, shape)
    assert np.array_equal(ds.apply_trigger(once, trig, shape), once)
