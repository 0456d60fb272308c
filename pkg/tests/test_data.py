import struct

import numpy as np
import pytest

from bvit.data import (HEADER_SIZE, MAGIC, Dataset, file_size, load_dataset, normalize, prototypes, save_dataset,
                       synth_dataset)
from bvit.errors import DataError


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a.bvds", tmp_path / "b.bvds"
    save_dataset(synth_dataset(3, 64, noise=128), a)
    save_dataset(synth_dataset(3, 64, noise=128), b)
    assert a.read_bytes() == b.read_bytes()


def test_streams_differ_but_share_prototypes():
    a, b = synth_dataset(3, 64, noise=0, stream=0), synth_dataset(3, 64, noise=0, stream=1)
    assert not np.array_equal(a.labels, b.labels)
    protos = prototypes(3).astype(np.uint8)
    np.testing.assert_array_equal(a.images, protos[a.labels])
    np.testing.assert_array_equal(b.images, protos[b.labels])


def test_noise_zero_nearest_prototype():
    ds = synth_dataset(5, 200, noise=0)
    protos = prototypes(5).reshape(4, -1).astype(np.float64)
    flat = ds.images.reshape(len(ds), -1).astype(np.float64)
    pred = np.argmin(((flat[:, None, :] - protos[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) == 1.0


def test_noisy_nearest_prototype_still_separable():
    ds = synth_dataset(0, 256, noise=128)
    protos = prototypes(0).reshape(4, -1).astype(np.float64)
    flat = ds.images.reshape(len(ds), -1).astype(np.float64)
    pred = np.argmin(((flat[:, None, :] - protos[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) == 1.0


def test_balanced_labels():
    ds = synth_dataset(1, 100, num_classes=4)
    np.testing.assert_array_equal(np.bincount(ds.labels), [25, 25, 25, 25])


def test_file_size(tmp_path):
    assert file_size(1024, 32, 32, 3) == HEADER_SIZE + 1024 * 3072 + 1024 * 2 == 3_147_804
    path = tmp_path / "d.bvds"
    save_dataset(synth_dataset(0, 1024), path)
    assert path.stat().st_size == 3_147_804


def test_round_trip(tmp_path):
    ds = synth_dataset(2, 10, image_hw=(8, 6), channels=1, num_classes=3)
    path = tmp_path / "d.bvds"
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.meta == (10, 8, 6, 1, 3)


def test_header_layout(tmp_path):
    path = tmp_path / "d.bvds"
    save_dataset(synth_dataset(0, 5, image_hw=(4, 4), num_classes=2), path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack("<5I", raw[8:28]) == (5, 4, 4, 3, 2)


def test_truncated_reports_sizes(tmp_path):
    path = tmp_path / "d.bvds"
    save_dataset(synth_dataset(0, 8, image_hw=(4, 4)), path)
    full = path.read_bytes()
    path.write_bytes(full[:-3])
    with pytest.raises(DataError, match=f"expected {len(full)} bytes, got {len(full) - 3}"):
        load_dataset(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "d.bvds"
    save_dataset(synth_dataset(0, 8, image_hw=(4, 4)), path)
    path.write_bytes(b"NOTADATA" + path.read_bytes()[8:])
    with pytest.raises(DataError, match="magic"):
        load_dataset(path)


def test_label_out_of_range(tmp_path):
    path = tmp_path / "d.bvds"
    save_dataset(synth_dataset(0, 8, image_hw=(4, 4), num_classes=4), path)
    raw = bytearray(path.read_bytes())
    raw[-2:] = struct.pack("<H", 4)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="out of range"):
        load_dataset(path)


def test_missing_and_empty(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_dataset(tmp_path / "nope.bvds")
    path = tmp_path / "empty.bvds"
    path.write_bytes(MAGIC + struct.pack("<5I", 0, 4, 4, 3, 2))
    with pytest.raises(DataError, match="empty"):
        load_dataset(path)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4, 3)), np.array([0, 2]), num_classes=2)
    with pytest.raises(DataError):
        Dataset(np.zeros((0, 4, 4, 3)), np.zeros(0), num_classes=2)


def test_normalize():
    px = np.array([[[[0, 255, 128]]]], dtype=np.uint8)
    out = normalize(px, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0, 128 / 255 * 2 - 1], atol=1e-6)
