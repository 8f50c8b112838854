import struct

import numpy as np
import pytest

from dkfac import data
from dkfac.errors import FormatError


class TestSynthetic:
    def test_deterministic(self):
        a = data.gen_synthetic(3, 50, 4, 5, 2.0)
        b = data.gen_synthetic(3, 50, 4, 5, 2.0)
        assert a.inputs.tobytes() == b.inputs.tobytes() and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.inputs, data.gen_synthetic(4, 50, 4, 5, 2.0).inputs)

    def test_balanced_labels(self):
        ds = data.gen_synthetic(0, 100, 3, 5, 1.0)
        assert np.bincount(ds.labels).tolist() == [20] * 5
        assert ds.inputs.shape == (100, 3) and ds.sample_shape == (3,)

    def test_split(self):
        tr, va = data.synthetic_splits(0, 80, 20, 3, 2, 1.0)
        full = data.gen_synthetic(0, 100, 3, 2, 1.0)
        np.testing.assert_array_equal(va.inputs, full.inputs[80:])
        assert (len(tr), len(va), va.split) == (80, 20, "val")
        with pytest.raises(ValueError):
            data.train_val_split(full, 100)


class TestSharding:
    def test_contiguous_slices(self):
        ds = data.gen_synthetic(0, 20, 2, 2, 1.0)
        batches = list(data.shard_batches(ds, 1, 8, 2, seed=5))
        assert len(batches) == 2
        perm = data.epoch_permutation(5, 1, 20)
        np.testing.assert_array_equal(batches[1][1][0], ds.inputs[perm[12:16]])

    def test_epochs_differ(self):
        assert not np.array_equal(data.epoch_permutation(0, 0, 10), data.epoch_permutation(0, 1, 10))

    def test_indivisible(self):
        with pytest.raises(ValueError):
            list(data.shard_batches(data.gen_synthetic(0, 9, 2, 2, 1.0), 0, 9, 2, 0))


class TestIdx:
    def test_roundtrip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (6, 4, 3)).astype(np.uint8)
        labels = np.array([0, 1, 2, 3, 4, 1], dtype=np.uint8)
        ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
        data.write_idx(ip, lp, imgs, labels)
        ds = data.load_idx(ip, lp)
        assert ds.inputs.shape == (6, 12) and ds.sample_shape == (1, 4, 3)
        np.testing.assert_array_equal(ds.inputs, imgs.reshape(6, 12) / 255.0)
        assert ds.n_classes == 5

    def test_known_bytes(self, tmp_path):
        ip, lp = tmp_path / "i", tmp_path / "l"
        ip.write_bytes(struct.pack(">IIII", 0x803, 1, 1, 2) + bytes([0, 255]))
        lp.write_bytes(struct.pack(">II", 0x801, 1) + bytes([7]))
        ds = data.load_idx(ip, lp, n_classes=10)
        assert ds.inputs.tolist() == [[0.0, 1.0]] and ds.labels.tolist() == [7]

    def test_bad_magic(self, tmp_path):
        ip, lp = tmp_path / "i", tmp_path / "l"
        data.write_idx(ip, lp, np.zeros((1, 2, 2)), [0])
        with pytest.raises(FormatError, match="magic"):
            data.load_idx(lp, ip)

    def test_truncated(self, tmp_path):
        ip, lp = tmp_path / "i", tmp_path / "l"
        data.write_idx(ip, lp, np.zeros((2, 2, 2)), [0, 1])
        ip.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(FormatError, match="truncated"):
            data.load_idx(ip, lp)
        ip.write_bytes(b"\x00\x00")
        with pytest.raises(FormatError):
            data.load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp = tmp_path / "i", tmp_path / "l"
        data.write_idx(ip, lp, np.zeros((2, 2, 2)), [0, 1, 1])
        with pytest.raises(FormatError, match="labels"):
            data.load_idx(ip, lp)


def _train_linear(difficulty, seed=0):
    from dkfac import nn, trainer

    tr, va = data.synthetic_splits(seed, 1000, 500, 10, 5, difficulty)
    model = nn.Model([nn.LayerSpec.linear(10, 5)], (10,), seed)
    cfg = trainer.TrainConfig(epochs=5, global_batch=50, base_lr=0.1, warmup_epochs=0, lr_milestones=(),
                              optimizer="sgd", label_smoothing=0.0, seed=seed)
    t = trainer.Trainer(cfg, tr, va, model=model)
    t.run()
    return trainer.evaluate(t.model, va)


def test_difficulty_ceiling():
    assert _train_linear(10.0) >= 0.95


def test_difficulty_zero_is_chance():
    assert abs(_train_linear(0.0) - 0.2) <= 0.06


def test_two_4x4_images_roundtrip(tmp_path):
    imgs = np.arange(32, dtype=np.uint8).reshape(2, 4, 4)
    ip, lp = tmp_path / "i", tmp_path / "l"
    data.write_idx(ip, lp, imgs, [1, 0])
    assert len(ip.read_bytes()) == 16 + 2 * 4 * 4
    ds = data.load_idx(ip, lp)
    np.testing.assert_array_equal(np.round(ds.inputs * 255).astype(np.uint8).reshape(2, 4, 4), imgs)
    assert ds.labels.tolist() == [1, 0]
