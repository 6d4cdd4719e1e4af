import pickle

import numpy as np
import pytest

from aikd.memory import ExemplarMemory
from aikd.protocol import (ConfigError, LabeledDataset, ProtocolSpec, RoundSpec, StateError, load_dataset,
                           make_class_splits, round_training_set, synthetic_dataset)


class TestClassSplits:
    def test_b0_ten_rounds(self):
        rounds = make_class_splits(ProtocolSpec(100, 0, 10, 1993))
        assert [len(r.class_ids) for r in rounds] == [10] * 10
        assert sorted(c for r in rounds for c in r.class_ids) == list(range(100))

    def test_b50_two_rounds(self):
        rounds = make_class_splits(ProtocolSpec(100, 50, 2, 0))
        assert [len(r.class_ids) for r in rounds] == [50, 25, 25]
        assert [r.round_index for r in rounds] == [0, 1, 2]

    def test_degenerate_single_round(self):
        (only,) = make_class_splits(ProtocolSpec(10, 0, 1, 0))
        assert sorted(only.class_ids) == list(range(10))

    def test_not_divisible(self):
        with pytest.raises(ConfigError):
            make_class_splits(ProtocolSpec(100, 0, 3, 0))

    def test_seed_permutes_order_only(self):
        a = make_class_splits(ProtocolSpec(20, 0, 4, 1))
        b = make_class_splits(ProtocolSpec(20, 0, 4, 1))
        c = make_class_splits(ProtocolSpec(20, 0, 4, 2))
        assert a == b
        assert a != c
        assert [len(r.class_ids) for r in a] == [len(r.class_ids) for r in c]
        assert sorted(x for r in c for x in r.class_ids) == list(range(20))


def _toy(per_class=5, n_classes=6):
    x = np.arange(per_class * n_classes * 3 * 2 * 2, dtype=np.float32).reshape(-1, 3, 2, 2)
    y = np.repeat(np.arange(n_classes), per_class)
    return LabeledDataset(x, y, "train", tuple(range(n_classes)))


class TestRoundTrainingSet:
    def test_round_zero_new_only(self):
        data = _toy()
        d = round_training_set(RoundSpec(0, (0, 1)), data, ExemplarMemory("per_class", per_class=2))
        assert d.counts == {0: 5, 1: 5}

    def test_with_memory(self):
        data = _toy()
        mem = ExemplarMemory("per_class", per_class=2)
        mem.images = {0: data.images[:2], 1: data.images[5:7]}
        d = round_training_set(RoundSpec(1, (2, 3)), data, mem)
        assert d.counts == {0: 2, 1: 2, 2: 5, 3: 5}
        assert len(d) == 5 * 2 + 2 * 2

    def test_overlap_is_state_error(self):
        data = _toy()
        mem = ExemplarMemory("per_class", per_class=2)
        mem.images = {2: data.images[10:12]}
        with pytest.raises(StateError):
            round_training_set(RoundSpec(1, (2, 3)), data, mem)


def test_label_outside_class_set():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 5]), "train", (0, 1))


class TestLoaders:
    def test_synthetic_counts_and_determinism(self):
        tr, te = synthetic_dataset(num_classes=8, train_per_class=7, test_per_class=3, image_size=16)
        assert tr.counts == {c: 7 for c in range(8)} and te.counts == {c: 3 for c in range(8)}
        assert tr.images.shape == (56, 3, 16, 16)
        tr2, _ = synthetic_dataset(num_classes=8, train_per_class=7, test_per_class=3, image_size=16)
        assert np.array_equal(tr.images, tr2.images)

    def test_descriptor_twice_identical(self):
        desc = {"kind": "synthetic", "image_size": 16, "synthetic": {"num_classes": 4, "train_per_class": 3}}
        a, _ = load_dataset(desc)
        b, _ = load_dataset(desc)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_cifar_binary_layout(self, tmp_path):
        rng = np.random.default_rng(0)
        for split, n in (("train", 6), ("test", 4)):
            rec = np.zeros((n, 3074), np.uint8)
            rec[:, 0] = 1
            rec[:, 1] = np.arange(n) % 100
            rec[:, 2:] = rng.integers(0, 256, (n, 3072))
            rec.tofile(tmp_path / f"{split}.bin")
        train, test = load_dataset({"kind": "cifar-archive", "path": str(tmp_path)})
        assert train.images.shape == (6, 3, 32, 32) and len(test) == 4
        assert train.images.max() <= 1.0
        assert train.counts == {i: 1 for i in range(6)}

    def test_cifar_pickle_layout_reports_actual_counts(self, tmp_path):
        for split, per in (("train", 3), ("test", 1)):
            labels = [c for c in range(100) for _ in range(per)]
            d = {"data": np.zeros((len(labels), 3072), np.uint8), "fine_labels": labels}
            with open(tmp_path / split, "wb") as fh:
                pickle.dump(d, fh)
        train, test = load_dataset({"kind": "cifar-archive", "path": str(tmp_path)})
        assert set(train.counts.values()) == {3} and set(test.counts.values()) == {1}

    def test_cifar_label_out_of_range(self, tmp_path):
        for split in ("train", "test"):
            rec = np.zeros((1, 3074), np.uint8)
            rec[0, 1] = 150
            rec.tofile(tmp_path / f"{split}.bin")
        with pytest.raises(ValueError):
            load_dataset({"kind": "cifar-archive", "path": str(tmp_path)})

    def test_folder_layout(self, tmp_path):
        from PIL import Image

        for split in ("train", "test"):
            for cls in ("cat", "dog"):
                d = tmp_path / split / cls
                d.mkdir(parents=True)
                for i in range(2):
                    Image.new("RGB", (20, 20), (i * 100, 0, 0)).save(d / f"{i}.png")
        desc = {"kind": "folder", "path": tmp_path.name, "image_size": 8}
        train, test = load_dataset(desc, data_root=tmp_path.parent)
        assert train.images.shape == (4, 3, 8, 8)
        assert train.counts == {0: 2, 1: 2} and test.counts == {0: 2, 1: 2}

    def test_missing_path(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset({"kind": "cifar-archive", "path": str(tmp_path / "nope")})
