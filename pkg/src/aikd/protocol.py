"""Class-incremental round construction and dataset loading."""

from __future__ import annotations

import pickle
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .memory import ExemplarMemory


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    total_classes: int
    initial_classes: int = 0
    num_incremental_rounds: int = 1
    class_order_seed: int = 0


@dataclass(frozen=True)
class RoundSpec:
    round_index: int
    class_ids: tuple[int, ...]


@dataclass
class LabeledDataset:
    images: np.ndarray  # float32, N x C x H x W
    labels: np.ndarray  # int64, N
    split: str = "train"
    class_set: tuple[int, ...] | None = None
    counts: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be N x C x H x W with one label per image")
        if self.class_set is not None:
            bad = set(np.unique(self.labels).tolist()) - set(self.class_set)
            if bad:
                raise ValueError(f"labels outside declared class set: {sorted(bad)}")
        self.counts = {int(k): int(v) for k, v in sorted(Counter(self.labels.tolist()).items())}

    def __len__(self):
        return len(self.labels)

    def subset(self, class_ids) -> "LabeledDataset":
        mask = np.isin(self.labels, np.asarray(list(class_ids), dtype=np.int64))
        return LabeledDataset(self.images[mask], self.labels[mask], self.split, self.class_set)


def make_class_splits(spec: ProtocolSpec) -> list[RoundSpec]:
    """Split a seeded permutation of the classes into rounds.

    With ``initial_classes == 0`` every round gets an equal share; otherwise
    round 0 holds ``initial_classes`` and the rest is split equally over
    ``num_incremental_rounds`` further rounds.
    """
    total, init, rounds = spec.total_classes, spec.initial_classes, spec.num_incremental_rounds
    if total < 1 or rounds < 1 or not 0 <= init < total:
        raise ConfigError(f"invalid protocol {spec}")
    if (total - init) % rounds:
        raise ConfigError(
            f"{total - init} incremental classes not divisible into {rounds} rounds"
        )
    order = np.random.default_rng(spec.class_order_seed).permutation(total).tolist()
    step = (total - init) // rounds
    sizes = ([init] if init else []) + [step] * rounds
    out, start = [], 0
    for t, size in enumerate(sizes):
        out.append(RoundSpec(t, tuple(order[start:start + size])))
        start += size
    return out


def round_training_set(round_spec: RoundSpec, full_data: LabeledDataset,
                       memory: "ExemplarMemory | None") -> LabeledDataset:
    """New-class training samples of this round plus every stored exemplar."""
    new = full_data.subset(round_spec.class_ids)
    if memory is None or memory.total == 0:
        return new
    overlap = set(memory.class_ids) & set(round_spec.class_ids)
    if overlap:
        raise StateError(f"memory already holds classes of this round: {sorted(overlap)}")
    mem_x, mem_y = memory.as_arrays()
    return LabeledDataset(
        np.concatenate([new.images, mem_x]),
        np.concatenate([new.labels, mem_y]),
        full_data.split,
        full_data.class_set,
    )


# -- loaders ---------------------------------------------------------------

def _normalize(images: np.ndarray, mean, std) -> np.ndarray:
    if mean is None or std is None:
        return images
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (images - mean) / std


def synthetic_dataset(num_classes: int = 8, train_per_class: int = 100, test_per_class: int = 50,
                      image_size: int = 16, channels: int = 3, noise: float = 0.6,
                      max_shift: int = 2, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded toy image classes built from shared parts.

    Each class is a fixed mixture of a few smooth basis patterns drawn from a
    pool shared by all classes, so later classes reuse features of earlier
    ones. Samples add a random translation, contrast jitter and pixel noise.
    """
    rng = np.random.default_rng(seed)
    n_basis = max(4, num_classes)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    basis = []
    for _ in range(n_basis):
        fx, fy = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.05)
        color = rng.normal(size=(channels, 1, 1))
        basis.append(color * (wave * blob)[None])
    basis = np.stack(basis)
    protos = []
    for _ in range(num_classes):
        idx = rng.choice(n_basis, size=3, replace=False)
        w = rng.uniform(0.5, 1.5, size=3)
        protos.append(np.tensordot(w, basis[idx], axes=1))
    protos = np.stack(protos)
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)

    def draw(per_class):
        xs, ys = [], []
        for c in range(num_classes):
            for _ in range(per_class):
                dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
                img = np.roll(protos[c], (int(dy), int(dx)), axis=(1, 2))
                img = img * rng.uniform(0.7, 1.3) + noise * rng.normal(size=img.shape)
                xs.append(img)
                ys.append(c)
        return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)

    classes = tuple(range(num_classes))
    tr_x, tr_y = draw(train_per_class)
    te_x, te_y = draw(test_per_class)
    return (LabeledDataset(tr_x, tr_y, "train", classes), LabeledDataset(te_x, te_y, "test", classes))


def _load_cifar100(path: Path) -> tuple[LabeledDataset, LabeledDataset]:
    """Read either the binary (``train.bin``) or python-pickle CIFAR-100 layout."""
    classes = tuple(range(100))

    def from_bin(f):
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size % 3074:
            raise ValueError(f"{f} is not a CIFAR-100 binary file")
        raw = raw.reshape(-1, 3074)
        return raw[:, 2:].reshape(-1, 3, 32, 32), raw[:, 1].astype(np.int64)

    def from_pickle(f):
        with open(f, "rb") as fh:
            d = pickle.load(fh, encoding="latin1")
        return np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32), np.asarray(d["fine_labels"])

    out = []
    for split in ("train", "test"):
        for candidate, reader in ((path / f"{split}.bin", from_bin), (path / split, from_pickle)):
            if candidate.is_file():
                x, y = reader(candidate)
                break
        else:
            raise FileNotFoundError(f"no CIFAR-100 {split} file under {path}")
        if y.size and (y.min() < 0 or y.max() > 99):
            raise ValueError(f"label out of range in {split} split")
        out.append(LabeledDataset(x.astype(np.float32) / 255.0, y, split, classes))
    return out[0], out[1]


def _load_folder(path: Path, image_size: int) -> tuple[LabeledDataset, LabeledDataset]:
    """``path/{train,test}/<class_name>/*`` with class ids from sorted class names."""
    from PIL import Image

    names = sorted(p.name for p in (path / "train").iterdir() if p.is_dir())
    if not names:
        raise FileNotFoundError(f"no class folders under {path / 'train'}")
    ids = {n: i for i, n in enumerate(names)}
    out = []
    for split in ("train", "test"):
        xs, ys = [], []
        root = path / split
        if not root.is_dir():
            raise FileNotFoundError(f"missing split folder {root}")
        for cls_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            if cls_dir.name not in ids:
                raise ValueError(f"class {cls_dir.name!r} in {split} but not in train")
            for f in sorted(cls_dir.iterdir()):
                if not f.is_file():
                    continue
                img = Image.open(f).convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                xs.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
                ys.append(ids[cls_dir.name])
        out.append(LabeledDataset(np.stack(xs), np.asarray(ys), split, tuple(range(len(names)))))
    return out[0], out[1]


def load_dataset(descriptor: dict, data_root: str | Path | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Load (train, test) from a dataset descriptor.

    ``descriptor`` keys: ``kind`` (synthetic | folder | cifar-archive),
    ``path``, ``image_size``, ``mean``/``std`` and, for synthetic data, a
    ``synthetic`` dict of generator arguments. Relative paths resolve against
    ``data_root``.
    """
    kind = descriptor["kind"]
    if kind == "synthetic":
        opts = dict(descriptor.get("synthetic") or {})
        opts.setdefault("image_size", descriptor.get("image_size", 16))
        train, test = synthetic_dataset(**opts)
    else:
        if not descriptor.get("path"):
            raise ValueError(f"dataset kind {kind!r} needs a path")
        path = Path(descriptor["path"])
        if not path.is_absolute() and data_root is not None:
            path = Path(data_root) / path
        if not path.exists():
            raise FileNotFoundError(f"dataset path {path} does not exist")
        if kind == "cifar-archive":
            train, test = _load_cifar100(path)
        elif kind == "folder":
            train, test = _load_folder(path, descriptor.get("image_size", 32))
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
    mean, std = descriptor.get("mean"), descriptor.get("std")
    train.images = _normalize(train.images, mean, std).astype(np.float32)
    test.images = _normalize(test.images, mean, std).astype(np.float32)
    return train, test
