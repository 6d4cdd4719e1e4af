"""Exemplar replay buffer with herding selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocol import ConfigError


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy herding: pick ``m`` rows whose running mean tracks the class mean.

    At step k the chosen index minimizes ``||mu - mean(selected + [phi_i])||``
    over unselected rows; ties go to the lowest index.
    """
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim != 2:
        raise ValueError("features must be n x d")
    n = len(phi)
    if not 1 <= m <= n:
        raise ValueError(f"cannot select {m} exemplars from {n} samples")
    if not np.isfinite(phi).all():
        raise ValueError("features must be finite")
    mu = phi.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    chosen: list[int] = []
    for k in range(1, m + 1):
        cand = (running[None] + phi) / k
        dist = np.linalg.norm(mu[None] - cand, axis=1)
        dist[~available] = np.inf
        # distances within 1e-12 of the best count as ties; lowest index wins
        i = int(np.flatnonzero(dist <= dist.min() + 1e-12)[0])
        chosen.append(i)
        available[i] = False
        running += phi[i]
    return chosen


@dataclass
class ExemplarMemory:
    """Per-class exemplar lists kept in herding order.

    ``policy`` is ``"fixed_total"`` (``budget`` shared over all learned
    classes) or ``"per_class"`` (``per_class`` images for every class).
    """

    policy: str = "fixed_total"
    budget: int = 2000
    per_class: int = 20
    feature_source: str = "embedding/l2"
    images: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in ("fixed_total", "per_class"):
            raise ConfigError(f"unknown memory policy {self.policy!r}")

    @property
    def class_ids(self) -> list[int]:
        return list(self.images)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.images.values())

    def quota(self, n_classes: int) -> int:
        if self.policy == "per_class":
            return self.per_class
        q = self.budget // max(n_classes, 1)
        if q == 0:
            raise ConfigError(f"budget {self.budget} cannot hold one exemplar for each of {n_classes} classes")
        return q

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.images:
            return np.zeros((0,), np.float32), np.zeros((0,), np.int64)
        xs = [self.images[c] for c in self.class_ids]
        ys = [np.full(len(v), c, dtype=np.int64) for c, v in zip(self.class_ids, xs)]
        return np.concatenate(xs), np.concatenate(ys)

    def save(self, path: str | Path):
        ids = self.class_ids
        x, y = self.as_arrays()
        np.savez(
            path,
            images=x,
            labels=y,
            class_ids=np.asarray(ids, dtype=np.int64),
            policy=np.asarray(self.policy),
            budget=np.asarray(self.budget),
            per_class=np.asarray(self.per_class),
            feature_source=np.asarray(self.feature_source),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExemplarMemory":
        with np.load(path) as z:
            mem = cls(str(z["policy"]), int(z["budget"]), int(z["per_class"]), str(z["feature_source"]))
            x, y = z["images"], z["labels"]
            for c in z["class_ids"].tolist():
                # stored contiguously per class, already in herding order
                mem.images[int(c)] = x[y == c]
        return mem


def update_memory(memory: ExemplarMemory, new_classes: dict[int, tuple[np.ndarray, np.ndarray]],
                  learned_classes) -> ExemplarMemory:
    """Return a new memory holding exemplars for ``new_classes``.

    ``new_classes`` maps class id to ``(images, features)``; features are
    L2-normalized here before herding. Under the fixed-total policy existing
    lists are truncated to the new quota (a prefix of their herding order).
    """
    already = set(new_classes) & set(memory.images)
    if already:
        raise ValueError(f"classes already in memory: {sorted(already)}")
    learned = set(learned_classes) | set(memory.images) | set(new_classes)
    quota = memory.quota(len(learned))
    out = ExemplarMemory(memory.policy, memory.budget, memory.per_class, memory.feature_source)
    for c, imgs in memory.images.items():
        out.images[c] = imgs if memory.policy == "per_class" else imgs[:quota]
    for c in sorted(new_classes):
        imgs, feats = new_classes[c]
        feats = np.asarray(feats, dtype=np.float64)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.maximum(norms, 1e-12)
        order = herding_select(feats, min(quota, len(imgs)))
        out.images[c] = np.asarray(imgs)[order]
    return out
