"""CutMix of stored old-class samples with new-class samples, Remix-thresholded labels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_TAU = 0.6


@dataclass
class MixMask:
    m: np.ndarray  # h x w, 0 inside the pasted box
    lambda_raw: float
    box: tuple[int, int, int, int]  # top, left, height, width


@dataclass
class MixedSample:
    image: torch.Tensor
    soft_label: dict[int, float]
    old_id: int
    new_id: int
    lambda_used: float
    mask: MixMask | None = None


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def sample_mask(h: int, w: int, lambda_target: float, rng: np.random.Generator) -> MixMask:
    """Box with the image's aspect ratio covering about ``1 - lambda_target`` of it."""
    lam = min(max(float(lambda_target), 0.0), 1.0)
    cut = math.sqrt(1.0 - lam)
    bh, bw = _round_half_up(h * cut), _round_half_up(w * cut)
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    m = np.ones((h, w), dtype=np.float32)
    m[top:top + bh, left:left + bw] = 0.0
    return MixMask(m, 1.0 - (bh * bw) / (h * w), (top, left, bh, bw))


def remix_lambda(lambda_raw: float, tau: float = DEFAULT_TAU) -> float:
    return 1.0 if lambda_raw > tau else float(lambda_raw)


def cutmix_pair(old_sample, new_sample, rng: np.random.Generator, alpha: float = 1.0,
                tau: float = DEFAULT_TAU, lambda_raw: float | None = None) -> MixedSample:
    """Paste a box of the new image into the old one.

    ``old_sample`` and ``new_sample`` are ``(image, class_id)`` pairs. The old
    image keeps the unmasked area; its label weight is reset to 1 when that
    area exceeds ``tau``. ``lambda_raw`` overrides the Beta(alpha, alpha) draw.
    """
    (x1, y1), (x2, y2) = old_sample, new_sample
    if x1.shape != x2.shape:
        raise ValueError(f"image shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    target = rng.beta(alpha, alpha) if lambda_raw is None else lambda_raw
    mask = sample_mask(x1.shape[-2], x1.shape[-1], target, rng)
    keep_old = torch.as_tensor(mask.m, device=x1.device).bool()
    image = torch.where(keep_old, x1, x2)
    lam = remix_lambda(mask.lambda_raw, tau)
    label: dict[int, float] = {}
    label[int(y1)] = label.get(int(y1), 0.0) + lam
    label[int(y2)] = label.get(int(y2), 0.0) + (1.0 - lam)
    return MixedSample(image, {k: v for k, v in label.items() if v > 0}, int(y1), int(y2), lam, mask)


def build_mixed_batch(mem_images: torch.Tensor, mem_labels: torch.Tensor,
                      new_images: torch.Tensor, new_labels: torch.Tensor,
                      rng: np.random.Generator, alpha: float = 1.0, tau: float = DEFAULT_TAU):
    """One mixed sample per new-class image, old partners drawn uniformly from memory.

    Returns ``(images, old_labels, new_labels, lambda_used)``; the soft label
    of row i is ``lambda_used[i]`` on ``old_labels[i]`` and the rest on
    ``new_labels[i]``. An empty memory yields empty tensors.
    """
    n = len(new_images)
    if len(mem_images) == 0 or n == 0:
        empty = new_images[:0]
        return empty, new_labels[:0], new_labels[:0], torch.zeros(0, dtype=new_images.dtype)
    picks = rng.integers(0, len(mem_images), size=n)
    out, lams = [], []
    for i in range(n):
        j = int(picks[i])
        s = cutmix_pair((mem_images[j], int(mem_labels[j])), (new_images[i], int(new_labels[i])),
                        rng, alpha, tau)
        out.append(s.image)
        lams.append(s.lambda_used)
    idx = torch.as_tensor(picks, dtype=torch.long)
    return (torch.stack(out), mem_labels[idx], new_labels.clone(),
            torch.tensor(lams, dtype=new_images.dtype))


def soft_targets(class_index: dict[int, int], n_classes: int, old_labels, new_labels, lam) -> torch.Tensor:
    """Dense label distributions over head columns for a mixed batch."""
    t = torch.zeros(len(lam), n_classes, dtype=lam.dtype)
    rows = torch.arange(len(lam))
    old_cols = torch.tensor([class_index[int(c)] for c in old_labels], dtype=torch.long)
    new_cols = torch.tensor([class_index[int(c)] for c in new_labels], dtype=torch.long)
    t.index_put_((rows, old_cols), lam, accumulate=True)
    t.index_put_((rows, new_cols), 1 - lam, accumulate=True)
    return t


def crop_flip(images: torch.Tensor, generator: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Per-image random crop from a zero-padded copy plus random horizontal flip."""
    n, _, h, w = images.shape
    if n == 0:
        return images
    padded = torch.nn.functional.pad(images, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    out[flip] = out[flip].flip(-1)
    return out
