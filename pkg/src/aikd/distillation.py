"""Feature-map distillation: block-wise, adaptively integrated (AIM), and embedding-level."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("block_wise_maps", "channel_wise_maps", "block_wise_weights", "none")
DISTANCES = ("pod", "mse")


def _pooled(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    sq = f.pow(2)
    pw = sq.sum(dim=3).flatten(1)  # pooled over width -> c x h
    ph = sq.sum(dim=2).flatten(1)  # pooled over height -> c x w
    return pw, ph


def _unit(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("POD normalization failed: all-zero pooled feature map")
    return v / norm


def pod_distance(f_a: torch.Tensor, f_b: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Width/height pooled-output distance between two N x C x H x W maps."""
    if f_a.shape != f_b.shape:
        raise ValueError(f"feature map shapes differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    aw, ah = _pooled(f_a)
    bw, bh = _pooled(f_b)
    d = 0.5 * ((_unit(aw) - _unit(bw)).pow(2).sum(1) + (_unit(ah) - _unit(bh)).pow(2).sum(1))
    return d.mean() if reduction == "mean" else d


def mse_distance(f_a: torch.Tensor, f_b: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if f_a.shape != f_b.shape:
        raise ValueError(f"feature map shapes differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    d = (f_a - f_b).pow(2).flatten(1).mean(1)
    return d.mean() if reduction == "mean" else d


def distance(kind: str):
    if kind == "pod":
        return pod_distance
    if kind == "mse":
        return mse_distance
    raise ValueError(f"unknown distance {kind!r}")


def block_distill_loss(pyr_new: Sequence[torch.Tensor], pyr_old: Sequence[torch.Tensor],
                       kind: str = "pod", reduction: str = "mean") -> torch.Tensor:
    """Layer-to-layer distillation averaged over blocks."""
    if len(pyr_new) != len(pyr_old):
        raise ValueError(f"pyramid lengths differ: {len(pyr_new)} vs {len(pyr_old)}")
    dist = distance(kind)
    terms = [dist(a, b, reduction) for a, b in zip(pyr_new, pyr_old)]
    return torch.stack(terms).mean(0)


def resample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    if h >= size[0] and w >= size[1]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class AIM(nn.Module):
    """Fuses every block of the old feature pyramid into the shape of one target block.

    Each source block goes through its own 1x1 conv to the target width and is
    resampled to the target resolution. An attention branch weighs the aligned
    blocks (softmax over the block axis) before a 3x3 output conv.
    """

    def __init__(self, source_channels: Sequence[int], target_shape: tuple[int, int, int],
                 variant: str = "block_wise_maps"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown AIM variant {variant!r}")
        c, h, w = target_shape
        self.target_shape = (int(c), int(h), int(w))
        self.variant = variant
        n = len(source_channels)
        self.transforms = nn.ModuleList(nn.Conv2d(cs, c, 1) for cs in source_channels)
        if variant == "block_wise_maps" or variant == "block_wise_weights":
            self.attention = nn.Conv2d(n * c, n, 1)
        elif variant == "channel_wise_maps":
            self.attention = nn.Conv2d(n * c, n * c, 1)
        else:
            self.attention = None
        self.out = nn.Conv2d(c, c, 3, padding=1)
        self.last_attention: torch.Tensor | None = None
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.zeros_(mod.bias)

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def align(self, pyr_old: Sequence[torch.Tensor]) -> torch.Tensor:
        """Source blocks transformed and resampled, stacked as N x L x C x H x W."""
        if len(pyr_old) != len(self.transforms):
            raise ValueError(f"AIM expects {len(self.transforms)} source blocks, got {len(pyr_old)}")
        size = self.target_shape[1:]
        return torch.stack([resample(t(f), size) for t, f in zip(self.transforms, pyr_old)], 1)

    def attention_weights(self, aligned: torch.Tensor) -> torch.Tensor | None:
        """Weights broadcastable against ``aligned``, normalized over dim 1."""
        n, nb, c, h, w = aligned.shape
        if self.attention is None:
            return None
        cat = aligned.reshape(n, nb * c, h, w)
        if self.variant == "block_wise_maps":
            return torch.softmax(self.attention(cat), dim=1).unsqueeze(2)
        if self.variant == "channel_wise_maps":
            return torch.softmax(self.attention(cat).reshape(n, nb, c, h, w), dim=1)
        logits = self.attention(F.adaptive_avg_pool2d(cat, 1))  # n x nb x 1 x 1
        return torch.softmax(logits, dim=1).unsqueeze(2)

    def forward(self, pyr_old: Sequence[torch.Tensor]) -> torch.Tensor:
        aligned = self.align(pyr_old)
        att = self.attention_weights(aligned)
        if att is None:
            fused = aligned.mean(1)
        else:
            fused = (att * aligned).sum(1)
        self.last_attention = None if att is None else att.detach()
        out = self.out(fused)
        if tuple(out.shape[1:]) != self.target_shape:
            raise RuntimeError(f"AIM produced {tuple(out.shape[1:])}, expected {self.target_shape}")
        return out


def init_aims(old_shapes: Sequence[tuple[int, int, int]], new_shapes: Sequence[tuple[int, int, int]],
              variant: str = "block_wise_maps", generator: torch.Generator | None = None) -> nn.ModuleList:
    """One freshly initialized AIM per target block of the new model.

    Shapes are (channels, height, width) per block. Weights follow PyTorch's
    default conv init drawn from ``generator``; biases are zero.
    """
    if len(old_shapes) != len(new_shapes):
        raise ValueError("old and new backbones must have the same number of blocks")
    src = [s[0] for s in old_shapes]
    aims = nn.ModuleList(AIM(src, tuple(s), variant) for s in new_shapes)
    if generator is not None:
        with torch.no_grad():
            for p in aims.parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel()
                    bound = 1.0 / fan_in ** 0.5
                    p.copy_(torch.rand(p.shape, generator=generator) * 2 * bound - bound)
    return aims


def aikd_loss(pyr_new: Sequence[torch.Tensor], pyr_old: Sequence[torch.Tensor], aims: Sequence[AIM],
              kind: str = "pod", active_count: int | None = None, stop_gradient_target: bool = False,
              reduction: str = "mean") -> torch.Tensor:
    """Distance between each new block and its AIM fusion of the old pyramid.

    Only the deepest ``active_count`` targets contribute. The old pyramid
    should come from a frozen model; gradients reach the new maps and the
    AIM parameters. ``stop_gradient_target`` detaches the AIM outputs so only
    the new model adapts.
    """
    L = len(aims)
    if len(pyr_new) != L:
        raise ValueError(f"{len(pyr_new)} new blocks but {L} AIMs")
    k = L if active_count is None else int(active_count)
    if not 1 <= k <= L:
        raise ValueError(f"active AIM count {k} outside [1, {L}]")
    dist = distance(kind)
    old = [f.detach() for f in pyr_old]
    terms = []
    for l in range(L - k, L):
        target = aims[l](old)
        if stop_gradient_target:
            target = target.detach()
        terms.append(dist(pyr_new[l], target, reduction))
    return torch.stack(terms).mean(0)


def feature_distill_loss(f_new: torch.Tensor, f_old: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """1 - cosine similarity between old and new embeddings."""
    if f_new.shape != f_old.shape:
        raise ValueError(f"embedding shapes differ: {tuple(f_new.shape)} vs {tuple(f_old.shape)}")
    n_new, n_old = f_new.norm(dim=1), f_old.norm(dim=1)
    if (n_new == 0).any() or (n_old == 0).any():
        raise ValueError("cosine distance undefined for an all-zero embedding")
    d = 1 - (f_new * f_old).sum(1) / (n_new * n_old)
    return d.mean() if reduction == "mean" else d
