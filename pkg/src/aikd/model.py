"""Backbone with exposed feature pyramid and an expandable classifier head."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    embed_dim: int = 128
    input_size: int = 32
    in_channels: int = 3
    head: str = "linear"
    arch: str = "plain"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 1:
            raise ValueError("backbone needs at least one block")
        if min(self.channels) < 1 or self.embed_dim < 1:
            raise ValueError("channel counts and embed_dim must be >= 1")
        if self.arch not in ("plain", "resnet18"):
            raise ValueError(f"unknown backbone arch {self.arch!r}")
        if self.arch == "resnet18" and len(self.channels) != 4:
            raise ValueError("resnet18 has exactly four stages")
        if self.input_size < 2 ** len(self.channels):
            raise ValueError(
                f"input_size {self.input_size} too small for {len(self.channels)} downsampling blocks"
            )
        if self.head not in ("linear", "cosine"):
            raise ValueError(f"unknown head type {self.head!r}")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    def strides(self) -> list[int]:
        if self.arch == "resnet18":
            return [1, 2, 2, 2]
        return [2] * len(self.channels)

    def block_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of every block output."""
        shapes = []
        size = self.input_size
        for c, stride in zip(self.channels, self.strides()):
            size = (size + stride - 1) // stride
            shapes.append((c, size, size))
        return shapes


class ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + self.shortcut(x))


def resnet18_stages(in_channels: int, channels) -> nn.ModuleList:
    """CIFAR-style ResNet-18: 3x3 stem, four stages of two basic blocks."""
    stem = nn.Sequential(nn.Conv2d(in_channels, channels[0], 3, 1, 1, bias=False),
                         nn.BatchNorm2d(channels[0]), nn.ReLU(inplace=True))
    stages, c_in = [], channels[0]
    for i, (c, stride) in enumerate(zip(channels, [1, 2, 2, 2])):
        layers = [BasicBlock(c_in, c, stride), BasicBlock(c, c)]
        stages.append(nn.Sequential(stem, *layers) if i == 0 else nn.Sequential(*layers))
        c_in = c
    return nn.ModuleList(stages)


class Backbone(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c_in = spec.in_channels
        if spec.arch == "resnet18":
            self.blocks = resnet18_stages(c_in, spec.channels)
        else:
            blocks = []
            for c in spec.channels:
                blocks.append(ConvBlock(c_in, c))
                c_in = c
            self.blocks = nn.ModuleList(blocks)
        c_in = spec.channels[-1]
        if spec.embed_dim != c_in:
            self.project = nn.Linear(c_in, spec.embed_dim)
        else:
            self.project = nn.Identity()

    def forward(self, x):
        maps = []
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        emb = self.project(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))
        return maps, emb


class IncrementalHead(nn.Module):
    """Linear (or cosine-normalized) classifier whose width grows per round."""

    def __init__(self, embed_dim: int, kind: str = "linear"):
        super().__init__()
        self.kind = kind
        self.embed_dim = embed_dim
        self.weight = nn.Parameter(torch.empty(0, embed_dim))
        self.bias = nn.Parameter(torch.empty(0))
        if kind == "cosine":
            self.scale = nn.Parameter(torch.tensor(10.0))

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    def forward(self, emb):
        if self.kind == "cosine":
            return self.scale * F.linear(F.normalize(emb, dim=1), F.normalize(self.weight, dim=1))
        return F.linear(emb, self.weight, self.bias)

    def expand(self, n_new: int, generator: torch.Generator | None = None):
        if n_new == 0:
            return
        w = torch.randn(n_new, self.embed_dim, generator=generator, dtype=self.weight.dtype)
        w = w.to(self.weight.device) * 0.01
        b = torch.zeros(n_new, dtype=self.bias.dtype, device=self.bias.device)
        self.weight = nn.Parameter(torch.cat([self.weight.detach(), w]))
        self.bias = nn.Parameter(torch.cat([self.bias.detach(), b]))


@dataclass
class ForwardOutput:
    pyramid: list[torch.Tensor]
    embedding: torch.Tensor
    logits: torch.Tensor
    class_ids: list[int] = field(default_factory=list)


class IncrementalNet(nn.Module):
    """Feature extractor plus a single head continually updated across rounds."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.backbone = Backbone(spec)
        self.head = IncrementalHead(spec.embed_dim, spec.head)
        self.class_ids: list[int] = []
        self.frozen = False

    def forward(self, x):
        return self.forward_full(x).logits

    def forward_full(self, x: torch.Tensor) -> ForwardOutput:
        s = self.spec
        if x.dim() != 4 or tuple(x.shape[1:]) != (s.in_channels, s.input_size, s.input_size):
            raise ValueError(
                f"expected batch of shape (N, {s.in_channels}, {s.input_size}, {s.input_size}), "
                f"got {tuple(x.shape)}"
            )
        maps, emb = self.backbone(x)
        return ForwardOutput(maps, emb, self.head(emb), list(self.class_ids))

    def column_index(self, class_ids: Sequence[int]) -> torch.Tensor:
        pos = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return torch.tensor([pos[int(c)] for c in class_ids], dtype=torch.long)
        except KeyError as err:
            raise ValueError(f"class id {err.args[0]} is not in the head") from None

    def expand_head(self, new_class_ids: Sequence[int], generator: torch.Generator | None = None):
        new = [int(c) for c in new_class_ids]
        if len(set(new)) != len(new) or set(new) & set(self.class_ids):
            raise ValueError(f"duplicate class ids in expansion: {new}")
        if self.frozen:
            raise RuntimeError("cannot expand a frozen model")
        self.head.expand(len(new), generator)
        self.class_ids.extend(new)
        return self

    def train(self, mode: bool = True):
        # Frozen models keep normalization layers in inference mode.
        return super().train(mode and not self.frozen)


def freeze(model: IncrementalNet) -> IncrementalNet:
    """Return a frozen deep copy: eval mode, no gradients, not expandable."""
    frozen = copy.deepcopy(model)
    frozen.eval()
    frozen.frozen = True
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: IncrementalNet, path: str | Path, round_index: int, extra: dict | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "backbone_spec": asdict(model.spec),
        "state_dict": model.state_dict(),
        "class_ids": list(model.class_ids),
        "round": int(round_index),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[IncrementalNet, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:  # noqa: BLE001 - torch raises many types on corrupt files
        raise ValueError(f"corrupt checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    spec = BackboneSpec(**payload["backbone_spec"])
    model = IncrementalNet(spec)
    n = len(payload["class_ids"])
    model.head.expand(n)
    model.class_ids = list(payload["class_ids"])
    model.load_state_dict(payload["state_dict"])
    return model, payload
