"""Pretrained feature extractor with taps at five pyramid levels.

Two profiles share one tap contract: VGG-19 (taps after the ReLU of each
``conv_i_1``) and a seeded random "toy" stack with the same layout
(conv+ReLU per level, 2x max-pool between levels) for desk-scale runs.

VGG-19 weight files are plain ``torch.save`` state dicts in the torchvision
``vgg19`` key layout (``features.<idx>.weight``, ``classifier.<idx>.bias``...).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LEVELS = (1, 2, 3, 4, 5)

# ImageNet input convention used by the published VGG weights.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

VGG19_CHANNELS = (64, 128, 256, 512, 512)
VGG19_INPUT_SIDE = 224
VGG19_EMBEDDING_DIM = 4096
# Index of the ReLU following conv_i_1 inside torchvision's vgg19().features
VGG19_TAP_INDEX = {1: 1, 2: 6, 3: 11, 4: 20, 5: 29}


class EncoderError(Exception):
    pass


class EncoderWeightsError(EncoderError):
    """Weight file missing, unreadable or not matching the architecture."""


class UnsupportedOperation(EncoderError):
    pass


@dataclass(frozen=True)
class LayerTap:
    level: int
    channels: int
    spatial: int
    name: str


@dataclass
class FeaturePyramid:
    levels: Dict[int, torch.Tensor]
    source_id: str = ""

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    def shapes(self) -> Dict[int, tuple]:
        return {k: tuple(v.shape) for k, v in self.levels.items()}


def taps_for(channels: Sequence[int], input_side: int, prefix: str = "conv") -> List[LayerTap]:
    return [
        LayerTap(level=i + 1, channels=int(c), spatial=input_side // 2**i, name=f"{prefix}{i + 1}_1")
        for i, c in enumerate(channels)
    ]


class _ToyBackbone(nn.Module):
    def __init__(self, channels: Sequence[int], embedding_dim: Optional[int], input_side: int):
        super().__init__()
        convs = []
        c_in = 3
        for c in channels:
            convs.append(nn.Conv2d(c_in, c, 3, padding=1))
            c_in = c
        self.convs = nn.ModuleList(convs)
        self.head = None
        if embedding_dim:
            side5 = input_side // 16
            self.head = nn.Linear(channels[-1] * side5 * side5, embedding_dim)

    def pyramid(self, x: torch.Tensor) -> Dict[int, torch.Tensor]:
        out = {}
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = F.relu(conv(x))
            out[i + 1] = x
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise UnsupportedOperation("toy profile was built without an embedding head")
        feats = self.pyramid(x)[5]
        return F.relu(self.head(feats.flatten(1)))


class _VGGBackbone(nn.Module):
    def __init__(self, vgg: nn.Module):
        super().__init__()
        self.features = vgg.features
        self.avgpool = vgg.avgpool
        self.classifier = vgg.classifier

    def pyramid(self, x: torch.Tensor) -> Dict[int, torch.Tensor]:
        out = {}
        want = {idx: lvl for lvl, idx in VGG19_TAP_INDEX.items()}
        last = max(want)
        for idx, layer in enumerate(self.features):
            x = layer(x)
            if idx in want:
                out[want[idx]] = x
            if idx == last:
                break
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        x = torch.flatten(self.avgpool(x), 1)
        # fc6 -> relu -> dropout -> fc7 -> relu; stop before the class logits
        return self.classifier[:5](x)


@dataclass
class EncoderProfile:
    name: str
    taps: List[LayerTap]
    input_side: int
    weight_source: str
    embedding_dim: Optional[int]
    network: nn.Module = field(repr=False)

    def __post_init__(self):
        self.taps = sorted(self.taps, key=lambda t: t.level)
        if self.input_side % 16:
            raise EncoderError(f"input_side must be divisible by 16, got {self.input_side}")
        self.network.eval()
        for p in self.network.parameters():
            p.requires_grad_(False)

    def tap(self, level: int) -> LayerTap:
        for t in self.taps:
            if t.level == level:
                return t
        raise KeyError(level)

    @property
    def channels(self) -> Dict[int, int]:
        return {t.level: t.channels for t in self.taps}

    def feature_shape(self, level: int) -> tuple:
        t = self.tap(level)
        return (t.channels, t.spatial, t.spatial)


def make_toy_encoder(
    seed: int,
    channel_list: Sequence[int] = (8, 16, 32, 64, 64),
    input_side: int = 64,
    embedding_dim: Optional[int] = None,
) -> EncoderProfile:
    """Seeded random conv stack with VGG tap semantics.

    Conv weights use He-normal init so activations keep their scale through
    five ReLU levels. ``embedding_dim`` adds a linear head on the flattened
    level-5 map; without it :func:`extract_embedding` raises.
    """
    if len(channel_list) != 5:
        raise EncoderError(f"toy encoder needs 5 channel counts, got {len(channel_list)}")
    if input_side % 16:
        raise EncoderError(f"input_side must be divisible by 16, got {input_side}")
    gen = torch.Generator().manual_seed(int(seed))
    net = _ToyBackbone(channel_list, embedding_dim, input_side)
    with torch.no_grad():
        for conv in net.convs:
            fan_in = conv.in_channels * 9
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
            conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
        if net.head is not None:
            fan_in = net.head.in_features
            net.head.weight.copy_(torch.randn(net.head.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
            net.head.bias.zero_()
    return EncoderProfile(
        name="toy",
        taps=taps_for(channel_list, input_side),
        input_side=input_side,
        weight_source=f"seed:{seed}",
        embedding_dim=embedding_dim,
        network=net,
    )


def load_vgg19_profile(weights_path: str | os.PathLike) -> EncoderProfile:
    """Build the VGG-19 profile from a torchvision-layout state dict file."""
    from torchvision.models import vgg19

    path = os.fspath(weights_path)
    if not os.path.isfile(path):
        raise EncoderWeightsError(f"VGG-19 weight file not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise EncoderWeightsError(f"cannot read VGG-19 weights from {path}: {exc}") from exc
    if not isinstance(state, dict):
        raise EncoderWeightsError(f"{path} does not hold a state dict")
    model = vgg19(weights=None)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise EncoderWeightsError(f"{path} does not match the vgg19 layout: {exc}") from exc
    return EncoderProfile(
        name="vgg19",
        taps=taps_for(VGG19_CHANNELS, VGG19_INPUT_SIDE),
        input_side=VGG19_INPUT_SIDE,
        weight_source=path,
        embedding_dim=VGG19_EMBEDDING_DIM,
        network=_VGGBackbone(model),
    )


def save_random_vgg19_weights(path: str | os.PathLike, seed: int = 0) -> None:
    """Write a randomly initialised vgg19 state dict (for tests and smoke runs)."""
    from torchvision.models import vgg19

    torch.manual_seed(seed)
    torch.save(vgg19(weights=None).state_dict(), os.fspath(path))


def standardize(image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=image.dtype).view(-1, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=image.dtype).view(-1, 1, 1)
    return (image - mean) / std


def _check_input(images: torch.Tensor, profile: EncoderProfile) -> torch.Tensor:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[1] != 3:
        raise EncoderError(f"expected RGB tensor (3, H, W) or (N, 3, H, W), got {tuple(images.shape)}")
    side = profile.input_side
    if images.shape[-1] != side or images.shape[-2] != side:
        raise EncoderError(
            f"input side mismatch: expected {side}x{side}, got {images.shape[-2]}x{images.shape[-1]}"
        )
    return images


@torch.no_grad()
def extract_batch(images: torch.Tensor, profile: EncoderProfile) -> Dict[int, torch.Tensor]:
    """Raw tap activations for a batch of [0, 1] RGB images, level -> (N, C, S, S)."""
    x = standardize(_check_input(images, profile).float())
    return profile.network.pyramid(x)


def extract_pyramid(image: torch.Tensor, profile: EncoderProfile, source_id: str = "") -> FeaturePyramid:
    if image.dim() != 3:
        raise EncoderError(f"extract_pyramid takes a single (3, H, W) image, got {tuple(image.shape)}")
    feats = extract_batch(image, profile)
    return FeaturePyramid({k: v[0] for k, v in feats.items()}, source_id=source_id)


@torch.no_grad()
def extract_embedding(image: torch.Tensor, profile: EncoderProfile) -> torch.Tensor:
    """Penultimate fully-connected activation; (D,) for one image, (N, D) for a batch."""
    if profile.embedding_dim is None:
        raise UnsupportedOperation(f"profile {profile.name!r} has no classifier head")
    single = image.dim() == 3
    x = standardize(_check_input(image, profile).float())
    out = profile.network.embed(x)
    return out[0] if single else out
