"""Translators, critics and feature-inversion networks.

Widths are expressed relative to the encoder taps, so the VGG-19 profile
gets the published sizes (512-channel level-5 translator etc.) and toy
profiles get proportionally scaled copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

ADAIN_EPS = 1e-5
LRELU_SLOPE = 0.2


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    gn_groups: int = 32
    controller_width: Optional[int] = None  # None: level-5 channel count
    controller_hidden: int = 1000
    critic_max_width: int = 512
    disc_base_width: int = 64


def init_weights(module: nn.Module) -> None:
    """N(0, 0.02) for every (transposed) conv, zero bias; linears keep torch's fan-in uniform."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def group_norm(channels: int, max_groups: int = 32) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(max_groups, channels), channels)


def _check_shape(x: torch.Tensor, expected: tuple, what: str) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"{what}: expected (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")


class DeepTranslator(nn.Module):
    """Level-5 encoder-decoder translator (unconditional)."""

    def __init__(self, channels: int = 512, spatial: int = 14, gn_groups: int = 32):
        super().__init__()
        c, h = channels, channels // 2
        self.shape = (channels, spatial, spatial)
        self.inp = nn.Conv2d(c, c, 3, 1, 1)
        self.down1 = nn.Sequential(nn.Conv2d(c, h, 3, 2, 1), group_norm(h, gn_groups), nn.ReLU())
        self.down2 = nn.Sequential(nn.Conv2d(h, c, 3, 2, 1), group_norm(c, gn_groups), nn.ReLU())
        self.up1 = nn.ConvTranspose2d(c, h, 3, 2, 1)
        self.up1_post = nn.Sequential(group_norm(h, gn_groups), nn.ReLU())
        self.up2 = nn.ConvTranspose2d(h, h, 3, 2, 1)
        self.up2_post = nn.Sequential(group_norm(h, gn_groups), nn.ReLU())
        self.out = nn.Sequential(
            nn.Conv2d(h, c, 3, 1, 1), group_norm(c, gn_groups), nn.ReLU(),
            nn.Conv2d(c, c, 3, 1, 1), nn.Tanh(),
        )
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_shape(x, self.shape, "deep translator input")
        s0 = x.shape[-2:]
        x = self.inp(x)
        x = self.down1(x)
        s1 = x.shape[-2:]
        x = self.down2(x)
        # output_size picks the output_padding that undoes each stride-2 conv
        x = self.up1_post(self.up1(x, output_size=list(s1)))
        x = self.up2_post(self.up2(x, output_size=list(s0)))
        return self.out(x)


def adain_modulate(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Instance-normalize each channel over space, then ``* scale + shift``.

    ``scale``/``shift`` are (C,) or (N, C).
    """
    c = x.shape[1]
    if scale.shape[-1] != c or shift.shape[-1] != c:
        raise ShapeError(f"AdaIN params of length {scale.shape[-1]}/{shift.shape[-1]} for {c} channels")
    if scale.dim() == 1:
        scale, shift = scale.unsqueeze(0), shift.unsqueeze(0)
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    xn = (x - mu) / torch.sqrt(var + eps)
    return xn * scale[:, :, None, None] + shift[:, :, None, None]


class AdaIN(nn.Module):
    """AdaIN site whose scale/shift are assigned by the owning translator before each pass."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.scale = None
        self.shift = None

    def forward(self, x):
        return adain_modulate(x, self.scale, self.shift)


class AdaINController(nn.Module):
    """Maps level-i source features to the AdaIN parameter vector.

    Stride-2 3x3 convs (LeakyReLU) until the map is at most 4x4, then
    linear -> LeakyReLU -> linear.
    """

    def __init__(self, in_channels: int, spatial: int, n_params: int, width: int = 512, hidden: int = 1000):
        super().__init__()
        layers: List[nn.Module] = []
        c, s = in_channels, spatial
        while s > 4:
            layers += [nn.Conv2d(c, width, 3, 2, 1), nn.LeakyReLU(LRELU_SLOPE)]
            c, s = width, (s + 1) // 2
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Sequential(
            nn.Linear(c * s * s, hidden), nn.LeakyReLU(LRELU_SLOPE), nn.Linear(hidden, n_params)
        )
        self.n_params = n_params

    def forward(self, x):
        return self.fc(self.convs(x).flatten(1))


class ConditionalTranslator(nn.Module):
    """Level-i translator: content from translated level i+1, style (AdaIN) from source level i."""

    def __init__(
        self,
        content_shape: tuple,
        style_shape: tuple,
        controller_width: int = 512,
        controller_hidden: int = 1000,
    ):
        super().__init__()
        x, side, _ = content_shape
        c_out, out_side, _ = style_shape
        if out_side != 2 * side:
            raise ShapeError(f"level-i side {out_side} is not twice the level-(i+1) side {side}")
        self.content_shape = tuple(content_shape)
        self.style_shape = tuple(style_shape)
        half = x // 2
        self.content = nn.Sequential(
            nn.Conv2d(x, x, 3, 1, 1), AdaIN(x), nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(x, x, 3, 1, 1), AdaIN(x), nn.LeakyReLU(LRELU_SLOPE),
            nn.ConvTranspose2d(x, half, 4, 2, 1), AdaIN(half), nn.LeakyReLU(LRELU_SLOPE),
            # Table width is x/2; the tap width wins where they differ (level 4)
            nn.Conv2d(half, c_out, 3, 1, 1), nn.Tanh(),
        )
        self.sites = [m for m in self.content if isinstance(m, AdaIN)]
        n_params = 2 * sum(s.channels for s in self.sites)
        self.controller = AdaINController(c_out, out_side, n_params, controller_width, controller_hidden)
        init_weights(self)

    @property
    def n_adain_params(self) -> int:
        return self.controller.n_params

    def assign_adain(self, params: torch.Tensor) -> None:
        # layout per site: [scale offsets (C), shifts (C)]; scale = 1 + offset
        i = 0
        for site in self.sites:
            c = site.channels
            site.scale = 1.0 + params[:, i: i + c]
            site.shift = params[:, i + c: i + 2 * c]
            i += 2 * c

    def forward(self, source: torch.Tensor, translated_deeper: torch.Tensor) -> torch.Tensor:
        _check_shape(source, self.style_shape, "source features (level i)")
        _check_shape(translated_deeper, self.content_shape, "translated deeper features (level i+1)")
        if source.shape[0] != translated_deeper.shape[0]:
            raise ShapeError("source and translated deeper features have different batch sizes")
        self.assign_adain(self.controller(source))
        return self.content(translated_deeper)


class Critic(nn.Module):
    """WGAN-GP feature critic: 4 stride-2 k4 convs + LeakyReLU, linear head, no normalization."""

    def __init__(self, channels: int, spatial: int, max_width: int = 512, n_layers: int = 4):
        super().__init__()
        layers: List[nn.Module] = []
        c, s = channels, spatial
        for _ in range(n_layers):
            w = min(2 * c, max_width)
            # padding 2 keeps 1x1 maps alive: out = floor(s/2) + 1
            layers += [nn.Conv2d(c, w, 4, 2, 2), nn.LeakyReLU(LRELU_SLOPE)]
            c, s = w, s // 2 + 1
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c * s * s, 1)
        self.input_shape = (channels, spatial, spatial)
        init_weights(self)

    def forward(self, x):
        return self.head(self.body(x).flatten(1)).squeeze(1)


class InverterDecoder(nn.Module):
    """Features at one level -> RGB image in (-1, 1)."""

    def __init__(self, channels: int, spatial: int, image_side: int):
        super().__init__()
        n_up = int(round(math.log2(image_side / spatial)))
        if spatial * 2**n_up != image_side:
            raise ShapeError(f"cannot reach image side {image_side} from {spatial} by doubling")
        layers: List[nn.Module] = []
        for _ in range(3):
            layers += [nn.Conv2d(channels, channels, 3, 1, 1), nn.LeakyReLU(LRELU_SLOPE)]
        c = channels
        for _ in range(n_up):
            nc = max(c // 2, 1)
            layers += [nn.ConvTranspose2d(c, nc, 4, 2, 1), nn.LeakyReLU(LRELU_SLOPE)]
            c = nc
        layers += [nn.Conv2d(c, 3, 3, 1, 1), nn.Tanh()]
        self.body = nn.Sequential(*layers)
        self.n_up = n_up
        self.input_shape = (channels, spatial, spatial)
        self.image_side = image_side
        init_weights(self)

    def forward(self, x):
        _check_shape(x, self.input_shape, "inverter input")
        return self.body(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN: 4 stride-2 convs (BN on all but the first), then a 1-channel patch map."""

    def __init__(self, base: int = 64, in_channels: int = 3):
        super().__init__()
        layers: List[nn.Module] = []
        c = in_channels
        for k in range(4):
            w = base * 2**k
            layers.append(nn.Conv2d(c, w, 4, 2, 1, bias=(k == 0)))
            if k > 0:
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.LeakyReLU(LRELU_SLOPE))
            c = w
        layers.append(nn.Conv2d(c, 1, 3, 1, 1))
        self.body = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        return self.body(x)


# --- builders from an encoder profile ------------------------------------


def build_deep_translator(profile, cfg: NetworkConfig = NetworkConfig()) -> DeepTranslator:
    c, s, _ = profile.feature_shape(5)
    return DeepTranslator(c, s, cfg.gn_groups)


def build_conditional_translator(profile, level: int, cfg: NetworkConfig = NetworkConfig()) -> ConditionalTranslator:
    if not 1 <= level <= 4:
        raise ValueError(f"conditional translators exist for levels 1..4, got {level}")
    width = cfg.controller_width or profile.feature_shape(5)[0]
    return ConditionalTranslator(
        profile.feature_shape(level + 1), profile.feature_shape(level), width, cfg.controller_hidden
    )


def build_critic(profile, level: int, cfg: NetworkConfig = NetworkConfig()) -> Critic:
    c, s, _ = profile.feature_shape(level)
    return Critic(c, s, cfg.critic_max_width)


def build_inverter(profile, level: int, cfg: NetworkConfig = NetworkConfig()):
    c, s, _ = profile.feature_shape(level)
    return InverterDecoder(c, s, profile.input_side), PatchDiscriminator(cfg.disc_base_width)


def invert_forward(features: torch.Tensor, inverter: InverterDecoder) -> torch.Tensor:
    single = features.dim() == 3
    x = features.unsqueeze(0) if single else features
    if tuple(x.shape[1:]) != inverter.input_shape:
        raise ShapeError(
            f"features {tuple(x.shape[1:])} do not match the inverter's level {inverter.input_shape}"
        )
    out = inverter(x)
    return out[0] if single else out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
