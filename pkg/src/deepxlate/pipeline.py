"""Test-time cascade: encode, translate level 5, refine down the pyramid, invert."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import IMAGE_EXTENSIONS, DomainItem, ImageDecodeError, load_and_augment, save_image
from .encoder import EncoderProfile, extract_batch
from .featnorm import ChannelStats, normalize
from .networks import (
    NetworkConfig,
    build_conditional_translator,
    build_deep_translator,
    build_inverter,
)

DIRECTIONS = {"AtoB": ("A", "B"), "BtoA": ("B", "A")}


class PipelineError(Exception):
    pass


def stage_name(level: int) -> str:
    return "deepest" if level == 5 else f"conditional{level}"


def inverter_stage(domain: str, level: int) -> str:
    return f"inverter_{domain}_L{level}"


def checkpoint_file(ckpt_dir: str, stage: str) -> str:
    return os.path.join(ckpt_dir, f"{stage}.ckpt")


@dataclass
class CascadeSpec:
    direction: str
    checkpoint_dir: str
    stats: Dict[str, Dict[int, ChannelStats]]  # domain -> level -> stats
    levels: List[int] = field(default_factory=lambda: [5, 4, 3])
    inverter_level: Optional[int] = None
    config_hash: Optional[str] = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise PipelineError(f"direction must be one of {sorted(DIRECTIONS)}, got {self.direction!r}")
        lv = list(self.levels)
        if not lv or lv != list(range(5, 5 - len(lv), -1)):
            raise PipelineError(f"levels must be contiguous descending from 5, got {lv}")
        if self.inverter_level is None:
            self.inverter_level = lv[-1]
        if self.inverter_level != lv[-1]:
            raise PipelineError("inverter level must equal the last trained level")

    @property
    def source(self) -> str:
        return DIRECTIONS[self.direction][0]

    @property
    def target(self) -> str:
        return DIRECTIONS[self.direction][1]


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(-1, 1) tensor -> uint8 via (x + 1) * 127.5, rounded half to even."""
    arr = (image.detach().cpu().double().numpy() + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


class Cascade:
    """Loaded, frozen translator stack plus target-domain inverter for one direction."""

    def __init__(self, spec: CascadeSpec, profile: EncoderProfile, net_cfg: NetworkConfig = NetworkConfig()):
        self.spec = spec
        self.profile = profile
        files = {lvl: checkpoint_file(spec.checkpoint_dir, stage_name(lvl)) for lvl in spec.levels}
        inv_file = checkpoint_file(spec.checkpoint_dir, inverter_stage(spec.target, spec.inverter_level))
        missing = [p for p in list(files.values()) + [inv_file] if not os.path.exists(p)]
        if missing:
            raise PipelineError(f"missing checkpoint(s): {', '.join(missing)}")
        for lvl in spec.levels:
            st = spec.stats.get(spec.source, {}).get(lvl)
            if st is None:
                raise PipelineError(f"no stats for domain {spec.source} level {lvl}")
            if st.channels != profile.tap(lvl).channels:
                raise PipelineError(
                    f"stats for {spec.source} level {lvl} have {st.channels} channels, "
                    f"encoder tap has {profile.tap(lvl).channels}"
                )
        net_name = f"G_{spec.target}"
        self.translators = {}
        for lvl in spec.levels:
            net = build_deep_translator(profile, net_cfg) if lvl == 5 else build_conditional_translator(profile, lvl, net_cfg)
            ckpt.load_networks(files[lvl], stage_name(lvl), {net_name: net}, spec.config_hash)
            self.translators[lvl] = net.eval()
        self.decoder, _ = build_inverter(profile, spec.inverter_level, net_cfg)
        ckpt.load_networks(inv_file, inverter_stage(spec.target, spec.inverter_level),
                           {"decoder": self.decoder}, spec.config_hash)
        self.decoder.eval()
        for m in list(self.translators.values()) + [self.decoder]:
            for p in m.parameters():
                p.requires_grad_(False)

    @torch.no_grad()
    def source_features(self, images: torch.Tensor) -> Dict[int, torch.Tensor]:
        raw = extract_batch(images, self.profile)
        return {lvl: normalize(raw[lvl], self.spec.stats[self.spec.source][lvl]) for lvl in self.spec.levels}

    @torch.no_grad()
    def translate_to_level(self, images: torch.Tensor, stop_level: int) -> torch.Tensor:
        if stop_level not in self.spec.levels:
            raise PipelineError(f"stop level {stop_level} outside trained levels {self.spec.levels}")
        single = images.dim() == 3
        feats = self.source_features(images)
        x = self.translators[5](feats[5])
        for lvl in range(4, stop_level - 1, -1):
            x = self.translators[lvl](feats[lvl], x)
        return x[0] if single else x

    def trace_shapes(self, image: torch.Tensor) -> List[tuple]:
        shapes = []
        feats = self.source_features(image)
        with torch.no_grad():
            x = self.translators[5](feats[5])
            shapes.append(tuple(x.shape[1:]))
            for lvl in self.spec.levels[1:]:
                x = self.translators[lvl](feats[lvl], x)
                shapes.append(tuple(x.shape[1:]))
            shapes.append(tuple(self.decoder(x).shape[1:]))
        return shapes

    @torch.no_grad()
    def invert(self, features: torch.Tensor) -> torch.Tensor:
        single = features.dim() == 3
        x = features.unsqueeze(0) if single else features
        out = self.decoder(x)
        return out[0] if single else out

    def translate_image(self, image: torch.Tensor) -> np.ndarray:
        """[0, 1] RGB tensor (3, S, S) -> uint8 array (3, S, S) in the target domain."""
        feats = self.translate_to_level(image, self.spec.inverter_level)
        return to_uint8(self.invert(feats))


def _list_inputs(folder: str) -> List[str]:
    out = []
    for dirpath, dirnames, filenames in os.walk(folder):
        dirnames.sort()
        for name in filenames:
            if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS:
                out.append(os.path.join(dirpath, name))
    return sorted(out)


def batch_translate(folder: str, cascade: Cascade, out_folder: str, manifest_name: str = "manifest.jsonl") -> List[dict]:
    """Translate every image under ``folder``; write PNGs and a JSON-lines manifest."""
    os.makedirs(out_folder, exist_ok=True)
    manifest_path = os.path.join(out_folder, manifest_name)
    config_hash = cascade.spec.config_hash or ""
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            first = fh.readline()
        if first:
            old = json.loads(first).get("config_hash")
            if old != config_hash:
                raise PipelineError(
                    f"{manifest_path} was written by config {old}; refusing to overwrite with {config_hash}"
                )
    records = []
    side = cascade.profile.input_side
    for path in _list_inputs(folder):
        rel = os.path.relpath(path, folder)
        rec = {"input": path, "output": None, "direction": cascade.spec.direction, "config_hash": config_hash}
        try:
            image = load_and_augment(DomainItem(rel, path), "eval", side=side)
        except ImageDecodeError as exc:
            rec.update(status="skipped", reason=str(exc))
            records.append(rec)
            continue
        out_path = os.path.join(out_folder, os.path.splitext(rel)[0] + ".png")
        os.makedirs(os.path.dirname(out_path), exist_ok=True)
        save_image(cascade.translate_image(image), out_path)
        rec.update(output=out_path, status="ok", reason=None)
        records.append(rec)
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, manifest_path)
    return records
