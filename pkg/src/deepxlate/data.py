"""Unpaired domain datasets: image folders, COCO category filters, augmentation."""

from __future__ import annotations

import difflib
import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp", ".tif", ".tiff"}
# Train crops are taken from a shorter side 256/224 times the output side.
CROP_RATIO = 256 / 224


class DatasetError(Exception):
    pass


class ImageDecodeError(DatasetError):
    pass


@dataclass(frozen=True)
class DomainItem:
    id: str
    path: str


@dataclass
class DomainDataset:
    domain_id: str
    items: List[DomainItem]
    policy: str = "eval"
    ignored: int = 0

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate item ids in domain {self.domain_id!r}")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, idx) -> DomainItem:
        return self.items[idx]


@dataclass(frozen=True)
class CocoFilter:
    annotation_file: str
    category: str
    min_area_fraction: Optional[float] = None


def build_folder_domain(path: str | os.PathLike, domain_id: str) -> DomainDataset:
    root = os.fspath(path)
    if not os.path.isdir(root):
        raise DatasetError(f"domain folder does not exist: {root}")
    items, ignored = [], 0
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in filenames:
            full = os.path.join(dirpath, name)
            if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS:
                rel = os.path.relpath(full, root).replace(os.sep, "/")
                items.append(DomainItem(rel, full))
            else:
                ignored += 1
    items.sort(key=lambda it: it.id)
    if ignored:
        log.info("domain %s: ignored %d non-image files under %s", domain_id, ignored, root)
    if not items:
        raise DatasetError(f"no images found under {root}")
    return DomainDataset(domain_id, items, ignored=ignored)


def resolve_category(categories: List[dict], name: str) -> int:
    matches = [c["id"] for c in categories if c["name"] == name]
    if len(matches) == 1:
        return matches[0]
    names = [c["name"] for c in categories]
    if not matches:
        near = difflib.get_close_matches(name, names, n=5, cutoff=0.5)
        hint = f"; near matches: {', '.join(near)}" if near else ""
        raise DatasetError(f"unknown COCO category {name!r}{hint}")
    raise DatasetError(f"COCO category {name!r} is ambiguous (ids {matches})")


def build_coco_domain(
    coco_filter: CocoFilter, images_root: str | os.PathLike, domain_id: Optional[str] = None
) -> DomainDataset:
    """Images containing at least one instance of the category.

    Only annotation metadata is consulted (instance ``area``, falling back to
    the bbox); masks and pixels never leave this function.
    """
    with open(coco_filter.annotation_file) as fh:
        coco = json.load(fh)
    cat_id = resolve_category(coco.get("categories", []), coco_filter.category)
    images = {img["id"]: img for img in coco.get("images", [])}
    keep = set()
    for ann in coco.get("annotations", []):
        if ann.get("category_id") != cat_id or ann.get("image_id") not in images:
            continue
        if coco_filter.min_area_fraction:
            img = images[ann["image_id"]]
            area = ann.get("area")
            if area is None:
                _, _, w, h = ann["bbox"]
                area = w * h
            if area / float(img["width"] * img["height"]) < coco_filter.min_area_fraction:
                continue
        keep.add(ann["image_id"])
    root = os.fspath(images_root)
    items = [DomainItem(images[i]["file_name"], os.path.join(root, images[i]["file_name"])) for i in keep]
    items.sort(key=lambda it: it.id)
    if not items:
        raise DatasetError(f"no COCO images contain category {coco_filter.category!r}")
    return DomainDataset(domain_id or coco_filter.category, items)


def decode_rgb(path: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            # grayscale/palette/alpha all end up as 3-channel RGB
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc


def _resize_shorter(im: Image.Image, target: int) -> Image.Image:
    w, h = im.size
    if min(w, h) == target:
        return im
    scale = target / min(w, h)
    size = (max(target, round(w * scale)), max(target, round(h * scale)))
    return im.resize(size, Image.BICUBIC)


def item_rng(seed: int, item_id: str, copy: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(item_id.encode()), int(copy)])


def load_and_augment(
    item: DomainItem,
    policy: str = "eval",
    rng: Optional[np.random.Generator] = None,
    side: int = 224,
) -> torch.Tensor:
    """Decode to a float RGB tensor (3, side, side) in [0, 1].

    ``train``: shorter side to round(side*256/224), random ``side`` crop,
    mirror with p=0.5. ``eval``: shorter side to ``side``, center crop.
    """
    im = decode_rgb(item.path)
    if policy == "train":
        if rng is None:
            raise DatasetError("train policy needs an explicit rng")
        im = _resize_shorter(im, round(side * CROP_RATIO))
        w, h = im.size
        left = int(rng.integers(0, w - side + 1))
        top = int(rng.integers(0, h - side + 1))
        im = im.crop((left, top, left + side, top + side))
        if rng.random() < 0.5:
            im = im.transpose(Image.FLIP_LEFT_RIGHT)
    elif policy == "eval":
        im = _resize_shorter(im, side)
        w, h = im.size
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
    else:
        raise DatasetError(f"unknown augmentation policy {policy!r}")
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def iter_batches(
    dataset: DomainDataset,
    batch_size: int,
    side: int = 224,
    policy: str = "eval",
    seed: int = 0,
    copy: int = 0,
) -> Iterator[Tuple[List[str], torch.Tensor]]:
    """Yield ``(ids, images)`` in dataset order; undecodable items propagate."""
    ids, imgs = [], []
    for item in dataset.items:
        rng = item_rng(seed, item.id, copy) if policy == "train" else None
        imgs.append(load_and_augment(item, policy, rng, side))
        ids.append(item.id)
        if len(ids) == batch_size:
            yield ids, torch.stack(imgs)
            ids, imgs = [], []
    if ids:
        yield ids, torch.stack(imgs)


def save_image(tensor_or_array, path: str | os.PathLike) -> None:
    if isinstance(tensor_or_array, torch.Tensor):
        arr = tensor_or_array.detach().cpu().numpy()
    else:
        arr = np.asarray(tensor_or_array)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr.astype(np.uint8), "RGB").save(os.fspath(path))
