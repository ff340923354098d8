import json

import numpy as np
import pytest
import torch
from PIL import Image

from deepxlate.data import (
    CocoFilter,
    DatasetError,
    DomainItem,
    ImageDecodeError,
    build_coco_domain,
    build_folder_domain,
    item_rng,
    iter_batches,
    load_and_augment,
)


def _png(path, size=(40, 30), color=(10, 20, 30), mode="RGB"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new(mode, size, color if mode == "RGB" else color[0]).save(path)


def test_folder_domain_sorted_nested(tmp_path, caplog):
    for name in ("b.png", "a.jpg", "sub/c.png", "sub/deeper/d.png"):
        _png(tmp_path / name)
    (tmp_path / "readme.txt").write_text("x")
    (tmp_path / "sub" / "labels.csv").write_text("x")
    with caplog.at_level("INFO"):
        ds = build_folder_domain(tmp_path, "horse")
    assert [it.id for it in ds.items] == ["a.jpg", "b.png", "sub/c.png", "sub/deeper/d.png"]
    assert ds.ignored == 2 and "ignored 2" in caplog.text
    assert [it.id for it in build_folder_domain(tmp_path, "horse").items] == [it.id for it in ds.items]


def test_folder_domain_errors(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        build_folder_domain(tmp_path / "missing", "x")
    (tmp_path / "a.txt").write_text("x")
    with pytest.raises(DatasetError, match="no images"):
        build_folder_domain(tmp_path, "x")


@pytest.fixture()
def coco_file(tmp_path):
    images = [{"id": i, "file_name": f"{i:012d}.jpg", "width": 100, "height": 100} for i in range(1, 6)]
    anns = [
        {"id": 1, "image_id": 2, "category_id": 24, "area": 2500.0, "bbox": [0, 0, 50, 50]},
        {"id": 2, "image_id": 4, "category_id": 24, "area": 100.0, "bbox": [0, 0, 10, 10]},
        {"id": 3, "image_id": 1, "category_id": 19, "area": 900.0, "bbox": [0, 0, 30, 30]},
        {"id": 4, "image_id": 5, "category_id": 19, "bbox": [0, 0, 40, 40]},
    ]
    cats = [{"id": 19, "name": "horse"}, {"id": 24, "name": "zebra"}, {"id": 25, "name": "giraffe"}]
    path = tmp_path / "instances.json"
    path.write_text(json.dumps({"images": images, "annotations": anns, "categories": cats}))
    return str(path)


def test_coco_category_filter(coco_file, tmp_path):
    ds = build_coco_domain(CocoFilter(coco_file, "zebra"), tmp_path / "imgs")
    assert [it.id for it in ds.items] == ["000000000002.jpg", "000000000004.jpg"]
    assert ds.domain_id == "zebra"
    assert ds.items[0].path == str(tmp_path / "imgs" / "000000000002.jpg")


def test_coco_min_area(coco_file, tmp_path):
    # the instance on image 4 covers 1% of the frame
    ds = build_coco_domain(CocoFilter(coco_file, "zebra", min_area_fraction=0.05), tmp_path)
    assert [it.id for it in ds.items] == ["000000000002.jpg"]
    # no `area` field: fall back to the bbox (1600 / 10000)
    ds = build_coco_domain(CocoFilter(coco_file, "horse", min_area_fraction=0.12), tmp_path)
    assert [it.id for it in ds.items] == ["000000000005.jpg"]


def test_coco_unknown_category(coco_file, tmp_path):
    with pytest.raises(DatasetError, match="near matches: zebra"):
        build_coco_domain(CocoFilter(coco_file, "zebras"), tmp_path)
    with pytest.raises(DatasetError, match="unknown COCO category 'unicorn'"):
        build_coco_domain(CocoFilter(coco_file, "unicorn"), tmp_path)


def test_eval_center_crop(tmp_path):
    arr = np.zeros((448, 600, 3), dtype=np.uint8)
    arr[:, 300:] = 255  # right half white
    path = tmp_path / "wide.png"
    Image.fromarray(arr).save(path)
    img = load_and_augment(DomainItem("wide", str(path)), "eval", side=224)
    assert img.shape == (3, 224, 224) and img.dtype == torch.float32
    assert 0 <= img.min() and img.max() <= 1
    # 600 -> 300 wide after resize, crop columns 38..262 -> boundary at column 112
    assert img[:, :, :100].max() < 0.05 and img[:, :, 125:].min() > 0.95


def test_train_policy_seeded(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "noise.png"
    Image.fromarray(rng.integers(0, 256, (300, 280, 3), dtype=np.uint8)).save(path)
    item = DomainItem("noise", str(path))
    a = load_and_augment(item, "train", item_rng(7, "noise"), side=64)
    b = load_and_augment(item, "train", item_rng(7, "noise"), side=64)
    c = load_and_augment(item, "train", item_rng(7, "noise", copy=1), side=64)
    assert a.shape == (3, 64, 64)
    assert torch.equal(a, b) and not torch.equal(a, c)
    with pytest.raises(DatasetError):
        load_and_augment(item, "train", None)
    with pytest.raises(DatasetError, match="policy"):
        load_and_augment(item, "jitter")


def test_mirror_rate(tmp_path):
    arr = np.zeros((64, 64, 3), dtype=np.uint8)
    arr[:, :32] = 255  # left half white
    path = tmp_path / "half.png"
    Image.fromarray(arr).save(path)
    item = DomainItem("half", str(path))
    rng = np.random.default_rng(123)
    flips = 0
    for _ in range(1000):
        img = load_and_augment(item, "train", rng, side=56)
        flips += int(img[:, :, -1].mean() > img[:, :, 0].mean())
    assert abs(flips / 1000 - 0.5) <= 0.05


def test_grayscale_and_corrupt(tmp_path):
    _png(tmp_path / "g.png", (50, 50), (200, 0, 0), mode="L")
    img = load_and_augment(DomainItem("g", str(tmp_path / "g.png")), "eval", side=32)
    assert img.shape == (3, 32, 32)
    assert torch.equal(img[0], img[1]) and torch.equal(img[1], img[2])
    (tmp_path / "bad.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(ImageDecodeError, match="bad.png"):
        load_and_augment(DomainItem("bad", str(tmp_path / "bad.png")))


def test_iter_batches(tmp_path):
    for i in range(5):
        _png(tmp_path / f"{i}.png", (40, 40), (i * 40, 0, 0))
    ds = build_folder_domain(tmp_path, "x")
    batches = list(iter_batches(ds, 2, side=32))
    assert [ids for ids, _ in batches] == [["0.png", "1.png"], ["2.png", "3.png"], ["4.png"]]
    assert batches[0][1].shape == (2, 3, 32, 32)
