import json

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import unit_stats, write_random_cascade
from deepxlate.networks import NetworkConfig
from deepxlate.pipeline import Cascade, CascadeSpec, PipelineError, batch_translate, to_uint8

TOY_NET = NetworkConfig(controller_hidden=32, critic_max_width=32, disc_base_width=8)


@pytest.fixture(scope="module")
def vgg_cascade(vgg_profile, tmp_path_factory):
    d = tmp_path_factory.mktemp("vgg_ckpt")
    write_random_cascade(vgg_profile, str(d))
    spec = CascadeSpec("AtoB", str(d), {"A": unit_stats(vgg_profile, "A")}, config_hash="h")
    return Cascade(spec, vgg_profile)


@pytest.fixture()
def toy_cascade(toy_profile, tmp_path):
    d = tmp_path / "ckpt"
    write_random_cascade(toy_profile, str(d), net_cfg=TOY_NET)
    spec = CascadeSpec("AtoB", str(d), {"A": unit_stats(toy_profile, "A")}, config_hash="h")
    return Cascade(spec, toy_profile, TOY_NET)


def test_vgg_cascade_shapes(vgg_cascade):
    torch.manual_seed(0)
    img = torch.rand(3, 224, 224)
    assert vgg_cascade.trace_shapes(img) == [(512, 14, 14), (512, 28, 28), (256, 56, 56), (3, 224, 224)]
    out = vgg_cascade.translate_image(img)
    assert out.shape == (3, 224, 224) and out.dtype == np.uint8
    assert np.array_equal(out, vgg_cascade.translate_image(img))


def test_stop_level(toy_cascade, toy_profile):
    img = torch.rand(3, 64, 64)
    assert toy_cascade.translate_to_level(img, 5).shape == toy_profile.feature_shape(5)
    assert toy_cascade.translate_to_level(img, 4).shape == toy_profile.feature_shape(4)
    with pytest.raises(PipelineError, match="stop level 2"):
        toy_cascade.translate_to_level(img, 2)
    with pytest.raises(PipelineError, match="stop level 6"):
        toy_cascade.translate_to_level(img, 6)


def test_missing_checkpoint(toy_profile, tmp_path):
    d = tmp_path / "ckpt"
    write_random_cascade(toy_profile, str(d), net_cfg=TOY_NET)
    (d / "conditional4.ckpt").unlink()
    spec = CascadeSpec("AtoB", str(d), {"A": unit_stats(toy_profile, "A")})
    with pytest.raises(PipelineError, match="conditional4.ckpt"):
        Cascade(spec, toy_profile, TOY_NET)


def test_wrong_direction_needs_other_inverter(toy_profile, tmp_path):
    d = tmp_path / "ckpt"
    write_random_cascade(toy_profile, str(d), net_cfg=TOY_NET)
    spec = CascadeSpec("BtoA", str(d), {"B": unit_stats(toy_profile, "B")})
    with pytest.raises(PipelineError, match="inverter_A_L3"):
        Cascade(spec, toy_profile, TOY_NET)


def test_stats_channel_mismatch(toy_profile, vgg_profile, tmp_path):
    d = tmp_path / "ckpt"
    write_random_cascade(toy_profile, str(d), net_cfg=TOY_NET)
    spec = CascadeSpec("AtoB", str(d), {"A": unit_stats(vgg_profile, "A")})
    with pytest.raises(PipelineError, match="channels"):
        Cascade(spec, toy_profile, TOY_NET)


def test_spec_validation():
    with pytest.raises(PipelineError):
        CascadeSpec("AtoC", ".", {})
    with pytest.raises(PipelineError, match="contiguous"):
        CascadeSpec("AtoB", ".", {}, levels=[5, 3])


def test_to_uint8_affine_map():
    x = torch.tensor([-1.0, 1.0, 0.0], dtype=torch.float64)
    # 0 maps to the only exact tie in range, 127.5 -> 128 (even)
    assert to_uint8(x).tolist() == [0, 255, 128]
    assert to_uint8(torch.tensor([-2.0, 2.0])).tolist() == [0, 255]
    g = torch.Generator().manual_seed(0)
    y = torch.rand(1000, generator=g) * 2 - 1
    expected = [int(np.floor((v + 1) * 127.5 + 0.5)) for v in y.double().tolist()]
    assert to_uint8(y).tolist() == expected


def _write_inputs(folder):
    folder.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        Image.fromarray(rng.integers(0, 256, (80, 70, 3), dtype=np.uint8)).save(folder / f"im{i}.png")
    (folder / "broken.jpg").write_bytes(b"not an image")
    (folder / "notes.txt").write_text("ignored")


def test_batch_translate(toy_cascade, tmp_path):
    src = tmp_path / "in"
    _write_inputs(src)
    out = tmp_path / "out"
    records = batch_translate(str(src), toy_cascade, str(out))
    assert [r["status"] for r in records] == ["skipped", "ok", "ok", "ok"]
    assert "broken.jpg" in records[0]["reason"]
    for r in records[1:]:
        with Image.open(r["output"]) as im:
            assert im.size == (64, 64) and im.mode == "RGB"
    manifest = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
    assert manifest == records
    assert {"input", "output", "direction", "config_hash", "status", "reason"} <= set(manifest[0])

    first = {r["output"]: open(r["output"], "rb").read() for r in records[1:]}
    batch_translate(str(src), toy_cascade, str(out))
    assert all(open(p, "rb").read() == b for p, b in first.items())


def test_batch_translate_empty_and_foreign_manifest(toy_cascade, tmp_path):
    (tmp_path / "empty").mkdir()
    assert batch_translate(str(tmp_path / "empty"), toy_cascade, str(tmp_path / "o1")) == []
    assert (tmp_path / "o1" / "manifest.jsonl").read_text() == ""

    out = tmp_path / "o2"
    out.mkdir()
    (out / "manifest.jsonl").write_text(json.dumps({"config_hash": "other"}) + "\n")
    with pytest.raises(PipelineError, match="refusing"):
        batch_translate(str(tmp_path / "empty"), toy_cascade, str(out))
