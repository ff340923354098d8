import os

import pytest
import torch

from deepxlate.encoder import make_toy_encoder, save_random_vgg19_weights
from deepxlate.synthetic import make_shapes_domain

torch.set_num_threads(1)

TOY_CHANNELS = (8, 16, 32, 64, 64)
TOY_SIDE = 64

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_profile():
    return make_toy_encoder(0, TOY_CHANNELS, TOY_SIDE, embedding_dim=32)


@pytest.fixture(scope="session")
def toy_folders(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    make_shapes_domain(str(root / "A"), "disc", 16, TOY_SIDE, seed=0)
    make_shapes_domain(str(root / "B"), "square", 16, TOY_SIDE, seed=0)
    return root


@pytest.fixture(scope="session")
def vgg_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("vgg") / "vgg19_random.pth"
    save_random_vgg19_weights(path, seed=0)
    yield path
    os.remove(path)


@pytest.fixture(scope="session")
def vgg_profile(vgg_weights):
    from deepxlate.encoder import load_vgg19_profile

    return load_vgg19_profile(vgg_weights)


def domain_pyramid(folder, profile, n=None):
    """Normalized feature pyramid and [-1, 1] images for the first ``n`` items of a folder."""
    from deepxlate.data import build_folder_domain, iter_batches
    from deepxlate.encoder import extract_batch
    from deepxlate.featnorm import compute_domain_stats, normalize

    ds = build_folder_domain(folder, os.path.basename(str(folder)))
    if n is not None:
        ds.items = ds.items[:n]
    stats = compute_domain_stats(ds, profile)
    _, imgs = next(iter_batches(ds, len(ds), side=profile.input_side))
    raw = extract_batch(imgs, profile)
    return {lvl: normalize(raw[lvl], stats[lvl]) for lvl in raw}, imgs * 2 - 1


@pytest.fixture(scope="session")
def toy_pyramids(toy_folders, toy_profile):
    """{"A": (features, images), "B": (...)} over all 16 images per domain."""
    return {d: domain_pyramid(toy_folders / d, toy_profile) for d in ("A", "B")}


def write_random_cascade(profile, ckpt_dir, levels=(5, 4, 3), target="B", net_cfg=None, config_hash="h", seed=0):
    """Untrained translator + inverter checkpoints laid out as training would leave them."""
    from deepxlate import checkpoint as ckpt
    from deepxlate.networks import NetworkConfig, build_conditional_translator, build_deep_translator, build_inverter
    from deepxlate.pipeline import checkpoint_file, inverter_stage, stage_name

    net_cfg = net_cfg or NetworkConfig()
    torch.manual_seed(seed)
    for lvl in levels:
        net = build_deep_translator(profile, net_cfg) if lvl == 5 else build_conditional_translator(profile, lvl, net_cfg)
        stage = stage_name(lvl)
        ckpt.write_archive(checkpoint_file(ckpt_dir, stage), ckpt.pack_networks(stage, {f"G_{target}": net}),
                           {"stage": stage, "config_hash": config_hash})
    dec, _ = build_inverter(profile, levels[-1], net_cfg)
    stage = inverter_stage(target, levels[-1])
    ckpt.write_archive(checkpoint_file(ckpt_dir, stage), ckpt.pack_networks(stage, {"decoder": dec}),
                       {"stage": stage, "config_hash": config_hash})


def unit_stats(profile, domain, levels=(5, 4, 3)):
    from deepxlate.featnorm import ChannelStats

    return {lvl: ChannelStats(domain, lvl, (0.5,) * profile.tap(lvl).channels,
                              (2.0,) * profile.tap(lvl).channels, 1) for lvl in levels}
