import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deepxlate.featnorm import (
    STD_FLOOR,
    ChannelStats,
    FeatureStore,
    StatsError,
    StatsFileError,
    compute_stats,
    denormalize,
    load_stats,
    normalize,
    save_stats,
    standardize_features,
)


def brute_force(features):
    """Reference pooled mean/std: materialize every value of every channel."""
    arr = np.concatenate([f.numpy().reshape(f.shape[0], -1) for f in features], axis=1).astype(np.float64)
    return arr.mean(axis=1), arr.std(axis=1)


def test_two_constant_images():
    f1 = torch.ones(4, 3, 3)
    f2 = torch.full((4, 3, 3), 3.0)
    stats = compute_stats([("a", f1), ("b", f2)], "D", 5)
    mean, std = brute_force([f1, f2])
    assert stats.mean[0] == pytest.approx(2.0)
    assert stats.mean[0] == pytest.approx(mean[0], rel=1e-12)
    assert stats.std[0] == pytest.approx(std[0], rel=1e-12)
    assert stats.count == 2


def test_streaming_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    feats = [torch.randn(6, 5, 5, generator=g) * (i + 1) + 10 * i for i in range(7)]
    stats = compute_stats([(str(i), f) for i, f in enumerate(feats)], "D", 3)
    mean, std = brute_force(feats)
    np.testing.assert_allclose(stats.mean, mean, rtol=1e-5)
    np.testing.assert_allclose(stats.std, std, rtol=1e-5)
    again = compute_stats([(str(i), f) for i, f in enumerate(feats)], "D", 3)
    assert again == stats


def test_constant_channel_floor():
    stats = compute_stats([("x", torch.full((2, 4, 4), 7.0))], "D", 1)
    assert stats.std == (STD_FLOOR, STD_FLOOR)


def test_errors():
    with pytest.raises(StatsError, match="empty"):
        compute_stats([], "D", 1)
    bad = torch.ones(2, 2, 2)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(StatsError, match="'img7'"):
        compute_stats([("ok", torch.ones(2, 2, 2)), ("img7", bad)], "D", 1)
    stats = compute_stats([("ok", torch.randn(2, 3, 3))], "D", 1)
    with pytest.raises(StatsError, match="channel mismatch"):
        normalize(torch.zeros(3, 3, 3), stats)
    with pytest.raises(StatsError, match="channel mismatch"):
        denormalize(torch.zeros(3, 3, 3), stats)


def _stats(mean, std):
    return ChannelStats("D", 1, tuple(mean), tuple(std), 1)


def test_normalize_examples():
    s = _stats([1.0, -2.0], [2.0, 0.5])
    x = torch.empty(2, 2, 2)
    x[0], x[1] = 1.0, -2.0
    assert torch.equal(normalize(x, s), torch.zeros(2, 2, 2))
    x[0] = 1.0 + 3 * 2.0
    x[1] = -2.0 - 0.5 * 0.5
    out = normalize(x, s)
    assert torch.all(out[0] == 1.0)
    assert torch.allclose(out[1], torch.tensor(-0.5))


def test_denormalize_examples():
    s = _stats([1.0, -2.0], [2.0, 0.5])
    z = denormalize(torch.zeros(2, 3, 3), s)
    assert torch.all(z[0] == 1.0) and torch.all(z[1] == -2.0)
    one = denormalize(torch.ones(2, 1, 1), s)
    assert one[0, 0, 0] == 3.0 and one[1, 0, 0] == -1.5
    x = torch.tensor([1.5, -2.1]).view(2, 1, 1).expand(2, 3, 3).clone()
    back = denormalize(normalize(x, s), s)
    assert torch.allclose(back, x, rtol=1e-5)


def test_batched_normalize():
    s = _stats([1.0, -2.0], [2.0, 0.5])
    x = torch.randn(4, 2, 3, 3)
    assert torch.allclose(normalize(x, s)[2], normalize(x[2], s))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_normalized_range(mean, std, seed):
    s = _stats([mean, 0.0], [std, 1.0])
    x = torch.randn(2, 5, 5, generator=torch.Generator().manual_seed(seed)) * 1e3
    out = normalize(x, s)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_domain_moments_after_standardization():
    g = torch.Generator().manual_seed(1)
    feats = [torch.rand(4, 6, 6, generator=g) * 5 + 2 for _ in range(10)]
    s = compute_stats([(str(i), f) for i, f in enumerate(feats)], "D", 2)
    z = torch.stack([standardize_features(f.double(), s) for f in feats])
    pooled = z.transpose(0, 1).reshape(4, -1)
    assert pooled.mean(dim=1).abs().max() < 1e-4
    assert (pooled.std(dim=1, unbiased=False) - 1).abs().max() < 1e-3


def test_stats_roundtrip(tmp_path):
    s = compute_stats([("a", torch.randn(3, 4, 4))], "cats", 4, config_hash="abc")
    t = compute_stats([("a", torch.randn(3, 4, 4))], "dogs", 4)
    save_stats(s, tmp_path / "cats.json")
    save_stats(t, tmp_path / "dogs.json")
    assert load_stats(tmp_path / "cats.json") == s
    assert load_stats(tmp_path / "dogs.json") == t


def test_stats_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="not found"):
        load_stats(tmp_path / "missing.json")
    s = compute_stats([("a", torch.randn(3, 4, 4))], "cats", 4)
    p = tmp_path / "s.json"
    save_stats(s, p)
    text = p.read_text()
    p.write_text(text[: len(text) // 2])
    with pytest.raises(StatsFileError, match="truncated"):
        load_stats(p)
    rec = json.loads(text)
    rec["version"] = 99
    p.write_text(json.dumps(rec))
    with pytest.raises(StatsFileError, match="version"):
        load_stats(p)


def test_feature_store_roundtrip(tmp_path):
    store = FeatureStore.create(tmp_path / "c", "A", config_hash="h")
    xs = [torch.randn(4, 2, 2) for _ in range(3)]
    for i, x in enumerate(xs):
        store.write(f"id{i}", 5, x)
        store.write(f"id{i}", 0, x[:3])
    re = FeatureStore.open(tmp_path / "c")
    assert re.config_hash == "h" and re.levels() == [0, 5]
    assert re.ids(5) == ["id0", "id1", "id2"]
    assert torch.equal(re.load_level(5), torch.stack(xs))
    rec = re.records[0]
    assert set(rec) == {"source_id", "level", "shape", "dtype", "file", "offset", "nbytes"}
