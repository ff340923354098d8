"""Per-domain channel statistics, normalization to [-1, 1] and their files.

Stats file (JSON, one object, keys in this order)::

    format      "deepxlate-channel-stats"
    version     1
    domain_id   str
    level       int 1..5
    channels    int
    count       int   images aggregated
    mean        [channels floats]
    std         [channels floats]  already floored at STD_FLOOR
    config_hash str
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, List, Tuple

import numpy as np
import torch

STD_FLOOR = 1e-6
STATS_FORMAT = "deepxlate-channel-stats"
STATS_VERSION = 1


class StatsError(Exception):
    pass


class StatsFileError(StatsError):
    pass


@dataclass(frozen=True)
class ChannelStats:
    domain_id: str
    level: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    count: int
    config_hash: str = ""

    @property
    def channels(self) -> int:
        return len(self.mean)

    def tensors(self, ndim: int, dtype=torch.float32):
        shape = (-1,) + (1,) * (ndim - 1) if ndim == 3 else (1, -1) + (1,) * (ndim - 2)
        mean = torch.tensor(self.mean, dtype=dtype).view(shape)
        std = torch.tensor(self.std, dtype=dtype).view(shape)
        return mean, std


class StatsAccumulator:
    """Streaming per-channel mean/variance pooled over images and positions.

    Batches are merged with the pairwise (Chan et al.) update in float64.
    """

    def __init__(self, domain_id: str, level: int, eps: float = STD_FLOOR):
        self.domain_id = domain_id
        self.level = level
        self.eps = eps
        self.n = 0  # scalar values per channel
        self.images = 0
        self.mean = None
        self.m2 = None

    def update(self, features: torch.Tensor, item_id: str = "?") -> None:
        x = features.detach().to(torch.float64)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if not torch.isfinite(x).all():
            raise StatsError(f"non-finite activation in item {item_id!r} (level {self.level})")
        c = x.shape[1]
        flat = x.transpose(0, 1).reshape(c, -1)
        nb = flat.shape[1]
        mb = flat.mean(dim=1)
        m2b = ((flat - mb[:, None]) ** 2).sum(dim=1)
        if self.mean is None:
            self.mean, self.m2, self.n = mb, m2b, nb
        else:
            if c != self.mean.shape[0]:
                raise StatsError(f"channel count changed from {self.mean.shape[0]} to {c} at {item_id!r}")
            n = self.n + nb
            delta = mb - self.mean
            self.mean = self.mean + delta * (nb / n)
            self.m2 = self.m2 + m2b + delta**2 * (self.n * nb / n)
            self.n = n
        self.images += x.shape[0]

    def finalize(self, config_hash: str = "") -> ChannelStats:
        if self.mean is None:
            raise StatsError(f"no data for domain {self.domain_id!r} level {self.level}")
        std = torch.sqrt(self.m2 / self.n).clamp_min(self.eps)
        return ChannelStats(
            domain_id=self.domain_id,
            level=self.level,
            mean=tuple(self.mean.tolist()),
            std=tuple(std.tolist()),
            count=self.images,
            config_hash=config_hash,
        )


def compute_stats(
    features: Iterable[Tuple[str, torch.Tensor]],
    domain_id: str,
    level: int,
    eps: float = STD_FLOOR,
    config_hash: str = "",
) -> ChannelStats:
    """Channel stats from ``(item_id, tensor)`` pairs (tensor (C,H,W) or (N,C,H,W))."""
    acc = StatsAccumulator(domain_id, level, eps)
    for item_id, feat in features:
        acc.update(feat, item_id)
    if acc.mean is None:
        raise StatsError(f"empty dataset for domain {domain_id!r}")
    return acc.finalize(config_hash)


def compute_domain_stats(dataset, profile, levels=(1, 2, 3, 4, 5), batch_size: int = 8, config_hash: str = ""):
    """Run every item of ``dataset`` through the encoder once and pool all ``levels``."""
    from .data import iter_batches
    from .encoder import extract_batch

    if len(dataset) == 0:
        raise StatsError(f"empty dataset for domain {dataset.domain_id!r}")
    accs = {lvl: StatsAccumulator(dataset.domain_id, lvl) for lvl in levels}
    for ids, images in iter_batches(dataset, batch_size, side=profile.input_side):
        feats = extract_batch(images, profile)
        for lvl in levels:
            acc = accs[lvl]
            for item_id, f in zip(ids, feats[lvl]):
                acc.update(f, item_id)
    return {lvl: acc.finalize(config_hash) for lvl, acc in accs.items()}


def _check_channels(features: torch.Tensor, stats: ChannelStats) -> int:
    cdim = 0 if features.dim() == 3 else 1
    if features.dim() not in (3, 4) or features.shape[cdim] != stats.channels:
        raise StatsError(
            f"channel mismatch: features {tuple(features.shape)} vs stats with {stats.channels} channels"
        )
    return features.dim()


def standardize_features(features: torch.Tensor, stats: ChannelStats) -> torch.Tensor:
    """(x - mean) / std without clamping."""
    ndim = _check_channels(features, stats)
    mean, std = stats.tensors(ndim, features.dtype)
    return (features - mean) / std


def normalize(features: torch.Tensor, stats: ChannelStats) -> torch.Tensor:
    return standardize_features(features, stats).clamp(-1.0, 1.0)


def denormalize(features: torch.Tensor, stats: ChannelStats) -> torch.Tensor:
    ndim = _check_channels(features, stats)
    mean, std = stats.tensors(ndim, features.dtype)
    return features * std + mean


def stats_path(root: str | os.PathLike, domain_id: str, level: int) -> str:
    return os.path.join(os.fspath(root), f"stats_{domain_id}_L{level}.json")


def save_stats(stats: ChannelStats, path: str | os.PathLike) -> None:
    record = {
        "format": STATS_FORMAT,
        "version": STATS_VERSION,
        "domain_id": stats.domain_id,
        "level": stats.level,
        "channels": stats.channels,
        "count": stats.count,
        "mean": list(stats.mean),
        "std": list(stats.std),
        "config_hash": stats.config_hash,
    }
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh)
    os.replace(tmp, path)


def load_stats(path: str | os.PathLike) -> ChannelStats:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"stats file not found: {path}")
    try:
        with open(path) as fh:
            rec = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise StatsFileError(f"corrupt or truncated stats file {path}: {exc}") from exc
    if rec.get("format") != STATS_FORMAT or rec.get("version") != STATS_VERSION:
        raise StatsFileError(
            f"{path}: unsupported stats format {rec.get('format')!r} version {rec.get('version')!r}"
        )
    try:
        stats = ChannelStats(
            domain_id=rec["domain_id"],
            level=int(rec["level"]),
            mean=tuple(float(v) for v in rec["mean"]),
            std=tuple(float(v) for v in rec["std"]),
            count=int(rec["count"]),
            config_hash=rec.get("config_hash", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StatsFileError(f"{path}: malformed record ({exc})") from exc
    if stats.channels != rec["channels"] or len(stats.std) != stats.channels:
        raise StatsFileError(f"{path}: channel count does not match vector lengths")
    if not all(math.isfinite(v) for v in stats.mean + stats.std) or min(stats.std) <= 0:
        raise StatsFileError(f"{path}: non-finite mean or non-positive std")
    return stats


# --- pyramid record store -------------------------------------------------


_DTYPES = {"float32": (torch.float32, np.float32), "float16": (torch.float16, np.float16)}


@dataclass
class FeatureStore:
    """Directory of raw tensor records plus an ``index.jsonl`` listing them.

    Each record is ``(source_id, level, shape, dtype, file, offset, nbytes)``;
    bytes for one level are appended to ``L<level>.bin``. Level 0 holds the
    image itself in [-1, 1] (used as the inverter target).
    """

    root: str
    domain_id: str = ""
    kind: str = "normalized"
    config_hash: str = ""
    records: List[dict] = field(default_factory=list)

    INDEX = "index.jsonl"
    META = "meta.json"

    @classmethod
    def create(cls, root, domain_id: str, kind: str = "normalized", config_hash: str = "") -> "FeatureStore":
        root = os.fspath(root)
        os.makedirs(root, exist_ok=True)
        for name in os.listdir(root):
            if name.endswith(".bin") or name in (cls.INDEX, cls.META):
                os.remove(os.path.join(root, name))
        store = cls(root, domain_id, kind, config_hash)
        with open(os.path.join(root, cls.META), "w") as fh:
            json.dump({"domain_id": domain_id, "kind": kind, "config_hash": config_hash}, fh)
        return store

    @classmethod
    def open(cls, root) -> "FeatureStore":
        root = os.fspath(root)
        meta_path = os.path.join(root, cls.META)
        if not os.path.exists(meta_path):
            raise FileNotFoundError(f"no feature cache at {root}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        store = cls(root, meta["domain_id"], meta["kind"], meta.get("config_hash", ""))
        with open(os.path.join(root, cls.INDEX)) as fh:
            store.records = [json.loads(line) for line in fh if line.strip()]
        return store

    def write(self, source_id: str, level: int, tensor: torch.Tensor, dtype: str = "float32") -> None:
        _, np_dtype = _DTYPES[dtype]
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(np_dtype))
        fname = f"L{level}.bin"
        fpath = os.path.join(self.root, fname)
        offset = os.path.getsize(fpath) if os.path.exists(fpath) else 0
        with open(fpath, "ab") as fh:
            fh.write(arr.tobytes())
        rec = {
            "source_id": source_id,
            "level": level,
            "shape": list(arr.shape),
            "dtype": dtype,
            "file": fname,
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        self.records.append(rec)
        with open(os.path.join(self.root, self.INDEX), "a") as fh:
            fh.write(json.dumps(rec) + "\n")

    def levels(self) -> List[int]:
        return sorted({r["level"] for r in self.records})

    def ids(self, level: int) -> List[str]:
        return [r["source_id"] for r in self.records if r["level"] == level]

    def load_level(self, level: int) -> torch.Tensor:
        recs = [r for r in self.records if r["level"] == level]
        if not recs:
            raise FileNotFoundError(f"cache {self.root} has no level {level}")
        out = []
        cache = {}
        for r in recs:
            torch_dtype, np_dtype = _DTYPES[r["dtype"]]
            if r["file"] not in cache:
                cache[r["file"]] = np.fromfile(os.path.join(self.root, r["file"]), dtype=np.uint8)
            raw = cache[r["file"]][r["offset"]: r["offset"] + r["nbytes"]]
            if raw.size != r["nbytes"]:
                raise StatsFileError(f"truncated cache record {r['source_id']} level {level}")
            out.append(torch.from_numpy(raw.view(np_dtype).reshape(r["shape"]).copy()).to(torch.float32))
        return torch.stack(out)
