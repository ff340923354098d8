"""Fréchet distance between embedding sets and 2-D projection export."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import DomainItem, load_and_augment


class EvalError(Exception):
    pass


@dataclass
class EmbeddingSet:
    label: str
    matrix: np.ndarray
    extractor: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise EvalError(f"{self.label}: embeddings must be a 2-D matrix")
        if not np.isfinite(self.matrix).all():
            raise EvalError(f"{self.label}: non-finite embedding rows")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def moments(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.n < 2:
            raise EvalError(f"{self.label}: need at least 2 embeddings for a covariance, got {self.n}")
        return self.matrix.mean(axis=0), np.cov(self.matrix, rowvar=False, ddof=1).reshape(
            self.matrix.shape[1], self.matrix.shape[1]
        )


def psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to 0."""
    sym = (mat + mat.T) / 2
    w, v = np.linalg.eigh(sym)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((cov_a cov_b)^(1/2)) via the similar PSD matrix sqrt(a) b sqrt(a)."""
    ra = psd_sqrt(cov_a)
    w = np.linalg.eigvalsh((ra @ cov_b @ ra + (ra @ cov_b @ ra).T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(float), np.atleast_2d(cov_b).astype(float)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise EvalError(f"dimension mismatch: {mu_a.shape} vs {mu_b.shape}")
    mean_term = float(((mu_a - mu_b) ** 2).sum())
    if not np.isfinite(mean_term):
        raise EvalError("non-finite mean difference term")
    tr = trace_sqrt_product(cov_a, cov_b)
    if not np.isfinite(tr):
        raise EvalError("non-finite covariance square-root term")
    fd = mean_term + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr
    if not np.isfinite(fd):
        raise EvalError("non-finite Fréchet distance")
    # tiny negatives come from round-off only
    return max(fd, 0.0)


def frechet_distance(a: EmbeddingSet, b: EmbeddingSet) -> float:
    if a.matrix.shape[1] != b.matrix.shape[1]:
        raise EvalError(f"embedding dims differ: {a.matrix.shape[1]} vs {b.matrix.shape[1]}")
    return frechet_from_moments(*a.moments(), *b.moments())


# --- embedding extraction ---------------------------------------------------


Extractor = Callable[[torch.Tensor], torch.Tensor]


class ProfileExtractor:
    """Penultimate classifier activations of an encoder profile."""

    def __init__(self, profile):
        from .encoder import extract_embedding

        self.profile = profile
        self.side = profile.input_side
        self.tag = f"{profile.name}-head{profile.embedding_dim}"
        self._fn = extract_embedding

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return self._fn(images, self.profile)


class TorchScriptExtractor:
    """User-supplied TorchScript model (e.g. an inception pool3 exporter).

    Receives [0, 1] RGB batches resized to ``side``; output is flattened.
    """

    def __init__(self, path: str, side: int = 299):
        self.module = torch.jit.load(path, map_location="cpu").eval()
        self.side = side
        self.tag = f"torchscript:{os.path.basename(path)}"

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return self.module(images).flatten(1)


def collect_embeddings(paths: Sequence[str], extractor, label: str, batch_size: int = 16) -> EmbeddingSet:
    rows = []
    for s in range(0, len(paths), batch_size):
        chunk = paths[s: s + batch_size]
        imgs = torch.stack([load_and_augment(DomainItem(p, p), "eval", side=extractor.side) for p in chunk])
        with torch.no_grad():
            rows.append(extractor(imgs).double().cpu().numpy())
    if not rows:
        raise EvalError(f"{label}: no images")
    return EmbeddingSet(label, np.concatenate(rows), extractor.tag)


# --- 2-D projection -----------------------------------------------------------


def project_2d(sets: Sequence[EmbeddingSet], method: str = "tsne", seed: int = 0,
               perplexity: float = 30.0, max_iter: int = 1000):
    """Returns ``(points (n, 2), labels list)``.

    t-SNE perplexity is capped at (n - 1) / 3 for small sample counts.
    """
    data = np.concatenate([s.matrix for s in sets])
    labels = [s.label for s in sets for _ in range(s.n)]
    if data.shape[0] < 3:
        raise EvalError(f"projection needs at least 3 points, got {data.shape[0]}")
    if method == "pca":
        centered = data - data.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        pts = centered @ vt[:2].T
        if pts.shape[1] < 2:
            pts = np.pad(pts, ((0, 0), (0, 2 - pts.shape[1])))
    elif method == "tsne":
        from sklearn.manifold import TSNE

        perp = min(perplexity, max(1.0, (data.shape[0] - 1) / 3))
        pts = TSNE(n_components=2, perplexity=perp, max_iter=max_iter, random_state=seed,
                   init="pca").fit_transform(data)
    else:
        raise EvalError(f"unknown projection method {method!r}")
    return pts, labels


def write_point_table(path: str, points: np.ndarray, labels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(("x", "y", "label"))
        for (x, y), lab in zip(points, labels):
            w.writerow((repr(float(x)), repr(float(y)), lab))


def read_point_table(path: str):
    with open(path) as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows]), [r["label"] for r in rows]


LEDGER_FIELDS = ("dataset", "direction", "score", "n_translated", "n_target", "extractor", "config_hash", "time")


def append_score(ledger_path: str, dataset: str, direction: str, score: float, n_translated: int,
                 n_target: int, extractor: str, config_hash: str) -> dict:
    os.makedirs(os.path.dirname(ledger_path) or ".", exist_ok=True)
    new = not os.path.exists(ledger_path)
    row = {
        "dataset": dataset, "direction": direction, "score": repr(float(score)),
        "n_translated": n_translated, "n_target": n_target, "extractor": extractor,
        "config_hash": config_hash, "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(ledger_path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS, delimiter="\t")
        if new:
            w.writeheader()
        w.writerow(row)
    return row
