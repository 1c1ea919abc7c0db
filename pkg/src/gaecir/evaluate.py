"""Evaluation metrics and analogy rendering.

Metrics: mean symmetric reconstruction error (MSRE), mean symmetric
cross-reconstruction error (MSCRE), Davies-Bouldin index over mapping-code
clusters, and the circular rotation error of a KNN angle classifier.
All evaluation runs on clean (uncorrupted) inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import model as gm
from .data import PairDataset
from .errors import ConfigError, DegenerateInputError, ShapeError
from .model import GaeParams

DEFAULT_MSCRE_K = 10
DEFAULT_KNN_K = 5
DEFAULT_EVAL_SEED = 20240101


@dataclass
class MetricsReport:
    """One (GAE Data, Eval Data) result row."""

    gae_data: str
    eval_data: str
    n_pairs: int
    msre: float
    mscre: float
    dbi: float
    rotation_error_deg: float

    CSV_HEADER = "gae_data,eval_data,n_pairs,msre,mscre,dbi,rotation_error_deg"

    def to_csv_row(self) -> str:
        return (f"{self.gae_data},{self.eval_data},{self.n_pairs},"
                f"{self.msre:.6f},{self.mscre:.6f},{self.dbi:.6f},"
                f"{self.rotation_error_deg:.6f}")


@dataclass
class ClusterStats:
    """Per-class centroids and scatters of mapping codes."""

    centroids: np.ndarray   # (C, L)
    scatters: np.ndarray    # (C,)
    class_labels: np.ndarray


def msre(params: GaeParams, dataset: PairDataset) -> float:
    """Mean symmetric reconstruction error over clean pairs."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    errs = gm.symmetric_recon_error(params, dataset.x, dataset.y,
                                    dataset.x, dataset.y)
    return float(np.mean(errs))


def mscre(params: GaeParams, dataset: PairDataset, k: int = DEFAULT_MSCRE_K,
          seed: int = DEFAULT_EVAL_SEED) -> float:
    """Mean symmetric cross-reconstruction error with partners drawn
    uniformly from each pair's k nearest mapping-code neighbors."""
    n = len(dataset)
    if n < k + 1:
        raise ConfigError(f"mscre with k={k} needs at least {k + 1} pairs, got {n}")
    codes = gm.infer_mapping(params, dataset.x, dataset.y)
    sq = np.sum(codes ** 2, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (codes @ codes.T)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    rng = np.random.default_rng(seed)
    partner = order[np.arange(n), rng.integers(k, size=n)]
    errs = gm.symmetric_cross_recon_error(params, codes[partner],
                                          dataset.x, dataset.y)
    return float(np.mean(errs))


def cluster_stats(codes: np.ndarray, labels: np.ndarray) -> ClusterStats:
    classes = np.unique(labels)
    centroids = np.stack([codes[labels == c].mean(axis=0) for c in classes])
    scatters = np.array([
        float(np.mean(np.linalg.norm(codes[labels == c] - centroids[i], axis=1)))
        for i, c in enumerate(classes)
    ])
    return ClusterStats(centroids, scatters, classes)


def davies_bouldin(codes: np.ndarray, labels: np.ndarray) -> float:
    """DB = mean_i max_{j != i} (s_i + s_j) / d_ij over class clusters."""
    codes = np.atleast_2d(codes)
    labels = np.asarray(labels)
    stats = cluster_stats(codes, labels)
    c = len(stats.class_labels)
    if c < 2:
        raise ConfigError(f"Davies-Bouldin needs at least 2 classes, got {c}")
    worst = np.zeros(c)
    for i in range(c):
        for j in range(c):
            if i == j:
                continue
            dist = float(np.linalg.norm(stats.centroids[i] - stats.centroids[j]))
            if dist == 0.0:
                raise DegenerateInputError(
                    f"coincident centroids for classes "
                    f"{stats.class_labels[i]} and {stats.class_labels[j]}"
                )
            worst[i] = max(worst[i], (stats.scatters[i] + stats.scatters[j]) / dist)
    return float(np.mean(worst))


def knn_classify(train_codes: np.ndarray, train_labels: np.ndarray,
                 query_codes: np.ndarray, K: int = DEFAULT_KNN_K) -> np.ndarray:
    """Majority vote over the K nearest training codes (Euclidean).

    Vote ties break by smaller mean distance, then by smaller angle.
    """
    train_codes = np.atleast_2d(train_codes)
    query_codes = np.atleast_2d(query_codes)
    train_labels = np.asarray(train_labels)
    n = train_codes.shape[0]
    if n == 0:
        raise ConfigError("empty KNN training set")
    if K < 1 or K > n:
        raise ConfigError(f"K={K} outside [1, {n}]")
    sq_t = np.sum(train_codes ** 2, axis=1)
    d = (np.sum(query_codes ** 2, axis=1)[:, None] + sq_t[None, :]
         - 2.0 * (query_codes @ train_codes.T))
    order = np.argsort(d, axis=1, kind="stable")[:, :K]
    preds = np.empty(query_codes.shape[0], dtype=train_labels.dtype)
    for q in range(query_codes.shape[0]):
        nn = order[q]
        nn_labels = train_labels[nn]
        nn_dists = d[q, nn]
        votes = {}
        for lbl, dist in zip(nn_labels, nn_dists):
            cnt, total = votes.get(int(lbl), (0, 0.0))
            votes[int(lbl)] = (cnt + 1, total + float(dist))
        best = sorted(votes.items(),
                      key=lambda kv: (-kv[1][0], kv[1][1] / kv[1][0], kv[0]))
        preds[q] = best[0][0]
    return preds


def rotation_error(predictions, truths) -> float:
    """Mean circular distance in degrees between predictions and truths."""
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if predictions.shape != truths.shape:
        raise ShapeError(
            f"length mismatch: {predictions.shape} vs {truths.shape}"
        )
    diff = np.abs(predictions - truths) % 360.0
    return float(np.mean(np.minimum(diff, 360.0 - diff)))


def compute_metrics(params: GaeParams, eval_test: PairDataset,
                    knn_train: PairDataset, gae_data: str = "?",
                    eval_data: str = "?", mscre_k: int = DEFAULT_MSCRE_K,
                    knn_k: int = DEFAULT_KNN_K,
                    seed: int = DEFAULT_EVAL_SEED) -> MetricsReport:
    """Full metric row for one (checkpoint, eval data) combination.

    The KNN classifier trains on mapping codes of knn_train (normally the
    eval data's own train split) projected through the same model.
    """
    test_codes = gm.infer_mapping(params, eval_test.x, eval_test.y)
    train_codes = gm.infer_mapping(params, knn_train.x, knn_train.y)
    preds = knn_classify(train_codes, knn_train.angle_label, test_codes,
                         K=min(knn_k, train_codes.shape[0]))
    return MetricsReport(
        gae_data=gae_data,
        eval_data=eval_data,
        n_pairs=len(eval_test),
        msre=msre(params, eval_test),
        mscre=mscre(params, eval_test, k=mscre_k, seed=seed),
        dbi=davies_bouldin(test_codes, eval_test.angle_label),
        rotation_error_deg=rotation_error(preds, eval_test.angle_label),
    )


def make_analogy(params: GaeParams, a: np.ndarray, b: np.ndarray,
                 c: np.ndarray) -> np.ndarray:
    """Infer the mapping of the pair (a, b) and apply it to query c."""
    m = gm.infer_mapping(params, a, b)
    return gm.reconstruct_y(params, m, c)


def render_grid(images, path) -> None:
    """Write a row-major grid of grayscale cells as one PNG.

    Cells are denormalized per cell to [0, 255]; 2-pixel separators sit
    between cells (value 255).
    """
    rows = list(images)
    if not rows or not len(rows[0]):
        raise ConfigError("grid must contain at least one cell")
    ncols = len(rows[0])
    if any(len(r) != ncols for r in rows):
        raise ConfigError("ragged grid: all rows must have the same length")
    cells = [[np.asarray(c) for c in r] for r in rows]
    ch, cw = cells[0][0].shape
    for r in cells:
        for cell in r:
            if cell.shape != (ch, cw):
                raise ConfigError(
                    f"cell shape {cell.shape} differs from {(ch, cw)}"
                )
    sep = 2
    nrows = len(cells)
    canvas = np.full((nrows * ch + (nrows - 1) * sep,
                      ncols * cw + (ncols - 1) * sep), 255, dtype=np.uint8)
    for i, row in enumerate(cells):
        for j, cell in enumerate(row):
            lo, hi = float(cell.min()), float(cell.max())
            scaled = (np.zeros_like(cell, dtype=np.float64) if hi == lo
                      else (cell - lo) / (hi - lo) * 255.0)
            r0 = i * (ch + sep)
            c0 = j * (cw + sep)
            canvas[r0:r0 + ch, c0:c0 + cw] = np.round(scaled).astype(np.uint8)
    Image.fromarray(canvas, mode="L").save(path, format="PNG")
