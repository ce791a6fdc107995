"""From dense predictions to instance masks.

Per category: gather the predicted location vectors ``t`` and pixel positions
``q`` of the category mask, normalise both by their per-dimension maxima,
build a Gaussian affinity, run normalised spectral clustering with the
predicted instance count as ``k``, and drop tiny clusters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .eigen import leading_eigenvectors

SINGLETON_QUALITY = 2.0


@dataclass
class DecodeParams:
    sigma: float = 0.5
    tau: float = 0.5
    restarts: int = 20
    min_frac: float = 0.001
    max_pixels_per_category: int = 4000
    seed: int = 0
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6


class Clustering(NamedTuple):
    labels: np.ndarray  # n ints in 0..k-1, -1 marks dropped pixels
    k: int
    quality: float


class Instance(NamedTuple):
    category: int
    mask: np.ndarray
    score: float


def normalize_features(t: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divide each column by its maximum absolute value (zero columns untouched)."""

    def _norm(x):
        x = np.asarray(x, dtype=np.float64)
        m = np.abs(x).max(axis=0) if len(x) else np.zeros(x.shape[1])
        return x / np.where(m > 0, m, 1.0)

    return _norm(t), _norm(q)


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def build_similarity(t_norm: np.ndarray, q_norm: np.ndarray, sigma: float = 0.5) -> np.ndarray:
    """Sum of two Gaussian kernels, on location vectors and on positions.

    Squared distances are divided by the feature dimension before the kernel,
    so identical pixels score exactly 2.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    t_norm = np.asarray(t_norm, dtype=np.float64)
    q_norm = np.asarray(q_norm, dtype=np.float64)
    denom = 2.0 * sigma * sigma
    w = np.exp(-(_sq_dists(t_norm) / t_norm.shape[1]) / denom)
    w += np.exp(-(_sq_dists(q_norm) / q_norm.shape[1]) / denom)
    # exact symmetry regardless of floating-point ordering
    return 0.5 * (w + w.T)


def cluster_quality(w: np.ndarray, labels: np.ndarray, k: Optional[int] = None) -> float:
    """Mean over non-empty clusters of the mean affinity inside the cluster.

    Diagonal entries are included, so a singleton cluster scores 2.
    """
    ks = np.unique(labels[labels >= 0]) if k is None else [c for c in range(k) if np.any(labels == c)]
    vals = []
    for c in ks:
        idx = np.flatnonzero(labels == c)
        if len(idx) == 1:
            vals.append(SINGLETON_QUALITY)
        else:
            vals.append(float(w[np.ix_(idx, idx)].mean()))
    return float(np.mean(vals)) if vals else 0.0


def kmeans(
    x: np.ndarray,
    init_centers: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> np.ndarray:
    """Lloyd iterations from the given centers; returns labels.

    Ties go to the lowest center index; an empty cluster is reseeded with the
    point farthest from its current center.
    """
    centers = np.array(init_centers, dtype=np.float64)
    k = len(centers)
    labels = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        labels = d.argmin(axis=1)
        new = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                far = int(d[np.arange(len(x)), labels].argmax())
                new[c] = x[far]
                labels[far] = c
                d[far] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def spectral_embedding(w: np.ndarray, k: int) -> np.ndarray:
    """Rows of the ``k`` leading eigenvectors of ``D^-1/2 W D^-1/2``, unit length."""
    deg = w.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("similarity matrix has a zero-degree row")
    inv = 1.0 / np.sqrt(deg)
    m = w * inv[:, None] * inv[None, :]
    m = 0.5 * (m + m.T)
    _vals, vecs = leading_eigenvectors(m, k)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs / np.where(norms > 0, norms, 1.0)


def spectral_clustering(
    w: np.ndarray,
    k: int,
    restarts: int = 20,
    rng_seed: int = 0,
    return_candidates: bool = False,
    max_iter: int = 100,
    tol: float = 1e-6,
):
    """Normalised spectral clustering with k-means restarts.

    Each restart draws ``k`` distinct embedded points as initial centers; the
    run whose partition has the highest :func:`cluster_quality` on ``w`` wins
    (first one on ties).
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in 1..{n}")
    if k == 1:
        best = Clustering(np.zeros(n, dtype=np.int64), 1, cluster_quality(w, np.zeros(n, dtype=np.int64), 1))
        return (best, [best]) if return_candidates else best
    if k == n:
        labels = np.arange(n)
        best = Clustering(labels, n, SINGLETON_QUALITY)
        return (best, [best]) if return_candidates else best
    emb = spectral_embedding(w, k)
    rng = np.random.default_rng(rng_seed)
    candidates = []
    for _ in range(max(1, restarts)):
        init = emb[rng.choice(n, size=k, replace=False)]
        labels = kmeans(emb, init, max_iter, tol)
        candidates.append(Clustering(labels, k, cluster_quality(w, labels, k)))
    best = candidates[0]
    for c in candidates[1:]:
        if c.quality > best.quality:
            best = c
    return (best, candidates) if return_candidates else best


def filter_small_clusters(clustering: Clustering, mask_pixel_count: int, min_frac: float = 0.001) -> Clustering:
    """Mark members of clusters smaller than ``min_frac * mask_pixel_count`` as -1."""
    if not 0.0 <= min_frac <= 1.0:
        raise ValueError("min_frac must lie in [0, 1]")
    labels = clustering.labels.copy()
    threshold = min_frac * mask_pixel_count
    for c in range(clustering.k):
        members = labels == c
        if 0 < members.sum() < threshold:
            labels[members] = -1
    return Clustering(labels, clustering.k, clustering.quality)


def active_categories(counts: Sequence[float], tau: float = 0.5) -> list[int]:
    """1-based categories whose predicted count exceeds ``tau``."""
    return [c + 1 for c, g in enumerate(np.asarray(counts, dtype=np.float64)) if g > tau]


def refine_segmentation(labels: np.ndarray, counts: Sequence[float], tau: float = 0.5) -> np.ndarray:
    """Make the label map agree with the categories the counts say are present.

    Several active categories: pixels of inactive ones become background.
    Exactly one: every foreground pixel takes that category. None: unchanged.
    """
    labels = np.asarray(labels)
    active = active_categories(counts, tau)
    out = labels.copy()
    if len(active) >= 2:
        out[(labels > 0) & ~np.isin(labels, active)] = 0
    elif len(active) == 1:
        out[labels > 0] = active[0]
    return out


def cluster_count(g: float, n: int) -> int:
    """max(1, round-half-up(g)) clamped to the number of pixels."""
    return int(min(n, max(1, math.floor(g + 0.5))))


def _assign_nearest(feats: np.ndarray, anchors: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(feats), dtype=np.int64)
    a_sq = (anchors**2).sum(axis=1)
    for i in range(0, len(feats), chunk):
        f = feats[i : i + chunk]
        d = (f**2).sum(axis=1)[:, None] + a_sq[None, :] - 2.0 * f @ anchors.T
        out[i : i + chunk] = d.argmin(axis=1)
    return out


def cluster_category(
    t: np.ndarray,
    q: np.ndarray,
    k: int,
    params: DecodeParams,
    mask_pixel_count: Optional[int] = None,
) -> Clustering:
    """Cluster one category's pixels (rows of ``t`` and ``q``)."""
    n = len(t)
    t_n, q_n = normalize_features(t, q)
    k = min(k, n)
    if n > params.max_pixels_per_category:
        sub = np.linspace(0, n - 1, params.max_pixels_per_category).round().astype(np.int64)
        sub = np.unique(sub)
        k = min(k, len(sub))
        w = build_similarity(t_n[sub], q_n[sub], params.sigma)
        part = spectral_clustering(w, k, params.restarts, params.seed, max_iter=params.kmeans_iters, tol=params.kmeans_tol)
        feats = np.hstack([t_n / math.sqrt(t_n.shape[1]), q_n / math.sqrt(q_n.shape[1])])
        nearest = _assign_nearest(feats, feats[sub])
        clustering = Clustering(part.labels[nearest], part.k, part.quality)
    else:
        w = build_similarity(t_n, q_n, params.sigma)
        clustering = spectral_clustering(w, k, params.restarts, params.seed, max_iter=params.kmeans_iters, tol=params.kmeans_tol)
    return filter_small_clusters(clustering, mask_pixel_count or n, params.min_frac)


def decode_instances(
    labels: np.ndarray,
    locations: np.ndarray,
    counts: Sequence[float],
    category_probs: Optional[np.ndarray] = None,
    params: Optional[DecodeParams] = None,
) -> list[Instance]:
    """Instances for one image.

    Args:
        labels: H x W category map (0 = background).
        locations: dims x H x W location vectors at the same resolution.
        counts: length-C predicted instance counts.
        category_probs: optional (C+1) x H x W softmax output used for scores.
        params: decoding knobs.
    """
    params = params or DecodeParams()
    labels = np.asarray(labels).astype(np.int64)
    locations = np.asarray(locations, dtype=np.float64)
    if locations.shape[-2:] != labels.shape:
        raise ValueError(f"location map {locations.shape} does not match labels {labels.shape}")
    counts = np.asarray(counts, dtype=np.float64)
    refined = refine_segmentation(labels, counts, params.tau)
    out: list[Instance] = []
    for c in active_categories(counts, params.tau):
        mask = refined == c
        n = int(mask.sum())
        if n == 0:
            continue
        ys, xs = np.nonzero(mask)
        t = locations[:, ys, xs].T
        q = np.stack([xs, ys], axis=1).astype(np.float64)
        clustering = cluster_category(t, q, cluster_count(counts[c - 1], n), params, n)
        for k in range(clustering.k):
            members = clustering.labels == k
            if not members.any():
                continue
            inst = np.zeros(labels.shape, dtype=bool)
            inst[ys[members], xs[members]] = True
            score = 1.0 if category_probs is None else float(np.asarray(category_probs)[c][inst].mean())
            out.append(Instance(c, inst, score))
    return out
