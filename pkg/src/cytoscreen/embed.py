"""Style vectors and 2D embedding for dataset-variability analysis.

A style vector is the global average pool of a convolutional feature map.
Batches of style vectors are embedded with exact O(n^2) t-SNE and exported
as CSV plus an SVG scatter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import RasterImage, to_gray

_EPS = 1e-12


@dataclass(frozen=True)
class StyleVector:
    values: np.ndarray
    source_id: str
    group: str

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("style vector must be a non-empty 1D array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("style vector contains non-finite values")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_switch_iter: int = 250
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.perplexity < 2:
            raise ValueError("perplexity must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def style_vector(feature_map: np.ndarray, source_id: str = "",
                 group: str = "") -> StyleVector:
    """Per-channel spatial mean of an H x W x D activation map."""
    arr = np.asarray(feature_map, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("feature map must be a non-empty H x W x D array")
    return StyleVector(values=arr.mean(axis=(0, 1)), source_id=source_id,
                       group=group)


def fallback_feature_map(image: RasterImage, out_channels: int = 64,
                         seed: int = 0) -> np.ndarray:
    """Random projection of 8x8 gray patches, for when no network is loaded.

    The projection matrix is fixed by the seed so style vectors stay
    comparable across images and runs.
    """
    gray = to_gray(image).astype(np.float64) / 255.0
    h, w = gray.shape
    gh, gw = h // 8, w // 8
    if gh == 0 or gw == 0:
        raise ValueError("image smaller than one 8x8 patch")
    patches = gray[: gh * 8, : gw * 8].reshape(gh, 8, gw, 8)
    patches = patches.transpose(0, 2, 1, 3).reshape(gh, gw, 64)
    proj = np.random.default_rng(seed).standard_normal((64, out_channels))
    proj /= math.sqrt(64)
    return patches @ proj


# ---- t-SNE internals, exposed for verification


def conditional_probabilities(sq_distances: np.ndarray, perplexity: float,
                              tol: float = 1e-6, max_iter: int = 60):
    """Row-stochastic P(j|i) whose entropy matches log(perplexity).

    Bandwidths come from a per-row binary search over the Gaussian
    precision. Returns (P, precisions).
    """
    n = sq_distances.shape[0]
    target = math.log(perplexity)
    p = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(sq_distances[i], i)
        beta, lo, hi = 1.0, 0.0, math.inf
        row = np.full(d.size, 1.0 / max(d.size, 1))
        for _ in range(max_iter):
            row = np.exp(-(d - d.min()) * beta)
            total = row.sum()
            row = row / total
            entropy = -(row * np.log(np.maximum(row, _EPS))).sum()
            if abs(entropy - target) <= tol:
                break
            if entropy > target:
                lo = beta
                beta = beta * 2 if hi == math.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (lo + beta) / 2
        betas[i] = beta
        p[i, np.arange(n) != i] = row
    return p, betas


def joint_probabilities(vectors: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized joint P over sample pairs, summing to 1."""
    diff = vectors[:, None, :] - vectors[None, :, :]
    sq = (diff * diff).sum(axis=2)
    cond, _ = conditional_probabilities(sq, perplexity)
    n = vectors.shape[0]
    joint = (cond + cond.T) / (2.0 * n)
    joint = np.maximum(joint, _EPS)
    np.fill_diagonal(joint, 0.0)
    return joint / joint.sum()


def _student_t_kernel(points: np.ndarray):
    diff = points[:, None, :] - points[None, :, :]
    num = 1.0 / (1.0 + (diff * diff).sum(axis=2))
    np.fill_diagonal(num, 0.0)
    return num, diff


def kl_divergence(p: np.ndarray, points: np.ndarray) -> float:
    num, _ = _student_t_kernel(points)
    q = np.maximum(num / num.sum(), _EPS)
    mask = ~np.eye(p.shape[0], dtype=bool)
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def kl_gradient(p: np.ndarray, points: np.ndarray) -> np.ndarray:
    num, diff = _student_t_kernel(points)
    q = np.maximum(num / num.sum(), _EPS)
    weights = (p - q) * num
    return 4.0 * (weights[:, :, None] * diff).sum(axis=1)


def tsne(vectors, cfg: TsneConfig = TsneConfig(), callback=None) -> np.ndarray:
    """Embed style vectors in 2D; deterministic for a fixed seed."""
    if isinstance(vectors, (list, tuple)):
        dims = {v.values.size for v in vectors}
        if len(dims) > 1:
            raise ValueError("style vectors differ in dimension")
        data = np.stack([v.values for v in vectors])
    else:
        data = np.asarray(vectors, dtype=np.float64)
    n = data.shape[0]
    if n < 5:
        raise ValueError(f"need at least 5 samples, got {n}")

    perplexity = min(cfg.perplexity, (n - 1) / 3.0)
    p = joint_probabilities(data, perplexity)

    rng = np.random.default_rng(cfg.seed)
    points = rng.standard_normal((n, 2)) * 1e-4
    velocity = np.zeros_like(points)
    for it in range(cfg.iterations):
        live_p = p * cfg.early_exaggeration if it < cfg.exaggeration_iters else p
        grad = kl_gradient(live_p, points)
        momentum = (cfg.initial_momentum if it < cfg.momentum_switch_iter
                    else cfg.final_momentum)
        velocity = momentum * velocity - cfg.learning_rate * grad
        points = points + velocity
        points = points - points.mean(axis=0)
        if callback is not None:
            callback(it, points.copy())
    return points


# ---- export


_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def export_embedding(points, ids, groups, csv_path, svg_path=None) -> None:
    """Write `id,x,y,group` CSV and an SVG scatter colored by group."""
    points = np.asarray(points, dtype=np.float64)
    ids = list(ids)
    groups = list(groups)
    if not (len(points) == len(ids) == len(groups)):
        raise ValueError("points, ids, and groups must align")
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["id,x,y,group"]
    for sid, (x, y), grp in zip(ids, points, groups):
        lines.append(f"{sid},{x:.6f},{y:.6f},{grp}")
    csv_path.write_text("\n".join(lines) + "\n")

    if svg_path is None:
        svg_path = csv_path.with_suffix(".svg")
    color_of = {g: _PALETTE[i % len(_PALETTE)]
                for i, g in enumerate(sorted(set(groups)))}
    span = max(float(np.ptp(points[:, 0])), float(np.ptp(points[:, 1])), 1e-9)
    pad = 0.05 * span
    x0, y0 = points.min(axis=0) - pad
    x1, y1 = points.max(axis=0) + pad
    radius = max(span / 150.0, 1e-4)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{x0:.6f} {y0:.6f} {x1 - x0:.6f} {y1 - y0:.6f}">'
    ]
    for (x, y), grp in zip(points, groups):
        parts.append(
            f'<circle cx="{x:.6f}" cy="{y:.6f}" r="{radius:.6f}" '
            f'fill="{color_of[grp]}"/>'
        )
    parts.append("</svg>")
    Path(svg_path).write_text("\n".join(parts) + "\n")
