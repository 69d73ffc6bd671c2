"""Panorama assembly from overlapping microscope frames.

Frames are registered pairwise (SIFT keypoints, Lowe-ratio matching, RANSAC
homography with a translation-dominant prior), linked into a pose graph
whose largest connected component survives (isolated frames are treated as
noise and dropped), and composited with feathered linear blending.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from . import imgio
from .raster import RasterImage, to_gray

LOWE_RATIO = 0.75
RANSAC_ITERS = 2000
RANSAC_TOL = 3.0
MIN_INLIERS = 4
CONFIDENCE_THRESHOLD = 0.2
MAX_DISTORTION = 0.05  # non-translation terms beyond this are penalized
MAX_FEATURES = 700
MAX_CANVAS = 32768

FRAME_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class NoPanoramaError(ValueError):
    """No pair of frames could be registered."""


class CanvasSizeError(ValueError):
    """Composited canvas would exceed the size limit."""


@dataclass(frozen=True)
class FrameSampleConfig:
    stride: int = 50
    min_overlap_fraction: float = 0.25

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 < self.min_overlap_fraction < 1:
            raise ValueError("min_overlap_fraction must be in (0, 1)")


@dataclass(frozen=True)
class KeypointDescriptorSet:
    keypoints: np.ndarray  # (N, 4): x, y, scale, orientation
    descriptors: np.ndarray  # (N, 128) float32

    def __len__(self):
        return self.keypoints.shape[0]


@dataclass(frozen=True)
class PairwiseMatch:
    frame_a: int
    frame_b: int
    inliers: np.ndarray  # (M, 2) keypoint index pairs (a_idx, b_idx)
    transform: np.ndarray  # 3x3, maps frame_b coordinates into frame_a
    confidence: float


@dataclass(frozen=True)
class PoseGraph:
    nodes: list
    edges: list  # accepted PairwiseMatch objects within the kept component
    global_poses: dict  # node -> 3x3 pose (frame coords -> panorama coords)
    rejected: list
    tree_edges: list = field(default_factory=list)  # spanning-tree (a, b) pairs


def sample_frames(frame_dir, cfg: FrameSampleConfig = FrameSampleConfig()):
    """Read every cfg.stride-th frame file, in lexicographic order."""
    frame_dir = Path(frame_dir)
    files = sorted(
        p for p in frame_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES
    )
    if not files:
        raise ValueError(f"no frame files in {frame_dir}")
    return [imgio.read_image(p) for p in files[:: cfg.stride]]


def detect_features(img: RasterImage) -> KeypointDescriptorSet:
    """SIFT keypoints and 128-d descriptors; deterministic per input."""
    gray = to_gray(img)
    sift = cv2.SIFT_create(nfeatures=MAX_FEATURES)
    kps, desc = sift.detectAndCompute(gray, None)
    if not kps:
        return KeypointDescriptorSet(
            keypoints=np.zeros((0, 4), dtype=np.float32),
            descriptors=np.zeros((0, 128), dtype=np.float32),
        )
    pts = np.array(
        [(k.pt[0], k.pt[1], k.size, k.angle) for k in kps], dtype=np.float32
    )
    return KeypointDescriptorSet(keypoints=pts, descriptors=np.asarray(desc, dtype=np.float32))


def _ratio_matches(a: KeypointDescriptorSet, b: KeypointDescriptorSet) -> np.ndarray:
    """Lowe-ratio candidate pairs (index_a, index_b), matched a -> b."""
    if len(a) == 0 or len(b) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    da, db = a.descriptors, b.descriptors
    # squared distances via the expansion ||x-y||^2 = ||x||^2 + ||y||^2 - 2xy
    sq = (
        np.sum(da**2, axis=1)[:, None]
        + np.sum(db**2, axis=1)[None, :]
        - 2.0 * (da @ db.T)
    )
    np.maximum(sq, 0.0, out=sq)
    two = np.argpartition(sq, 1, axis=1)[:, :2]
    rows = np.arange(sq.shape[0])
    d_pair = sq[rows[:, None], two]
    order = np.argsort(d_pair, axis=1)
    best = two[rows, order[:, 0]]
    d1 = d_pair[rows, order[:, 0]]
    d2 = d_pair[rows, order[:, 1]]
    keep = d1 < (LOWE_RATIO**2) * d2
    return np.stack([rows[keep], best[keep]], axis=1)


def _normalize_points(pts: np.ndarray):
    mean = pts.mean(axis=0)
    spread = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / max(spread, 1e-12)
    T = np.array(
        [[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]]
    )
    return (pts - mean) * scale, T


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stack the two DLT equations per correspondence: A h = 0."""
    n = src.shape[0]
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    r1 = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    r2 = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    return np.stack([r1, r2], axis=1).reshape(2 * n, 9)


def _fit_homography(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """Least-squares homography src -> dst with Hartley normalization."""
    src_n, Ts = _normalize_points(src)
    dst_n, Td = _normalize_points(dst)
    A = _dlt_rows(src_n, dst_n)
    try:
        _, _, vh = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    Hn = vh[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    hom = H @ np.concatenate([pts.T, np.ones((1, pts.shape[0]))], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (hom[:2] / hom[2]).T


def _distortion(H: np.ndarray, extent: float) -> float:
    a = H / H[2, 2]
    return max(
        abs(a[0, 0] - 1),
        abs(a[1, 1] - 1),
        abs(a[0, 1]),
        abs(a[1, 0]),
        abs(a[2, 0]) * extent,
        abs(a[2, 1]) * extent,
    )


def _ransac_homography(src, dst, extent):
    """Best homography src -> dst; returns (H, inlier_mask) or (None, None).

    Models with more than MAX_DISTORTION of non-translation distortion are
    penalized so pure X-Y stage motion wins whenever it explains the data.
    """
    n = src.shape[0]
    if n < MIN_INLIERS:
        return None, None
    rng = np.random.default_rng(0)
    samples = rng.integers(0, n, size=(RANSAC_ITERS, 4))
    distinct = np.array([len(set(s)) == 4 for s in samples])
    samples = samples[distinct]

    src_n, Ts = _normalize_points(src)
    dst_n, Td = _normalize_points(dst)
    Td_inv = np.linalg.inv(Td)
    s_src = src_n[samples]  # (S, 4, 2)
    s_dst = dst_n[samples]
    S = samples.shape[0]
    A = np.zeros((S, 8, 9))
    x, y = s_src[:, :, 0], s_src[:, :, 1]
    u, v = s_dst[:, :, 0], s_dst[:, :, 1]
    ones = np.ones_like(x)
    A[:, 0::2, 0] = -x
    A[:, 0::2, 1] = -y
    A[:, 0::2, 2] = -ones
    A[:, 0::2, 6] = u * x
    A[:, 0::2, 7] = u * y
    A[:, 0::2, 8] = u
    A[:, 1::2, 3] = -x
    A[:, 1::2, 4] = -y
    A[:, 1::2, 5] = -ones
    A[:, 1::2, 6] = v * x
    A[:, 1::2, 7] = v * y
    A[:, 1::2, 8] = v
    try:
        _, _, vh = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None, None
    Hn = vh[:, -1, :].reshape(S, 3, 3)
    H_all = Td_inv[None] @ Hn @ Ts[None]

    hom = np.einsum("sij,nj->sin", H_all, np.concatenate([src, np.ones((n, 1))], axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = hom[:, :2, :] / hom[:, 2:3, :]
    err = np.sum((proj - dst.T[None]) ** 2, axis=1)  # (S, n)
    inlier_mask = err < RANSAC_TOL**2
    counts = inlier_mask.sum(axis=1).astype(np.float64)

    w = H_all[:, 2, 2]
    ok = np.abs(w) > 1e-12
    norm = np.where(ok, w, 1.0)
    Ha = H_all / norm[:, None, None]
    distorted = (
        (np.abs(Ha[:, 0, 0] - 1) > MAX_DISTORTION)
        | (np.abs(Ha[:, 1, 1] - 1) > MAX_DISTORTION)
        | (np.abs(Ha[:, 0, 1]) > MAX_DISTORTION)
        | (np.abs(Ha[:, 1, 0]) > MAX_DISTORTION)
        | (np.abs(Ha[:, 2, 0]) * extent > MAX_DISTORTION)
        | (np.abs(Ha[:, 2, 1]) * extent > MAX_DISTORTION)
        | ~ok
    )
    scores = counts - distorted * (n + 1.0)
    best = int(np.argmax(scores))
    mask = inlier_mask[best]
    if mask.sum() < MIN_INLIERS:
        return None, None

    # two refinement rounds of least-squares refit over the inlier set
    for _ in range(2):
        H = _fit_homography(src[mask], dst[mask])
        if H is None:
            return None, None
        err = np.sum((_project(H, src) - dst) ** 2, axis=1)
        new_mask = err < RANSAC_TOL**2
        if new_mask.sum() < MIN_INLIERS:
            return None, None
        mask = new_mask

    # the prior again, at full strength: when a pure translation explains at
    # least as many points, it beats the (often thin-strip-wobbly) projective fit
    for _ in range(2):
        t = (dst[mask] - src[mask]).mean(axis=0)
        err_t = np.sum((src + t - dst) ** 2, axis=1)
        mask_t = err_t < RANSAC_TOL**2
        if mask_t.sum() < max(int(mask.sum()), MIN_INLIERS):
            break
        H = np.array([[1.0, 0.0, t[0]], [0.0, 1.0, t[1]], [0.0, 0.0, 1.0]])
        mask = mask_t
    return H, mask


def match_pair(
    a: KeypointDescriptorSet,
    b: KeypointDescriptorSet,
    frame_a: int = 0,
    frame_b: int = 1,
    extent: float = 512.0,
    confidence_threshold: float = CONFIDENCE_THRESHOLD,
) -> Optional[PairwiseMatch]:
    """Register frame b against frame a; None when no confident model exists.

    The returned transform maps frame_b pixel coordinates into frame_a's
    system. Confidence follows inliers / (8 + 0.3 * raw_matches) and must
    reach 0.2 with at least 4 inliers.
    """
    candidates = _ratio_matches(a, b)
    raw = candidates.shape[0]
    if raw < MIN_INLIERS:
        return None
    pts_in_a = a.keypoints[candidates[:, 0], :2].astype(np.float64)
    pts_in_b = b.keypoints[candidates[:, 1], :2].astype(np.float64)
    # fit b -> a so composing poses along edges walks toward the anchor
    H, mask = _ransac_homography(pts_in_b, pts_in_a, extent)
    if H is None:
        return None
    n_inliers = int(mask.sum())
    confidence = n_inliers / (8.0 + 0.3 * raw)
    if confidence < confidence_threshold:
        return None
    return PairwiseMatch(
        frame_a=frame_a,
        frame_b=frame_b,
        inliers=candidates[mask],
        transform=H,
        confidence=confidence,
    )


def build_pose_graph(matches, n_frames: int) -> PoseGraph:
    """Keep the largest connected component; compose poses along the
    maximum-confidence spanning tree from the lowest-index anchor."""
    accepted = [m for m in matches if m is not None]
    if not accepted:
        raise NoPanoramaError("no panorama")
    adjacency = {i: [] for i in range(n_frames)}
    for m in accepted:
        adjacency[m.frame_a].append(m.frame_b)
        adjacency[m.frame_b].append(m.frame_a)

    seen = set()
    components = []
    for start in range(n_frames):
        if start in seen or not adjacency[start]:
            continue
        stack = [start]
        comp = set()
        while stack:
            node = stack.pop()
            if node in comp:
                continue
            comp.add(node)
            stack.extend(v for v in adjacency[node] if v not in comp)
        seen |= comp
        components.append(comp)
    component = max(components, key=lambda c: (len(c), -min(c)))

    in_comp = [m for m in accepted if m.frame_a in component and m.frame_b in component]
    # maximum-confidence spanning tree (Kruskal over descending confidence)
    ordered = sorted(in_comp, key=lambda m: (-m.confidence, m.frame_a, m.frame_b))
    parent = {v: v for v in component}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    tree = []
    for m in ordered:
        ra, rb = find(m.frame_a), find(m.frame_b)
        if ra != rb:
            parent[ra] = rb
            tree.append(m)

    anchor = min(component)
    poses = {anchor: np.eye(3)}
    tree_adj = {v: [] for v in component}
    for m in tree:
        tree_adj[m.frame_a].append(m)
        tree_adj[m.frame_b].append(m)
    stack = [anchor]
    while stack:
        node = stack.pop()
        for m in tree_adj[node]:
            if m.frame_a == node and m.frame_b not in poses:
                poses[m.frame_b] = poses[node] @ m.transform
                stack.append(m.frame_b)
            elif m.frame_b == node and m.frame_a not in poses:
                poses[m.frame_a] = poses[node] @ np.linalg.inv(m.transform)
                stack.append(m.frame_a)

    rejected = sorted(set(range(n_frames)) - component)
    return PoseGraph(
        nodes=sorted(component),
        edges=in_comp,
        global_poses=poses,
        rejected=rejected,
        tree_edges=[(m.frame_a, m.frame_b) for m in tree],
    )


def _feather_weights(height: int, width: int) -> np.ndarray:
    cols = np.minimum(np.arange(width) + 1, width - np.arange(width)).astype(np.float32)
    rows = np.minimum(np.arange(height) + 1, height - np.arange(height)).astype(np.float32)
    return np.minimum(rows[:, None], cols[None, :])


def canvas_bounds(frames, graph: PoseGraph):
    """Canvas rectangle in anchor-frame coordinates: (x0, y0, x1, y1)."""
    corners = []
    for node in graph.nodes:
        img = frames[node]
        h, w = img.height, img.width
        pts = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=np.float64)
        corners.append(_project(graph.global_poses[node], pts))
    corners = np.concatenate(corners, axis=0)
    x0, y0 = np.floor(corners.min(axis=0)).astype(int)
    x1, y1 = np.ceil(corners.max(axis=0)).astype(int)
    return int(x0), int(y0), int(x1), int(y1)


def composite(frames, graph: PoseGraph, max_canvas: int = MAX_CANVAS) -> RasterImage:
    """Blend posed frames onto one canvas, weighting by border distance."""
    x0, y0, x1, y1 = canvas_bounds(frames, graph)
    canvas_w, canvas_h = x1 - x0, y1 - y0
    if canvas_w > max_canvas or canvas_h > max_canvas:
        raise CanvasSizeError(f"canvas {canvas_w}x{canvas_h} exceeds {max_canvas}")
    shift = np.array([[1, 0, -x0], [0, 1, -y0], [0, 0, 1]], dtype=np.float64)

    channels = max(frames[node].channels for node in graph.nodes)
    acc = np.zeros((canvas_h, canvas_w, channels), dtype=np.float64)
    weight = np.zeros((canvas_h, canvas_w), dtype=np.float64)
    for node in graph.nodes:
        img = frames[node]
        data = img.data if img.channels == 3 or channels == 1 else np.stack([img.data] * 3, axis=2)
        M = shift @ graph.global_poses[node]
        warped = cv2.warpPerspective(
            data, M, (canvas_w, canvas_h), flags=cv2.INTER_LINEAR
        )
        if warped.ndim == 2:
            warped = warped[:, :, None]
        w_src = _feather_weights(img.height, img.width)
        w_warp = cv2.warpPerspective(w_src, M, (canvas_w, canvas_h), flags=cv2.INTER_LINEAR)
        acc += warped.astype(np.float64) * w_warp[:, :, None]
        weight += w_warp
    covered = weight > 0
    out = np.zeros_like(acc)
    out[covered] = acc[covered] / weight[covered, None]
    out = np.rint(out).astype(np.uint8)
    if channels == 1:
        out = out[:, :, 0]
    return RasterImage(out)


def check_overlap(frames, graph: PoseGraph, cfg: FrameSampleConfig = FrameSampleConfig()):
    """Warn for spanning-tree edges whose frame overlap is below the floor."""
    warnings_out = []
    boxes = {}
    for node in graph.nodes:
        img = frames[node]
        pts = np.array(
            [[0, 0], [img.width, 0], [0, img.height], [img.width, img.height]],
            dtype=np.float64,
        )
        warped = _project(graph.global_poses[node], pts)
        boxes[node] = (warped.min(axis=0), warped.max(axis=0))
    for a, b in graph.tree_edges:
        (ax0, ay0), (ax1, ay1) = boxes[a][0], boxes[a][1]
        (bx0, by0), (bx1, by1) = boxes[b][0], boxes[b][1]
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        area_a = (ax1 - ax0) * (ay1 - ay0)
        area_b = (bx1 - bx0) * (by1 - by0)
        fraction = (iw * ih) / min(area_a, area_b)
        if fraction < cfg.min_overlap_fraction:
            warnings_out.append(
                f"frames {a}-{b}: overlap {fraction:.3f} below "
                f"{cfg.min_overlap_fraction:.2f}"
            )
    return warnings_out


def stitch_frames(frames, cfg: FrameSampleConfig = FrameSampleConfig(),
                  confidence_threshold: float = CONFIDENCE_THRESHOLD):
    """Full pipeline over loaded frames: features, matches, graph, canvas.

    Returns (panorama, graph, warnings).
    """
    features = [detect_features(f) for f in frames]
    extent = float(max(max(f.height, f.width) for f in frames))
    matches = []
    for i in range(len(frames)):
        for j in range(i + 1, len(frames)):
            m = match_pair(features[i], features[j], i, j, extent=extent,
                           confidence_threshold=confidence_threshold)
            if m is not None:
                matches.append(m)
    graph = build_pose_graph(matches, len(frames))
    warnings_out = check_overlap(frames, graph, cfg)
    return composite(frames, graph), graph, warnings_out


def graph_to_dict(graph: PoseGraph) -> dict:
    """JSON-ready summary of poses, edges, and rejected frames."""
    return {
        "nodes": [int(n) for n in graph.nodes],
        "rejected": [int(n) for n in graph.rejected],
        "poses": {
            str(int(n)): [[float(v) for v in row] for row in graph.global_poses[n]]
            for n in graph.nodes
        },
        "edges": [
            {
                "frame_a": int(m.frame_a),
                "frame_b": int(m.frame_b),
                "confidence": float(m.confidence),
                "inliers": int(m.inliers.shape[0]),
            }
            for m in graph.edges
        ],
        "tree_edges": [[int(a), int(b)] for a, b in graph.tree_edges],
    }
