import numpy as np
import pytest

from cytoscreen.embed import (
    StyleVector,
    TsneConfig,
    conditional_probabilities,
    export_embedding,
    fallback_feature_map,
    joint_probabilities,
    kl_divergence,
    kl_gradient,
    style_vector,
    tsne,
)
from cytoscreen.raster import RasterImage


# ---- style vectors


def test_constant_map_pools_to_constant():
    fm = np.full((6, 9, 4), 2.5)
    sv = style_vector(fm, "img", "set")
    assert np.allclose(sv.values, 2.5)
    assert sv.source_id == "img"
    assert sv.group == "set"


def test_single_channel_example():
    fm = np.array([[[1.0], [3.0]], [[5.0], [7.0]]])
    assert style_vector(fm).values.tolist() == [4.0]


def test_pooling_matches_double_loop():
    rng = np.random.default_rng(0)
    fm = rng.standard_normal((7, 5, 6))
    sv = style_vector(fm)
    for c in range(6):
        total = 0.0
        for y in range(7):
            for x in range(5):
                total += fm[y, x, c]
        assert abs(sv.values[c] - total / 35) <= 1e-12


def test_empty_map_rejected():
    with pytest.raises(ValueError, match="non-empty"):
        style_vector(np.zeros((0, 4, 3)))


def test_style_vector_rejects_nan():
    with pytest.raises(ValueError, match="finite"):
        StyleVector(np.array([1.0, np.nan]), "x", "g")


def test_fallback_features_deterministic():
    rng = np.random.default_rng(1)
    img = RasterImage(rng.integers(0, 256, (40, 56, 3), dtype=np.uint8))
    a = fallback_feature_map(img, seed=4)
    b = fallback_feature_map(img, seed=4)
    assert np.array_equal(a, b)
    assert a.shape == (5, 7, 64)


# ---- probability construction


def test_perplexity_calibration():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((30, 6))
    sq = ((x[:, None] - x[None]) ** 2).sum(axis=2)
    p, _ = conditional_probabilities(sq, 8.0)
    for i in range(30):
        row = p[i][p[i] > 0]
        entropy = -(row * np.log(row)).sum()
        assert abs(entropy - np.log(8.0)) <= 1e-4
    assert np.allclose(p.sum(axis=1), 1.0)


def test_joint_probabilities_are_a_distribution():
    rng = np.random.default_rng(3)
    p = joint_probabilities(rng.standard_normal((25, 4)), 6.0)
    assert p.min() >= 0
    assert abs(p.sum() - 1.0) <= 1e-8
    assert np.allclose(p, p.T)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = joint_probabilities(rng.standard_normal((10, 4)), 2.5)
    y = rng.standard_normal((10, 2))
    analytic = kl_gradient(p, y)
    numeric = np.zeros_like(y)
    h = 1e-6
    for i in range(10):
        for j in range(2):
            up = y.copy()
            up[i, j] += h
            down = y.copy()
            down[i, j] -= h
            numeric[i, j] = (kl_divergence(p, up) - kl_divergence(p, down)) / (2 * h)
    denom = max(1.0, np.abs(numeric).max())
    assert np.abs(analytic - numeric).max() / denom <= 1e-4


# ---- embedding behavior


def two_cluster_data(seed=5, n=50, d=64, gap=6.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((n, d)) + gap
    return np.vstack([a, b])


def test_two_clusters_separate():
    data = two_cluster_data()
    emb = tsne(data, TsneConfig(seed=1, iterations=600))
    n = 50
    ca = emb[:n].mean(axis=0)
    cb = emb[n:].mean(axis=0)
    to_b = np.linalg.norm(emb - ca, axis=1) > np.linalg.norm(emb - cb, axis=1)
    correct = (~to_b[:n]).sum() + to_b[n:].sum()
    assert correct / (2 * n) >= 0.98


def test_embedding_centered_and_deterministic():
    data = two_cluster_data(seed=6, n=15, d=8)
    a = tsne(data, TsneConfig(seed=9, iterations=200))
    b = tsne(data, TsneConfig(seed=9, iterations=200))
    assert np.array_equal(a, b)
    assert np.abs(a.mean(axis=0)).max() <= 1e-6


def test_kl_drops_after_exaggeration_phase():
    data = two_cluster_data(seed=7, n=30, d=16)
    snapshots = {}

    def grab(it, pts):
        if it in (249, 599):
            snapshots[it] = pts

    tsne(data, TsneConfig(seed=2, iterations=600), callback=grab)
    p = joint_probabilities(data, min(30.0, (60 - 1) / 3.0))
    assert kl_divergence(p, snapshots[599]) < kl_divergence(p, snapshots[249])


def test_identical_points_stay_finite():
    emb = tsne(np.ones((8, 5)), TsneConfig(seed=0, iterations=150))
    assert np.all(np.isfinite(emb))


def test_too_few_samples_rejected():
    with pytest.raises(ValueError, match="at least 5"):
        tsne(np.zeros((4, 3)), TsneConfig())


def test_mixed_dimensions_rejected():
    vecs = [StyleVector(np.zeros(4), "a", "g"), StyleVector(np.zeros(5), "b", "g")]
    with pytest.raises(ValueError, match="dimension"):
        tsne(vecs, TsneConfig())


def test_style_vector_list_input():
    rng = np.random.default_rng(8)
    vecs = [StyleVector(rng.standard_normal(6), f"s{i}", "g") for i in range(8)]
    emb = tsne(vecs, TsneConfig(seed=0, iterations=50))
    assert emb.shape == (8, 2)


def test_tsne_config_validation():
    with pytest.raises(ValueError, match="perplexity"):
        TsneConfig(perplexity=1.0)
    with pytest.raises(ValueError, match="iterations"):
        TsneConfig(iterations=0)


# ---- export


def test_export_csv_rows_and_svg_colors(tmp_path):
    points = np.array([[0.0, 1.0], [2.0, -1.0], [3.0, 4.0]])
    csv = tmp_path / "emb.csv"
    svg = tmp_path / "emb.svg"
    export_embedding(points, ["p1", "p2", "p3"], ["g1", "g2", "g1"], csv, svg)
    lines = csv.read_text().splitlines()
    assert lines[0] == "id,x,y,group"
    assert len(lines) == 4
    assert lines[1].startswith("p1,") and lines[1].endswith(",g1")
    body = svg.read_text()
    assert body.count("<circle") == 3
    fills = {part.split('"')[0] for part in body.split('fill="')[1:]}
    assert len(fills) == 2


def test_export_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(9)
    points = rng.standard_normal((20, 2))
    ids = [f"i{k}" for k in range(20)]
    groups = ["a" if k % 2 else "b" for k in range(20)]
    p1 = tmp_path / "one.csv"
    p2 = tmp_path / "two.csv"
    export_embedding(points, ids, groups, p1)
    export_embedding(points, ids, groups, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "one.svg").exists()


def test_svg_viewbox_contains_all_points(tmp_path):
    rng = np.random.default_rng(10)
    points = rng.standard_normal((150, 2)) * 40
    ids = [str(k) for k in range(150)]
    groups = [str(k % 3) for k in range(150)]
    svg = tmp_path / "emb.svg"
    export_embedding(points, ids, groups, tmp_path / "emb.csv", svg)
    header = svg.read_text().split('viewBox="')[1].split('"')[0]
    x0, y0, w, h = (float(v) for v in header.split())
    assert x0 <= points[:, 0].min() and x0 + w >= points[:, 0].max()
    assert y0 <= points[:, 1].min() and y0 + h >= points[:, 1].max()


def test_export_alignment_error(tmp_path):
    with pytest.raises(ValueError, match="align"):
        export_embedding(np.zeros((3, 2)), ["a"], ["g"], tmp_path / "x.csv")
