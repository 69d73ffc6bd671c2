import numpy as np
import pytest

from cytoscreen import imgio
from cytoscreen.raster import RasterImage
from cytoscreen.stitcher import (
    CanvasSizeError,
    FrameSampleConfig,
    NoPanoramaError,
    PairwiseMatch,
    PoseGraph,
    _project,
    build_pose_graph,
    check_overlap,
    composite,
    detect_features,
    match_pair,
    sample_frames,
    stitch_frames,
)
from cytoscreen.synth import cut_tiles, textured_field


def translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def make_match(a, b, transform, confidence=1.0):
    return PairwiseMatch(
        frame_a=a,
        frame_b=b,
        inliers=np.zeros((8, 2), dtype=np.int64),
        transform=transform,
        confidence=confidence,
    )


def single_frame_graph(pose=None):
    return PoseGraph(
        nodes=[0],
        edges=[],
        global_poses={0: np.eye(3) if pose is None else pose},
        rejected=[],
        tree_edges=[],
    )


# -------------------------------------------------------------- sampling


def test_sample_frames_stride(tmp_path):
    for i in range(300):
        arr = np.full((4, 4), i % 256, dtype=np.uint8)
        arr[0, 1] = i // 256
        imgio.write_image(RasterImage(arr), tmp_path / f"frame_{i:05d}.png")
    frames = sample_frames(tmp_path, FrameSampleConfig(stride=50))
    indices = [int(f.data[0, 1]) * 256 + int(f.data[0, 0]) for f in frames]
    assert indices == [0, 50, 100, 150, 200, 250]


def test_sample_frames_identity_and_overflow(tmp_path):
    for i in range(10):
        imgio.write_image(
            RasterImage(np.full((4, 4), i, dtype=np.uint8)), tmp_path / f"f{i}.png"
        )
    assert len(sample_frames(tmp_path, FrameSampleConfig(stride=1))) == 10
    only = sample_frames(tmp_path, FrameSampleConfig(stride=50))
    assert len(only) == 1
    assert only[0].data[0, 0] == 0


def test_sample_frames_empty_dir(tmp_path):
    with pytest.raises(ValueError):
        sample_frames(tmp_path)


def test_sample_config_validation():
    with pytest.raises(ValueError):
        FrameSampleConfig(stride=0)
    with pytest.raises(ValueError):
        FrameSampleConfig(min_overlap_fraction=1.5)


# -------------------------------------------------------------- features


def test_constant_image_no_keypoints():
    img = RasterImage(np.full((128, 128), 128, dtype=np.uint8))
    feats = detect_features(img)
    assert len(feats) == 0
    assert feats.descriptors.shape == (0, 128)


def test_self_descriptor_distance_zero():
    img = textured_field(192, 192, rng=3)
    feats = detect_features(img)
    assert len(feats) > 50
    d = feats.descriptors
    sq = np.sum(d**2, axis=1)[:, None] + np.sum(d**2, axis=1)[None, :] - 2 * d @ d.T
    assert np.abs(sq.min(axis=1)).max() < 1e-3  # each keypoint finds itself


def test_rotation_equivariance():
    img = textured_field(256, 256, rng=4)
    rotated = RasterImage(np.ascontiguousarray(np.rot90(img.data)))
    fa = detect_features(img)
    fb = detect_features(rotated)
    da, db = fa.descriptors, fb.descriptors
    sq = np.sum(da**2, axis=1)[:, None] + np.sum(db**2, axis=1)[None, :] - 2 * da @ db.T
    fwd = np.argmin(sq, axis=1)
    bwd = np.argmin(sq, axis=0)
    mutual = [(i, j) for i, j in enumerate(fwd) if bwd[j] == i]
    assert len(mutual) > 40
    width = img.width
    agree = 0
    for i, j in mutual:
        x, y = fa.keypoints[i, :2]
        expected = np.array([y, width - 1 - x])  # 90 deg ccw mapping
        if np.hypot(*(fb.keypoints[j, :2] - expected)) < 2.0:
            agree += 1
    assert agree / len(mutual) >= 0.8


# -------------------------------------------------------------- matching


def test_self_match_identity():
    feats = detect_features(textured_field(256, 256, rng=5))
    m = match_pair(feats, feats, 0, 0)
    assert m is not None
    assert np.abs(m.transform - np.eye(3)).max() < 1e-6


def test_known_shift_recovery():
    src = textured_field(512, 592, rng=6)
    a = RasterImage(np.ascontiguousarray(src.data[:, 0:512]))
    b = RasterImage(np.ascontiguousarray(src.data[:, 40:552]))
    m = match_pair(detect_features(a), detect_features(b), 0, 1)
    assert m is not None
    assert abs(m.transform[0, 2] - 40.0) < 0.5
    assert abs(m.transform[1, 2]) < 0.5


def test_shift_equivariance_large_offsets():
    side = 256
    src = textured_field(512, 512, rng=7)
    for tx, ty in [(26, 13), (100, 40), (150, 60)]:  # up to ~60% of frame
        a = RasterImage(np.ascontiguousarray(src.data[0:side, 0:side]))
        b = RasterImage(np.ascontiguousarray(src.data[ty : ty + side, tx : tx + side]))
        m = match_pair(detect_features(a), detect_features(b), 0, 1)
        assert m is not None, (tx, ty)
        assert abs(m.transform[0, 2] - tx) < 0.5
        assert abs(m.transform[1, 2] - ty) < 0.5


def test_unrelated_noise_no_match():
    rng = np.random.default_rng(8)
    a = RasterImage(rng.integers(0, 256, (256, 256), dtype=np.uint8))
    b = RasterImage(rng.integers(0, 256, (256, 256), dtype=np.uint8))
    assert match_pair(detect_features(a), detect_features(b), 0, 1) is None


def test_match_deterministic():
    src = textured_field(400, 400, rng=9)
    a = detect_features(RasterImage(np.ascontiguousarray(src.data[:256, :256])))
    b = detect_features(RasterImage(np.ascontiguousarray(src.data[100:356, 80:336])))
    m1 = match_pair(a, b, 0, 1)
    m2 = match_pair(a, b, 0, 1)
    assert np.array_equal(m1.transform, m2.transform)
    assert np.array_equal(m1.inliers, m2.inliers)


# -------------------------------------------------------------- pose graph


def test_pose_graph_chain_composition():
    matches = [
        make_match(0, 1, translation(40, 0)),
        make_match(1, 2, translation(40, 0)),
    ]
    graph = build_pose_graph(matches, 3)
    assert graph.nodes == [0, 1, 2]
    assert graph.rejected == []
    np.testing.assert_allclose(graph.global_poses[0], np.eye(3))
    np.testing.assert_allclose(graph.global_poses[1][:2, 2], [40, 0])
    np.testing.assert_allclose(graph.global_poses[2][:2, 2], [80, 0])


def test_pose_graph_rejects_isolated_frame():
    matches = [
        make_match(0, 1, translation(40, 0)),
        make_match(1, 2, translation(40, 0)),
    ]
    graph = build_pose_graph(matches, 4)
    assert graph.rejected == [3]
    assert 3 not in graph.global_poses


def test_pose_graph_keeps_largest_component():
    matches = [
        make_match(0, 1, translation(10, 0)),
        make_match(2, 3, translation(10, 0)),
        make_match(3, 4, translation(10, 0)),
    ]
    graph = build_pose_graph(matches, 5)
    assert graph.nodes == [2, 3, 4]
    assert graph.rejected == [0, 1]


def test_pose_graph_no_matches_error():
    with pytest.raises(NoPanoramaError, match="no panorama"):
        build_pose_graph([], 1)
    with pytest.raises(NoPanoramaError):
        build_pose_graph([None, None], 5)


def test_pose_graph_prefers_confident_tree_edges():
    bad = make_match(0, 1, translation(999, 999), confidence=0.3)
    good_a = make_match(0, 2, translation(10, 0), confidence=0.9)
    good_b = make_match(2, 1, translation(10, 0), confidence=0.8)
    graph = build_pose_graph([bad, good_a, good_b], 3)
    assert set(graph.tree_edges) == {(0, 2), (2, 1)}
    np.testing.assert_allclose(graph.global_poses[1][:2, 2], [20, 0])


# -------------------------------------------------------------- composite


def test_composite_identity_single_frame():
    img = textured_field(64, 96, rng=10)
    out = composite([img], single_frame_graph())
    assert np.array_equal(out.data, img.data)


def test_composite_colocated_duplicates():
    img = textured_field(64, 64, rng=11)
    graph = PoseGraph(
        nodes=[0, 1],
        edges=[make_match(0, 1, np.eye(3))],
        global_poses={0: np.eye(3), 1: np.eye(3)},
        rejected=[],
        tree_edges=[(0, 1)],
    )
    out = composite([img, img], graph)
    assert np.array_equal(out.data, img.data)


def test_composite_canvas_size_limit():
    img = RasterImage(np.zeros((16, 16), dtype=np.uint8))
    graph = PoseGraph(
        nodes=[0, 1],
        edges=[],
        global_poses={0: np.eye(3), 1: translation(50000, 0)},
        rejected=[],
        tree_edges=[],
    )
    with pytest.raises(CanvasSizeError):
        composite([img, img], graph)


def test_two_by_two_reassembly():
    src = textured_field(480, 480, rng=1)
    tiles, offsets = cut_tiles(src, 256, 32 / 256)
    assert offsets == [(0, 0), (0, 224), (224, 0), (224, 224)]
    pano, graph, _ = stitch_frames(tiles)
    assert graph.rejected == []
    # locate the canvas origin the same way composite does
    corners = np.concatenate(
        [
            _project(
                graph.global_poses[n],
                np.array([[0, 0], [256, 0], [0, 256], [256, 256]], dtype=float),
            )
            for n in graph.nodes
        ]
    )
    x0, y0 = np.floor(corners.min(axis=0)).astype(int)
    region = pano.data[-y0 : -y0 + 480, -x0 : -x0 + 480].astype(np.float64)
    mae = np.abs(src.data.astype(np.float64) - region).mean()
    assert mae < 2.0


def test_cycle_consistency_on_grid():
    src = textured_field(480, 480, rng=1)
    tiles, _ = cut_tiles(src, 256, 32 / 256)
    _, graph, _ = stitch_frames(tiles)
    edge_map = {(m.frame_a, m.frame_b): m.transform for m in graph.edges}
    required = [(0, 1), (1, 3), (2, 3), (0, 2)]
    assert all(e in edge_map for e in required)
    loop = (
        edge_map[(0, 1)]
        @ edge_map[(1, 3)]
        @ np.linalg.inv(edge_map[(2, 3)])
        @ np.linalg.inv(edge_map[(0, 2)])
    )
    pts = np.array([[0, 0], [256, 0], [0, 256], [256, 256]], dtype=float)
    assert np.abs(_project(loop, pts) - pts).max() < 2.0


def test_composite_deterministic():
    src = textured_field(480, 480, rng=12)
    tiles, _ = cut_tiles(src, 256, 32 / 256)
    p1, _, _ = stitch_frames(tiles)
    p2, _, _ = stitch_frames(tiles)
    assert np.array_equal(p1.data, p2.data)


def test_noise_frame_rejected():
    rng = np.random.default_rng(13)
    src = textured_field(480, 480, rng=14)
    tiles, _ = cut_tiles(src, 256, 32 / 256)
    noise = RasterImage(rng.integers(0, 256, (256, 256), dtype=np.uint8))
    _, graph, _ = stitch_frames(tiles + [noise])
    assert graph.rejected == [4]
    assert 4 not in graph.global_poses


# -------------------------------------------------------------- overlap


def overlap_graph(shift_px):
    return PoseGraph(
        nodes=[0, 1],
        edges=[],
        global_poses={0: np.eye(3), 1: translation(shift_px, 0)},
        rejected=[],
        tree_edges=[(0, 1)],
    )


def test_overlap_above_floor_silent():
    frames = [RasterImage(np.zeros((512, 512), dtype=np.uint8))] * 2
    assert check_overlap(frames, overlap_graph(128)) == []  # 0.75 overlap


def test_overlap_below_floor_warns():
    frames = [RasterImage(np.zeros((512, 512), dtype=np.uint8))] * 2
    warnings_out = check_overlap(frames, overlap_graph(448))  # 0.125 overlap
    assert len(warnings_out) == 1
    assert "0.125" in warnings_out[0]


def test_overlap_identical_poses():
    frames = [RasterImage(np.zeros((512, 512), dtype=np.uint8))] * 2
    assert check_overlap(frames, overlap_graph(0)) == []
