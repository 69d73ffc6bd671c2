import json

import numpy as np
import pytest

from cytoscreen import imgio
from cytoscreen.flowseg import (
    FlowConfig,
    FlowPredictorHandle,
    InterfaceError,
    compute_gt_flows,
    estimate_diameter,
    export_training_pair,
    flow_qc,
    follow_flows,
    segment,
)
from cytoscreen.raster import FlowField, LabelMap, RasterImage
from cytoscreen.synth import random_blob_map, render_cells


def instance_ious(gt: LabelMap, pred: LabelMap) -> np.ndarray:
    """Best-overlap IoU per GT instance, via a brute-force contingency table."""
    g, p = gt.labels, pred.labels
    n_pred = int(p.max())
    ious = []
    for k in gt.instance_ids:
        gmask = g == k
        overlaps = np.bincount(p[gmask], minlength=n_pred + 1)
        overlaps[0] = 0
        if overlaps.sum() == 0:
            ious.append(0.0)
            continue
        j = int(np.argmax(overlaps))
        inter = overlaps[j]
        union = gmask.sum() + (p == j).sum() - inter
        ious.append(inter / union)
    return np.array(ious)


def aggregate_dice(gt: LabelMap, pred: LabelMap) -> float:
    a = gt.labels > 0
    b = pred.labels > 0
    tp = np.sum(a & b)
    fp = np.sum(~a & b)
    fn = np.sum(a & ~b)
    return 2 * tp / (2 * tp + fp + fn)


def disk_map(height, width, centers_radii):
    labels = np.zeros((height, width), dtype=np.int32)
    yy, xx = np.mgrid[0:height, 0:width]
    for k, (cy, cx, r) in enumerate(centers_radii, start=1):
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = k
    return LabelMap(labels)


# ---------------------------------------------------------------- gt flows


def test_single_pixel_instance():
    lab = np.zeros((5, 5), dtype=np.int32)
    lab[2, 2] = 1
    flows = compute_gt_flows(LabelMap(lab))
    assert flows.dy[2, 2] == 0.0
    assert flows.dx[2, 2] == 0.0
    assert flows.cellprob[2, 2] == 1.0
    assert flows.cellprob.sum() == 1.0


def test_square_flows_point_to_center():
    lab = np.zeros((15, 15), dtype=np.int32)
    lab[2:13, 2:13] = 1  # 11x11 square, center (7, 7)
    flows = compute_gt_flows(LabelMap(lab))
    ys, xs = np.nonzero(lab)
    for y, x in zip(ys, xs):
        if (y, x) == (7, 7):
            assert flows.dy[y, x] == 0.0 and flows.dx[y, x] == 0.0
            continue
        dot = flows.dy[y, x] * (7 - y) + flows.dx[y, x] * (7 - x)
        assert dot > 0.0, f"flow at {(y, x)} points away from center"


def test_unit_norm_inside_masks():
    m = random_blob_map(128, 128, 8, rng=2)
    flows = compute_gt_flows(m)
    norm = np.hypot(flows.dy, flows.dx)
    inside = m.labels > 0
    centers = inside & (norm < 1e-6)
    assert centers.sum() == m.num_instances  # one zero-flow center per instance
    off_center = norm[inside & ~centers]
    assert np.abs(off_center - 1.0).max() < 1e-5
    assert norm[~inside].max() == 0.0
    assert np.array_equal(flows.cellprob, inside.astype(np.float32))


def test_flow_locality():
    base = disk_map(160, 160, [(40, 40, 12)])
    both = disk_map(160, 160, [(40, 40, 12), (120, 120, 12)])  # > 3 diameters away
    fa = compute_gt_flows(base)
    fb = compute_gt_flows(both)
    sel = base.labels == 1
    assert np.array_equal(fa.dy[sel], fb.dy[sel])
    assert np.array_equal(fa.dx[sel], fb.dx[sel])


def test_noncontiguous_instance_rejected():
    lab = np.zeros((32, 32), dtype=np.int32)
    lab[2:6, 2:6] = 1
    lab[20:24, 20:24] = 1
    with pytest.raises(ValueError, match="1"):
        compute_gt_flows(LabelMap(lab))


# ---------------------------------------------------------------- tracking


def test_follow_flows_empty():
    z = np.zeros((16, 16), dtype=np.float32)
    assert follow_flows(FlowField(z, z, z)).num_instances == 0


def test_follow_flows_single_attractor():
    h = w = 48
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = 23.0 - yy
    dx = 23.0 - xx
    norm = np.hypot(dy, dx)
    norm[norm == 0] = 1.0
    field = FlowField(
        (dy / norm).astype(np.float32),
        (dx / norm).astype(np.float32),
        np.ones((h, w), dtype=np.float32),
    )
    rec = follow_flows(field)
    assert rec.num_instances == 1
    assert np.all(rec.labels == 1)


def test_round_trip_recovery():
    rng = np.random.default_rng(11)
    all_ious = []
    dices = []
    for _ in range(5):
        n = int(rng.integers(10, 31))
        m = random_blob_map(256, 256, n, rng=rng)
        flows = compute_gt_flows(m)
        rec = flow_qc(follow_flows(flows), flows)
        all_ious.extend(instance_ious(m, rec))
        dices.append(aggregate_dice(m, rec))
    all_ious = np.array(all_ious)
    assert (all_ious >= 0.9).mean() >= 0.95
    assert min(dices) >= 0.97


def test_follow_flows_permutation_invariant():
    m = random_blob_map(128, 128, 10, rng=4)
    rng = np.random.default_rng(9)
    perm = rng.permutation(m.num_instances) + 1
    lut = np.zeros(m.num_instances + 1, dtype=np.int32)
    lut[1:] = perm
    shuffled = LabelMap(lut[m.labels])
    fa = compute_gt_flows(m)
    fb = compute_gt_flows(shuffled)
    assert np.array_equal(fa.dy, fb.dy)
    assert np.array_equal(fa.dx, fb.dx)
    assert np.array_equal(follow_flows(fa).labels, follow_flows(fb).labels)


def test_min_mask_pixels_discards_specks():
    h = w = 64
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = 31.0 - yy
    dx = 31.0 - xx
    norm = np.hypot(dy, dx)
    norm[norm == 0] = 1.0
    cellprob = np.zeros((h, w), dtype=np.float32)
    cellprob[28:35, 28:35] = 1.0  # 49 active pixels, one attractor
    field = FlowField(
        (dy / norm).astype(np.float32), (dx / norm).astype(np.float32), cellprob
    )
    assert follow_flows(field, FlowConfig(min_mask_pixels=15)).num_instances == 1
    assert follow_flows(field, FlowConfig(min_mask_pixels=50)).num_instances == 0


# ---------------------------------------------------------------- qc


def test_qc_keeps_self_consistent_masks():
    m = random_blob_map(192, 192, 12, rng=5)
    flows = compute_gt_flows(m)
    rec = follow_flows(flows)
    assert flow_qc(rec, flows).num_instances == rec.num_instances


def test_qc_removes_randomized_instance():
    m = random_blob_map(128, 128, 6, rng=3)
    flows = compute_gt_flows(m)
    rng = np.random.default_rng(0)
    dy, dx = flows.dy.copy(), flows.dx.copy()
    sel = m.labels == 3
    angles = rng.uniform(0, 2 * np.pi, size=int(sel.sum()))
    dy[sel] = np.sin(angles)
    dx[sel] = np.cos(angles)
    kept = flow_qc(m, FlowField(dy, dx, flows.cellprob))
    assert kept.num_instances == m.num_instances - 1
    # the survivors are exactly the untouched instances
    assert np.array_equal(kept.labels > 0, (m.labels > 0) & ~sel)


def test_qc_infinite_threshold_is_identity():
    m = random_blob_map(96, 96, 5, rng=6)
    noise = FlowField(
        np.random.default_rng(1).standard_normal((96, 96)).astype(np.float32),
        np.random.default_rng(2).standard_normal((96, 96)).astype(np.float32),
        (m.labels > 0).astype(np.float32),
    )
    out = flow_qc(m, noise, FlowConfig(flow_threshold=np.inf))
    assert np.array_equal(out.labels, m.labels)


def test_qc_monotone_in_threshold():
    m = random_blob_map(160, 160, 10, rng=7)
    flows = compute_gt_flows(m)
    rng = np.random.default_rng(8)
    dy, dx = flows.dy.copy(), flows.dx.copy()
    # corrupt each instance by a different amount
    for k in m.instance_ids:
        sel = m.labels == k
        blend = k / (m.num_instances + 1)
        angles = rng.uniform(0, 2 * np.pi, size=int(sel.sum()))
        dy[sel] = (1 - blend) * dy[sel] + blend * np.sin(angles)
        dx[sel] = (1 - blend) * dx[sel] + blend * np.cos(angles)
    noisy = FlowField(dy, dx, flows.cellprob)
    previous = set()
    for threshold in (0.05, 0.2, 0.5, 1.0, 5.0):
        kept = flow_qc(m, noisy, FlowConfig(flow_threshold=threshold))
        survivors = {
            int(m.labels[kept.labels == j][0]) for j in kept.instance_ids
        }
        assert previous <= survivors  # raising the threshold never drops more
        previous = survivors
    assert previous == set(int(k) for k in m.instance_ids)


def test_qc_dimension_mismatch():
    m = random_blob_map(64, 64, 3, rng=1)
    z = np.zeros((32, 32), dtype=np.float32)
    with pytest.raises(ValueError):
        flow_qc(m, FlowField(z, z, z))


# ---------------------------------------------------------------- diameter


def test_diameter_of_disk():
    m = disk_map(64, 64, [(32, 32, 10)])
    assert abs(estimate_diameter(m) - 20.0) <= 1.0


def test_diameter_is_median():
    m = disk_map(768, 768, [(40, 40, 4), (40, 120, 10), (400, 400, 100)])
    areas = np.bincount(m.labels.ravel())[1:]
    expected = np.median(2.0 * np.sqrt(areas / np.pi))
    assert estimate_diameter(m) == pytest.approx(expected)
    assert abs(estimate_diameter(m) - 20.0) <= 1.0


def test_diameter_identical_instances():
    m = disk_map(128, 128, [(30, 30, 8), (30, 90, 8), (90, 30, 8)])
    area = np.sum(m.labels == 1)
    assert estimate_diameter(m) == pytest.approx(2 * np.sqrt(area / np.pi))


def test_diameter_requires_instances():
    with pytest.raises(ValueError):
        estimate_diameter(LabelMap(np.zeros((8, 8), dtype=np.int32)))


# ---------------------------------------------------------------- segment


def test_segment_oracle_round_trip():
    m = random_blob_map(192, 192, 15, rng=10)
    image = render_cells(m, rng=10)
    masks, flows = segment(image, FlowPredictorHandle.oracle(m))
    ious = instance_ious(m, masks)
    assert (ious >= 0.9).mean() >= 0.95
    assert flows.height == 192


def test_segment_file_matches_oracle(tmp_path):
    m = random_blob_map(128, 128, 8, rng=12)
    image = render_cells(m, rng=12)
    flow_path = tmp_path / "pred.cytf"
    imgio.write_flow_field(compute_gt_flows(m), flow_path)
    via_oracle, _ = segment(image, FlowPredictorHandle.oracle(m))
    via_file, _ = segment(image, FlowPredictorHandle.from_file(flow_path))
    assert np.array_equal(via_oracle.labels, via_file.labels)


def test_segment_dimension_mismatch(tmp_path):
    m = random_blob_map(64, 64, 4, rng=13)
    image = render_cells(random_blob_map(96, 96, 4, rng=13), rng=13)
    with pytest.raises(InterfaceError):
        segment(image, FlowPredictorHandle.oracle(m))
    flow_path = tmp_path / "small.cytf"
    imgio.write_flow_field(compute_gt_flows(m), flow_path)
    with pytest.raises(InterfaceError):
        segment(image, FlowPredictorHandle.from_file(flow_path))


def test_segment_blank_flows(tmp_path):
    z = np.zeros((80, 80), dtype=np.float32)
    flow_path = tmp_path / "blank.cytf"
    imgio.write_flow_field(FlowField(z, z, z), flow_path)
    image = RasterImage(np.full((80, 80, 3), 200, dtype=np.uint8))
    masks, _ = segment(image, FlowPredictorHandle.from_file(flow_path))
    assert masks.num_instances == 0


def test_segment_with_diameter_rescale():
    m = disk_map(200, 200, [(50, 50, 15), (50, 150, 15), (150, 50, 15), (150, 150, 15)])
    image = render_cells(m, rng=14)
    masks, _ = segment(image, FlowPredictorHandle.oracle(m), FlowConfig(diameter=30.0))
    assert masks.num_instances == 4
    assert (masks.height, masks.width) == (200, 200)
    ious = instance_ious(m, masks)
    assert ious.min() >= 0.8  # nearest-neighbor resampling costs a little accuracy


# ---------------------------------------------------------------- export


def test_export_training_pair_round_trip(tmp_path):
    m = random_blob_map(96, 96, 6, rng=15)
    image = render_cells(m, rng=15)
    export_training_pair(image, m, tmp_path, name="tile0")
    img_back = imgio.read_image(tmp_path / "tile0_img.png")
    lbl_back = imgio.read_label_map(tmp_path / "tile0_lbl.png")
    flows_back = imgio.read_flow_field(tmp_path / "tile0_flows.cytf")
    assert np.array_equal(img_back.data, image.data)
    assert np.array_equal(lbl_back.labels, m.compact().labels)
    expected = compute_gt_flows(m)
    assert np.array_equal(flows_back.dy, expected.dy)
    assert np.array_equal(flows_back.dx, expected.dx)
    meta = json.loads((tmp_path / "tile0_meta.json").read_text())
    assert meta["epochs"] == 120
    assert meta["learning_rate"] == 0.05
    assert meta["weight_decay"] == 0.00005


def test_export_empty_map_zero_flows(tmp_path):
    image = RasterImage(np.full((32, 32), 128, dtype=np.uint8))
    export_training_pair(image, LabelMap(np.zeros((32, 32), dtype=np.int32)), tmp_path)
    flows = imgio.read_flow_field(tmp_path / "sample_flows.cytf")
    assert flows.dy.any() == False  # noqa: E712
    assert flows.cellprob.max() == 0.0


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(flow_threshold=-1)
    with pytest.raises(ValueError):
        FlowConfig(n_euler_steps=0)
    with pytest.raises(ValueError):
        FlowConfig(min_mask_pixels=0)
    with pytest.raises(ValueError):
        FlowConfig(diameter=0)
