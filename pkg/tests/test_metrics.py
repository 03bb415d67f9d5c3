"""Overlap and boundary-distance metrics against an all-pairs brute-force
implementation, plus report assembly and the throughput probe."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from csdn.autodiff import Tensor
from csdn.metrics import (MetricsReport, boundary_pixels, dsc, evaluate,
                          fps_benchmark, hd95, iou, percentile_95,
                          predict_label, region_masks, sample_metrics,
                          write_report_csv)
from csdn.model import CSDN, CsdnOutput, NetworkConfig
from csdn.phantom import generate_phantom


# -- brute-force oracle -------------------------------------------------------


def brute_boundary(mask):
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                    pts.append((y, x))
                    break
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def brute_hd95(a, b, spacing):
    pa, pb = brute_boundary(a), brute_boundary(b)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    pooled = np.concatenate([np.sqrt(d2.min(axis=1)),
                             np.sqrt(d2.min(axis=0))])
    d = np.sort(pooled)
    pos = 0.95 * (d.size - 1)
    lo, hi = math.floor(pos), math.ceil(pos)
    return float(d[lo] + (d[hi] - d[lo]) * (pos - lo)) * spacing


def random_mask(rng, h, w):
    while True:
        m = rng.random(size=(h, w)) < 0.3
        if m.any():
            return m


# -- dsc / iou ----------------------------------------------------------------


def test_dsc_iou_hand_counts():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0:2, 0:3] = True          # 6 pixels
    b[1:3, 1:4] = True          # 6 pixels, overlap = {(1,1),(1,2)} = 2
    assert dsc(a, b) == 2.0 * 2 / 12
    assert iou(a, b) == 2 / 10
    assert dsc(a, a) == 1.0 and iou(a, a) == 1.0


def test_dsc_iou_empty_and_mismatch():
    e = np.zeros((3, 3), dtype=bool)
    assert dsc(e, e) == 1.0
    assert iou(e, e) == 1.0
    assert dsc(e, ~e) == 0.0
    with pytest.raises(ValueError, match="shapes differ"):
        dsc(e, np.zeros((3, 4), dtype=bool))


def test_dsc_iou_identity():
    # dsc = 2 iou / (1 + iou) for any mask pair
    for seed in range(20):
        rng = np.random.Generator(np.random.PCG64(seed))
        a = random_mask(rng, 12, 12)
        b = random_mask(rng, 12, 12)
        assert dsc(a, b) == pytest.approx(2 * iou(a, b) / (1 + iou(a, b)),
                                          abs=1e-9)


# -- boundaries and percentile ------------------------------------------------


def test_boundary_pixels_ring():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:4] = True
    got = {tuple(p) for p in boundary_pixels(m)}
    want = {(y, x) for y in range(1, 4) for x in range(1, 4)} - {(2, 2)}
    assert got == want


def test_boundary_pixels_border_counts_as_outside():
    full = np.ones((4, 5), dtype=bool)
    got = {tuple(p) for p in boundary_pixels(full)}
    want = {(y, x) for y in range(4) for x in range(5)
            if y in (0, 3) or x in (0, 4)}
    assert got == want
    single = np.zeros((3, 3), dtype=bool)
    single[1, 1] = True
    assert [tuple(p) for p in boundary_pixels(single)] == [(1, 1)]


def test_percentile_95_hand_cases():
    assert percentile_95(np.arange(101.0)) == 95.0
    assert percentile_95(np.array([0.0, 1.0])) == pytest.approx(0.95)
    assert percentile_95(np.array([7.0])) == 7.0
    with pytest.raises(ValueError, match="empty"):
        percentile_95(np.array([]))


def test_percentile_95_matches_numpy():
    for seed in range(10):
        rng = np.random.Generator(np.random.PCG64(seed))
        v = rng.normal(size=int(rng.integers(1, 50)))
        assert percentile_95(v) == pytest.approx(np.percentile(v, 95),
                                                 abs=1e-12)


# -- hd95 ---------------------------------------------------------------------


def test_hd95_hand_cases():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[0, 0] = True
    b[3, 4] = True              # 3-4-5 triangle
    assert hd95(a, b, 0.02) == pytest.approx(5.0 * 0.02)
    assert hd95(a, a, 0.02) == 0.0

    c = np.zeros((4, 4), dtype=bool)
    d = np.zeros((4, 4), dtype=bool)
    c[0, 0] = c[0, 1] = True
    d[0, 0] = True
    # pooled sorted distances [0, 0, 1]; pos 1.9 -> 0.9
    assert hd95(c, d, 1.0) == pytest.approx(0.9)


def test_hd95_empty_mask_raises():
    a = np.ones((4, 4), dtype=bool)
    with pytest.raises(ValueError, match="empty mask"):
        hd95(a, np.zeros((4, 4), dtype=bool), 0.02)


def test_hd95_matches_brute_force_exactly():
    for seed in range(60):
        rng = np.random.Generator(np.random.PCG64(seed))
        h = int(rng.integers(2, 20))
        w = int(rng.integers(2, 20))
        a = random_mask(rng, h, w)
        b = random_mask(rng, h, w)
        got = hd95(a, b, 0.02)
        want = brute_hd95(a, b, 0.02)
        assert got == want, (seed, h, w)
        assert hd95(b, a, 0.02) == got  # pooling makes it symmetric


# -- label decomposition ------------------------------------------------------


def test_region_masks():
    label = np.array([[0, 1], [2, 1]])
    lum, outer = region_masks(label)
    assert np.array_equal(lum, [[False, False], [True, False]])
    assert np.array_equal(outer, [[False, True], [True, True]])
    with pytest.raises(ValueError, match="2-d"):
        region_masks(np.zeros((2, 2, 2), dtype=np.int64))
    with pytest.raises(ValueError, match="values"):
        region_masks(np.array([[3]]))


def test_sample_metrics_empty_prediction():
    pred = np.zeros((8, 8), dtype=np.uint8)      # predicts background only
    true = np.zeros((8, 8), dtype=np.uint8)
    true[2:6, 2:6] = 1
    true[3:5, 3:5] = 2
    ms = sample_metrics(pred, true, 0.02)
    assert ms["lumen"].hd95_mm is None
    assert ms["eem"].hd95_mm is None
    assert ms["lumen"].dsc == 0.0 and ms["eem"].iou == 0.0


# -- model-facing helpers -----------------------------------------------------


class ConstModel:
    """Forward stub: fixed winning class everywhere."""

    def __init__(self, class_id):
        self.class_id = class_id
        self.training = True
        self.dtype = np.float32
        self.config = SimpleNamespace(in_frames=3)

    def train(self, flag=True):
        self.training = flag
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, x):
        n, _, h, w = x.shape
        z = np.zeros((n, 3, h, w), dtype=np.float32)
        z[:, self.class_id] = 5.0
        return CsdnOutput(main_logits=Tensor(z))


def test_predict_label_argmax_and_flag_restore():
    model = ConstModel(2)
    frames = np.zeros((3, 32, 32), dtype=np.float32)
    out = predict_label(model, frames)
    assert out.dtype == np.uint8
    assert np.all(out == 2)
    assert model.training  # entered training, restored after the eval pass


def test_evaluate_counts_empty_prediction_samples():
    samples = [generate_phantom(s, 64, sample_id=f"p{s}") for s in range(3)]
    rep = evaluate(ConstModel(0), samples)
    assert rep.n_samples == 3
    assert len(rep.rows) == 6
    assert rep.hd95_excluded == 3
    assert math.isnan(rep.lumen_hd95_mm)
    assert rep.lumen_dsc == 0.0
    assert "excluded from hd95" in rep.summary()


def test_evaluate_full_prediction_hits_every_region():
    samples = [generate_phantom(s + 10, 64, sample_id=f"q{s}")
               for s in range(2)]
    rep = evaluate(ConstModel(2), samples)
    assert rep.hd95_excluded == 0
    assert rep.lumen_hd95_mm > 0.0
    assert 0.0 < rep.lumen_dsc < 1.0
    assert rep.summary().splitlines()[0] == "region   dsc     iou     hd95_mm"
    with pytest.raises(ValueError, match="nonempty"):
        evaluate(ConstModel(2), [])


def test_write_report_csv(tmp_path):
    samples = [generate_phantom(20, 64, sample_id="r0")]
    rep = evaluate(ConstModel(0), samples)
    path = str(tmp_path / "m.csv")
    write_report_csv(path, rep)
    lines = open(path).read().splitlines()
    assert lines[0] == "sample_id,region,dsc,iou,hd95_mm"
    assert len(lines) == 3
    sid, region, d, i, h = lines[1].split(",")
    assert sid == "r0" and region in ("lumen", "eem")
    assert h == ""  # empty prediction leaves the distance blank
    float(d), float(i)


# -- throughput ---------------------------------------------------------------


def test_fps_benchmark_guards_and_stats():
    net = CSDN(NetworkConfig.micro(), seed=0)
    with pytest.raises(ValueError, match="timed iterations"):
        fps_benchmark(net, (32, 32), timed_iters=5)
    with pytest.raises(ValueError, match="warmup"):
        fps_benchmark(net, (32, 32), warmup_iters=0)
    res = fps_benchmark(net, (32, 32), warmup_iters=1, timed_iters=10)
    assert res["fps"] > 0.0
    assert res["p95_ms"] >= res["p50_ms"] > 0.0
    assert res["iters"] == 10
    assert res["input_hw"] == (32, 32)
