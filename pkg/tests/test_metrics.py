import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrprune import graph as G
from attrprune import metrics as M
from attrprune.boxes import Detection, iou
from attrprune.errors import ConfigurationError


def brute_force_ap(detections, ground_truth, threshold, class_id):
    """Enumerate every confidence cut-off, re-match from scratch, take the 101-point envelope."""
    ordered = []
    idx = 0
    for img, ds in enumerate(detections):
        for d in ds:
            if d.class_id == class_id:
                ordered.append((-d.confidence, idx, img, d.box))
            idx += 1
    ordered.sort()
    gt = {(img, j): box for img, objs in enumerate(ground_truth)
          for j, (c, box) in enumerate([o for o in objs if o[0] == class_id])}
    if not gt:
        return math.nan
    curve = []
    for k in range(1, len(ordered) + 1):
        taken = set()
        hits = 0
        for _, _, img, box in ordered[:k]:
            cands = [(iou(box, g), -j, (i, j)) for (i, j), g in gt.items()
                     if i == img and (i, j) not in taken and iou(box, g) >= threshold]
            if cands:
                taken.add(max(cands)[2])
                hits += 1
        curve.append((Fraction(hits, len(gt)), Fraction(hits, k)))
    total = Fraction(0)
    for r in range(101):
        ps = [p for rec, p in curve if rec >= Fraction(r, 100)]
        total += max(ps) if ps else 0
    return float(total / 101)


def brute_force_map(detections, ground_truth, classes):
    rows = []
    for t in [0.5 + 0.05 * k for k in range(10)]:
        t = round(t, 2)
        aps = [brute_force_ap(detections, ground_truth, t, c) for c in range(classes)]
        aps = [a for a in aps if not math.isnan(a)]
        rows.append(sum(aps) / len(aps) if aps else 0.0)
    return rows[0], sum(rows) / len(rows)


def random_instance(rng, n_images=2, classes=3):
    dets, gts = [], []
    conf_levels = [0.2, 0.5, 0.7, 0.9]
    for _ in range(n_images):
        gts.append([(int(rng.integers(classes)), (*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2)))
                    for _ in range(int(rng.integers(0, 3)))])
        dets.append([])
    total_gt = sum(len(g) for g in gts)
    if total_gt > 3:
        gts[-1] = gts[-1][: 3 - (total_gt - len(gts[-1]))]
    for _ in range(int(rng.integers(0, 6))):
        img = int(rng.integers(n_images))
        if gts[img] and rng.uniform() < 0.7:
            c, (cx, cy, w, h) = gts[img][int(rng.integers(len(gts[img])))]
            box = (cx + rng.normal(0, 0.03), cy + rng.normal(0, 0.03), w * rng.uniform(0.8, 1.2), h * rng.uniform(0.8, 1.2))
            if rng.uniform() < 0.2:
                c = int(rng.integers(classes))
        else:
            c, box = int(rng.integers(classes)), (*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2))
        dets[img].append(Detection(tuple(float(v) for v in box), c, float(rng.choice(conf_levels))))
    return dets, gts


class TestIoU:
    def test_identical(self):
        assert iou((0.5, 0.5, 0.2, 0.3), (0.5, 0.5, 0.2, 0.3)) == 1.0

    def test_disjoint(self):
        assert iou((0.2, 0.2, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)) == 0.0

    def test_half_offset(self):
        # overlap 0.5 / union 1.5 by area arithmetic
        assert iou((0.5, 0.5, 1.0, 1.0), (1.0, 0.5, 1.0, 1.0)) == pytest.approx(1 / 3, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*[st.floats(0.05, 0.95)] * 4), st.tuples(*[st.floats(0.05, 0.95)] * 4))
    def test_symmetric_and_bounded(self, a, b):
        assert 0.0 <= iou(a, b) <= 1.0
        assert iou(a, b) == iou(b, a)


class TestAveragePrecision:
    gt = [[(0, (0.3, 0.3, 0.2, 0.2)), (0, (0.7, 0.7, 0.2, 0.2))]]

    def test_perfect(self):
        dets = [[Detection(b, 0, 0.9) for _, b in self.gt[0]]]
        assert M.average_precision(dets, self.gt, 0.5, 0) == 1.0

    def test_no_detections(self):
        assert M.average_precision([[]], self.gt, 0.5, 0) == 0.0

    def test_tp_fp_tp(self):
        dets = [[Detection((0.3, 0.3, 0.2, 0.2), 0, 0.9), Detection((0.5, 0.1, 0.1, 0.1), 0, 0.8),
                 Detection((0.7, 0.7, 0.2, 0.2), 0, 0.7)]]
        expected = brute_force_ap(dets, self.gt, 0.5, 0)
        # recall 1/2 at precision 1 for 51 points, recall 1 at precision 2/3 for 50 points
        assert expected == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-15)
        assert M.average_precision(dets, self.gt, 0.5, 0) == pytest.approx(expected, abs=1e-12)
        all_point = M.average_precision(dets, self.gt, 0.5, 0, interpolation="all")
        assert all_point == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_absent_class_is_nan(self):
        assert math.isnan(M.average_precision([[]], self.gt, 0.5, 2))

    def test_bad_interpolation(self):
        with pytest.raises(ConfigurationError):
            M.average_precision([[]], self.gt, 0.5, 0, interpolation="11")


class TestMapCoco:
    def test_perfect(self):
        gt = [[(0, (0.3, 0.3, 0.2, 0.2))], [(1, (0.5, 0.5, 0.4, 0.2))]]
        dets = [[Detection(b, c, 0.8) for c, b in img] for img in gt]
        assert M.map_coco(dets, gt, 3) == (1.0, 1.0)

    def test_iou_exactly_0_6(self):
        # same-size boxes offset by w/4: IoU = (w - w/4) / (w + w/4) = 3/5, all values dyadic
        gt = [[(0, (0.5, 0.5, 0.5, 0.5))]]
        dets = [[Detection((0.625, 0.5, 0.5, 0.5), 0, 0.9)]]
        assert iou(dets[0][0].box, gt[0][0][1]) == 0.6
        m50, m5095 = M.map_coco(dets, gt, 3)
        assert m50 == 1.0
        assert m5095 == pytest.approx(3 / 10, abs=1e-15)

    def test_thresholds(self):
        assert M.IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    def test_map50_is_first_threshold_term(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            dets, gts = random_instance(rng)
            grid = M.ap_grid(dets, gts, 3)
            present = ~np.isnan(grid[0])
            m50, _ = M.map_coco(dets, gts, 3)
            expected = grid[0, present].mean() if present.any() else 0.0
            assert m50 == expected

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            dets, gts = random_instance(rng)
            got = M.map_coco(dets, gts, 3)
            want = brute_force_map(dets, gts, 3)
            assert got[0] == pytest.approx(want[0], abs=1e-12)
            assert got[1] == pytest.approx(want[1], abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_threshold_monotone(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    for c in range(3):
        aps = [M.average_precision(dets, gts, t, c) for t in M.IOU_THRESHOLDS]
        if math.isnan(aps[0]):
            continue
        assert all(a >= b - 1e-15 for a, b in zip(aps, aps[1:]))


class TestComplexity:
    def single_conv(self):
        b = G.GraphBuilder((1, 5, 5))
        b.conv("c", 1, kernel=3, padding=0)
        return b.build()

    def test_params(self):
        assert M.param_count(self.single_conv()) == 10

    def test_flops(self):
        assert M.flops(self.single_conv()) == 2 * 9 * 1 * 1 * 3 * 3 == 162

    def test_flops_counts_elementwise(self):
        b = G.GraphBuilder((1, 4, 4))
        b.conv("c", 2, kernel=3)  # 2*9*1*2*16 = 576
        b.relu("r")  # 32
        b.pool("p")  # 8
        assert M.flops(b.build()) == 576 + 32 + 8

    def test_depthwise_flops_use_group_fan_in(self):
        b = G.GraphBuilder((4, 4, 4))
        b.conv("dw", 4, kernel=3, groups=4)
        assert M.flops(b.build()) == 2 * 9 * 1 * 4 * 16


class TestThroughput:
    def test_protocol_counts(self):
        model = G.build_toy("plain", depth=3, width=4, classes=3, grid=4)
        calls = []
        ticks = []

        def fwd(m, x):
            calls.append(x.shape)
            return G.forward(m, x)

        def clock():
            ticks.append(len(calls))
            return float(len(ticks))

        res = M.measure_fps(model, forward_fn=fwd, clock=clock)
        assert len(calls) == 110
        assert ticks[0] == 10  # timing starts after exactly 10 warm-up passes
        assert len(ticks) == 101 and ticks[-1] == 110
        assert res.passes == 100 and res.warmup == 10 and calls[0] == (1, 3, 32, 32)
        assert res.fps == pytest.approx(1.0)

    def test_invalid_passes(self):
        model = G.build_toy("plain", depth=3, width=4, classes=3, grid=4)
        with pytest.raises(ConfigurationError):
            M.measure_fps(model, passes=0)

    def test_fps_positive_finite(self):
        model = G.build_toy("plain", depth=3, width=4, classes=3, grid=4)
        res = M.measure_fps(model, passes=5, warmup=1)
        assert res.fps > 0 and math.isfinite(res.fps) and res.pass_std_s >= 0


class TestReportTable:
    def test_roundtrip(self):
        base = M.EvalReport("plain", "Baseline", 0.61, 0.2, 123.4, 1000, 20000)
        pruned = M.EvalReport("plain", "L1-Pruned", 0.5, 0.1 + 1e-17, 130.0, 1000, 20000).against(base)
        text = M.write_table([base, pruned])
        assert text.splitlines()[0] == ("Model Architecture,Method,mAP@[.50:.95],mAP@.50,FPS,"
                                        "% Δ mAP,% Δ FPS,Params,FLOPs")
        back = M.read_table(text)
        assert back == [base, pruned]
        assert back[0].deltas is None
        assert back[1].deltas["map"] == pytest.approx(-50.0)

    def test_delta_definition(self):
        base = M.EvalReport("m", "Baseline", 0.3, 0.2, 50.0, 1, 1)
        r = M.EvalReport("m", "x", 0.3, 0.19, 55.0, 1, 1).against(base)
        assert r.deltas["map"] == pytest.approx(100 * (0.19 - 0.2) / 0.2)
        assert r.deltas["fps"] == pytest.approx(10.0)
