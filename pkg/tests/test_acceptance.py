"""Acceptance criteria, one marked group per criterion.

The terminal summary prints one PASS/FAIL line per criterion.  Criteria 6, 7,
9 and 10 share a detector trained once from the default config (about two
minutes on one CPU core).
"""

import json
import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from attrprune import dataset as D
from attrprune import graph as G
from attrprune import harness as H
from attrprune import metrics as M
from attrprune import pruner as P
from attrprune import recorder as R
from attrprune import scorer as S
from attrprune import tensor as T
from attrprune.config import DEFAULT_CONFIG, load_config

from conftest import assert_grad_close, central_diff, disagreement_model
from test_harness import strip_timing
from test_metrics import brute_force_ap, brute_force_map, random_instance

crit = pytest.mark.criterion


@pytest.fixture(scope="module")
def default_cfg():
    return load_config(DEFAULT_CONFIG)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, default_cfg):
    start = time.perf_counter()
    ckpt = H.cmd_train(default_cfg, tmp_path_factory.mktemp("train"))
    return ckpt, time.perf_counter() - start


@pytest.fixture(scope="module")
def sweep(tmp_path_factory, default_cfg, trained):
    ckpt, train_seconds = trained
    start = time.perf_counter()
    rec = H.cmd_sweep(default_cfg, tmp_path_factory.mktemp("sweep"), ckpt)
    return rec, train_seconds + time.perf_counter() - start


@pytest.fixture(scope="module")
def compare_dir(tmp_path_factory, default_cfg, trained):
    out = tmp_path_factory.mktemp("compare")
    H.cmd_compare(default_cfg, out, trained[0])
    return out


# ---------------------------------------------------------------- 1


def depth3(seed, image_size=16):
    return G.build_toy("plain", depth=3, width=4, classes=3, grid=2, image_size=image_size, seed=seed)


def noise_batch(seed, image_size=8):
    """Uniform-noise images with real scene targets.

    Rendered scenes contain flat colour fills, which put exact ties inside
    max-pool windows; there the loss is not differentiable and central
    differences return the mean of the one-sided slopes.  Noise inputs are in
    general position, so every point checked is a differentiable one.
    """
    _, targets = D.stack(D.generate(seed=seed, count=2, image_size=image_size, grid=2), grid=2, classes=3)
    images = np.random.default_rng(seed).uniform(0.0, 1.0, (2, 3, image_size, image_size))
    return images, targets


@crit(1, "gradient fidelity vs central differences (eps 1e-5, 1e-4 rel / 1e-7 abs)")
class TestGradientFidelity:
    @settings(max_examples=10, deadline=None, derandomize=True,
              suppress_health_check=[HealthCheck.too_slow])
    @given(st.integers(0, 10_000))
    def test_parameter_gradients(self, seed):
        model = depth3(seed, image_size=8)
        images, targets = noise_batch(seed)

        def loss():
            return G.detection_loss(G.forward(model, images)[0], targets).scalar

        with T.Tape():
            lv = G.detection_loss(G.forward(model, images)[0], targets)
            T.backward(lv)
        for name, p in model.parameters():
            assert_grad_close(p.grad, central_diff(loss, p.data, 1e-5), rtol=1e-4, atol=1e-7)

    @settings(max_examples=10, deadline=None, derandomize=True,
              suppress_health_check=[HealthCheck.too_slow])
    @given(st.integers(0, 10_000))
    def test_activation_gradients(self, seed):
        model = depth3(seed, image_size=8)
        images, targets = noise_batch(seed)
        recs = R.record_pass(model, images, targets)
        assert list(recs) == model.prunable_ids
        for lid, rec in recs.items():
            act = rec.activation.copy()

            def loss():
                head, _ = G.forward(model, images, overrides={lid: act})
                return G.detection_loss(head, targets, reduction="sum").scalar

            assert_grad_close(rec.act_grad, central_diff(loss, act, 1e-5), rtol=1e-4, atol=1e-7)


# ---------------------------------------------------------------- 2


@crit(2, "L1 score equals the analytic sum of |W| bitwise on integer weights")
@pytest.mark.parametrize("seed", range(5))
def test_l1_exact(seed):
    rng = np.random.default_rng(seed)
    b = G.GraphBuilder((3, 8, 8))
    expected = {}
    cin = 3
    for i in range(4):
        w = rng.integers(-50, 51, size=(5, cin, 3, 3)).astype(float)
        b.conv(f"c{i}", 5, weight=w, bias=rng.integers(-9, 10, 5).astype(float))
        expected[f"c{i}"] = float(sum(abs(int(v)) for v in w.ravel()))
        cin = 5
    table = S.l1_score(b.build())
    for lid, value in expected.items():
        assert table.scores[lid] == value
        assert np.float64(table.scores[lid]).tobytes() == np.float64(value).tobytes()


# ---------------------------------------------------------------- 3


@crit(3, "attribution score equals elementwise |grad*act| oracle within 1e-10")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_attribution_oracle(seed):
    model = depth3(seed)
    scenes = D.generate(seed=40 + seed, count=16, image_size=16, grid=2)
    table = S.attribution_score(model, scenes, batches=1, batch_size=8, seed=seed)
    picked = S.select_samples(len(scenes), 1, 8, seed)
    images, targets = D.stack([scenes[i] for i in picked], 2, 3)
    recs = R.record_pass(model, images, targets)
    for lid, rec in recs.items():
        per_image = []
        for n in range(rec.batch_size):
            acc = 0.0
            for a, g in zip(rec.activation[n].ravel().tolist(), rec.act_grad[n].ravel().tolist()):
                acc += abs(g * a)
            per_image.append(acc)
        oracle = sum(per_image) / len(per_image)
        assert abs(table.scores[lid] - oracle) <= 1e-10


# ---------------------------------------------------------------- 4


@crit(4, "AP and mAP match brute-force PR enumeration on 1000 random instances within 1e-12")
def test_map_oracle():
    rng = np.random.default_rng(2024)
    thresholds = [round(0.5 + 0.05 * k, 2) for k in range(10)]
    for _ in range(1000):
        dets, gts = random_instance(rng)
        for c in range(3):
            for t in thresholds:
                got, want = M.average_precision(dets, gts, t, c), brute_force_ap(dets, gts, t, c)
                assert (math.isnan(got) and math.isnan(want)) or abs(got - want) <= 1e-12
        got50, got5095 = M.map_coco(dets, gts, 3)
        want50, want5095 = brute_force_map(dets, gts, 3)
        assert abs(got50 - want50) <= 1e-12 and abs(got5095 - want5095) <= 1e-12


# ---------------------------------------------------------------- 5


@crit(5, "param count and FLOPs unchanged by pruning, every paradigm and sweep rate")
@pytest.mark.parametrize("paradigm", ["plain", "residual", "depthwise"])
def test_structural_invariance(paradigm, default_cfg):
    model = G.build_toy(paradigm, depth=9, width=8, classes=3, grid=4, seed=3)
    params, flops = M.param_count(model), M.flops(model)
    rng = np.random.default_rng(0)
    random_table = S.ImportanceTable("attribution", {lid: float(v) for lid, v in
                                                zip(model.prunable_ids, rng.uniform(size=len(model.prunable_ids)))},
                                     {lid: i for i, lid in enumerate(model.prunable_ids)})
    for table in (S.l1_score(model), random_table):
        for rate in default_cfg.prune.sweep_rates:
            plan = P.PrunePlan.empty(table.method) if rate == 0 else P.make_plan(table, rate)
            pruned = P.apply_plan(model, plan)
            assert M.param_count(pruned) == params
            assert M.flops(pruned) == flops


# ---------------------------------------------------------------- 6


@crit(6, "engineered model: bottom-1 overlap 0; trained model: compare report with Spearman and overlap")
class TestRankingDisagreement:
    def test_engineered(self):
        model = disagreement_model()
        scenes = D.generate(seed=11, count=8, image_size=16, grid=2)
        l1 = S.l1_score(model)
        attr = S.attribution_score(model, scenes, batch_size=8)
        cmp = S.compare_rankings(l1, attr, k=1)
        assert cmp.overlap == 0.0
        assert cmp.bottom_a == ["amp_in"] and cmp.bottom_b == ["dead"]

    def test_trained_report(self, compare_dir):
        rec = json.loads((compare_dir / "compare.json").read_text())
        ranks = rec["rank_comparison"]
        assert -1.0 <= ranks["spearman"] <= 1.0
        assert 0.0 <= ranks["bottom_k_overlap"] <= 1.0
        assert rec["pruned_sets"] in ("identical", "disjoint", "overlapping")
        assert set(rec["plan_diff"]) == set(rec["plans"]["l1"]["pruned"]) ^ set(rec["plans"]["attribution"]["pruned"])
        assert (compare_dir / "ranks.svg").stat().st_size > 0
        print(f"\ntrained compare: spearman={ranks['spearman']:.4f} "
              f"bottom-{ranks['k']} overlap={ranks['bottom_k_overlap']:.2f} sets={rec['pruned_sets']}")


# ---------------------------------------------------------------- 7


@crit(7, "sweep on trained detector: map_50 >= 0.5, non-increasing mAP, drop(5%) <= drop(10%), < 15 min")
class TestSweepTradeoff:
    def test_gate(self, sweep):
        rec, _ = sweep
        assert rec["baseline"]["map_50"] >= 0.5

    def test_monotone(self, sweep):
        rec, _ = sweep
        for method, points in rec["methods"].items():
            maps = [p["map_50_95"] for p in points]
            assert all(b <= a for a, b in zip(maps, maps[1:])), (method, maps)

    def test_five_vs_ten(self, sweep):
        rec, _ = sweep
        for method, points in rec["methods"].items():
            drop = {p["rate"]: p["map_drop_percent"] for p in points}
            assert drop[0.0] == 0.0
            assert drop[0.05] <= drop[0.1], (method, drop)

    def test_runtime(self, sweep):
        _, seconds = sweep
        print(f"\ntrain + sweep wall time: {seconds:.1f} s")
        assert seconds < 15 * 60


# ---------------------------------------------------------------- 8


@crit(8, "FPS protocol: 10 untimed + 100 timed passes; repeat spread < 10%")
class TestThroughput:
    def test_pass_counts(self):
        model = G.build_toy("residual", depth=6, width=16, classes=3, grid=4, seed=0)
        calls, reads = [], []

        def forward(m, x):
            calls.append(len(reads))  # clock reads seen before this pass
            return G.forward(m, x)

        def clock():
            reads.append(time.perf_counter())
            return reads[-1]

        res = M.measure_fps(model, passes=100, warmup=10, forward_fn=forward, clock=clock)
        assert len(calls) == 110
        assert calls[:10] == [0] * 10  # warm-up runs before the clock starts
        assert len(reads) == 101 and res.passes == 100 and res.warmup == 10
        assert res.fps == pytest.approx(100 / (reads[-1] - reads[0]), rel=1e-12)

    def test_repeatability(self):
        model = G.build_toy("residual", depth=6, width=16, classes=3, grid=4, seed=0)
        fps = [M.measure_fps(model, passes=100, warmup=10).fps for _ in range(3)]
        spread = (max(fps) - min(fps)) / float(np.median(fps))
        print(f"\nfps repeats {['%.1f' % f for f in fps]} spread {100 * spread:.2f}%")
        assert spread < 0.10


# ---------------------------------------------------------------- 9


@crit(9, "compare report carries the exact nine-column results schema")
def test_table_schema(compare_dir):
    lines = [ln for ln in (compare_dir / "compare.csv").read_text().splitlines() if not ln.startswith("#")]
    header = lines[0].split(",")
    assert header == ["Model Architecture", "Method", "mAP@[.50:.95]", "mAP@.50", "FPS",
                      "% Δ mAP", "% Δ FPS", "Params", "FLOPs"]
    assert header[2:7] == ["mAP@[.50:.95]", "mAP@.50", "FPS", "% Δ mAP", "% Δ FPS"]
    rows = M.read_table((compare_dir / "compare.csv").read_text())
    assert [r.method for r in rows] == ["Baseline", "L1-Pruned", "Attr.-Pruned"]


# ---------------------------------------------------------------- 10


@crit(10, "score / prune / eval reruns reproduce every non-timing field bitwise")
def test_determinism(tmp_path, default_cfg, trained):
    ckpt = trained[0]
    for run in ("a", "b"):
        out = tmp_path / run
        H.cmd_score(default_cfg, ckpt, out)
        H.cmd_prune(default_cfg, ckpt, out / "importance_attribution.json", out)
        H.cmd_eval(default_cfg, out / "pruned_attribution.ckpt", out)
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("importance_l1.json", "importance_attribution.json", "plan_attribution.json",
                 "pruned_attribution.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ea, eb = (json.loads((d / "eval.json").read_text()) for d in (a, b))
    assert strip_timing(ea) == strip_timing(eb)
    ra, rb = (M.read_table((d / "eval.csv").read_text())[0] for d in (a, b))
    assert (ra.map_50, ra.map_50_95, ra.params, ra.flops) == (rb.map_50, rb.map_50_95, rb.params, rb.flops)
