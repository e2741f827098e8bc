"""Acceptance criteria, one test each, at the stated tolerances.

Each test logs a PASS/FAIL line that appears under "acceptance criteria"
in the pytest terminal summary.
"""

import json
import time

import numpy as np
import pytest
from PIL import Image

from nfp import cli
from nfp.gradcheck import check_metric_gradient, check_nfp_backward
from nfp.layer import (
    NfpConfig,
    NfpHead,
    affinity_forward,
    affinity_forward_naive,
    layer_parameter_count,
)
from nfp.errors import ShapeError
from nfp.metrics import ANALYTIC_METRIC_IDS, METRIC_IDS, list_metrics, similarity
from nfp.npy import write_npy
from nfp.reporting import dumps, strip_meta
from nfp.silhouette import silhouette_score
from nfp.sweeps import metric_sweep, placement_sweep
from nfp.synth import default_texture_specs, render_sample, synth_dataset
from nfp.training import TrainConfig, closed_form_parameter_count, train
from silhouette_oracle import HAND_DATASETS, brute_force_silhouette

pytestmark = pytest.mark.slow

MAX_SIDE = 32


@pytest.fixture(scope="module")
def benchmark_data():
    """The default 4-class synthetic benchmark: 64x64, 128/32/32 per class."""
    return synth_dataset(default_texture_specs(), (128, 32, 32), master_seed=0)


def _equivalence_shape(rng, seed_index, span):
    if seed_index == 0:
        return (2, 8, MAX_SIDE, MAX_SIDE)
    hi = min(MAX_SIDE, span + 8)
    h, w = (int(v) for v in rng.integers(span, hi + 1, size=2))
    return (int(rng.integers(1, 3)), int(rng.integers(1, 9)), h, w)


def test_criterion_01_oracle_equivalence(acceptance_log):
    started = time.perf_counter()
    worst, cells, rejected = 0.0, 0, 0
    for metric in METRIC_IDS:
        for radius in (1, 2):
            for dilation in (1, 2, 15):
                cfg = NfpConfig(radius, dilation, metric)
                for s in range(5):
                    rng = np.random.default_rng([s, radius, dilation])
                    if cfg.span > MAX_SIDE:
                        # window does not fit in the largest allowed tensor
                        with pytest.raises(ShapeError):
                            affinity_forward(np.zeros((1, 1, MAX_SIDE, MAX_SIDE)), cfg)
                        rejected += 1
                        continue
                    x = rng.normal(size=_equivalence_shape(rng, s, cfg.span)).astype(np.float32)
                    fast = np.asarray(affinity_forward(x, cfg), dtype=np.float64)
                    naive = np.asarray(affinity_forward_naive(x, cfg), dtype=np.float64)
                    assert fast.shape == naive.shape
                    worst = max(worst, float(np.max(np.abs(fast - naive))))
                    cells += 1
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-5 and elapsed < 120
    acceptance_log(1, ok, f"{cells} cells, {rejected} oversize rejected, max|diff|={worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-5
    assert elapsed < 120


def test_criterion_02_metric_invariants(acceptance_log):
    rng = np.random.default_rng(2)
    descriptors = list_metrics()
    failures = []

    def trial_vectors():
        c = int(rng.integers(2, 17))
        return rng.normal(scale=3, size=c), rng.normal(scale=3, size=c)

    for trial in range(100):
        x, y = trial_vectors()
        for d in descriptors:
            if d.negated_distance:
                if similarity(d.id, x, y) > 0 or not -1e-6 <= similarity(d.id, x, x) <= 0:
                    failures.append(("sign", d.id, trial))
            if d.id not in ("scs", "chi2_1"):
                if abs(similarity(d.id, x, y) - similarity(d.id, y, x)) > 1e-6:
                    failures.append(("symmetry", d.id, trial))
        for m in ("cosine", "pearson", "scs"):
            if not -1 - 1e-9 <= similarity(m, x, y) <= 1 + 1e-9:
                failures.append(("range", m, trial))
        if not -1e-9 <= similarity("gfc", x, y) <= 1 + 1e-9:
            failures.append(("range", "gfc", trial))
        a = rng.uniform(0.1, 10)
        if abs(similarity("cosine", a * x, y) - similarity("cosine", x, y)) > 1e-6:
            failures.append(("scale", "cosine", trial))
        shift = rng.uniform(-50, 50)
        for d in descriptors:
            if d.uses_distribution and abs(similarity(d.id, x + shift, y + shift) - similarity(d.id, x, y)) > 1e-5:
                failures.append(("shift", d.id, trial))
    acceptance_log(2, not failures, f"100 trials x 5 invariant families, {len(failures)} failures")
    assert not failures, failures[:5]


def test_criterion_03_gradients(acceptance_log):
    started = time.perf_counter()
    results = []
    for i, metric in enumerate(ANALYTIC_METRIC_IDS):
        results.append(check_metric_gradient(metric, trials=100, tolerance=1e-4, seed=i))
        results.append(check_nfp_backward(metric, trials=100, tolerance=1e-3, seed=i))
    elapsed = time.perf_counter() - started
    failed = [r.name for r in results if not r.passed]
    worst_metric = max(r.max_error for r in results[0::2])
    worst_layer = max(r.max_error for r in results[1::2])
    ok = not failed and elapsed < 120
    acceptance_log(3, ok, f"{len(ANALYTIC_METRIC_IDS)} metrics, metric err {worst_metric:.1e}, "
                          f"layer err {worst_layer:.1e}, {elapsed:.1f}s")
    assert not failed, failed
    assert elapsed < 120


def test_criterion_04_shape_and_count_laws(acceptance_log):
    rng = np.random.default_rng(4)
    assert NfpConfig(radius=1).n_neighbors == 8
    checked = 0
    for radius in (1, 2, 3):
        for dilation in (1, 2, 3):
            cfg = NfpConfig(radius, dilation, "l1")
            k = 2 * radius + 1
            assert cfg.n_neighbors == k * k - 1
            b, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
            h, w = cfg.span + int(rng.integers(0, 5)), cfg.span + int(rng.integers(0, 5))
            stack = affinity_forward(rng.normal(size=(b, c, h, w)), cfg)
            assert stack.shape == (b, cfg.n_neighbors, h - dilation * (k - 1), w - dilation * (k - 1))
            for out in (1, 7, 64):
                head = NfpHead.initialize(out, cfg.n_neighbors, seed=0)
                expected = out * cfg.n_neighbors + out
                assert head.parameter_count == expected == layer_parameter_count(out, cfg)
            checked += 1
    acceptance_log(4, True, f"{checked} (r, D) configurations, N_1=8, count C'*N_r + C'")


def test_criterion_05_desk_scale_trend(acceptance_log, benchmark_data):
    started = time.perf_counter()
    rows = []
    for seed in (0, 1, 2):
        gap = train(TrainConfig(seed=seed, baseline=True), benchmark_data)[1].test_accuracy
        nfp = train(TrainConfig(seed=seed, metric="cosine"), benchmark_data)[1].test_accuracy
        rows.append((seed, gap, nfp))
    elapsed = time.perf_counter() - started
    mean_gap = np.mean([r[1] for r in rows])
    mean_nfp = np.mean([r[2] for r in rows])
    per_seed = all(nfp >= gap - 0.01 for _, gap, nfp in rows)
    ok = mean_nfp >= mean_gap and per_seed and elapsed < 300
    detail = ", ".join(f"s{s} gap={g:.3f} nfp={n:.3f}" for s, g, n in rows)
    acceptance_log(5, ok, f"{detail}; mean {mean_gap:.3f} -> {mean_nfp:.3f}, {elapsed:.1f}s")
    assert mean_nfp >= mean_gap
    assert per_seed
    assert elapsed < 300


def test_criterion_06_metric_sweep(acceptance_log, benchmark_data):
    cfg = TrainConfig(max_epochs=30)
    result = metric_sweep(cfg, benchmark_data)
    reports = result.reports
    assert len(reports) >= 8
    assert set(reports) <= set(ANALYTIC_METRIC_IDS)
    assert len({r.seed for r in reports.values()}) == 1
    assert len({r.parameter_count for r in reports.values()}) == 1
    assert len({json.dumps({k: v for k, v in r.config.items() if k != "metric"}, sort_keys=True)
                for r in reports.values()}) == 1
    accs = [row["test_accuracy"] for row in result.summary]
    assert accs == sorted(accs, reverse=True)
    assert sorted(row["metric"] for row in result.summary) == sorted(reports)
    top = result.summary[0]
    acceptance_log(6, True, f"{len(reports)} metrics swept, top {top['metric']} {top['test_accuracy']:.3f}")


def test_criterion_07_placement_sweep(acceptance_log, benchmark_data):
    cfg = TrainConfig(max_epochs=30)
    result = placement_sweep(cfg, benchmark_data)
    rows = {row["taps"]: row for row in result.summary}
    assert set(rows) == {"stage0", "stage1", "all"}
    singles = max(rows["stage0"]["parameter_count"], rows["stage1"]["parameter_count"])
    assert rows["all"]["parameter_count"] > singles
    for row in rows.values():
        assert row["parameter_count"] == row["closed_form_parameter_count"]
    assert rows["all"]["parameter_count"] == closed_form_parameter_count(TrainConfig(taps=(0, 1)), 4)
    counts = ", ".join(f"{k}={rows[k]['parameter_count']}" for k in ("stage0", "stage1", "all"))
    acceptance_log(7, True, f"params {counts}; closed form matches runtime")


def test_criterion_08_silhouette(acceptance_log):
    worst = 0.0
    for points, labels in HAND_DATASETS:
        assert len(points) <= 20
        worst = max(worst, abs(silhouette_score(np.asarray(points, float), labels)
                               - brute_force_silhouette(points, labels)))
    rng = np.random.default_rng(8)
    blobs = np.vstack([rng.normal(0, 0.1, size=(20, 3)), rng.normal(50, 0.1, size=(20, 3))])
    separated = silhouette_score(blobs, [0] * 20 + [1] * 20)
    ok = worst <= 1e-9 and separated > 0.99
    acceptance_log(8, ok, f"max |diff| {worst:.1e} over {len(HAND_DATASETS)} sets, separated {separated:.4f}")
    assert worst <= 1e-9
    assert separated > 0.99


def test_criterion_09_maps(acceptance_log, tmp_path):
    specs = default_texture_specs(64)
    image = np.stack([render_sample(specs[1], seed=9, augment=False)])
    src = tmp_path / "stripes.npy"
    write_npy(image, src)
    out = tmp_path / "maps"
    code = cli.main(["maps", "--input", str(src), "--dilation", "15", "--metric", "scaled_dot", "--out", str(out)])
    pngs = sorted(out.glob("*.png"))
    spans = [(int(a.min()), int(a.max())) for a in (np.asarray(Image.open(p)) for p in pngs)]
    ok = code == 0 and len(pngs) == 8 and all(s == (0, 255) for s in spans)
    acceptance_log(9, ok, f"exit {code}, {len(pngs)} PNGs, all span 0..255: {all(s == (0, 255) for s in spans)}")
    assert code == 0
    assert len(pngs) == 8
    assert all(s == (0, 255) for s in spans)


def test_criterion_10_determinism(acceptance_log, tmp_path):
    outputs = []
    for run in ("a", "b"):
        assert cli.main(["train-demo", "--seed", "3", "--out", str(tmp_path / run)]) == 0
        outputs.append({
            name: dumps(strip_meta(json.loads((tmp_path / run / f"report_{name}.json").read_text())))
            for name in ("baseline", "nfp")
        })
    same = outputs[0] == outputs[1]
    acceptance_log(10, same, "train-demo twice, reports identical outside meta" if same else "reports differ")
    assert same
