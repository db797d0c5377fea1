import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluorosynth import metrics as mt
from fluorosynth.datapipe import ImagePair
from fluorosynth.nets import FeatureExtractor, FeatureExtractorSpec

from oracles import mmd_brute, ssim_direct

TINY_X = FeatureExtractorSpec(width_divisor=16)


def rand_pair(seed, shape=(24, 24)):
    rng = np.random.default_rng(seed)
    a = rng.random(shape)
    return a, np.clip(a + 0.2 * rng.standard_normal(shape), 0, 1)


# ---------------------------------------------------------------- MAE / PSNR

def test_mae_examples():
    a, b = rand_pair(0)
    assert mt.mae(a, a) == 0.0
    assert mt.mae(np.full((4, 4), 0.3), np.full((4, 4), 0.4)) == pytest.approx(0.1)
    brute = sum(abs(a[i, j] - b[i, j]) for i in range(24) for j in range(24)) / a.size
    assert mt.mae(a, b) == pytest.approx(brute, abs=1e-9)
    with pytest.raises(ValueError):
        mt.mae(a, b[:-1])


def test_psnr_examples():
    a = np.random.default_rng(0).random((16, 16)) * 0.8
    assert mt.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert mt.psnr(a, a) == math.inf
    b = a.copy()
    b.flat[::2] += 0.1 * math.sqrt(2)  # mse = 0.01
    assert mt.psnr(a, b) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        mt.psnr(a, a[:, :3])


# ---------------------------------------------------------------- SSIM

@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_direct_formula(seed):
    a, b = rand_pair(seed, (20 + seed, 23))
    assert mt.ssim(a, b) == pytest.approx(ssim_direct(a, b), abs=1e-6)


def test_ssim_agrees_with_scikit_image():
    from skimage.metrics import structural_similarity

    a, b = rand_pair(9, (48, 40))
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    assert mt.ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_examples():
    a, _ = rand_pair(1)
    assert mt.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    binary = (np.random.default_rng(2).random((32, 32)) > 0.5).astype(float)
    assert mt.ssim(binary, 1 - binary) < 0
    with pytest.raises(ValueError):
        mt.ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_ssim_approaches_one_monotonically():
    a, _ = rand_pair(3)
    noise = np.random.default_rng(4).standard_normal(a.shape)
    values = [mt.ssim(a, a + eps * noise) for eps in (0.3, 0.1, 0.03, 0.01, 0.001)]
    assert all(x < y for x, y in zip(values, values[1:]))
    assert values[-1] > 0.999


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["lr", "ud", "both"]))
def test_metrics_symmetric_and_flip_invariant(seed, flip):
    a, b = rand_pair(seed, (16, 18))
    assert mt.mae(a, b) == mt.mae(b, a)
    assert mt.psnr(a, b) == mt.psnr(b, a)
    assert abs(mt.ssim(a, b) - mt.ssim(b, a)) <= 1e-12
    f = {"lr": np.fliplr, "ud": np.flipud, "both": lambda x: x[::-1, ::-1]}[flip]
    assert mt.mae(f(a), f(b)) == pytest.approx(mt.mae(a, b), rel=1e-12)
    assert mt.psnr(f(a), f(b)) == pytest.approx(mt.psnr(a, b), rel=1e-12)
    assert mt.ssim(f(a), f(b)) == pytest.approx(mt.ssim(a, b), abs=1e-12)
    assert -1 <= mt.ssim(a, b) <= 1


# ---------------------------------------------------------------- KID

def test_kid_matches_brute_force_on_small_sets():
    rng = np.random.default_rng(0)
    fx, fy = rng.standard_normal((8, 5)), rng.standard_normal((8, 5)) + 0.3
    assert mt.mmd2_unbiased(fx, fy) == pytest.approx(mmd_brute(fx, fy), abs=1e-8)
    # one block covering all eight samples is the full estimate
    val, _ = mt.kid_from_features(fx, fy, mt.KidConfig(block_size=8, n_blocks=1))
    assert val == pytest.approx(mmd_brute(fx, fy), abs=1e-8)


def test_kid_block_average_matches_brute_force_blocks():
    rng = np.random.default_rng(1)
    fx, fy = rng.standard_normal((20, 4)), rng.standard_normal((20, 4))
    cfg = mt.KidConfig(block_size=6, n_blocks=5, seed=3)
    blocks = mt.kid_blocks(fx, fy, cfg)
    draw = np.random.default_rng(3)
    for b in blocks:
        ix, iy = draw.choice(20, 6, replace=False), draw.choice(20, 6, replace=False)
        assert b == pytest.approx(mmd_brute(fx[ix], fy[iy]), abs=1e-8)


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor(TINY_X)


def blobs(n, seed, bright=0.5):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32]
    out = []
    for _ in range(n):
        cy, cx, r = rng.uniform(8, 24, 2).tolist() + [rng.uniform(4, 9)]
        img = bright * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2)) + 0.05 * rng.random((32, 32))
        out.append(img)
    return np.clip(np.array(out), 0, 1)


def test_kid_same_distribution_near_zero(extractor):
    imgs = blobs(64, 0)
    cfg = mt.KidConfig(TINY_X, block_size=16, n_blocks=20)
    fa, fb = extractor.embed(imgs[:32]), extractor.embed(imgs[32:])
    val, se = mt.kid_from_features(fa, fb, cfg)
    assert abs(val) < 1e-3
    assert abs(val) <= 3 * se
    assert abs(mt.kid(imgs[:32], imgs[32:], cfg, extractor)) < 1e-3


def test_kid_separates_black_from_white(extractor):
    cfg = mt.KidConfig(TINY_X, block_size=8, n_blocks=4)
    black, white = np.zeros((8, 32, 32)), np.ones((8, 32, 32))
    same = abs(mt.kid(blobs(8, 1), blobs(8, 2), cfg, extractor))
    assert mt.kid(black, white, cfg, extractor) > 100 * max(same, 1e-6)


def test_kid_errors():
    with pytest.raises(ValueError):
        mt.KidConfig(block_size=1)
    with pytest.raises(ValueError):
        mt.KidConfig(degree=0)
    with pytest.raises(ValueError):
        mt.kid_blocks(np.zeros((4, 3)), np.zeros((20, 3)), mt.KidConfig(block_size=8))


def test_polynomial_kernel_definition():
    x, y = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
    assert mt.polynomial_kernel(x, y)[0, 0] == pytest.approx((1 / 2 + 1) ** 3)


# ---------------------------------------------------------------- evaluation and reports

def make_pairs(n=6, size=32):
    rng = np.random.default_rng(0)
    pairs = []
    for i in range(n):
        drr = rng.random((size, size))
        pairs.append(ImagePair(drr, np.clip(drr**0.5 + 0.02 * rng.standard_normal(drr.shape), 0, 1), f"c{(n - i) % 3}", i))
    return pairs


def small_eval(generator, pairs, **kw):
    cfg = mt.KidConfig(TINY_X, block_size=4, n_blocks=3)
    return mt.evaluate(generator, pairs, cfg, extractor=FeatureExtractor(TINY_X), **kw)


def test_identity_generator_equals_drr_column():
    rep = small_eval(lambda x: x, make_pairs(), baselines={"sqrt": np.sqrt})
    for r in rep.rows:
        for m in ("mae", "psnr", "ssim"):
            assert r[f"{m}_ours"] == r[f"{m}_drr"]
    assert rep.kid["ours"] == rep.kid["drr"]
    assert rep.columns == ("drr", "ours", "sqrt")
    # the sqrt baseline is the true mapping up to noise
    assert np.mean([r["mae_sqrt"] for r in rep.rows]) < np.mean([r["mae_drr"] for r in rep.rows])


def test_rows_sorted_by_case_then_frame():
    rep = small_eval(lambda x: x, make_pairs()[::-1])
    keys = [(r["case"], r["frame"]) for r in rep.rows]
    assert keys == sorted(keys)


def test_evaluate_times_generation_only():
    calls = []

    def gen(x):
        calls.append(1)
        return x

    rep = small_eval(gen, make_pairs(5), warmup=2)
    assert len(calls) == 5 + 2 and len(rep.timing_ms) == 5
    t = rep.timing()
    assert t["warmup_iterations"] == 2 and t["excludes"] == "model load"
    with pytest.raises(ValueError):
        small_eval(gen, [])


def test_report_files(tmp_path):
    rep = small_eval(lambda x: np.sqrt(x), make_pairs(), config_digest="abc")
    rep.write(tmp_path)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and list(rows[0])[:5] == ["case", "frame", "mae_drr", "psnr_drr", "ssim_drr"]
    assert float(rows[0]["mae_ours"]) == rep.rows[0]["mae_ours"]
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["config_digest"] == "abc" and summary["count"] == 6
    assert " ± " in summary["metrics"]["ours"]["mae"]["text"]
    assert "generation_ms" not in json.dumps(summary)
    timing = json.loads((tmp_path / "timing.json").read_text())
    assert len(timing["generation_ms"]["per_image"]) == 6


def test_identical_images_report_inf_psnr():
    pairs = [ImagePair(np.full((32, 32), 0.5), np.full((32, 32), 0.5), "c", i) for i in range(4)]
    rep = small_eval(lambda x: x, pairs)
    assert all(r["psnr_ours"] == math.inf for r in rep.rows)
    assert rep.summary()["metrics"]["ours"]["psnr"]["mean"] == math.inf


def test_boxplot_stats_against_numpy():
    v = np.concatenate([np.linspace(0, 1, 21), [5.0, -4.0]])
    s = mt.boxplot_stats(v)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    assert (s["q1"], s["median"], s["q3"]) == (q1, med, q3)
    assert sorted(s["outliers"]) == [-4.0, 5.0]
    assert (s["whisker_low"], s["whisker_high"]) == (0.0, 1.0)
    with pytest.raises(ValueError):
        mt.boxplot_stats([math.inf])


def test_boxplot_csv(tmp_path):
    rep = small_eval(lambda x: x, make_pairs())
    mt.write_boxplot_csv(tmp_path / "b.csv", rep)
    with open(tmp_path / "b.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["metric", "column", "q1"] and len(rows) == 1 + 3 * 2
