import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nc4dgs.losses import dssim_loss
from nc4dgs.metrics import IDENTICAL, MetricReport, mean_psnr, psnr, ssim
from oracles import psnr_naive


def test_psnr_examples(rng):
    a = rng.uniform(0.1, 0.8, size=(8, 8, 3))
    assert psnr(a, a) == IDENTICAL
    assert psnr(a + 16 / 255, a) == pytest.approx(20 * np.log10(255 / 16), abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a[:3])


@given(st.integers(0, 10_000))
def test_psnr_matches_formula(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(2, 6, 7, 3))
    assert abs(psnr(a, b) - psnr_naive(a, b)) <= 1e-9


def test_psnr_decreases_with_noise(rng):
    gt = rng.uniform(size=(16, 16, 3))
    noise = rng.uniform(-1, 1, size=gt.shape)
    vals = [psnr(gt + a * noise, gt) for a in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2] >= 0


def test_ssim_examples(rng):
    a = rng.uniform(size=(12, 12, 3))
    assert ssim(a, a) == 1.0
    pattern = (np.indices((12, 12)).sum(0) % 2).astype(float)[..., None].repeat(3, 2)
    assert ssim(1 - pattern, pattern) < 1.0


@given(st.integers(0, 10_000))
def test_ssim_identity_with_dssim_and_symmetry(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(2, 9, 9, 3))
    assert abs(ssim(a, b) - (1 - 2 * dssim_loss(a, b))) <= 1e-12
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert -1.0 <= ssim(a, b) <= 1.0


def test_report_aggregates(rng):
    gts = rng.uniform(size=(2, 3, 8, 8, 3))
    preds = gts.copy()
    preds[0, 1] += 0.05
    preds[1] += 0.02
    rep = MetricReport.compute(preds, gts, views=[0, 3])
    assert rep.psnr[0][0] == IDENTICAL
    assert rep.psnr_per_view()[0] == pytest.approx(psnr(preds[0, 1], gts[0, 1]))
    assert rep.psnr_per_frame()[1] == pytest.approx(np.mean([psnr(preds[v, 1], gts[v, 1]) for v in range(2)]))
    finite = [p for row in rep.psnr for p in row if p != IDENTICAL]
    assert rep.psnr_global() == pytest.approx(np.mean(finite))
    assert rep.ssim_global() == pytest.approx(rep.ssim.mean())
    d = json.loads(rep.to_json())
    assert d["views"] == [0, 3] and d["psnr"][0][0] == IDENTICAL
    text = rep.table()
    assert "ident" in text and text.splitlines()[1].startswith("   0")


def test_all_identical_report(rng):
    gts = rng.uniform(size=(1, 2, 8, 8, 3))
    rep = MetricReport.compute(gts, gts)
    assert rep.psnr_global() == IDENTICAL
    assert np.all(rep.ssim == 1.0)
    assert mean_psnr([]) == IDENTICAL


def test_report_shape_errors(rng):
    with pytest.raises(ValueError):
        MetricReport.compute(rng.uniform(size=(2, 8, 8, 3)), rng.uniform(size=(2, 8, 8, 3)))
