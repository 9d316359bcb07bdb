import csv
import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clockwork.analysis import (DegenerateFeatureWarning, PerturbSpec, feature_stats, frechet_distance, l2_curve,
                                mean_pixel_l2, perturb_feature, perturb_sweep, psnr, quality_report, rf_features,
                                rf_fid, unet_sites, write_sweep_csv)
from clockwork.errors import ConfigurationError, StatisticalValidityError
from clockwork.sampler import StepRecord, Trajectory, make_grid, make_schedule
from clockwork.unet import UNetConfig, build_unet


def test_alpha_one_is_identity(gen):
    f = torch.randn(2, 8, 4, 4, generator=gen)
    assert perturb_feature(f, 1.0, 0) is f


def test_alpha_zero_replaces_with_noise(gen):
    f = 3 + 2 * torch.randn(1, 4, 50, 50, generator=gen)
    out = perturb_feature(f, 0.0, 7)
    mu, sigma = f.mean(), f.var(unbiased=False).sqrt()
    z = torch.randn(f.shape, generator=torch.Generator().manual_seed(7)) * sigma
    torch.testing.assert_close(out, mu + z)
    assert abs(float(torch.corrcoef(torch.stack([out.flatten(), f.flatten()]))[0, 1])) < 0.05


def test_alpha_03_monte_carlo_statistics(gen):
    f = 1.5 + 0.8 * torch.randn(10_000, generator=gen, dtype=torch.float64)
    mu, var = float(f.mean()), float(f.var(unbiased=False))
    out = perturb_feature(f, 0.3, 11)
    se = math.sqrt(var / f.numel())
    assert abs(float(out.mean()) - mu) < 3 * se
    assert abs(float(out.var(unbiased=False)) - var) < 0.05 * var


def test_deterministic_given_seed(gen):
    f = torch.randn(1, 4, 8, 8, generator=gen)
    assert torch.equal(perturb_feature(f, 0.5, 3), perturb_feature(f, 0.5, 3))
    assert not torch.equal(perturb_feature(f, 0.5, 3), perturb_feature(f, 0.5, 4))


def test_per_channel_statistics(gen):
    f = torch.randn(2, 3, 40, 40, generator=gen, dtype=torch.float64) * torch.tensor([0.5, 1.0, 4.0]).view(1, 3, 1, 1)
    out = perturb_feature(f, 0.0, 1, per_channel=True)
    ratio = out.var(dim=(0, 2, 3)) / f.var(dim=(0, 2, 3))
    assert torch.all((ratio - 1).abs() < 0.1)


def test_degenerate_feature_warns():
    f = torch.full((2, 3), 2.5)
    with pytest.warns(DegenerateFeatureWarning):
        out = perturb_feature(f, 0.3, 0)
    assert torch.equal(out, f)


def test_invalid_inputs():
    with pytest.raises(ConfigurationError):
        perturb_feature(torch.ones(3), 1.5, 0)
    with pytest.raises(ConfigurationError):
        perturb_feature(torch.tensor([1.0, float("inf")]), 0.5, 0)
    with pytest.raises(ConfigurationError):
        PerturbSpec("up1", -0.1, 0, 0)


@given(st.floats(0, 1), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_perturbation_keeps_shape_and_finiteness(alpha, seed):
    f = torch.linspace(-3, 5, 96).view(2, 3, 4, 4)
    out = perturb_feature(f, alpha, seed)
    assert out.shape == f.shape and torch.isfinite(out).all()


# -- sweeps ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    cfg = UNetConfig(image_size=8, channels=(8, 16), num_classes=2, groups=4)
    m = build_unet(cfg, 0)
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in m.out_conv.parameters():
            p.copy_(0.2 * torch.randn(p.shape, generator=g))
    return m


def test_sites_are_named():
    cfg = UNetConfig(image_size=16, channels=(16, 32, 64))
    sites = unet_sites(cfg)
    assert {"up0", "up1", "up2", "r_out", "r_in", "mid", "skip0"} <= set(sites)


def test_sweep_trivial_cells_and_worker_independence(tiny_model, tmp_path):
    sched, grid = make_schedule(), make_grid(4, 1000)
    args = (tiny_model, sched, grid, "ddim", ["up0", "r_out"], [1.0, 0.3], [0, 2, 4], list(range(10)))
    rows = perturb_sweep(*args)
    assert len(rows) == 2 * 2 * 3 * 10
    for r in rows:
        if r.alpha == 1.0 or r.start_step == 4:
            assert r.l2 == 0.0
    assert any(r.l2 > 0 for r in rows if r.alpha == 0.3 and r.start_step == 0)
    rows2 = perturb_sweep(*args, workers=2)
    assert [(r.site, r.alpha, r.start_step, r.seed, r.l2) for r in rows] == \
        [(r.site, r.alpha, r.start_step, r.seed, r.l2) for r in rows2]
    write_sweep_csv(rows, tmp_path / "s.csv")
    lines = list(csv.reader(open(tmp_path / "s.csv")))
    assert lines[0] == ["site", "alpha", "start_step", "seed", "l2"] and len(lines) == len(rows) + 1


def test_sweep_noise_independent_of_batch(tiny_model):
    # identical noise draws; only f32 kernel reduction order may differ with batch size
    sched, grid = make_schedule(), make_grid(3, 1000)
    a = perturb_sweep(tiny_model, sched, grid, "ddim", ["r_out"], [0.3], [0], [5, 6, 7])
    b = perturb_sweep(tiny_model, sched, grid, "ddim", ["r_out"], [0.3], [0], [6])
    assert a[1].l2 == pytest.approx(b[0].l2, rel=1e-5)


def test_sweep_rejects_unknown_site(tiny_model):
    with pytest.raises(ConfigurationError):
        perturb_sweep(tiny_model, make_schedule(), make_grid(2, 1000), "ddim", ["nope"], [0.3], [0], [0])


# -- distances ------------------------------------------------------------------


def _traj(latents):
    t = Trajectory(None, 0)
    for i, x in enumerate(latents, 1):
        t.records.append(StepRecord(i, 1000 - i, x, None, None, False))
    return t


def test_l2_curve_hand_built():
    a = _traj([torch.zeros(1, 2), torch.tensor([[1.0, 1.0]])])
    b = _traj([torch.tensor([[3.0, 4.0]]), torch.tensor([[1.0, 1.0]])])
    assert l2_curve(a, b).tolist() == [5.0, 0.0]
    assert l2_curve(a, a).tolist() == [0.0, 0.0]
    with pytest.raises(ConfigurationError):
        l2_curve(a, _traj([torch.zeros(1, 2)]))


def test_mean_pixel_l2_and_psnr():
    a = torch.zeros(1, 3, 2, 2)
    b = torch.zeros(1, 3, 2, 2)
    b[:, 0] = 0.6
    b[:, 1] = 0.8
    # per pixel RGB distance = 1.0 on [-1, 1] = 0.5 on [0, 1]
    assert mean_pixel_l2(a, b) == pytest.approx(0.5)
    mse = (0.36 + 0.64) / 3
    assert psnr(a, b) == pytest.approx(10 * math.log10(4 / mse))
    assert psnr(a, a) == math.inf


# -- RF-FID ---------------------------------------------------------------------


def test_rf_fid_zero_on_identical_and_symmetric(gen):
    a = torch.rand(64, 3, 16, 16, generator=gen) * 2 - 1
    b = torch.rand(80, 3, 16, 16, generator=gen) * 2 - 1
    assert rf_fid(a, a) == 0.0
    assert rf_fid(a, a.clone()) < 1e-6
    assert abs(rf_fid(a, b) - rf_fid(b, a)) < 1e-6
    assert rf_fid(a, b) >= 0
    mu, c = feature_stats(rf_features(a))
    assert abs(frechet_distance(mu, c, mu, c)) < 1e-6


def test_rf_fid_needs_64_samples(gen):
    a = torch.rand(63, 3, 8, 8, generator=gen)
    with pytest.raises(StatisticalValidityError):
        rf_fid(a, a)


def test_frechet_closed_form_for_shifted_gaussians():
    rng = np.random.default_rng(0)
    m = np.array([0.5, -1.0, 2.0, 0.0])
    x = rng.standard_normal((200_000, 4))
    y = rng.standard_normal((200_000, 4)) + m
    d = frechet_distance(*feature_stats(x), *feature_stats(y))
    assert d == pytest.approx(float(m @ m), rel=0.01)


def test_rf_features_fixed_across_calls(gen):
    a = torch.rand(4, 3, 16, 16, generator=gen)
    f1, f2 = rf_features(a), rf_features(a)
    assert f1.shape == (4, 64) and np.array_equal(f1, f2)


def test_rf_fid_orders_by_corruption(gen):
    a = torch.rand(128, 3, 16, 16, generator=gen) * 2 - 1
    noise = torch.randn(128, 3, 16, 16, generator=gen)
    light = (a + 0.1 * noise).clamp(-1, 1)
    heavy = (a + 0.8 * noise).clamp(-1, 1)
    assert rf_fid(a, light) < rf_fid(a, heavy)


def test_quality_report(gen):
    a = torch.rand(64, 3, 8, 8, generator=gen)
    r = quality_report(a, a, paired=a)
    assert r.rf_fid == 0.0 and r.mean_l2 == 0.0 and r.psnr == math.inf
    assert set(r.to_json()) == {"rf_fid", "mean_l2", "psnr"}
