import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ssim_oracle
from sparta.errors import MetricError
from sparta.evaluation import (MetricReport, field_metrics, gaussian_window, knn_radii, latent_density,
                               latent_projection_plot, latent_std, pca_project, psnr, realism_score, rrmse,
                               smoothness_report, smoothness_reports, ssim, window_summaries, write_reports)


def field(seed=0, shape=(2, 5, 16, 8)):
    return np.random.default_rng(seed).normal(size=shape)


# -- RRMSE / PSNR / SSIM -------------------------------------------------------------


def test_rrmse_identity():
    x = field()
    assert rrmse(x, x) == 0.0


def test_rrmse_scaling():
    x = field()
    assert abs(rrmse(1.1 * x, x) - 10.0) < 1e-9


def test_rrmse_elementwise_oracle():
    x, y = field(1), field(2)
    num = math.sqrt(sum(v * v for v in (y - x).ravel()))
    den = math.sqrt(sum(v * v for v in x.ravel()))
    assert abs(rrmse(y, x) - 100 * num / den) < 1e-10


def test_rrmse_zero_reference():
    with pytest.raises(MetricError):
        rrmse(np.ones(4), np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10))
def test_rrmse_linear_in_error_scale(seed, c):
    rng = np.random.default_rng(seed)
    x, e = rng.normal(size=50) + 0.1, rng.normal(size=50)
    assert rrmse(x + c * e, x) == pytest.approx(c * rrmse(x + e, x), rel=1e-9)


def test_psnr_identity_cap():
    x = field()
    assert psnr(x, x) == 100.0


def test_psnr_half_range_offset():
    x = field()
    r = x.max() - x.min()
    assert abs(psnr(x + r / 2, x) - 20 * math.log10(2)) < 1e-9
    assert psnr(x + r / 2, x) == pytest.approx(6.0206, abs=1e-4)


def test_zero_range_is_error():
    with pytest.raises(MetricError):
        psnr(np.ones((1, 8, 8)), np.ones((1, 8, 8)))
    with pytest.raises(MetricError):
        ssim(np.ones((1, 8, 8)), np.ones((1, 8, 8)))


def test_ssim_identity():
    x = field()
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_sign_flip_negative():
    # a checkerboard keeps every local mean near zero, so only the structure term flips sign
    i, j = np.indices((16, 8))
    x = np.where((i + j) % 2 == 0, 1.0, -1.0)[None, None]
    assert ssim(-x, x) < -0.9


def test_ssim_matches_loop_oracle():
    a, b = field(4, (1, 2, 12, 9)), field(5, (1, 2, 12, 9))
    rng_ = b.max() - b.min()
    w = gaussian_window(7, 1.5)
    expected = np.mean([ssim_oracle(a[0, c], b[0, c], rng_, w) for c in range(2)])
    assert abs(ssim(a, b, rng_) - expected) < 1e-12


def test_ssim_agrees_with_skimage_at_its_window():
    skm = pytest.importorskip("skimage.metrics")
    a, b = field(6, (32, 32)), field(7, (32, 32))
    b = 0.6 * a + 0.4 * b
    ref = skm.structural_similarity(a, b, data_range=4.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
    # skimage truncates its Gaussian at 3.5 sigma, i.e. an 11x11 window
    assert abs(ssim(a, b, 4.0, window=11, sigma=1.5) - ref) < 1e-10


def test_ssim_small_field_rejected():
    with pytest.raises(MetricError):
        ssim(np.ones((1, 5, 5)), np.arange(25.0).reshape(1, 5, 5))


def test_field_metrics_keys():
    x = field()
    m = field_metrics(x + 0.1, x)
    assert set(m) == {"rrmse", "ssim", "psnr"}


# -- density and realism ------------------------------------------------------------


def test_density_coincident_point():
    h = np.array([1.0, 2.0, 3.0])
    assert latent_density(h, h[None]) == 1.0


def test_density_at_sigma_root_two():
    g = np.zeros(4)
    pt = np.zeros(4)
    pt[0] = 20 * math.sqrt(2)
    assert abs(latent_density(g, pt[None], 20.0) - math.exp(-1)) < 1e-9


def test_density_two_points():
    g = np.zeros(3)
    ground = np.array([[0.0, 0, 0], [1e9, 0, 0]])
    assert abs(latent_density(g, ground) - 0.5) < 1e-9


def test_density_range_and_batching():
    rng = np.random.default_rng(8)
    ground = rng.normal(size=(30, 5)) * 10
    hs = rng.normal(size=(7, 5)) * 10
    batch = latent_density(hs, ground)
    assert np.all((batch > 0) & (batch <= 1))
    np.testing.assert_allclose(batch, [latent_density(h, ground) for h in hs], rtol=0, atol=0)


def brute_realism(h, ground, k, eps=1e-12):
    best = -math.inf
    for i, hi in enumerate(ground):
        d = sorted(math.dist(hi, hj) for j, hj in enumerate(ground) if j != i)
        best = max(best, d[k - 1] / max(math.dist(h, hi), eps))
    return best


def test_realism_coincident_hits_clamp():
    ground = np.arange(12.0)[:, None]
    s = realism_score(ground[3], ground, k=5)
    assert math.isfinite(s) and s > 1e11


def test_realism_lattice_at_radius():
    ground = np.arange(10.0)[:, None]
    h = np.array([-1.0])
    s = realism_score(h, ground, k=1)
    assert s >= 1
    assert abs(s - brute_realism(h, ground, 1)) < 1e-9
    assert abs(s - 1.0) < 1e-9


def test_realism_identical_ground_is_zero():
    ground = np.ones((8, 3))
    assert realism_score(np.zeros(3), ground, k=5) == 0.0


def test_realism_brute_force():
    rng = np.random.default_rng(9)
    ground = rng.normal(size=(25, 4))
    for h in rng.normal(size=(5, 4)):
        assert abs(realism_score(h, ground, 5) - brute_realism(h, ground, 5)) < 1e-9


def test_realism_needs_more_than_k_points():
    with pytest.raises(ValueError):
        realism_score(np.zeros(2), np.ones((5, 2)), k=5)
    with pytest.raises(ValueError):
        knn_radii(np.ones((3, 2)), k=5)


def test_realism_translation_invariant():
    rng = np.random.default_rng(10)
    ground, h, shift = rng.normal(size=(20, 3)), rng.normal(size=3), rng.normal(size=3) * 5
    assert realism_score(h + shift, ground + shift, 5) == pytest.approx(realism_score(h, ground, 5), rel=1e-12)


# -- smoothness -----------------------------------------------------------------------


def test_smoothness_constant():
    r = smoothness_report(np.ones((6, 4)))
    assert r["temporal_mean"] == 0 and r["cycle_mean"] == 0


def test_smoothness_linear_motion():
    v = np.array([1.0, -2.0, 0.5])
    e = np.arange(8)[:, None] * v
    r = smoothness_report(e)
    np.testing.assert_allclose(r["temporal"], v @ v)
    np.testing.assert_allclose(r["cycle"], 0, atol=1e-12)


def test_smoothness_quadratic_trajectory():
    e = np.zeros((4, 3))
    e[:, 0] = np.arange(4) ** 2
    r = smoothness_report(e)
    assert r["temporal"].tolist() == [1.0, 9.0, 25.0]
    assert r["cycle"].tolist() == [4.0, 4.0]


def test_smoothness_needs_three_points():
    with pytest.raises(ValueError):
        smoothness_report(np.zeros((2, 3)))


def test_smoothness_translation_invariant():
    rng = np.random.default_rng(11)
    e = rng.normal(size=(16, 5))
    shift = np.full(5, 2.0)  # exactly representable, so the shift cancels bit for bit
    a, b = smoothness_report(e), smoothness_report(e + shift)
    assert a["temporal_mean"] == pytest.approx(b["temporal_mean"], rel=1e-12)
    assert a["cycle_mean"] == pytest.approx(b["cycle_mean"], rel=1e-12)


def test_smoothness_reports_rows():
    rows = smoothness_reports(np.random.default_rng(0).normal(size=(10, 3)), {"task": "x"})
    assert [r.name for r in rows] == ["temporal_distance", "cycle_distance"]
    assert all(r.std >= 0 for r in rows)


# -- std protocol, reports ---------------------------------------------------------------


def test_latent_std_two_pass_oracle():
    s = np.random.default_rng(12).normal(size=(20, 6))
    mean = s.sum(axis=0) / len(s)
    var = ((s - mean) ** 2).sum(axis=0) / len(s)
    assert abs(latent_std(s) - np.sqrt(var).mean()) < 1e-10


def test_report_validation():
    with pytest.raises(MetricError):
        MetricReport("x", float("nan"))
    with pytest.raises(MetricError):
        MetricReport("x", 1.0, -0.1)


def test_write_reports(tmp_path):
    rows = [MetricReport("a", 1.0, 0.5, {"task": "t"}), MetricReport("b", 2.0)]
    j, c = write_reports(rows, tmp_path / "out" / "r")
    assert json.loads(j.read_text())[0]["name"] == "a"
    assert c.read_text().splitlines()[0].startswith("name,value,std")


# -- projections ----------------------------------------------------------------------------


def test_pca_of_planar_points_is_lossless():
    rng = np.random.default_rng(13)
    basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
    pts = rng.normal(size=(40, 2)) @ basis.T + 3.0
    proj, comps, _ = pca_project(pts)
    recon = proj @ comps + pts.mean(axis=0)
    assert np.max(np.abs(recon - pts)) < 1e-10


def test_pca_matches_eigendecomposition():
    rng = np.random.default_rng(14)
    e = rng.normal(size=(50, 5)) * np.array([5, 3, 1, 0.5, 0.1])
    proj, comps, var = pca_project(e)
    centered = e - e.mean(axis=0)
    vals, vecs = np.linalg.eigh(np.cov(centered.T))
    order = np.argsort(vals)[::-1][:2]
    ref = centered @ vecs[:, order]
    for k in range(2):
        sign = np.sign(ref[:, k] @ proj[:, k])
        assert np.max(np.abs(proj[:, k] - sign * ref[:, k])) < 1e-8
    np.testing.assert_allclose(var, vals[order], rtol=1e-10)


def test_pca_sign_convention():
    e = np.random.default_rng(15).normal(size=(30, 4))
    _, comps, _ = pca_project(e)
    for c in comps:
        assert c[np.abs(c).argmax()] > 0
    _, comps2, _ = pca_project(e.copy())
    np.testing.assert_array_equal(comps, comps2)


def test_window_mean_of_identical_points():
    pts = np.tile([[1.5, -2.0]], (20, 1))
    means, nexts = window_summaries(pts, window=5)
    np.testing.assert_array_equal(means, np.tile([[1.5, -2.0]], (len(means), 1)))


def test_projection_plot_writes_png(tmp_path):
    e = np.cumsum(np.random.default_rng(16).normal(size=(40, 6)), axis=0)
    out = latent_projection_plot(e, tmp_path / "pca.png", "pca")
    assert out.exists() and out.read_bytes()[:4] == b"\x89PNG"
    with pytest.raises(ValueError):
        latent_projection_plot(e[:1], tmp_path / "x.png")


def test_tsne_plot_runs(tmp_path):
    e = np.cumsum(np.random.default_rng(17).normal(size=(30, 6)), axis=0)
    assert latent_projection_plot(e, tmp_path / "tsne.png", "tsne").exists()
