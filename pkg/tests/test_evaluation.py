import csv
import itertools

import numpy as np
import pytest

from snflow.evaluation import (CubeHistogram, EvalResult, SampleCloud, binned_kl,
                               binned_kl_report, evaluate_run, importance_resample, mh_baseline,
                               noise_floor, reversibility_test, sliced_energy_test, wasserstein1,
                               write_metrics_csv)
from snflow.kernels import DensityModel, GaussianDensity, MHConfig


def brute_force_w1(a, b):
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    n = len(a)
    return min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def test_w1_identical_clouds_is_zero(rng):
    a = rng.standard_normal((30, 3))
    assert wasserstein1(a, a[rng.permutation(30)]) == pytest.approx(0.0, abs=1e-15)


def test_w1_crossing_pairs():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 1.0], [0.0, 1.0]])
    # straight matching costs 1 each, crossing costs sqrt(2) each
    assert wasserstein1(a, b) == pytest.approx(1.0)


@pytest.mark.parametrize("n", [2, 4, 7])
def test_w1_matches_brute_force(rng, n):
    a, b = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
    assert wasserstein1(a, b) == pytest.approx(brute_force_w1(a, b), abs=1e-12)


def test_w1_one_dimensional_sorted_coupling(rng):
    a, b = rng.standard_normal((500, 1)), rng.exponential(size=(500, 1))
    expected = np.mean(np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0])))
    assert wasserstein1(a, b) == pytest.approx(expected, abs=1e-10)


def test_w1_metric_properties(rng):
    a, b, c = (rng.standard_normal((40, 3)) + s for s in (0.0, 0.5, -0.3))
    assert wasserstein1(a, b) == wasserstein1(b, a)
    assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-9


def test_w1_unequal_sizes_uses_transport_lp(rng):
    a = rng.standard_normal((3, 2))
    b = rng.standard_normal((6, 2))
    # duplicating every point of a gives the same measure
    assert wasserstein1(a, b) == pytest.approx(wasserstein1(np.repeat(a, 2, axis=0), b), abs=1e-9)


def test_w1_weighted_point_masses():
    a = SampleCloud(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]))
    b = SampleCloud(np.array([[0.0]]))
    assert wasserstein1(a, b) == pytest.approx(0.75)


def test_w1_cap(rng):
    with pytest.raises(ValueError, match="subsample"):
        wasserstein1(rng.standard_normal((11, 2)), rng.standard_normal((11, 2)), cap=10)


def test_sample_cloud_validation():
    with pytest.raises(ValueError):
        SampleCloud(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        SampleCloud(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        SampleCloud(np.zeros((2, 1)), np.array([0.5, 0.4]))


def test_histogram_counts_conserve_mass(rng):
    pts = rng.uniform(-1.5, 1.5, (1000, 3))
    h = CubeHistogram.from_points(pts, resolution=10)
    assert h.counts.sum() == 1000
    assert h.overflow == np.sum(np.any(np.abs(pts) > 1, axis=1))
    edge = CubeHistogram.from_points(np.array([[1.0, 1.0, 1.0]]), resolution=10)
    assert edge.overflow == 0


def test_histogram_dump(tmp_path, rng):
    h = CubeHistogram.from_points(rng.uniform(-1, 1, (50, 2)), resolution=4)
    h.save(tmp_path / "h.npz")
    with np.load(tmp_path / "h.npz") as data:
        np.testing.assert_array_equal(data["counts"], h.counts)


def test_binned_kl_identical_is_zero(rng):
    pts = rng.uniform(-1, 1, (2000, 3))
    assert binned_kl(pts, pts.copy()) == 0.0


@pytest.mark.parametrize("m", [2, 5, 8])
def test_binned_kl_point_mass_against_uniform(m):
    # cells along the first axis of a 1-D grid with 8 cells on [0, 8]
    centers = np.arange(8) + 0.5
    ref = np.full((10, 1), centers[0])
    cand = np.repeat(centers[:m], 7)[:, None]
    rep = binned_kl_report(ref, cand, lo=0.0, hi=8.0, resolution=8)
    assert rep.value == pytest.approx(np.log(m), abs=1e-15)
    assert not rep.smoothed and rep.coverage == 1.0


def test_binned_kl_smoothing_keeps_value_finite():
    ref = np.array([[0.1], [0.6]])
    cand = np.array([[0.1], [0.1]])
    rep = binned_kl_report(ref, cand, lo=0.0, hi=1.0, resolution=2)
    assert rep.smoothed
    assert rep.coverage == 0.5
    # candidate counts (2 + 1/2, 0 + 1/2) on the union of supports
    expected = 0.5 * np.log(0.5 / (2.5 / 3)) + 0.5 * np.log(0.5 / (0.5 / 3))
    assert rep.value == pytest.approx(expected)


def test_binned_kl_nonnegative(rng):
    for _ in range(5):
        a = rng.normal(0, 0.4, (3000, 2))
        b = rng.normal(0.1, 0.5, (3000, 2))
        assert binned_kl(a, b, resolution=20) >= 0.0


def test_binned_kl_approaches_gaussian_kl(rng):
    m1, s1, m2, s2 = 0.0, 1.0, 0.7, 1.3
    a = rng.normal(m1, s1, (2_000_000, 1))
    b = rng.normal(m2, s2, (2_000_000, 1))
    exact = np.log(s2 / s1) + (s1 ** 2 + (m1 - m2) ** 2) / (2 * s2 ** 2) - 0.5
    approx = binned_kl(a, b, lo=-6.0, hi=6.0, resolution=200)
    assert approx == pytest.approx(exact, rel=0.1)


def test_binned_kl_empty_cloud():
    with pytest.raises(ValueError):
        binned_kl(np.zeros((0, 2)), np.zeros((3, 2)))


def test_mh_baseline_zero_steps_returns_start(rng):
    x0 = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(mh_baseline(GaussianDensity.standard(2), x0, 0, MHConfig(), rng),
                                  x0)


def test_mh_baseline_on_flat_target_is_a_random_walk(rng):
    class Flat(DensityModel):
        dim = 1

        def log_prob(self, x, y=None):
            return np.zeros(np.atleast_2d(x).shape[0])

    out = mh_baseline(Flat(), np.zeros((20_000, 1)), 25, MHConfig("rw", sigma=0.2), rng)
    # every proposal is accepted: N(0, 25 sigma^2)
    assert out.var() == pytest.approx(25 * 0.04, rel=0.05)


def test_mh_baseline_gaussian_moments(rng):
    target = GaussianDensity(np.array([1.5]), np.array([[0.64]]))
    n = 10_000
    out = mh_baseline(target, np.zeros((n, 1)), 1000, MHConfig("rw", sigma=1.0), rng)[:, 0]
    assert abs(out.mean() - 1.5) < 3 * 0.8 / np.sqrt(n)
    var_se = 0.64 * np.sqrt(2.0 / n)
    assert abs(out.var() - 0.64) < 3 * var_se


def test_importance_resample_targets_posterior(rng):
    prior = GaussianDensity(np.zeros(1), np.eye(1) * 4.0)
    target = GaussianDensity(np.array([1.0]), np.eye(1) * 0.25)
    x = importance_resample(prior, target, 5000, rng, pool=40)
    assert x.mean() == pytest.approx(1.0, abs=0.05)
    assert x.std() == pytest.approx(0.5, abs=0.05)


def test_exact_sampler_sits_at_noise_floor(rng):
    sampler = lambda y, n, r: r.standard_normal((n, 2)) + y[:2]
    ys = rng.standard_normal((5, 2))
    res = evaluate_run(sampler, sampler, ys, "w1", 300, rng)
    floor = noise_floor(sampler, ys, "w1", 300, rng)
    assert res.mean == pytest.approx(floor.mean, rel=0.25)
    shifted = evaluate_run(lambda y, n, r: sampler(y, n, r) + 1.0, sampler, ys, "w1", 300, rng)
    assert shifted.mean > 3 * floor.mean


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(path, {"w1": EvalResult("w1", np.array([1.0, 3.0]))})
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["y_index", "metric", "value"]
    assert rows[1:3] == [["0", "w1", "1.0"], ["1", "w1", "3.0"]]
    assert rows[3] == ["mean", "w1", "2.0"] and rows[4] == ["std", "w1", "1.0"]


def test_energy_test_power_and_size(rng):
    a = rng.standard_normal((2000, 2))
    b = rng.standard_normal((2000, 2))
    assert sliced_energy_test(a, b, rng, n_perm=99)[1] > 0.01
    assert sliced_energy_test(a, b + 0.3, rng, n_perm=99)[1] <= 0.02


def test_reversibility_test_on_exchangeable_pairs(rng):
    x = rng.standard_normal((4000, 1))
    x_next = 0.8 * x + 0.6 * rng.standard_normal((4000, 1))
    assert reversibility_test(x, x_next, rng, n_perm=99)[1] > 0.01
    drift = x + 0.5
    assert reversibility_test(x, drift, rng, n_perm=99)[1] <= 0.02
