"""Reference samplers and the two sample-cloud metrics: exact W1 and binned KL.

Also holds the sliced energy-distance permutation test used to check that a
kernel is reversible: under detailed balance the pairs ``(X, X')`` and
``(X', X)`` have the same law.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .kernels import MHConfig, mh_step_carry

DEFAULT_CAP = 2000


@dataclass
class SampleCloud:
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[0] == 0:
            raise ValueError("empty sample cloud")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("sample cloud has non-finite coordinates")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.points.shape[0],) or np.any(w <= 0):
                raise ValueError("weights must be positive, one per point")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"weights sum to {w.sum()}, expected 1")
            self.weights = w

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def uniform(self) -> bool:
        return self.weights is None

    def mass(self):
        return np.full(self.n, 1.0 / self.n) if self.weights is None else self.weights


def _cloud(c):
    return c if isinstance(c, SampleCloud) else SampleCloud(c)


def wasserstein1(a, b, cap=DEFAULT_CAP) -> float:
    """Exact W1 with Euclidean ground cost.

    Equal-size uniform clouds are solved as an assignment problem, anything
    else as the transport linear program. Clouds above ``cap`` points are
    refused: subsample and average over several subsamples instead.
    """
    a, b = _cloud(a), _cloud(b)
    if a.points.shape[1] != b.points.shape[1]:
        raise ValueError("clouds live in different dimensions")
    if max(a.n, b.n) > cap:
        raise ValueError(f"cloud of {max(a.n, b.n)} points exceeds the cap of {cap}; "
                         "subsample both clouds and average W1 over repeats")
    cost = cdist(a.points, b.points)
    if a.uniform and b.uniform and a.n == b.n:
        rows, cols = linear_sum_assignment(cost)
        # exactly rounded sum, so W1(a, b) == W1(b, a) bit for bit
        return math.fsum(cost[rows, cols]) / a.n
    m, n = a.n, b.n
    # plan variables pi_ij, row-major; row sums = mass_a, column sums = mass_b
    a_rows = np.kron(np.eye(m), np.ones((1, n)))
    a_cols = np.kron(np.ones((1, m)), np.eye(n))
    res = linprog(cost.ravel(), A_eq=np.vstack([a_rows, a_cols]),
                  b_eq=np.concatenate([a.mass(), b.mass()]), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


@dataclass
class CubeHistogram:
    """Counts on a regular grid over ``[lo, hi]^d``; the last cell collects out-of-box points."""

    lo: float
    hi: float
    resolution: int
    dim: int
    counts: np.ndarray
    total: int

    @classmethod
    def from_points(cls, points, lo=-1.0, hi=1.0, resolution=50):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.shape[0] == 0:
            raise ValueError("empty sample cloud")
        if hi <= lo or resolution < 1:
            raise ValueError("invalid grid")
        n, d = points.shape
        n_cells = resolution ** d
        idx = np.floor((points - lo) / (hi - lo) * resolution).astype(np.int64)
        # the upper face belongs to the last cell
        idx = np.where(points == hi, resolution - 1, idx)
        inside = np.all((idx >= 0) & (idx < resolution), axis=1)
        flat = np.full(n, n_cells, dtype=np.int64)
        flat[inside] = np.ravel_multi_index(idx[inside].T, (resolution,) * d)
        counts = np.bincount(flat, minlength=n_cells + 1)
        return cls(float(lo), float(hi), int(resolution), d, counts, n)

    @property
    def overflow(self) -> int:
        return int(self.counts[-1])

    def probabilities(self):
        return self.counts / self.total

    def save(self, path) -> None:
        np.savez_compressed(Path(path), lo=self.lo, hi=self.hi, resolution=self.resolution,
                            dim=self.dim, counts=self.counts)


@dataclass
class BinnedKL:
    value: float
    coverage: float  # reference mass in cells the candidate reached, before smoothing
    smoothed: bool


def binned_kl_report(reference, candidate, lo=-1.0, hi=1.0, resolution=50) -> BinnedKL:
    """``KL(mu_ref, mu_cand)`` of cell frequencies, with the zero-cell handling made explicit.

    If some cell holds reference mass but no candidate point, 1/2 is added to
    the candidate count of every cell occupied by either cloud before
    normalizing, so the value stays finite.
    """
    ref = reference.points if isinstance(reference, SampleCloud) else reference
    cand = candidate.points if isinstance(candidate, SampleCloud) else candidate
    h_ref = CubeHistogram.from_points(ref, lo, hi, resolution)
    h_cand = CubeHistogram.from_points(cand, lo, hi, resolution)
    if h_ref.dim != h_cand.dim:
        raise ValueError("clouds live in different dimensions")
    r = h_ref.counts.astype(np.float64)
    c = h_cand.counts.astype(np.float64)
    occupied = r > 0
    coverage = float(r[occupied & (c > 0)].sum() / r.sum())
    smoothed = bool(np.any(occupied & (c == 0)))
    if smoothed:
        c = np.where(occupied | (c > 0), c + 0.5, 0.0)
    p = r[occupied] / r.sum()
    q = c[occupied] / c.sum()
    return BinnedKL(float(np.sum(p * np.log(p / q))), coverage, smoothed)


def binned_kl(reference, candidate, lo=-1.0, hi=1.0, resolution=50) -> float:
    return binned_kl_report(reference, candidate, lo, hi, resolution).value


def mh_baseline(target, x0, n_steps, cfg: MHConfig, rng, y=None):
    """Run independent chains (one per row of ``x0``) and return their final states."""
    rng = np.random.default_rng(rng)
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    carry = None
    for _ in range(n_steps):
        x, _, carry = mh_step_carry(x, target, cfg, rng, y, carry=carry)
    return x


def importance_resample(prior, target, n, rng, y=None, pool=20):
    """Draw ``pool * n`` prior samples and resample ``n`` of them with weights ``target/prior``."""
    rng = np.random.default_rng(rng)
    cand = prior.sample(pool * n, rng)
    logw = target.log_prob(cand, y) - prior.log_prob(cand)
    logw = np.where(np.isfinite(logw), logw, -np.inf)
    w = np.exp(logw - logw.max())
    idx = rng.choice(cand.shape[0], size=n, p=w / w.sum())
    return cand[idx]


@dataclass
class EvalResult:
    metric: str
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def evaluate_run(model_sampler, reference_sampler, ys, metric="w1", n_samples=1000, rng=None,
                 resolution=50, cap=DEFAULT_CAP):
    """Metric between model and reference samples for each observation in ``ys``.

    Both samplers are called as ``sampler(y, n, rng)`` with ``y`` of shape
    ``(d_y,)``. ``metric`` is ``"w1"`` or ``"binned_kl"`` (reference first).
    """
    rng = np.random.default_rng(rng)
    values = []
    for y in np.atleast_2d(ys):
        model = model_sampler(y, n_samples, rng)
        ref = reference_sampler(y, n_samples, rng)
        values.append(_metric(metric, ref, model, resolution, cap))
    return EvalResult(metric, np.asarray(values))


def noise_floor(reference_sampler, ys, metric="w1", n_samples=1000, rng=None, resolution=50,
                cap=DEFAULT_CAP):
    """The metric between two independent reference clouds, per observation."""
    return evaluate_run(reference_sampler, reference_sampler, ys, metric, n_samples, rng,
                        resolution, cap)


def _metric(metric, ref, model, resolution, cap):
    if metric == "w1":
        return wasserstein1(ref, model, cap)
    if metric == "binned_kl":
        return binned_kl(ref, model, resolution=resolution)
    raise ValueError(f"unknown metric {metric!r}")


def write_metrics_csv(path, results: dict) -> None:
    """Rows ``y_index, metric, value`` then one ``mean`` and one ``std`` row per metric."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y_index", "metric", "value"])
        for name, res in results.items():
            for i, v in enumerate(res.values):
                w.writerow([i, name, repr(float(v))])
        for name, res in results.items():
            w.writerow(["mean", name, repr(res.mean)])
            w.writerow(["std", name, repr(res.std)])


def _energy_1d(sorted_labels, gaps, m1, m2):
    # 2 * integral of (F - G)^2 over the pooled sorted sample, one row per projection
    seen_a = np.cumsum(sorted_labels, axis=1, dtype=np.int32)[:, :-1]
    seen = np.arange(1, sorted_labels.shape[1])
    diff = seen_a * (1.0 / m1 + 1.0 / m2) - seen / m2
    return 2.0 * np.einsum("ij,ij,ij->i", diff, diff, gaps)


def sliced_energy_test(a, b, rng, n_proj=32, n_perm=199):
    """Permutation test of ``law(a) == law(b)`` on the mean 1-D energy distance
    over random projections. Returns ``(statistic, p_value)``.
    """
    rng = np.random.default_rng(rng)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    m1, m2 = a.shape[0], b.shape[0]
    pooled = np.vstack([a, b])
    dirs = rng.standard_normal((n_proj, pooled.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj = dirs @ pooled.T
    order = np.argsort(proj, axis=1)
    gaps = np.diff(np.take_along_axis(proj, order, axis=1), axis=1)
    labels = np.zeros(m1 + m2, dtype=np.int8)
    labels[:m1] = 1

    def stat(lab):
        return float(np.mean(_energy_1d(lab[order], gaps, m1, m2)))

    observed = stat(labels)
    exceed = 0
    for _ in range(n_perm):
        if stat(rng.permutation(labels)) >= observed:
            exceed += 1
    return observed, (exceed + 1) / (n_perm + 1)


def reversibility_test(x, x_next, rng, n_proj=32, n_perm=199):
    """Compare ``(X, X')`` from one half of the pairs with ``(X', X)`` from the other half."""
    x = np.atleast_2d(x)
    x_next = np.atleast_2d(x_next)
    h = x.shape[0] // 2
    fwd = np.hstack([x[:h], x_next[:h]])
    bwd = np.hstack([x_next[h:2 * h], x[h:2 * h]])
    return sliced_energy_test(fwd, bwd, rng, n_proj, n_perm)
