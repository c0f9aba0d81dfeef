"""Turn an :class:`ExperimentConfig` into problems, chains, model files and reports.

All randomness derives from the master seed through fixed stream ids, so a
(config, seed) pair determines every output.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chain import DeterministicLayer, LangevinLayer, MCMCLayer, SNFChain, sample_chain
from .config import ConfigError, ExperimentConfig
from .evaluation import importance_resample, mh_baseline
from .flows import ConditionalCouplingFlow
from .kernels import GaussianDensity, LangevinConfig, MHConfig
from .problems import (BoundCondition, LinearGaussianProblem, MixedNoiseProblem, RelaxedUniformPrior,
                       analytic_posterior, rmse, surrogate_fit, synthetic_forward_map)

STREAM_PROBLEM, STREAM_INIT, STREAM_TRAIN, STREAM_EVAL, STREAM_SAMPLE, STREAM_BASELINE = range(6)


def stream(seed, stream_id):
    return np.random.default_rng([int(seed), int(stream_id)])


@dataclass
class ProblemBundle:
    problem: object
    surrogate_rmse: float | None = None

    @property
    def kind(self):
        return "linear_gaussian" if isinstance(self.problem, LinearGaussianProblem) else "mixed_noise"


def build_problem(cfg: ExperimentConfig, surrogate_params=None) -> ProblemBundle:
    """Construct the inverse problem. For ``mixed_noise`` the surrogate network is
    fitted to the synthetic forward map unless ``surrogate_params`` are given.
    """
    p = cfg.problem
    rng = stream(cfg.seed, STREAM_PROBLEM)
    if p["type"] == "linear_gaussian":
        prob = LinearGaussianProblem.mixture_benchmark(p["dim"], p["n_components"], p["component_var"],
                                                 p["noise_var"], p["scale"], rng=rng)
        return ProblemBundle(prob)
    true_map = synthetic_forward_map(p["dim"], p["obs_dim"], p["map_hidden"],
                                     seed=int(rng.integers(2 ** 31)), offset=p["map_offset"],
                                     gain=p["map_gain"])
    x = rng.uniform(-1.0, 1.0, size=(p["surrogate_samples"], p["dim"]))
    fx = true_map.forward(x)
    if surrogate_params is None:
        net, err = surrogate_fit(x, fx, p["surrogate_hidden"], rng=rng, steps=p["surrogate_steps"])
    else:
        from .nn import net_init
        net = net_init([p["dim"], *p["surrogate_hidden"], p["obs_dim"]], seed=0)
        if np.asarray(surrogate_params).shape != (net.n_params,):
            raise ConfigError("model/config mismatch: surrogate size differs from the config")
        net.set_params(surrogate_params)
        err = rmse(net, x, fx)
    prior = RelaxedUniformPrior(p["dim"], p["alpha"])
    return ProblemBundle(MixedNoiseProblem(net, p["a"], p["b"], prior), err)


def build_chain(cfg: ExperimentConfig, bundle: ProblemBundle) -> SNFChain:
    prob = bundle.problem
    rng = stream(cfg.seed, STREAM_INIT)
    T = cfg.chain["interp_steps"]
    layers = []
    for lc in cfg.layers:
        kind = lc["type"]
        if kind == "deterministic":
            flow = ConditionalCouplingFlow.create(prob.dim, prob.obs_dim, lc["n_blocks"],
                                                  lc["hidden"], rng=rng, clamp=lc["clamp"])
            layers.append(DeterministicLayer(flow))
        elif kind == "langevin":
            layers.append(LangevinLayer(LangevinConfig(lc["a1"], lc["a2"], lc["n_steps"]),
                                        lc["t"] / T))
        elif kind == "mala":
            mh = MHConfig("mala", a1=lc["a1"], a2=lc["a2"], n_steps=lc["n_steps"])
            layers.append(MCMCLayer(mh, lc["t"] / T))
        else:
            layers.append(MCMCLayer(MHConfig("rw", sigma=lc["sigma"], n_steps=lc["n_steps"]),
                                    lc["t"] / T))
    return SNFChain(layers, GaussianDensity.standard(prob.dim), prob.posterior(),
                    cond_dim=prob.obs_dim)


def _problem_arrays(bundle: ProblemBundle):
    prob = bundle.problem
    if bundle.kind == "linear_gaussian":
        return {"problem_A": prob.A, "problem_means": prob.prior.means}
    return {"problem_surrogate": prob.net.get_params()}


def save_model(path, cfg: ExperimentConfig, bundle: ProblemBundle, chain: SNFChain) -> str:
    """Write the model file and return its SHA-256."""
    arrays = {"config": np.array(cfg.to_ini()), "params": chain.get_params(),
              **_problem_arrays(bundle)}
    for i, flow in enumerate(chain.flows):
        arrays[f"perm_{i}"] = np.array(flow.permutations)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path):
    """Returns ``(cfg, bundle, chain, sha256)``; raises on any mismatch."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    data_bytes = path.read_bytes()
    with np.load(io.BytesIO(data_bytes)) as data:
        cfg = ExperimentConfig.from_string(str(data["config"]))
        bundle = build_problem(cfg, data["problem_surrogate"] if "problem_surrogate" in data else None)
        for key, arr in _problem_arrays(bundle).items():
            if key not in data or not np.array_equal(data[key], arr):
                raise ConfigError(f"model/config mismatch: {key} differs from the rebuilt problem")
        chain = build_chain(cfg, bundle)
        params = data["params"]
        if params.shape != (chain.n_params,):
            raise ConfigError(f"model/config mismatch: {params.size} parameters stored, "
                              f"chain needs {chain.n_params}")
        for i, flow in enumerate(chain.flows):
            flow.permutations = [np.asarray(p, dtype=np.int64) for p in data[f"perm_{i}"]]
        chain.set_params(params)
    return cfg, bundle, chain, hashlib.sha256(data_bytes).hexdigest()


def reference_sampler(cfg: ExperimentConfig, bundle: ProblemBundle):
    """``sampler(y, n, rng)``: analytic posterior when available, else the MH baseline."""
    prob = bundle.problem
    if bundle.kind == "linear_gaussian":
        return lambda y, n, rng: analytic_posterior(prob, y).sample(n, rng)
    ev = cfg.evaluation
    mh = MHConfig("rw", sigma=ev["baseline_sigma"])

    def sampler(y, n, rng):
        target = BoundCondition(prob.posterior(), y)
        x0 = importance_resample(prob.prior, target, n, rng, pool=ev["baseline_pool"])
        return mh_baseline(target, x0, ev["baseline_steps"], mh, rng)

    return sampler


def model_sampler(chain: SNFChain):
    return lambda y, n, rng: sample_chain(chain, n, rng, np.asarray(y)[None, :])


def evaluation_observations(cfg: ExperimentConfig, bundle: ProblemBundle):
    _, ys = bundle.problem.sample_joint(cfg.evaluation["n_y"], stream(cfg.seed, STREAM_EVAL))
    return ys


@dataclass
class OracleReport:
    tv_errors: np.ndarray
    tolerance: float
    prior_only: bool

    @property
    def passed(self) -> bool:
        return bool(np.all(self.tv_errors <= self.tolerance))


def grid_posterior_tv(problem: LinearGaussianProblem, y, points_per_axis=None, width=9.0):
    """Total variation between the closed-form posterior and grid-quadrature Bayes.

    The grid covers every prior component out to ``width`` standard deviations;
    the closed form is evaluated with its own normalization, the quadrature
    side is normalized on the grid.
    """
    d = problem.dim
    if d > 3:
        raise ValueError(f"grid quadrature needs dim <= 3, got {d}")
    if points_per_axis is None:
        points_per_axis = {1: 4000, 2: 600, 3: 120}[d]
    prior = problem.prior
    sd = np.sqrt(np.max([np.diag(c).max() for c in prior.covs]))
    lo = prior.means.min(axis=0) - width * sd
    hi = prior.means.max(axis=0) + width * sd
    axes = [np.linspace(l, h, points_per_axis) for l, h in zip(lo, hi)]
    cell = np.prod([a[1] - a[0] for a in axes])
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    y = np.asarray(y, dtype=np.float64).ravel()
    log_bayes = prior.log_prob(grid) + problem.log_likelihood(grid, y[None, :])
    bayes = np.exp(log_bayes - log_bayes.max())
    bayes /= bayes.sum()
    closed = np.exp(analytic_posterior(problem, y).log_prob(grid)) * cell
    return 0.5 * float(np.abs(closed - bayes).sum())


def oracle_check(cfg: ExperimentConfig, n_cases=20, tolerance=1e-4) -> OracleReport:
    """Closed-form posterior vs quadrature for ``n_cases`` observations of the config's problem."""
    if cfg.problem["type"] != "linear_gaussian":
        raise ConfigError("oracle-check is not applicable: it needs a linear_gaussian problem "
                          "with a Gaussian-mixture prior")
    bundle = build_problem(cfg)
    prob = bundle.problem
    _, ys = prob.sample_joint(n_cases, stream(cfg.seed, STREAM_EVAL))
    errors = np.array([grid_posterior_tv(prob, y) for y in ys])
    return OracleReport(errors, tolerance, prior_only=not np.any(prob.A))
