"""Inverse problems ``y = F(x) + noise`` with their priors and posteriors."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .kernels import DensityModel, fd_hvp
from .nn import AdamState, DenseNet, adam_step, net_init

LOG_2PI = np.log(2.0 * np.pi)


class GaussianMixture(DensityModel):
    """``sum_k w_k N(m_k, S_k)``; weights are normalized on construction."""

    def __init__(self, weights, means, covs):
        w = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, d = self.means.shape
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim == 2:  # diagonal variances per component
            covs = np.stack([np.diag(c) for c in covs])
        if w.shape != (k,) or covs.shape != (k, d, d) or np.any(w <= 0):
            raise ValueError("mixture needs K positive weights, K means and K (d, d) covariances")
        self.weights = w / w.sum()
        self.covs = covs
        self.dim = d
        self.chols = np.linalg.cholesky(covs)
        self.precisions = np.linalg.inv(covs)
        logdets = 2.0 * np.log(np.diagonal(self.chols, axis1=1, axis2=2)).sum(axis=1)
        self.log_coef = np.log(self.weights) - 0.5 * (d * LOG_2PI + logdets)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _component_terms(self, x):
        x = np.atleast_2d(x)
        r = x[:, None, :] - self.means[None]                   # (n, K, d)
        pr = np.einsum("kij,nkj->nki", self.precisions, r)      # P_k (x - m_k)
        a = self.log_coef - 0.5 * np.einsum("nki,nki->nk", r, pr)
        return a, pr

    def component_log_probs(self, x):
        return self._component_terms(x)[0]

    def log_prob(self, x, y=None):
        return logsumexp(self._component_terms(x)[0], axis=1)

    def grad(self, x, y=None):
        a, pr = self._component_terms(x)
        resp = np.exp(a - logsumexp(a, axis=1, keepdims=True))
        return -np.einsum("nk,nki->ni", resp, pr)

    def hvp(self, x, v, y=None):
        """Analytic Hessian of the log-density applied to ``v``."""
        a, pr = self._component_terms(x)
        v = np.atleast_2d(v)
        resp = np.exp(a - logsumexp(a, axis=1, keepdims=True))
        g_k = -pr
        g = np.einsum("nk,nki->ni", resp, g_k)
        pv = np.einsum("kij,nj->nki", self.precisions, v)
        gv = np.einsum("nki,ni->nk", g_k, v)
        out = np.einsum("nk,nki->ni", resp, -pv + g_k * gv[:, :, None])
        return out - g * np.sum(g * v, axis=1, keepdims=True)

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chols[comp], z)


def mixture_log_density(gm, x):
    return gm.log_prob(x)


def mixture_grad(gm, x):
    return gm.grad(x)


def mixture_hvp(gm, x, v):
    return gm.hvp(x, v)


class RelaxedUniformPrior(DensityModel):
    """Product of ``q(x_i)``: flat on [-1, 1], decaying like ``exp(-alpha dist)`` outside.

    At the kinks ``|x_i| = 1`` the gradient takes the interior value 0.
    """

    def __init__(self, dim, alpha=1000.0):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.dim = int(dim)
        self.alpha = float(alpha)
        self.log_level = np.log(alpha / (2.0 * alpha + 2.0))

    def log_prob(self, x, y=None):
        x = np.atleast_2d(x)
        excess = np.maximum(np.abs(x) - 1.0, 0.0)
        return self.dim * self.log_level - self.alpha * excess.sum(axis=1)

    def grad(self, x, y=None):
        x = np.atleast_2d(x)
        return np.where(np.abs(x) > 1.0, -self.alpha * np.sign(x), 0.0)

    def hvp(self, x, v, y=None):
        return np.zeros_like(np.atleast_2d(v), dtype=np.float64)

    def sample(self, n, rng):
        # mass alpha/(alpha+1) on the box, the rest in two exponential tails
        x = rng.uniform(-1.0, 1.0, size=(n, self.dim))
        tail = rng.uniform(size=(n, self.dim)) < 1.0 / (self.alpha + 1.0)
        out = 1.0 + rng.exponential(1.0 / self.alpha, size=(n, self.dim))
        out *= np.where(rng.uniform(size=(n, self.dim)) < 0.5, -1.0, 1.0)
        return np.where(tail, out, x)


def relaxed_uniform(dim, alpha=1000.0):
    return RelaxedUniformPrior(dim, alpha)


class PosteriorDensity(DensityModel):
    """Unnormalized ``log p(y|x) + log p(x)`` for a batch of observations ``y``."""

    def __init__(self, problem):
        self.problem = problem
        self.dim = problem.dim

    def log_prob(self, x, y=None):
        return self.problem.log_likelihood(x, y) + self.problem.prior.log_prob(x)

    def grad(self, x, y=None):
        return self.problem.grad_log_likelihood(x, y) + self.problem.prior.grad(x)

    def hvp(self, x, v, y=None):
        return self.problem.hvp_log_likelihood(x, v, y) + self.problem.prior.hvp(x, v)


class LinearGaussianProblem:
    """``y = A x + eta`` with ``eta ~ N(0, noise_var I)`` and a Gaussian-mixture prior."""

    def __init__(self, A, noise_var, prior: GaussianMixture):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if noise_var <= 0 or not np.all(np.isfinite(self.A)):
            raise ValueError("need finite A and noise_var > 0")
        if self.A.shape[1] != prior.dim:
            raise ValueError("operator and prior dimensions disagree")
        self.noise_var = float(noise_var)
        self.prior = prior
        self.dim = prior.dim
        self.obs_dim = self.A.shape[0]

    @classmethod
    def mixture_benchmark(cls, dim, n_components=5, component_var=0.01, noise_var=0.05,
                    scale=0.1, rng=None):
        """Diagonal ``A = scale * diag(1/n)``, means uniform on the cube, equal weights."""
        rng = np.random.default_rng(rng)
        means = rng.uniform(-1.0, 1.0, size=(n_components, dim))
        covs = np.stack([component_var * np.eye(dim)] * n_components)
        prior = GaussianMixture(np.ones(n_components), means, covs)
        A = scale * np.diag(1.0 / np.arange(1, dim + 1))
        return cls(A, noise_var, prior)

    def forward(self, x):
        return np.atleast_2d(x) @ self.A.T

    def log_likelihood(self, x, y):
        r = np.atleast_2d(y) - self.forward(x)
        return -0.5 * np.sum(r * r, axis=1) / self.noise_var

    def grad_log_likelihood(self, x, y):
        r = np.atleast_2d(y) - self.forward(x)
        return r @ self.A / self.noise_var

    def hvp_log_likelihood(self, x, v, y):
        return -(np.atleast_2d(v) @ self.A.T) @ self.A / self.noise_var

    def posterior(self) -> PosteriorDensity:
        return PosteriorDensity(self)

    def sample_joint(self, n, rng):
        x = self.prior.sample(n, rng)
        y = self.forward(x) + np.sqrt(self.noise_var) * rng.standard_normal((n, self.obs_dim))
        return x, y


def analytic_posterior(problem: LinearGaussianProblem, y) -> GaussianMixture:
    """Closed-form posterior mixture for a linear operator and Gaussian noise.

    Component weights carry the prior weight: ``w~_k ∝ w_k |S~_k|^(1/2) / |S_k|^(1/2)
    exp((m~_k' S~_k^-1 m~_k - m_k' S_k^-1 m_k) / 2)``.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.all(np.isfinite(y)):
        raise ValueError("observation must be finite")
    prior = problem.prior
    A, b2 = problem.A, problem.noise_var
    ata = A.T @ A / b2
    aty = A.T @ y / b2
    new_means, new_covs, log_w = [], [], []
    for k in range(prior.n_components):
        prec_k = prior.precisions[k]
        post_prec = ata + prec_k
        cov = np.linalg.inv(post_prec)
        cov = 0.5 * (cov + cov.T)
        mean = cov @ (aty + prec_k @ prior.means[k])
        _, logdet_post = np.linalg.slogdet(cov)
        _, logdet_prior = np.linalg.slogdet(prior.covs[k])
        quad = mean @ post_prec @ mean - prior.means[k] @ prec_k @ prior.means[k]
        log_w.append(np.log(prior.weights[k]) + 0.5 * (logdet_post - logdet_prior) + 0.5 * quad)
        new_means.append(mean)
        new_covs.append(cov)
    log_w = np.asarray(log_w)
    w = np.exp(log_w - log_w.max())
    return GaussianMixture(w, np.array(new_means), np.array(new_covs))


def posterior_log_density(problem, y=None) -> DensityModel:
    """Unnormalized posterior; pass ``y`` to the returned model's methods, or bind one here."""
    post = problem.posterior()
    if y is None:
        return post
    return BoundCondition(post, y)


class BoundCondition(DensityModel):
    """A conditional density with one fixed observation broadcast over the batch."""

    def __init__(self, model, y):
        self.model = model
        self.y = np.asarray(y, dtype=np.float64).ravel()
        self.dim = model.dim

    def _y(self, x):
        return np.broadcast_to(self.y, (np.atleast_2d(x).shape[0], self.y.size))

    def log_prob(self, x, y=None):
        return self.model.log_prob(x, self._y(x))

    def grad(self, x, y=None):
        return self.model.grad(x, self._y(x))

    def hvp(self, x, v, y=None):
        return self.model.hvp(x, v, self._y(x))


class MixedNoiseProblem:
    """``y = F(x) + a F(x) eta_1 + b eta_2``, i.e. ``y | x ~ N(F(x), diag(a^2 F(x)^2 + b^2))``."""

    def __init__(self, forward_net: DenseNet, a, b, prior):
        if a < 0 or b <= 0:
            raise ValueError("need a >= 0 and b > 0")
        self.net = forward_net
        self.a = float(a)
        self.b = float(b)
        self.prior = prior
        self.dim = forward_net.input_size
        self.obs_dim = forward_net.output_size

    def forward(self, x):
        return self.net.forward(np.atleast_2d(x))

    def noise_var(self, fx):
        return self.a ** 2 * fx * fx + self.b ** 2

    def log_likelihood(self, x, y):
        fx = self.forward(x)
        s = self.noise_var(fx)
        r = np.atleast_2d(y) - fx
        return -0.5 * np.sum(r * r / s + np.log(s), axis=1)

    def grad_log_likelihood(self, x, y):
        fx, cache = self.net.forward_cached(np.atleast_2d(x))
        s = self.noise_var(fx)
        r = np.atleast_2d(y) - fx
        d_f = r / s + (r * r / (s * s) - 1.0 / s) * self.a ** 2 * fx
        return self.net.backward(cache, d_f).grad_input

    def hvp_log_likelihood(self, x, v, y):
        # no analytic second derivative through the network
        return fd_hvp(self.grad_log_likelihood, x, v, y)

    def posterior(self) -> PosteriorDensity:
        return PosteriorDensity(self)

    def sample_joint(self, n, rng):
        x = self.prior.sample(n, rng)
        fx = self.forward(x)
        y = fx + self.a * fx * rng.standard_normal(fx.shape) + self.b * rng.standard_normal(fx.shape)
        return x, y


def synthetic_forward_map(dim=3, obs_dim=23, hidden=(32,), seed=0, offset=1.0, gain=0.3):
    """Frozen smooth random map ``R^dim -> R^obs_dim`` standing in for a physical solver.

    Output is ``offset + gain * mlp(x)`` so the multiplicative noise stays
    bounded away from zero. Returned as a DenseNet with those constants folded
    into the last layer.
    """
    rng = np.random.default_rng(seed)
    net = net_init([dim, *hidden, obs_dim], rng=rng)
    net.weights[0] *= 2.0
    net.biases[0] = rng.uniform(-1.0, 1.0, size=net.biases[0].shape)
    net.weights[-1] *= gain
    net.biases[-1] = net.biases[-1] * gain + offset
    return net


def surrogate_fit(x, fx, hidden=(256, 256, 256), rng=None, steps=2000, batch_size=256,
                  lr=1e-3):
    """Least-squares fit of a DenseNet to samples ``(x_i, F(x_i))``.

    Returns ``(net, train_rmse)``.
    """
    rng = np.random.default_rng(rng)
    x = np.atleast_2d(x)
    fx = np.atleast_2d(fx)
    net = net_init([x.shape[1], *hidden, fx.shape[1]], rng=rng)
    # start the output at the data mean
    net.biases[-1] = fx.mean(axis=0)
    state = AdamState.for_params(net.n_params, lr=lr)
    params = net.get_params()
    n = x.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        out, cache = net.forward_cached(x[idx])
        grad = net.backward(cache, 2.0 * (out - fx[idx]) / len(idx)).grad_params
        params, state = adam_step(state, params, grad)
        net.set_params(params)
    return net, rmse(net, x, fx)


def rmse(net, x, fx):
    r = net.forward(np.atleast_2d(x)) - np.atleast_2d(fx)
    return float(np.sqrt(np.mean(r * r)))


def sample_joint(problem, n, rng):
    return problem.sample_joint(n, rng)
