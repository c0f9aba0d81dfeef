"""Langevin, random-walk Metropolis-Hastings and MALA steps over a density.

All step functions work on batches ``x`` of shape ``(n, d)`` and return the
randomness they consumed as a :class:`StepRecord`, so a step can be replayed
exactly (and differentiated with the accept/reject decisions held fixed).
Targets may be unnormalized; only log-density differences are ever used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DensityModel:
    """Unnormalized log-density with gradient and Hessian-vector product.

    ``y`` is an optional batch of conditions ``(n, d_y)`` for conditional
    families such as posteriors; unconditional models ignore it.
    Subclasses must implement ``log_prob`` and ``grad``. ``hvp`` defaults to
    a central difference of ``grad``.
    """

    dim: int

    def log_prob(self, x, y=None):
        raise NotImplementedError

    def grad(self, x, y=None):
        raise NotImplementedError

    def hvp(self, x, v, y=None):
        return fd_hvp(self.grad, x, v, y)


def fd_hvp(grad_fn, x, v, y=None):
    """Central difference of ``grad_fn(x, y)`` along ``v``, step ``1e-4 (1 + |x|)``."""
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(vn > 0, vn, 1.0)
    h = 1e-4 * (1.0 + np.linalg.norm(x, axis=1, keepdims=True))
    step = h * v / safe
    diff = grad_fn(x + step, y) - grad_fn(x - step, y)
    return diff / (2.0 * h) * safe


class GaussianDensity(DensityModel):
    """N(mean, cov); the default latent is ``GaussianDensity.standard(d)``."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.dim = self.mean.size
        self.chol = np.linalg.cholesky(self.cov)
        self.precision = np.linalg.inv(self.cov)
        self.log_norm = -0.5 * self.dim * np.log(2 * np.pi) - np.log(np.diag(self.chol)).sum()

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), np.eye(dim))

    def log_prob(self, x, y=None):
        r = np.atleast_2d(x) - self.mean
        return self.log_norm - 0.5 * np.einsum("ni,ij,nj->n", r, self.precision, r)

    def grad(self, x, y=None):
        return -(np.atleast_2d(x) - self.mean) @ self.precision

    def hvp(self, x, v, y=None):
        return -np.atleast_2d(v) @ self.precision

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T


@dataclass
class LangevinConfig:
    a1: float
    a2: float
    n_steps: int = 1

    def __post_init__(self):
        if self.a1 < 0 or self.a2 <= 0 or self.n_steps < 0:
            raise ValueError("Langevin needs a1 >= 0, a2 > 0, n_steps >= 0")


@dataclass
class MHConfig:
    """``proposal`` is ``"rw"`` (uses ``sigma``) or ``"mala"`` (uses ``a1``, ``a2``)."""

    proposal: str = "rw"
    sigma: float = 0.4
    a1: float = 0.0
    a2: float = 0.0
    n_steps: int = 1

    def __post_init__(self):
        if self.proposal not in ("rw", "mala"):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if self.proposal == "rw" and self.sigma <= 0:
            raise ValueError("random-walk proposal needs sigma > 0")
        if self.proposal == "mala" and (self.a1 < 0 or self.a2 <= 0):
            raise ValueError("MALA proposal needs a1 >= 0, a2 > 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")


@dataclass
class StepRecord:
    """Randomness of one batched step: Gaussian draws, uniforms, accept flags."""

    xi: np.ndarray
    u: np.ndarray | None = None
    accepted: np.ndarray | None = None


def _checked_grad(target, x, y):
    g = target.grad(x, y)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite log-density gradient")
    return g


def langevin_step(x, target, cfg: LangevinConfig, rng=None, y=None, record=None):
    """``x' = x - a1 grad u(x) + a2 xi`` with ``u = -log p``."""
    x = np.atleast_2d(x)
    xi = rng.standard_normal(x.shape) if record is None else record.xi
    x_new = x + cfg.a1 * _checked_grad(target, x, y) + cfg.a2 * xi
    return x_new, StepRecord(xi)


def rw_log_q(x_to, x_from, sigma):
    r = x_to - x_from
    return -0.5 * np.sum(r * r, axis=1) / sigma ** 2


def mala_log_q(x_to, x_from, grad_from, a1, a2):
    r = x_to - x_from - a1 * grad_from
    return -0.5 * np.sum(r * r, axis=1) / a2 ** 2


def mh_acceptance(x, x_prop, target, log_q_forward, log_q_backward, y=None, logp_x=None,
                  logp_prop=None):
    """``min(1, p(x')q(x|x') / (p(x)q(x'|x)))`` evaluated in log space.

    ``log_q_forward`` is ``log q(x'|x)`` and ``log_q_backward`` is
    ``log q(x|x')``, each up to a constant shared by both directions.
    Already known log-densities may be passed to skip re-evaluation.
    """
    x = np.atleast_2d(x)
    x_prop = np.atleast_2d(x_prop)
    if logp_x is None:
        logp_x = target.log_prob(x, y)
    if logp_prop is None:
        logp_prop = target.log_prob(x_prop, y)
    log_ratio = logp_prop + log_q_backward - logp_x - log_q_forward
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    return np.exp(np.minimum(log_ratio, 0.0))


def mh_step(x, target, cfg: MHConfig, rng=None, y=None, record=None, freeze_accept=False,
            force_accept=False):
    """One Metropolis-Hastings step. Accept iff ``U < alpha`` (ties reject).

    With ``record`` the stored draws are reused; ``freeze_accept`` also reuses
    the stored accept flags instead of re-evaluating ``alpha``.
    ``force_accept`` skips the correction entirely (a deliberately broken
    kernel, used only to check that tests can detect it).
    """
    x_new, rec, _ = mh_step_carry(x, target, cfg, rng, y, record, freeze_accept, force_accept)
    return x_new, rec


def mh_step_carry(x, target, cfg, rng=None, y=None, record=None, freeze_accept=False,
                  force_accept=False, carry=None):
    """:func:`mh_step` that also takes and returns ``carry = (log p(x), grad log p(x))``.

    Passing the previous step's carry avoids re-evaluating the target at the
    current state. The returned carry is None when no density was evaluated.
    """
    x = np.atleast_2d(x)
    if record is None:
        xi = rng.standard_normal(x.shape)
        u = rng.uniform(size=x.shape[0])
    else:
        xi, u = record.xi, record.u
    frozen = freeze_accept and record is not None
    logp_x, g = carry if carry is not None else (None, None)
    g_prop = None
    if cfg.proposal == "rw":
        x_prop = x + cfg.sigma * xi
        lq_fwd = lq_bwd = 0.0
    else:
        if g is None:
            g = _checked_grad(target, x, y)
        x_prop = x + cfg.a1 * g + cfg.a2 * xi
        if not frozen:
            g_prop = _checked_grad(target, x_prop, y)
            lq_fwd = mala_log_q(x_prop, x, g, cfg.a1, cfg.a2)
            lq_bwd = mala_log_q(x, x_prop, g_prop, cfg.a1, cfg.a2)
    if frozen:
        accepted = record.accepted
        x_new = np.where(accepted[:, None], x_prop, x)
        return x_new, StepRecord(xi, u, accepted), None
    if force_accept:
        accepted = np.ones(x.shape[0], dtype=bool)
        x_new = x_prop
        return x_new, StepRecord(xi, u, accepted), None
    if logp_x is None:
        logp_x = target.log_prob(x, y)
    logp_prop = target.log_prob(x_prop, y)
    alpha = mh_acceptance(x, x_prop, target, lq_fwd, lq_bwd, y, logp_x, logp_prop)
    accepted = u < alpha
    x_new = np.where(accepted[:, None], x_prop, x)
    logp_new = np.where(accepted, logp_prop, logp_x)
    g_new = None if g_prop is None else np.where(accepted[:, None], g_prop, g)
    return x_new, StepRecord(xi, u, accepted), (logp_new, g_new)


def kernel_apply(x, target, cfg, rng=None, y=None, records=None, freeze_accept=False):
    """Apply ``cfg.n_steps`` steps; returns ``(x_out, records, points)``.

    ``points`` holds the state before each step plus the final state.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    points = [x]
    out_records = []
    carry = None
    for k in range(cfg.n_steps):
        rec = None if records is None else records[k]
        if isinstance(cfg, LangevinConfig):
            x, r = langevin_step(x, target, cfg, rng, y, rec)
        else:
            x, r, carry = mh_step_carry(x, target, cfg, rng, y, rec, freeze_accept, carry=carry)
        out_records.append(r)
        points.append(x)
    return x, out_records, points


def step_vjp(x_in, g_out, target, cfg, record, y=None):
    """``J^T g_out`` for one recorded step, ``J = d x_out / d x_in``.

    Langevin and accepted MALA steps have ``J = I + a1 H`` (H the Hessian of
    log p); random-walk MH steps and rejected MALA steps pass ``g_out``
    through unchanged, since accept flags and draws are held fixed.
    """
    g_out = np.atleast_2d(g_out)
    if isinstance(cfg, LangevinConfig):
        if cfg.a1 == 0:
            return g_out
        return g_out + cfg.a1 * target.hvp(x_in, g_out, y)
    if cfg.proposal == "rw" or cfg.a1 == 0:
        return g_out
    acc = record.accepted[:, None]
    return g_out + np.where(acc, cfg.a1 * target.hvp(x_in, g_out, y), 0.0)


def replay_gradient(x_in, grad_out, records, target, cfg, y=None):
    """Gradient w.r.t. the input of a replayed multi-step kernel."""
    _, _, points = kernel_apply(x_in, target, cfg, y=y, records=records, freeze_accept=True)
    g = np.atleast_2d(grad_out)
    for k in range(len(records) - 1, -1, -1):
        g = step_vjp(points[k], g, target, cfg, records[k], y)
    return g
