"""Stochastic normalizing flow chains: path sampling, KL path losses, training.

A chain is a list of layers ``K_1, ..., K_T`` mapping ``x_0 ~ p_Z`` towards
the target. Every layer contributes a per-path log-quotient term
``log(f_t p_{X_{t-1}}(x_{t-1}) / p_{X_t}(x_t))``:

* deterministic ``x_t = T(x_{t-1})``: ``log|det dT(x_{t-1})|``
* Metropolis-Hastings step targeting ``p_t``: ``log p_t(x_{t-1}) - log p_t(x_t)``
* Langevin step: ``(|eta|^2 - |eta~|^2) / 2`` with
  ``eta = (x_{t-1} - x_t + a1 grad log p_t(x_{t-1})) / a2`` and
  ``eta~ = (x_{t-1} - x_t - a1 grad log p_t(x_t)) / a2``.

Stochastic layers with several steps contribute the sum of their per-step
terms. Losses are implemented up to additive constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flows import ConditionalCouplingFlow
from .kernels import (DensityModel, LangevinConfig, MHConfig, StepRecord, kernel_apply,
                      step_vjp)
from .nn import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class DeterministicLayer:
    flow: ConditionalCouplingFlow


@dataclass
class LangevinLayer:
    cfg: LangevinConfig
    beta: float = 1.0  # exponent of the target in the interpolated density


@dataclass
class MCMCLayer:
    cfg: MHConfig
    beta: float = 1.0


class InterpolatedDensity(DensityModel):
    """Geometric mean ``p_Z^(1 - beta) p_X^beta``, unnormalized."""

    def __init__(self, latent, target, beta):
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"interpolation weight must lie in [0, 1], got {beta}")
        self.latent = latent
        self.target = target
        self.beta = float(beta)
        self.dim = latent.dim

    def _mix(self, f_latent, f_target):
        out = 0.0
        if self.beta < 1.0:
            out = (1.0 - self.beta) * f_latent()
        if self.beta > 0.0:
            out = out + self.beta * f_target()
        return out

    def log_prob(self, x, y=None):
        return self._mix(lambda: self.latent.log_prob(x), lambda: self.target.log_prob(x, y))

    def grad(self, x, y=None):
        return self._mix(lambda: self.latent.grad(x), lambda: self.target.grad(x, y))

    def hvp(self, x, v, y=None):
        return self._mix(lambda: self.latent.hvp(x, v), lambda: self.target.hvp(x, v, y))


def interpolated_density(latent, target, t, T) -> InterpolatedDensity:
    """Target of a stochastic layer at interpolation index ``t`` out of ``T``."""
    if not 0 <= t <= T or T <= 0:
        raise ValueError(f"interpolation index {t} outside 0..{T}")
    return InterpolatedDensity(latent, target, t / T)


@dataclass
class SNFChain:
    """Layers plus the latent and (possibly conditional) target densities.

    ``target`` may be None for chains made only of deterministic layers and
    trained from data pairs; the forward-direction loss then cannot be used.
    """

    layers: list
    latent: DensityModel
    target: DensityModel | None = None
    cond_dim: int = 0
    _densities: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for k, layer in enumerate(self.layers):
            if isinstance(layer, DeterministicLayer):
                if layer.flow.dim != self.latent.dim or layer.flow.cond_dim != self.cond_dim:
                    raise ValueError(f"layer {k + 1}: flow dimensions do not match the chain")
            elif isinstance(layer, (LangevinLayer, MCMCLayer)):
                if self.target is None:
                    raise ValueError("stochastic layers need a target density")
                if not 0.0 <= layer.beta <= 1.0:
                    raise ValueError(f"layer {k + 1}: interpolation weight {layer.beta} invalid")
            else:
                raise TypeError(f"layer {k + 1}: unknown layer type {type(layer).__name__}")

    @property
    def dim(self) -> int:
        return self.latent.dim

    @property
    def flows(self):
        return [l.flow for l in self.layers if isinstance(l, DeterministicLayer)]

    @property
    def n_params(self) -> int:
        return sum(f.n_params for f in self.flows)

    def get_params(self):
        flows = self.flows
        if not flows:
            return np.zeros(0)
        return np.concatenate([f.get_params() for f in flows])

    def set_params(self, flat):
        pos = 0
        for f in self.flows:
            f.set_params(flat[pos:pos + f.n_params])
            pos += f.n_params

    def layer_density(self, k) -> InterpolatedDensity:
        layer = self.layers[k]
        if k not in self._densities:
            self._densities[k] = InterpolatedDensity(self.latent, self.target, layer.beta)
        return self._densities[k]


@dataclass
class PathBatch:
    """Sampled paths ``(x_0, ..., x_T)`` with per-layer log-quotient terms.

    ``records[t]`` holds the StepRecords of stochastic layer ``t + 1`` (None
    for deterministic layers). ``traces`` keeps what reverse mode needs and
    is not serialized.
    """

    points: list
    terms: np.ndarray
    records: list
    direction: str
    y: np.ndarray | None = None
    traces: list = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.points[0].shape[0]


def langevin_pair_term(prev, nxt, target, cfg, y=None, g_prev=None, g_next=None):
    """Log-quotient of one Langevin step between ``x_{t-1} = prev`` and ``x_t = nxt``."""
    g_prev = target.grad(prev, y) if g_prev is None else g_prev
    g_next = target.grad(nxt, y) if g_next is None else g_next
    eta = (prev - nxt + cfg.a1 * g_prev) / cfg.a2
    eta_t = (prev - nxt - cfg.a1 * g_next) / cfg.a2
    return 0.5 * (np.sum(eta * eta, axis=1) - np.sum(eta_t * eta_t, axis=1)), eta, eta_t


def mh_pair_term(prev, nxt, target, y=None):
    return target.log_prob(prev, y) - target.log_prob(nxt, y)


def _langevin_partials(layer, target, prev, nxt, y):
    """Partial derivatives of a Langevin step's term w.r.t. ``x_{t-1}`` and ``x_t``."""
    a1, a2 = layer.cfg.a1, layer.cfg.a2
    _, eta, eta_t = langevin_pair_term(prev, nxt, target, layer.cfg, y)
    d_prev = (eta + a1 * target.hvp(prev, eta, y) - eta_t) / a2
    d_next = (eta_t - eta + a1 * target.hvp(nxt, eta_t, y)) / a2
    return d_prev, d_next


def _stochastic_backward(layer, target, sub, recs, g, w, direction, y):
    """Pull ``g = dL/d(layer output)`` back to the layer input, term included.

    ``sub`` lists the states in evaluation order, so ``sub[0]`` is the input.
    """
    if isinstance(layer, MCMCLayer):
        # term = +-(log p(sub[0]) - log p(sub[-1])); the sign flips with direction
        sign = 1.0 if direction == "forward" else -1.0
        g = g - sign * w * target.grad(sub[-1], y)
        for k in range(len(sub) - 2, -1, -1):
            g = step_vjp(sub[k], g, target, layer.cfg, recs[k], y)
        return g + sign * w * target.grad(sub[0], y)
    for k in range(len(sub) - 2, -1, -1):
        if direction == "forward":
            d_prev, d_next = _langevin_partials(layer, target, sub[k], sub[k + 1], y)
            g = step_vjp(sub[k], g + w * d_next, target, layer.cfg, recs[k], y) + w * d_prev
        else:
            d_prev, d_next = _langevin_partials(layer, target, sub[k + 1], sub[k], y)
            g = step_vjp(sub[k], g + w * d_prev, target, layer.cfg, recs[k], y) + w * d_next
    return g


def _stochastic_terms(layer, target, sub, direction, y):
    if isinstance(layer, MCMCLayer):
        # per-step terms log p(prev) - log p(next) telescope to the layer endpoints
        first, last = target.log_prob(sub[0], y), target.log_prob(sub[-1], y)
        return first - last if direction == "forward" else last - first
    total = np.zeros(sub[0].shape[0])
    for k in range(len(sub) - 1):
        a, b = sub[k], sub[k + 1]
        prev, nxt = (a, b) if direction == "forward" else (b, a)
        total += langevin_pair_term(prev, nxt, target, layer.cfg, y)[0]
    return total


def _check_finite(arr, what, layer_index):
    ok = np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
    if not ok.all():
        bad = np.flatnonzero(~ok)
        raise FloatingPointError(
            f"non-finite {what} at layer {layer_index + 1} for {bad.size} path(s), first {bad[:5]}")


def _run_path(chain: SNFChain, start, y, direction, rng=None, records=None):
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    start = np.atleast_2d(np.asarray(start, dtype=np.float64))
    n = start.shape[0]
    if y is not None:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if y.shape[0] == 1 and n > 1:
            y = np.broadcast_to(y, (n, y.shape[1]))
    T = len(chain.layers)
    points = [None] * (T + 1)
    terms = np.zeros((n, T))
    out_records = [None] * T
    traces = [None] * T
    if direction == "forward":
        points[0] = start
        order = range(T)
    else:
        points[T] = start
        order = range(T - 1, -1, -1)
    for i in order:
        layer = chain.layers[i]
        x_in = points[i] if direction == "forward" else points[i + 1]
        if isinstance(layer, DeterministicLayer):
            if direction == "forward":
                out, ld, cache = layer.flow.forward_cached(x_in, y)
                term = ld
            else:
                out, ldi, cache = layer.flow.inverse_cached(x_in, y)
                term = -ldi
            traces[i] = cache
        else:
            target = chain.layer_density(i)
            rec = None if records is None else records[i]
            out, recs, sub = kernel_apply(x_in, target, layer.cfg, rng, y, rec,
                                          freeze_accept=records is not None)
            term = _stochastic_terms(layer, target, sub, direction, y)
            out_records[i] = recs
            traces[i] = sub
        _check_finite(out, "state", i)
        _check_finite(term, "log-quotient term", i)
        terms[:, i] = term
        if direction == "forward":
            points[i + 1] = out
        else:
            points[i] = out
    return PathBatch(points, terms, out_records, direction, y, traces)


def sample_forward_path(chain: SNFChain, n, rng, y=None) -> PathBatch:
    """Draw ``x_0 ~ p_Z`` and push it through every layer in order."""
    rng = np.random.default_rng(rng)
    x0 = chain.latent.sample(n, rng)
    return _run_path(chain, x0, y, "forward", rng)


def sample_reverse_path(chain: SNFChain, x, rng, y=None) -> PathBatch:
    """Start at target samples ``x_T = x`` and run the reverse layers down to ``x_0``."""
    rng = np.random.default_rng(rng)
    return _run_path(chain, x, y, "reverse", rng)


def replay_path(chain: SNFChain, path: PathBatch) -> PathBatch:
    """Recompute a path from its start point and stored randomness, accept flags frozen."""
    start = path.points[0] if path.direction == "forward" else path.points[-1]
    return _run_path(chain, start, path.y, path.direction, records=path.records)


def kl_loss(chain: SNFChain, path: PathBatch) -> float:
    """Monte Carlo estimate of the path KL for ``path.direction`` (up to constants).

    forward: ``mean[log p_Z(x_0) - log p_X(x_T | y) - sum_t term_t]``;
    reverse: ``mean[-log p_Z(x_0) + sum_t term_t]``.
    For conditional problems ``log p_X(x_T | y)`` is the unnormalized
    posterior ``log p(y | x_T) + log p_X(x_T)``.
    """
    return float(np.mean(_per_path_loss(chain, path)))


def _per_path_loss(chain, path):
    x0, xT = path.points[0], path.points[-1]
    total = path.terms.sum(axis=1)
    if path.direction == "reverse":
        return -chain.latent.log_prob(x0) + total
    if chain.target is None:
        raise ValueError("forward-direction loss needs a target density (noise model and prior)")
    return chain.latent.log_prob(x0) - chain.target.log_prob(xT, path.y) - total


def loss_and_grad(chain: SNFChain, path: PathBatch, detached=False):
    """Loss of a traced path and its exact gradient w.r.t. ``chain.get_params()``.

    Stochastic layers are differentiated with their draws and accept flags
    held fixed. ``detached=True`` passes gradients through stochastic layers
    unchanged and drops their term derivatives.
    """
    if path.traces is None:
        raise ValueError("path has no traces; sample or replay it first")
    value = kl_loss(chain, path)
    n = path.n
    y = path.y
    T = len(chain.layers)
    flow_slices = {}
    pos = 0
    for i, layer in enumerate(chain.layers):
        if isinstance(layer, DeterministicLayer):
            flow_slices[i] = slice(pos, pos + layer.flow.n_params)
            pos += layer.flow.n_params
    grad = np.zeros(pos)

    if path.direction == "reverse":
        w = 1.0 / n
        g = -chain.latent.grad(path.points[0]) / n
        for i in range(T):
            layer = chain.layers[i]
            if isinstance(layer, DeterministicLayer):
                g, _, gp = layer.flow.inverse_backward(path.traces[i], g, -w)
                grad[flow_slices[i]] += gp
                continue
            if detached:
                continue
            g = _stochastic_backward(layer, chain.layer_density(i), path.traces[i],
                                     path.records[i], g, w, path.direction, y)
    else:
        if chain.target is None:
            raise ValueError("forward-direction loss needs a target density")
        w = -1.0 / n
        g = -chain.target.grad(path.points[-1], y) / n
        for i in range(T - 1, -1, -1):
            layer = chain.layers[i]
            if isinstance(layer, DeterministicLayer):
                g, _, gp = layer.flow.backward(path.traces[i], g, w)
                grad[flow_slices[i]] += gp
                continue
            if detached:
                continue
            g = _stochastic_backward(layer, chain.layer_density(i), path.traces[i],
                                     path.records[i], g, w, path.direction, y)
    return value, grad


@dataclass
class LossConfig:
    lam: float = 0.0
    batch_size: int = 512
    steps: int = 2000
    lr: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("invalid batch size, step count or learning rate")


class SampleProblem:
    """Unconditional training data: wraps ``sampler(n, rng) -> x`` as a problem without ``y``."""

    def __init__(self, sampler):
        self.sampler = sampler

    def sample_joint(self, n, rng):
        return self.sampler(n, rng), None


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def train_step(chain, problem, cfg: LossConfig, rng):
    """Loss and gradient of ``lam * KL_forward + (1 - lam) * KL_reverse`` on fresh batches."""
    value = 0.0
    grad = np.zeros(chain.n_params)
    if cfg.lam < 1.0:
        x, y = problem.sample_joint(cfg.batch_size, rng)
        path = sample_reverse_path(chain, x, rng, y)
        v, g = loss_and_grad(chain, path)
        value += (1.0 - cfg.lam) * v
        grad += (1.0 - cfg.lam) * g
    if cfg.lam > 0.0:
        _, y = problem.sample_joint(cfg.batch_size, rng)
        path = sample_forward_path(chain, cfg.batch_size, rng, y)
        v, g = loss_and_grad(chain, path)
        value += cfg.lam * v
        grad += cfg.lam * g
    return value, grad


def train(chain: SNFChain, problem, cfg: LossConfig, rng=None, log_every=100):
    """Adam on the deterministic-layer parameters. Returns the per-step loss trace.

    ``problem.sample_joint(n, rng)`` supplies ``(x, y)`` pairs (``y`` may be None).
    Raises :class:`TrainingDiverged` carrying the partial trace on a
    non-finite loss or gradient.
    """
    rng = np.random.default_rng(rng)
    if cfg.steps > 0 and chain.n_params == 0:
        raise ValueError("chain has no trainable deterministic layers")
    params = chain.get_params()
    state = AdamState.for_params(params.size, lr=cfg.lr)
    trace = []
    for step in range(cfg.steps):
        try:
            value, grad = train_step(chain, problem, cfg, rng)
            if not np.isfinite(value):
                raise FloatingPointError(f"loss is {value}")
            params, state = adam_step(state, params, grad)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"training diverged at step {step}: {exc}", trace) from exc
        chain.set_params(params)
        trace.append(value)
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.5f", step, value)
    return trace


def sample_chain(chain: SNFChain, n, rng, y=None):
    """Endpoint samples ``x_T`` of the forward chain (one observation ``y`` broadcast)."""
    return sample_forward_path(chain, n, rng, y).points[-1]


def save_path(path: PathBatch, file) -> None:
    arrays = {"direction": np.array(path.direction), "terms": path.terms,
              "n_layers": np.array(len(path.records))}
    for t, p in enumerate(path.points):
        arrays[f"point_{t}"] = p
    if path.y is not None:
        arrays["y"] = np.asarray(path.y)
    for t, recs in enumerate(path.records):
        if recs is None:
            continue
        arrays[f"nrec_{t}"] = np.array(len(recs))
        for k, r in enumerate(recs):
            arrays[f"rec_{t}_{k}_xi"] = r.xi
            if r.u is not None:
                arrays[f"rec_{t}_{k}_u"] = r.u
                arrays[f"rec_{t}_{k}_acc"] = r.accepted
    np.savez(Path(file), **arrays)


def load_path(file) -> PathBatch:
    with np.load(Path(file)) as data:
        T = int(data["n_layers"])
        points = [data[f"point_{t}"] for t in range(T + 1)]
        records = []
        for t in range(T):
            if f"nrec_{t}" not in data:
                records.append(None)
                continue
            recs = []
            for k in range(int(data[f"nrec_{t}"])):
                u = data[f"rec_{t}_{k}_u"] if f"rec_{t}_{k}_u" in data else None
                acc = data[f"rec_{t}_{k}_acc"] if f"rec_{t}_{k}_acc" in data else None
                recs.append(StepRecord(data[f"rec_{t}_{k}_xi"], u, acc))
            records.append(recs)
        y = data["y"] if "y" in data else None
        return PathBatch(points, data["terms"], records, str(data["direction"]), y)
