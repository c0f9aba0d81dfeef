"""Affine coupling blocks and permutation-interleaved conditional flows.

A block maps ``(xi1, xi2) -> (x1, x2)`` with

    x1 = xi1 * exp(s2(xi2, y)) + t2(xi2, y)
    x2 = xi2 * exp(s1(x1, y)) + t1(x1, y)

and the flow is ``T_L o P_L o ... o T_1 o P_1``. The condition ``y`` is
concatenated to every subnetwork input and never enters the invertible path.
Scale outputs pass through ``clamp * tanh(raw / clamp)``.
"""

from __future__ import annotations

import numpy as np

from .nn import DenseNet, net_init

DEFAULT_CLAMP = 2.5


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _join(h, y):
    return h if y is None else np.concatenate([h, y], axis=1)


class CouplingBlock:
    def __init__(self, dim, cond_dim, s2, t2, s1, t1, clamp=DEFAULT_CLAMP):
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.d1 = (self.dim + 1) // 2
        self.d2 = self.dim - self.d1
        if self.d2 < 1:
            raise ValueError("coupling blocks need dim >= 2")
        for net, n_in, n_out in ((s2, self.d2, self.d1), (t2, self.d2, self.d1),
                                 (s1, self.d1, self.d2), (t1, self.d1, self.d2)):
            if net.input_size != n_in + self.cond_dim or net.output_size != n_out:
                raise ValueError("subnetwork sizes inconsistent with split and condition size")
        self.s2, self.t2, self.s1, self.t1 = s2, t2, s1, t1
        self.clamp = float(clamp)

    @classmethod
    def create(cls, dim, cond_dim=0, hidden=(64, 64), rng=None, clamp=DEFAULT_CLAMP):
        if dim < 2:
            raise ValueError("a coupling block needs at least two coordinates to split")
        d1 = (dim + 1) // 2
        d2 = dim - d1
        hidden = list(hidden)

        def make(n_in, n_out):
            return net_init([n_in + cond_dim, *hidden, n_out], rng=rng, zero_last=True)

        return cls(dim, cond_dim, make(d2, d1), make(d2, d1), make(d1, d2), make(d1, d2), clamp)

    @property
    def nets(self):
        return (self.s2, self.t2, self.s1, self.t1)

    @property
    def n_params(self) -> int:
        return sum(n.n_params for n in self.nets)

    def get_params(self):
        return np.concatenate([n.get_params() for n in self.nets])

    def set_params(self, flat):
        pos = 0
        for n in self.nets:
            n.set_params(flat[pos:pos + n.n_params])
            pos += n.n_params

    def _scale(self, raw):
        s = self.clamp * np.tanh(raw / self.clamp)
        return s, 1.0 - (s / self.clamp) ** 2

    def _cond(self, y, n):
        if self.cond_dim == 0:
            if y is not None and np.size(y) > 0:
                raise ValueError("unconditional block received a condition")
            return None
        if y is None:
            raise ValueError("conditional block needs a condition y")
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = np.broadcast_to(y, (n, y.size))
        if y.shape != (n, self.cond_dim):
            raise ValueError(f"condition shape {y.shape}, expected ({n}, {self.cond_dim})")
        return y

    def forward(self, xi, y=None):
        x, logdet, _ = self.forward_cached(xi, y)
        return x, logdet

    def forward_cached(self, xi, y=None):
        xi, single = _as_batch(xi)
        if xi.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {xi.shape[1]}")
        y = self._cond(y, xi.shape[0])
        xi1, xi2 = xi[:, :self.d1], xi[:, self.d1:]
        h2 = _join(xi2, y)
        r2, c_s2 = self.s2.forward_cached(h2)
        t2, c_t2 = self.t2.forward_cached(h2)
        s2, ds2 = self._scale(r2)
        e2 = np.exp(s2)
        x1 = xi1 * e2 + t2
        h1 = _join(x1, y)
        r1, c_s1 = self.s1.forward_cached(h1)
        t1, c_t1 = self.t1.forward_cached(h1)
        s1, ds1 = self._scale(r1)
        e1 = np.exp(s1)
        x2 = xi2 * e1 + t1
        x = np.concatenate([x1, x2], axis=1)
        logdet = s2.sum(axis=1) + s1.sum(axis=1)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(logdet))):
            raise FloatingPointError("non-finite coupling block output")
        cache = (xi1, xi2, e2, ds2, e1, ds1, c_s2, c_t2, c_s1, c_t1)
        if single:
            return x[0], logdet[0], (True, cache)
        return x, logdet, (False, cache)

    def backward(self, cache, grad_x, grad_logdet):
        """Reverse mode through :meth:`forward`.

        Returns ``(grad_xi, grad_y, grad_params)``; ``grad_y`` is None for
        unconditional blocks.
        """
        single, (xi1, xi2, e2, ds2, e1, ds1, c_s2, c_t2, c_s1, c_t1) = cache
        gx, _ = _as_batch(grad_x)
        gl = np.atleast_1d(np.asarray(grad_logdet, dtype=np.float64))[:, None]
        gx1, gx2 = gx[:, :self.d1], gx[:, self.d1:]
        # x2 = xi2 * e1 + t1(x1)
        g_xi2 = gx2 * e1
        g_r1 = (gx2 * xi2 * e1 + gl) * ds1
        b_s1 = self.s1.backward(c_s1, g_r1)
        b_t1 = self.t1.backward(c_t1, gx2)
        gh1 = b_s1.grad_input + b_t1.grad_input
        gx1 = gx1 + gh1[:, :self.d1]
        # x1 = xi1 * e2 + t2(xi2)
        g_xi1 = gx1 * e2
        g_r2 = (gx1 * xi1 * e2 + gl) * ds2
        b_s2 = self.s2.backward(c_s2, g_r2)
        b_t2 = self.t2.backward(c_t2, gx1)
        gh2 = b_s2.grad_input + b_t2.grad_input
        g_xi2 = g_xi2 + gh2[:, :self.d2]
        g_xi = np.concatenate([g_xi1, g_xi2], axis=1)
        g_y = None
        if self.cond_dim:
            g_y = gh1[:, self.d1:] + gh2[:, self.d2:]
        g_params = np.concatenate([b_s2.grad_params, b_t2.grad_params,
                                   b_s1.grad_params, b_t1.grad_params])
        if single:
            g_xi = g_xi[0]
            g_y = None if g_y is None else g_y[0]
        return g_xi, g_y, g_params

    def inverse(self, x, y=None):
        xi, logdet_inv, _ = self.inverse_cached(x, y)
        return xi, logdet_inv

    def inverse_cached(self, x, y=None):
        x, single = _as_batch(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {x.shape[1]}")
        y = self._cond(y, x.shape[0])
        x1, x2 = x[:, :self.d1], x[:, self.d1:]
        h1 = _join(x1, y)
        r1, c_s1 = self.s1.forward_cached(h1)
        t1, c_t1 = self.t1.forward_cached(h1)
        s1, ds1 = self._scale(r1)
        ie1 = np.exp(-s1)
        xi2 = (x2 - t1) * ie1
        h2 = _join(xi2, y)
        r2, c_s2 = self.s2.forward_cached(h2)
        t2, c_t2 = self.t2.forward_cached(h2)
        s2, ds2 = self._scale(r2)
        ie2 = np.exp(-s2)
        xi1 = (x1 - t2) * ie2
        xi = np.concatenate([xi1, xi2], axis=1)
        logdet_inv = -s1.sum(axis=1) - s2.sum(axis=1)
        if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(logdet_inv))):
            raise FloatingPointError("non-finite coupling block inverse")
        cache = (xi1, xi2, ie1, ds1, ie2, ds2, c_s2, c_t2, c_s1, c_t1)
        if single:
            return xi[0], logdet_inv[0], (True, cache)
        return xi, logdet_inv, (False, cache)

    def inverse_backward(self, cache, grad_xi, grad_logdet_inv):
        """Reverse mode through :meth:`inverse`; returns ``(grad_x, grad_y, grad_params)``."""
        single, (xi1, xi2, ie1, ds1, ie2, ds2, c_s2, c_t2, c_s1, c_t1) = cache
        gxi, _ = _as_batch(grad_xi)
        gl = np.atleast_1d(np.asarray(grad_logdet_inv, dtype=np.float64))[:, None]
        g_xi1, g_xi2 = gxi[:, :self.d1], gxi[:, self.d1:]
        # xi1 = (x1 - t2(xi2)) * exp(-s2(xi2))
        gx1 = g_xi1 * ie2
        g_r2 = (-g_xi1 * xi1 - gl) * ds2
        b_s2 = self.s2.backward(c_s2, g_r2)
        b_t2 = self.t2.backward(c_t2, -gx1)
        gh2 = b_s2.grad_input + b_t2.grad_input
        g_xi2 = g_xi2 + gh2[:, :self.d2]
        # xi2 = (x2 - t1(x1)) * exp(-s1(x1))
        gx2 = g_xi2 * ie1
        g_r1 = (-g_xi2 * xi2 - gl) * ds1
        b_s1 = self.s1.backward(c_s1, g_r1)
        b_t1 = self.t1.backward(c_t1, -gx2)
        gh1 = b_s1.grad_input + b_t1.grad_input
        gx1 = gx1 + gh1[:, :self.d1]
        g_x = np.concatenate([gx1, gx2], axis=1)
        g_y = None
        if self.cond_dim:
            g_y = gh1[:, self.d1:] + gh2[:, self.d2:]
        g_params = np.concatenate([b_s2.grad_params, b_t2.grad_params,
                                   b_s1.grad_params, b_t1.grad_params])
        if single:
            g_x = g_x[0]
            g_y = None if g_y is None else g_y[0]
        return g_x, g_y, g_params


def block_forward(block, xi, y=None):
    return block.forward(xi, y)


def block_inverse(block, x, y=None):
    return block.inverse(x, y)


class ConditionalCouplingFlow:
    """``T_L o P_L o ... o T_1 o P_1`` with index permutations ``v -> v[perm]``."""

    def __init__(self, permutations, blocks):
        if len(permutations) != len(blocks) or not blocks:
            raise ValueError("need one permutation per block and at least one block")
        self.dim = blocks[0].dim
        self.cond_dim = blocks[0].cond_dim
        for b in blocks:
            if b.dim != self.dim or b.cond_dim != self.cond_dim:
                raise ValueError("all blocks must share dim and cond_dim")
        perms = []
        for p in permutations:
            p = np.asarray(p, dtype=np.int64)
            if sorted(p.tolist()) != list(range(self.dim)):
                raise ValueError(f"not a permutation of 0..{self.dim - 1}: {p}")
            perms.append(p)
        self.permutations = perms
        self.blocks = list(blocks)

    @classmethod
    def create(cls, dim, cond_dim=0, n_blocks=4, hidden=(64, 64), rng=None,
               clamp=DEFAULT_CLAMP):
        rng = np.random.default_rng(rng)
        perms = [rng.permutation(dim) for _ in range(n_blocks)]
        blocks = [CouplingBlock.create(dim, cond_dim, hidden, rng=rng, clamp=clamp)
                  for _ in range(n_blocks)]
        return cls(perms, blocks)

    @property
    def n_params(self) -> int:
        return sum(b.n_params for b in self.blocks)

    def get_params(self):
        return np.concatenate([b.get_params() for b in self.blocks])

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for b in self.blocks:
            b.set_params(flat[pos:pos + b.n_params])
            pos += b.n_params

    def forward(self, z, y=None):
        x, logdet, _ = self.forward_cached(z, y)
        return x, logdet

    def forward_cached(self, z, y=None):
        x, single = _as_batch(z)
        logdet = np.zeros(x.shape[0])
        caches = []
        for perm, block in zip(self.permutations, self.blocks):
            x, ld, c = block.forward_cached(x[:, perm], y)
            logdet = logdet + ld
            caches.append(c)
        if single:
            return x[0], logdet[0], (True, caches)
        return x, logdet, (False, caches)

    def inverse(self, x, y=None):
        z, logdet_inv, _ = self.inverse_cached(x, y)
        return z, logdet_inv

    def inverse_cached(self, x, y=None):
        z, single = _as_batch(x)
        logdet = np.zeros(z.shape[0])
        caches = []
        for perm, block in zip(reversed(self.permutations), reversed(self.blocks)):
            xi, ld, c = block.inverse_cached(z, y)
            logdet = logdet + ld
            z = np.empty_like(xi)
            z[:, perm] = xi
            caches.append(c)
        if single:
            return z[0], logdet[0], (True, caches)
        return z, logdet, (False, caches)

    def backward(self, cache, grad_x, grad_logdet):
        """Reverse mode through :meth:`forward`; returns ``(grad_z, grad_y, grad_params)``."""
        single, caches = cache
        g, _ = _as_batch(grad_x)
        gl = np.broadcast_to(np.atleast_1d(np.asarray(grad_logdet, dtype=np.float64)),
                             (g.shape[0],))
        g_y = None
        g_params = [None] * len(self.blocks)
        for k in range(len(self.blocks) - 1, -1, -1):
            g_perm, gy, g_params[k] = self.blocks[k].backward(caches[k], g, gl)
            g = np.empty_like(g_perm)
            g[:, self.permutations[k]] = g_perm
            if gy is not None:
                g_y = gy if g_y is None else g_y + gy
        if single:
            g = g[0]
            g_y = None if g_y is None else g_y[0]
        return g, g_y, np.concatenate(g_params)

    def inverse_backward(self, cache, grad_z, grad_logdet_inv):
        """Reverse mode through :meth:`inverse`; returns ``(grad_x, grad_y, grad_params)``."""
        single, caches = cache
        g, _ = _as_batch(grad_z)
        gl = np.broadcast_to(np.atleast_1d(np.asarray(grad_logdet_inv, dtype=np.float64)),
                             (g.shape[0],))
        g_y = None
        n = len(self.blocks)
        g_params = [None] * n
        # caches are stored in inverse-evaluation order: block n-1 first
        for j in range(n - 1, -1, -1):
            k = n - 1 - j
            g_xi = g[:, self.permutations[k]]
            g, gy, g_params[k] = self.blocks[k].inverse_backward(caches[j], g_xi, gl)
            if gy is not None:
                g_y = gy if g_y is None else g_y + gy
        if single:
            g = g[0]
            g_y = None if g_y is None else g_y[0]
        return g, g_y, np.concatenate(g_params)


def flow_forward(flow, z, y=None):
    return flow.forward(z, y)


def flow_inverse(flow, x, y=None):
    return flow.inverse(x, y)


def flow_backward(flow, cache, grad_x, grad_logdet):
    return flow.backward(cache, grad_x, grad_logdet)
