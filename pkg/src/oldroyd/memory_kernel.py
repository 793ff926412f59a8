"""
Exponential memory kernel beta(t) = gamma * exp(-delta t) and its
right-rectangle convolution quadrature.

The quadrature ``q^n(phi) = k * sum_{j=1..n} beta(t_n - t_j) phi^j`` is kept
as a single accumulated vector updated by the exact two-term recursion
``U_beta^n = k gamma U^n + exp(-delta k) U_beta^{n-1}``.  The remaining
functions are the discrete identities the stability analysis relies on;
they work on scalar sequences and on stacked coefficient vectors alike
(the time index is always axis 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class KernelParams:
    gamma: float
    delta: float

    def __post_init__(self):
        # gamma = 0 switches the memory off (Stokes / Navier-Stokes mode)
        if not (self.gamma >= 0 and self.delta > 0):
            raise ValueError(f"kernel needs gamma >= 0 and delta > 0, got {self.gamma}, {self.delta}")

    @classmethod
    def from_physical(cls, kappa, lam, nu):
        """Kernel from retardation/relaxation data; also returns mu.

        mu = 2 kappa / lam, gamma = 2 (nu - kappa/lam) / lam, delta = 1 / lam,
        so that mu + gamma / delta = 2 nu.
        """
        mu = 2.0 * kappa / lam
        return cls(gamma=2.0 * (nu - kappa / lam) / lam, delta=1.0 / lam), mu

    def total_viscosity(self, mu):
        """mu + gamma / delta, the viscosity entering the uniqueness condition."""
        return mu + self.gamma / self.delta

    def decay(self, k):
        return math.exp(-self.delta * k)


def kernel_eval(t, params):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("kernel evaluated at negative time")
    out = params.gamma * np.exp(-params.delta * t)
    return float(out) if out.ndim == 0 else out


def quad_direct(history, k, params):
    """Direct O(n) right-rectangle sum k * sum_j beta(t_n - t_j) phi^j.

    ``history`` holds phi^1..phi^n along axis 0.  An empty history gives a
    zero (of the trailing shape, when it can be inferred).
    """
    h = np.asarray(history, dtype=float)
    n = h.shape[0]
    if n == 0:
        return np.zeros(h.shape[1:]) if h.ndim > 1 else 0.0
    lags = (n - np.arange(1, n + 1)) * k
    w = k * kernel_eval(lags, params)
    return np.tensordot(w, h, axes=(0, 0))


@dataclass(frozen=True, eq=False)
class MemoryState:
    """Accumulated quadrature U_beta^n after ``n`` steps of size ``k``.

    ``history`` is only populated when ``keep_history`` is set.
    """
    u_beta: np.ndarray
    k: float
    params: KernelParams
    n: int = 0
    keep_history: bool = False
    history: tuple = field(default=(), repr=False)

    @classmethod
    def zero(cls, shape, k, params, keep_history=False):
        return cls(np.zeros(shape), k, params, 0, keep_history)

    def direct(self):
        """Recompute U_beta^n from the retained history (diagnostics only)."""
        if not self.keep_history:
            raise RuntimeError("history not retained")
        if not self.history:
            return np.zeros_like(self.u_beta)
        return quad_direct(np.stack(self.history), self.k, self.params)


def memory_advance(state, u_new):
    u_new = np.asarray(u_new, dtype=float)
    if u_new.shape != np.shape(state.u_beta):
        raise ValueError(f"memory update of shape {u_new.shape}, state has {np.shape(state.u_beta)}")
    p = state.params
    u_beta = state.k * p.gamma * u_new + p.decay(state.k) * state.u_beta
    history = state.history + (u_new.copy(),) if state.keep_history else ()
    return replace(state, u_beta=u_beta, n=state.n + 1, history=history)


def memory_difference(state_n, state_prev, u_n, k, params):
    """Backward difference of the memory, gamma U^n - (1 - e^{-delta k})/k U_beta^{n-1}."""
    if state_n.k != k or state_prev.k != k:
        raise ValueError("time step does not match the memory states")
    if state_n.n != state_prev.n + 1:
        raise ValueError("memory states are not consecutive")
    return params.gamma * np.asarray(u_n) - (-math.expm1(-params.delta * k) / k) * state_prev.u_beta


def positivity_functional(history, k, params):
    """k * sum_i q^i(phi) phi^i for phi^1..phi^N (no j = 0 term)."""
    h = np.asarray(history, dtype=float)
    if h.shape[0] == 0:
        return 0.0
    n = h.shape[0]
    idx = np.arange(n)
    lag = (idx[:, None] - idx[None, :]) * k
    weights = np.where(lag >= 0, k * params.gamma * np.exp(-params.delta * np.maximum(lag, 0.0)), 0.0)
    flat = h.reshape(n, -1)
    q = weights @ flat  # q^i for every i
    return float(k * np.sum(q * flat))


def hat_transform(sequence, k):
    """Running sums k * sum_{i<=n} phi^i."""
    return k * np.cumsum(np.asarray(sequence, dtype=float), axis=0)


def backward_difference(sequence, k, initial=0.0):
    """(phi^n - phi^{n-1}) / k with phi^0 = ``initial``."""
    s = np.asarray(sequence, dtype=float)
    prev = np.concatenate([np.broadcast_to(initial, (1,) + s.shape[1:]), s[:-1]])
    return (s - prev) / k


def summation_by_parts_check(a, b, k):
    """Residuals of k sum_{j<=i} a_j b_j = a_i bhat_i - k sum_{j<i} (d_t a_{j+1}) bhat_j.

    Returns one residual per prefix index i.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("sequences must have equal length")
    lhs = k * np.cumsum(a * b, axis=0)
    bhat = hat_transform(b, k)
    da = (a[1:] - a[:-1]) / k  # d_t a_{j+1}, j = 1..n-1
    tail = k * np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(da * bhat[:-1], axis=0)])
    rhs = a * bhat - tail
    return lhs - rhs


def convolution_inequality_check(g, phi, k):
    """Both sides of the discrete Young inequality for k-scaled convolutions.

    lhs = (k sum_i (k sum_{j<=i} g_{i-j} phi^j)^2)^{1/2},
    rhs = (k sum_{i=0}^{n-1} |g_i|) (k sum_i |phi^i|^2)^{1/2}.
    """
    g = np.asarray(g, dtype=float)
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    if g.shape[0] < n:
        raise ValueError("kernel sequence shorter than the data sequence")
    g = g[:n]
    conv = k * np.convolve(g, phi)[:n]
    lhs = math.sqrt(k * float(np.sum(conv ** 2)))
    rhs = k * float(np.sum(np.abs(g))) * math.sqrt(k * float(np.sum(phi ** 2)))
    return lhs, rhs


def quadrature_error_estimate(phi, t_end, k, params, exact=None):
    """|int_0^t beta(t - s) phi(s) ds - q^n(phi)| at t = t_end = n k.

    ``exact`` is the convolution value if known in closed form; otherwise it
    is computed by adaptive quadrature.
    """
    n = int(round(t_end / k))
    if not math.isclose(n * k, t_end, rel_tol=1e-12, abs_tol=1e-14):
        raise ValueError("t_end must be a multiple of k")
    samples = np.array([phi(j * k) for j in range(1, n + 1)], dtype=float)
    approx = quad_direct(samples, k, params)
    if exact is None:
        exact, _ = integrate.quad(lambda s: kernel_eval(t_end - s, params) * phi(s),
                                  0.0, t_end, epsabs=1e-14, epsrel=1e-13, limit=200)
    return abs(exact - approx)
