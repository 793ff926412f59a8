"""
Randomized identity suites for the memory quadrature and the finite
element core.  Each check returns a ``CheckResult``; ``run_all`` is what
the ``properties`` subcommand executes.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import memory_kernel as mk
from .fem_core import (MixedSpace, apply_trilinear, build_unit_square_mesh, VelocityField)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float  # worst observed (scaled) value
    tolerance: float
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3e} tol={self.tolerance:.1e} ({self.seconds:.2f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _random_params(rng):
    return mk.KernelParams(gamma=float(rng.uniform(0.1, 5.0)), delta=float(rng.uniform(0.1, 5.0)))


@_timed
def recursion_vs_direct(trials=120, max_len=1000, seed=1, tol=1e-12):
    """Recursive U_beta^n against the direct weighted sum, relative error."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        k = float(rng.uniform(1e-3, 0.5))
        p = _random_params(rng)
        hist = rng.standard_normal(n)
        st = mk.MemoryState.zero((), k, p)
        for i in range(n):
            st = mk.memory_advance(st, hist[i])
        direct = mk.quad_direct(hist, k, p)
        scale = k * p.gamma * float(np.sum(np.abs(hist)))
        worst = max(worst, abs(float(st.u_beta) - direct) / scale)
    return CheckResult("memory recursion matches direct sum", worst <= tol, worst, tol)


@_timed
def positivity(trials=1000, max_len=120, seed=2, tol=1e-12):
    """k sum_i q^i(phi) phi^i >= 0, scaled by k^2 gamma (sum |phi|)^2."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        k = float(rng.uniform(1e-3, 0.9))
        p = _random_params(rng)
        phi = rng.standard_normal(n) * 10.0 ** rng.uniform(-3, 3)
        val = mk.positivity_functional(phi, k, p)
        scale = k * k * p.gamma * float(np.sum(np.abs(phi))) ** 2
        worst = max(worst, -val / scale)
    return CheckResult("quadrature positivity", worst <= tol, worst, tol)


@_timed
def summation_by_parts(trials=1000, max_len=200, seed=3, tol=1e-13):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        k = float(rng.uniform(1e-3, 0.9))
        a = rng.standard_normal(n)
        b = rng.standard_normal(n)
        res = mk.summation_by_parts_check(a, b, k)
        # every term is bounded by max|a| * k * sum|b| times a small constant
        scale = float(np.max(np.abs(a))) * k * float(np.sum(np.abs(b))) * 4.0
        worst = max(worst, float(np.max(np.abs(res))) / scale)
    return CheckResult("summation by parts", worst <= tol, worst, tol)


@_timed
def convolution_inequality(trials=1000, max_len=200, seed=4):
    """Discrete Young inequality; worst reported value is max (lhs - rhs)/rhs."""
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        k = float(rng.uniform(1e-3, 0.9))
        kind = rng.integers(3)
        if kind == 0:  # exponential kernel values
            g = mk.kernel_eval(np.arange(n) * k, _random_params(rng))
        elif kind == 1:
            g = np.abs(rng.standard_normal(n))
        else:
            g = rng.standard_normal(n)
        phi = rng.standard_normal(n)
        lhs, rhs = mk.convolution_inequality_check(np.atleast_1d(g), phi, k)
        worst = max(worst, (lhs - rhs) / rhs if rhs > 0 else lhs)
    return CheckResult("convolution inequality never violated", worst <= 1e-14, worst, 1e-14)


@_timed
def hat_inverse(trials=1000, max_len=500, seed=5, tol=1e-14):
    """d_t(hat phi) = phi and hat(d_t phi) = phi - phi^0, scaled by the running sums."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        k = float(rng.uniform(1e-3, 0.9))
        phi = rng.standard_normal(n)
        hat = mk.hat_transform(phi, k)
        back = mk.backward_difference(hat, k)
        scale = float(np.max(np.abs(hat))) / k
        worst = max(worst, float(np.max(np.abs(back - phi))) / scale)
        phi0 = float(rng.standard_normal())
        again = mk.hat_transform(mk.backward_difference(phi, k, initial=phi0), k)
        scale2 = float(np.max(np.abs(phi))) + abs(phi0)
        worst = max(worst, float(np.max(np.abs(again - (phi - phi0)))) / (scale2 * n))
    return CheckResult("hat / backward difference inverse", worst <= tol, worst, tol)


def quadrature_order_table(ks=(1 / 40, 1 / 80, 1 / 160, 1 / 320), t_end=1.0, gamma=1.0, delta=2.0):
    """Errors of the right-rectangle convolution for phi = 1 and phi = e^{-s}."""
    p = mk.KernelParams(gamma, delta)
    exact = {
        "1": gamma * (1.0 - math.exp(-delta * t_end)) / delta,
        "exp(-s)": gamma * (math.exp(-t_end) - math.exp(-delta * t_end)) / (delta - 1.0),
    }
    funcs = {"1": lambda s: 1.0, "exp(-s)": lambda s: math.exp(-s)}
    out = {}
    for name, f in funcs.items():
        errs = [mk.quadrature_error_estimate(f, t_end, k, p, exact=exact[name]) for k in ks]
        out[name] = (list(ks), errs, [errs[i] / errs[i + 1] for i in range(len(errs) - 1)])
    return out


@_timed
def quadrature_order(lo=1.7, hi=2.3):
    table = quadrature_order_table()
    ratios = [r for _, _, rs in table.values() for r in rs]
    worst = max(abs(r - 2.0) for r in ratios)
    ok = all(lo <= r <= hi for r in ratios)
    return CheckResult("right-rectangle error halves with k", ok, worst, hi - 2.0)


@_timed
def fem_identities(n=6, seed=6, tol=1e-12):
    """Partition of unity, constants in the kernels of A and B, skew convection."""
    rng = np.random.default_rng(seed)
    s = MixedSpace(build_unit_square_mesh(n))
    one = np.ones(s.n_p2)
    ones2 = np.concatenate([one, np.zeros(s.n_p2)])
    worst = abs(float(ones2 @ (s.mass @ ones2)) - 1.0)
    worst = max(worst, float(np.max(np.abs(s.stiffness @ ones2))))
    worst = max(worst, float(np.max(np.abs(s.divergence @ ones2))))
    for _ in range(5):
        v, w = (rng.standard_normal(s.n_vel) for _ in range(2))
        v[s.boundary_dofs] = 0.0
        w[s.boundary_dofs] = 0.0
        fv, fw = VelocityField(s, v), VelocityField(s, w)
        scale = math.sqrt(v @ s.stiffness @ v) * math.sqrt(w @ s.stiffness @ w) ** 2
        worst = max(worst, abs(apply_trilinear(fv, fw, fw)) / scale)
    return CheckResult("finite element identities", worst <= tol, worst, tol)


SUITE = (recursion_vs_direct, positivity, summation_by_parts, convolution_inequality,
         hat_inverse, quadrature_order, fem_identities)


def run_all():
    return [check() for check in SUITE]
