"""
Computable stability bounds for the fully discrete scheme.

The checks consume the per-step records of a completed run.  Bounds whose
constants are explicit (Gamma_1, M11, M12) are evaluated as inequalities and
reported as margins ``rhs - lhs``; the H^2-type bound, whose constant is not
computable, is monitored as a no-growth statistic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import cases
from .fem_core import convection_matrix, trilinear_gradient_first

ALPHA_SAFETY = 1e-12


def compute_alpha(k, mu, lambda1, delta):
    """Largest admissible decay rate, minus a small safety margin.

    alpha = min{delta, mu lambda1 / 2, ln(1 + mu lambda1 k / 2) / k}; the
    returned value satisfies 1 + (mu lambda1 / 2) k >= e^{alpha k}.
    """
    if not (k > 0 and mu > 0 and lambda1 > 0 and delta > 0):
        raise ValueError("compute_alpha needs positive arguments")
    if k >= 1:
        raise ValueError(f"time step k={k} violates 0 < k < 1")
    half = 0.5 * mu * lambda1
    alpha = min(delta, half, math.log1p(half * k) / k) - ALPHA_SAFETY
    if alpha <= 0:
        raise ValueError("no admissible decay rate for these parameters")
    assert 1.0 + half * k >= math.exp(alpha * k), "decay rate violates the step restriction"
    return alpha


def gamma1(alpha, k, mu, lambda1):
    """Gamma_1 = e^{-alpha k} mu - 2 (1 - e^{-alpha k}) / (k lambda1)."""
    return math.exp(-alpha * k) * mu + 2.0 * math.expm1(-alpha * k) / (k * lambda1)


def _arrays(records):
    t = np.array([r.t for r in records])
    l2 = np.array([r.l2_U for r in records])
    h1 = np.array([r.h1_U for r in records])
    hb = np.array([r.h1_Ubeta for r in records])
    fn = np.array([r.f_norm for r in records])
    return t, l2, h1, hb, fn


@dataclass
class Lemma41Result:
    margin: float
    lhs: float
    rhs: float
    gamma1: float
    envelope_C: float
    envelope_margin: float


def check_lemma41(records, alpha, mu, k, lambda1, initial_l2):
    """Exponentially weighted L2 / dissipation bound at the final step.

    lhs = ||U^N||^2 + Gamma_1 e^{-alpha t_N} k sum e^{alpha t_n} ||grad U^n||^2.
    The weighted energy argument run with the rate alpha/2 gives the
    computable right side

        e^{-alpha t_N} ||U^0||^2 + e^{-alpha k/2} e^{-alpha t_N} k sum e^{alpha t_n} ||f^n||^2 / (mu lambda1),

    which is the ``margin`` reported.  ``envelope_C`` is the constant C in
    C (e^{-alpha t_N} ||U^0||^2 + ||f||_inf^2) obtained by summing the
    geometric series, and ``envelope_margin`` the slack of that weaker form.
    """
    g1 = gamma1(alpha, k, mu, lambda1)
    if g1 <= 0:
        raise ValueError(f"Gamma_1 = {g1:.3e} <= 0: time step above the stability threshold")
    if not records:
        return Lemma41Result(0.0, initial_l2 ** 2, initial_l2 ** 2, g1, 1.0, 0.0)
    t, l2, h1, _, fn = _arrays(records)
    tN = t[-1]
    w = np.exp(alpha * (t - tN))  # e^{alpha (t_n - t_N)}, no overflow for long runs
    lhs = l2[-1] ** 2 + g1 * k * float(np.sum(w * h1 ** 2))
    forcing = math.exp(-0.5 * alpha * k) * k * float(np.sum(w * fn ** 2)) / (mu * lambda1)
    u0_term = math.exp(-alpha * tN) * initial_l2 ** 2
    rhs = u0_term + forcing
    geo = math.exp(-0.5 * alpha * k) * k * math.exp(alpha * k) / (math.expm1(alpha * k) * mu * lambda1)
    c_env = max(1.0, geo)
    env_rhs = c_env * (u0_term + float(np.max(fn)) ** 2)
    return Lemma41Result(float(rhs - lhs), lhs, rhs, g1, c_env, float(env_rhs - lhs))


@dataclass
class Lemma42Result:
    margin11: float  # min over steps of M11^2 - energy
    margin12: float  # min over windows of M12^2(l) - windowed dissipation
    M11_sq: np.ndarray
    energy: np.ndarray
    windows: list


def check_lemma42(records, alpha, mu, gamma, delta, k, lambda1, initial_l2, f_inf=None, windows=((10, 20),)):
    """Uniform energy bound M11^2 and windowed dissipation bound M12^2(l).

    ``windows`` lists (m, l) pairs; the windowed sum runs over steps
    m..m+l and is compared with M11^2(t_{m-1}) + l ||f||_inf^2 / (mu lambda1).
    """
    t, l2, h1, hb, fn = _arrays(records)
    if f_inf is None:
        f_inf = float(np.max(fn)) if fn.size else 0.0
    fsq = f_inf ** 2
    decay = math.exp(-delta * k)
    mem = decay / gamma * hb ** 2 if gamma > 0 else np.zeros_like(hb)
    energy = l2 ** 2 + mem

    def m11(tt):
        tt = np.asarray(tt, dtype=float)
        e = np.exp(-2.0 * alpha * tt)
        return e * initial_l2 ** 2 + (1.0 - e) * fsq / (alpha * mu * lambda1)

    M11 = m11(t)
    margin11 = float(np.min(M11 - energy)) if energy.size else 0.0
    diss = mu * h1 ** 2 + (delta / gamma * hb ** 2 if gamma > 0 else 0.0)
    out = []
    for m, l in windows:
        if m < 1 or m + l > len(records):
            raise ValueError(f"window (m={m}, l={l}) outside the run of {len(records)} steps")
        lhs = k * float(np.sum(diss[m - 1:m + l]))
        bound = float(m11((m - 1) * k)) + l * fsq / (mu * lambda1)
        out.append({"m": m, "l": l, "lhs": lhs, "M12_sq": bound, "margin": bound - lhs})
    margin12 = min((w["margin"] for w in out), default=0.0)
    return Lemma42Result(margin11, margin12, M11, energy, out)


@dataclass
class Lemma43Result:
    passed: bool
    first_half_max: float
    last_half_max: float
    plateau: float
    statistic: np.ndarray = field(repr=False)


def lemma43_statistic(records, gamma=0.0, delta=1.0, k=None):
    """||grad U^n||^2 (+ e^{-delta k}/gamma ||Stokes U_beta^n||^2 when recorded)."""
    h1 = np.array([r.h1_U for r in records])
    stat = h1 ** 2
    st = np.array([r.stokes_Ubeta for r in records])
    if gamma > 0 and k is not None and st.size and np.all(np.isfinite(st)):
        stat = stat + math.exp(-delta * k) / gamma * st ** 2
    return stat


def check_lemma43(records, gamma=0.0, delta=1.0, k=None, tolerance=1.05):
    """No-growth test: max over the last half <= tolerance * max over the first half."""
    stat = lemma43_statistic(records, gamma, delta, k)
    if stat.size == 0:
        return Lemma43Result(True, 0.0, 0.0, 0.0, stat)
    half = stat.size // 2
    first = float(np.max(stat[:max(half, 1)]))
    last = float(np.max(stat[half:]))
    plateau = float(stat[-1])
    return Lemma43Result(last <= tolerance * first, first, last, plateau, stat)


# ---------------------------------------------------------------------------
# trilinear continuity constant

@dataclass
class NEstimate:
    value: float
    samples: int
    sample_max: float  # best ratio among the random starts before refinement
    ratios: list = field(repr=False, default_factory=list)


def trilinear_ratio(space, u, v, w):
    """b(u, v, w) / (||grad u|| ||grad v|| ||grad w||)."""
    a = space.stiffness
    den = math.sqrt(u @ a @ u) * math.sqrt(v @ a @ v) * math.sqrt(w @ a @ w)
    if den == 0.0:
        raise ValueError("zero candidate")
    c = convection_matrix(space, u)
    vx, vy = space.split(v)
    wx, wy = space.split(w)
    return float(wx @ (c @ vx) + wy @ (c @ vy)) / den


def _dual_maximizer(space, g):
    """Unit-energy vector maximizing x . g, and the maximum sqrt(g^T A^{-1} g)."""
    f = space.free_dofs
    x = np.zeros(space.n_vel)
    x[f] = space.free_stiffness_factor.solve(g[f])
    val = math.sqrt(max(float(x[f] @ g[f]), 0.0))
    return (x / val if val > 0 else x), val


def estimate_N(space, samples=8, sweeps=30, seed=0, tol=1e-6):
    """Lower bound for sup b(u,v,w)/(|u|_1 |v|_1 |w|_1) by alternating ascent.

    Each random start is refined by maximizing exactly over one argument at
    a time (a Riesz-representer solve), which never decreases the ratio.
    """
    rng = np.random.default_rng(seed)
    f = space.free_dofs
    a = space.stiffness
    best = 0.0
    sample_best = 0.0
    ratios = []

    def unit(x):
        return x / math.sqrt(x @ a @ x)

    for _ in range(samples):
        u, v, w = (np.zeros(space.n_vel) for _ in range(3))
        # smooth-ish random starts: project white noise with A^{-1}
        for x in (u, v, w):
            x[f] = space.free_stiffness_factor.solve(rng.standard_normal(f.size))
        u, v, w = unit(u), unit(v), unit(w)
        r = trilinear_ratio(space, u, v, w)
        if r < 0:
            w = -w
            r = -r
        sample_best = max(sample_best, r)
        for _ in range(sweeps):
            old = r
            c = convection_matrix(space, u)
            vx, vy = space.split(v)
            w, r = _dual_maximizer(space, np.concatenate([c @ vx, c @ vy]))
            wx, wy = space.split(w)
            v, r = _dual_maximizer(space, np.concatenate([c.T @ wx, c.T @ wy]))
            u, r = _dual_maximizer(space, trilinear_gradient_first(space, v, w))
            if r - old <= tol * r:
                break
        ratios.append(r)
        best = max(best, r, sample_best)
    return NEstimate(best, samples, sample_best, ratios)


def uniqueness_margin(N_est, mu, nu, f_inf):
    """mu - 2 N nu^{-1} ||f||_inf; positive values give uniform-in-time errors."""
    if N_est < 0 or mu <= 0 or nu <= 0 or f_inf < 0:
        raise ValueError("uniqueness_margin needs N >= 0, mu, nu > 0, f_inf >= 0")
    return mu - 2.0 * N_est * f_inf / nu


def uniqueness_threshold(N_est, mu, nu):
    """Forcing level at which the uniqueness margin changes sign."""
    return math.inf if N_est == 0 else mu * nu / (2.0 * N_est)


def forcing_sup_norm(config, space, samples=201):
    """||f||_{L^inf(L^2)} over [0, T]; sampled in time for time-dependent forcing."""
    spec = config.forcing
    if spec.kind == "zero":
        return 0.0
    if spec.kind == "constant":
        return abs(spec.amplitude) * cases.ROTATING_FORCE_L2
    f, _ = cases.resolve_forcing(spec, config.manufactured_case())
    pts = space.quadrature_points()
    x, y = pts[..., 0], pts[..., 1]
    best = 0.0
    for t in np.linspace(0.0, config.T, samples):
        fx, fy = f(x, y, t)
        best = max(best, math.sqrt(float(np.sum(space._wdet * (fx ** 2 + fy ** 2)))))
    return best


@dataclass
class StabilityReport:
    alpha: float
    lambda1: float
    M11: float
    M12: dict
    lemma41_margin: float
    lemma42_margin: float
    lemma43_tail: float
    lemma43_passed: bool
    N_est: float
    f_inf: float
    uniqueness_margin: float

    def to_dict(self):
        return asdict(self)


def build_report(result, space, N_est=None, windows=((10, 20),)):
    """StabilityReport for a completed ``stepper.RunResult``.

    The lemma checks use the recorded discrete dual norms of the load; the
    uniqueness margin uses the continuous L^inf(L^2) norm of the forcing.
    """
    cfg = result.config
    rec = result.records
    alpha = compute_alpha(cfg.k, cfg.mu, result.lambda1, cfg.delta)
    l41 = check_lemma41(rec, alpha, cfg.mu, cfg.k, result.lambda1, result.initial_l2)
    win = [w for w in windows if w[0] >= 1 and w[0] + w[1] <= len(rec)]
    l42 = check_lemma42(rec, alpha, cfg.mu, cfg.gamma, cfg.delta, cfg.k, result.lambda1,
                        result.initial_l2, windows=win)
    l43 = check_lemma43(rec, cfg.gamma, cfg.delta, cfg.k)
    nu = cfg.kernel.total_viscosity(cfg.mu)
    f_inf = forcing_sup_norm(cfg, space)
    margin = float("nan") if N_est is None else uniqueness_margin(N_est, cfg.mu, nu, f_inf)
    return StabilityReport(
        alpha=alpha, lambda1=result.lambda1,
        M11=float(math.sqrt(l42.M11_sq[-1])) if l42.M11_sq.size else 0.0,
        M12={f"{w['m']},{w['l']}": w["M12_sq"] for w in l42.windows},
        lemma41_margin=l41.margin,
        lemma42_margin=min(l42.margin11, l42.margin12) if l42.windows else l42.margin11,
        lemma43_tail=l43.last_half_max, lemma43_passed=l43.passed,
        N_est=float("nan") if N_est is None else N_est, f_inf=f_inf, uniqueness_margin=margin)
