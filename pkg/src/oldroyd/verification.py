"""
Convergence studies: manufactured-solution errors in space, self-referenced
errors in time, the rough-initial-data experiment and the error splitting
through the linearized companion problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import cases
from .fem_core import MixedSpace, Quadrature, VelocityField, assemble_load, build_unit_square_mesh
from .stepper import SimConfig, linearized_companion, run

ERROR_QUADRATURE_POINTS = 6


def manufactured_forcing(case, space, t):
    """Load vector of the manufactured forcing at time t."""
    return assemble_load(space, case.forcing, t)


@lru_cache(maxsize=8)
def _error_space(mesh_n):
    # same mesh and dof numbering, higher-order quadrature for the error integrals
    return MixedSpace(build_unit_square_mesh(mesh_n), Quadrature.collapsed(ERROR_QUADRATURE_POINTS))


def error_norms(numeric, exact, t=None):
    """(L2, H1-seminorm) error of a velocity field.

    ``exact`` is either a VelocityField on the same space or an object with
    ``velocity(x, y, t)`` and ``velocity_gradient(x, y, t)`` (a
    ManufacturedCase), integrated with a collapsed Gauss rule.
    """
    space = numeric.space
    if isinstance(exact, VelocityField):
        if exact.space is not space:
            raise ValueError("reference lives on a different space; inject it first")
        d = numeric.coefficients - exact.coefficients
        return (math.sqrt(max(float(d @ (space.mass @ d)), 0.0)),
                math.sqrt(max(float(d @ (space.stiffness @ d)), 0.0)))
    if t is None:
        raise ValueError("time needed to evaluate a closed-form solution")
    mesh = space.mesh
    if mesh.n is None:
        raise ValueError("closed-form errors need a structured mesh")
    es = _error_space(mesh.n)
    if es.mesh.vertices.shape != mesh.vertices.shape or not np.array_equal(es.mesh.triangles, mesh.triangles):
        raise ValueError("mesh does not match the structured error mesh")
    vals, grads = es.values_at_quad(numeric.coefficients)  # (nt,nq,2), (nt,nq,2,2)
    pts = es.quadrature_points()
    x, y = pts[..., 0], pts[..., 1]
    ux, uy = exact.velocity(x, y, t)
    (a, b), (c, d) = exact.velocity_gradient(x, y, t)
    w = es._wdet
    e0 = (vals[..., 0] - ux) ** 2 + (vals[..., 1] - uy) ** 2
    e1 = ((grads[..., 0, 0] - a) ** 2 + (grads[..., 0, 1] - b) ** 2
          + (grads[..., 1, 0] - c) ** 2 + (grads[..., 1, 1] - d) ** 2)
    return math.sqrt(float(np.sum(w * e0))), math.sqrt(float(np.sum(w * e1)))


# ---------------------------------------------------------------------------
# rate tables

def pairwise_rates(sizes, errors):
    """log(e_i / e_{i+1}) / log(s_i / s_{i+1}) for successive levels."""
    s = np.asarray(sizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(e[:-1] / e[1:]) / np.log(s[:-1] / s[1:])


def fitted_rate(sizes, errors):
    """Least-squares slope of log(error) against log(size)."""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(errors, float)), 1)
    return float(slope)


@dataclass
class RateTable:
    label: str  # "h" or "k"
    sizes: list
    err_l2: list
    err_h1: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.sizes) == len(self.err_l2) == len(self.err_h1):
            raise ValueError("rate table columns differ in length")

    @property
    def rates_l2(self):
        return pairwise_rates(self.sizes, self.err_l2)

    @property
    def rates_h1(self):
        return pairwise_rates(self.sizes, self.err_h1)

    @property
    def fit_l2(self):
        return fitted_rate(self.sizes, self.err_l2)

    @property
    def fit_h1(self):
        return fitted_rate(self.sizes, self.err_h1)

    def rows(self):
        """(level, size, err_L2, err_H1, rate_L2, rate_H1); the first level has no rate."""
        r2, r1 = self.rates_l2, self.rates_h1
        out = []
        for i, (s, a, b) in enumerate(zip(self.sizes, self.err_l2, self.err_h1)):
            out.append((i, s, a, b, float("nan") if i == 0 else r2[i - 1],
                        float("nan") if i == 0 else r1[i - 1]))
        return out

    def to_dict(self):
        return {"label": self.label, "sizes": list(self.sizes), "err_L2": list(self.err_l2),
                "err_H1": list(self.err_h1), "rates_L2": [float(x) for x in self.rates_l2],
                "rates_H1": [float(x) for x in self.rates_h1], "fit_L2": self.fit_l2,
                "fit_H1": self.fit_h1, "meta": dict(self.meta)}


# ---------------------------------------------------------------------------
# studies

def manufactured_config(levels_n, k, T, mu=1.0, gamma=1.0, delta=1.0, nonlinear=True, **kw):
    return SimConfig(mu=mu, gamma=gamma, delta=delta, k=k, T=T, mesh_n=levels_n,
                     forcing=cases.ForcingSpec("manufactured"),
                     initial=cases.InitialDataSpec("manufactured"), nonlinear=nonlinear, **kw)


def spatial_convergence_study(base, levels=(4, 8, 16, 32)):
    """Errors against the manufactured solution at t = base.T on refined meshes.

    ``base`` is a SimConfig with manufactured data; only ``mesh_n`` varies.
    """
    case = base.manufactured_case()
    sizes, e0, e1 = [], [], []
    for n in levels:
        cfg = replace(base, mesh_n=n)
        space = solution_space(n)
        res = run(cfg, space=space)
        u = VelocityField(space, res.state.U)
        a, b = error_norms(u, case, res.state.t)
        sizes.append(math.sqrt(2.0) / n)
        e0.append(a)
        e1.append(b)
    return RateTable("h", sizes, e0, e1, {"k": base.k, "T": base.T, "levels": list(levels)})


@lru_cache(maxsize=8)
def solution_space(mesh_n):
    return MixedSpace(build_unit_square_mesh(mesh_n))


def _steps_for(times, k):
    out = []
    for t in times:
        n = int(round(t / k))
        if not math.isclose(n * k, t, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"evaluation time {t} is not a multiple of k={k}")
        out.append(n)
    return out


def self_convergence(base, k_levels, k_ref, t_eval):
    """Errors of coarse-k runs against a fine-k run on the same mesh.

    Returns (errors, reference samples) where errors[i][j] = (L2, H1) at
    k_levels[i] and t_eval[j].
    """
    space = solution_space(base.mesh_n)
    T = max(t_eval)
    ref_cfg = replace(base, k=k_ref, T=T)
    ref = run(ref_cfg, space=space, sample_steps=_steps_for(t_eval, k_ref))
    ref_at = [ref.samples[n] for n in _steps_for(t_eval, k_ref)]
    table = []
    for k in k_levels:
        res = run(replace(base, k=k, T=T), space=space, lambda1=ref.lambda1,
                  sample_steps=_steps_for(t_eval, k))
        row = []
        for n, uref in zip(_steps_for(t_eval, k), ref_at):
            d = res.samples[n] - uref
            row.append((math.sqrt(max(float(d @ (space.mass @ d)), 0.0)),
                        math.sqrt(max(float(d @ (space.stiffness @ d)), 0.0))))
        table.append(row)
    return table, ref


def temporal_convergence_study(base, k_levels=(1 / 20, 1 / 40, 1 / 80, 1 / 160), k_ref=1 / 1280, t_eval=1.0):
    """Self-referenced temporal errors at t_eval on the mesh of ``base``."""
    errs, _ = self_convergence(base, k_levels, k_ref, [t_eval])
    return RateTable("k", list(k_levels), [e[0][0] for e in errs], [e[0][1] for e in errs],
                     {"k_ref": k_ref, "t": t_eval, "mesh_n": base.mesh_n})


@dataclass
class NonsmoothResult:
    rate_table: RateTable  # temporal errors at t_rate
    t_eval: list
    scaling_k: float
    err_t: list  # L2 error at each t_eval for k = scaling_k
    scaled: list  # err(t) * sqrt(t)

    @property
    def spread(self):
        """max / min of err(t) sqrt(t) over the time grid."""
        return max(self.scaled) / min(self.scaled)

    def to_dict(self):
        return {"rates": self.rate_table.to_dict(), "t_eval": self.t_eval, "k": self.scaling_k,
                "err": self.err_t, "err_sqrt_t": self.scaled, "spread": self.spread}


def nonsmooth_initial_data_experiment(base, k_levels=(1 / 20, 1 / 40, 1 / 80, 1 / 160), k_ref=1 / 1280,
                                      t_eval=(0.25, 0.5, 1.0, 2.0), t_rate=1.0):
    """Temporal rate at t_rate and the t^{-1/2} signature at the finest k.

    All coarse runs share one fine reference computed up to max(t_eval).
    """
    times = sorted(set(t_eval) | {t_rate})
    errs, _ = self_convergence(base, k_levels, k_ref, times)
    j = times.index(t_rate)
    table = RateTable("k", list(k_levels), [e[j][0] for e in errs], [e[j][1] for e in errs],
                      {"k_ref": k_ref, "t": t_rate, "mesh_n": base.mesh_n})
    ks = min(k_levels)
    row = errs[list(k_levels).index(ks)]
    err_t = [row[times.index(t)][0] for t in t_eval]
    scaled = [e * math.sqrt(t) for e, t in zip(err_t, t_eval)]
    return NonsmoothResult(table, list(t_eval), ks, err_t, scaled)


@dataclass
class ErrorSplit:
    t: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    e: np.ndarray
    identity_residual: float
    k: float
    k_ref: float

    def envelope_constant(self):
        """max_n sqrt(t_n) ||xi_n|| / (k (1 + log(1/k))^{1/2})."""
        scale = self.k * math.sqrt(1.0 + math.log(1.0 / self.k))
        return float(np.max(np.sqrt(self.t) * self.xi) / scale)


def error_split_diagnostic(base, refine=32, reference=None):
    """Per-step (||xi||, ||eta||, ||e||) with xi = u_h - V, eta = U - V, e = U - u_h.

    The semidiscrete solution u_h is approximated by the same scheme run with
    k / refine; pass ``reference`` ({step: coefficients} on the coarse grid)
    to supply it directly.
    """
    space = solution_space(base.mesh_n)
    N = base.n_steps
    if reference is None:
        ref = run(replace(base, k=base.k / refine), space=space, sample_every=refine)
        reference = {n // refine: u for n, u in ref.samples.items()}
    res = run(base, space=space, sample_every=1)
    V = linearized_companion(base, reference, space=space)
    m = space.mass
    t, xi, eta, e = [], [], [], []
    resid = 0.0
    for n in range(1, N + 1):
        U, uh, v = res.samples[n], reference[n], V[n]
        dx, de, dd = uh - v, U - v, U - uh
        resid = max(resid, float(np.max(np.abs(dd - (de - dx)))))
        t.append(n * base.k)
        xi.append(math.sqrt(max(dx @ (m @ dx), 0.0)))
        eta.append(math.sqrt(max(de @ (m @ de), 0.0)))
        e.append(math.sqrt(max(dd @ (m @ dd), 0.0)))
    return ErrorSplit(np.array(t), np.array(xi), np.array(eta), np.array(e), resid, base.k, base.k / refine)


@dataclass
class UniformityResult:
    t_eval: list
    err_l2: list
    k: float
    k_ref: float

    @property
    def growth(self):
        """Error at the last time over error at the first."""
        return self.err_l2[-1] / self.err_l2[0]

    def to_dict(self):
        return {"t_eval": self.t_eval, "err_L2": self.err_l2, "k": self.k, "k_ref": self.k_ref,
                "growth": self.growth}


def long_time_uniformity(base, k=1 / 40, k_ref=1 / 320, t_eval=(1.0, 4.0)):
    """Self-referenced L2 error at several times for one step size."""
    errs, _ = self_convergence(base, [k], k_ref, list(t_eval))
    return UniformityResult(list(t_eval), [e[0] for e in errs[0]], k, k_ref)
