"""
Backward Euler time stepping for the Oldroyd model on the Taylor-Hood space.

Each step solves the saddle-point system

    (M/k + (mu + k gamma) A + N(U)) U - B^T P = M U_prev / k + F^n - e^{-delta k} A U_beta_prev
    B U = 0,   int P = 0

where the implicit ``k gamma A`` term is the j = n entry of the memory
quadrature and the decayed accumulator carries the rest of the history.
The nonlinearity is resolved by Picard iteration written as a defect
correction: each iterate solves ``S_lag d = rhs - S(U^m) x^m`` with a
factorization ``S_lag`` that is only refreshed when the contraction rate of
the iteration degrades, so the fixed point is the Picard one while most
iterations cost a single back-substitution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import cases
from .fem_core import (MixedSpace, assemble_load, build_unit_square_mesh, convection_matrix,
                       estimate_lambda1, l2_project, stokes_operator_apply,
                       trilinear_first_argument_matrix, VelocityField)
from .memory_kernel import KernelParams, MemoryState, memory_advance

log = logging.getLogger(__name__)


class StepFailure(RuntimeError):
    """Nonlinear iteration did not converge; carries the partial trajectory."""

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


@dataclass(frozen=True)
class SimConfig:
    mu: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    k: float = 0.01
    T: float = 1.0
    mesh_n: int = 16
    picard_tol: float = 1e-10
    picard_max: int = 50
    forcing: cases.ForcingSpec = field(default_factory=cases.ForcingSpec)
    initial: cases.InitialDataSpec = field(default_factory=cases.InitialDataSpec)
    nonlinear: bool = True
    solver: str = "picard"  # picard | newton
    refactor: str = "adaptive"  # adaptive | always
    keep_history: bool = False
    stokes_norm: bool = False
    manufactured_rate: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.k < 1.0:
            raise ValueError(f"time step k={self.k} violates the standing assumption 0 < k < 1")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.T < 0:
            raise ValueError("final time must be nonnegative")
        if self.mesh_n < 2:
            raise ValueError("mesh_n must be at least 2 for an inf-sup stable mesh")
        if self.solver not in ("picard", "newton"):
            raise ValueError(f"unknown nonlinear solver {self.solver!r}")
        if self.refactor not in ("adaptive", "always"):
            raise ValueError(f"unknown refactor policy {self.refactor!r}")
        KernelParams(self.gamma, self.delta)

    @property
    def kernel(self):
        return KernelParams(self.gamma, self.delta)

    @property
    def n_steps(self):
        return int(math.ceil(self.T / self.k - 1e-9))

    def manufactured_case(self):
        return cases.ManufacturedCase(self.mu, self.gamma, self.delta, rate=self.manufactured_rate,
                                      nonlinear=self.nonlinear)


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: float
    l2_U: float
    h1_U: float
    h1_Ubeta: float
    picard_iters: int
    energy_slack: float
    div_residual: float
    f_norm: float = 0.0
    stokes_Ubeta: float = float("nan")


@dataclass(frozen=True, eq=False)
class TrajectoryState:
    U: np.ndarray
    P: np.ndarray
    memory: MemoryState
    n: int
    U_old: np.ndarray | None = None  # U^{n-1}, used only as an extrapolation seed

    @property
    def t(self):
        return self.n * self.memory.k


@dataclass
class RunResult:
    config: SimConfig
    records: list
    state: TrajectoryState
    samples: dict  # step index -> velocity coefficients
    lambda1: float
    initial_l2: float
    initial_h1: float


class OldroydSolver:
    """Operators and factorizations shared by all steps of one run.

    ``forcing`` overrides the configured body force with any callable
    ``f(x, y, t) -> (fx, fy)``.
    """

    def __init__(self, config, space=None, lambda1=None, forcing=None):
        self.config = config
        self.space = space or MixedSpace(build_unit_square_mesh(config.mesh_n))
        s = self.space
        f = s.free_dofs
        self.free = f
        self.params = config.kernel
        k = config.k
        self.k = k
        self.decay = self.params.decay(k)
        self.M_ff = s.mass[f][:, f].tocsr()
        self.A = s.stiffness
        self.B_f = s.divergence[:, f].tocsr()
        self.mvec = s.pressure_mass_vector
        self.base = (self.M_ff / k + (config.mu + k * config.gamma) * s.stiffness[f][:, f]).tocsr()
        self.lambda1 = estimate_lambda1(s) if lambda1 is None else lambda1
        self.case = config.manufactured_case() if "manufactured" in (
            config.forcing.kind, config.initial.kind) else None
        if forcing is None:
            self.forcing, self.time_dependent = cases.resolve_forcing(config.forcing, self.case)
        else:
            self.forcing, self.time_dependent = forcing, True
        self._static_load = None
        self._lu = None
        self.factorizations = 0

    # -- data ---------------------------------------------------------------
    def load(self, t):
        s = self.space
        if self.forcing is None:
            return np.zeros(s.n_vel)
        if not self.time_dependent:
            if self._static_load is None:
                self._static_load = assemble_load(s, self.forcing, 0.0)
            return self._static_load
        return assemble_load(s, self.forcing, t)

    def load_norm(self, load):
        """Dual norm sup (F, v)/||v|| over the discrete velocity space."""
        lf = load[self.free]
        return float(math.sqrt(max(lf @ self.space.free_mass_factor.solve(lf), 0.0)))

    def initial_state(self):
        cfg = self.config
        s = self.space
        u0 = cases.resolve_initial(cfg.initial, cfg.mesh_n, self.case)
        if u0 is None:
            U = np.zeros(s.n_vel)
        else:
            U = l2_project(s, u0, target="J_h").coefficients
        mem = MemoryState.zero(s.n_vel, self.k, self.params, keep_history=cfg.keep_history)
        return TrajectoryState(U, np.zeros(s.n_pr), mem, 0)

    # -- linear algebra -----------------------------------------------------
    def _transport(self, U):
        c = convection_matrix(self.space, U)
        n_full = sp.block_diag([c, c], format="csr")
        return n_full[self.free][:, self.free]

    def _factor(self, velocity_block):
        m = sp.csr_matrix(self.mvec[:, None])
        mat = sp.bmat([[velocity_block, -self.B_f.T, None],
                       [-self.B_f, None, m],
                       [None, m.T, None]], format="csc")
        self.factorizations += 1
        return spla.splu(mat, permc_spec="MMD_AT_PLUS_A")

    def _apply(self, block, x):
        nf = self.free.size
        u, p, lam = x[:nf], x[nf:-1], x[-1]
        ru = block @ u - self.B_f.T @ p
        rp = -(self.B_f @ u) + self.mvec * lam
        rl = self.mvec @ p
        return np.concatenate([ru, rp, [rl]])

    def residual(self, state_prev, U, P, load):
        """Residual of the full nonlinear step equations at (U, P)."""
        rhs = self._rhs(state_prev, load)
        block = self.base + (self._transport(U) if self.config.nonlinear else 0)
        x = np.concatenate([U[self.free], P, [0.0]])
        return rhs - self._apply(block, x)

    def _rhs(self, prev, load):
        f = self.free
        ru = self.M_ff @ prev.U[f] / self.k + load[f] - self.decay * (self.A @ prev.memory.u_beta)[f]
        return np.concatenate([ru, np.zeros(self.space.n_pr + 1)])

    # -- stepping -----------------------------------------------------------
    def picard_solve(self, rhs, guess, P_guess):
        """Fixed-point iteration on the frozen-transport saddle problem.

        Returns (U_free, P, iterations).  The factorization is kept between
        calls and refreshed when successive updates shrink by less than a
        factor 4 (or on every iteration with ``refactor="always"``).
        """
        cfg = self.config
        nf = self.free.size
        x = np.concatenate([guess, P_guess, [0.0]])
        if not cfg.nonlinear:
            if self._lu is None:
                self._lu = self._factor(self.base)
            x = x + self._lu.solve(rhs - self._apply(self.base, x))
            return x[:nf], x[nf:-1], 1
        refactor = self._lu is None or cfg.refactor == "always"
        prev_update = None
        update = float("nan")
        for it in range(1, cfg.picard_max + 1):
            U_full = self._full(x[:nf])
            transport = self._transport(U_full)
            block = self.base + transport
            r = rhs - self._apply(block, x)
            if refactor:
                jac = block
                if cfg.solver == "newton":
                    jac = block + trilinear_first_argument_matrix(self.space, U_full)[self.free][:, self.free]
                self._lu = self._factor(jac)
            d = self._lu.solve(r)
            x = x + d
            du = np.linalg.norm(d[:nf])
            nu = np.linalg.norm(x[:nf])
            update = 0.0 if du == 0.0 else du / max(nu, 1e-300)
            if update <= cfg.picard_tol:
                return x[:nf], x[nf:-1], it
            refactor = cfg.refactor == "always" or (
                prev_update is not None and update > 0.25 * prev_update)
            prev_update = update
        raise StepFailure(f"Picard iteration did not converge in {cfg.picard_max} iterations "
                          f"(last relative update {update:.3e}); try a smaller time step")

    def _full(self, u_free):
        U = np.zeros(self.space.n_vel)
        U[self.free] = u_free
        return U

    def step(self, prev, load=None):
        """One backward Euler step; returns the new state and its Picard count."""
        n = prev.n + 1
        t = n * self.k
        if load is None:
            load = self.load(t)
        rhs = self._rhs(prev, load)
        if prev.U_old is not None and self.config.nonlinear:
            guess = 2.0 * prev.U - prev.U_old
        else:
            guess = prev.U
        uf, P, iters = self.picard_solve(rhs, guess[self.free], prev.P)
        U = self._full(uf)
        mem = memory_advance(prev.memory, U)
        return TrajectoryState(U, P, mem, n, U_old=prev.U), iters

    # -- diagnostics ---------------------------------------------------------
    def energy(self, U, u_beta):
        """||U||^2 + (e^{-delta k}/gamma) ||grad U_beta||^2."""
        e = float(U @ (self.space.mass @ U))
        if self.params.gamma > 0:
            e += self.decay / self.params.gamma * float(u_beta @ (self.A @ u_beta))
        return e

    def record(self, prev, state, iters, load):
        s = self.space
        cfg = self.config
        U, ub = state.U, state.memory.u_beta
        l2 = float(np.sqrt(max(U @ (s.mass @ U), 0.0)))
        h1sq = max(float(U @ (self.A @ U)), 0.0)
        hbsq = max(float(ub @ (self.A @ ub)), 0.0)
        fn = self.load_norm(load)
        g, d = self.params.gamma, self.params.delta
        dissipation = cfg.mu * h1sq
        if g > 0:
            dissipation += 2.0 * d * self.decay / g * hbsq
        growth = (self.energy(U, ub) - self.energy(prev.U, prev.memory.u_beta)) / self.k
        slack = fn ** 2 / (cfg.mu * self.lambda1) - (growth + dissipation)
        div = float(np.linalg.norm(s.divergence @ U))
        stokes = float("nan")
        if cfg.stokes_norm:
            su = stokes_operator_apply(VelocityField(s, ub)).coefficients
            stokes = float(np.sqrt(max(su @ (s.mass @ su), 0.0)))
        return StepRecord(state.n, state.n * self.k, l2, math.sqrt(h1sq), math.sqrt(hbsq),
                          iters, slack, div, fn, stokes)


def run(config, space=None, lambda1=None, sample_every=None, sample_steps=None, start=None, forcing=None):
    """Execute ceil(T/k) backward Euler steps and collect a StepRecord per step.

    ``sample_every`` / ``sample_steps`` select steps whose velocity vector is
    kept in ``RunResult.samples`` (step 0 included).  ``start`` resumes from a
    checkpointed state.  ``forcing`` is passed on to OldroydSolver.
    """
    solver = OldroydSolver(config, space, lambda1, forcing)
    state = start if start is not None else solver.initial_state()
    s = solver.space
    want = set(sample_steps or ())
    samples = {}

    def keep(st):
        if (sample_every and st.n % sample_every == 0) or st.n in want:
            samples[st.n] = st.U.copy()

    keep(state)
    records = []
    initial_l2 = float(np.sqrt(state.U @ (s.mass @ state.U)))
    initial_h1 = float(np.sqrt(state.U @ (s.stiffness @ state.U)))
    for _ in range(state.n, config.n_steps):
        load = solver.load((state.n + 1) * config.k)
        try:
            new, iters = solver.step(state, load)
        except StepFailure as exc:
            raise StepFailure(str(exc), records) from None
        records.append(solver.record(state, new, iters, load))
        state = new
        keep(state)
    log.debug("run finished: %d steps, %d factorizations", len(records), solver.factorizations)
    return RunResult(config, records, state, samples, solver.lambda1, initial_l2, initial_h1)


def linearized_companion(config, reference, space=None, lambda1=None):
    """Solve the linear problem driven by the frozen reference nonlinearity.

    ``reference`` maps step index n (on this run's time grid) to the proxy
    semidiscrete velocity u_h(t_n).  Returns {n: V^n} including n = 0.
    """
    # the solver keeps the configured forcing; only its linear base matrix is used
    solver = OldroydSolver(config, space, lambda1)
    s = solver.space
    f = solver.free
    state = solver.initial_state()
    out = {0: state.U.copy()}
    lu = solver._factor(solver.base)
    for n in range(1, config.n_steps + 1):
        load = solver.load(n * config.k).copy()
        if config.nonlinear:
            if n not in reference:
                raise KeyError(f"reference velocity missing at step {n}")
            uh = reference[n]
            load = load - sp.block_diag([convection_matrix(s, uh)] * 2, format="csr") @ uh
        rhs = solver._rhs(state, load)
        x = lu.solve(rhs)
        V = solver._full(x[:f.size])
        state = TrajectoryState(V, x[f.size:-1], memory_advance(state.memory, V), n)
        out[n] = V
    return out


def save_checkpoint(path, state):
    np.savez(path, U=state.U, P=state.P, u_beta=state.memory.u_beta, n=state.n,
             k=state.memory.k, gamma=state.memory.params.gamma, delta=state.memory.params.delta,
             U_old=state.U if state.U_old is None else state.U_old,
             has_old=state.U_old is not None)


def load_checkpoint(path):
    with np.load(path) as z:
        params = KernelParams(float(z["gamma"]), float(z["delta"]))
        mem = MemoryState(z["u_beta"].copy(), float(z["k"]), params, int(z["n"]))
        old = z["U_old"].copy() if bool(z["has_old"]) else None
        return TrajectoryState(z["U"].copy(), z["P"].copy(), mem, int(z["n"]), old)
