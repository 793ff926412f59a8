from dataclasses import replace

import numpy as np
import pytest

from oldroyd import cases
from oldroyd.fem_core import MixedSpace, build_unit_square_mesh
from oldroyd.stepper import (OldroydSolver, SimConfig, StepFailure, linearized_companion, load_checkpoint, run,
                             save_checkpoint)
from oldroyd.verification import manufactured_config


@pytest.fixture(scope="module")
def space8():
    return MixedSpace(build_unit_square_mesh(8))


def smooth_forced(**kw):
    base = dict(mu=0.5, gamma=1.0, delta=1.0, k=0.05, T=0.5, mesh_n=8,
                forcing=cases.ForcingSpec("constant", 5.0), initial=cases.InitialDataSpec("smooth", 0.5))
    base.update(kw)
    return SimConfig(**base)


def test_zero_data_is_a_fixed_point(space8):
    res = run(SimConfig(k=0.1, T=1.0, mesh_n=8), space=space8)
    assert len(res.records) == 10
    assert np.all(res.state.U == 0) and np.all(res.state.memory.u_beta == 0)
    assert all(r.l2_U == 0 and r.h1_Ubeta == 0 for r in res.records)


@pytest.mark.parametrize("k,T,steps", [(0.1, 1.0, 10), (0.3, 1.0, 4), (0.25, 0.0, 0)])
def test_step_count_is_ceil(space8, k, T, steps):
    assert len(run(SimConfig(k=k, T=T, mesh_n=8), space=space8).records) == steps


def test_run_is_deterministic(space8):
    cfg = smooth_forced()
    a, b = run(cfg, space=space8), run(cfg, space=MixedSpace(build_unit_square_mesh(8)))
    assert np.array_equal(a.state.U, b.state.U)
    assert [r.l2_U for r in a.records] == [r.l2_U for r in b.records]


def test_discrete_divergence_and_energy_slack(space8):
    res = run(smooth_forced(T=1.0), space=space8)
    for r in res.records:
        assert r.div_residual <= 1e-10
        assert r.energy_slack >= -1e-10 * (1 + r.f_norm ** 2)
        assert r.f_norm > 0


def test_linear_problem_takes_one_iteration(space8):
    res = run(smooth_forced(nonlinear=False), space=space8)
    assert {r.picard_iters for r in res.records} == {1}


def test_picard_iteration_count_modest():
    cfg = manufactured_config(16, 0.01, 0.1)
    res = run(cfg)
    assert max(r.picard_iters for r in res.records) <= 10


def test_nonlinear_residual_is_small(space8):
    cfg = smooth_forced(T=0.15)
    solver = OldroydSolver(cfg, space8)
    state = solver.initial_state()
    for _ in range(3):
        load = solver.load((state.n + 1) * cfg.k)
        new, _ = solver.step(state, load)
        r = solver.residual(state, new.U, new.P, load)
        scale = np.linalg.norm(solver._rhs(state, load))
        assert np.linalg.norm(r) <= 1e-8 * scale
        state = new


@pytest.mark.parametrize("change", [dict(solver="newton"), dict(refactor="always")])
def test_solver_variants_reach_the_same_fixed_point(space8, change):
    cfg = smooth_forced()
    a = run(cfg, space=space8).state.U
    b = run(replace(cfg, **change), space=space8).state.U
    assert np.max(np.abs(a - b)) <= 1e-8 * np.max(np.abs(a))


def test_newton_needs_fewer_iterations(space8):
    cfg = smooth_forced(refactor="always", picard_tol=1e-12)
    picard = sum(r.picard_iters for r in run(cfg, space=space8).records)
    newton = sum(r.picard_iters for r in run(replace(cfg, solver="newton"), space=space8).records)
    assert newton <= picard


def test_memory_history_consistent(space8):
    res = run(smooth_forced(keep_history=True), space=space8)
    mem = res.state.memory
    direct = mem.direct()
    assert np.max(np.abs(mem.u_beta - direct)) <= 1e-12 * np.max(np.abs(direct))


def test_samples_collected(space8):
    res = run(smooth_forced(), space=space8, sample_every=5, sample_steps=[3])
    assert sorted(res.samples) == [0, 3, 5, 10]
    assert np.array_equal(res.samples[10], res.state.U)


def test_checkpoint_resume_matches_straight_run(space8, tmp_path):
    cfg = smooth_forced()
    full = run(cfg, space=space8)
    half = run(replace(cfg, T=0.25), space=space8)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, half.state)
    resumed = run(cfg, space=space8, start=load_checkpoint(path))
    assert len(resumed.records) == 5
    # a fresh solver rebuilds its lagged factorization, so agreement is to Picard tolerance
    scale = np.max(np.abs(full.state.U))
    assert np.max(np.abs(resumed.state.U - full.state.U)) <= 1e-8 * scale
    assert np.max(np.abs(resumed.state.memory.u_beta - full.state.memory.u_beta)) <= 1e-8 * scale


def test_companion_reproduces_linear_run(space8):
    cfg = smooth_forced(nonlinear=False)
    res = run(cfg, space=space8, sample_every=1)
    comp = linearized_companion(cfg, {}, space8)
    assert np.max(np.abs(comp[cfg.n_steps] - res.state.U)) <= 1e-12 * np.max(np.abs(res.state.U))


def test_companion_with_exact_reference_reproduces_nonlinear_run(space8):
    cfg = smooth_forced()
    res = run(cfg, space=space8, sample_every=1)
    comp = linearized_companion(cfg, res.samples, space8)
    # frozen nonlinearity evaluated at the nonlinear solution itself
    assert np.max(np.abs(comp[cfg.n_steps] - res.state.U)) <= 1e-8 * np.max(np.abs(res.state.U))
    with pytest.raises(KeyError):
        linearized_companion(cfg, {1: res.samples[1]}, space8)


@pytest.mark.parametrize("kw,match", [
    (dict(k=1.5), "0 < k < 1"), (dict(k=0.0), "0 < k < 1"), (dict(mu=0.0), "mu"),
    (dict(mesh_n=1), "mesh_n"), (dict(solver="anderson"), "solver"), (dict(gamma=-1.0), "gamma"),
    (dict(T=-1.0), "final time"),
])
def test_invalid_config_rejected(kw, match):
    with pytest.raises(ValueError, match=match):
        SimConfig(**kw)


def test_step_failure_carries_records(space8):
    cfg = smooth_forced(picard_max=1, k=0.2, T=1.0, forcing=cases.ForcingSpec("constant", 500.0))
    with pytest.raises(StepFailure) as info:
        run(cfg, space=space8)
    assert "smaller time step" in str(info.value)
    assert isinstance(info.value.records, list)
