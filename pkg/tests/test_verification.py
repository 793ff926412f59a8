import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from oldroyd import cases, verification as ver
from oldroyd.fem_core import VelocityField, evaluate
from oldroyd.stepper import SimConfig, run

sys.path.insert(0, str(Path(__file__).parent))
from oracles import _collapsed_rule  # noqa: E402


@pytest.fixture(scope="module")
def case():
    return cases.ManufacturedCase(1.0, 1.0, 1.0, rate=1.0)


def test_error_of_a_field_against_itself_is_zero():
    space = ver.solution_space(4)
    u = VelocityField(space, np.random.default_rng(0).standard_normal(space.n_vel))
    assert ver.error_norms(u, u) == (0.0, 0.0)
    other = VelocityField(ver.solution_space(8), np.zeros(ver.solution_space(8).n_vel))
    with pytest.raises(ValueError, match="inject"):
        ver.error_norms(u, other)
    with pytest.raises(ValueError, match="time"):
        ver.error_norms(u, cases.ManufacturedCase(1.0, 1.0, 1.0))


def test_interpolation_error_matches_independent_quadrature(case):
    """Oracle: per-triangle Duffy-Gauss rule of higher order, point evaluation of the interpolant."""
    space = ver.solution_space(16)
    t = 0.4
    uh = space.interpolate(lambda x, y: case.velocity(x, y, t))
    l2, _ = ver.error_norms(uh, case, t)
    ref, w = _collapsed_rule(14)
    total = 0.0
    for tri in space.mesh.triangles:
        x0, x1, x2 = space.mesh.vertices[tri]
        jac = np.column_stack([x1 - x0, x2 - x0])
        pts = x0 + ref @ jac.T
        vals = evaluate(uh, pts)
        ux, uy = case.velocity(pts[:, 0], pts[:, 1], t)
        total += abs(np.linalg.det(jac)) * np.sum(w * ((vals[:, 0] - ux) ** 2 + (vals[:, 1] - uy) ** 2))
    assert l2 == pytest.approx(math.sqrt(total), rel=1e-10)


def test_interpolation_error_matches_brute_force_sampling(case):
    space = ver.solution_space(8)
    t = 0.4
    uh = space.interpolate(lambda x, y: case.velocity(x, y, t))
    l2, _ = ver.error_norms(uh, case, t)
    m = 300
    g = (np.arange(m) + 0.5) / m  # midpoint rule on a fine grid, independent of the mesh
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    vals = evaluate(uh, pts)
    ux, uy = case.velocity(pts[:, 0], pts[:, 1], t)
    brute = math.sqrt(np.mean((vals[:, 0] - ux) ** 2 + (vals[:, 1] - uy) ** 2))
    assert l2 == pytest.approx(brute, rel=2e-2)


def test_interpolation_error_rates(case):
    l2, h1 = [], []
    for n in (4, 8, 16):
        space = ver.solution_space(n)
        uh = space.interpolate(lambda x, y: case.velocity(x, y, 0.0))
        a, b = ver.error_norms(uh, case, 0.0)
        l2.append(a)
        h1.append(b)
    sizes = [math.sqrt(2) / n for n in (4, 8, 16)]
    assert ver.pairwise_rates(sizes, l2)[-1] == pytest.approx(3.0, abs=0.2)
    assert ver.pairwise_rates(sizes, h1)[-1] == pytest.approx(2.0, abs=0.15)


def test_error_triangle_inequality(case):
    space = ver.solution_space(4)
    rng = np.random.default_rng(1)
    a = space.interpolate(lambda x, y: case.velocity(x, y, 0.0))
    c = a.coefficients.copy()
    c[space.free_dofs] += 1e-2 * rng.standard_normal(space.free_dofs.size)
    b = VelocityField(space, c)
    ea, eb, eab = ver.error_norms(a, case, 0.0), ver.error_norms(b, case, 0.0), ver.error_norms(a, b)
    assert eb[0] <= ea[0] + eab[0] + 1e-14
    assert eb[1] <= ea[1] + eab[1] + 1e-12


def test_rates_and_fit():
    sizes = [1.0, 0.5, 0.25, 0.125]
    errs = [3.0 * s ** 2 for s in sizes]
    np.testing.assert_allclose(ver.pairwise_rates(sizes, errs), [2.0, 2.0, 2.0])
    assert ver.fitted_rate(sizes, errs) == pytest.approx(2.0)
    table = ver.RateTable("h", sizes, errs, [s for s in sizes])
    rows = table.rows()
    assert math.isnan(rows[0][4]) and rows[1][4] == pytest.approx(2.0) and rows[2][5] == pytest.approx(1.0)
    d = table.to_dict()
    assert d["fit_L2"] == pytest.approx(2.0) and len(d["rates_H1"]) == 3
    with pytest.raises(ValueError):
        ver.RateTable("h", [1.0], [1.0, 2.0], [1.0])


def test_pressure_shift_does_not_change_velocity():
    base = ver.manufactured_config(4, 0.1, 0.3)
    a = run(base, space=ver.solution_space(4))
    case = cases.ManufacturedCase(1.0, 1.0, 1.0, pressure_shift=7.0)
    # gradient of a constant is zero, so the forcing is unchanged
    np.testing.assert_allclose(case.forcing(0.3, 0.6, 0.2), base.manufactured_case().forcing(0.3, 0.6, 0.2))
    b = run(base, space=ver.solution_space(4), forcing=case.forcing)
    assert np.max(np.abs(a.state.U - b.state.U)) <= 1e-13 * np.max(np.abs(a.state.U))


def test_small_spatial_study_converges():
    table = ver.spatial_convergence_study(ver.manufactured_config(4, 0.01, 0.1), levels=(4, 8))
    assert table.err_l2[1] < table.err_l2[0] / 3
    assert table.err_h1[1] < table.err_h1[0] / 1.7
    assert table.meta["levels"] == [4, 8]


def test_self_convergence_first_order():
    base = ver.manufactured_config(4, 0.1, 0.5)
    table = ver.temporal_convergence_study(base, k_levels=(1 / 10, 1 / 20, 1 / 40), k_ref=1 / 320, t_eval=0.5)
    assert 0.8 <= table.fit_l2 <= 1.25
    with pytest.raises(ValueError, match="multiple"):
        ver.temporal_convergence_study(base, k_levels=(0.3,), k_ref=0.01, t_eval=0.5)


def test_error_split_identity_and_self_reference():
    base = ver.manufactured_config(4, 0.1, 0.5)
    split = ver.error_split_diagnostic(base, refine=4)
    assert split.identity_residual <= 1e-13
    assert np.all(split.e <= split.xi + split.eta + 1e-14)
    assert split.envelope_constant() > 0
    # referencing the run itself: e vanishes and the companion reproduces U
    own = run(base, space=ver.solution_space(4), sample_every=1)
    split0 = ver.error_split_diagnostic(base, reference=own.samples)
    assert np.max(split0.e) == 0.0
    assert np.max(split0.eta) <= 1e-8 * np.max(np.abs(own.state.U))


def test_nonsmooth_and_uniformity_bookkeeping():
    base = replace(ver.manufactured_config(4, 0.1, 1.0), forcing=cases.ForcingSpec("constant", 1.0),
                   initial=cases.InitialDataSpec("rough"))
    res = ver.nonsmooth_initial_data_experiment(base, k_levels=(1 / 10, 1 / 20), k_ref=1 / 80,
                                                t_eval=(0.5, 1.0), t_rate=1.0)
    assert res.scaling_k == 1 / 20
    assert res.scaled == pytest.approx([e * math.sqrt(t) for e, t in zip(res.err_t, (0.5, 1.0))])
    assert res.spread >= 1.0 and set(res.to_dict()) >= {"rates", "spread"}
    uni = ver.long_time_uniformity(base, k=1 / 10, k_ref=1 / 40, t_eval=(0.5, 1.0))
    assert uni.growth == pytest.approx(uni.err_l2[1] / uni.err_l2[0])


def test_zero_data_gives_zero_temporal_errors():
    base = SimConfig(k=0.1, T=0.5, mesh_n=4)
    table = ver.temporal_convergence_study(base, k_levels=(1 / 10, 1 / 20), k_ref=1 / 40, t_eval=0.5)
    assert table.err_l2 == [0.0, 0.0] and table.err_h1 == [0.0, 0.0]


def test_error_split_envelope_constant_stable_under_halving():
    consts = []
    for k in (1 / 10, 1 / 20, 1 / 40):
        split = ver.error_split_diagnostic(ver.manufactured_config(4, k, 1.0), refine=32)
        consts.append(split.envelope_constant())
    assert all(0.5 <= b / a <= 2.0 for a, b in zip(consts, consts[1:]))
