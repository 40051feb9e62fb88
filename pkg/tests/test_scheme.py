import logging

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from chemorepulsion.fem import FeFunction, make_spaces, norms
from chemorepulsion.mesh import unit_square_mesh
from chemorepulsion.mms import ConstantSolution, TrigSolution, forcing_terms
from chemorepulsion.projections import initialize_state
from chemorepulsion.scheme import Forcing, NonlinearSolveError, Scheme, SolverConfig, quadratic_rate_fit

TRIG = TrigSolution()


def trig_start(spaces):
    return initialize_state(spaces, TRIG.u_field, TRIG.sigma_field, TRIG.v_field)


@pytest.fixture(scope="module")
def spaces10():
    return make_spaces(unit_square_mesh(10))


def test_config_validation():
    for bad in (dict(k=0), dict(k=-1), dict(T=1e-6), dict(tol=0), dict(method="euler"),
                dict(linear_solver="cg"), dict(roundoff_floor=-1)):
        with pytest.raises(ValueError):
            SolverConfig(**bad)
    assert SolverConfig().n_steps == 100
    assert SolverConfig(method="picard").max_nl_iter == 50
    assert SolverConfig().max_nl_iter == 20
    with pytest.raises(ValueError, match="not an integer"):
        SolverConfig(k=3e-4, T=1e-3).n_steps


@pytest.mark.parametrize("method", ["picard", "newton"])
def test_constant_solution_is_a_fixed_point(spaces10, method):
    exact = ConstantSolution(1.7)
    forcing = forcing_terms(exact)
    state = initialize_state(spaces10, exact.u_field, exact.sigma_field, exact.v_field)
    scheme = Scheme(spaces10, SolverConfig(k=1e-3, T=1e-3, method=method))
    new, report = scheme.step(state, forcing)
    assert report.iterations == 1
    np.testing.assert_allclose(new.u.coefficients, state.u.coefficients, atol=1e-14)
    assert np.abs(new.sigma.coefficients).max() <= 1e-14
    np.testing.assert_allclose(new.v.coefficients, 1.7**2, atol=1e-12)


@pytest.mark.parametrize("method", ["picard", "newton"])
def test_decoupled_heat_equations_solved_in_one_iteration(spaces10, method):
    scheme = Scheme(spaces10, SolverConfig(k=1e-3, T=1e-3, method=method, coupling=0.0))
    state = trig_start(spaces10)
    new, report = scheme.step(state)
    # iteration 1 solves the linear system; iteration 2 only confirms it
    assert report.iterations == 2 and report.increments[1] <= 1e-13
    k = 1e-3
    u_ref = spla.spsolve((scheme.M_u / k + scheme.K_u).tocsc(), scheme.M_u @ state.u.coefficients / k)
    s_ref = spla.spsolve((scheme.M_s / k + scheme.B_s).tocsc(), scheme.M_s @ state.sigma.coefficients / k)
    np.testing.assert_allclose(new.u.coefficients, u_ref, atol=1e-12)
    np.testing.assert_allclose(new.sigma.coefficients, s_ref, atol=1e-10)


def test_picard_homogeneous_m20():
    spaces = make_spaces(unit_square_mesh(20))
    scheme = Scheme(spaces, SolverConfig(k=1e-4, T=5e-4, method="picard", tol=1e-6))
    result = scheme.run(trig_start(spaces))
    for r in result.reports:
        assert r.iterations <= 10
        assert all(b < a for a, b in zip(r.increments, r.increments[1:]))


def test_picard_newton_agree(spaces10):
    forcing = forcing_terms(TRIG)
    start = trig_start(spaces10)
    finals = {}
    iters = {}
    for method in ("picard", "newton"):
        scheme = Scheme(spaces10, SolverConfig(k=1e-4, T=5e-4, method=method))
        res = scheme.run(start, forcing)
        finals[method] = res.final
        iters[method] = [r.iterations for r in res.reports]
    for name in ("u", "sigma", "v"):
        diff = getattr(finals["picard"], name).coefficients - getattr(finals["newton"], name).coefficients
        assert norms(FeFunction(getattr(spaces10, name), diff)).l2 <= 1e-8
    assert all(n <= p for n, p in zip(iters["newton"], iters["picard"]))


@pytest.mark.parametrize("method,k", [("picard", 1e-3), ("newton", 1e-3), ("newton", 0.05)])
def test_homogeneous_energy_mass_balance(spaces10, method, k):
    scheme = Scheme(spaces10, SolverConfig(k=k, T=10 * k, method=method))
    start = trig_start(spaces10)
    res = scheme.run(start)
    m0 = scheme.mass_u @ start.u.coefficients
    assert m0 == pytest.approx(2.0, abs=1e-10)
    energies = [scheme.energy(start.u, start.sigma)] + [r.energy for r in res.reports]
    for r in res.reports:
        assert abs(r.energy_law_residual) <= 1e-8 * max(1.0, r.dissipation)
        assert abs(r.mass - m0) <= 1e-10
        assert abs(r.v_mass_balance_residual) <= 1e-9 * r.v_mass_scale
        assert r.scheme_residual <= 1e-5
    assert all(b <= a * (1 + 1e-13) for a, b in zip(energies, energies[1:]))


def test_forced_energy_law_includes_work(spaces10):
    scheme = Scheme(spaces10, SolverConfig(k=1e-4, T=3e-4))
    res = scheme.run(trig_start(spaces10), forcing_terms(TRIG))
    for r in res.reports:
        assert abs(r.energy_law_residual) <= 1e-8 * max(1.0, r.dissipation)
        assert abs(r.v_mass_balance_residual) <= 1e-9 * r.v_mass_scale
        assert r.scheme_residual <= 10 * 1e-6


def test_recover_v_examples(spaces10):
    scheme = Scheme(spaces10, SolverConfig(k=1e-3, T=1e-3))
    U, V = spaces10.u, spaces10.v
    zero = scheme.recover_v(V.zero(), U.zero())
    assert not zero.coefficients.any()
    one = scheme.recover_v(V.interpolate(lambda x, y, t: 1 + 0 * x), U.interpolate(lambda x, y, t: 1 + 0 * x))
    np.testing.assert_allclose(one.coefficients, 1.0, atol=1e-12)
    h = Forcing(h=lambda x, y, t: 2 + 0 * x)
    # v_t + v = u^2 + h with constant data: (v - 1)/k + v = 1 + 2
    v = scheme.recover_v(V.interpolate(lambda x, y, t: 1 + 0 * x), U.interpolate(lambda x, y, t: 1 + 0 * x), h)
    np.testing.assert_allclose(v.coefficients, (1 / 1e-3 + 3) / (1 / 1e-3 + 1), rtol=1e-12)


def test_time_grid_and_run_bookkeeping(spaces10):
    scheme = Scheme(spaces10, SolverConfig(k=1e-4, T=6e-4))
    seen = []
    res = scheme.run(trig_start(spaces10), snapshot_stride=2, on_step=lambda s, r: seen.append(s.n))
    assert seen == [1, 2, 3, 4, 5, 6]
    assert sorted(res.snapshots) == [2, 4, 6]
    assert res.final.n == 6 and res.final.t == 6 * 1e-4
    one = Scheme(spaces10, SolverConfig(k=1e-4, T=1e-4)).run(trig_start(spaces10))
    stepped, _ = scheme.step(trig_start(spaces10))
    np.testing.assert_array_equal(one.final.u.coefficients, stepped.u.coefficients)


def test_failure_reports_step_and_trace(spaces10):
    scheme = Scheme(spaces10, SolverConfig(k=1e-3, T=2e-3, method="picard", max_nl_iter=1))
    with pytest.raises(NonlinearSolveError) as info:
        scheme.run(trig_start(spaces10))
    assert info.value.step == 1
    assert info.value.trace.iterations == 1


def test_bicgstab_matches_direct(spaces10):
    start = trig_start(spaces10)
    a, _ = Scheme(spaces10, SolverConfig(k=1e-4, T=1e-4)).step(start, forcing_terms(TRIG))
    b, _ = Scheme(spaces10, SolverConfig(k=1e-4, T=1e-4, linear_solver="bicgstab")).step(start, forcing_terms(TRIG))
    np.testing.assert_allclose(a.u.coefficients, b.u.coefficients, atol=1e-8)
    np.testing.assert_allclose(a.sigma.coefficients, b.sigma.coefficients, atol=1e-7)


def test_uniqueness_warning(spaces10, caplog):
    scheme = Scheme(spaces10, SolverConfig(k=1e-2, T=1e-2, uniqueness_threshold=1.0))
    with caplog.at_level(logging.WARNING, logger="chemorepulsion.scheme"):
        scheme.step(trig_start(spaces10))
    assert any("may not be unique" in r.message for r in caplog.records)


def test_newton_residual_vanishes(spaces10):
    scheme = Scheme(spaces10, SolverConfig(k=1e-3, T=1e-3, tol=1e-12))
    start = trig_start(spaces10)
    new, _ = scheme.step(start)
    r_u, r_s = scheme.residual(start, new.u, new.sigma)
    scale = np.linalg.norm(scheme.M_u @ new.u.coefficients) / 1e-3
    assert np.linalg.norm(r_u) <= 1e-10 * scale and np.linalg.norm(r_s) <= 1e-10 * scale


def test_quadratic_rate_fit():
    C = 3.0
    seq = [1e-1]
    for _ in range(3):
        seq.append(C * seq[-1] ** 2)
    fit, spread, n = quadratic_rate_fit([seq, seq[:2]])
    assert fit == pytest.approx(C, rel=1e-10) and spread < 1e-10 and n == 4
    linear = [1e-1 * 0.1**i for i in range(5)]
    _, spread_lin, _ = quadratic_rate_fit([linear])
    assert spread_lin > 1.0
    assert quadratic_rate_fit([[1e-3, 1e-17]], floor=1e-15)[2] == 0
