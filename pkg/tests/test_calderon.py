import numpy as np
import pytest

from liftrec import certify
from liftrec.calderon import (
    assemble_calderon_operator,
    assemble_calderon_system,
    build_calderon_problem,
    coeffs_from_function,
    compactness_diagnostic,
    derivative_pairing,
    dtn_flux,
    dtn_map,
    extract_q_calderon,
    frechet_derivative,
    gauss_newton_baseline,
    harmonic_extension_2d,
    make_basis_w,
    make_boundary_basis,
    make_calderon_measurements,
    precertificate_study,
    recover_calderon,
    solve_schrodinger_2d,
)
from liftrec.errors import EigenvalueHit
from liftrec.hilbert import build_grid_2d
from liftrec.solvers import SolverOptions

TIGHT = SolverOptions(tol_gap=1e-8, tol_feas=1e-9)


@pytest.fixture(scope="module")
def small_problem():
    grid = build_grid_2d(9, 9)
    problem = build_calderon_problem(grid, m=4, n_modes=3)
    system = assemble_calderon_system(problem)
    return grid, problem, system


def test_zero_potential_affine_state_and_flux():
    grid = build_grid_2d(9, 9)
    trace = 1.0 + 2.0 * grid.xs[grid.boundary_index] \
        - 0.5 * grid.ys[grid.boundary_index]
    u = solve_schrodinger_2d(grid, None, trace)
    expected = 1.0 + 2.0 * grid.xs - 0.5 * grid.ys
    assert np.abs(u - expected).max() < 1e-10
    flux = dtn_flux(grid, u)
    normals = grid.boundary_normals
    expected_flux = 2.0 * normals[:, 0] - 0.5 * normals[:, 1]
    assert np.abs(flux - expected_flux).max() < 1e-9


def test_manufactured_solution_exact_on_quadratics():
    # the 5-point stencil differentiates quadratics exactly, so the
    # manufactured pair (1 + x^2 + y^2, q = 4 / u) is reproduced to round-off
    grid = build_grid_2d(17, 17)
    u_exact = 1.0 + grid.xs ** 2 + grid.ys ** 2
    q = 4.0 / u_exact
    u = solve_schrodinger_2d(grid, q, u_exact[grid.boundary_index])
    assert np.abs(u - u_exact).max() < 1e-12


def test_manufactured_solution_convergence():
    # non-polynomial manufactured pair: u = 2 + sin(pi x) sin(pi y) with
    # q = Lap(u) / u, positive state, nonsingular operator
    errs = []
    hs = []
    for nn in (9, 17, 33):
        grid = build_grid_2d(nn, nn)
        s = np.sin(np.pi * grid.xs) * np.sin(np.pi * grid.ys)
        u_exact = 2.0 + s
        q = -2.0 * np.pi ** 2 * s / u_exact
        u = solve_schrodinger_2d(grid, q, u_exact[grid.boundary_index])
        errs.append(np.abs(u - u_exact).max())
        hs.append(grid.h)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 1.8


def test_manufactured_flux_accuracy():
    grid = build_grid_2d(33, 33)
    s = np.sin(np.pi * grid.xs) * np.sin(np.pi * grid.ys)
    u_exact = 2.0 + s
    q = -2.0 * np.pi ** 2 * s / u_exact
    u = solve_schrodinger_2d(grid, q, u_exact[grid.boundary_index])
    flux = dtn_flux(grid, u)
    normals = grid.boundary_normals
    bidx = grid.boundary_index
    cs = np.pi * np.cos(np.pi * grid.xs[bidx]) * np.sin(np.pi * grid.ys[bidx])
    sc = np.pi * np.sin(np.pi * grid.xs[bidx]) * np.cos(np.pi * grid.ys[bidx])
    exact_flux = cs * normals[:, 0] + sc * normals[:, 1]
    assert np.abs(flux - exact_flux).max() <= 10.0 * grid.h


def test_eigenvalue_hit_2d():
    grid = build_grid_2d(9, 9)
    lam1 = 2 * (4.0 / grid.h ** 2) * np.sin(np.pi * grid.h / 2.0) ** 2
    with pytest.raises(EigenvalueHit):
        solve_schrodinger_2d(grid, np.full(grid.n_nodes, -lam1),
                             np.ones(grid.boundary_index.size))


def test_harmonic_extension_2d():
    grid = build_grid_2d(9, 9)
    ext = harmonic_extension_2d(grid, np.ones(grid.boundary_index.size))
    assert np.abs(ext - 1.0).max() < 1e-12


def test_basis_w_orthonormal_and_continuous():
    grid = build_grid_2d(17, 17)
    basis = make_basis_w(grid, 4)
    gram = basis.matrix.T @ (grid.area_weights[:, None] * basis.matrix)
    assert np.abs(gram - np.eye(4)).max() <= 1e-10
    coeffs = coeffs_from_function(basis, grid, np.ones(grid.n_nodes))
    assert np.allclose(basis.integrals, coeffs)
    with pytest.raises(ValueError):
        make_basis_w(grid, 5)


def test_boundary_basis_floor_and_gram():
    grid = build_grid_2d(9, 9)
    bdry = make_boundary_basis(grid, 4)
    assert bdry.f1_floor > 0
    gram = bdry.matrix.T @ (grid.boundary_weights[:, None] * bdry.matrix)
    assert np.linalg.cond(gram) < 1e3


def test_truth_satisfies_all_constraints(small_problem):
    grid, problem, system = small_problem
    f_true = problem.true_stack_whitened()
    resid = np.linalg.norm(system.op_full.apply(f_true) - system.z_full)
    assert resid <= 1e-9


def test_phi3_vanishes_on_truth_and_antisymmetry(small_problem):
    grid, problem, system = small_problem
    nd, nb, n, m = problem.n_data, grid.boundary_index.size, grid.n_nodes, 4
    out = system.op_full.apply(problem.true_stack_whitened())
    z3 = out[nd * nb + nd * n:]
    assert np.abs(z3).max() <= 1e-11
    # antisymmetry: swapping the pair roles flips the sign
    rng = np.random.default_rng(0)
    stack = [rng.standard_normal((n, m)) for _ in range(nd)]
    bidx = grid.boundary_index
    uinv = problem.x_unwhitener
    c_vals = [uinv @ s for s in stack]
    f = problem.bdry.matrix
    pair_01 = f[:, 1][:, None] * c_vals[0][bidx] - f[:, 0][:, None] * c_vals[1][bidx]
    pair_10 = f[:, 0][:, None] * c_vals[1][bidx] - f[:, 1][:, None] * c_vals[0][bidx]
    assert np.allclose(pair_01, -pair_10)


def test_scaling_invariance_is_broken_by_integral_block(small_problem):
    # the factor pair (mu u, q / mu) produces the same lifted stack, so the
    # flux and boundary-pair residuals cannot see mu; only the integral
    # block, built from the known potential integral, pins the scale
    grid, problem, system = small_problem
    mu = 2.0
    wrong_int_q = problem.int_q / mu          # integral of q / mu
    for i in range(problem.n_data):
        c_true = np.outer(mu * problem.u_stack[i], problem.q_coeffs / mu)
        diag = np.sum(c_true * problem.basis_w.matrix, axis=1)
        assert np.abs(diag - problem.u_stack[i] * problem.q_values).max() < 1e-12
        v_i = problem.u_stack[i] - problem.f_tilde_stack[i]
        phi2 = c_true @ problem.basis_w.integrals - wrong_int_q * v_i
        z2 = wrong_int_q * problem.f_tilde_stack[i]
        assert np.linalg.norm(phi2 - z2) > 1e-2


def test_operator_adjoint_consistency(small_problem):
    grid, problem, system = small_problem
    assert system.op_full.check_adjoint(n_probes=100) < 1e-9


def test_extraction_is_exact_on_rank_one(small_problem):
    grid, problem, system = small_problem
    for i in range(problem.n_data):
        c_true = np.outer(problem.u_stack[i], problem.q_coeffs)
        got = extract_q_calderon(c_true, problem.bdry.matrix[:, i], problem)
        assert np.abs(got - problem.q_coeffs).max() < 1e-10
        zero = extract_q_calderon(np.zeros_like(c_true),
                                  problem.bdry.matrix[:, i], problem)
        assert np.abs(zero).max() == 0.0


def test_exact_recovery_small(small_problem):
    grid, problem, system = small_problem
    meas = make_calderon_measurements(problem, system)
    q_hat, blocks, report = recover_calderon(problem, system, meas, "exact",
                                             opts=TIGHT)
    rel = np.linalg.norm(q_hat - problem.q_coeffs) / np.linalg.norm(problem.q_coeffs)
    assert rel <= 1e-6
    assert report.feas_residual <= 1e-7


def test_constant_potential_single_datum():
    grid = build_grid_2d(9, 9)
    basis = make_basis_w(grid, 4)
    coeffs = coeffs_from_function(basis, grid, np.full(grid.n_nodes, 0.8))
    problem = build_calderon_problem(grid, m=4, n_modes=1, q_coeffs=coeffs)
    system = assemble_calderon_system(problem)
    meas = make_calderon_measurements(problem, system)
    q_hat, _, report = recover_calderon(problem, system, meas, "exact", opts=TIGHT)
    rel = np.linalg.norm(q_hat - problem.q_coeffs) / np.linalg.norm(problem.q_coeffs)
    assert rel <= 1e-5


def test_noisy_recovery_keeps_hard_constraints(small_problem):
    grid, problem, system = small_problem
    meas = make_calderon_measurements(problem, system, delta=1e-3, seed=5)
    q_hat, blocks, report = recover_calderon(problem, system, meas, "noisy", c=1.0)
    assert report.extras["hard_residual"] <= 1e-8
    err = np.linalg.norm(q_hat - problem.q_coeffs)
    assert err <= 1e-1


def test_recover_mode_validation(small_problem):
    grid, problem, system = small_problem
    noisy = make_calderon_measurements(problem, system, delta=1e-3, seed=1)
    with pytest.raises(ValueError):
        recover_calderon(problem, system, noisy, "exact")
    clean = make_calderon_measurements(problem, system)
    with pytest.raises(ValueError):
        recover_calderon(problem, system, clean, "noisy")


def test_lifted_stack_wrapper(small_problem):
    from liftrec.calderon import as_lifted_stack

    grid, problem, system = small_problem
    stack = as_lifted_stack(problem, problem.true_stack_whitened())
    assert len(stack) == problem.n_data
    for i, fld in enumerate(stack.fields):
        assert fld.values.shape == (grid.n_nodes, 4)
        assert np.allclose(fld.values, np.outer(problem.u_stack[i],
                                                problem.q_coeffs), atol=1e-10)
    with pytest.raises(ValueError):
        from liftrec.calderon import LiftedStack
        from liftrec.hilbert import BivariateField, identity_inner_product

        LiftedStack(fields=[
            BivariateField(identity_inner_product(2), identity_inner_product(2),
                           np.eye(2)),
            BivariateField(identity_inner_product(3), identity_inner_product(2),
                           np.zeros((3, 2))),
        ])


def test_assemble_operator_wrapper(small_problem):
    grid, problem, _ = small_problem
    op = assemble_calderon_operator(problem)
    assert op.matrix.shape[1] == problem.n_data * grid.n_nodes * 4


def test_frechet_zero_direction(small_problem):
    grid, problem, _ = small_problem
    deriv = frechet_derivative(problem, problem.q_values, np.zeros(grid.n_nodes))
    assert np.abs(deriv).max() == 0.0


def test_frechet_forward_difference(small_problem):
    grid, problem, _ = small_problem
    q = problem.q_values
    h = 0.2 + 0.1 * grid.xs * grid.ys
    deriv = frechet_derivative(problem, q, h, method="onesided")
    lam0 = dtn_map(grid, q, problem.bdry, method="onesided")
    errs = []
    for t in (1e-2, 1e-3, 1e-4):
        lam_t = dtn_map(grid, q + t * h, problem.bdry, method="onesided")
        errs.append(np.linalg.norm((lam_t - lam0) / t - deriv))
    orders = [np.log10(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 0.9


def test_derivative_pairing_symmetric(small_problem):
    grid, problem, _ = small_problem
    h = 0.3 + 0.2 * np.sin(np.pi * grid.xs) * np.sin(np.pi * grid.ys)
    pairing = derivative_pairing(problem, problem.q_values, h)
    assert np.abs(pairing - pairing.T).max() <= 1e-8


def test_compactness_diagnostic_profiles(small_problem):
    grid, problem, _ = small_problem
    h = 0.3 + 0.2 * np.sin(np.pi * grid.xs) * np.sin(np.pi * grid.ys)
    profiles = compactness_diagnostic(problem, problem.q_values, h,
                                      mode_counts=(3, 6, 9))
    for sv in profiles.values():
        assert np.all(sv >= 0)
        assert np.all(np.diff(sv) <= 1e-12)
    # richer data families expose smaller tail singular values
    assert profiles[9][-1] <= profiles[6][-1] <= profiles[3][-1]
    zero = compactness_diagnostic(problem, problem.q_values,
                                  np.zeros(grid.n_nodes), mode_counts=(3,))
    assert np.abs(zero[3]).max() == 0.0


def test_gauss_newton_baseline(small_problem):
    grid, problem, _ = small_problem
    at_truth = gauss_newton_baseline(problem, problem.q_coeffs, iters=3)
    assert at_truth["misfits"][0] <= 1e-10
    rng = np.random.default_rng(2)
    q0 = problem.q_coeffs + 0.05 * rng.standard_normal(4)
    near = gauss_newton_baseline(problem, q0, iters=6)
    assert near["misfits"][-1] <= near["misfits"][0]
    far = gauss_newton_baseline(problem, 10.0 * problem.q_coeffs, iters=4)
    assert len(far["misfits"]) >= 1          # history emitted, no assertion


def test_precertificate_study_rows():
    grid = build_grid_2d(9, 9)
    basis = make_basis_w(grid, 4)
    profile = 1.0 + 0.3 * np.cos(np.pi * (grid.xs - 0.5)) * np.cos(np.pi * (grid.ys - 0.5))
    coeffs = coeffs_from_function(basis, grid, profile)
    rows = precertificate_study(grid, 4, coeffs, [1, 2, 3])
    assert [r["N"] for r in rows] == [1, 2, 3]
    for row in rows:
        if not row.get("degenerate"):
            assert row["max_tangent_residual"] <= 1e-8
            assert row["sigma_min"] > 0


def test_alternative_scale_functional_keeps_truth_feasible():
    grid = build_grid_2d(9, 9)
    mask = (np.abs(grid.xs - 0.5) <= 0.25) & (np.abs(grid.ys - 0.5) <= 0.25)
    g_weights = grid.area_weights * mask
    problem = build_calderon_problem(grid, m=4, n_modes=2, g_weights=g_weights)
    system = assemble_calderon_system(problem)
    resid = np.linalg.norm(system.op_full.apply(problem.true_stack_whitened())
                           - system.z_full)
    assert resid <= 1e-9


def test_boundary_restriction_constant_reported(small_problem):
    from liftrec.calderon import boundary_restriction_constant

    grid, problem, system = small_problem
    c_tr = boundary_restriction_constant(problem)
    assert np.isfinite(c_tr) and c_tr > 0
