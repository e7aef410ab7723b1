"""Acceptance gate: one callable per criterion, each pinned to its tolerance.

Every criterion returns a :class:`CriterionResult`; :func:`run_all` executes
the requested subset in order, forwarding the noisy-solve audits of the
recovery criteria into the bound criterion, and prints one pass/fail line
per criterion.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import calderon as cal
from . import certify, lowrank, quadratic, solvers
from .hilbert import build_grid_1d, build_grid_2d, whiten
from .internal import (
    assemble_internal_operator,
    build_internal_problem,
    certificate_norm,
    find_condition_interval,
    linear_system_oracle,
    loglog_slope,
    measurement_vector,
    optimal_alpha,
    recover_internal,
    run_delta_sweep,
    sufficient_condition,
)
from .pde1d import direct_division_oracle, step_potential


@dataclass
class CriterionResult:
    index: int
    name: str
    passed: bool
    runtime: float
    details: dict = field(default_factory=dict)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} criterion {self.index}: {self.name} ({self.runtime:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.time()
        result = fn(*args, **kwargs)
        result.runtime = time.time() - t0
        return result
    return wrapper


_TIGHT = solvers.SolverOptions(tol_gap=1e-9, tol_feas=1e-10)


@_timed
def criterion_1():
    """Jump-size interval of the sufficient condition at n = 401."""
    t0 = time.time()
    lower, upper = find_condition_interval(n=401)
    runtime = time.time() - t0
    ok = (-0.75 <= lower <= -0.65) and (0.75 <= upper <= 0.85) and runtime <= 10.0
    return CriterionResult(
        1, "sufficient-condition interval located by bisection", ok, 0.0,
        {"lower": lower, "upper": upper, "solve_time": runtime},
    )


@_timed
def criterion_2():
    """Exact internal recovery for three jump sizes at n = 41."""
    grid = build_grid_1d(41, 0.0, 1.0)
    rows = []
    ok = True
    for q0 in (-0.3, 0.3, 0.5):
        t0 = time.time()
        problem, meas = build_internal_problem(grid, step_potential(grid, q0=q0))
        op = assemble_internal_operator(problem)
        cert = certify.precertificate(op, [problem.model])
        q_hat, f_white, report = recover_internal(problem, meas, "exact", opts=_TIGHT)
        oracle = direct_division_oracle(problem.u_true)
        rel_err = problem.l2.norm(q_hat.values - oracle.values) \
            / problem.l2.norm(oracle.values)
        f_true = whiten(problem.field_true)
        f_rel = float(np.linalg.norm(f_white - f_true) / np.linalg.norm(f_true))
        elapsed = time.time() - t0
        row_ok = (
            cert.ndsc_pass and rel_err <= 1e-3
            and report.extras["rank_ratio"] <= 1e-4
            and f_rel <= 1e-4 and elapsed <= 120.0
            and report.status == solvers.STATUS_CONVERGED
        )
        ok = ok and row_ok
        rows.append({
            "q0": q0, "ndsc_pass": cert.ndsc_pass, "w_norm": cert.max_w_norm,
            "rel_err_vs_oracle": rel_err, "rank_ratio": report.extras["rank_ratio"],
            "f_rel_err": f_rel, "time": elapsed, "ok": row_ok,
        })
    return CriterionResult(2, "exact internal recovery with certificates", ok, 0.0,
                           {"rows": rows})


@_timed
def criterion_3(context):
    """Linear robustness rate over the noise sweep, five seeds each."""
    deltas = (1e-2, 3e-3, 1e-3, 3e-4)
    rows = run_delta_sweep(
        n=41, q0=0.5, deltas=deltas, c=1.0, seeds=range(5), with_bounds=True,
    )
    by_delta = {}
    for r in rows:
        by_delta.setdefault(r["delta"], []).append(r["err_L2"])
    medians = [float(np.median(by_delta[d])) for d in deltas]
    slope = loglog_slope(deltas, medians)
    ok = 0.8 <= slope <= 1.2
    context["bound_reports"].extend(r["bounds"] for r in rows)
    return CriterionResult(3, "linear robustness rate (internal)", ok, 0.0,
                           {"slope": slope, "medians": dict(zip(deltas, medians))})


@_timed
def criterion_4():
    """Certificate dominance and equality of the condition forms."""
    grid = build_grid_1d(41, 0.0, 1.0)
    rng = np.random.default_rng(42)
    ok = True
    worst_gap = -np.inf
    worst_form = 0.0
    for _ in range(50):
        amp1, amp2 = rng.uniform(0.0, 0.4, size=2)
        ph1, ph2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        q_vals = 1.0 + amp1 * np.sin(2 * np.pi * grid.nodes + ph1) \
            + amp2 * np.cos(4 * np.pi * grid.nodes + ph2)
        problem, _ = build_internal_problem(grid, q_vals)
        q_n = problem.q_normalized
        alpha = rng.uniform(q_n.min() - 0.5, q_n.max() + 0.5)
        exact, bound = certificate_norm(problem, float(alpha))
        worst_gap = max(worst_gap, exact - bound)
        ok = ok and exact <= bound + 1e-9
        lhs_n, lhs_u, _ = sufficient_condition(problem)
        form_gap = abs(lhs_n - lhs_u) / max(1.0, abs(lhs_n))
        worst_form = max(worst_form, form_gap)
        ok = ok and form_gap <= 1e-10
    return CriterionResult(4, "certificate norm dominated by analytic bound", ok, 0.0,
                           {"worst_exact_minus_bound": worst_gap,
                            "worst_form_gap": worst_form})


@_timed
def criterion_5():
    """A-priori tangent estimate and empirical constant domination."""
    grid = build_grid_1d(41, 0.0, 1.0)
    problem, _ = build_internal_problem(grid, step_potential(grid, q0=0.5))
    op = assemble_internal_operator(problem)
    from .internal import apriori_constant

    c_phi = apriori_constant(problem)
    rng = np.random.default_rng(5)
    u_n, q_n = problem.u_normalized, problem.q_normalized
    ok = True
    worst = -np.inf
    for _ in range(500):
        a = rng.standard_normal(grid.n)
        b = rng.standard_normal(grid.n)
        f_vals = np.outer(u_n, a) + np.outer(b, q_n)
        fw = problem.h2.whitener @ f_vals @ np.diag(np.sqrt(grid.quad_weights)).T
        f_norm = float(np.linalg.norm(fw))
        phi_norm = float(np.linalg.norm(op.apply([fw])))
        worst = max(worst, f_norm - c_phi * phi_norm)
        ok = ok and f_norm <= c_phi * phi_norm + 1e-9
    sigma_min = certify.tangent_injectivity(op, [problem.model])
    ok = ok and (1.0 / sigma_min) <= c_phi
    return CriterionResult(5, "a-priori estimate on the tangent space", ok, 0.0,
                           {"c_phi": c_phi, "inv_sigma_min": 1.0 / sigma_min,
                            "worst_slack": worst})


@_timed
def criterion_6():
    """Subdifferential lemma suite and projector identities."""
    rng = np.random.default_rng(6)
    ok = True
    disagreements = 0
    for trial in range(200):
        n1 = rng.integers(3, 7)
        n2 = rng.integers(3, 7)
        u = rng.standard_normal(n1)
        u /= np.linalg.norm(u)
        v = rng.standard_normal(n2)
        v /= np.linalg.norm(v)
        model = lowrank.RankOneModel(sigma=float(rng.uniform(0.5, 2.0)), u=u, v=v)
        kind = trial % 5
        if kind == 0:
            h = np.outer(u, v)
        elif kind == 1:
            w = lowrank.project_tangent_complement(rng.standard_normal((n1, n2)), model)
            wn = lowrank.operator_norm(w)
            scale = rng.choice([0.3, 0.9, 1.0 - 1e-9, 1.0 + 1e-9, 1.5])
            h = np.outer(u, v) + (scale / wn) * w if wn > 0 else np.outer(u, v)
        elif kind == 2:
            h = rng.standard_normal((n1, n2))
        elif kind == 3:
            h = np.outer(u, v) + 1e-3 * rng.standard_normal((n1, n2))
        else:
            h = 0.5 * np.outer(u, v)
        answers = [lowrank.subdiff_check(h, model, form=f)[0]
                   for f in ("i", "ii", "iii", "iv")]
        if len(set(answers)) != 1:
            disagreements += 1
            ok = False
    proj_defect = 0.0
    for _ in range(100):
        n1, n2 = 6, 5
        u = rng.standard_normal(n1)
        u /= np.linalg.norm(u)
        v = rng.standard_normal(n2)
        v /= np.linalg.norm(v)
        model = lowrank.RankOneModel(sigma=1.0, u=u, v=v)
        m = rng.standard_normal((n1, n2))
        pt = lowrank.project_tangent(m, model)
        ptp = lowrank.project_tangent_complement(m, model)
        proj_defect = max(
            proj_defect,
            float(np.linalg.norm(lowrank.project_tangent(pt, model) - pt)),
            abs(float(np.sum(pt * ptp))),
            max(0.0, lowrank.operator_norm(ptp) - lowrank.operator_norm(m)),
        )
    ok = ok and proj_defect <= 1e-10
    return CriterionResult(6, "subdifferential equivalences and projectors", ok, 0.0,
                           {"disagreements": disagreements,
                            "projector_defect": proj_defect})


@_timed
def criterion_7():
    """Duality gap and per-block optimality link on converged solves."""
    checks = []
    ok = True

    # internal equality solve
    grid = build_grid_1d(41, 0.0, 1.0)
    problem, meas = build_internal_problem(grid, step_potential(grid, q0=0.5))
    op = assemble_internal_operator(problem)
    z = measurement_vector(problem, meas)
    blocks, report = solvers.solve_equality_nnm(op, z, opts=_TIGHT)
    checks.append(("internal", op, z, blocks, report))

    # single-block identity operator
    rng = np.random.default_rng(7)
    ident = solvers.AffineOperator(np.eye(4), [(2, 2)])
    target = np.outer(rng.standard_normal(2), rng.standard_normal(2))
    blocks_i, report_i = solvers.solve_equality_nnm(ident, target.ravel(), opts=_TIGHT)
    checks.append(("identity", ident, target.ravel(), blocks_i, report_i))

    results = []
    for name, op_k, z_k, blocks_k, rep_k in checks:
        audit = solvers.duality_gap(blocks_k, rep_k.dual, op_k, z_k)
        link = max(abs(d) for d in audit.per_block)
        row_ok = (
            rep_k.status == solvers.STATUS_CONVERGED
            and abs(audit.gap) <= 1e-6 * (1.0 + rep_k.objective)
            and link <= 1e-6
            and not audit.flagged
        )
        ok = ok and row_ok
        results.append({"case": name, "gap": audit.gap, "link_defect": link,
                        "ok": row_ok})
    return CriterionResult(7, "strong duality audit on equality solves", ok, 0.0,
                           {"cases": results})


@_timed
def criterion_8(context):
    """Bregman and prediction bounds on every noisy solve of the suite."""
    reports = context["bound_reports"]
    ok = len(reports) > 0 and all(r["all_ok"] for r in reports)
    worst_breg = max((r["bregman"] - r["bregman_bound"] for r in reports),
                     default=np.nan)
    worst_pred = max((r["prediction_error"] - r["prediction_bound"] for r in reports),
                     default=np.nan)
    return CriterionResult(8, "robustness bounds on noisy solves", ok, 0.0,
                           {"n_reports": len(reports),
                            "worst_bregman_slack": worst_breg,
                            "worst_prediction_slack": worst_pred})


@_timed
def criterion_9():
    """Prox correctness: KKT membership and the descent oracle."""
    rng = np.random.default_rng(9)
    ok = True
    worst_kkt = 0.0
    for _ in range(100):
        n1 = rng.integers(2, 9)
        n2 = rng.integers(2, 9)
        m = rng.standard_normal((n1, n2))
        tau = float(rng.uniform(0.1, 2.0))
        out = lowrank.svt_prox(m, tau)
        h = (m - out) / tau
        defect = max(
            max(0.0, lowrank.operator_norm(h) - 1.0),
            abs(float(np.sum(h * out)) - lowrank.nuclear_norm(out)),
        )
        worst_kkt = max(worst_kkt, defect)
        ok = ok and defect <= 1e-8

    def subgradient_oracle(m, tau, iters=100_000):
        # strongly convex objective (modulus 1): classical 2 / (k + 2) steps
        x = m.copy()
        best = x.copy()
        best_val = np.inf
        for k in range(1, iters + 1):
            u_s, s, vt = np.linalg.svd(x, full_matrices=False)
            sub = (x - m) + tau * (u_s * (s > 1e-12)) @ vt
            val = 0.5 * np.linalg.norm(x - m) ** 2 + tau * s.sum()
            if val < best_val:
                best_val = val
                best = x.copy()
            x = x - (2.0 / (k + 2.0)) * sub
        return best

    oracle_gap = 0.0
    for seed in (1, 2):
        m = np.random.default_rng(seed).standard_normal((3, 3))
        ref = subgradient_oracle(m, 0.7)
        out = lowrank.svt_prox(m, 0.7)
        oracle_gap = max(oracle_gap, float(np.linalg.norm(ref - out)))
        ok = ok and oracle_gap <= 1e-6
    return CriterionResult(9, "SVT prox optimality", ok, 0.0,
                           {"worst_kkt_defect": worst_kkt, "oracle_gap": oracle_gap})


@_timed
def criterion_10():
    """PhaseLift recovery and its conditional robustness rate."""
    t0 = time.time()
    inst = quadratic.make_phase_retrieval(5, 20, 7)
    x_hat, _, report = quadratic.recover_phaselift(inst, opts=_TIGHT)
    base_err = quadratic.sign_aligned_error(x_hat, inst.x_true)
    ok = base_err <= 1e-3 and report.status == solvers.STATUS_CONVERGED

    # locate an instance whose pre-certificate verifies the source condition
    ndsc_seed = None
    cert_w = None
    for seed in range(7, 15):
        probe = quadratic.make_phase_retrieval(5, 20, seed)
        op = solvers.AffineOperator(
            np.stack([v.ravel() for v in probe.measurements]), [(5, 5)]
        )
        u = probe.x_true / np.linalg.norm(probe.x_true)
        model = lowrank.RankOneModel(sigma=1.0, u=u, v=u)
        cert = certify.precertificate(op, [model], symmetric=True)
        if cert.ndsc_pass:
            ndsc_seed, cert_w = seed, cert.max_w_norm
            inst_v = probe
            break
    slope = None
    if ndsc_seed is not None:
        deltas = (1e-1, 1e-2, 1e-3, 1e-4)
        medians = []
        for d in deltas:
            errs = []
            for s in range(3):
                z_noisy = quadratic.add_noise(inst_v, d, 100 + s)
                xh, _, _ = quadratic.recover_phaselift(
                    inst_v, mode="regularized", lam=d, z=z_noisy
                )
                errs.append(quadratic.sign_aligned_error(xh, inst_v.x_true))
            medians.append(float(np.median(errs)))
        slope = loglog_slope(deltas, medians)
        ok = ok and 0.8 <= slope <= 1.2
    ok = ok and (time.time() - t0) <= 60.0
    return CriterionResult(10, "PhaseLift recovery and robustness", ok, 0.0,
                           {"noiseless_err": base_err, "ndsc_seed": ndsc_seed,
                            "ndsc_w_norm": cert_w, "slope": slope})


@_timed
def criterion_11(context):
    """Boundary-measurement pipeline at the configured desk scale."""
    t0 = time.time()
    grid = build_grid_2d(17, 17)
    problem = cal.build_calderon_problem(grid, m=4, n_modes=4)
    system = cal.assemble_calderon_system(problem)
    f_true = problem.true_stack_whitened()
    resid = float(np.linalg.norm(system.op_full.apply(f_true) - system.z_full))
    ok = resid <= 1e-9

    cert = cal.precertificate_study(grid, 4, problem.q_coeffs, [2, 3, 4])
    table_ok = all(
        (np.isnan(row["max_tangent_residual"])
         or row["max_tangent_residual"] <= 1e-8)
        for row in cert
    )
    ok = ok and table_ok
    final = cert[-1]
    q_err = None
    slope = None
    if final["max_w_norm"] < 1.0:
        meas = cal.make_calderon_measurements(problem, system)
        opts = solvers.SolverOptions(tol_gap=1e-8, tol_feas=1e-9)
        q_hat, _, report = cal.recover_calderon(problem, system, meas, "exact",
                                                opts=opts)
        q_err = float(np.linalg.norm(q_hat - problem.q_coeffs)
                      / np.linalg.norm(problem.q_coeffs))
        ok = ok and q_err <= 1e-2 and report.status == solvers.STATUS_CONVERGED

        # conditional noisy sweep feeding the bound criterion
        full_cert = certify.precertificate(system.op_full, problem.models)
        deltas = (3e-3, 1e-3, 3e-4)
        errs = []
        for d in deltas:
            meas_d = cal.make_calderon_measurements(problem, system, delta=d, seed=11)
            q_d, blocks_d, _ = cal.recover_calderon(problem, system, meas_d,
                                                    "noisy", c=1.0)
            errs.append(float(np.linalg.norm(q_d - problem.q_coeffs)))
            context["bound_reports"].append(certify.robustness_bounds(
                system.op_full, blocks_d, f_true, problem.models,
                full_cert.h_blocks, full_cert.p, 1.0, d,
            ))
        slope = loglog_slope(deltas, errs)
        ok = ok and 0.7 <= slope <= 1.3
    elapsed = time.time() - t0
    ok = ok and elapsed <= 600.0
    return CriterionResult(11, "boundary-measurement pipeline", ok, 0.0,
                           {"truth_residual": resid, "w_norm_table": cert,
                            "q_rel_err": q_err, "noisy_slope": slope,
                            "time": elapsed})


@_timed
def criterion_12():
    """Forward-map derivative: convergence, symmetry, spectrum."""
    grid = build_grid_2d(17, 17)
    problem = cal.build_calderon_problem(grid, m=4, n_modes=4)
    q = problem.q_values
    h = 0.5 * np.cos(np.pi * grid.xs) * np.sin(np.pi * grid.ys) + 0.3

    deriv = cal.frechet_derivative(problem, q, h, method="onesided")
    lam_0 = cal.dtn_map(grid, q, problem.bdry, method="onesided")
    errs = []
    for t in (1e-2, 1e-3, 1e-4):
        lam_t = cal.dtn_map(grid, q + t * h, problem.bdry, method="onesided")
        errs.append(float(np.linalg.norm((lam_t - lam_0) / t - deriv)))
    orders = [np.log10(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    ok = all(o >= 0.9 for o in orders)

    pairing = cal.derivative_pairing(problem, q, h)
    sym_defect = float(np.abs(pairing - pairing.T).max())
    ok = ok and sym_defect <= 1e-8

    profile = cal.compactness_diagnostic(problem, q, h, mode_counts=(4, 8, 12))
    tails_ok = all(np.all(np.diff(sv) <= 1e-12) for sv in profile.values())
    ok = ok and tails_ok
    return CriterionResult(12, "forward-map derivative checks", ok, 0.0,
                           {"orders": orders, "symmetry_defect": sym_defect,
                            "profiles": {k: v.tolist() for k, v in profile.items()}})


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
    10: criterion_10,
    11: criterion_11,
    12: criterion_12,
}

_NEEDS_CONTEXT = {3, 8, 11}


def run_all(indices=None, printer=print):
    """Run the acceptance criteria in order and print one line per result.

    The bound criterion aggregates the noisy-solve audits produced by the
    recovery criteria, so running a subset that includes 8 without 3 or 11
    reports it as failed for lack of evidence.
    """
    indices = sorted(indices) if indices else sorted(CRITERIA)
    context = {"bound_reports": []}
    results = []
    for idx in indices:
        fn = CRITERIA[idx]
        result = fn(context) if idx in _NEEDS_CONTEXT else fn()
        results.append(result)
        if printer is not None:
            printer(result.line())
    return results
