"""Recovery of a 1-D potential from internal state measurements.

Pipeline: lift the unknown to the bivariate field F(x, y) = u(x) q(y),
measure it through the affine map

    F  ->  (diagonal of F in L2,  integral of F over y in H2),

and recover F as the minimum-nuclear-norm solution of the measurement
equations.  The first measurement block is represented directly in L2 on
the full grid: composing the state map F -> v_F with the Laplacian isometry
of the zero-boundary H2 structure turns it into plain diagonal extraction,
and the noiseless data vector is then the pointwise product u * q.

The module also houses everything certificate-related for this geometry:
the closed-form pre-certificate family indexed by a scalar offset alpha,
its exact and analytic off-tangent norms, the scalar sufficient condition
for non-degeneracy, and the a-priori stability constant.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateInput
from .hilbert import (
    BivariateField,
    Grid1D,
    assemble_inner_product,
    build_grid_1d,
    second_difference_1d,
    whiten,
)
from .lowrank import RankOneModel, operator_norm, project_tangent_complement
from .pde1d import (
    Potential1D,
    StateField1D,
    harmonic_extension_1d,
    inject_h2_noise,
    solve_schrodinger_1d,
    step_potential,
)
from .solvers import (
    AffineOperator,
    SolverOptions,
    solve_equality_nnm,
    solve_regularized_nnm,
)


@dataclass
class InternalProblem:
    """Ground-truth data of one internal-measurement instance."""

    grid: Grid1D
    q_true: Potential1D
    f_a: float
    f_b: float
    u_true: StateField1D
    h2: object
    l2: object
    int_q: float
    f_tilde: StateField1D
    sigma: float = 0.0
    u_normalized: np.ndarray = field(default=None, repr=False)
    q_normalized: np.ndarray = field(default=None, repr=False)
    model: RankOneModel = field(default=None, repr=False)
    _uinv: np.ndarray = field(default=None, repr=False)

    @property
    def field_true(self):
        return BivariateField(
            self.h2, self.l2, np.outer(self.u_true.values, self.q_true.values)
        )

    @property
    def whitened_true(self):
        return whiten(self.field_true)

    @property
    def x_unwhitener(self):
        """Cached inverse of the H2 whitening factor."""
        if self._uinv is None:
            self._uinv = scipy.linalg.solve_triangular(
                self.h2.whitener, np.eye(self.grid.n), lower=False
            )
        return self._uinv


@dataclass
class InternalMeasurements:
    """Measurement data, exact or polluted through a noisy state."""

    z1_values: np.ndarray          # L2 block on the full grid
    z2_values: np.ndarray          # H2 block
    delta: float
    seed: int
    u_delta: StateField1D
    delta_meas: float              # induced bound on the measurement perturbation


def build_internal_problem(grid, q, f_a=1.0, f_b=1.0, delta=0.0, seed=0):
    """Forward-solve an instance and assemble its measurements.

    The potential and the boundary data must be positive, which keeps the
    state positive on the closed interval.  With ``delta > 0`` the state is
    polluted by seeded Gaussian noise of exact H2 norm ``delta`` and both
    measurement components are rebuilt from the noisy state.
    """
    if not isinstance(q, Potential1D):
        q = Potential1D(grid, np.asarray(q, float))
    if q.inf <= 0:
        raise ValueError(f"potential must be positive, inf q = {q.inf}")
    if f_a <= 0 or f_b <= 0:
        raise ValueError("boundary data must be positive")

    u = solve_schrodinger_1d(grid, q, f_a, f_b)
    if u.values.min() <= 0:
        raise ValueError("state is not positive; check the potential")
    h2 = assemble_inner_product(grid, "h2")
    l2 = assemble_inner_product(grid, "l2")
    f_tilde = harmonic_extension_1d(grid, f_a, f_b)

    u_norm = h2.norm(u.values)
    q_norm = l2.norm(q.values)
    sigma = u_norm * q_norm
    u_n = u.values / u_norm
    q_n = q.values / q_norm
    uw = h2.whiten_vec(u_n)
    vw = l2.whiten_vec(q_n)
    model = RankOneModel(
        sigma=sigma, u=uw / np.linalg.norm(uw), v=vw / np.linalg.norm(vw)
    )

    problem = InternalProblem(
        grid=grid, q_true=q, f_a=float(f_a), f_b=float(f_b), u_true=u,
        h2=h2, l2=l2, int_q=q.integral, f_tilde=f_tilde,
        sigma=sigma, u_normalized=u_n, q_normalized=q_n, model=model,
    )
    measurements = make_measurements(problem, delta=delta, seed=seed)
    return problem, measurements


def make_measurements(problem, delta=0.0, seed=0):
    """Assemble (noisy) measurements from a forward-solved instance.

    The noiseless first block is the diagonal of the true lifted field,
    the pointwise product ``u * q``; state noise enters it through the
    full-grid second-difference stencil and enters the second block
    directly.
    """
    u = problem.u_true
    u_delta = inject_h2_noise(u, delta, seed, problem.h2)
    noise = u_delta.values - u.values
    d2 = second_difference_1d(problem.grid)
    z1 = u.values * problem.q_true.values + d2 @ noise
    z2 = problem.int_q * u_delta.values
    delta_meas = delta * np.sqrt(1.0 + problem.int_q ** 2)
    return InternalMeasurements(
        z1_values=z1, z2_values=z2, delta=float(delta), seed=int(seed),
        u_delta=u_delta, delta_meas=float(delta_meas),
    )


def assemble_internal_operator(problem):
    """Whitened matrix form of the internal measurement map.

    Block 1 extracts the diagonal, measured with the L2 quadrature weights
    on the full grid (the Laplacian-isometry representation of the state
    block); block 2 integrates over the second variable, measured in H2.
    The adjoint is the plain matrix transpose in whitened coordinates.
    """
    n = problem.grid.n
    uinv = problem.x_unwhitener
    sqrtw = np.sqrt(problem.grid.quad_weights)

    # row-major vec: entry (i, j) of the whitened matrix sits at i * n + j;
    # sqrt(w_k) * diag(F)_k = sum_i Uinv[k, i] * Fw[i, k]
    a1 = np.zeros((n, n * n))
    for k in range(n):
        a1[k, np.arange(n) * n + k] = uinv[k, :]

    a2 = np.zeros((n, n * n))
    for i in range(n):
        a2[i, i * n:(i + 1) * n] = sqrtw

    return AffineOperator(np.vstack([a1, a2]), [(n, n)])


def measurement_vector(problem, measurements):
    """Whitened codomain vector consumed by the solvers."""
    z1 = np.sqrt(problem.grid.quad_weights) * measurements.z1_values
    z2 = problem.h2.whiten_vec(measurements.z2_values)
    return np.concatenate([z1, z2])


def extract_q_from_trace(f_values, problem):
    """Potential from the boundary rows of a recovered field.

    The boundary rows of the true field are the boundary data times the
    potential, so the weighted average ``(f_a F[0, :] + f_b F[-1, :]) /
    (f_a^2 + f_b^2)`` reproduces it exactly and is linear in the field.
    """
    f_a, f_b = problem.f_a, problem.f_b
    denom = f_a ** 2 + f_b ** 2
    if denom == 0:
        raise ValueError("boundary data vanishes; trace extraction undefined")
    vals = (f_a * f_values[0, :] + f_b * f_values[-1, :]) / denom
    return Potential1D(problem.grid, vals)


def recover_internal(problem, measurements, mode="exact", c=1.0, opts=None):
    """Solve the convex relaxation and extract the potential.

    ``exact`` runs the equality-constrained solve (requires noiseless
    measurements); ``noisy`` runs the regularized solve with weight
    ``lambda = c * delta``.  Returns the potential estimate, the whitened
    recovered field, and the solve report (with the rank diagnostic
    ``sigma2 / sigma1`` in ``extras``).
    """
    op = assemble_internal_operator(problem)
    z = measurement_vector(problem, measurements)
    if mode == "exact":
        if measurements.delta != 0:
            raise ValueError("exact mode requires noiseless measurements")
        blocks, report = solve_equality_nnm(op, z, opts=opts)
    elif mode == "noisy":
        lam = c * measurements.delta
        if lam <= 0:
            raise ValueError("noisy mode requires delta > 0")
        blocks, report = solve_regularized_nnm(op, z, lam, opts=opts)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    f_white = blocks[0]
    svals = np.linalg.svd(f_white, compute_uv=False)
    report.extras["rank_ratio"] = float(svals[1] / svals[0]) if svals[0] > 0 else 0.0
    f_field = _unwhiten_field(problem, f_white)
    q_hat = extract_q_from_trace(f_field.values, problem)
    return q_hat, f_white, report


def _unwhiten_field(problem, f_white):
    from .hilbert import unwhiten

    return unwhiten(f_white, problem.h2, problem.l2)


def linear_system_oracle(problem, measurements):
    """Independent recovery through the lifted linear system.

    With noiseless data the state block already carries the diagonal of the
    true field, so the potential follows by pointwise division by the
    (positive) state and the field is its rank-one completion.  Used as an
    oracle against the convex pipeline; interior nodes coincide with the
    direct-division recovery built on the same stencil.
    """
    if measurements.delta != 0:
        raise ValueError("the linear-system oracle requires noiseless measurements")
    u_vals = problem.u_true.values
    if np.abs(u_vals).min() < 1e-10:
        raise DegenerateInput("state too close to zero for pointwise division")
    q_vals = measurements.z1_values / u_vals
    q_hat = Potential1D(problem.grid, q_vals)
    f_hat = BivariateField(problem.h2, problem.l2, np.outer(u_vals, q_vals))
    return q_hat, f_hat


# ---------------------------------------------------------------------------
# closed-form certificate family


def closed_form_precertificate(problem, alpha):
    """Whitened certificate candidate with offset ``alpha``.

    Member of the one-parameter family interpolating the tangent conditions
    of the normalized model: a rank-one term aligned with the state, a
    kernel-weighted diagonal term carrying ``(q - alpha) / u``, and a
    rank-one correction restoring the adjoint interpolation.  All kernel
    applications run as triangular solves in whitened coordinates, so the
    interpolation identities hold to round-off for every ``alpha``.
    """
    u_n = problem.u_normalized
    q_n = problem.q_normalized
    if u_n.min() <= 0:
        raise DegenerateInput("certificate family needs a positive state")
    w = problem.grid.quad_weights
    sqrtw = np.sqrt(w)
    intq = float(w @ q_n)
    if intq == 0:
        raise DegenerateInput("normalized potential integrates to zero")

    a_vec = problem.model.u            # whitened normalized state
    g = (q_n - alpha) / u_n
    upper_t = problem.h2.whitener.T
    term2 = scipy.linalg.solve_triangular(upper_t, np.diag(g * sqrtw), lower=True)
    mvec = scipy.linalg.solve_triangular(upper_t, w * g * q_n, lower=True)
    h = np.outer(a_vec, sqrtw) / intq + term2 - np.outer(mvec, sqrtw) / intq
    return h


def certificate_norm(problem, alpha):
    """Exact and analytic off-tangent norms of the family member ``alpha``.

    The exact value is the operator norm of the tangent-complement part of
    the whitened certificate; the analytic majorant is
    ``|Omega| / (int q)^2 * max|q - alpha| / inf u`` in normalized
    quantities.  The exact value never exceeds the majorant (a theorem of
    the construction); a violation raises, as it indicates a bug.
    """
    h = closed_form_precertificate(problem, alpha)
    exact = operator_norm(project_tangent_complement(h, problem.model))
    u_n = problem.u_normalized
    q_n = problem.q_normalized
    w = problem.grid.quad_weights
    intq = float(w @ q_n)
    omega = problem.grid.length
    bound = (omega / intq ** 2) * float(np.abs(q_n - alpha).max()) / float(u_n.min())
    if exact > bound + 1e-9:
        raise AssertionError(
            f"certificate norm {exact} exceeds its analytic bound {bound}"
        )
    return exact, bound


def optimal_alpha(problem):
    """Midpoint offset minimizing ``max|q - alpha|`` (normalized units)."""
    q_n = problem.q_normalized
    return 0.5 * (float(q_n.min()) + float(q_n.max()))


def alpha_study(problem, n_points=41, pad=0.5):
    """Exact/bound table over an offset grid plus the midpoint optimum."""
    q_n = problem.q_normalized
    alphas = np.linspace(q_n.min() - pad, q_n.max() + pad, n_points)
    rows = []
    for alpha in alphas:
        exact, bound = certificate_norm(problem, float(alpha))
        rows.append({"alpha": float(alpha), "exact": exact, "bound": bound})
    a_star = optimal_alpha(problem)
    exact, bound = certificate_norm(problem, a_star)
    best = min(rows, key=lambda r: r["exact"])
    return {
        "rows": rows,
        "alpha_star": a_star,
        "exact_at_star": exact,
        "bound_at_star": bound,
        "alpha_best": best["alpha"],
        "exact_best": best["exact"],
    }


def summed_h2_norm(grid, values):
    """Summed-seminorm variant of the second-order Sobolev norm.

    ``|u| + |u'| + |u''|`` in L2, an equivalent norm dominating the
    quadratic-form one; it is the convention of the reference computation
    behind the jump-size interval, so the scalar condition below uses it.
    """
    from .hilbert import first_difference_1d

    w = grid.quad_weights
    d1 = first_difference_1d(grid)
    d2 = second_difference_1d(grid)
    values = np.asarray(values, float)
    return float(
        np.sqrt(w @ values ** 2)
        + np.sqrt(w @ (d1 @ values) ** 2)
        + np.sqrt(w @ (d2 @ values) ** 2)
    )


def sufficient_condition(problem):
    """Scalar sufficient condition for non-degeneracy, both normalizations.

    Returns ``(lhs_normalized, lhs_unnormalized, passed)``.  The two forms
    are algebraically identical and must agree to round-off; the condition
    passes when the common value is below one.  The state norm uses the
    summed-seminorm convention, which dominates the quadratic-form norm, so
    passing here is stricter than what the certificate bound needs.
    """
    grid = problem.grid
    w = grid.quad_weights
    omega = grid.length
    u_vals = problem.u_true.values
    q_vals = problem.q_true.values
    u_h2 = summed_h2_norm(grid, u_vals)
    q_l2 = problem.l2.norm(q_vals)

    u_n = u_vals / u_h2
    q_n = q_vals / q_l2
    intq_n = float(w @ q_n)
    lhs_norm = (omega / (2.0 * float(u_n.min()))) \
        * (float(q_n.max()) - float(q_n.min())) / intq_n ** 2

    q = problem.q_true
    lhs_unnorm = (omega / (2.0 * float(u_vals.min()))) \
        * (q.sup - q.inf) / q.integral ** 2 * q_l2 * u_h2
    return lhs_norm, lhs_unnorm, bool(lhs_norm < 1.0)


def apriori_constant(problem):
    """Stability constant of the measurement map on the tangent space.

    Evaluates ``sqrt(2) * max(|u|_H2 / inf u, (|q|_L2 + |q|_inf |u|_H2 /
    inf u) / int q)`` with discrete norms; every tangent field F then
    satisfies ``|F| <= C * |Phi F|``.
    """
    u_vals = problem.u_true.values
    q = problem.q_true
    u_h2 = problem.h2.norm(u_vals)
    q_l2 = problem.l2.norm(q.values)
    inf_u = float(u_vals.min())
    q_inf_norm = float(np.abs(q.values).max())
    return float(np.sqrt(2.0) * max(
        u_h2 / inf_u,
        (q_l2 + q_inf_norm * u_h2 / inf_u) / q.integral,
    ))


# ---------------------------------------------------------------------------
# parameter studies


def condition_lhs_for_q0(q0, n=401, base=1.0, lo=0.4, hi=0.6, f=1.0, _cache={}):
    """Sufficient-condition value for the step family at a given jump size.

    Uses the summed-seminorm state norm of :func:`sufficient_condition`.
    """
    key = n
    if key not in _cache:
        _cache[key] = build_grid_1d(n, 0.0, 1.0)
    grid = _cache[key]
    q = step_potential(grid, base=base, q0=q0, lo=lo, hi=hi)
    if q.inf <= 0:
        return np.inf
    u = solve_schrodinger_1d(grid, q, f, f)
    w = grid.quad_weights
    u_h2 = summed_h2_norm(grid, u.values)
    q_l2 = float(np.sqrt(w @ q.values ** 2))
    u_n = u.values / u_h2
    q_n = q.values / q_l2
    intq_n = float(w @ q_n)
    return (grid.length / (2.0 * float(u_n.min()))) \
        * (float(q_n.max()) - float(q_n.min())) / intq_n ** 2


def find_condition_interval(n=401, base=1.0, lo=0.4, hi=0.6, f=1.0, tol=1e-3):
    """Bisection for the jump-size interval on which the condition holds.

    Locates the crossings of the condition value through 1 on both sides of
    zero for the step family; returns ``(q0_lower, q0_upper)``.
    """
    def crossing(a, b):
        # condition holds at a, fails at b
        for _ in range(200):
            mid = 0.5 * (a + b)
            if condition_lhs_for_q0(mid, n=n, base=base, lo=lo, hi=hi, f=f) < 1.0:
                a = mid
            else:
                b = mid
            if abs(b - a) < tol:
                break
        return 0.5 * (a + b)

    # scan outward for brackets; the step keeps base + q0 positive
    lo_bad = None
    q0 = 0.0
    while q0 > -base + 1e-6:
        q0 -= 0.05
        q0 = max(q0, -base + 1e-6)
        if condition_lhs_for_q0(q0, n=n, base=base, lo=lo, hi=hi, f=f) >= 1.0:
            lo_bad = q0
            break
    hi_bad = None
    q0 = 0.0
    while q0 < 6.0:
        q0 += 0.05
        if condition_lhs_for_q0(q0, n=n, base=base, lo=lo, hi=hi, f=f) >= 1.0:
            hi_bad = q0
            break
    lower = crossing(lo_bad + 0.05, lo_bad) if lo_bad is not None else -base
    upper = crossing(hi_bad - 0.05, hi_bad) if hi_bad is not None else np.inf
    return lower, upper


def run_delta_sweep(n=41, q0=0.5, deltas=(1e-2, 3e-3, 1e-3, 3e-4), c=1.0,
                    seeds=range(5), opts=None, jobs=1, with_bounds=False):
    """Noisy recovery sweep over noise levels and seeds.

    Returns one row per (delta, seed) with the relative and absolute
    recovery errors; with ``with_bounds`` each row also carries the
    robustness-bound report built on the least-norm pre-certificate.
    """
    from .certify import precertificate, robustness_bounds

    grid = build_grid_1d(n, 0.0, 1.0)
    q = step_potential(grid, q0=q0)
    problem, _ = build_internal_problem(grid, q)
    op = assemble_internal_operator(problem)
    cert = precertificate(op, [problem.model]) if with_bounds else None
    f_ref = [whiten(problem.field_true)]

    def one(task):
        delta, seed = task
        meas = make_measurements(problem, delta=delta, seed=seed)
        q_hat, f_white, report = recover_internal(
            problem, meas, mode="noisy", c=c, opts=opts
        )
        err = problem.l2.norm(q_hat.values - problem.q_true.values)
        rel = err / problem.l2.norm(problem.q_true.values)
        row = {
            "q0": q0, "delta": delta, "seed": seed, "lambda": c * delta,
            "err_L2": err, "rel_err_L2": rel, "iters": report.iterations,
            "status": report.status,
        }
        if with_bounds and cert is not None:
            c_eff = (c * delta) / meas.delta_meas
            row["bounds"] = robustness_bounds(
                op, [f_white], f_ref, [problem.model], cert.h_blocks,
                cert.p, c_eff, meas.delta_meas,
            )
        return row

    tasks = [(float(d), int(s)) for d in deltas for s in seeds]
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, tasks))
    else:
        rows = [one(t) for t in tasks]
    return rows


def loglog_slope(deltas, errors):
    """Least-squares slope of log error against log delta."""
    x = np.log(np.asarray(deltas, float))
    y = np.log(np.asarray(errors, float))
    x = x - x.mean()
    return float((x @ (y - y.mean())) / (x @ x))
