"""Discretized boundary-measurement pipeline on a 2-D grid.

The unknown potential lives in a fixed continuous basis; each Dirichlet
datum contributes a lifted coefficient stack coupling grid values of the
state with basis coordinates of the potential.  Three constraint families
make the lifted problem linear: flux consistency of the sourced Poisson
state, proportionality to the state through the known potential integral,
and cross-block equality of the potential component along the boundary.

Flux conventions: measurements use second-order one-sided normal
differences; the adjoint-consistent "variational" flux (exact discrete
Green identity, first-order pointwise) backs the symmetry checks of the
forward-map derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import DegenerateCertificate, EigenvalueHit
from .hilbert import Grid2D, assemble_inner_product, identity_inner_product
from .lowrank import RankOneModel
from .solvers import (
    AffineOperator,
    solve_equality_nnm,
    solve_regularized_constrained,
)

# ---------------------------------------------------------------------------
# finite-difference machinery


def _interior_maps(grid):
    """Interior operator, boundary coupling and index bookkeeping."""
    n = grid.n_nodes
    int_idx = grid.interior_index
    bdry_idx = grid.boundary_index
    n_int = int_idx.size
    pos_int = -np.ones(n, dtype=int)
    pos_int[int_idx] = np.arange(n_int)
    pos_bdry = -np.ones(n, dtype=int)
    pos_bdry[bdry_idx] = np.arange(bdry_idx.size)
    return int_idx, bdry_idx, pos_int, pos_bdry


def _neighbors(grid, flat):
    ix, iy = divmod(flat, grid.ny)
    out = []
    if ix > 0:
        out.append(flat - grid.ny)
    if ix < grid.nx - 1:
        out.append(flat + grid.ny)
    if iy > 0:
        out.append(flat - 1)
    if iy < grid.ny - 1:
        out.append(flat + 1)
    return out


def _interior_operator(grid, q_vals=None):
    """Sparse 5-point (-Lap + q) on interior nodes, Dirichlet eliminated.

    Also returns the coupling matrix C with ``A u_int + C u_bdry = 0`` for
    discrete solutions of the homogeneous equation.
    """
    int_idx, bdry_idx, pos_int, pos_bdry = _interior_maps(grid)
    h2 = grid.h ** 2
    rows, cols, vals = [], [], []
    crows, ccols, cvals = [], [], []
    for j, flat in enumerate(int_idx):
        diag = 4.0 / h2
        if q_vals is not None:
            diag += q_vals[flat]
        rows.append(j)
        cols.append(j)
        vals.append(diag)
        for nb in _neighbors(grid, flat):
            if pos_int[nb] >= 0:
                rows.append(j)
                cols.append(pos_int[nb])
                vals.append(-1.0 / h2)
            else:
                crows.append(j)
                ccols.append(pos_bdry[nb])
                cvals.append(-1.0 / h2)
    n_int = int_idx.size
    a = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(n_int, n_int))
    c = scipy.sparse.csc_matrix(
        (cvals, (crows, ccols)), shape=(n_int, bdry_idx.size)
    )
    return a, c


def _factorize(a):
    try:
        return scipy.sparse.linalg.splu(a)
    except RuntimeError as exc:
        raise EigenvalueHit(
            "interior system is singular: 0 is a discrete Dirichlet eigenvalue"
        ) from exc


def solve_schrodinger_2d(grid, q_vals, f_bdry, factor=None, coupling=None):
    """Solve ``-Lap u + q u = 0`` with Dirichlet data on the boundary loop."""
    if factor is None or coupling is None:
        a, coupling = _interior_operator(grid, q_vals)
        factor = _factorize(a)
    u_int = factor.solve(-(coupling @ np.asarray(f_bdry, float)))
    if not np.all(np.isfinite(u_int)) or np.abs(u_int).max() > 1e12 * max(
        1.0, np.abs(f_bdry).max()
    ):
        raise EigenvalueHit("solution blow-up: discrete operator is singular")
    u = np.zeros(grid.n_nodes)
    u[grid.interior_index] = u_int
    u[grid.boundary_index] = f_bdry
    return u


def solve_poisson_zero_bc(grid, source_vals, factor=None):
    """Solve ``-Lap v = source`` on the interior with zero boundary values."""
    if factor is None:
        a, _ = _interior_operator(grid)
        factor = _factorize(a)
    v = np.zeros(grid.n_nodes)
    v[grid.interior_index] = factor.solve(
        np.asarray(source_vals, float)[grid.interior_index]
    )
    return v


def harmonic_extension_2d(grid, f_bdry, factor=None, coupling=None):
    """Discrete harmonic extension: the Laplace solve with data ``f``."""
    if factor is None or coupling is None:
        a, coupling = _interior_operator(grid)
        factor = _factorize(a)
    return solve_schrodinger_2d(grid, None, f_bdry, factor=factor, coupling=coupling)


def _onesided_flux_matrix(grid):
    """Second-order one-sided normal derivative at each boundary node."""
    h = grid.h
    fl = np.zeros((grid.boundary_index.size, grid.n_nodes))

    def dx_row(row, ix, iy, sign):
        base = grid.flat(ix, iy)
        if ix == 0:
            stencil = [(0, -3.0), (1, 4.0), (2, -1.0)]
        elif ix == grid.nx - 1:
            stencil = [(0, 3.0), (-1, -4.0), (-2, 1.0)]
        else:
            row[grid.flat(ix + 1, iy)] += sign * 0.5 / h
            row[grid.flat(ix - 1, iy)] -= sign * 0.5 / h
            return
        for off, coef in stencil:
            row[base + off * grid.ny] += sign * coef / (2.0 * h)

    def dy_row(row, ix, iy, sign):
        base = grid.flat(ix, iy)
        if iy == 0:
            stencil = [(0, -3.0), (1, 4.0), (2, -1.0)]
        elif iy == grid.ny - 1:
            stencil = [(0, 3.0), (-1, -4.0), (-2, 1.0)]
        else:
            row[grid.flat(ix, iy + 1)] += sign * 0.5 / h
            row[grid.flat(ix, iy - 1)] -= sign * 0.5 / h
            return
        for off, coef in stencil:
            row[base + off] += sign * coef / (2.0 * h)

    for k, flat in enumerate(grid.boundary_index):
        ix, iy = divmod(int(flat), grid.ny)
        nx_, ny_ = grid.boundary_normals[k]
        if nx_ != 0.0:
            dx_row(fl[k], ix, iy, nx_)
        if ny_ != 0.0:
            dy_row(fl[k], ix, iy, ny_)
    return fl


def dtn_flux(grid, u_vals, method="onesided", coupling=None, f_bdry=None):
    """Normal derivative of a grid function along the boundary loop.

    ``onesided`` differentiates pointwise at second order.  ``variational``
    reads the flux off the discrete Green identity (exact adjoint symmetry,
    first-order consistency; zero at corners, which carry no coupling).
    """
    u_vals = np.asarray(u_vals, float)
    if method == "onesided":
        return _onesided_flux_matrix(grid) @ u_vals
    if method == "variational":
        if coupling is None:
            _, coupling = _interior_operator(grid)
        fb = u_vals[grid.boundary_index] if f_bdry is None else np.asarray(f_bdry, float)
        return _flux_of_state(grid, u_vals, coupling, fb, "variational")
    raise ValueError(f"unknown flux method {method!r}")


def _corner_mask(grid):
    corners = {
        grid.flat(0, 0), grid.flat(grid.nx - 1, 0),
        grid.flat(grid.nx - 1, grid.ny - 1), grid.flat(0, grid.ny - 1),
    }
    return np.array([int(b) in corners for b in grid.boundary_index])


# ---------------------------------------------------------------------------
# bases


@dataclass
class BasisW:
    """Continuous bump basis sampled on the grid, orthonormal in weighted l2."""

    m: int
    matrix: np.ndarray        # n_nodes x m, columns orthonormal
    integrals: np.ndarray     # integral of each basis function

    def values(self, coeffs):
        return self.matrix @ np.asarray(coeffs, float)


def make_basis_w(grid, m):
    """Tensor-product hat bumps, orthonormalized against the area weights."""
    k = math.isqrt(m)
    if k * k != m:
        raise ValueError(f"basis size must be a perfect square, got {m}")
    span = grid.b - grid.a
    centers = [grid.a + span * (i + 1.0) / (k + 1.0) for i in range(k)]
    radius = span / (k + 1.0)

    def hat(t):
        return np.maximum(0.0, 1.0 - np.abs(t))

    cols = []
    for cx in centers:
        for cy in centers:
            cols.append(hat((grid.xs - cx) / radius) * hat((grid.ys - cy) / radius))
    mat = np.stack(cols, axis=1)

    w = grid.area_weights
    for _ in range(2):                       # repeated modified Gram-Schmidt
        for j in range(m):
            for i in range(j):
                mat[:, j] -= (w * mat[:, i]) @ mat[:, j] * mat[:, i]
            nrm = np.sqrt((w * mat[:, j]) @ mat[:, j])
            if nrm < 1e-12:
                raise ValueError("bump basis is numerically dependent on this grid")
            mat[:, j] /= nrm
    return BasisW(m=m, matrix=mat, integrals=mat.T @ w)


def coeffs_from_function(basis, grid, fn_vals):
    """Weighted-l2 projection coefficients of nodal values onto the basis."""
    return basis.matrix.T @ (grid.area_weights * np.asarray(fn_vals, float))


@dataclass
class BoundaryBasis:
    """Trigonometric Dirichlet data in boundary arc length, constant first."""

    n: int
    matrix: np.ndarray        # n_bdry x N
    f1_floor: float


def make_boundary_basis(grid, n_modes):
    if n_modes < 1:
        raise ValueError("need at least one boundary mode")
    s = grid.boundary_arclength
    perim = grid.h * grid.boundary_index.size
    cols = [np.ones_like(s)]
    j = 1
    while len(cols) < n_modes:
        cols.append(np.cos(2.0 * np.pi * j * s / perim))
        if len(cols) < n_modes:
            cols.append(np.sin(2.0 * np.pi * j * s / perim))
        j += 1
    mat = np.stack(cols, axis=1)
    gram = mat.T @ (grid.boundary_weights[:, None] * mat)
    if np.linalg.cond(gram) > 1e8:
        raise ValueError("boundary basis Gram is numerically singular")
    return BoundaryBasis(n=n_modes, matrix=mat, f1_floor=float(np.abs(mat[:, 0]).min()))


# ---------------------------------------------------------------------------
# problem container


@dataclass
class CalderonProblem:
    grid: Grid2D
    basis_w: BasisW
    bdry: BoundaryBasis
    q_coeffs: np.ndarray
    q_values: np.ndarray
    int_q: float
    u_stack: np.ndarray           # N x n_nodes forward states
    f_tilde_stack: np.ndarray     # N x n_nodes harmonic extensions
    flux_u: np.ndarray            # N x n_bdry one-sided fluxes of the states
    flux_f_tilde: np.ndarray
    h1: object
    w_space: object
    models: list
    sigmas: np.ndarray
    g_weights: np.ndarray = None
    g_omega: np.ndarray = None       # scale functional applied to the basis
    coupling: object = field(default=None, repr=False)
    _uinv: np.ndarray = field(default=None, repr=False)

    @property
    def n_data(self):
        return self.bdry.n

    @property
    def x_unwhitener(self):
        if self._uinv is None:
            self._uinv = scipy.linalg.solve_triangular(
                self.h1.whitener, np.eye(self.grid.n_nodes), lower=False
            )
        return self._uinv

    def true_stack(self):
        """Unwhitened coefficient matrices of the true lifted stacks."""
        return [np.outer(self.u_stack[i], self.q_coeffs) for i in range(self.n_data)]

    def true_stack_whitened(self):
        return [self.h1.whitener @ c for c in self.true_stack()]


def build_calderon_problem(grid, m=4, n_modes=4, q_coeffs=None, g_weights=None):
    """Forward-solve a boundary-measurement instance.

    With no coefficients supplied, the truth is the basis projection of a
    smooth positive bump profile.  ``g_weights`` selects the linear
    functional pinning the factor scale (nodal quadrature vector; default
    integration over the domain; alternatives are plumbed through but
    carry no certificate theory).  Its value on the potential must be
    positive and the discrete operator nonsingular.
    """
    basis_w = make_basis_w(grid, m)
    bdry = make_boundary_basis(grid, n_modes)
    if q_coeffs is None:
        profile = 1.0 + 0.4 * np.cos(np.pi * (grid.xs - 0.5)) * np.cos(
            np.pi * (grid.ys - 0.5)
        )
        q_coeffs = coeffs_from_function(basis_w, grid, profile)
    q_coeffs = np.asarray(q_coeffs, float)
    q_values = basis_w.values(q_coeffs)
    if g_weights is None:
        g_weights = grid.area_weights
    g_weights = np.asarray(g_weights, float)
    int_q = float(g_weights @ q_values)
    if int_q <= 0:
        raise ValueError("the scale functional must be positive on the potential")

    a_q, coupling = _interior_operator(grid, q_values)
    factor_q = _factorize(a_q)
    a_0, _ = _interior_operator(grid)
    factor_0 = _factorize(a_0)

    n = bdry.n
    u_stack = np.stack([
        solve_schrodinger_2d(grid, q_values, bdry.matrix[:, i],
                             factor=factor_q, coupling=coupling)
        for i in range(n)
    ])
    f_tilde_stack = np.stack([
        solve_schrodinger_2d(grid, None, bdry.matrix[:, i],
                             factor=factor_0, coupling=coupling)
        for i in range(n)
    ])
    fl = _onesided_flux_matrix(grid)
    flux_u = u_stack @ fl.T
    flux_f_tilde = f_tilde_stack @ fl.T

    h1 = assemble_inner_product(grid, "h1")
    w_space = identity_inner_product(m, integrals=basis_w.integrals)

    q_w_norm = float(np.linalg.norm(q_coeffs))
    models = []
    sigmas = []
    for i in range(n):
        uw = h1.whiten_vec(u_stack[i])
        nrm = float(np.linalg.norm(uw))
        sigmas.append(nrm * q_w_norm)
        models.append(RankOneModel(
            sigma=nrm * q_w_norm, u=uw / nrm, v=q_coeffs / q_w_norm,
        ))

    return CalderonProblem(
        grid=grid, basis_w=basis_w, bdry=bdry, q_coeffs=q_coeffs,
        q_values=q_values, int_q=int_q, u_stack=u_stack,
        f_tilde_stack=f_tilde_stack, flux_u=flux_u, flux_f_tilde=flux_f_tilde,
        h1=h1, w_space=w_space, models=models, sigmas=np.asarray(sigmas),
        g_weights=g_weights, g_omega=basis_w.matrix.T @ g_weights,
        coupling=coupling,
    )


# ---------------------------------------------------------------------------
# lifted measurement operator


@dataclass
class CalderonSystem:
    """Assembled operators and clean measurement vectors."""

    op_full: AffineOperator
    op_data: AffineOperator
    op_hard: AffineOperator
    z_data: np.ndarray
    z_hard: np.ndarray

    @property
    def z_full(self):
        return np.concatenate([self.z_data, self.z_hard])


def assemble_calderon_system(problem):
    """Dense whitened assembly of the three constraint families.

    Per block: flux of the sourced Poisson state of the diagonal, the
    integrated stack against the known potential integral, and the pairwise
    boundary equality rows.  Row scalings realize the codomain norms
    (boundary-weighted l2, the first-order Sobolev structure, and the
    boundary-weighted stack norm).
    """
    grid = problem.grid
    n = grid.n_nodes
    m = problem.basis_w.m
    nd = problem.n_data
    bidx = grid.boundary_index
    nb = bidx.size
    uinv = problem.x_unwhitener
    wmat = problem.basis_w.matrix
    sqrt_wb = np.sqrt(grid.boundary_weights)
    uw = problem.h1.whitener

    # diagonal restriction of one whitened block: (n, n*m)
    dg = np.einsum("xi,xk->xik", uinv, wmat).reshape(n, n * m)
    # states of the lifted equation: Lap v = d with zero boundary data,
    # so the interior solve flips the sign of the 5-point operator
    a_0, _ = _interior_operator(grid)
    a0_inv = np.linalg.inv(a_0.toarray())
    mv = np.zeros((n, n))
    mv[np.ix_(grid.interior_index, grid.interior_index)] = -a0_inv
    fl = _onesided_flux_matrix(grid)

    phi1_block = (sqrt_wb[:, None] * fl) @ (mv @ dg)
    g_omega = problem.basis_w.integrals if problem.g_omega is None else problem.g_omega
    ig = np.einsum("xi,k->xik", uinv, g_omega).reshape(n, n * m)
    phi2_block = uw @ (ig - problem.int_q * (mv @ dg))

    d = n * m
    pairs = [(i, j) for i in range(nd) for j in range(i + 1, nd)]
    rows_full = nd * nb + nd * n + len(pairs) * nb * m
    a_full = np.zeros((rows_full, nd * d))

    for i in range(nd):
        a_full[i * nb:(i + 1) * nb, i * d:(i + 1) * d] = phi1_block
        r0 = nd * nb + i * n
        a_full[r0:r0 + n, i * d:(i + 1) * d] = phi2_block

    e_bdry = uinv[bidx, :]
    r0 = nd * nb + nd * n
    for (i, j) in pairs:
        fi = problem.bdry.matrix[:, i]
        fj = problem.bdry.matrix[:, j]
        blk_i = np.kron((sqrt_wb * fj)[:, None] * e_bdry, np.eye(m))
        blk_j = np.kron((sqrt_wb * fi)[:, None] * e_bdry, np.eye(m))
        a_full[r0:r0 + nb * m, i * d:(i + 1) * d] = blk_i
        a_full[r0:r0 + nb * m, j * d:(j + 1) * d] = -blk_j
        r0 += nb * m

    shapes = [(n, m)] * nd
    op_full = AffineOperator(a_full, shapes)
    op_data = AffineOperator(a_full[: nd * nb], shapes)
    op_hard = AffineOperator(a_full[nd * nb:], shapes)

    z_data = np.concatenate([
        sqrt_wb * (problem.flux_u[i] - problem.flux_f_tilde[i]) for i in range(nd)
    ])
    z_hard = np.concatenate(
        [uw @ (problem.int_q * problem.f_tilde_stack[i]) for i in range(nd)]
        + [np.zeros(len(pairs) * nb * m)]
    )
    return CalderonSystem(
        op_full=op_full, op_data=op_data, op_hard=op_hard,
        z_data=z_data, z_hard=z_hard,
    )


def assemble_calderon_operator(problem):
    """Full three-family measurement operator (see assemble_calderon_system)."""
    return assemble_calderon_system(problem).op_full


@dataclass
class LiftedStack:
    """Coefficient fields of a lifted stack, one bivariate field per datum.

    Rows live on the grid with the first-order Sobolev structure, columns
    in the orthonormal potential basis; shapes are uniform across data.
    """

    fields: list

    def __post_init__(self):
        shapes = {f.values.shape for f in self.fields}
        if len(shapes) > 1:
            raise ValueError(f"stack shapes are not uniform: {shapes}")

    def __len__(self):
        return len(self.fields)


def as_lifted_stack(problem, blocks_whitened):
    """Wrap whitened solver blocks as bivariate coefficient fields."""
    from .hilbert import BivariateField

    uinv = problem.x_unwhitener
    return LiftedStack(fields=[
        BivariateField(problem.h1, problem.w_space, uinv @ blk)
        for blk in blocks_whitened
    ])


@dataclass
class CalderonMeasurements:
    z_data: np.ndarray
    delta: float
    seed: int


def make_calderon_measurements(problem, system, delta=0.0, seed=0):
    """Flux measurements, optionally polluted by noise of exact norm delta."""
    z = system.z_data.copy()
    if delta > 0:
        rng = np.random.default_rng(seed)
        e = rng.standard_normal(z.size)
        e *= delta / np.linalg.norm(e)
        z = z + e
    return CalderonMeasurements(z_data=z, delta=float(delta), seed=int(seed))


def extract_q_calderon(c_vals, f_bdry_vals, problem):
    """Potential coordinates from the boundary rows of one stack."""
    wb = problem.grid.boundary_weights
    bidx = problem.grid.boundary_index
    den = float(wb @ (f_bdry_vals ** 2))
    if den <= 0:
        raise ValueError("boundary datum has zero norm")
    num = (wb * f_bdry_vals) @ c_vals[bidx, :]
    return num / den


def recover_calderon(problem, system, measurements, mode="exact", c=1.0, opts=None):
    """Convex recovery of the potential coordinates from the lifted solve.

    ``exact``: equality-constrained solve on all three families.  ``noisy``:
    data fidelity on the flux block only, with the remaining families kept
    as hard constraints inside the splitting and ``lambda = c * delta``.
    The potential estimate averages the per-block boundary extractions.
    """
    if mode == "exact":
        if measurements.delta != 0:
            raise ValueError("exact mode requires noiseless measurements")
        z_full = np.concatenate([measurements.z_data, system.z_hard])
        blocks, report = solve_equality_nnm(system.op_full, z_full, opts=opts)
    elif mode == "noisy":
        lam = c * measurements.delta
        if lam <= 0:
            raise ValueError("noisy mode requires delta > 0")
        blocks, report = solve_regularized_constrained(
            system.op_data, measurements.z_data, system.op_hard, system.z_hard,
            lam, opts=opts,
        )
    else:
        raise ValueError(f"unknown mode {mode!r}")

    uinv = problem.x_unwhitener
    extractions = []
    for i, blk in enumerate(blocks):
        c_vals = uinv @ blk
        extractions.append(
            extract_q_calderon(c_vals, problem.bdry.matrix[:, i], problem)
        )
    q_hat = np.mean(extractions, axis=0)
    report.extras["per_block_q"] = extractions
    return q_hat, blocks, report


# ---------------------------------------------------------------------------
# forward-map derivative and baseline


def boundary_restriction_constant(problem):
    """Discrete norm of the boundary restriction on lifted stacks.

    Largest amplification from the whitened stack norm to the
    boundary-weighted stack norm; reported as a diagnostic (the continuum
    trace theorem offers no quantitative constant to assert against).
    """
    uinv = problem.x_unwhitener
    bidx = problem.grid.boundary_index
    weighted = np.sqrt(problem.grid.boundary_weights)[:, None] * uinv[bidx, :]
    svals = np.linalg.svd(weighted, compute_uv=False)
    return float(svals[0])


def dtn_map(grid, q_vals, bdry, method="onesided"):
    """Flux matrix of the boundary-data-to-flux map, one row per datum."""
    a_q, coupling = _interior_operator(grid, q_vals)
    factor = _factorize(a_q)
    rows = []
    for i in range(bdry.n):
        u = solve_schrodinger_2d(grid, q_vals, bdry.matrix[:, i],
                                 factor=factor, coupling=coupling)
        rows.append(_flux_of_state(grid, u, coupling, bdry.matrix[:, i], method))
    return np.stack(rows)


def _flux_of_state(grid, u, coupling, f_bdry, method):
    if method == "onesided":
        return _onesided_flux_matrix(grid) @ u
    if method == "variational":
        h = grid.h
        corner = _corner_mask(grid)
        base = (h ** 2) * (coupling.T @ u[grid.interior_index])
        base = base + np.where(corner, 0.0, f_bdry)
        return base / grid.boundary_weights
    raise ValueError(f"unknown flux method {method!r}")


def frechet_derivative(problem, q_vals, h_vals, method="onesided"):
    """Derivative of the data-to-flux map at ``q`` in direction ``h``.

    For each boundary datum: solve the state, re-solve with source
    ``-h * u`` and zero boundary values, take the flux.  Assembled as an
    (N x boundary) matrix on the problem's boundary basis.
    """
    return _frechet_matrix(problem.grid, problem.bdry, q_vals, h_vals, method)


def _frechet_matrix(grid, bdry, q_vals, h_vals, method):
    a_q, coupling = _interior_operator(grid, q_vals)
    factor = _factorize(a_q)
    h_vals = np.asarray(h_vals, float)
    rows = []
    for i in range(bdry.n):
        u = solve_schrodinger_2d(grid, q_vals, bdry.matrix[:, i],
                                 factor=factor, coupling=coupling)
        v = np.zeros(grid.n_nodes)
        v[grid.interior_index] = factor.solve(
            -(h_vals * u)[grid.interior_index]
        )
        rows.append(_flux_of_state(grid, v, coupling, np.zeros(bdry.matrix.shape[0]), method))
    return np.stack(rows)


def derivative_pairing(problem, q_vals, h_vals):
    """Boundary pairings of the derivative against the data family.

    Uses the variational flux, for which the discrete Green identity makes
    the pairing matrix exactly symmetric (two independent solve routes).
    """
    mat = _frechet_matrix(problem.grid, problem.bdry, q_vals, h_vals, "variational")
    wb = problem.grid.boundary_weights
    return (mat * wb) @ problem.bdry.matrix


def compactness_diagnostic(problem, q_vals, h_vals, mode_counts=(4, 8, 12)):
    """Singular value profiles of the derivative over growing data families.

    Inputs are normalized in the boundary norm and outputs weighted by the
    arc-length quadrature, so the profile tracks the spectrum of the
    underlying map.  Diagnostic only: the discrete matrix has finite rank.
    """
    out = {}
    for count in mode_counts:
        bdry = make_boundary_basis(problem.grid, count)
        mat = _frechet_matrix(problem.grid, bdry, q_vals, h_vals, "onesided")
        wb = problem.grid.boundary_weights
        in_norms = np.sqrt(np.einsum("bk,b,bk->k", bdry.matrix, wb, bdry.matrix))
        weighted = (mat / in_norms[:, None]) * np.sqrt(wb)[None, :]
        out[count] = np.linalg.svd(weighted, compute_uv=False)
    return out


def gauss_newton_baseline(problem, q_init_coeffs, iters=8, damping=1e-8):
    """Regularized Gauss-Newton on the potential coordinates.

    Locally convergent iterative reconstruction from the flux data; records
    the per-iteration misfit so initialization sensitivity can be compared
    against the convex pipeline.  Divergence is reported in the history,
    not raised.
    """
    grid, bdry, basis = problem.grid, problem.bdry, problem.basis_w
    sqrt_wb = np.sqrt(grid.boundary_weights)
    observed = problem.flux_u * sqrt_wb[None, :]

    coeffs = np.asarray(q_init_coeffs, float).copy()
    misfits = []
    trajectory = [coeffs.copy()]
    for _ in range(iters):
        q_vals = basis.values(coeffs)
        try:
            fluxes = dtn_map(grid, q_vals, bdry) * sqrt_wb[None, :]
        except EigenvalueHit:
            misfits.append(np.inf)
            break
        resid = (fluxes - observed).ravel()
        misfits.append(float(np.linalg.norm(resid)))
        if misfits[-1] < 1e-12:
            break
        jac = np.stack([
            (_frechet_matrix(grid, bdry, q_vals, basis.matrix[:, k], "onesided")
             * sqrt_wb[None, :]).ravel()
            for k in range(basis.m)
        ], axis=1)
        gram = jac.T @ jac
        mu = damping * max(np.trace(gram) / basis.m, 1e-30)
        try:
            step = np.linalg.solve(gram + mu * np.eye(basis.m), -jac.T @ resid)
        except np.linalg.LinAlgError:
            break
        coeffs = coeffs + step
        trajectory.append(coeffs.copy())
    else:
        q_vals = basis.values(coeffs)
        fluxes = dtn_map(grid, q_vals, bdry) * sqrt_wb[None, :]
        misfits.append(float(np.linalg.norm((fluxes - observed).ravel())))
    return {"misfits": misfits, "trajectory": trajectory, "coeffs": coeffs}


def precertificate_study(grid, m, q_coeffs, n_list, margin=1e-3):
    """Least-norm certificate diagnostics across data-family sizes.

    One row per N: the smallest tangent singular value, the worst tangent
    residual and off-tangent norm.  No pass threshold is asserted; the
    table is the deliverable.
    """
    from .certify import precertificate

    rows = []
    for n_modes in n_list:
        problem = build_calderon_problem(grid, m=m, n_modes=n_modes, q_coeffs=q_coeffs)
        system = assemble_calderon_system(problem)
        try:
            report = precertificate(system.op_full, problem.models, margin=margin)
            rows.append({
                "N": n_modes,
                "sigma_min": report.sigma_min,
                "max_w_norm": report.max_w_norm,
                "max_tangent_residual": float(report.tangent_residuals.max()),
                "ndsc_pass": report.ndsc_pass,
            })
        except DegenerateCertificate as exc:
            rows.append({
                "N": n_modes, "sigma_min": exc.sigma_min, "max_w_norm": np.nan,
                "max_tangent_residual": np.nan, "ndsc_pass": False,
                "degenerate": True,
            })
    return rows
