"""Convex solvers for the lifted problems.

Three problem classes are covered, all posed on block lists of whitened
matrices so that every inner product is Euclidean:

* equality-constrained nuclear-norm minimization
    min sum_i ||F_i||_*  s.t.  Phi F = z
  solved by Douglas-Rachford splitting, alternating blockwise singular
  value thresholding with exact projection onto the affine constraint;

* regularized nuclear-norm least squares
    min 0.5 ||Phi F - z||^2 + lambda sum_i ||F_i||_*
  solved by accelerated proximal gradient (momentum plus restart), with an
  optional second operator enforced as a hard constraint through
  three-operator (Davis-Yin) splitting;

* PSD trace minimization, the same splittings with the prox replaced by
  eigenvalue soft-thresholding clipped at zero.

Every equality solve reports a dual vector recovered from the affine
projection multipliers, so duality gaps can be audited externally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFailure
from .lowrank import nuclear_norm, operator_norm, svt_prox

STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "max_iter"
STATUS_INFEASIBLE = "infeasible_suspected"


@dataclass
class SolverOptions:
    """Tuning knobs shared by the solvers.

    ``rho = 0`` selects the automatic penalty ``||z|| / ||Phi||``.  Feasibility
    is measured relative to ``1 + ||z||`` and the duality gap relative to
    ``1 + objective``.
    """

    max_iter: int = 50_000
    tol_feas: float = 1e-8
    tol_gap: float = 1e-6
    tol_fp: float = 1e-8
    rho: float = 0.0
    momentum: bool = True
    check_every: int = 25
    history_every: int = 10


@dataclass
class SolveReport:
    """Outcome of a solve: iterations, objective, residuals and dual data."""

    iterations: int
    objective: float
    feas_residual: float
    duality_gap: float
    status: str
    dual: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# affine operator in whitened coordinates


def pack_blocks(blocks):
    return np.concatenate([np.asarray(b, float).ravel() for b in blocks])


def unpack_blocks(vec, shapes):
    out = []
    pos = 0
    for r, c in shapes:
        out.append(vec[pos:pos + r * c].reshape(r, c))
        pos += r * c
    return out


class AffineOperator:
    """Dense block-structured linear map from whitened matrices to measurements.

    Parameters
    ----------
    matrix : ndarray, shape (m, D)
        Acts on the concatenation of the row-major raveled blocks.
    domain_shapes : list of (rows, cols)
        One shape per block; D must equal the total entry count.
    """

    def __init__(self, matrix, domain_shapes):
        self.matrix = np.ascontiguousarray(matrix, dtype=float)
        self.domain_shapes = [tuple(s) for s in domain_shapes]
        total = sum(r * c for r, c in self.domain_shapes)
        if self.matrix.shape[1] != total:
            raise ValueError(
                f"matrix has {self.matrix.shape[1]} columns, blocks need {total}"
            )
        self.codomain_dim = self.matrix.shape[0]
        self._opnorm = None

    @property
    def n_blocks(self):
        return len(self.domain_shapes)

    def apply(self, blocks):
        return self.matrix @ pack_blocks(blocks)

    def apply_vec(self, vec):
        return self.matrix @ vec

    def adjoint_apply(self, p):
        return unpack_blocks(self.matrix.T @ p, self.domain_shapes)

    def adjoint_vec(self, p):
        return self.matrix.T @ p

    @property
    def opnorm_estimate(self):
        """Largest singular value, estimated by seeded power iteration."""
        if self._opnorm is None:
            self._opnorm = _power_iteration(self.matrix)
        return self._opnorm

    def check_adjoint(self, rng=None, n_probes=10):
        """Max relative defect of the adjoint identity over random probes."""
        rng = np.random.default_rng(0) if rng is None else rng
        worst = 0.0
        for _ in range(n_probes):
            x = rng.standard_normal(self.matrix.shape[1])
            p = rng.standard_normal(self.codomain_dim)
            lhs = float((self.matrix @ x) @ p)
            rhs = float(x @ (self.matrix.T @ p))
            scale = max(abs(lhs), abs(rhs), 1e-30)
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst


def _power_iteration(a, iters=500, rtol=1e-13, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new_est = np.sqrt(nw)
        if abs(new_est - est) <= rtol * max(new_est, 1e-30):
            return float(new_est)
        est = new_est
    return float(est)


class _AffineProjector:
    """Cached projector onto {x : A x = z} with multiplier extraction.

    Uses an eigendecomposition of ``A A^T`` with rank truncation, so redundant
    rows (for instance antisymmetry-induced dependencies) are handled; for an
    inconsistent ``z`` the projection lands on the least-squares affine set
    and the constant residual exposes the infeasibility.
    """

    def __init__(self, op, z, rank_rtol=1e-12):
        self.op = op
        self.z = np.asarray(z, float)
        gram = op.matrix @ op.matrix.T
        evals, evecs = np.linalg.eigh(gram)
        cutoff = rank_rtol * max(evals[-1], 0.0)
        keep = evals > cutoff
        if not np.any(keep):
            raise NumericFailure("measurement operator is numerically zero")
        self._evecs = np.ascontiguousarray(evecs[:, keep])
        self._inv_evals = 1.0 / evals[keep]
        self.range_residual = float(np.linalg.norm(self.z - self._apply_range(self.z)))

    def _pinv_gram(self, r):
        return self._evecs @ (self._inv_evals * (self._evecs.T @ r))

    def _apply_range(self, r):
        return self._evecs @ (self._evecs.T @ r)

    def project(self, x):
        """Return (projected x, multiplier mu) with projection = x - A^T mu."""
        mu = self._pinv_gram(self.op.apply_vec(x) - self.z)
        return x - self.op.adjoint_vec(mu), mu

    def least_norm_point(self):
        return self.op.adjoint_vec(self._pinv_gram(self.z))

    def solve_adjoint_least_squares(self, target):
        """Least-norm p minimizing ||A^T p - target||."""
        return self._pinv_gram(self.op.apply_vec(target))


# ---------------------------------------------------------------------------
# proxes


def _block_svt(vec, shapes, tau):
    blocks = unpack_blocks(vec, shapes)
    return pack_blocks([svt_prox(b, tau) if tau > 0 else b for b in blocks])


def psd_trace_prox(m, tau):
    """Prox of ``tau * trace + PSD indicator``: clipped eigenvalue shrinkage."""
    sym = 0.5 * (m + m.T)
    evals, evecs = np.linalg.eigh(sym)
    shrunk = np.maximum(evals - tau, 0.0)
    return (evecs * shrunk) @ evecs.T


def _block_psd_prox(vec, shapes, tau):
    blocks = unpack_blocks(vec, shapes)
    return pack_blocks([psd_trace_prox(b, tau) for b in blocks])


def _objective(vec, shapes, psd_mode=False):
    blocks = unpack_blocks(vec, shapes)
    if psd_mode:
        return sum(float(np.trace(b)) for b in blocks)
    return sum(nuclear_norm(b) for b in blocks)


def _dual_violation(op, p, psd_mode=False):
    blocks = op.adjoint_apply(p)
    if psd_mode:
        worst = max(float(np.linalg.eigvalsh(0.5 * (b + b.T))[-1]) for b in blocks)
    else:
        worst = max(operator_norm(b) for b in blocks)
    return max(0.0, worst - 1.0)


# ---------------------------------------------------------------------------
# equality-constrained solver (Douglas-Rachford)


def solve_equality_nnm(op, z, opts=None, psd_mode=False):
    """Minimize the blockwise nuclear norm subject to ``Phi F = z``.

    Douglas-Rachford iteration: exact affine projection (cached factorization
    of ``Phi Phi^*``), blockwise SVT with threshold ``rho``, reflected update.
    The multiplier of the projection supplies a dual vector; convergence is
    declared when the feasibility residual and the duality gap both clear
    their tolerances and the dual vector is feasible.

    Returns
    -------
    blocks : list of ndarray
    report : SolveReport
        ``report.dual`` holds the dual vector p with ``Phi^* p`` the
        certificate backing the gap.
    """
    opts = opts or SolverOptions()
    z = np.asarray(z, float)
    shapes = op.domain_shapes
    prox = _block_psd_prox if psd_mode else _block_svt

    znorm = float(np.linalg.norm(z))
    opn = max(op.opnorm_estimate, 1e-30)
    rho = opts.rho if opts.rho > 0 else max(znorm, 1e-12) / opn

    projector = _AffineProjector(op, z)
    feas_floor = projector.range_residual
    infeasible = feas_floor > opts.tol_feas * (1.0 + znorm)

    y = projector.least_norm_point()
    history = []
    status = STATUS_MAX_ITER
    x = y
    p = np.zeros_like(z)
    gap = np.inf
    feas = np.inf
    it = 0

    for it in range(1, opts.max_iter + 1):
        x, mu = projector.project(y)
        w = prox(2.0 * x - y, shapes, rho)
        y = y + w - x

        if it % opts.history_every == 0 or it == 1:
            history.append(_objective(x, shapes, psd_mode))

        if it % opts.check_every == 0 or it == 1:
            p = -mu / rho
            obj = _objective(x, shapes, psd_mode)
            feas = float(np.linalg.norm(op.apply_vec(x) - z))
            gap = obj - float(p @ z)
            dual_viol = _dual_violation(op, p, psd_mode)
            if infeasible:
                status = STATUS_INFEASIBLE
                break
            if (
                feas <= opts.tol_feas * (1.0 + znorm)
                and abs(gap) <= opts.tol_gap * (1.0 + abs(obj))
                and dual_viol <= 1e-6
            ):
                status = STATUS_CONVERGED
                break

    obj = _objective(x, shapes, psd_mode)
    feas = float(np.linalg.norm(op.apply_vec(x) - z))
    gap = obj - float(p @ z)
    report = SolveReport(
        iterations=it, objective=obj, feas_residual=feas, duality_gap=gap,
        status=status, dual=p,
        extras={"objective_history": history, "rho": rho,
                "range_residual": feas_floor},
    )
    return unpack_blocks(x, shapes), report


# ---------------------------------------------------------------------------
# regularized solver (accelerated proximal gradient with restart)


def solve_regularized_nnm(op, z_noisy, lam, opts=None, psd_mode=False):
    """Minimize ``0.5 ||Phi F - z||^2 + lambda * sum_i ||F_i||_*``.

    Forward-backward with momentum and gradient-based restart; the step is
    ``1 / ||Phi||^2``.  Terminates when the fixed-point residual of the
    prox-gradient map falls below ``tol_fp * lambda``.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    opts = opts or SolverOptions()
    z = np.asarray(z_noisy, float)
    shapes = op.domain_shapes
    prox = _block_psd_prox if psd_mode else _block_svt

    opn = op.opnorm_estimate
    if not np.isfinite(opn) or opn <= 0:
        raise NumericFailure("could not estimate the operator norm for the step size")
    lip = (opn * (1.0 + 1e-3)) ** 2
    step = 1.0 / lip

    dim = op.matrix.shape[1]
    x = np.zeros(dim)
    yv = x.copy()
    theta = 1.0
    history = []
    status = STATUS_MAX_ITER
    fp_resid = np.inf
    it = 0

    for it in range(1, opts.max_iter + 1):
        grad = op.adjoint_vec(op.apply_vec(yv) - z)
        x_new = prox(yv - step * grad, shapes, lam * step)

        if opts.momentum:
            # gradient-based restart keeps the momentum sequence monotone
            if float((yv - x_new) @ (x_new - x)) > 0:
                theta = 1.0
                yv = x.copy()
                grad = op.adjoint_vec(op.apply_vec(yv) - z)
                x_new = prox(yv - step * grad, shapes, lam * step)
            theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta ** 2))
            yv = x_new + ((theta - 1.0) / theta_new) * (x_new - x)
            theta = theta_new
        else:
            yv = x_new

        x = x_new

        if it % opts.history_every == 0 or it == 1:
            misfit = 0.5 * float(np.linalg.norm(op.apply_vec(x) - z) ** 2)
            history.append(misfit + lam * _objective(x, shapes, psd_mode))

        if it % opts.check_every == 0:
            g = op.adjoint_vec(op.apply_vec(x) - z)
            x_test = prox(x - step * g, shapes, lam * step)
            fp_resid = float(np.linalg.norm(x - x_test)) / step
            if fp_resid <= opts.tol_fp * lam:
                status = STATUS_CONVERGED
                break

    misfit_vec = op.apply_vec(x) - z
    reg_obj = lam * _objective(x, shapes, psd_mode)
    obj = 0.5 * float(np.linalg.norm(misfit_vec) ** 2) + reg_obj
    gap = _regularized_gap(op, x, z, lam, shapes, psd_mode)
    report = SolveReport(
        iterations=it, objective=obj, feas_residual=float(np.linalg.norm(misfit_vec)),
        duality_gap=gap, status=status, dual=(z - op.apply_vec(x)) / lam,
        extras={"objective_history": history, "step": step, "fp_residual": fp_resid},
    )
    return unpack_blocks(x, shapes), report


def _regularized_gap(op, x, z, lam, shapes, psd_mode=False):
    """Fenchel gap for the regularized problem with a scaled dual candidate."""
    p = (z - op.apply_vec(x)) / lam
    blocks = op.adjoint_apply(p)
    if psd_mode:
        worst = max(float(np.linalg.eigvalsh(0.5 * (b + b.T))[-1]) for b in blocks)
    else:
        worst = max(operator_norm(b) for b in blocks)
    scale = 1.0 / max(1.0, worst)
    pt = scale * p
    primal = 0.5 * float(np.linalg.norm(op.apply_vec(x) - z) ** 2) \
        + lam * _objective(x, shapes, psd_mode)
    dual = lam * float(pt @ z) - 0.5 * lam ** 2 * float(pt @ pt)
    return primal - dual


# ---------------------------------------------------------------------------
# regularized solver with hard equality constraints (Davis-Yin)


def solve_regularized_constrained(op_data, z_data, op_hard, z_hard, lam, opts=None):
    """Minimize ``0.5||Phi_d F - z_d||^2 + lambda sum ||F_i||_*`` s.t. ``Phi_h F = z_h``.

    Three-operator splitting: the smooth data term enters through its
    gradient, the hard constraints through an exact cached projection, and
    the nuclear norm through blockwise SVT.  The returned iterate satisfies
    the hard constraints to projection accuracy.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    opts = opts or SolverOptions()
    if op_data.domain_shapes != op_hard.domain_shapes:
        raise ValueError("data and constraint operators must share the domain")
    shapes = op_data.domain_shapes
    zd = np.asarray(z_data, float)
    zh = np.asarray(z_hard, float)

    # step below the 2 / L cocoercivity limit of the smooth term
    lip = (op_data.opnorm_estimate * (1.0 + 1e-3)) ** 2
    gamma = 1.8 / lip
    projector = _AffineProjector(op_hard, zh)

    def constraint_null(v):
        return v - op_hard.adjoint_vec(projector._pinv_gram(op_hard.apply_vec(v)))

    y = projector.least_norm_point()
    status = STATUS_MAX_ITER
    x_g = y
    kkt = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        x_g, _ = projector.project(y)
        grad = op_data.adjoint_vec(op_data.apply_vec(x_g) - zd)
        prox_in = 2.0 * x_g - y - gamma * grad
        x_f = _block_svt(prox_in, shapes, lam * gamma)
        shift = x_f - x_g
        if it % opts.check_every == 0:
            # stationarity: the prox supplies an exact nuclear-norm
            # subgradient at x_f; project the full gradient onto the
            # constraint null space and account for the iterate mismatch
            sub = (prox_in - x_f) / gamma
            kkt = float(np.linalg.norm(constraint_null(grad + sub))) \
                + float(np.linalg.norm(shift)) / gamma
            if kkt <= opts.tol_fp * lam * (1.0 + np.linalg.norm(x_g)):
                y = y + shift
                status = STATUS_CONVERGED
                break
        y = y + shift

    hard_resid = float(np.linalg.norm(op_hard.apply_vec(x_g) - zh))
    misfit = float(np.linalg.norm(op_data.apply_vec(x_g) - zd))
    obj = 0.5 * misfit ** 2 + lam * _objective(x_g, shapes)
    report = SolveReport(
        iterations=it, objective=obj, feas_residual=misfit,
        duality_gap=kkt, status=status,
        dual=(zd - op_data.apply_vec(x_g)) / lam,
        extras={"hard_residual": hard_resid, "step": gamma, "kkt_residual": kkt},
    )
    return unpack_blocks(x_g, shapes), report


# ---------------------------------------------------------------------------
# PSD trace minimization


def _psd_operator(vs):
    vs = [np.asarray(v, float) for v in vs]
    n = vs[0].shape[0]
    for v in vs:
        if v.shape != (n, n):
            raise ValueError("all constraint matrices must share a common square size")
        if not np.allclose(v, v.T, atol=1e-12 * max(1.0, np.abs(v).max())):
            raise ValueError("constraint matrices must be symmetric")
    matrix = np.stack([v.ravel() for v in vs])
    return AffineOperator(matrix, [(n, n)])


def solve_psd_trace_min(vs, z, mode="exact", lam=0.0, opts=None):
    """Trace minimization over the PSD cone under linear measurements.

    ``exact`` solves ``min trace(X) s.t. X >= 0, <V_k, X> = z_k``;
    ``regularized`` solves ``min 0.5 sum(<V_k,X> - z_k)^2 + lam * trace(X)``
    over the PSD cone.  Trace equals the nuclear norm on the cone.
    """
    op = _psd_operator(vs)
    z = np.asarray(z, float)
    if mode == "exact":
        blocks, report = solve_equality_nnm(op, z, opts=opts, psd_mode=True)
    elif mode == "regularized":
        blocks, report = solve_regularized_nnm(op, z, lam, opts=opts, psd_mode=True)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    x = 0.5 * (blocks[0] + blocks[0].T)
    return x, report


# ---------------------------------------------------------------------------
# duality audit


@dataclass
class GapReport:
    gap: float
    per_block: list
    dual_feasible: bool
    primal_feasible: bool
    flagged: bool


def duality_gap(blocks, p, op, z, tol=1e-6):
    """Audit a primal/dual pair for the equality-constrained problem.

    Computes ``sum_i ||F_i||_* - <p, z>`` together with the per-block
    optimality defects ``<F_i, H_i> - ||F_i||_*`` for ``H = Phi^* p``.  The
    report is flagged when the dual vector violates ``max_i ||H_i|| <= 1`` or
    the primal point is infeasible beyond tolerance.
    """
    z = np.asarray(z, float)
    p = np.asarray(p, float)
    h_blocks = op.adjoint_apply(p)
    per_block = []
    obj = 0.0
    for f, h in zip(blocks, h_blocks):
        nn = nuclear_norm(f)
        obj += nn
        per_block.append(float(np.sum(f * h)) - nn)
    gap = obj - float(p @ z)
    dual_feasible = max(operator_norm(h) for h in h_blocks) <= 1.0 + tol
    primal_feasible = (
        float(np.linalg.norm(op.apply(blocks) - z)) <= tol * (1.0 + np.linalg.norm(z))
    )
    return GapReport(
        gap=gap, per_block=per_block, dual_feasible=dual_feasible,
        primal_feasible=primal_feasible, flagged=not (dual_feasible and primal_feasible),
    )
