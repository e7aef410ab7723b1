"""Dual-certificate machinery shared by all instantiations.

A candidate certificate for a block list of rank-one models is an element
``H = Phi^* p`` of the adjoint range.  Exact recovery is certified when H
interpolates the tangent space of every block (``P_T(H_i) = u_i v_i^T``)
and the off-tangent operator norms stay strictly below one.  The
pre-certificate is the least-norm solution of the tangent interpolation
system; it is a cheap candidate, not a guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCertificate
from .lowrank import (
    bregman_divergence,
    nuclear_norm,
    operator_norm,
    project_tangent,
    project_tangent_complement,
)

TANGENT_TOL = 1e-8
DEFAULT_MARGIN = 1e-3
RANK_RTOL = 1e-12


@dataclass
class CertificateReport:
    """Diagnostics of a candidate certificate against a block model list."""

    h_blocks: list
    tangent_residuals: np.ndarray
    w_norms: np.ndarray
    ndsc_pass: bool
    margin: float
    p: np.ndarray | None = None
    p_norm: float = 0.0
    sigma_min: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def max_w_norm(self):
        return float(self.w_norms.max()) if self.w_norms.size else 0.0


def complement_basis(u):
    """Deterministic orthonormal basis of the complement of a unit vector.

    Columns of the Householder reflector mapping e_1 to (minus) ``u``.
    """
    u = np.asarray(u, float)
    n = u.size
    s = 1.0 if u[0] >= 0 else -1.0
    v = u.copy()
    v[0] += s
    q = np.eye(n) - (2.0 / (v @ v)) * np.outer(v, v)
    return q[:, 1:]


def tangent_basis(model, symmetric=False):
    """Orthonormal basis of the tangent space at a rank-one model.

    The shared direction ``u v^T`` is counted once, so the dimension is
    ``rows + cols - 1``.  With ``symmetric`` (square models with ``u = v``,
    as in quadratic lifts with symmetric measurements) the basis spans the
    symmetric part of the tangent space only, dimension ``rows``.
    """
    u, v = model.u, model.v
    if symmetric:
        if u.size != v.size or np.linalg.norm(u - v) > 1e-10:
            raise ValueError("symmetric tangent basis needs a model with u = v")
        uperp = complement_basis(u)
        basis = [np.outer(u, u)]
        basis.extend(
            (np.outer(u, uperp[:, k]) + np.outer(uperp[:, k], u)) / np.sqrt(2.0)
            for k in range(uperp.shape[1])
        )
        return basis
    uperp = complement_basis(u)
    vperp = complement_basis(v)
    basis = [np.outer(u, v)]
    basis.extend(np.outer(u, vperp[:, k]) for k in range(vperp.shape[1]))
    basis.extend(np.outer(uperp[:, j], v) for j in range(uperp.shape[1]))
    return basis


def _tangent_map(op, models, symmetric=False):
    """Matrix of Phi restricted to the tangent product space.

    Columns are the measurements of the orthonormal tangent basis elements,
    block by block; also returns the right-hand side selecting the rank-one
    direction of each block.
    """
    shapes = op.domain_shapes
    if len(models) != len(shapes):
        raise ValueError(f"{len(models)} models for {len(shapes)} blocks")
    cols = []
    rhs = []
    offset = 0
    col_block = []
    for i, (model, (r, c)) in enumerate(zip(models, shapes)):
        basis = tangent_basis(model, symmetric=symmetric)
        bmat = np.stack([b.ravel() for b in basis], axis=1)
        block_cols = op.matrix[:, offset:offset + r * c] @ bmat
        cols.append(block_cols)
        rhs.extend([1.0] + [0.0] * (len(basis) - 1))
        col_block.extend([i] * len(basis))
        offset += r * c
    return np.hstack(cols), np.asarray(rhs), np.asarray(col_block)


def tangent_injectivity(op, models, symmetric=False):
    """Smallest singular value of Phi restricted to the tangent space.

    A positive value certifies discrete injectivity; its reciprocal is the
    empirical stability constant.
    """
    m_t, _, _ = _tangent_map(op, models, symmetric=symmetric)
    svals = np.linalg.svd(m_t, compute_uv=False)
    return float(svals[-1]) if svals.size else 0.0


def cone_injectivity(op, models, rtol=1e-10):
    """Check that Phi is injective on the cone spanned by the model directions."""
    shapes = op.domain_shapes
    cols = []
    offset = 0
    for model, (r, c) in zip(models, shapes):
        direction = np.zeros(op.matrix.shape[1])
        direction[offset:offset + r * c] = np.outer(model.u, model.v).ravel()
        cols.append(op.matrix @ direction)
        offset += r * c
    mat = np.stack(cols, axis=1)
    svals = np.linalg.svd(mat, compute_uv=False)
    if svals.size == 0 or svals[0] == 0.0:
        return False
    return bool(svals[-1] > rtol * svals[0])


def ndsc_verify(h_blocks, models, margin=DEFAULT_MARGIN, tol=TANGENT_TOL):
    """Evaluate tangent residual and off-tangent norm for each block.

    Passing requires every tangent residual below ``tol`` and every
    off-tangent operator norm at most ``1 - margin``.
    """
    resid = []
    wn = []
    for h, model in zip(h_blocks, models):
        pt = project_tangent(h, model)
        resid.append(float(np.linalg.norm(pt - np.outer(model.u, model.v))))
        wn.append(operator_norm(project_tangent_complement(h, model)))
    resid = np.asarray(resid)
    wn = np.asarray(wn)
    passed = bool(np.all(resid <= tol) and np.all(wn <= 1.0 - margin))
    return CertificateReport(
        h_blocks=list(h_blocks), tangent_residuals=resid, w_norms=wn,
        ndsc_pass=passed, margin=margin,
    )


def precertificate(op, models, margin=DEFAULT_MARGIN, tol=TANGENT_TOL,
                   symmetric=False):
    """Least-norm dual vector interpolating the tangent conditions.

    Assembles the measurement map restricted to the tangent space, solves
    ``(P_T Phi^*) p = (u_i v_i^T)_i`` for the minimum-norm ``p`` through the
    SVD pseudoinverse, and reports the resulting certificate diagnostics.

    Raises
    ------
    DegenerateCertificate
        When the restricted map is (numerically) rank deficient, carrying
        the offending smallest singular value.
    """
    m_t, rhs, _ = _tangent_map(op, models, symmetric=symmetric)
    u_svd, svals, vt_svd = np.linalg.svd(m_t, full_matrices=False)
    sigma_min = float(svals[-1]) if svals.size else 0.0
    # scale against the full operator so a tangent space inside the kernel
    # registers as degenerate rather than as a tiny full-rank system
    scale = max(float(svals[0]) if svals.size else 0.0,
                float(np.abs(op.matrix).max()))
    if svals.size == 0 or scale == 0.0 or sigma_min <= RANK_RTOL * scale:
        raise DegenerateCertificate(
            f"tangent system is rank deficient (sigma_min = {sigma_min:.3e}); "
            "the least-norm pre-certificate is not defined",
            sigma_min=sigma_min,
        )
    # least-norm solution of M_T^T p = rhs
    p = u_svd @ ((vt_svd @ rhs) / svals)
    h_blocks = op.adjoint_apply(p)
    report = ndsc_verify(h_blocks, models, margin=margin, tol=tol)
    report.p = p
    report.p_norm = float(np.linalg.norm(p))
    report.sigma_min = sigma_min
    report.extras["system_residual"] = float(np.linalg.norm(m_t.T @ p - rhs))
    return report


def robustness_bounds(op, f_delta, f_ref, models, h_blocks, p, c, delta, slack=1e-9):
    """Measured-versus-theoretical robustness quantities for a noisy solve.

    Evaluates the Bregman divergence between the noisy solution and the
    reference, the prediction error, and the off-tangent error mass, and
    compares each against its certified bound:

    * ``D_H <= (1 + c ||p||)^2 delta / (2 c)``
    * ``||Phi F_delta - Phi F_ref|| <= 2 (1 + c ||p||) delta``
    * ``sum_i ||P_perp(F_delta - F_ref)_i||_F <= D_H / (1 - max_i ||W_i||)``

    The bounds require H to be a valid subgradient at the reference and the
    regularization weight to equal ``c * delta``.
    """
    p_norm = float(np.linalg.norm(p))
    d_h = 0.0
    tperp_sum = 0.0
    w_max = 0.0
    for fd, fr, h, model in zip(f_delta, f_ref, h_blocks, models):
        d_h += bregman_divergence(fd, fr, h)
        tperp_sum += float(np.linalg.norm(project_tangent_complement(fd - fr, model)))
        w_max = max(w_max, operator_norm(project_tangent_complement(h, model)))
    pred = float(np.linalg.norm(op.apply(f_delta) - op.apply(f_ref)))

    bound_dh = (1.0 + c * p_norm) ** 2 * delta / (2.0 * c)
    bound_pred = 2.0 * (1.0 + c * p_norm) * delta
    bound_tperp = d_h / (1.0 - w_max) if w_max < 1.0 else np.inf
    report = {
        "bregman": d_h,
        "bregman_bound": bound_dh,
        "bregman_ok": d_h <= bound_dh + slack,
        "prediction_error": pred,
        "prediction_bound": bound_pred,
        "prediction_ok": pred <= bound_pred + slack,
        "tperp_error": tperp_sum,
        "tperp_bound": bound_tperp,
        "tperp_ok": tperp_sum <= bound_tperp + slack,
        "p_norm": p_norm,
        "w_max": w_max,
    }
    report["all_ok"] = bool(
        report["bregman_ok"] and report["prediction_ok"] and report["tperp_ok"]
    )
    return report


def certificate_objective_link(f_blocks, h_blocks):
    """Per-block defects ``<F_i, H_i> - ||F_i||_*`` of the optimality link."""
    return [
        float(np.sum(f * h)) - nuclear_norm(f)
        for f, h in zip(f_blocks, h_blocks)
    ]
