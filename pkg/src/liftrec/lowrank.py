"""Nuclear-norm toolbox on whitened matrices.

Everything here operates on plain matrices in whitened coordinates, where
the Hilbert-Schmidt inner product is Frobenius and the nuclear / operator
norms are the usual singular value sums and maxima.

With values stored rows-by-x and columns-by-y, the operator attached to a
matrix ``M`` maps x-vectors to y-vectors: "apply M to a" is ``M.T @ a`` and
"apply the adjoint to b" is ``M @ b``.  The tangent space at a rank-one
model ``sigma * outer(u, v)`` is spanned by matrices sharing the row or
column space of the model, with orthogonal projector

    P_T(M) = uu^T M + M vv^T - uu^T M vv^T,
    P_T_perp(M) = (I - uu^T) M (I - vv^T).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, NumericFailure

# Membership tolerances: equality checks at 1e-8 absolute (below solver
# precision, above round-off), strict inequalities by a separate margin.
DEFAULT_TOL = 1e-8
DEFAULT_MARGIN = 1e-3
RANK_THRESHOLD = 1e-10


@dataclass
class RankOneModel:
    """Ground-truth triple (sigma, u, v) in whitened coordinates.

    ``u`` and ``v`` are unit vectors; ``sigma > 0``.  The model determines
    the tangent space used by all certificate computations.
    """

    sigma: float
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, float)
        self.v = np.asarray(self.v, float)
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        for name, vec in (("u", self.u), ("v", self.v)):
            nrm = np.linalg.norm(vec)
            if abs(nrm - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a unit vector, |{name}| = {nrm!r}")

    @property
    def matrix(self):
        """The rank-one matrix sigma * u v^T."""
        return self.sigma * np.outer(self.u, self.v)


@dataclass
class SubdiffCertificate:
    """Decomposition H = u v^T + W with the operator norm of the T-perp part."""

    H: np.ndarray
    W: np.ndarray
    w_norm: float


def _svdvals(m):
    try:
        return np.linalg.svd(np.asarray(m, float), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("SVD did not converge") from exc


def nuclear_norm(m):
    """Sum of singular values."""
    return float(np.sum(_svdvals(m)))


def operator_norm(m):
    """Largest singular value."""
    s = _svdvals(m)
    return float(s[0]) if s.size else 0.0


def svt_prox(m, tau):
    """Singular value thresholding, the prox of ``tau * ||.||_*``.

    Soft-shrinks the singular values of ``m`` by ``tau``; the output X
    satisfies the prox optimality condition ``(m - X) / tau`` in the
    subdifferential of the nuclear norm at X.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    try:
        u, s, vt = np.linalg.svd(np.asarray(m, float), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("SVD did not converge") from exc
    shrunk = np.maximum(s - tau, 0.0)
    return (u * shrunk) @ vt


def project_tangent(m, model):
    """Orthogonal projection onto the tangent space of the model."""
    m = np.asarray(m, float)
    _check_shape(m, model)
    u, v = model.u, model.v
    mu = u @ m                # row vector u^T M
    mv = m @ v                # column vector M v
    umv = u @ mv
    return np.outer(u, mu) + np.outer(mv, v) - umv * np.outer(u, v)


def project_tangent_complement(m, model):
    """Orthogonal projection onto the complement, ``(I - uu^T) M (I - vv^T)``."""
    m = np.asarray(m, float)
    _check_shape(m, model)
    u, v = model.u, model.v
    tmp = m - np.outer(u, u @ m)
    return tmp - np.outer(tmp @ v, v)


def _check_shape(m, model):
    if m.shape != (model.u.size, model.v.size):
        raise ValueError(
            f"matrix shape {m.shape} does not match model ({model.u.size}, {model.v.size})"
        )


def make_certificate(h, model):
    """Split a candidate certificate into rank-one part plus remainder."""
    h = np.asarray(h, float)
    _check_shape(h, model)
    w = h - np.outer(model.u, model.v)
    return SubdiffCertificate(H=h, W=w, w_norm=operator_norm(project_tangent_complement(h, model)))


def subdiff_check(h, model, form="ii", strict=False, tol=DEFAULT_TOL, margin=DEFAULT_MARGIN):
    """Test membership of H in the nuclear-norm subdifferential at the model.

    Four equivalent formulations are available:

    * ``i``:   ``||H|| <= 1`` and ``<H, uv^T> = 1``;
    * ``ii``:  ``P_T(H) = uv^T`` and ``||P_T_perp(H)|| <= 1``;
    * ``iii``: ``W = H - uv^T`` satisfies ``W^T u = 0``, ``W v = 0``, ``||W|| <= 1``;
    * ``iv``:  ``H^T u = v``, ``H v = u`` and the bilinear form restricted to
      the orthogonal complements is bounded by 1.

    With ``strict`` the norm bounds are tightened to ``1 - margin``.

    Returns
    -------
    ok : bool
    report : dict
        Numerical residuals backing the decision.
    """
    h = np.asarray(h, float)
    _check_shape(h, model)
    u, v = model.u, model.v
    bound = 1.0 - margin if strict else 1.0 + tol

    if form == "i":
        norm_ok = operator_norm(h) <= bound
        pairing = float(u @ h @ v)
        eq_resid = abs(pairing - 1.0)
        ok = norm_ok and eq_resid <= tol
        report = {"form": "i", "op_norm": operator_norm(h), "pairing_residual": eq_resid}
    elif form == "ii":
        tangent_resid = float(np.linalg.norm(project_tangent(h, model) - np.outer(u, v)))
        w_norm = operator_norm(project_tangent_complement(h, model))
        ok = tangent_resid <= tol and w_norm <= bound
        report = {"form": "ii", "tangent_residual": tangent_resid, "w_norm": w_norm}
    elif form == "iii":
        w = h - np.outer(u, v)
        null_resid = max(float(np.linalg.norm(u @ w)), float(np.linalg.norm(w @ v)))
        w_norm = operator_norm(w)
        ok = null_resid <= tol and w_norm <= bound
        report = {"form": "iii", "null_residual": null_resid, "w_norm": w_norm}
    elif form == "iv":
        interp_resid = max(
            float(np.linalg.norm(h.T @ u - v)),
            float(np.linalg.norm(h @ v - u)),
        )
        # sup over unit u_perp, v_perp of |<H u_perp, v_perp>| is the operator
        # norm of H compressed to the complements
        offdiag = operator_norm(project_tangent_complement(h, model))
        ok = interp_resid <= tol and offdiag <= bound
        report = {"form": "iv", "interp_residual": interp_resid, "offdiag_norm": offdiag}
    else:
        raise ValueError(f"unknown form {form!r}, expected one of i, ii, iii, iv")

    report["strict"] = strict
    report["bound"] = bound
    return ok, report


def bregman_divergence(f, f_ref, h):
    """Bregman divergence of the nuclear norm between ``f`` and ``f_ref``.

    ``D_H = ||f||_* - ||f_ref||_* - <H, f - f_ref>``; nonnegative whenever H
    is a valid subgradient at ``f_ref``.  Warns when the membership check
    fails at the reference point.
    """
    f = np.asarray(f, float)
    f_ref = np.asarray(f_ref, float)
    h = np.asarray(h, float)
    scale = max(nuclear_norm(f_ref), 1.0)
    membership = (
        operator_norm(h) <= 1.0 + 1e-6
        and abs(float(np.sum(h * f_ref)) - nuclear_norm(f_ref)) <= 1e-6 * scale
    )
    if not membership:
        warnings.warn("H does not look like a subgradient at f_ref", stacklevel=2)
    return nuclear_norm(f) - nuclear_norm(f_ref) - float(np.sum(h * (f - f_ref)))


def leading_rank_one(m):
    """Extract the top singular triple as a RankOneModel.

    The sign convention makes the first entry of ``u`` exceeding
    ``1e-10 * max|u|`` positive, so repeated extractions are reproducible.
    """
    m = np.asarray(m, float)
    if not np.any(m):
        raise DegenerateInput("cannot extract a rank-one model from the zero matrix")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    sigma = float(s[0])
    if sigma <= 0:
        raise DegenerateInput("leading singular value is zero")
    uvec = u[:, 0].copy()
    vvec = vt[0, :].copy()
    pivot = np.flatnonzero(np.abs(uvec) > 1e-10 * np.abs(uvec).max())
    if pivot.size and uvec[pivot[0]] < 0:
        uvec = -uvec
        vvec = -vvec
    # renormalize to kill SVD round-off before the model validates unit norms
    uvec = uvec / np.linalg.norm(uvec)
    vvec = vvec / np.linalg.norm(vvec)
    return RankOneModel(sigma=sigma, u=uvec, v=vvec)


def rank_estimate(m, threshold=RANK_THRESHOLD):
    """Number of singular values above ``threshold * sigma_1``."""
    s = _svdvals(m)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > threshold * s[0]))
