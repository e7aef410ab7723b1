import numpy as np
import pytest

from liftrec.certify import (
    CertificateReport,
    complement_basis,
    cone_injectivity,
    ndsc_verify,
    precertificate,
    robustness_bounds,
    tangent_basis,
    tangent_injectivity,
)
from liftrec.errors import DegenerateCertificate
from liftrec.lowrank import RankOneModel, operator_norm, project_tangent_complement
from liftrec.solvers import AffineOperator


def _model(rng, n1=4, n2=3):
    u = rng.standard_normal(n1)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(n2)
    v /= np.linalg.norm(v)
    return RankOneModel(sigma=1.3, u=u, v=v)


def test_complement_basis_orthonormal():
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = rng.standard_normal(6)
        u /= np.linalg.norm(u)
        c = complement_basis(u)
        assert c.shape == (6, 5)
        assert np.allclose(c.T @ c, np.eye(5), atol=1e-12)
        assert np.abs(c.T @ u).max() < 1e-12


def test_tangent_basis_orthonormal_and_spans_tangent():
    rng = np.random.default_rng(1)
    model = _model(rng)
    basis = tangent_basis(model)
    assert len(basis) == 4 + 3 - 1
    flat = np.stack([b.ravel() for b in basis])
    assert np.allclose(flat @ flat.T, np.eye(len(basis)), atol=1e-12)
    for b in basis:
        assert np.abs(project_tangent_complement(b, model)).max() < 1e-12


def test_identity_operator_certificate_is_the_model():
    rng = np.random.default_rng(2)
    model = _model(rng)
    op = AffineOperator(np.eye(12), [(4, 3)])
    report = precertificate(op, [model])
    assert report.ndsc_pass
    assert report.max_w_norm < 1e-12
    assert np.allclose(report.h_blocks[0], np.outer(model.u, model.v), atol=1e-10)
    assert tangent_injectivity(op, [model]) == pytest.approx(1.0, abs=1e-10)


def test_degenerate_when_tangent_in_kernel():
    # operator that only sees the complement direction annihilates T
    rng = np.random.default_rng(3)
    model = _model(rng)
    probe = project_tangent_complement(rng.standard_normal((4, 3)), model)
    op = AffineOperator(probe.ravel()[None, :], [(4, 3)])
    with pytest.raises(DegenerateCertificate) as err:
        precertificate(op, [model])
    assert err.value.sigma_min <= 1e-10
    assert tangent_injectivity(op, [model]) <= 1e-10


def test_cone_injectivity_cases():
    rng = np.random.default_rng(4)
    model = _model(rng)
    ident = AffineOperator(np.eye(12), [(4, 3)])
    assert cone_injectivity(ident, [model])
    zero = AffineOperator(np.zeros((2, 12)), [(4, 3)])
    assert not cone_injectivity(zero, [model])
    # single model with nonzero measurement: one nonzero column has full rank
    row = np.outer(model.u, model.v).ravel()[None, :]
    assert cone_injectivity(AffineOperator(row, [(4, 3)]), [model])


def test_ndsc_verify_pass_and_fail():
    rng = np.random.default_rng(5)
    model = _model(rng)
    uv = np.outer(model.u, model.v)
    assert ndsc_verify([uv], [model]).ndsc_pass
    w = project_tangent_complement(rng.standard_normal((4, 3)), model)
    w *= 1.2 / operator_norm(w)
    assert not ndsc_verify([uv + w], [model]).ndsc_pass
    # tangent violation also fails
    assert not ndsc_verify([1.5 * uv], [model]).ndsc_pass


def test_ndsc_margin_stability():
    # passing with margin m tolerates any off-tangent perturbation below
    # m / 2 at margin m / 2
    rng = np.random.default_rng(6)
    model = _model(rng)
    uv = np.outer(model.u, model.v)
    w = project_tangent_complement(rng.standard_normal((4, 3)), model)
    w *= 0.5 / operator_norm(w)
    h = uv + w
    margin = 1.0 - operator_norm(w) - 1e-12
    assert ndsc_verify([h], [model], margin=margin).ndsc_pass
    pert = project_tangent_complement(rng.standard_normal((4, 3)), model)
    pert *= 0.49 * margin / operator_norm(pert)
    assert ndsc_verify([h + pert], [model], margin=margin / 2).ndsc_pass


def test_precertificate_multi_block():
    rng = np.random.default_rng(7)
    models = [_model(rng), _model(rng)]
    op = AffineOperator(np.eye(24), [(4, 3), (4, 3)])
    report = precertificate(op, models)
    assert report.ndsc_pass
    assert report.tangent_residuals.shape == (2,)
    assert report.extras["system_residual"] < 1e-10
    assert isinstance(report, CertificateReport)


def test_robustness_bounds_trivial_case():
    rng = np.random.default_rng(8)
    model = _model(rng)
    op = AffineOperator(np.eye(12), [(4, 3)])
    f_ref = [model.matrix]
    h = [np.outer(model.u, model.v)]
    p = op.matrix @ h[0].ravel()
    report = robustness_bounds(op, f_ref, f_ref, [model], h, p, c=1.0, delta=0.0)
    assert report["bregman"] == pytest.approx(0.0, abs=1e-12)
    assert report["prediction_error"] == pytest.approx(0.0, abs=1e-12)
    assert report["all_ok"]


def test_robustness_bounds_flag_violations():
    rng = np.random.default_rng(9)
    model = _model(rng)
    op = AffineOperator(np.eye(12), [(4, 3)])
    f_ref = [model.matrix]
    f_far = [model.matrix + rng.standard_normal((4, 3))]
    h = [np.outer(model.u, model.v)]
    p = op.matrix @ h[0].ravel()
    # delta = 0 with a genuinely different solution cannot satisfy the bounds
    report = robustness_bounds(op, f_far, f_ref, [model], h, p, c=1.0, delta=1e-12)
    assert not report["all_ok"]
