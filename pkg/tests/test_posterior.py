import json

import numpy as np
import pytest

from dadvi.errors import CGNotConverged, ContractViolation, NotAtOptimum
from dadvi.model import QuadraticModel, instantiate_hierarchical, random_spd
from dadvi.optimize import OptimizerConfig, dadvi_fit
from dadvi.posterior import (
    CGConfig,
    DenseOperator,
    HessianOperator,
    build_qoi_report,
    cg_solve,
    dadvi_preconditioner,
    lr_covariance,
    lr_covariance_matrix,
    mc_error,
    verify_optimum,
)
from dadvi.saa import ObjectiveBundle, quadratic_saa_optimum, sample_draws, whiten_draws
from dadvi.variational import MeanFieldParams, QuantityOfInterest

coord = QuantityOfInterest.coordinate


def fitted(model, N, seed, whiten=False, gtol=1e-10):
    ds = sample_draws(seed, N, model.dim)
    if whiten:
        ds = whiten_draws(ds)
    b = ObjectiveBundle(model, ds)
    res, _ = dadvi_fit(b, config=OptimizerConfig(gtol=gtol))
    assert res.converged
    return res.eta_hat, b


def test_cg_identity():
    b = np.array([3.0, -1.0, 2.0])
    res = cg_solve(DenseOperator(np.eye(3)), b)
    np.testing.assert_allclose(res.x, b)
    assert res.iterations <= 1


def test_cg_two_by_two():
    res = cg_solve(DenseOperator([[4.0, 1.0], [1.0, 3.0]]), np.array([1.0, 2.0]))
    np.testing.assert_allclose(res.x, [1 / 11, 7 / 11], atol=1e-12)


def test_cg_matches_dense_200():
    A = random_spd(200, 1e3, 5)
    b = np.random.default_rng(0).standard_normal(200)
    res = cg_solve(DenseOperator(A), b)
    exact = np.linalg.solve(A, b)
    assert np.linalg.norm(res.x - exact) / np.linalg.norm(exact) <= 1e-8


def test_cg_not_converged_carries_best_iterate():
    A = random_spd(50, 1e4, 1)
    with pytest.raises(CGNotConverged) as err:
        cg_solve(DenseOperator(A), np.ones(50), CGConfig(max_iter=3))
    assert err.value.x.shape == (50,) and err.value.residual > 1e-10 and err.value.iterations == 3


def test_cg_rejects_bad_config():
    with pytest.raises(ContractViolation):
        CGConfig(tol=0)


def test_preconditioner_examples():
    np.testing.assert_array_equal(dadvi_preconditioner(MeanFieldParams.standard(3)), np.ones(6))
    p = dadvi_preconditioner(MeanFieldParams([0.0, 0.0], [np.log(3), 0.0]))
    assert p[0] == pytest.approx(9.0) and p[1] == 1.0 and p[2:].tolist() == [1.0, 1.0]


def test_preconditioner_helps_ill_conditioned_quadratic():
    D = 12
    m = QuadraticModel(np.diag(np.logspace(-4, 4, D)))
    eta, b = fitted(m, 30, 0)
    H = HessianOperator(b, eta)
    rhs = np.random.default_rng(1).standard_normal(2 * D)
    plain = cg_solve(H, rhs, CGConfig(preconditioned=False))
    pre = cg_solve(H, rhs, CGConfig(), dadvi_preconditioner(eta))
    assert np.linalg.norm(pre.x - plain.x) <= 1e-8 * np.linalg.norm(plain.x)
    assert pre.iterations <= plain.iterations


def test_hessian_operator_symmetric_pd():
    m = instantiate_hierarchical(10, 0)
    eta, b = fitted(m, 30, 1)
    H = HessianOperator(b, eta)
    rng = np.random.default_rng(2)
    u, v = rng.standard_normal(H.shape[0]), rng.standard_normal(H.shape[0])
    assert u @ H(v) == pytest.approx(v @ H(u), rel=1e-8, abs=1e-8)
    assert v @ H(v) > 0
    Hd = H.dense()
    assert np.allclose(Hd, Hd.T, atol=1e-8)


def test_lr_exact_on_quadratic_for_every_drawset():
    A = random_spd(4, 20.0, 3)
    m = QuadraticModel(A, np.ones(4))
    for seed in range(5):
        eta, b = fitted(m, 6, seed)
        for d in range(4):
            assert lr_covariance(coord(d), coord(d), eta, b) == pytest.approx(np.linalg.inv(A)[d, d], abs=1e-6)


def test_lr_two_by_two_off_diagonal():
    eta, b = fitted(QuadraticModel([[2.0, 1.0], [1.0, 2.0]]), 30, 0)
    assert lr_covariance(coord(0), coord(1), eta, b) == pytest.approx(-1 / 3, abs=1e-6)


def test_lr_symmetry_and_psd():
    m = instantiate_hierarchical(10, 0)
    eta, b = fitted(m, 30, 0)
    qs = [coord(0), coord(1), QuantityOfInterest.coordinate_square(2), QuantityOfInterest.linear(np.ones(m.dim))]
    C = lr_covariance_matrix(qs, eta, b)
    np.testing.assert_allclose(C, C.T, atol=1e-8)
    assert np.linalg.eigvalsh(0.5 * (C + C.T)).min() >= -1e-8
    assert lr_covariance(qs[2], qs[2], eta, b) >= 0
    assert lr_covariance(qs[0], qs[2], eta, b) == pytest.approx(lr_covariance(qs[2], qs[0], eta, b), abs=1e-8)


def test_refuses_non_optimum():
    m = QuadraticModel(np.eye(2))
    b = ObjectiveBundle(m, sample_draws(0, 10, 2))
    eta = MeanFieldParams([1.0, 1.0], [0.0, 0.0])
    with pytest.raises(NotAtOptimum) as err:
        lr_covariance(coord(0), coord(0), eta, b)
    assert err.value.grad_norm > 1e-6
    with pytest.raises(NotAtOptimum):
        mc_error(coord(0), eta, b)


def test_verify_optimum_passes_at_fit():
    eta, b = fitted(QuadraticModel(np.eye(2)), 10, 0)
    gnorm, curv = verify_optimum(b, eta)
    assert gnorm <= 1e-6 and curv > 0


def test_mc_error_scales_with_root_n():
    m = QuadraticModel([[1.0]])
    se = []
    for N in (30, 60):
        eta, b = fitted(m, N, 7)
        se.append(mc_error(coord(0), eta, b))
    assert se[1] / se[0] == pytest.approx(2**-0.5, rel=0.15)


def test_mc_error_constant_is_zero():
    eta, b = fitted(QuadraticModel([[1.0]]), 30, 0)
    assert mc_error(QuantityOfInterest.constant(2.0), eta, b) == 0.0


def test_report_quadratic_whitened_closed_forms():
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    eta, b = fitted(QuadraticModel(A), 30, 0, whiten=True)
    rep = build_qoi_report([coord(0), coord(1)], eta, b)
    for d, row in enumerate(rep.rows):
        assert row.mf_sd == pytest.approx(A[d, d] ** -0.5, abs=1e-6)
        assert row.lr_sd == pytest.approx(np.sqrt(np.linalg.inv(A)[d, d]), abs=1e-6)
        assert row.lr_sd >= row.mf_sd and row.error is None


def test_report_diagonal_A_lr_equals_mf():
    eta, b = fitted(QuadraticModel(np.diag([1.0, 4.0, 0.5])), 30, 1, whiten=True)
    for row in build_qoi_report([coord(d) for d in range(3)], eta, b).rows:
        assert row.lr_sd == pytest.approx(row.mf_sd, abs=1e-6)


def test_report_constant_quantity_and_json():
    eta, b = fitted(QuadraticModel([[2.0, 1.0], [1.0, 2.0]]), 30, 0)
    rep = build_qoi_report([coord(0), QuantityOfInterest.constant(3.0)], eta, b)
    const = rep["constant"]
    assert const.mc_se == 0.0 and const.se_flag is False and const.mean == 3.0
    d = json.loads(rep.to_json())
    assert set(d["quantities"][0]) == {"name", "mean", "mf_sd", "lr_sd", "mc_se", "cg_iters", "se_flag"}
    assert all(r["mf_sd"] >= 0 and r["lr_sd"] >= 0 for r in d["quantities"])


def test_report_row_errors_do_not_abort():
    eta, b = fitted(QuadraticModel(np.eye(2)), 30, 0)
    bad = QuantityOfInterest("no-grad", lambda t: t[..., 0])
    rep = build_qoi_report([bad, coord(1)], eta, b)
    assert rep.rows[0].error and "UnsupportedQuantity" in rep.rows[0].error
    assert rep.rows[1].error is None and rep.rows[1].lr_sd == pytest.approx(1.0, abs=1e-6)


def test_se_flag_small_vs_large_n():
    m = instantiate_hierarchical(20, 0)
    qs = [coord(i) for i in range(3)]
    eta4, b4 = fitted(m, 4, 0, gtol=1e-8)
    eta64, b64 = fitted(m, 64, 0, gtol=1e-8)
    assert any(r.se_flag for r in build_qoi_report(qs, eta4, b4).rows)
    assert not any(r.se_flag for r in build_qoi_report(qs, eta64, b64).rows)


@pytest.mark.xfail(strict=True, reason="hierarchical SAA objective is unbounded at N=2; the fit never converges (see ledger)")
def test_se_flag_fires_at_n2():
    m = instantiate_hierarchical(20, 0)
    eta, b = fitted(m, 2, 0, gtol=1e-8)
    assert any(r.se_flag for r in build_qoi_report([coord(i) for i in range(3)], eta, b).rows)
