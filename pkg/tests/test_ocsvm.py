import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qp_oracle import instance, qp_reference
from splitguard.errors import TrainingError, UsageError
from splitguard.ocsvm import default_gamma, rbf_kernel, solve_dual, train_ocsvm


@pytest.mark.parametrize("seed", range(20))
def test_matches_qp_reference(seed):
    x, nu, probe = instance(seed)
    model = train_ocsvm(x, nu)
    K = rbf_kernel(x, x, model.gamma)
    alpha, rho = qp_reference(K, nu)
    ref = rbf_kernel(probe, x, model.gamma) @ alpha - rho
    assert np.max(np.abs(model.decision(probe) - ref)) < 1e-4
    assert np.max(np.abs(model.decision(x) - (K @ alpha - rho))) < 1e-4


def test_twelve_points_quarter_nu():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(12, 2))
    model = train_ocsvm(x, 0.25)
    alpha, rho = qp_reference(rbf_kernel(x, x, model.gamma), 0.25)
    probe = rng.normal(size=(30, 2)) * 2
    assert np.allclose(model.decision(probe), rbf_kernel(probe, x, model.gamma) @ alpha - rho, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 60), st.floats(0.05, 1.0), st.integers(0, 10_000))
def test_dual_feasibility(n, nu, seed):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    K = rbf_kernel(x, x, default_gamma(x))
    alpha, rho, resid, _ = solve_dual(K, nu)
    assert abs(alpha.sum() - 1) < 1e-9
    assert alpha.min() >= 0 and alpha.max() <= 1 / (nu * n) + 1e-12
    assert resid < 1e-6


@pytest.mark.parametrize("nu", [0.05, 0.25])
def test_nu_property(nu):
    x = np.random.default_rng(1).normal(size=(400, 4))
    model = train_ocsvm(x, nu)
    assert model.predict_anomalous(x).mean() <= nu + 0.05


def test_identical_points_are_inliers():
    x = np.ones((12, 2))
    model = train_ocsvm(x, 0.1)
    assert model.decision(np.ones((1, 2)))[0] >= -1e-12


def test_far_point_is_outlier():
    x = np.random.default_rng(2).normal(size=(30, 2))
    model = train_ocsvm(x, 0.1)
    far = model.decision(np.array([[1e3, 1e3]]))[0]
    assert far == pytest.approx(-model.rho) and far < 0


def test_score_is_negated_decision():
    x = np.random.default_rng(3).normal(size=(30, 2))
    model = train_ocsvm(x, 0.2)
    probe = np.random.default_rng(4).normal(size=(50, 2))
    d, s = model.decision(probe), model.score(probe)
    assert np.array_equal(s, -d)
    assert np.array_equal(np.argsort(s, kind="stable"), np.argsort(-d, kind="stable"))


def test_default_gamma():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    # distinct-pair squared distances 1, 1, 2
    assert default_gamma(x) == pytest.approx(3 / 4)
    assert default_gamma(x, factor=4) == pytest.approx(3 / 16)


def test_guards():
    x = np.random.default_rng(0).normal(size=(9, 2))
    with pytest.raises(UsageError):
        train_ocsvm(x)
    x = np.random.default_rng(0).normal(size=(20, 2))
    with pytest.raises(UsageError):
        train_ocsvm(x, nu=0)
    with pytest.raises(UsageError):
        train_ocsvm(x, gamma=-1)


def test_non_convergence_reports_residual():
    x = np.random.default_rng(0).normal(size=(40, 2))
    K = rbf_kernel(x, x, 1.0)
    with pytest.raises(TrainingError, match="residual"):
        solve_dual(K, 0.3, max_iter=1)
