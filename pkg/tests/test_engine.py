import numpy as np
import pytest

from dc3 import autodiff as ad
from dc3.engine import (Dc3Config, Variant, correct, default_config, evaluate, predict, soft_loss,
                        summarize, train, with_overrides)
from dc3.errors import ContractError
from dc3.nn import init_params
from dc3.problems import generate_qp_family, sample_instances

from conftest import tiny_family


def test_soft_loss_toy_example():
    # f = ||y||^2, g = y1 - 1, h = y2
    fam = tiny_family([[0.0, 1.0]], [[1.0, 0.0]], [1.0], q=[2.0, 2.0], part=[0], dep=[1])
    loss = soft_loss(fam, np.zeros((1, 1)), np.array([[2.0, 0.0]]), 10.0, 10.0)
    assert loss.data[0] == pytest.approx(14.0)
    assert soft_loss(fam, np.zeros((1, 1)), np.array([[2.0, 0.0]]), 0.0, 0.0).data[0] == pytest.approx(4.0)


def test_soft_loss_of_feasible_point_is_objective(small_qp):
    X = np.random.default_rng(0).uniform(-1, 1, (5, 5))
    Y = small_qp.feasible_point(X)
    assert np.allclose(soft_loss(small_qp, X, Y, 5, 5).data, small_qp.objective_np(X, Y), rtol=0, atol=1e-12)


def test_soft_loss_gradient_fd(small_qp):
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, (3, 5))
    err = ad.finite_difference_check(lambda Y: ad.sum(soft_loss(small_qp, X, Y, 5, 5)),
                                     rng.standard_normal((3, 10)) * 3)
    assert err < 1e-5


def test_complete_backward_fd_through_soft_loss():
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(50):
        fam = generate_qp_family(trial, 12, 5, 6, "quadratic" if trial % 2 else "sine")
        x = rng.uniform(-1, 1, (1, 5))

        def loss(z):
            Y, _ = fam.complete(x, z)
            return ad.sum(soft_loss(fam, x, Y, 5, 5))

        worst = max(worst, ad.finite_difference_check(loss, rng.standard_normal((1, 7)) * 2))
    assert worst < 1e-5


def test_correction_hand_example():
    fam = tiny_family([[1.0, 1.0]], [[1.0, 0.0]], [0.0], part=[0], dep=[1])
    x = np.zeros((1, 1))
    Y0, cache = fam.complete_linear(x, [[1.0]])
    assert np.array_equal(Y0, [[1.0, -1.0]])
    res = correct(fam, x, Y0, mode="partial", lr=0.1, momentum=0.0, t_max=1, tol=0.0,
                  Z=ad.constant(np.array([[1.0]])), cache=cache)
    assert res.Z.data[0, 0] == pytest.approx(0.8)
    assert np.allclose(res.Y.data, [[0.8, -0.8]])
    assert res.Y.data.sum() == 0.0


def test_correction_of_feasible_point_stops_at_step_zero(small_qp):
    X = np.random.default_rng(0).uniform(-1, 1, (4, 5))
    Y = small_qp.feasible_point(X)
    Z = ad.constant(small_qp.partial_of(Y))
    _, cache = small_qp.complete_linear(X, Z.data)
    res = correct(small_qp, X, Y, mode="partial", lr=1e-3, momentum=0.5, t_max=10, tol=1e-4, Z=Z, cache=cache)
    assert res.steps == 0
    assert np.array_equal(res.Y.data, Y)


def test_partial_correction_descends_and_keeps_equalities():
    fam = generate_qp_family(1, 20, 8, 10)
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, (16, 8))
    Z = rng.standard_normal((16, 12)) * 3
    Y, cache = fam.complete_linear(X, Z)
    res = correct(fam, X, Y, mode="partial", lr=1e-5, momentum=0.0, t_max=10, tol=0.0,
                  Z=ad.constant(Z), cache=cache)
    v = np.array(res.violations)
    assert v[0] > 1e-4
    assert np.all(np.diff(v) < 0)
    assert np.abs(fam.eq_resid_np(X, res.Y.data)).max() < 1e-8


def test_correction_violation_non_increasing_at_default_step(small_qp):
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, (32, 5))
    Z = rng.standard_normal((32, 5)) * 5
    Y, cache = small_qp.complete_linear(X, Z)
    res = correct(small_qp, X, Y, mode="partial", lr=1e-7, momentum=0.5, t_max=10, tol=1e-4,
                  Z=ad.constant(Z), cache=cache)
    assert np.all(np.diff(res.violations) <= 0)


def test_full_correction_reduces_equality_residual(small_qp):
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, (8, 5))
    Y = rng.standard_normal((8, 10))
    res = correct(small_qp, X, Y, mode="full", lr=1e-2, momentum=0.0, t_max=20, tol=0.0)
    before = np.abs(small_qp.eq_resid_np(X, Y)).max()
    assert np.abs(small_qp.eq_resid_np(X, res.Y.data)).max() < before


def test_correct_rejects_bad_mode(small_qp):
    with pytest.raises(ContractError):
        correct(small_qp, np.zeros((1, 5)), np.zeros((1, 10)), mode="sideways", lr=1, momentum=0,
                t_max=1, tol=0)


def test_variant_flags():
    assert Variant.DC3.uses_completion and Variant.DC3.correct_train and Variant.DC3.correct_test
    assert not Variant.DC3_NoCompletion.uses_completion
    assert not Variant.DC3_NoCorrTrainTest.correct_test and Variant.DC3_NoCorrTrain.correct_test
    assert Variant.DC3_NoSoftLoss.loss == "objective"
    assert Variant.EqNN.needs_labels and not Variant.EqNN.correct_test and Variant.EqNN_CorrTest.correct_test
    assert Variant.NN_CorrTest.training_key == "NN"


def test_default_hyperparameters():
    c = default_config("qp", "DC3")
    assert (c.lr, c.lambda_g, c.lambda_h, c.t_train, c.t_test, c.corr_lr) == (1e-4, 5, 5, 10, 10, 1e-7)
    assert (c.epochs, c.batch_size, c.corr_momentum, c.corr_tol) == (1000, 200, 0.5, 1e-4)
    nn = default_config("nonconvex", "NN")
    assert nn.lambda_g + nn.lambda_h == 100
    a = default_config("acopf", "DC3")
    assert (a.lr, a.t_train, a.t_test, a.corr_lr) == (1e-3, 5, 5, 1e-4)
    assert default_config("acopf", "DC3_NoCompletion").corr_lr == 1e-5
    with pytest.raises(ContractError):
        default_config("lp", "DC3")
    with pytest.raises(ContractError):
        Dc3Config(corr_lr=0)


def test_predict_dc3_outputs_satisfy_equalities(small_sine):
    X = np.random.default_rng(0).uniform(-1, 1, (50, 5))
    params = init_params(0, 5, 5)
    for v in (Variant.DC3, Variant.DC3_NoCorrTrainTest, Variant.EqNN_CorrTest):
        pred = predict(params, v, small_sine, X, default_config("nonconvex", v))
        assert np.abs(small_sine.eq_resid_np(X, pred.Y.data)).max() < 1e-8


def test_summarize_feasible_and_self_gap(small_qp):
    X = np.random.default_rng(0).uniform(-1, 1, (20, 5))
    Y = small_qp.feasible_point(X)
    f = small_qp.objective_np(X, Y)
    s = summarize(small_qp, X, Y, f_ref=f).summary
    for key in ("max_eq", "mean_eq", "max_ineq", "mean_ineq"):
        assert s[key] < 1e-6
    assert s["gap"] == 0.0


def test_gap_uses_absolute_reference():
    fam = tiny_family(np.zeros((0, 1)), np.zeros((0, 1)), [], q=[0.0], p=[1.0])
    x = np.zeros((1, 0))
    s = summarize(fam, x, np.array([[-9.0]]), f_ref=np.array([-10.0])).summary
    assert s["gap"] == pytest.approx(0.1)


def test_training_is_deterministic_and_uses_completion():
    fam = generate_qp_family(2, 8, 3, 4)
    data = sample_instances(fam, 60, 0)
    cfg = with_overrides(default_config("qp", "DC3"), epochs=2, batch_size=20)
    p1, h1 = train("DC3", fam, data, cfg, seed=3)
    p2, h2 = train("DC3", fam, data, cfg, seed=3)
    assert h1 == h2
    assert all(np.array_equal(a, b) for a, b in zip(p1.weights, p2.weights))
    X, _ = data.split("test")
    res = evaluate(p1, "DC3", fam, X, cfg)
    assert res.summary["max_eq"] < 1e-6


def test_supervised_variant_needs_labels():
    fam = generate_qp_family(2, 8, 3, 4)
    data = sample_instances(fam, 30, 0)
    with pytest.raises(ContractError):
        train("EqNN", fam, data, with_overrides(default_config("qp", "EqNN"), epochs=1), seed=0)


@pytest.fixture(scope="module")
def tiny_runs():
    fam = generate_qp_family(0, 10, 5, 5)
    data = sample_instances(fam, 2400, 1)
    X, _ = data.split("test")
    out = {}
    for v in ("DC3", "DC3_NoSoftLoss"):
        cfg = with_overrides(default_config("qp", v), epochs=300)
        params, _ = train(v, fam, data, cfg, seed=0)
        out[v] = evaluate(params, v, fam, X, cfg).summary
    return out


@pytest.mark.slow
def test_tiny_qp_dc3_is_feasible(tiny_runs):
    s = tiny_runs["DC3"]
    assert s["max_eq"] < 1e-6
    assert s["max_ineq"] < 1e-4


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="at n=10 the objective-only optimum barely leaves the feasible set "
                   "(measured max ineq ~0.04); the signature shows at n=50")
def test_tiny_qp_no_soft_loss_violates(tiny_runs):
    assert tiny_runs["DC3_NoSoftLoss"]["max_ineq"] > 0.5
