import numpy as np
import pytest

from dc3 import autodiff as ad
from dc3.errors import DimensionError, FormatError, GenerationError
from dc3.problems import (generate_qp_family, load_family, load_instances, sample_instances,
                          save_family, save_instances, split_sizes)

from conftest import tiny_family


def test_h_rhs_nonnegative_and_pinv_point_feasible():
    rng = np.random.default_rng(0)
    for seed in range(10):
        fam = generate_qp_family(seed, 30, 10, 12)
        assert np.all(fam.h_rhs >= 0)
        X = rng.uniform(-1, 1, size=(100, 10))
        Y = fam.feasible_point(X)
        assert np.abs(fam.eq_resid_np(X, Y)).max() < 1e-8
        assert fam.ineq_resid_np(X, Y).max() <= 1e-12


def test_generator_feasibility_on_1000_pairs():
    rng = np.random.default_rng(1)
    worst_eq = worst_ineq = -np.inf
    for seed in range(100):
        fam = generate_qp_family(100 + seed, 20, 8, 8)
        X = rng.uniform(-1, 1, size=(10, 8))
        Y = fam.feasible_point(X)
        worst_eq = max(worst_eq, np.abs(fam.eq_resid_np(X, Y)).max())
        worst_ineq = max(worst_ineq, fam.ineq_resid_np(X, Y).max())
    assert worst_eq < 1e-8 and worst_ineq <= 1e-12


def test_family_is_deterministic_in_seed():
    a, b = generate_qp_family(3, 12, 4, 5), generate_qp_family(3, 12, 4, 5)
    for key in ("q", "p", "A", "G", "h_rhs", "A_pinv", "part", "dep"):
        assert np.array_equal(getattr(a, key), getattr(b, key))
    assert np.all((a.q >= 0) & (a.q <= 1))


def test_invalid_dims_rejected():
    with pytest.raises(GenerationError):
        generate_qp_family(0, 5, 6, 2)
    with pytest.raises(GenerationError):
        generate_qp_family(0, 5, 2, 2, kind="cubic")


def test_split_is_10_1_1():
    assert split_sizes(10_000) == (8334, 833, 833)
    assert split_sizes(1200) == (1000, 100, 100)
    assert split_sizes(2400) == (2000, 200, 200)


def test_sample_instances(small_qp):
    a = sample_instances(small_qp, 120, 4)
    b = sample_instances(small_qp, 120, 4)
    assert np.array_equal(a.X, b.X)
    assert np.all(np.abs(a.X) <= 1)
    assert len(a.test) == 10 and len(set(a.train) | set(a.val) | set(a.test)) == 120


def test_objective_examples():
    one = np.zeros((0, 1))
    quad = tiny_family(one, np.zeros((0, 1)), [], q=[1.0], p=[2.0])
    sine = tiny_family(one, np.zeros((0, 1)), [], q=[1.0], p=[2.0], kind="sine")
    x = np.zeros((1, 0))
    assert quad.objective_np(x, np.array([[3.0]]))[0] == pytest.approx(10.5)
    assert sine.objective_np(x, np.array([[3.0]]))[0] == pytest.approx(4.5 + 2 * np.sin(3.0))
    assert sine.objective_np(x, np.array([[3.0]]))[0] == pytest.approx(4.782, abs=1e-3)


def test_zero_point(small_qp, small_sine):
    X = np.random.default_rng(0).uniform(-1, 1, (3, 5))
    for fam in (small_qp, small_sine):
        Y = np.zeros((3, 10))
        assert np.all(fam.objective_np(X, Y) == 0)
        assert np.array_equal(fam.ineq_resid_np(X, Y), -np.tile(fam.h_rhs, (3, 1)))


def test_quadratic_objective_is_convex_along_segments(small_qp):
    rng = np.random.default_rng(2)
    x = np.zeros((1, 5))
    for _ in range(100):
        a, b = rng.standard_normal((2, 1, 10)) * 3
        mid = small_qp.objective_np(x, (a + b) / 2)[0]
        assert mid <= 0.5 * (small_qp.objective_np(x, a)[0] + small_qp.objective_np(x, b)[0]) + 1e-12


def test_completion_examples():
    fam = tiny_family([[0.0, 1.0]], np.zeros((0, 2)), [], part=[0], dep=[1])
    Y, _ = fam.complete_linear([[3.0]], [[5.0]])
    assert np.array_equal(Y, [[5.0, 3.0]])
    fam = tiny_family([[1.0, 2.0]], np.zeros((0, 2)), [])
    Y, cache = fam.complete_linear([[4.0]], [[2.0]])
    assert np.allclose(Y, [[2.0, 1.0]])
    assert fam.complete_backward(cache, np.zeros((1, 1)), np.ones((1, 1)))[0, 0] == pytest.approx(-0.5)
    dz = np.array([[0.7]])
    assert np.array_equal(fam.complete_backward(cache, dz, np.zeros((1, 1))), dz)


def test_completion_residual_on_random_system():
    fam = generate_qp_family(5, 100, 50, 50)
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (200, 50))
    Y, _ = fam.complete_linear(X, rng.standard_normal((200, 50)))
    assert np.abs(fam.eq_resid_np(X, Y)).max() < 1e-8


def test_completion_dimension_error(small_qp):
    with pytest.raises(DimensionError):
        small_qp.complete_linear(np.zeros((2, 5)), np.zeros((2, 4)))


def test_completion_jvp_and_vjp_are_adjoint(small_qp):
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, (4, 5))
    _, cache = small_qp.complete_linear(X, rng.standard_normal((4, 5)))
    dz = rng.standard_normal((4, 5))
    gy = rng.standard_normal((4, 10))
    lhs = np.sum(small_qp.complete_jvp(cache, dz) * gy)
    rhs = np.sum(dz * small_qp.complete_backward(cache, gy[:, small_qp.part], gy[:, small_qp.dep]))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_taped_completion_matches_finite_differences(small_sine):
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (1, 5))
    w = rng.standard_normal(10)

    def loss(z):
        Y, _ = small_sine.complete(x, z)
        return ad.sum(ad.mul(ad.sin(Y), w))

    assert ad.finite_difference_check(loss, rng.standard_normal((1, 5))) < 1e-6


def test_family_and_dataset_round_trip(tmp_path, small_sine):
    save_family(tmp_path, small_sine)
    back = load_family(tmp_path)
    assert back.kind == "sine"
    for key in ("q", "p", "A", "G", "h_rhs", "A_pinv", "part", "dep"):
        assert np.array_equal(getattr(small_sine, key), getattr(back, key))
    data = sample_instances(small_sine, 24, 0)
    data.labels = np.arange(240.0).reshape(24, 10)
    save_instances(tmp_path, data)
    loaded = load_instances(tmp_path)
    assert np.array_equal(loaded.X, data.X) and np.array_equal(loaded.labels, data.labels)
    assert np.array_equal(loaded.test, data.test)


def test_truncated_dataset_rejected(tmp_path, small_qp):
    save_instances(tmp_path, sample_instances(small_qp, 24, 0))
    raw = (tmp_path / "dataset.bin").read_bytes()
    (tmp_path / "dataset.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_instances(tmp_path)
