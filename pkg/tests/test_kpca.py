import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cancelhash.descriptor import SimilarityMatrix
from cancelhash.errors import DimensionError, DomainError, ParseError, ValidationError
from cancelhash.kpca import (
    KernelParams,
    TrainedProjection,
    build_kernel_matrix,
    center_kernel,
    dumps_projection,
    fit,
    kernel_value,
    loads_projection,
    project_kernel_vector,
    project_query,
    project_training,
)


def test_kernel_closed_forms():
    assert kernel_value(1.0, KernelParams(sigma2=0.3)) == 1.0
    assert abs(kernel_value(0.0, KernelParams(sigma2=1.0)) - math.exp(-0.5)) <= 1e-12
    assert abs(kernel_value(0.5, KernelParams(sigma2=0.125)) - math.exp(-1.0)) <= 1e-12


@pytest.mark.parametrize("s", [-0.01, 1.0001, float("nan")])
def test_kernel_domain(s):
    with pytest.raises(DomainError):
        kernel_value(s, KernelParams())


@pytest.mark.parametrize("kw", [{"sigma2": 0.0}, {"sigma2": -1.0}, {"d": 0}])
def test_kernel_params_validation(kw):
    with pytest.raises((ValidationError, DomainError)):
        KernelParams(**kw)


def test_kernel_matrix_examples():
    k = build_kernel_matrix(SimilarityMatrix(np.eye(2)), KernelParams(sigma2=1.0))
    np.testing.assert_allclose(k, [[1, math.exp(-0.5)], [math.exp(-0.5), 1]], atol=1e-12)
    ones = build_kernel_matrix(SimilarityMatrix(np.ones((3, 3))), KernelParams())
    assert np.array_equal(ones, np.ones((3, 3)))


def _random_sim(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (n, n))
    s = (a + a.T) / 2
    np.fill_diagonal(s, 1.0)
    return SimilarityMatrix(s)


def test_kernel_matrix_scalar_oracle():
    sim = _random_sim(5, 1)
    p = KernelParams(sigma2=0.7)
    k = build_kernel_matrix(sim, p)
    for i in range(5):
        for j in range(5):
            assert k[i, j] == pytest.approx(math.exp(-(1 - sim.scores[i, j]) ** 2 / 1.4), abs=1e-15)


def test_identity_kernel_eigenvalues():
    # H I H = H has eigenvalues {1, 1, 0}; covariance Kc / N gives {1/3, 1/3}
    t = fit(np.eye(3), KernelParams(d=2))
    assert t.d == 2 and not t.shrunk
    np.testing.assert_allclose(t.eigenvalues, [1 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(np.linalg.eigvalsh(center_kernel(np.eye(3))), [0, 1, 1], atol=1e-12)


def test_constant_kernel_shrinks_to_zero():
    with pytest.warns(RuntimeWarning):
        t = fit(np.ones((4, 4)), KernelParams(d=2))
    assert t.d == 0 and t.shrunk
    fv = project_query(np.ones(4), t)
    assert fv.values.shape == (0,)


def test_non_symmetric_rejected():
    k = np.eye(3)
    k[0, 1] = 0.5
    with pytest.raises(ValidationError, match="symmetric"):
        fit(k, KernelParams())


def test_default_dimension():
    assert KernelParams().output_dim(30) == 29
    assert KernelParams().output_dim(500) == 100
    assert KernelParams(d=5).output_dim(3) == 3


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    return a @ a.T


def _fit_quiet(k, p):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit(k, p)


def test_spd_fixture_numerics():
    k = _spd(6, 0)
    t = fit(k, KernelParams(d=4))
    kc = center_kernel(k) / 6
    unit = t.projection * (math.sqrt(6) * t.eigenvalues)  # undo whitening: unit eigenvectors
    lam_max = t.eigenvalues[0]
    assert np.all(np.diff(t.eigenvalues) <= 0) and np.all(t.eigenvalues > 0)
    assert np.abs(unit.T @ unit - np.eye(4)).max() <= 1e-8
    for c in range(4):
        resid = np.abs(kc @ unit[:, c] - t.eigenvalues[c] * unit[:, c]).max()
        assert resid <= 1e-8 * lam_max
    proj = project_training(k, t)
    np.testing.assert_allclose(proj.var(axis=0), 1.0, atol=1e-6)


def _scalar_project(kvec, kernel, projection):
    """Loop-only recomputation of test-point centring and projection."""
    n = len(kernel)
    col = [sum(kernel[i][j] for i in range(n)) / n for j in range(n)]
    grand = sum(col) / n
    kmean = sum(kvec) / n
    centred = [kvec[j] - col[j] - kmean + grand for j in range(n)]
    d = len(projection[0])
    return [sum(centred[j] * projection[j][c] for j in range(n)) for c in range(d)]


def test_project_query_matches_scalar_oracle():
    sim = _random_sim(6, 4)
    p = KernelParams(sigma2=0.5, d=4)
    k = build_kernel_matrix(sim, p)
    t = _fit_quiet(k, p)
    rng = np.random.default_rng(9)
    for _ in range(5):
        q = rng.uniform(0, 1, 6)
        kvec = [math.exp(-(1 - s) ** 2 / 1.0) for s in q]
        oracle = _scalar_project(kvec, k.tolist(), t.projection.tolist())
        np.testing.assert_allclose(project_query(q, t).values, oracle, atol=1e-8)


def test_training_sample_as_query_equals_training_row():
    sim = _random_sim(6, 5)
    p = KernelParams(d=4)
    k = build_kernel_matrix(sim, p)
    t = _fit_quiet(k, p)
    rows = center_kernel(k) @ t.projection
    for j in range(6):
        np.testing.assert_allclose(project_query(sim.scores[j], t).values, rows[j], atol=1e-8)


def test_mean_kernel_vector_projects_to_origin():
    # the training mean sits at the origin of the centred feature space
    k = _spd(6, 2)
    t = fit(k, KernelParams(d=3))
    np.testing.assert_allclose(project_kernel_vector(t.col_means, t), 0.0, atol=1e-10)


@given(st.floats(0, 1), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_projection_is_affine(alpha, seed):
    k = _spd(6, 3)
    t = fit(k, KernelParams(d=4))
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, 6), rng.uniform(0, 1, 6)
    mixed = project_kernel_vector(alpha * a + (1 - alpha) * b, t)
    expect = alpha * project_kernel_vector(a, t) + (1 - alpha) * project_kernel_vector(b, t)
    np.testing.assert_allclose(mixed, expect, atol=1e-8)


def test_query_length_mismatch():
    t = fit(_spd(4, 1), KernelParams(d=2))
    with pytest.raises(DimensionError):
        project_query(np.ones(5) * 0.5, t)


def test_projection_file_round_trip_is_bit_exact():
    sim = _random_sim(7, 8)
    p = KernelParams(sigma2=0.35, d=5)
    t = _fit_quiet(build_kernel_matrix(sim, p), p)
    text = dumps_projection(t)
    back = loads_projection(text)
    assert back.training_labels == t.training_labels
    for name in ("projection", "col_means", "eigenvalues"):
        assert np.array_equal(getattr(back, name), getattr(t, name))
    assert back.grand_mean == t.grand_mean and back.sigma2 == t.sigma2
    assert dumps_projection(back) == text
    q = np.linspace(0, 1, 7)
    assert np.array_equal(project_query(q, back).values, project_query(q, t).values)


def test_projection_file_errors():
    with pytest.raises(ParseError):
        loads_projection("KPCA v0\n")
    t = fit(_spd(3, 1), KernelParams(d=1), labels=["a,b", "c", "d"])
    with pytest.raises(ValidationError):
        dumps_projection(t)
    good = dumps_projection(fit(_spd(3, 1), KernelParams(d=1)))
    with pytest.raises(ParseError):
        loads_projection(good.rsplit("\n", 2)[0] + "\n")


def test_deterministic():
    sim = _random_sim(6, 6)
    p = KernelParams(d=3)
    a = _fit_quiet(build_kernel_matrix(sim, p), p)
    b = _fit_quiet(build_kernel_matrix(sim, p), p)
    q = np.full(6, 0.4)
    assert project_query(q, a).values.tobytes() == project_query(q, b).values.tobytes()
    assert isinstance(a, TrainedProjection)
