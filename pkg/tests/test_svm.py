import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fastgrant import svm
from fastgrant.svm import KernelSpec, SvmModel, TrainingError, classify, decision_value, gram, kernel_eval, train_smo

RBF = KernelSpec("rbf", sigma=0.15)
LIN = KernelSpec("linear")


def test_kernel_examples():
    assert kernel_eval(RBF, (0.3, 0.4), (0.3, 0.4)) == 1.0
    assert kernel_eval(RBF, (0.0, 0.0), (0.15, 0.0)) == pytest.approx(math.exp(-0.5))
    assert kernel_eval(LIN, (1, 2), (3, 4)) == 11.0
    assert kernel_eval(KernelSpec("polynomial", degree=3, coef0=1.0), (1, 2), (3, 4)) == 12.0 ** 3
    with pytest.raises(ValueError):
        kernel_eval(RBF, (0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        KernelSpec("rbf", sigma=0.0)
    with pytest.raises(ValueError):
        KernelSpec("sigmoid")


def test_gram_matches_pointwise():
    rng = np.random.default_rng(0)
    A, B = rng.random((7, 2)), rng.random((5, 2))
    for spec in (RBF, LIN, KernelSpec("polynomial", degree=2)):
        K = gram(spec, A, B)
        ref = np.array([[kernel_eval(spec, a, b) for b in B] for a in A])
        assert np.allclose(K, ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 12), st.just(2)), elements=st.floats(0, 1)))
def test_rbf_gram_psd(X):
    K = gram(RBF, X, X)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-9


def test_two_point_linear_solution():
    # separable pair: w = 2 e_x, b = -1, both points on the margin
    X = np.array([[0.0, 0.0], [1.0, 0.0]])
    z = np.array([-1.0, 1.0])
    res = train_smo(X, z, C=10.0, kernel=LIN, tol=1e-9)
    assert np.allclose(res.alpha, [2.0, 2.0], atol=1e-8)
    assert res.model.bias == pytest.approx(-1.0, abs=1e-8)
    assert decision_value(res.model, [1.0, 5.0]) == pytest.approx(1.0, abs=1e-8)
    assert classify(res.model, [0.5, 0.0]) == -1      # exactly on the boundary
    assert classify(res.model, [0.51, 0.0]) == 1


def test_xor_with_rbf():
    X = np.array([[0, 0], [1, 1], [0, 1], [1, 0]], dtype=float)
    z = np.array([-1, -1, 1, 1], dtype=float)
    res = train_smo(X, z, C=10.0, kernel=KernelSpec("rbf", sigma=0.5), tol=1e-6)
    assert np.array_equal(classify(res.model, X), z)
    lin = train_smo(X, z, C=10.0, kernel=LIN, tol=1e-6)
    assert not np.array_equal(classify(lin.model, X), z)


def _blobs(seed, n=60):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 2))
    z = np.where(np.hypot(X[:, 0] - 0.5, X[:, 1] - 0.5) < 0.3, 1.0, -1.0)
    flip = rng.random(n) < 0.1
    z[flip] *= -1
    if (z > 0).all() or (z < 0).all():
        z[0] = -z[0]
    return X, z


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.5, 10.0]))
def test_solution_satisfies_dual_constraints(seed, C):
    X, z = _blobs(seed)
    res = train_smo(X, z, C=C, kernel=RBF, tol=1e-4, record_objective=True)
    assert res.converged
    assert (res.alpha >= 0).all() and (res.alpha <= C).all()
    assert abs(res.alpha @ z) < 1e-8
    assert svm.kkt_violation(res, X, z) < 1e-2
    obj = np.array(res.objective)
    assert (np.diff(obj) >= -1e-9).all()


def test_single_class_rejected():
    X = np.random.default_rng(0).random((5, 2))
    with pytest.raises(TrainingError):
        train_smo(X, np.ones(5))
    with pytest.raises(ValueError):
        train_smo(X, np.array([1, -1, 2, 1, -1]))
    with pytest.raises(ValueError):
        train_smo(np.array([[np.nan, 0.0], [0.0, 0.0]]), np.array([1, -1]))


def test_model_requires_support_vectors():
    with pytest.raises(ValueError):
        SvmModel(np.zeros((0, 2)), np.zeros(0), 0.0, RBF, 10.0)
    with pytest.raises(ValueError):
        SvmModel(np.zeros((1, 2)), np.array([11.0]), 0.0, RBF, 10.0)


def test_save_load_roundtrip(tmp_path):
    X, z = _blobs(3)
    model = train_smo(X, z, kernel=RBF).model
    model.save(tmp_path / "m.txt")
    back = SvmModel.load(tmp_path / "m.txt")
    grid = np.random.default_rng(1).random((50, 2))
    assert np.array_equal(decision_value(back, grid), decision_value(model, grid))
    (tmp_path / "bad.txt").write_text("something else\n")
    with pytest.raises(ValueError):
        SvmModel.load(tmp_path / "bad.txt")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.5, 50))
def test_rbf_scale_invariance(seed, s):
    X, z = _blobs(seed, n=40)
    a = train_smo(X, z, kernel=RBF, tol=1e-6).model
    b = train_smo(X * s, z, kernel=KernelSpec("rbf", sigma=RBF.sigma * s), tol=1e-6).model
    grid = np.random.default_rng(seed).random((30, 2))
    fa, fb = decision_value(a, grid), decision_value(b, grid * s)
    assert np.allclose(fa, fb, atol=1e-4)


def test_undersample_and_split():
    rng = np.random.default_rng(0)
    z = np.array([-1] * 900 + [1] * 100)
    X = np.arange(1000)[:, None] * np.ones((1, 2))
    Xs, zs = svm.undersample(X, z, 3.0, rng)
    assert (zs > 0).sum() == 100 and (zs < 0).sum() == 300
    tr, te = svm.stratified_split(zs, 0.3, rng)
    assert len(set(tr) & set(te)) == 0 and len(tr) + len(te) == 400
    assert (zs[te] > 0).sum() == 30 and (zs[te] < 0).sum() == 90


def test_dataset_roundtrip(tmp_path):
    X = np.array([[0.1, 0.2], [0.3, 0.4]])
    z = np.array([-1, 1])
    svm.write_dataset(tmp_path / "d.csv", X, z)
    X2, z2 = svm.read_dataset(tmp_path / "d.csv")
    assert np.array_equal(X, X2) and np.array_equal(z, z2)
