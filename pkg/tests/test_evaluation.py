import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from noisycorr.evaluation import (
    auc_score,
    averaged_similarities,
    evaluate_split,
    recall_metrics,
    split_quality,
)
from noisycorr.exceptions import InvalidInputError
from noisycorr.model import ModelDims, init_params, similarity_matrix
from oracles import recall_ref

DIMS = ModelDims(d_img_in=3, d_word=3, d_joint=4, vocab_size=10, n_pseudo_classes=3)


def int_sims(seed, n):
    # small integer range forces plenty of ties
    return np.random.default_rng(seed).integers(-3, 4, size=(n, n)).astype(float)


def fields(r):
    return [r.i2t_r1, r.i2t_r5, r.i2t_r10, r.t2i_r1, r.t2i_r5, r.t2i_r10]


def test_recall_examples():
    r = recall_metrics(np.eye(12))
    assert fields(r) == [100.0] * 6 and r.rsum == 600.0
    s = np.array([[0.5, 0.9, 0.1], [0.0, 1.0, 0.2], [0.0, 0.1, 1.0]])
    r = recall_metrics(s)
    assert r.i2t_r1 == pytest.approx(66.67, abs=0.01) and r.i2t_r5 == 100.0


def test_recall_anti_diagonal_relabelling():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(9, 9))
    perm = np.arange(9)[::-1]
    a = recall_metrics(s)
    b = recall_metrics(s[:, perm], ground_truth=perm)
    assert fields(a) == fields(b)


def test_recall_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        recall_metrics(np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        recall_metrics(np.zeros((3, 3)), ground_truth=[0, 0, 1])


@given(st.integers(0, 2**32 - 1), st.integers(1, 16))
def test_recall_matches_brute_force(seed, n):
    s = int_sims(seed, n) if seed % 2 else np.random.default_rng(seed).normal(size=(n, n))
    gt = np.random.default_rng(seed + 1).permutation(n)
    r = recall_metrics(s, gt)
    vals, rsum = recall_ref(s.tolist(), gt.tolist())
    assert np.max(np.abs(np.array(fields(r)) - vals)) <= 1e-12
    assert abs(r.rsum - rsum) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 16))
def test_recall_properties(seed, n):
    s = int_sims(seed, n)
    r = recall_metrics(s)
    assert r.i2t_r1 <= r.i2t_r5 <= r.i2t_r10 and r.t2i_r1 <= r.t2i_r5 <= r.t2i_r10
    assert all(0 <= v <= 100 for v in fields(r))
    assert r.rsum == sum(fields(r))
    # exact increasing maps on integers keep every tie and every order
    assert fields(recall_metrics(s**3 + 2 * s)) == fields(r)
    assert fields(recall_metrics(2 * s + 1)) == fields(r)


def test_averaged_similarities():
    rng = np.random.default_rng(0)
    regions = rng.normal(size=(2, 2, 3))
    tokens = [[1, 2], [3]]
    a, b = init_params(DIMS, 0), init_params(DIMS, 1)
    np.testing.assert_array_equal(averaged_similarities(a, a, regions, tokens), similarity_matrix(a, regions, tokens))
    np.testing.assert_array_equal(
        averaged_similarities(a, b, regions, tokens), averaged_similarities(b, a, regions, tokens)
    )
    sa, sb = similarity_matrix(a, regions, tokens), similarity_matrix(b, regions, tokens)
    avg = averaged_similarities(a, b, regions, tokens)
    for i in range(2):
        for j in range(2):
            assert avg[i, j] == (sa[i, j] + sb[i, j]) / 2


def test_evaluate_split_uses_average(tiny_bundle):
    a, b = init_params(ModelDims(16, 4, 8, 256, 3), 0), init_params(ModelDims(16, 4, 8, 256, 3), 1)
    val = tiny_bundle.val
    expected = recall_metrics(averaged_similarities(a, b, val.regions, val.tokens))
    assert evaluate_split(a, b, val) == expected


def test_split_quality_examples():
    c = np.array([1, 0, 1, 1, 0])
    q = split_quality(c.astype(float), c, 0.5)
    assert (q.precision, q.recall, q.accuracy, q.auc) == (1.0, 1.0, 1.0, 1.0)
    assert split_quality(1.0 - c, c, 0.5).auc == 0.0
    rng = np.random.default_rng(7)
    q = split_quality(rng.uniform(size=2000), rng.integers(0, 2, 2000), 0.5)
    assert abs(q.auc - 0.5) <= 0.05
    assert split_quality([0.2, 0.9], [1, 1], 0.5).auc is None


def test_auc_handles_ties_as_half():
    assert auc_score([0.5, 0.5], [1, 0]) == 0.5
    assert auc_score([0.1, 0.5, 0.5, 0.9], [0, 1, 0, 1]) == pytest.approx(0.875)
