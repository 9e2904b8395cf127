import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.mixture import GaussianMixture

from noisycorr.correspondence import compute_clean_probabilities, split_dataset
from noisycorr.estimators import CoDivider, CrossModalRetriever, TwoComponentMixture
from noisycorr.trainer import TrainConfig


def bimodal(seed=0, n0=300, n1=200):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(0.2, 0.05, n0), rng.normal(1.0, 0.1, n1)])


def test_mixture_agrees_with_sklearn():
    x = bimodal()
    ours = TwoComponentMixture().fit(x)
    ref = GaussianMixture(2, covariance_type="full", tol=1e-10, max_iter=1000, reg_covar=1e-8,
                          random_state=0).fit(x[:, None])
    order = np.argsort(ref.means_[:, 0])
    np.testing.assert_allclose(ours.means_, ref.means_[order, 0], atol=1e-4)
    np.testing.assert_allclose(ours.variances_, ref.covariances_[order, 0, 0], rtol=1e-3)
    np.testing.assert_allclose(ours.weights_, ref.weights_[order], atol=1e-4)
    np.testing.assert_allclose(ours.predict_proba(x), ref.predict_proba(x[:, None])[:, order], atol=1e-3)


def test_mixture_api():
    x = bimodal(1)
    m = TwoComponentMixture().fit(x[:, None])
    assert np.all(np.diff(m.loglik_trace_) >= -1e-8)
    assert m.n_iter_ == len(m.loglik_trace_) - 1
    proba = m.predict_proba(x)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert m.predict(x)[:300].mean() < 0.05
    assert clone(m).get_params() == m.get_params()
    with pytest.raises(NotFittedError):
        TwoComponentMixture().predict_proba(x)


def test_codivider_matches_trainer_rule():
    x = np.random.default_rng(3).gamma(1.2, size=400)
    d = CoDivider(tau=0.5).fit(x)
    np.testing.assert_allclose(d.clean_probability(x), compute_clean_probabilities(x), atol=1e-12)
    split = split_dataset(compute_clean_probabilities(x), 0.5)
    labels = d.fit_predict(x)
    assert np.flatnonzero(labels).tolist() == split.clean_indices.tolist()
    assert CoDivider().fit(np.ones(5)).clean_probability(np.ones(5)).tolist() == [0.5] * 5


def test_retriever_params_mirror_config():
    est = CrossModalRetriever()
    assert est.to_config() == TrainConfig()
    assert set(est.get_params()) <= {f for f in TrainConfig.__dataclass_fields__}


def test_retriever_fit_score(tiny_bundle):
    est = CrossModalRetriever(batch_size=16, n_pseudo_classes=8, d_joint=16, warmup_epochs=1,
                              total_epochs=3, seed=1)
    est.fit(tiny_bundle)
    assert est.best_epoch_ in range(3)
    score = est.score(tiny_bundle.test)
    assert score == est.result_.test_report.rsum
    assert est.transform_images(tiny_bundle.test.regions).shape == (32, 16)
    assert est.transform_texts(tiny_bundle.test.tokens, net=1).shape == (32, 16)
