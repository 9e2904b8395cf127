"""scikit-learn style wrappers around the mixture fit, the co-divider and full training."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .correspondence import DIVISION_VAR_FLOOR, split_dataset
from .evaluation import averaged_similarities, recall_metrics
from .model import encode_images, encode_texts
from .numerics import EM_MAX_ITERS, EM_TOL, VAR_FLOOR, gmm2_fit_em, gmm2_posterior_low_mean
from .trainer import TrainConfig, train


def _as_1d(X):
    x = np.asarray(X, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    return x


class TwoComponentMixture(BaseEstimator):
    """Two-component 1-D Gaussian mixture with deterministic quartile initialisation.

    Accepts ``X`` of shape (n,) or (n, 1). After ``fit`` the components are
    sorted by mean; ``predict_proba`` returns columns (low-mean, high-mean).
    """

    def __init__(self, max_iter=EM_MAX_ITERS, tol=EM_TOL, var_floor=VAR_FLOOR):
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor

    def fit(self, X, y=None):
        gmm, trace = gmm2_fit_em(
            _as_1d(X), self.max_iter, self.tol, return_trace=True, var_floor=self.var_floor
        )
        self.gmm_ = gmm
        self.means_ = np.array(gmm.mean)
        self.variances_ = np.array(gmm.variance)
        self.weights_ = np.array(gmm.weight)
        self.loglik_trace_ = np.array(trace)
        self.n_iter_ = max(len(trace) - 1, 0)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "gmm_")
        low = np.atleast_1d(gmm2_posterior_low_mean(self.gmm_, _as_1d(X)))
        return np.column_stack([low, 1.0 - low])

    def predict(self, X):
        """Index of the more probable component (0 = low mean)."""
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)


class CoDivider(BaseEstimator):
    """Clean/noisy split from per-sample losses.

    Losses are min-max scaled before the mixture fit (the same rule the
    trainer uses); ``predict`` flags samples whose low-loss posterior exceeds
    ``tau``, and at least one sample is always flagged clean.
    """

    def __init__(self, tau=0.5, var_floor=DIVISION_VAR_FLOOR):
        self.tau = tau
        self.var_floor = var_floor

    def fit(self, X, y=None):
        x = _as_1d(X)
        self.min_, self.span_ = float(x.min()), float(np.ptp(x))
        self.mixture_ = None
        if self.span_ > 0:
            self.mixture_ = TwoComponentMixture(var_floor=self.var_floor).fit(self._scale(x))
        return self

    def _scale(self, x):
        return (x - self.min_) / self.span_

    def clean_probability(self, X):
        check_is_fitted(self, "span_")
        x = _as_1d(X)
        if self.mixture_ is None:
            return np.full(x.shape[0], 0.5)
        return self.mixture_.predict_proba(self._scale(x))[:, 0]

    def predict(self, X):
        """1 for samples judged clean, 0 otherwise."""
        split = split_dataset(self.clean_probability(X), self.tau)
        out = np.zeros(len(split.clean_indices) + len(split.noisy_indices), dtype=np.int64)
        out[split.clean_indices] = 1
        return out

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)


class CrossModalRetriever(BaseEstimator):
    """Two co-taught dual encoders trained on a ``DatasetBundle``.

    ``fit`` takes a bundle (train/val/test splits); ``score`` returns Rsum on a
    split using the averaged similarities of both networks.
    """

    def __init__(
        self,
        method="pc2",
        batch_size=32,
        n_pseudo_classes=128,
        tau=0.5,
        alpha=0.2,
        m=10.0,
        lambda_n=1.0,
        lambda_pse=1.0,
        lambda_ent=10.0,
        warmup_epochs=3,
        total_epochs=30,
        lr=5e-3,
        margin_mode="rectified",
        pseudo_classification=True,
        label_centering=True,
        mismatch_filter=False,
        d_word=16,
        d_joint=64,
        n_jobs=1,
        seed=0,
    ):
        self.method = method
        self.batch_size = batch_size
        self.n_pseudo_classes = n_pseudo_classes
        self.tau = tau
        self.alpha = alpha
        self.m = m
        self.lambda_n = lambda_n
        self.lambda_pse = lambda_pse
        self.lambda_ent = lambda_ent
        self.warmup_epochs = warmup_epochs
        self.total_epochs = total_epochs
        self.lr = lr
        self.margin_mode = margin_mode
        self.pseudo_classification = pseudo_classification
        self.label_centering = label_centering
        self.mismatch_filter = mismatch_filter
        self.d_word = d_word
        self.d_joint = d_joint
        self.n_jobs = n_jobs
        self.seed = seed

    def to_config(self):
        return TrainConfig(**{k: v for k, v in self.get_params().items()}).validate()

    def fit(self, bundle, y=None):
        result = train(bundle, self.to_config())
        self.result_ = result
        self.params_ = result.best_params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def similarity(self, regions, token_lists):
        check_is_fitted(self, "params_")
        return averaged_similarities(self.params_[0], self.params_[1], regions, token_lists)

    def transform_images(self, regions, net=0):
        check_is_fitted(self, "params_")
        return encode_images(self.params_[net], regions)

    def transform_texts(self, token_lists, net=0):
        check_is_fitted(self, "params_")
        return encode_texts(self.params_[net], token_lists)

    def evaluate(self, split):
        return recall_metrics(self.similarity(split.regions, split.tokens))

    def score(self, split, y=None):
        return self.evaluate(split).rsum
