"""Clean/noisy co-dividing, pseudo-caption assignment and prediction oscillation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_prob_batch, check_vector
from .exceptions import InvalidInputError
from .numerics import EPS, cosine_matrix, gmm2_fit_em, gmm2_posterior_low_mean, kl_divergence

logger = logging.getLogger(__name__)

MIN_OSCILLATION_BATCH = 4
# Division scores are min-max scaled to [0, 1] before the mixture fit; this
# floor (in scaled units) stops a component collapsing onto the many exact-zero
# hinge losses of well-fitted pairs.
DIVISION_VAR_FLOOR = 5e-4


def mixture_clean_probability(values, var_floor=DIVISION_VAR_FLOOR):
    """Low-mean posterior of a two-component mixture fitted to min-max scaled ``values``.

    Identical values give 0.5 everywhere.
    """
    x = check_vector(values, "values", min_length=2)
    span = np.ptp(x)
    if span == 0.0:
        return np.full(x.shape[0], 0.5)
    x = (x - x.min()) / span
    return np.atleast_1d(gmm2_posterior_low_mean(gmm2_fit_em(x, var_floor=var_floor), x))


@dataclass(frozen=True)
class DataSplit:
    clean_indices: np.ndarray
    noisy_indices: np.ndarray
    forced_clean: bool = False

    @property
    def n_total(self):
        return len(self.clean_indices) + len(self.noisy_indices)


@dataclass(frozen=True)
class PseudoCaptionAssignment:
    source: np.ndarray  # clean-batch position per noisy image
    s_p: np.ndarray


def compute_clean_probabilities(per_sample_losses):
    """Posterior of the low-loss mixture component for every sample."""
    return mixture_clean_probability(per_sample_losses)


def split_dataset(w, tau):
    if not 0.0 < tau < 1.0:
        raise InvalidInputError(f"tau must lie in (0, 1), got {tau}")
    w = np.asarray(w, dtype=np.float64)
    clean = w > tau
    forced = False
    if not clean.any():
        # training needs at least one clean pair
        clean[int(np.argmax(w))] = True
        forced = True
        logger.warning("no sample above tau=%.3f; forcing index %d clean", tau, np.argmax(w))
    idx = np.arange(w.shape[0])
    return DataSplit(idx[clean], idx[~clean], forced)


def assign_pseudo_captions(p_noisy, p_clean):
    """For each noisy prediction pick the clean prediction of highest cosine.

    Returns ``None`` when the clean batch is empty (nothing to borrow from).
    """
    p_clean = np.asarray(p_clean, dtype=np.float64)
    if p_clean.ndim != 2 or p_clean.shape[0] == 0:
        return None
    p_noisy = np.asarray(p_noisy, dtype=np.float64)
    if p_noisy.ndim != 2 or p_noisy.shape[0] == 0:
        raise InvalidInputError("p_noisy must be a non-empty (B, K) batch")
    if p_noisy.shape[1] != p_clean.shape[1]:
        raise InvalidInputError("p_noisy and p_clean disagree on K")
    return assign_by_similarity(cosine_matrix(p_noisy, p_clean))


def assign_by_similarity(sims):
    """Argmax over columns (lowest index on ties) of a noisy-by-clean similarity matrix."""
    j = np.argmax(sims, axis=1)
    return PseudoCaptionAssignment(j, sims[np.arange(sims.shape[0]), j])


def oscillation(prev, cur):
    """Prediction drift between consecutive epochs, KL(prev || cur)."""
    return kl_divergence(prev, cur)


def oscillation_batch(prev, cur):
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape:
        raise InvalidInputError(f"shape mismatch {prev.shape} vs {cur.shape}")
    return np.sum(prev * (np.log(np.maximum(prev, EPS)) - np.log(np.maximum(cur, EPS))), axis=1)


def oscillation_clean_probabilities(o_batch):
    """Clean probability from a mixture fitted on one batch of oscillation values.

    Batches smaller than ``MIN_OSCILLATION_BATCH`` carry too little signal and
    get 0.5 everywhere.
    """
    o = np.asarray(o_batch, dtype=np.float64)
    if o.shape[0] < MIN_OSCILLATION_BATCH:
        return np.full(o.shape[0], 0.5)
    return mixture_clean_probability(o)


@dataclass
class PredictionHistory:
    """Last recorded pseudo-prediction per training index, tagged with its epoch."""

    n_samples: int
    n_classes: int
    values: np.ndarray = field(init=False)
    epoch_tag: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.zeros((self.n_samples, self.n_classes))
        self.epoch_tag = np.full(self.n_samples, -1, dtype=np.int64)

    def lookup(self, indices, epoch):
        """Stored vectors for ``indices`` plus a flag telling which were
        recorded in the immediately preceding epoch."""
        indices = np.asarray(indices, dtype=np.int64)
        has = self.epoch_tag[indices] == epoch - 1
        return self.values[indices], has

    def copy(self):
        out = PredictionHistory(self.n_samples, self.n_classes)
        out.values = self.values.copy()
        out.epoch_tag = self.epoch_tag.copy()
        return out


def update_history(history, epoch, indices, predictions):
    """Overwrite entries for ``indices``; other indices keep their entry and tag."""
    indices = np.asarray(indices, dtype=np.int64)
    preds = check_prob_batch(predictions, "predictions") if len(indices) else predictions
    if len(indices) and np.any(history.epoch_tag[indices] > epoch):
        raise InvalidInputError("history epochs must not go backwards")
    history.values[indices] = preds
    history.epoch_tag[indices] = epoch
    return history
