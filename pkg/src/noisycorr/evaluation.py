"""Bidirectional recall@K, two-network similarity averaging and split diagnostics."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import InvalidInputError
from .model import similarity_matrix

KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    rsum: float

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SplitQualityReport:
    precision: float
    recall: float
    accuracy: float
    auc: float = None  # absent when only one ground-truth class occurs

    def to_dict(self):
        return asdict(self)


def ranks_of_correct(sims, correct):
    """0-based rank of ``correct[q]`` in row ``q`` sorted by descending score.

    Equal scores rank the lower index first.
    """
    sims = np.asarray(sims, dtype=np.float64)
    q = np.arange(sims.shape[0])
    target = sims[q, correct][:, None]
    idx = np.arange(sims.shape[1])[None, :]
    ahead = (sims > target) | ((sims == target) & (idx < np.asarray(correct)[:, None]))
    return ahead.sum(axis=1)


def recall_metrics(sims, ground_truth=None):
    """R@1/5/10 for image-to-text and text-to-image retrieval, in percent.

    ``ground_truth[i]`` is the text index matching image ``i`` (identity if
    omitted); the pairing must be one-to-one.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise InvalidInputError(f"a one-to-one pairing needs a square matrix, got {sims.shape}")
    n = sims.shape[0]
    gt = np.arange(n) if ground_truth is None else np.asarray(ground_truth, dtype=np.int64)
    if gt.shape != (n,) or not np.array_equal(np.sort(gt), np.arange(n)):
        raise InvalidInputError("ground_truth must be a permutation of range(n)")
    inv = np.empty(n, dtype=np.int64)
    inv[gt] = np.arange(n)
    r_i2t = ranks_of_correct(sims, gt)
    r_t2i = ranks_of_correct(sims.T, inv)
    vals = [100.0 * np.mean(r_i2t < k) for k in KS] + [100.0 * np.mean(r_t2i < k) for k in KS]
    return RetrievalReport(*vals, rsum=float(sum(vals)))


def averaged_similarities(net_a, net_b, regions, token_lists):
    """Mean of the two networks' image-text cosine matrices."""
    s_a = similarity_matrix(net_a, regions, token_lists)
    s_b = similarity_matrix(net_b, regions, token_lists)
    return (s_a + s_b) / 2.0


def evaluate_split(net_a, net_b, split):
    return recall_metrics(averaged_similarities(net_a, net_b, split.regions, split.tokens))


def auc_score(scores, labels):
    """Mann-Whitney AUC of ``scores`` for positive ``labels``; ``None`` if undefined."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def split_quality(w, c, tau):
    w = np.asarray(w, dtype=np.float64)
    c = np.asarray(c).astype(bool)
    if w.shape != c.shape:
        raise InvalidInputError("w and c must be aligned")
    pred = w > tau
    tp = np.sum(pred & c)
    precision = tp / pred.sum() if pred.any() else 0.0
    recall = tp / c.sum() if c.any() else 0.0
    accuracy = np.mean(pred == c)
    return SplitQualityReport(float(precision), float(recall), float(accuracy), auc_score(w, c))
