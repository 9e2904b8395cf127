"""Ranking, classification and margin terms of the training objective.

Similarity matrices are indexed ``sims[i, j] = S(image_i, text_j)``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_prob_batch, check_square
from .exceptions import InvalidInputError
from .numerics import EPS


@dataclass(frozen=True)
class MarginParams:
    alpha: float = 0.2
    m: float = 10.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidInputError("alpha must be > 0")
        if not self.m > 1:
            raise InvalidInputError("m must be > 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_n: float = 1.0
    lambda_pse: float = 1.0
    lambda_ent: float = 10.0

    def __post_init__(self):
        for name in ("lambda_n", "lambda_pse", "lambda_ent"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and >= 0")


def hardest_negatives(sims, negative_mask=None):
    """Column index of the hardest text per image row and row index of the
    hardest image per text column, ignoring the diagonal.

    ``negative_mask[i, j]`` False removes ``(i, j)`` from consideration.
    Returns ``(row_idx, row_val, col_idx, col_val)``; a query with no
    admissible negative gets index -1 and value ``-inf``. Ties resolve to the
    lowest index.
    """
    s = np.array(sims, dtype=np.float64)
    B = s.shape[0]
    blocked = np.eye(B, dtype=bool)
    if negative_mask is not None:
        blocked |= ~np.asarray(negative_mask, dtype=bool)
    s[blocked] = -np.inf
    row_idx = np.argmax(s, axis=1)
    col_idx = np.argmax(s, axis=0)
    ar = np.arange(B)
    row_val = s[ar, row_idx]
    col_val = s[col_idx, ar]
    row_idx = np.where(np.isfinite(row_val), row_idx, -1)
    col_idx = np.where(np.isfinite(col_val), col_idx, -1)
    return row_idx, row_val, col_idx, col_val


def triplet_hardest(sims, margins, negative_mask=None):
    """Hardest-negative bidirectional triplet ranking loss.

    Returns ``(total, per_sample)``. With a single pair there are no negatives
    and the loss is zero.
    """
    s = check_square(sims)
    B = s.shape[0]
    margins = np.broadcast_to(np.asarray(margins, dtype=np.float64), (B,))
    if np.any(margins < 0):
        raise InvalidInputError("margins must be >= 0")
    _, row_val, _, col_val = hardest_negatives(s, negative_mask)
    pos = np.diag(s)
    with np.errstate(invalid="ignore"):
        h_txt = np.where(np.isfinite(row_val), np.maximum(margins - pos + row_val, 0.0), 0.0)
        h_img = np.where(np.isfinite(col_val), np.maximum(margins - pos + col_val, 0.0), 0.0)
    per_sample = h_txt + h_img
    return float(per_sample.sum()), per_sample


def per_sample_division_loss(sims, alpha):
    """Triplet loss summed over every in-batch negative, one value per pair."""
    s = check_square(sims)
    pos = np.diag(s)
    off = ~np.eye(s.shape[0], dtype=bool)
    h_txt = np.maximum(alpha - pos[:, None] + s, 0.0) * off
    h_img = np.maximum(alpha - pos[None, :] + s, 0.0) * off
    return h_txt.sum(axis=1) + h_img.sum(axis=0)


def hard_labels(q):
    """Row-wise argmax, ties to the lowest index."""
    return np.argmax(np.asarray(q), axis=1)


def pseudo_classification_loss(p_img, q_text):
    p = check_prob_batch(p_img, "p_img")
    q = check_prob_batch(q_text, "q_text")
    if p.shape != q.shape:
        raise InvalidInputError(f"batch mismatch: p_img {p.shape} vs q_text {q.shape}")
    y = hard_labels(q)
    picked = p[np.arange(p.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(picked, EPS))))


def entropy_regularizer(p_img):
    """Negative entropy of the batch-mean prediction; minimal when the mean is uniform."""
    p = np.asarray(p_img, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise InvalidInputError("p_img must be a non-empty (B, K) batch")
    pbar = p.mean(axis=0)
    return float(np.sum(pbar * np.log(np.maximum(pbar, EPS))))


def _curve(x, mp):
    return (mp.m ** x - 1.0) / (mp.m - 1.0) * mp.alpha


def noisy_margin(s_p, mp):
    """Margin for a pseudo-captioned pair given the similarity of its pseudo-predictions."""
    return _curve(np.clip(s_p, 0.0, 1.0), mp)


def clean_margin_exponent(w_c, w_o, has_history, tau):
    w_c = np.asarray(w_c, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    gate = np.logical_and(has_history, w_o >= tau)
    return w_c + (1.0 - w_c) * np.where(gate, w_o, 0.0)


def clean_margin(w_c, w_o, has_history, tau, mp):
    """Rectified margin: the loss-based clean probability, topped up by the
    oscillation-based one when the latter clears ``tau``."""
    expo = clean_margin_exponent(w_c, w_o, has_history, tau)
    out = _curve(np.clip(expo, 0.0, 1.0), mp)
    return float(out) if out.ndim == 0 else out


def total_loss(l_c, l_n, l_pse, l_ent, w):
    return l_c + w.lambda_n * l_n + w.lambda_pse * l_pse + w.lambda_ent * l_ent
