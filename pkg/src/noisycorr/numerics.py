"""Scalar/vector kernels and a two-component 1-D Gaussian mixture fitted by EM.

Every log or ratio involving a probability is clamped below by ``EPS``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_prob_vector, check_same_length, check_vector
from .exceptions import InvalidInputError

EPS = 1e-12
VAR_FLOOR = 1e-8
EM_MAX_ITERS = 100
EM_TOL = 1e-6
_ZERO_NORM = 1e-12
_LOG_2PI = np.log(2.0 * np.pi)


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis`` (works on vectors and batches)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[axis] < 2:
        raise InvalidInputError("softmax needs at least 2 logits")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input contains non-finite values")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(hard_label, p):
    p = check_prob_vector(p)
    if not 0 <= int(hard_label) < p.shape[0]:
        raise InvalidInputError(f"label {hard_label} out of range for K={p.shape[0]}")
    return float(-np.log(max(p[int(hard_label)], EPS)))


def kl_divergence(p, q):
    """KL(p || q) with both arguments clamped below by ``EPS``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    check_same_length(p, q, ("p", "q"))
    pc = np.maximum(p, EPS)
    qc = np.maximum(q, EPS)
    return float(np.sum(p * (np.log(pc) - np.log(qc))))


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    check_same_length(u, v, ("u", "v"))
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < _ZERO_NORM or nv < _ZERO_NORM:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(U, V):
    """Pairwise cosine between rows of ``U`` and rows of ``V``; zero rows give 0."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    nu = np.linalg.norm(U, axis=1, keepdims=True)
    nv = np.linalg.norm(V, axis=1, keepdims=True)
    Un = np.divide(U, nu, out=np.zeros_like(U), where=nu >= _ZERO_NORM)
    Vn = np.divide(V, nv, out=np.zeros_like(V), where=nv >= _ZERO_NORM)
    return np.clip(Un @ Vn.T, -1.0, 1.0)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    return float(-np.sum(p * np.log(np.maximum(p, EPS))))


@dataclass(frozen=True)
class Gmm1D:
    """Two-component 1-D mixture, components sorted so ``mean[0] <= mean[1]``."""

    mean: tuple
    variance: tuple
    weight: tuple

    @property
    def is_degenerate(self):
        return self.mean[0] == self.mean[1] and self.variance[0] == self.variance[1]


def _component_log_density(x, mean, var):
    # x: (n,), mean/var: (2,) -> (n, 2)
    x = x[:, None]
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _log_joint(x, mean, var, weight):
    with np.errstate(divide="ignore"):
        return _component_log_density(x, mean, var) + np.log(weight)


def _logsumexp_rows(a):
    amax = a.max(axis=1, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    return (amax + np.log(np.exp(a - amax).sum(axis=1, keepdims=True)))[:, 0]


def _init_from_quartiles(x, var_floor):
    xs = np.sort(x)
    q = max(1, xs.shape[0] // 4)
    lo, hi = xs[:q], xs[-q:]
    mean = np.array([lo.mean(), hi.mean()])
    var = np.maximum(np.array([lo.var(), hi.var()]), var_floor)
    return mean, var, np.array([0.5, 0.5])


def gmm2_fit_em(values, max_iters=EM_MAX_ITERS, tol=EM_TOL, return_trace=False, var_floor=VAR_FLOOR):
    """Fit a two-component Gaussian mixture to scalars by expectation-maximisation.

    Initialisation is deterministic: component 0 from the lowest quarter of the
    sorted data, component 1 from the highest quarter, equal weights. Iteration
    stops when the log-likelihood changes by less than ``tol`` or after
    ``max_iters`` M-steps.

    Parameters
    ----------
    values : array-like of shape (n,)
        At least two finite values.
    return_trace : bool
        Also return the log-likelihood after initialisation and after every
        M-step.
    var_floor : float
        Lower bound on both component variances.

    Returns
    -------
    Gmm1D, or (Gmm1D, list of float) when ``return_trace`` is set.
    """
    x = check_vector(values, "values", min_length=2)
    if np.ptp(x) == 0.0:
        gmm = Gmm1D((float(x[0]),) * 2, (var_floor,) * 2, (0.5, 0.5))
        return (gmm, []) if return_trace else gmm

    n = x.shape[0]
    mean, var, weight = _init_from_quartiles(x, var_floor)
    log_joint = _log_joint(x, mean, var, weight)
    ll = float(_logsumexp_rows(log_joint).sum())
    trace = [ll]
    for _ in range(max_iters):
        log_norm = _logsumexp_rows(log_joint)
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        for k in range(2):
            # a component with no responsibility keeps its parameters
            if nk[k] <= 0.0:
                continue
            mean[k] = resp[:, k] @ x / nk[k]
            var[k] = max(resp[:, k] @ (x - mean[k]) ** 2 / nk[k], var_floor)
        weight = nk / n
        log_joint = _log_joint(x, mean, var, weight)
        new_ll = float(_logsumexp_rows(log_joint).sum())
        trace.append(new_ll)
        converged = abs(new_ll - ll) < tol
        ll = new_ll
        if converged:
            break

    order = np.argsort(mean, kind="stable")
    gmm = Gmm1D(
        tuple(float(v) for v in mean[order]),
        tuple(float(v) for v in var[order]),
        tuple(float(v) for v in weight[order]),
    )
    return (gmm, trace) if return_trace else gmm


def gmm2_log_likelihood(gmm, values):
    x = np.asarray(values, dtype=np.float64)
    lj = _log_joint(x, np.array(gmm.mean), np.array(gmm.variance), np.array(gmm.weight))
    return float(_logsumexp_rows(lj).sum())


def gmm2_posterior_low_mean(gmm, value):
    """Responsibility of the low-mean component at ``value`` (scalar or array)."""
    x = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if gmm.is_degenerate:
        post = np.full(x.shape, 0.5)
    else:
        lj = _log_joint(x, np.array(gmm.mean), np.array(gmm.variance), np.array(gmm.weight))
        post = np.exp(lj[:, 0] - _logsumexp_rows(lj))
        post = np.clip(post, 0.0, 1.0)
    return float(post[0]) if np.ndim(value) == 0 else post
