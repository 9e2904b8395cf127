"""Dual-encoder retrieval model with a pseudo-classifier head.

Image path: mean over region rows, affine map, L2 normalisation.
Text path: mean of token embeddings, affine map, L2 normalisation.
Classifier: affine map on a joint embedding followed by softmax.

Gradients are derived by hand and checked against central finite differences
in the test-suite.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import InvalidInputError, TrainingDivergenceError
from .losses import (
    entropy_regularizer,
    hard_labels,
    hardest_negatives,
    triplet_hardest,
)
from .numerics import EPS, softmax

ZERO_NORM = 1e-12
CLIP_NORM = 2.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ModelDims:
    d_img_in: int = 16
    d_word: int = 16
    d_joint: int = 64
    vocab_size: int = 256
    n_pseudo_classes: int = 128


@dataclass
class ModelParams:
    image_w: np.ndarray
    image_b: np.ndarray
    token_embedding: np.ndarray
    text_w: np.ndarray
    text_b: np.ndarray
    classifier_w: np.ndarray
    classifier_b: np.ndarray

    # serialisation order of the arrays; checkpoint files depend on it
    ORDER = (
        "image_w",
        "image_b",
        "token_embedding",
        "text_w",
        "text_b",
        "classifier_w",
        "classifier_b",
    )

    def arrays(self):
        return [getattr(self, n) for n in self.ORDER]

    def copy(self):
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self):
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def map(self, fn, *others):
        return ModelParams(
            *(fn(a, *(getattr(o, n) for o in others)) for n, a in zip(self.ORDER, self.arrays()))
        )

    @property
    def dims(self):
        return ModelDims(
            d_img_in=self.image_w.shape[0],
            d_word=self.token_embedding.shape[1],
            d_joint=self.image_w.shape[1],
            vocab_size=self.token_embedding.shape[0],
            n_pseudo_classes=self.classifier_w.shape[1],
        )


# Gradients mirror the parameter layout exactly.
GradientBundle = ModelParams


def init_params(dims, seed):
    """Weights and biases uniform in +-1/sqrt(fan_in) of their layer."""
    rng = np.random.default_rng(seed)

    def u(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelParams(
        image_w=u(dims.d_img_in, (dims.d_img_in, dims.d_joint)),
        image_b=u(dims.d_img_in, (dims.d_joint,)),
        token_embedding=u(dims.d_word, (dims.vocab_size, dims.d_word)),
        text_w=u(dims.d_word, (dims.d_word, dims.d_joint)),
        text_b=u(dims.d_word, (dims.d_joint,)),
        classifier_w=u(dims.d_joint, (dims.d_joint, dims.n_pseudo_classes)),
        classifier_b=u(dims.d_joint, (dims.n_pseudo_classes,)),
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------
def _l2_normalize(h):
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    e = np.divide(h, norm, out=np.zeros_like(h), where=norm >= ZERO_NORM)
    return e, norm


def _l2_normalize_backward(de, e, norm):
    dh = (de - e * np.sum(e * de, axis=1, keepdims=True)) / np.maximum(norm, ZERO_NORM)
    return np.where(norm >= ZERO_NORM, dh, 0.0)


def _region_means(params, regions):
    x = np.asarray(regions, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1:
        raise InvalidInputError(f"regions must be (n, R>=1, d), got shape {x.shape}")
    if x.shape[2] != params.image_w.shape[0]:
        raise InvalidInputError(
            f"region feature width {x.shape[2]} != d_img_in {params.image_w.shape[0]}"
        )
    return x.mean(axis=1)


def bag_of_tokens(token_lists, vocab_size):
    """(n, vocab) matrix whose rows average one-hot token vectors."""
    M = np.zeros((len(token_lists), vocab_size))
    for i, toks in enumerate(token_lists):
        toks = np.asarray(toks, dtype=np.int64)
        if toks.size == 0:
            raise InvalidInputError(f"token sequence {i} is empty")
        if toks.min() < 0 or toks.max() >= vocab_size:
            raise InvalidInputError(f"token sequence {i} has ids outside [0, {vocab_size})")
        np.add.at(M[i], toks, 1.0 / toks.size)
    return M


def encode_images(params, regions):
    """Batch image encoder; ``regions`` has shape (n, R, d_img_in)."""
    h = _region_means(params, regions) @ params.image_w + params.image_b
    return _l2_normalize(h)[0]


def encode_image(params, regions):
    """Encode one image given its (R, d_img_in) region features."""
    x = np.asarray(regions, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("a single image needs an (R, d_img_in) region matrix")
    return encode_images(params, x[None])[0]


def encode_texts(params, token_lists):
    M = bag_of_tokens(token_lists, params.token_embedding.shape[0])
    h = M @ params.token_embedding @ params.text_w + params.text_b
    return _l2_normalize(h)[0]


def encode_text(params, tokens):
    return encode_texts(params, [tokens])[0]


def similarity(a, b):
    return float(np.dot(a, b))


def similarity_matrix(params, regions, token_lists):
    return encode_images(params, regions) @ encode_texts(params, token_lists).T


def pseudo_predict(params, emb):
    """Pseudo-classifier output for one embedding (1-D) or a batch (2-D)."""
    emb = np.asarray(emb, dtype=np.float64)
    return softmax(emb @ params.classifier_w + params.classifier_b, axis=-1)


# ---------------------------------------------------------------------------
# training objective and its gradient
# ---------------------------------------------------------------------------
@dataclass
class StepBatch:
    """Inputs of one optimisation step.

    ``pseudo_index[i]`` is the position in the clean half whose caption is
    borrowed by noisy image ``i``. Margins are constants of the step.
    ``hard_labels`` may be given to freeze the caption-side pseudo-labels;
    otherwise they are the argmax of the classifier on the clean captions.
    """

    clean_regions: np.ndarray
    clean_tokens: list
    clean_margins: np.ndarray
    noisy_regions: np.ndarray = None
    pseudo_index: np.ndarray = None
    noisy_margins: np.ndarray = None
    hard_labels: np.ndarray = None

    @property
    def has_noisy(self):
        return self.noisy_regions is not None and len(self.noisy_regions) > 0


@dataclass(frozen=True)
class LossSpec:
    """Per-term weights of the scalar being differentiated."""

    clean: float = 1.0
    noisy: float = 1.0
    pse: float = 1.0
    ent: float = 10.0
    # subtract the batch-mean caption logits before taking hard labels
    center_labels: bool = True

    WEIGHTS = ("clean", "noisy", "pse", "ent")

    @classmethod
    def from_weights(cls, w):
        return cls(1.0, w.lambda_n, w.lambda_pse, w.lambda_ent)

    def scaled(self, factor):
        return replace(self, **{k: factor * getattr(self, k) for k in self.WEIGHTS})


@dataclass
class LossTerms:
    clean: float = 0.0
    noisy: float = 0.0
    pse: float = 0.0
    ent: float = 0.0
    total: float = 0.0
    extras: dict = field(default_factory=dict)


def caption_labels(params, e_txt, center=True):
    """Hard pseudo-labels for a batch of caption embeddings.

    With ``center`` the batch-mean logit vector is removed first, so a
    component shared by every caption cannot pick the same class for all of
    them. Labels carry no gradient either way.
    """
    logits = e_txt @ params.classifier_w + params.classifier_b
    if center:
        logits = logits - logits.mean(axis=0)
    return hard_labels(softmax(logits, axis=1))


def pseudo_caption_mask(pseudo_index):
    """Negatives are only pairs whose borrowed captions differ."""
    idx = np.asarray(pseudo_index)
    return idx[:, None] != idx[None, :]


def _triplet_grad(sims, margins, negative_mask=None):
    """d(sum of hardest-negative hinges)/d(sims); zero subgradient at the kink."""
    B = sims.shape[0]
    row_idx, row_val, col_idx, col_val = hardest_negatives(sims, negative_mask)
    pos = np.diag(sims)
    g = np.zeros_like(sims)
    ar = np.arange(B)
    with np.errstate(invalid="ignore"):
        act_t = np.isfinite(row_val) & (margins - pos + row_val > 0)
        act_i = np.isfinite(col_val) & (margins - pos + col_val > 0)
    g[ar, ar] -= act_t.astype(float) + act_i.astype(float)
    np.add.at(g, (ar[act_t], row_idx[act_t]), 1.0)
    np.add.at(g, (col_idx[act_i], ar[act_i]), 1.0)
    return g


def loss_and_grad(params, batch, spec=LossSpec(), clip=CLIP_NORM, need_grad=True):
    """Evaluate the weighted objective on ``batch`` and its exact gradient.

    Returns ``(LossTerms, GradientBundle or None)``. With ``clip`` set, the
    gradient is rescaled to global L2 norm at most ``clip``.
    """
    B = len(batch.clean_tokens)
    n_img_clean = B
    regions = batch.clean_regions
    if batch.has_noisy:
        regions = np.concatenate([batch.clean_regions, batch.noisy_regions], axis=0)

    # image tower (clean rows first, then noisy)
    m_img = _region_means(params, regions)
    h_img = m_img @ params.image_w + params.image_b
    e_img, n_img = _l2_normalize(h_img)
    ec_img = e_img[:n_img_clean]

    # text tower
    M = bag_of_tokens(batch.clean_tokens, params.token_embedding.shape[0])
    t_mean = M @ params.token_embedding
    h_txt = t_mean @ params.text_w + params.text_b
    e_txt, n_txt = _l2_normalize(h_txt)

    terms = LossTerms()
    de_img = np.zeros_like(e_img)
    de_txt = np.zeros_like(e_txt)
    d_logits = None

    # clean ranking term
    s_c = ec_img @ e_txt.T
    margins_c = np.asarray(batch.clean_margins, dtype=np.float64)
    terms.clean, _ = triplet_hardest(s_c, margins_c)
    if need_grad and spec.clean != 0.0:
        g = spec.clean * _triplet_grad(s_c, margins_c)
        de_img[:n_img_clean] += g @ e_txt
        de_txt += g.T @ ec_img

    # noisy ranking term on pseudo-captioned pairs
    if batch.has_noisy and spec.noisy != 0.0:
        en_img = e_img[n_img_clean:]
        pidx = np.asarray(batch.pseudo_index, dtype=np.int64)
        ep_txt = e_txt[pidx]
        s_n = en_img @ ep_txt.T
        mask = pseudo_caption_mask(pidx)
        margins_n = np.asarray(batch.noisy_margins, dtype=np.float64)
        terms.noisy, _ = triplet_hardest(s_n, margins_n, mask)
        if need_grad:
            g = spec.noisy * _triplet_grad(s_n, margins_n, mask)
            de_img[n_img_clean:] += g @ ep_txt
            np.add.at(de_txt, pidx, g.T @ en_img)

    # pseudo-classification on the clean half
    if spec.pse != 0.0 or spec.ent != 0.0:
        logits = ec_img @ params.classifier_w + params.classifier_b
        p = softmax(logits, axis=1)
        K = p.shape[1]
        labels = batch.hard_labels
        if labels is None:
            labels = caption_labels(params, e_txt, spec.center_labels)
        labels = np.asarray(labels, dtype=np.int64)
        ar = np.arange(B)
        p_y = p[ar, labels]
        terms.pse = float(-np.mean(np.log(np.maximum(p_y, EPS))))
        terms.ent = entropy_regularizer(p)
        terms.extras["p_clean"] = p
        terms.extras["hard_labels"] = labels
        if need_grad:
            d_logits = np.zeros_like(p)
            if spec.pse != 0.0:
                onehot = np.zeros_like(p)
                onehot[ar, labels] = 1.0
                active = (p_y >= EPS)[:, None]
                d_logits += spec.pse * np.where(active, p - onehot, 0.0) / B
            if spec.ent != 0.0:
                pbar = p.mean(axis=0)
                dpbar = np.log(np.maximum(pbar, EPS)) + (pbar >= EPS)
                dp = np.broadcast_to(spec.ent * dpbar / B, (B, K))
                d_logits += p * (dp - np.sum(dp * p, axis=1, keepdims=True))

    terms.total = (
        spec.clean * terms.clean
        + spec.noisy * terms.noisy
        + spec.pse * terms.pse
        + spec.ent * terms.ent
    )
    if not np.isfinite(terms.total):
        raise TrainingDivergenceError("non-finite loss")
    if not need_grad:
        return terms, None

    grads = params.zeros_like()
    if d_logits is not None:
        grads.classifier_w = ec_img.T @ d_logits
        grads.classifier_b = d_logits.sum(axis=0)
        de_img[:n_img_clean] += d_logits @ params.classifier_w.T

    dh_img = _l2_normalize_backward(de_img, e_img, n_img)
    grads.image_w = m_img.T @ dh_img
    grads.image_b = dh_img.sum(axis=0)

    dh_txt = _l2_normalize_backward(de_txt, e_txt, n_txt)
    grads.text_w = t_mean.T @ dh_txt
    grads.text_b = dh_txt.sum(axis=0)
    grads.token_embedding = M.T @ (dh_txt @ params.text_w.T)

    if clip is not None:
        grads = clip_gradients(grads, clip)
    return terms, grads


def backward(params, batch, spec=LossSpec(), clip=CLIP_NORM):
    """Gradient of the weighted objective; raises on a non-finite loss."""
    return loss_and_grad(params, batch, spec, clip)[1]


def global_norm(grads):
    return float(np.sqrt(sum(np.sum(a * a) for a in grads.arrays())))


def clip_gradients(grads, max_norm):
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise TrainingDivergenceError("non-finite gradient")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return grads.map(lambda a: a * scale)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------
@dataclass
class OptimizerState:
    first_moment: ModelParams
    second_moment: ModelParams
    step_count: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self):
        return OptimizerState(self.first_moment.copy(), self.second_moment.copy(), self.step_count)


def adam_step(params, state, grads, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.step_count + 1
    m = state.first_moment.map(lambda m_, g: beta1 * m_ + (1.0 - beta1) * g, grads)
    v = state.second_moment.map(lambda v_, g: beta2 * v_ + (1.0 - beta2) * g * g, grads)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps), m, v)
    return new, OptimizerState(m, v, t)
