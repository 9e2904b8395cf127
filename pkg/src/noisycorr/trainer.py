"""Warmup, co-teaching main epochs and best-checkpoint selection.

Epochs are numbered from 0. The first ``warmup_epochs`` epochs train each
network with the plain hardest-negative triplet loss on every pair; the
remaining epochs run the co-teaching phase in two steps:

1. divide: each network scores every training pair, fits the loss mixture and
   splits the data;
2. train: each network trains on the split produced by the *other* network.

All randomness of a training phase comes from a generator seeded by
``(seed, epoch, network)``, so the two phases may run on separate threads
without changing any result.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .correspondence import (
    PredictionHistory,
    assign_by_similarity,
    assign_pseudo_captions,
    compute_clean_probabilities,
    oscillation_batch,
    oscillation_clean_probabilities,
    split_dataset,
    update_history,
)
from .evaluation import evaluate_split, split_quality
from .exceptions import ConfigError, TrainingDivergenceError
from .losses import MarginParams, clean_margin, noisy_margin, per_sample_division_loss
from .model import (
    LossSpec,
    ModelDims,
    OptimizerState,
    StepBatch,
    adam_step,
    encode_images,
    encode_texts,
    init_params,
    loss_and_grad,
    pseudo_predict,
)
from .numerics import cosine_matrix

logger = logging.getLogger(__name__)

METHODS = ("pc2", "baseline")
MARGIN_MODES = ("rectified", "loss_only", "fixed")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    tau: float = 0.5
    n_pseudo_classes: int = 128
    alpha: float = 0.2
    m: float = 10.0
    lambda_n: float = 1.0
    lambda_pse: float = 1.0
    lambda_ent: float = 10.0
    warmup_epochs: int = 3
    total_epochs: int = 30
    lr: float = 5e-3
    seed: int = 0
    mismatch_filter: bool = False
    d_word: int = 16
    d_joint: int = 64
    # "pc2" runs the full pipeline, "baseline" keeps warmup training throughout
    method: str = "pc2"
    # "rectified": oscillation-corrected clean margin; "loss_only": exponent w_c;
    # "fixed": constant alpha
    margin_mode: str = "rectified"
    # False: pseudo-captions chosen by image-embedding cosine, no classifier losses
    pseudo_classification: bool = True
    # hard caption labels taken after removing the batch-mean caption logits
    label_centering: bool = True
    division_chunk: int = 0  # 0 means batch_size
    n_jobs: int = 1
    log_wallclock: bool = False

    def validate(self):
        def bad(name, msg):
            raise ConfigError(name, msg)

        if self.batch_size < 2:
            bad("batch_size", "must be >= 2")
        if not 0.0 < self.tau < 1.0:
            bad("tau", "must lie in (0, 1)")
        if self.n_pseudo_classes < 2:
            bad("n_pseudo_classes", "must be >= 2")
        if not self.alpha > 0:
            bad("alpha", "must be > 0")
        if not self.m > 1:
            bad("m", "must be > 1")
        for name in ("lambda_n", "lambda_pse", "lambda_ent"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                bad(name, "must be finite and >= 0")
        if self.warmup_epochs < 1:
            bad("warmup_epochs", "must be >= 1")
        if self.total_epochs <= self.warmup_epochs:
            bad("total_epochs", "must exceed warmup_epochs")
        if not self.lr > 0:
            bad("lr", "must be > 0")
        if self.method not in METHODS:
            bad("method", f"must be one of {METHODS}")
        if self.margin_mode not in MARGIN_MODES:
            bad("margin_mode", f"must be one of {MARGIN_MODES}")
        if self.division_chunk < 0 or self.division_chunk == 1:
            bad("division_chunk", "must be 0 or >= 2")
        if self.n_jobs not in (1, 2):
            bad("n_jobs", "must be 1 or 2")
        if self.d_word < 1 or self.d_joint < 1:
            bad("d_joint", "embedding sizes must be >= 1")
        return self

    @property
    def margins(self):
        return MarginParams(self.alpha, self.m)

    @property
    def effective_lambda_n(self):
        return 0.0 if self.mismatch_filter else self.lambda_n

    def loss_spec(self):
        if not self.pseudo_classification:
            return LossSpec(1.0, self.effective_lambda_n, 0.0, 0.0)
        return LossSpec(
            1.0, self.effective_lambda_n, self.lambda_pse, self.lambda_ent, self.label_centering
        )

    def model_dims(self, dataset_dims):
        return ModelDims(
            d_img_in=dataset_dims["feature_dim"],
            d_word=self.d_word,
            d_joint=self.d_joint,
            vocab_size=dataset_dims["vocab_size"],
            n_pseudo_classes=self.n_pseudo_classes,
        )


@dataclass
class NetworkState:
    name: str
    params: object
    opt: OptimizerState
    history: PredictionHistory

    def copy(self):
        return NetworkState(self.name, self.params.copy(), self.opt.copy(), self.history.copy())


@dataclass
class NetworkPair:
    net_a: NetworkState
    net_b: NetworkState


@dataclass
class EpochReport:
    epoch: int
    phase: str
    loss_c: float
    loss_n: float
    loss_pse: float
    loss_ent: float
    clean_count: int
    noisy_count: int
    val_rsum: float = float("nan")
    seconds: float = 0.0
    split_quality: dict = None  # per network name, for divided epochs

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    config: TrainConfig
    history: list
    best_epoch: int
    best_params: tuple  # (net_a, net_b) as stored in checkpoints
    test_report: object = None
    # epoch -> network name -> division_record(...)
    divisions: dict = field(default_factory=dict)


def _rng(seed, epoch, net_id):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, net_id]))


def _net_id(name):
    return {"A": 0, "B": 1}[name]


def make_network_pair(config, dataset_dims, n_train):
    dims = config.model_dims(dataset_dims)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    nets = []
    for name, ss in zip(("A", "B"), seeds):
        params = init_params(dims, ss)
        nets.append(
            NetworkState(
                name,
                params,
                OptimizerState.zeros(params),
                PredictionHistory(n_train, config.n_pseudo_classes),
            )
        )
    return NetworkPair(*nets)


def _step(net, batch, spec, lr, epoch, step):
    try:
        terms, grads = loss_and_grad(net.params, batch, spec)
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"{exc.args[0]} in network {net.name}", epoch, step) from None
    net.params, net.opt = adam_step(net.params, net.opt, grads, lr)
    return terms


# ---------------------------------------------------------------------------
# warmup
# ---------------------------------------------------------------------------
def warmup_epoch(net, train, config, epoch):
    """One epoch of hardest-negative triplet training on all pairs, margin alpha."""
    rng = _rng(config.seed, epoch, _net_id(net.name))
    order = rng.permutation(len(train))
    spec = LossSpec(1.0, 0.0, 0.0, 0.0)
    B = config.batch_size
    losses = []
    for step, start in enumerate(range(0, len(order), B)):
        idx = order[start : start + B]
        batch = StepBatch(
            clean_regions=train.regions[idx],
            clean_tokens=[train.tokens[i] for i in idx],
            clean_margins=np.full(len(idx), config.alpha),
        )
        losses.append(_step(net, batch, spec, config.lr, epoch, step).clean)
    return {"loss_c": float(np.mean(losses)), "loss_n": 0.0, "loss_pse": 0.0, "loss_ent": 0.0}


def warmup(net, train, config):
    """Run ``config.warmup_epochs`` warmup epochs in place and return ``net``."""
    if config.warmup_epochs < 1:
        raise ConfigError("warmup_epochs", "must be >= 1")
    for epoch in range(config.warmup_epochs):
        warmup_epoch(net, train, config, epoch)
    return net


# ---------------------------------------------------------------------------
# co-dividing
# ---------------------------------------------------------------------------
def division_losses(params, train, alpha, chunk):
    """Per-pair loss summed over all negatives inside fixed, index-ordered chunks.

    Every pair is scored against the same number of negatives: a trailing
    partial chunk is replaced by the last ``chunk`` indices, of which only the
    not-yet-scored ones are kept.
    """
    e_img = encode_images(params, train.regions)
    e_txt = encode_texts(params, train.tokens)
    n = len(train)
    chunk = min(chunk, n)
    out = np.zeros(n)
    for start in range(0, n, chunk):
        lo = min(start, n - chunk)
        sl = slice(lo, lo + chunk)
        losses = per_sample_division_loss(e_img[sl] @ e_txt[sl].T, alpha)
        out[start : lo + chunk] = losses[start - lo :]
    return out


@dataclass(frozen=True)
class Division:
    losses: np.ndarray
    w: np.ndarray
    split: object


def divide(net, train, config):
    chunk = config.division_chunk or config.batch_size
    losses = division_losses(net.params, train, config.alpha, chunk)
    w = compute_clean_probabilities(losses)
    return Division(losses, w, split_dataset(w, config.tau))


# ---------------------------------------------------------------------------
# main-phase training of one network on a division made by its peer
# ---------------------------------------------------------------------------
def _noisy_stream(rng, noisy_idx, n_needed):
    if n_needed == 0 or len(noisy_idx) == 0:
        return np.empty(0, dtype=np.int64)
    parts, have = [], 0
    while have < n_needed:
        parts.append(rng.permutation(noisy_idx))
        have += len(noisy_idx)
    return np.concatenate(parts)[:n_needed]


def _clean_margins(net, config, idx, w, p_clean, epoch):
    """Margins for a clean batch plus the oscillation probabilities used (NaN where none)."""
    mp = config.margins
    w_o = np.full(len(idx), np.nan)
    if config.margin_mode == "fixed":
        return np.full(len(idx), config.alpha), w_o
    w_c = w[idx]
    if config.margin_mode == "loss_only":
        return clean_margin(w_c, np.zeros_like(w_c), np.zeros(len(idx), bool), config.tau, mp), w_o
    prev, has = net.history.lookup(idx, epoch)
    if has.any():
        w_o[has] = oscillation_clean_probabilities(oscillation_batch(prev[has], p_clean[has]))
    margins = clean_margin(w_c, np.where(has, w_o, 0.5), has, config.tau, mp)
    return margins, w_o


def train_on_division(net, train, division, config, epoch):
    """Train ``net`` for one epoch on a division produced by the other network.

    Mutates ``net`` and returns the mean loss terms over the epoch's steps.
    """
    rng = _rng(config.seed, epoch, _net_id(net.name))
    B = config.batch_size
    clean_idx = division.split.clean_indices
    noisy_idx = division.split.noisy_indices
    steps = math.ceil(len(clean_idx) / B)
    clean_stream = np.resize(rng.permutation(clean_idx), steps * B)
    nb = min(B, len(noisy_idx))
    noisy_stream = _noisy_stream(rng, noisy_idx, steps * nb)
    spec = config.loss_spec()
    use_noisy = spec.noisy != 0.0 and nb > 0
    mp = config.margins
    totals = np.zeros(4)
    w_o_seen = np.full(len(train), np.nan)
    for step in range(steps):
        ci = clean_stream[step * B : (step + 1) * B]
        ni = noisy_stream[step * nb : (step + 1) * nb]
        e_clean = encode_images(net.params, train.regions[ci])
        p_clean = pseudo_predict(net.params, e_clean)
        margins, w_o = _clean_margins(net, config, ci, division.w, p_clean, epoch)
        seen = ~np.isnan(w_o)
        w_o_seen[ci[seen]] = w_o[seen]
        batch = StepBatch(
            clean_regions=train.regions[ci],
            clean_tokens=[train.tokens[i] for i in ci],
            clean_margins=margins,
        )
        if use_noisy:
            e_noisy = encode_images(net.params, train.regions[ni])
            if config.pseudo_classification:
                assign = assign_pseudo_captions(pseudo_predict(net.params, e_noisy), p_clean)
            else:
                assign = assign_by_similarity(cosine_matrix(e_noisy, e_clean))
            batch.noisy_regions = train.regions[ni]
            batch.pseudo_index = assign.source
            batch.noisy_margins = noisy_margin(assign.s_p, mp)
        terms = _step(net, batch, spec, config.lr, epoch, step)
        totals += (terms.clean, terms.noisy, terms.pse, terms.ent)

    if len(clean_idx):
        p = pseudo_predict(net.params, encode_images(net.params, train.regions[clean_idx]))
        update_history(net.history, epoch, clean_idx, p)
    means = totals / max(steps, 1)
    out = dict(zip(("loss_c", "loss_n", "loss_pse", "loss_ent"), map(float, means)))
    out["w_o"] = w_o_seen
    return out


def division_record(division, w_o):
    """Per-index diagnostics of one division: loss, w, w_o (NaN if unused), clean flag."""
    clean = np.zeros(len(division.w), dtype=bool)
    clean[division.split.clean_indices] = True
    return {"loss": division.losses, "w": division.w, "w_o": w_o, "clean": clean}


def _run_phases(jobs, n_jobs):
    if n_jobs == 1:
        return [fn() for fn in jobs]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return [f.result() for f in [pool.submit(fn) for fn in jobs]]


def _mean_terms(results):
    keys = ("loss_c", "loss_n", "loss_pse", "loss_ent")
    return {k: float(np.mean([r[k] for r in results])) for k in keys}


def run_main_epoch(pair, train, config, epoch, on_divide=None):
    """One co-teaching epoch: divide with both networks, then cross-train.

    ``on_divide(name, division)`` is invoked for each division before any
    training happens (instrumentation hook).
    """
    div_a = divide(pair.net_a, train, config)
    div_b = divide(pair.net_b, train, config)
    if on_divide is not None:
        on_divide("A", div_a)
        on_divide("B", div_b)
    results = _run_phases(
        [
            lambda: train_on_division(pair.net_a, train, div_b, config, epoch),
            lambda: train_on_division(pair.net_b, train, div_a, config, epoch),
        ],
        config.n_jobs,
    )
    c = train.c
    quality = {
        "A": split_quality(div_a.w, c, config.tau).to_dict(),
        "B": split_quality(div_b.w, c, config.tau).to_dict(),
    }
    report = EpochReport(
        epoch=epoch,
        phase="main",
        **_mean_terms(results),
        clean_count=len(div_a.split.clean_indices),
        noisy_count=len(div_a.split.noisy_indices),
        split_quality=quality,
    )
    # w_o of a division comes from the peer that trained on it
    records = {
        "A": division_record(div_a, results[1]["w_o"]),
        "B": division_record(div_b, results[0]["w_o"]),
    }
    return report, records


def run_warmup_epoch(pair, train, config, epoch):
    results = _run_phases(
        [
            lambda: warmup_epoch(pair.net_a, train, config, epoch),
            lambda: warmup_epoch(pair.net_b, train, config, epoch),
        ],
        config.n_jobs,
    )
    return EpochReport(
        epoch=epoch,
        phase="warmup",
        **_mean_terms(results),
        clean_count=len(train),
        noisy_count=0,
    )


def _as_stored(params):
    # checkpoints hold float32; evaluate exactly what gets written
    return params.map(lambda a: a.astype(np.float32).astype(np.float64))


def train(bundle, config, on_epoch=None, on_divide=None):
    """Full run: warmup, main epochs, validation-based checkpoint selection.

    ``on_epoch(report)`` is called after every epoch. On divergence the raised
    ``TrainingDivergenceError`` carries the reports gathered so far in its
    ``history`` attribute.
    """
    config.validate()
    train_split = bundle.train
    pair = make_network_pair(config, bundle.dims, len(train_split))
    history = []
    best_epoch, best_rsum, best = -1, -np.inf, None
    divisions = {}
    try:
        for epoch in range(config.total_epochs):
            t0 = time.perf_counter()
            if config.method == "baseline" or epoch < config.warmup_epochs:
                report = run_warmup_epoch(pair, train_split, config, epoch)
                if config.method == "baseline":
                    report.phase = "baseline"
            else:
                report, divs = run_main_epoch(pair, train_split, config, epoch, on_divide)
                divisions[epoch] = divs
            report.val_rsum = evaluate_split(pair.net_a.params, pair.net_b.params, bundle.val).rsum
            report.seconds = time.perf_counter() - t0
            history.append(report)
            if report.val_rsum > best_rsum:
                best_epoch, best_rsum = epoch, report.val_rsum
                best = (_as_stored(pair.net_a.params), _as_stored(pair.net_b.params))
            logger.info(
                "epoch %d [%s] loss_c=%.4f clean=%d val_rsum=%.2f",
                epoch,
                report.phase,
                report.loss_c,
                report.clean_count,
                report.val_rsum,
            )
            if on_epoch is not None:
                on_epoch(report)
    except TrainingDivergenceError as exc:
        exc.history = history
        raise
    test = evaluate_split(best[0], best[1], bundle.test)
    return TrainResult(config, history, best_epoch, best, test, divisions)


def config_from_dict(d, base=None):
    """Build a TrainConfig from a mapping, rejecting unknown keys."""
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    for k in d:
        if k not in known:
            raise ConfigError(k, "unknown key")
    return replace(base, **d)
