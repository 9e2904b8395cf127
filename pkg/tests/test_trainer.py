import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_CONFIG
from noisycorr import trainer as T
from noisycorr.correspondence import DataSplit
from noisycorr.data import SyntheticSpec, build_dataset
from noisycorr.evaluation import evaluate_split
from noisycorr.exceptions import ConfigError, TrainingDivergenceError
from noisycorr.model import LossSpec, StepBatch, adam_step, loss_and_grad


def same_params(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def rows(history):
    return [
        (r.epoch, r.phase, r.loss_c, r.loss_n, r.loss_pse, r.loss_ent, r.clean_count, r.noisy_count, r.val_rsum)
        for r in history
    ]


@pytest.fixture(scope="module")
def tiny_run(tiny_bundle):
    return T.train(tiny_bundle, TINY_CONFIG)


# -- configuration -----------------------------------------------------------
@pytest.mark.parametrize(
    "kw",
    [
        {"warmup_epochs": 0},
        {"batch_size": 1},
        {"tau": 1.0},
        {"n_pseudo_classes": 1},
        {"m": 1.0},
        {"total_epochs": 3, "warmup_epochs": 3},
        {"method": "other"},
        {"margin_mode": "other"},
        {"n_jobs": 3},
        {"lambda_n": -1.0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        replace(T.TrainConfig(), **kw).validate()


def test_config_from_dict_rejects_unknown_keys():
    assert T.config_from_dict({"lr": 0.1}).lr == 0.1
    with pytest.raises(ConfigError):
        T.config_from_dict({"learning_rate": 0.1})


# -- warmup --------------------------------------------------------------------
def test_warmup_reduces_loss_on_clean_data():
    bundle = build_dataset(SyntheticSpec(n_classes=4, n_train=256, n_val=8, n_test=8, seed=1))
    cfg = replace(TINY_CONFIG, warmup_epochs=3)
    net = T.make_network_pair(cfg, bundle.dims, 256).net_a
    losses = [T.warmup_epoch(net, bundle.train, cfg, e)["loss_c"] for e in range(3)]
    assert sum(b > a for a, b in zip(losses, losses[1:])) <= 1
    assert losses[-1] < losses[0]


def test_warmup_is_deterministic(tiny_bundle):
    nets = []
    for _ in range(2):
        net = T.make_network_pair(TINY_CONFIG, tiny_bundle.dims, len(tiny_bundle.train)).net_b
        nets.append(T.warmup(net, tiny_bundle.train, TINY_CONFIG))
    assert same_params(nets[0].params, nets[1].params)
    with pytest.raises(ConfigError):
        T.warmup(nets[0], tiny_bundle.train, replace(TINY_CONFIG, warmup_epochs=0))


def test_networks_start_from_different_weights(tiny_bundle):
    pair = T.make_network_pair(TINY_CONFIG, tiny_bundle.dims, len(tiny_bundle.train))
    assert pair.net_a.params.dims == pair.net_b.params.dims
    assert not same_params(pair.net_a.params, pair.net_b.params)


# -- main epoch ---------------------------------------------------------------
def warmed_pair(bundle, cfg):
    pair = T.make_network_pair(cfg, bundle.dims, len(bundle.train))
    for e in range(cfg.warmup_epochs):
        T.run_warmup_epoch(pair, bundle.train, cfg, e)
    return pair


def test_co_teaching_uses_the_peer_division(tiny_bundle, monkeypatch):
    made, used = {}, {}
    original = T.train_on_division

    def spy(net, train, division, config, epoch):
        used[net.name] = id(division)
        return original(net, train, division, config, epoch)

    monkeypatch.setattr(T, "train_on_division", spy)
    pair = warmed_pair(tiny_bundle, TINY_CONFIG)
    T.run_main_epoch(pair, tiny_bundle.train, TINY_CONFIG, 2, lambda name, d: made.__setitem__(name, id(d)))
    assert used["A"] == made["B"] and used["B"] == made["A"]


def test_every_step_has_full_clean_and_noisy_halves(tiny_bundle, monkeypatch):
    shapes = []
    original = T._step

    def spy(net, batch, spec, lr, epoch, step):
        n = 0 if batch.noisy_regions is None else len(batch.noisy_regions)
        shapes.append((net.name, len(batch.clean_tokens), n))
        return original(net, batch, spec, lr, epoch, step)

    divisions = {}
    pair = warmed_pair(tiny_bundle, TINY_CONFIG)
    monkeypatch.setattr(T, "_step", spy)
    report, _ = T.run_main_epoch(pair, tiny_bundle.train, TINY_CONFIG, 2, divisions.__setitem__)
    B = TINY_CONFIG.batch_size
    for name, peer in (("A", "B"), ("B", "A")):
        split = divisions[peer].split
        mine = [s for s in shapes if s[0] == name]
        assert len(mine) == math.ceil(len(split.clean_indices) / B)
        assert all(c == B and n == min(B, len(split.noisy_indices)) for _, c, n in mine)
    assert report.clean_count + report.noisy_count == len(tiny_bundle.train)


def test_history_written_only_by_its_owner(tiny_bundle):
    divisions = {}
    pair = warmed_pair(tiny_bundle, TINY_CONFIG)
    T.run_main_epoch(pair, tiny_bundle.train, TINY_CONFIG, 2, divisions.__setitem__)
    for net, peer in ((pair.net_a, "B"), (pair.net_b, "A")):
        written = np.flatnonzero(net.history.epoch_tag == 2)
        assert written.tolist() == divisions[peer].split.clean_indices.tolist()
    assert pair.net_a.history is not pair.net_b.history


def test_zero_weights_reduce_to_plain_triplet_training(tiny_bundle):
    cfg = replace(TINY_CONFIG, lambda_n=0.0, lambda_pse=0.0, lambda_ent=0.0, margin_mode="fixed")
    train = tiny_bundle.train
    n = len(train)
    division = T.Division(np.zeros(n), np.ones(n), DataSplit(np.arange(n), np.empty(0, dtype=np.int64)))
    net = warmed_pair(tiny_bundle, cfg).net_a
    params, opt = net.params.copy(), net.opt.copy()
    T.train_on_division(net, train, division, cfg, 5)

    # reference: hardest-negative triplet steps over one seeded permutation
    B = cfg.batch_size
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5, 0]))
    steps = math.ceil(n / B)
    order = np.resize(rng.permutation(n), steps * B)
    for s in range(steps):
        idx = order[s * B : (s + 1) * B]
        batch = StepBatch(train.regions[idx], [train.tokens[i] for i in idx], np.full(B, cfg.alpha))
        _, g = loss_and_grad(params, batch, LossSpec(1.0, 0.0, 0.0, 0.0))
        params, opt = adam_step(params, opt, g, cfg.lr)
    assert same_params(net.params, params)


def test_mismatch_filter_equals_zero_noisy_weight(tiny_bundle):
    a = T.train(tiny_bundle, replace(TINY_CONFIG, mismatch_filter=True))
    b = T.train(tiny_bundle, replace(TINY_CONFIG, lambda_n=0.0))
    assert rows(a.history) == rows(b.history)
    assert all(same_params(x, y) for x, y in zip(a.best_params, b.best_params))


def test_division_record_fields(tiny_run):
    rec = tiny_run.divisions[2]["A"]
    n = len(rec["w"])
    assert set(rec) == {"loss", "w", "w_o", "clean"}
    assert all(len(rec[k]) == n for k in rec)
    assert np.all((rec["w"] >= 0) & (rec["w"] <= 1))
    w_o = rec["w_o"][~np.isnan(rec["w_o"])]
    assert np.all((w_o >= 0) & (w_o <= 1))
    assert np.isnan(rec["w_o"]).all()  # first main epoch: no history yet
    assert not np.isnan(tiny_run.divisions[3]["A"]["w_o"]).all()


# -- full training -------------------------------------------------------------
def test_training_is_deterministic(tiny_bundle, tiny_run):
    again = T.train(tiny_bundle, TINY_CONFIG)
    assert rows(again.history) == rows(tiny_run.history)
    threaded = T.train(tiny_bundle, replace(TINY_CONFIG, n_jobs=2))
    assert rows(threaded.history) == rows(tiny_run.history)


def test_best_checkpoint_selection(tiny_bundle, tiny_run):
    vals = [r.val_rsum for r in tiny_run.history]
    assert len(vals) == TINY_CONFIG.total_epochs
    assert tiny_run.history[tiny_run.best_epoch].val_rsum == max(vals)
    assert tiny_run.best_epoch == vals.index(max(vals))
    a, b = tiny_run.best_params
    assert evaluate_split(a, b, tiny_bundle.val).rsum == max(vals)
    assert evaluate_split(a, b, tiny_bundle.test) == tiny_run.test_report


def test_phases_and_counts(tiny_run, tiny_bundle):
    phases = [r.phase for r in tiny_run.history]
    assert phases == ["warmup"] * 2 + ["main"] * 3
    for r in tiny_run.history:
        assert r.clean_count + r.noisy_count == len(tiny_bundle.train)
    assert all(r.split_quality is None for r in tiny_run.history[:2])
    assert set(tiny_run.history[2].split_quality) == {"A", "B"}


def test_baseline_never_divides(tiny_bundle):
    res = T.train(tiny_bundle, replace(TINY_CONFIG, method="baseline"))
    assert {r.phase for r in res.history} == {"baseline"}
    assert res.divisions == {}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_partial_history(tiny_bundle):
    with pytest.raises(TrainingDivergenceError) as err:
        T.train(tiny_bundle, replace(TINY_CONFIG, lr=float("inf")))
    assert err.value.epoch == 0 and err.value.history == []


# -- memorisation direction at zero noise ----------------------------------------
WELL_SEPARATED = SyntheticSpec(region_noise=0.1, attribute_scale=2.0, noise_ratio=0.0, seed=0)


@pytest.fixture(scope="module")
def zero_noise_first_split():
    bundle = build_dataset(WELL_SEPARATED)
    res = T.train(bundle, T.TrainConfig(seed=0, total_epochs=4))
    return res.divisions[3]


def test_zero_noise_first_split_keeps_most_pairs(zero_noise_first_split):
    for rec in zero_noise_first_split.values():
        assert rec["clean"].mean() >= 0.70


@pytest.mark.xfail(strict=True, reason="two-component split of a long-tailed loss keeps about 76-81% clean")
def test_zero_noise_first_split_keeps_95_percent(zero_noise_first_split):
    for rec in zero_noise_first_split.values():
        assert rec["clean"].mean() >= 0.95
