import dataclasses
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import toy_dataset
from seqadapt.data import DomainDataset, Example
from seqadapt.heads import AUGMENTED, DUAL, DomainTag, ce_loss
from seqadapt.mathcore import Rng
from seqadapt.model import init_params
from seqadapt.train import (
    AdamState,
    MissingDataError,
    NumericError,
    Strategy,
    TrainConfig,
    adam_step,
    batch_loss,
    early_stop,
    epoch_schedule,
    mean_nll,
    run_strategy,
)

SENTS = [["a", "b", "c"], ["d", "e"], ["a", "e", "f", "b"], ["c", "d"]]


def cfg(**kw):
    base = dict(n=8, batch_size=2, max_epochs=6, patience=2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# ---- Adam ------------------------------------------------------------------------------

def mp_adam(g, steps, alpha=0.001, b1=0.9, b2=0.999, eps=1e-8):
    mpmath.mp.dps = 50
    p = m = v = mpmath.mpf(0)
    g = mpmath.mpf(g)
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= alpha * (m / (1 - mpmath.mpf(b1) ** t)) / (mpmath.sqrt(v / (1 - mpmath.mpf(b2) ** t)) + eps)
    return float(p)


@pytest.mark.parametrize("g", [0.37, -2.5, 1e-3])
def test_adam_three_steps_oracle(g):
    p = {"x": np.zeros(1)}
    st_ = AdamState()
    for _ in range(3):
        adam_step(st_, p, {"x": np.array([g])})
    assert p["x"][0] == pytest.approx(mp_adam(g, 3), rel=1e-12, abs=1e-18)


@given(st.floats(1e-3, 1e3), st.booleans())
def test_adam_first_step_magnitude(mag, neg):
    g = -mag if neg else mag
    p = {"x": np.array([1.0])}
    adam_step(AdamState(), p, {"x": np.array([g])})
    assert abs(abs(p["x"][0] - 1.0) - 0.001) < 1e-6
    assert np.sign(1.0 - p["x"][0]) == np.sign(g)


def test_adam_zero_gradient_and_shape_error():
    p = {"x": np.array([1.0, 2.0])}
    state = AdamState()
    adam_step(state, p, {"x": np.zeros(2)})
    np.testing.assert_array_equal(p["x"], [1.0, 2.0])
    assert np.all(state.v["x"] >= 0) and state.t["x"] == 1
    with pytest.raises(ValueError):
        adam_step(state, p, {"x": np.zeros(3)})


def test_adam_only_touches_present_keys():
    p = {"a": np.ones(2), "b": np.ones(2)}
    state = AdamState()
    adam_step(state, p, {"a": np.ones(2)})
    np.testing.assert_array_equal(p["b"], 1.0)
    assert "b" not in state.t


# ---- scheduling and stopping -----------------------------------------------------------

@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 1000))
def test_epoch_schedule_multiset(ns, nt, seed):
    s = epoch_schedule(Rng(seed), ns, nt)
    assert len(s) == ns + nt
    assert s.count(DomainTag.SOURCE) == ns
    assert s == epoch_schedule(Rng(seed), ns, nt)


def test_epoch_schedule_examples():
    s = epoch_schedule(Rng(0), 3, 2)
    assert len(s) == 5 and s.count(DomainTag.TARGET) == 2
    assert epoch_schedule(Rng(0), 0, 4) == [DomainTag.TARGET] * 4


def test_early_stop_examples():
    assert not early_stop([3.0, 2.5, 2.6], 2)
    assert early_stop([3.0, 2.5, 2.6, 2.7], 2)
    assert not early_stop([3.0, 2.9, 2.95], 3)
    assert not any(early_stop(list(np.linspace(5, 1, k)), 1) for k in range(1, 30))
    with pytest.raises(ValueError):
        early_stop([], 2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(strategy="mixed")


# ---- batch losses ----------------------------------------------------------------------------

def test_proposed_batch_gradients_route_by_domain():
    p = init_params(10, 4, 3, AUGMENTED, Rng(0), 0.3)
    rng = np.random.default_rng(0)
    batch = [Example(rng.normal(size=3), [1, 5, 6, 2]), Example(rng.normal(size=3), [1, 7, 2])]
    src = batch_loss(p, batch, DomainTag.SOURCE)
    assert "head.theta_s" in src.grads and "head.theta_t" not in src.grads
    tgt = batch_loss(p, batch, DomainTag.TARGET)
    assert "head.theta_t" in tgt.grads and "head.theta_s" not in tgt.grads
    dual = batch_loss(init_params(10, 4, 3, DUAL, Rng(0)), batch, DomainTag.SOURCE)
    assert "head.W_s" in dual.grads and "head.W_t" not in dual.grads


def test_proposed_eval_loss_is_composed_ce():
    p = init_params(10, 4, 3, AUGMENTED, Rng(1), 0.5)
    ex = Example(np.ones(3), [1, 5, 6, 2])
    from seqadapt.model import forward

    _, tape = forward(p, ex.ctx, ex.tokens)
    W = p.head.mats["theta_g"] + p.head.mats["theta_t"]
    want = sum(ce_loss(W, tape.H[t, 0], ex.tokens[t + 1])[0] for t in range(3))
    assert mean_nll(p, [ex], DomainTag.TARGET) * 3 == pytest.approx(want, rel=1e-13)


def test_redundancy_exact_objective_keeps_blocks_equal():
    p = init_params(12, 6, 3, AUGMENTED, Rng(2), 0.5)
    p.head.mats["theta_s"][...] = p.head.mats["theta_g"]
    rng = np.random.default_rng(2)
    batch = [Example(rng.normal(size=3), [1] + rng.integers(4, 12, 3).tolist() + [2]) for _ in range(3)]
    state = AdamState()
    live = p.named()
    for _ in range(30):
        adam_step(state, live, batch_loss(p, batch, DomainTag.SOURCE, "exact").grads)
    assert p.head.mats["theta_g"].tobytes() == p.head.mats["theta_s"].tobytes()


# ---- run_strategy -----------------------------------------------------------------------------

def test_proposed_learns_toy_corpus():
    src = toy_dataset("source", SENTS[:1])
    tgt = toy_dataset("target", SENTS[1:2])
    tgt.vocab = src.vocab = toy_dataset("source", SENTS[:2]).vocab
    src = dataclasses.replace(src, train=[Example(np.ones(3), src.vocab.encode(SENTS[0]))])
    tgt = dataclasses.replace(tgt, train=[Example(-np.ones(3), src.vocab.encode(SENTS[1]))])
    src.dev, tgt.dev = src.train, tgt.train
    params, metrics = run_strategy(cfg(max_epochs=50, patience=50, batch_size=1), src, tgt)
    assert len(metrics.epochs) == 50
    V = len(src.vocab)
    assert metrics.epochs[-1].target_train_loss < math.log(V)
    assert metrics.epochs[-1].source_train_loss < math.log(V)
    assert metrics.epochs[-1].target_train_loss < metrics.epochs[0].target_train_loss
    assert metrics.epochs[0].bound_gap is not None


def test_determinism_bitwise(tiny_pair):
    src, tgt = tiny_pair
    a, ma = run_strategy(cfg(max_epochs=2), src, tgt)
    b, mb = run_strategy(cfg(max_epochs=2), src, tgt)
    for k, v in a.named().items():
        assert v.tobytes() == b.named()[k].tobytes()
    assert ma.to_dict() == mb.to_dict()


def test_dev_sequence_and_best_checkpoint(tiny_pair):
    src, tgt = tiny_pair
    params, m = run_strategy(cfg(max_epochs=40, patience=1, alpha=0.05), src, tgt)
    devs = m.dev_losses()
    stopped_early = len(devs) < 40
    if stopped_early:
        assert early_stop(devs, 1) and not early_stop(devs[:-1], 1)
    assert m.best_epoch["main"] == int(np.argmin(devs)) + 1
    assert mean_nll(params, tgt.dev, DomainTag.TARGET) == pytest.approx(min(devs), rel=1e-12)


def test_all_with_empty_source_is_tgtonly(tiny_pair):
    src, tgt = tiny_pair
    empty = DomainDataset(DomainTag.SOURCE, src.vocab)
    a, ma = run_strategy(cfg(strategy="all"), empty, tgt)
    b, mb = run_strategy(cfg(strategy="tgtonly"), src, tgt)
    for k, v in a.named().items():
        assert v.tobytes() == b.named()[k].tobytes()
    assert ma.dev_losses() == mb.dev_losses()


def test_finetune_zero_target_epochs(tiny_pair):
    src, tgt = tiny_pair
    a, ma = run_strategy(cfg(strategy="finetune", finetune_target_epochs=0), src, tgt)
    b, _ = run_strategy(cfg(strategy="srconly"), src, tgt)
    for k, v in a.named().items():
        assert v.tobytes() == b.named()[k].tobytes()
    assert {r.phase for r in ma.epochs} == {"finetune-source"}


def test_finetune_two_phases(tiny_pair):
    src, tgt = tiny_pair
    _, m = run_strategy(cfg(strategy="finetune", max_epochs=2), src, tgt)
    assert [r.phase for r in m.epochs] == ["finetune-source"] * 2 + ["finetune-target"] * 2


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_dual_symmetric_data_heads_agree(tiny_pair, seed):
    _, tgt = tiny_pair
    src = dataclasses.replace(tgt, domain=DomainTag.SOURCE)
    params, _ = run_strategy(cfg(strategy="dual", seed=seed, max_epochs=15, patience=15, alpha=0.01), src, tgt)
    ls = mean_nll(params, tgt.dev, DomainTag.SOURCE)
    lt = mean_nll(params, tgt.dev, DomainTag.TARGET)
    assert abs(ls - lt) / lt < 0.05


def test_strategy_data_requirements(tiny_pair):
    src, tgt = tiny_pair
    empty_t = DomainDataset(DomainTag.TARGET, tgt.vocab)
    with pytest.raises(MissingDataError):
        run_strategy(cfg(strategy="tgtonly"), src, empty_t)
    with pytest.raises(MissingDataError):
        run_strategy(cfg(strategy="srconly"), None, tgt)
    with pytest.raises(MissingDataError):
        run_strategy(cfg(strategy="proposed"), src, None)
    # srconly needs nothing from the target side
    run_strategy(cfg(strategy="srconly", max_epochs=1), src, None)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises_with_location(tiny_pair):
    src, tgt = tiny_pair
    bad = [Example(np.full(4, np.inf), ex.tokens) for ex in tgt.train]
    with pytest.raises(NumericError) as info:
        run_strategy(cfg(strategy="tgtonly"), src, tgt.with_train(bad))
    assert info.value.epoch == 1 and info.value.batch == 0
