import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqadapt.heads import (
    AUGMENTED,
    DUAL,
    SINGLE,
    DomainTag,
    OutputHead,
    augmented_loss,
    augmented_loss_rows,
    bound_gap,
    ce_loss,
    ce_loss_rows,
    compose_weights,
    head_logits,
    init_head,
)
from seqadapt.mathcore import Rng, grad_check

mpmath.mp.dps = 50


def mp_bound(tg, td, h, y):
    """Extended-precision evaluation of the bound, term by term."""
    def half(theta):
        a = [mpmath.fsum(mpmath.mpf(float(w)) * mpmath.mpf(float(x)) for w, x in zip(row, h)) for row in theta]
        return -a[y] + mpmath.log(mpmath.fsum(mpmath.exp(2 * z) for z in a)) / 2
    return float(half(tg) + half(td))


def draw(rng, V, n, scale=1.0):
    return rng.normal(scale=scale, size=(V, n)), rng.normal(scale=scale, size=(V, n)), rng.normal(size=n), int(rng.integers(V))


# ---- ce_loss -----------------------------------------------------------------------

def test_ce_zero_weights():
    loss, dW, dh = ce_loss(np.zeros((7, 3)), np.ones(3), 2)
    assert loss == pytest.approx(math.log(7), abs=1e-15)
    np.testing.assert_array_equal(dh, 0.0)


def test_ce_binary_logistic_form():
    W = np.array([[0.3, -1.0], [1.2, 0.5]])
    h = np.array([0.7, -0.4])
    a, b = W @ h
    assert ce_loss(W, h, 0)[0] == pytest.approx(math.log1p(math.exp(b - a)), abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_ce_grad_check(seed):
    rng = np.random.default_rng(seed)
    W, _, h, y = draw(rng, 9, 4)
    assert grad_check(lambda w: ce_loss(w.reshape(9, 4), h, y)[:2], W.ravel()) < 1e-5
    assert grad_check(lambda x: (ce_loss(W, x, y)[0], ce_loss(W, x, y)[2]), h) < 1e-5


def test_ce_out_of_range():
    with pytest.raises(ValueError):
        ce_loss(np.zeros((3, 2)), np.ones(2), 3)
    with pytest.raises(ValueError):
        augmented_loss(np.zeros((3, 2)), np.zeros((3, 2)), np.ones(2), -1)


# ---- augmented_loss / bound_gap ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_augmented_matches_extended_precision(seed):
    rng = np.random.default_rng(seed)
    tg, td, h, y = draw(rng, 8, 5)
    loss = augmented_loss(tg, td, h, y)[0]
    assert loss == pytest.approx(mp_bound(tg, td, h, y), abs=1e-12)
    assert loss > ce_loss(tg + td, h, y)[0]
    assert bound_gap(tg, td, h, y) > 0


def test_augmented_equal_blocks_is_ce_of_double():
    rng = np.random.default_rng(1)
    th, _, h, y = draw(rng, 6, 3)
    assert augmented_loss(th, th, h, y)[0] == pytest.approx(ce_loss(2 * th, h, y)[0], abs=1e-12)
    assert abs(bound_gap(th, th, h, y)) < 1e-10


def test_augmented_zero_is_uniform():
    assert augmented_loss(np.zeros((11, 2)), np.zeros((11, 2)), np.ones(2), 4)[0] == pytest.approx(math.log(11))


@pytest.mark.parametrize("seed", range(5))
def test_augmented_grad_check(seed):
    rng = np.random.default_rng(seed)
    tg, td, h, y = draw(rng, 7, 4)
    V, n = tg.shape

    def f(x):
        g, d, hh = x[:V * n].reshape(V, n), x[V * n:2 * V * n].reshape(V, n), x[2 * V * n:]
        loss, dg, dd, dh = augmented_loss(g, d, hh, y)
        return loss, np.concatenate([dg.ravel(), dd.ravel(), dh])

    assert grad_check(f, np.concatenate([tg.ravel(), td.ravel(), h])) < 1e-5


@given(st.integers(0, 2**32 - 1), st.integers(2, 50), st.integers(2, 16), st.floats(0.01, 5))
@settings(max_examples=300)
def test_bound_gap_nonnegative(seed, V, n, scale):
    rng = np.random.default_rng(seed)
    tg, td, h, y = draw(rng, V, n, scale)
    assert bound_gap(tg, td, h, y) >= -1e-10
    assert abs(bound_gap(tg, tg, h, y)) < 1e-10


def test_bound_gap_monotone_along_direction():
    rng = np.random.default_rng(4)
    tg, direction, h, y = draw(rng, 10, 4)
    gaps = [bound_gap(tg, tg + c * direction, h, y) for c in (0.0, 0.5, 1.0)]
    assert abs(gaps[0]) < 1e-10
    assert gaps[0] <= gaps[1] <= gaps[2]


def test_rows_match_per_example():
    rng = np.random.default_rng(8)
    tg, td, _, _ = draw(rng, 9, 4)
    H = rng.normal(size=(5, 4))
    Y = rng.integers(0, 9, 5)
    total, dW, dH = ce_loss_rows(tg, H, Y)
    per = [ce_loss(tg, H[k], int(Y[k])) for k in range(5)]
    assert total == pytest.approx(sum(p[0] for p in per), abs=1e-12)
    np.testing.assert_allclose(dW, sum(p[1] for p in per), atol=1e-12)
    np.testing.assert_allclose(dH, np.stack([p[2] for p in per]), atol=1e-12)
    total, dg, dd, dH = augmented_loss_rows(tg, td, H, Y)
    per = [augmented_loss(tg, td, H[k], int(Y[k])) for k in range(5)]
    assert total == pytest.approx(sum(p[0] for p in per), abs=1e-12)
    np.testing.assert_allclose(dg, sum(p[1] for p in per), atol=1e-12)
    np.testing.assert_allclose(dd, sum(p[2] for p in per), atol=1e-12)
    np.testing.assert_allclose(dH, np.stack([p[3] for p in per]), atol=1e-12)


def test_exact_objective_gives_equal_block_gradients():
    rng = np.random.default_rng(9)
    tg, td, h, y = draw(rng, 6, 3)
    _, dW, _ = ce_loss(tg + td, h, y)
    # d/dtheta_g and d/dtheta_d of ce(theta_g + theta_d) are the same array
    np.testing.assert_array_equal(dW, ce_loss(td + tg, h, y)[1])


# ---- composition / logits -------------------------------------------------------------------

def aug_head(seed=0, V=6, n=3):
    return init_head(AUGMENTED, V, n, Rng(seed), 1.0)


def test_compose_weights():
    head = aug_head()
    head.mats["theta_t"][...] = 0
    w_s, w_t = compose_weights(head)
    assert w_t.tobytes() == head.mats["theta_g"].tobytes()
    np.testing.assert_array_equal(w_s - head.mats["theta_g"] - head.mats["theta_s"], 0.0)
    head.mats["theta_s"][...] = -head.mats["theta_g"]
    assert not np.any(compose_weights(head)[0])
    with pytest.raises(ValueError):
        compose_weights(init_head(DUAL, 6, 3, Rng(0)))


def test_head_logits_variants():
    h = np.array([0.3, -0.2, 0.9])
    dual = init_head(DUAL, 6, 3, Rng(1))
    dual.mats["W_t"][...] = dual.mats["W_s"]
    np.testing.assert_array_equal(head_logits(dual, DomainTag.SOURCE, h), head_logits(dual, DomainTag.TARGET, h))
    dual = init_head(DUAL, 6, 3, Rng(2))
    single = OutputHead(SINGLE, {"W": dual.mats["W_s"].copy()})
    assert head_logits(dual, "source", h, "train").tobytes() == head_logits(single, "target", h).tobytes()
    aug = aug_head()
    aug.mats["theta_t"][...] = 0
    np.testing.assert_array_equal(head_logits(aug, DomainTag.TARGET, h), aug.mats["theta_g"] @ h)
    with pytest.raises(ValueError, match="use augmented_loss"):
        head_logits(aug, DomainTag.TARGET, h, "train")


def test_head_validation_and_init_scale():
    with pytest.raises(ValueError):
        OutputHead(DUAL, {"W_s": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        OutputHead("quad", {})
    aug = init_head(AUGMENTED, 50, 20, Rng(0), 0.08)
    assert max(np.abs(m).max() for m in aug.mats.values()) <= 0.04
    single = init_head(SINGLE, 50, 20, Rng(0), 0.08)
    assert 0.04 < np.abs(single.mats["W"]).max() <= 0.08
