"""Output layers: single softmax, dual per-domain heads, and the augmented
general + domain decomposition trained through an upper bound on the
cross-entropy of the composed weights.

The per-example functions (``ce_loss``, ``augmented_loss``) mirror the math
one hidden state at a time; the ``*_rows`` variants evaluate many hidden
states at once and are what training uses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .mathcore import Rng, log_sum_exp_rows, rng_uniform, softmax


class DomainTag(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


SINGLE = "single"
DUAL = "dual"
AUGMENTED = "augmented"
VARIANTS = (SINGLE, DUAL, AUGMENTED)

_HEAD_KEYS = {
    SINGLE: ("W",),
    DUAL: ("W_s", "W_t"),
    AUGMENTED: ("theta_g", "theta_s", "theta_t"),
}


@dataclass
class OutputHead:
    variant: str
    mats: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}")
        if set(self.mats) != set(_HEAD_KEYS[self.variant]):
            raise ValueError(f"{self.variant} head needs {_HEAD_KEYS[self.variant]}, got {sorted(self.mats)}")
        shapes = {m.shape for m in self.mats.values()}
        if len(shapes) != 1:
            raise ValueError(f"head matrices disagree in shape: {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.mats.values())).shape

    def copy(self) -> "OutputHead":
        return OutputHead(self.variant, {k: v.copy() for k, v in self.mats.items()})


def init_head(variant: str, vocab_size: int, n: int, rng: Rng, scale: float = 0.08) -> OutputHead:
    # augmented blocks start at half scale so composed weights match a single head
    s = scale / 2.0 if variant == AUGMENTED else scale
    mats = {}
    for key in _HEAD_KEYS[variant]:
        mats[key] = rng_uniform(rng, -s, s, vocab_size * n).reshape(vocab_size, n)
    return OutputHead(variant, mats)


def _check(W: np.ndarray, h: np.ndarray, y: int):
    if W.shape[1] != h.shape[-1]:
        raise ValueError(f"head has {W.shape[1]} columns, hidden state has {h.shape[-1]}")
    if not 0 <= y < W.shape[0]:
        raise ValueError(f"token {y} out of range for vocabulary of {W.shape[0]}")


def ce_loss(W: np.ndarray, h: np.ndarray, y: int):
    """Cross-entropy of softmax(W h) at token ``y``. Returns (loss, dW, dh)."""
    h = np.asarray(h, dtype=np.float64)
    _check(W, h, y)
    logits = W @ h
    m = np.max(logits)
    lse = m + np.log(np.sum(np.exp(logits - m)))
    loss = float(lse - logits[y])
    dlogits = softmax(logits)
    dlogits[y] -= 1.0
    return loss, np.outer(dlogits, h), W.T @ dlogits


def _half_lse_term(theta: np.ndarray, h: np.ndarray, y: int):
    # -theta_y.h + 1/2 log Z(2 theta; h), written literally
    a = theta @ h
    two_a = 2.0 * a
    m = np.max(two_a)
    log_z = m + np.log(np.sum(np.exp(two_a - m)))
    value = -a[y] + 0.5 * log_z
    # d/da [ -a_y + 1/2 lse(2a) ] = softmax(2a) - e_y
    da = softmax(two_a)
    da[y] -= 1.0
    return float(value), da


def augmented_loss(theta_g: np.ndarray, theta_d: np.ndarray, h: np.ndarray, y: int):
    """Upper bound on ce_loss(theta_g + theta_d, h, y).

    Returns (loss, dtheta_g, dtheta_d, dh).
    """
    h = np.asarray(h, dtype=np.float64)
    _check(theta_g, h, y)
    _check(theta_d, h, y)
    vg, dag = _half_lse_term(theta_g, h, y)
    vd, dad = _half_lse_term(theta_d, h, y)
    dh = theta_g.T @ dag + theta_d.T @ dad
    return vg + vd, np.outer(dag, h), np.outer(dad, h), dh


def bound_gap(theta_g: np.ndarray, theta_d: np.ndarray, h: np.ndarray, y: int) -> float:
    bound = augmented_loss(theta_g, theta_d, h, y)[0]
    exact = ce_loss(theta_g + theta_d, h, y)[0]
    return bound - exact


def compose_weights(head: OutputHead) -> tuple[np.ndarray, np.ndarray]:
    if head.variant != AUGMENTED:
        raise ValueError(f"compose_weights needs an augmented head, got {head.variant}")
    g = head.mats["theta_g"]
    return g + head.mats["theta_s"], g + head.mats["theta_t"]


def eval_weight(head: OutputHead, tag: DomainTag) -> np.ndarray:
    """The |V| x n matrix that produces logits for ``tag`` at evaluation time."""
    tag = DomainTag(tag)
    if head.variant == SINGLE:
        return head.mats["W"]
    if head.variant == DUAL:
        return head.mats["W_s"] if tag is DomainTag.SOURCE else head.mats["W_t"]
    w_s, w_t = compose_weights(head)
    return w_s if tag is DomainTag.SOURCE else w_t


def head_logits(head: OutputHead, tag: DomainTag, h: np.ndarray, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if head.variant == AUGMENTED and mode == "train":
        raise ValueError("use augmented_loss")
    W = eval_weight(head, tag)
    if W.shape[1] != np.shape(h)[-1]:
        raise ValueError(f"head has {W.shape[1]} columns, hidden state has {np.shape(h)[-1]}")
    return np.asarray(h) @ W.T


def domain_keys(head: OutputHead, tag: DomainTag) -> tuple[str, ...]:
    """Head parameter names that receive gradient from a batch of ``tag``."""
    tag = DomainTag(tag)
    if head.variant == SINGLE:
        return ("W",)
    if head.variant == DUAL:
        return ("W_s",) if tag is DomainTag.SOURCE else ("W_t",)
    return ("theta_g", "theta_s") if tag is DomainTag.SOURCE else ("theta_g", "theta_t")


# ---- row-batched versions used by training ----------------------------------

def ce_loss_rows(W: np.ndarray, H: np.ndarray, Y: np.ndarray, scale: float = 1.0):
    """Summed cross-entropy over rows of H. Gradients are multiplied by ``scale``.

    Returns (total_loss, dW, dH).
    """
    logits = H @ W.T
    lse = log_sum_exp_rows(logits)
    rows = np.arange(len(Y))
    total = float(np.sum(lse - logits[rows, Y]))
    G = np.exp(logits - lse[:, None])
    G[rows, Y] -= 1.0
    G *= scale
    return total, G.T @ H, G @ W


def _half_lse_rows(theta: np.ndarray, H: np.ndarray, Y: np.ndarray, scale: float):
    a = H @ theta.T
    rows = np.arange(len(Y))
    two_a = 2.0 * a
    log_z = log_sum_exp_rows(two_a)
    total = float(np.sum(-a[rows, Y] + 0.5 * log_z))
    G = np.exp(two_a - log_z[:, None])
    G[rows, Y] -= 1.0
    G *= scale
    return total, G


def augmented_loss_rows(theta_g: np.ndarray, theta_d: np.ndarray, H: np.ndarray, Y: np.ndarray, scale: float = 1.0):
    """Summed bound loss over rows. Returns (total, dtheta_g, dtheta_d, dH)."""
    vg, Gg = _half_lse_rows(theta_g, H, Y, scale)
    vd, Gd = _half_lse_rows(theta_d, H, Y, scale)
    dH = Gg @ theta_g + Gd @ theta_d
    return vg + vd, Gg.T @ H, Gd.T @ H, dH
