"""Context-conditioned LSTM caption generator with backpropagation through time.

The context vector enters once as ``u_0 = W0 @ ctx``; afterwards the input at
step t is the embedding of token t-1, and the hidden state at step t scores
token t. No bias terms anywhere, matching the gate equations as written.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import AUGMENTED, DomainTag, OutputHead, eval_weight, init_head
from .mathcore import Rng, rng_uniform
from .vocab import BOS, EOS, PAD

GATES = ("i", "f", "o", "g")
LSTM_KEYS = ("W_ix", "W_ih", "W_fx", "W_fh", "W_ox", "W_oh", "W_gx", "W_gh")


@dataclass
class LstmParams:
    W_ix: np.ndarray
    W_ih: np.ndarray
    W_fx: np.ndarray
    W_fh: np.ndarray
    W_ox: np.ndarray
    W_oh: np.ndarray
    W_gx: np.ndarray
    W_gh: np.ndarray

    def __post_init__(self):
        n = self.W_ix.shape[0]
        for key in LSTM_KEYS:
            if getattr(self, key).shape != (n, n):
                raise ValueError(f"{key} has shape {getattr(self, key).shape}, expected ({n}, {n})")

    @property
    def n(self) -> int:
        return self.W_ix.shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """(4n x n input weights, 4n x n recurrent weights), gate order i, f, o, g."""
        Wx = np.concatenate([self.W_ix, self.W_fx, self.W_ox, self.W_gx])
        Wh = np.concatenate([self.W_ih, self.W_fh, self.W_oh, self.W_gh])
        return Wx, Wh


@dataclass
class ModelParams:
    embedding: np.ndarray
    W0: np.ndarray
    lstm: LstmParams
    head: OutputHead

    def __post_init__(self):
        n = self.lstm.n
        if self.embedding.shape[1] != n or self.W0.shape[0] != n:
            raise ValueError("embedding / W0 disagree with the LSTM cell size")
        if self.head.shape != (self.embedding.shape[0], n):
            raise ValueError(f"head shape {self.head.shape} != ({self.embedding.shape[0]}, {n})")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def n(self) -> int:
        return self.lstm.n

    @property
    def d_ctx(self) -> int:
        return self.W0.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping. Arrays are the live storage, not copies."""
        out = {"embedding": self.embedding, "W0": self.W0}
        for key in LSTM_KEYS:
            out[key] = getattr(self.lstm, key)
        for key, m in self.head.mats.items():
            out["head." + key] = m
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.embedding.copy(),
            self.W0.copy(),
            LstmParams(**{k: getattr(self.lstm, k).copy() for k in LSTM_KEYS}),
            self.head.copy(),
        )

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], variant: str) -> "ModelParams":
        head = {k[5:]: v for k, v in arrays.items() if k.startswith("head.")}
        return cls(
            arrays["embedding"],
            arrays["W0"],
            LstmParams(**{k: arrays[k] for k in LSTM_KEYS}),
            OutputHead(variant, head),
        )


def init_params(vocab_size: int, n: int, d_ctx: int, variant: str, rng: Rng, scale: float = 0.08) -> ModelParams:
    def u(rows, cols):
        return rng_uniform(rng, -scale, scale, rows * cols).reshape(rows, cols)

    embedding = u(vocab_size, n)
    W0 = u(n, d_ctx)
    lstm = LstmParams(**{k: u(n, n) for k in LSTM_KEYS})
    head = init_head(variant, vocab_size, n, rng, scale)
    return ModelParams(embedding, W0, lstm, head)


def zero_params_like(params: ModelParams) -> ModelParams:
    return ModelParams.from_named({k: np.zeros_like(v) for k, v in params.named().items()}, params.head.variant)


@dataclass
class LstmState:
    c: np.ndarray
    h: np.ndarray


@dataclass
class TapeRecord:
    u: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _cell(Wx, Wh, u, h_prev, c_prev):
    n = h_prev.shape[-1]
    z = u @ Wx.T + h_prev @ Wh.T
    i = _sigmoid(z[..., :n])
    f = _sigmoid(z[..., n:2 * n])
    o = _sigmoid(z[..., 2 * n:3 * n])
    g = np.tanh(z[..., 3 * n:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return TapeRecord(u, c_prev, h_prev, i, f, o, g, c, tanh_c, h)


def lstm_step(params: LstmParams, u_t, prev: LstmState) -> tuple[LstmState, TapeRecord]:
    u_t = np.asarray(u_t, dtype=np.float64)
    n = params.n
    if u_t.shape[-1] != n or prev.c.shape[-1] != n or prev.h.shape[-1] != n:
        raise ValueError(f"lstm_step dimension mismatch: cell size {n}")
    Wx, Wh = params.stacked()
    rec = _cell(Wx, Wh, u_t, prev.h, prev.c)
    return LstmState(rec.c, rec.h), rec


@dataclass
class BatchTape:
    """Cached activations of one batched forward pass.

    ``records[0]`` is the context step; ``records[t]`` for t >= 1 consumed
    ``tokens[:, t-1]``. ``H[t-1]`` is the hidden state that predicts
    ``tokens[:, t]``.
    """

    ctx: np.ndarray
    tokens: np.ndarray
    records: list
    H: np.ndarray
    mask: np.ndarray
    n: int
    vocab_size: int
    tag: DomainTag = DomainTag.TARGET


def check_tokens(tokens, vocab_size: int):
    tokens = [int(t) for t in tokens]
    if len(tokens) < 2 or tokens[0] != BOS or tokens[-1] != EOS:
        raise ValueError("token sequence must start with BOS and end with EOS")
    if EOS in tokens[:-1]:
        raise ValueError("tokens after EOS")
    for t in tokens:
        if not 0 <= t < vocab_size:
            raise ValueError(f"token id {t} out of range for vocabulary of {vocab_size}")
        if t == PAD:
            raise ValueError("PAD inside a token sequence")
    return tokens


def pad_batch(seqs) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        out[b, :len(s)] = s
    return out


def trunk_forward(params: ModelParams, ctx: np.ndarray, tokens: np.ndarray) -> BatchTape:
    """Run the LSTM over a padded (B, T) batch and keep everything for backward."""
    ctx = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
    tokens = np.atleast_2d(tokens)
    if ctx.shape[1] != params.d_ctx:
        raise ValueError(f"context has dimension {ctx.shape[1]}, W0 expects {params.d_ctx}")
    if ctx.shape[0] != tokens.shape[0]:
        raise ValueError("context / token batch sizes differ")
    if tokens.max() >= params.vocab_size or tokens.min() < 0:
        raise ValueError(f"token id out of range for vocabulary of {params.vocab_size}")
    B, T = tokens.shape
    n = params.n
    Wx, Wh = params.lstm.stacked()
    h = np.zeros((B, n))
    c = np.zeros((B, n))
    records = []
    rec = _cell(Wx, Wh, ctx @ params.W0.T, h, c)
    records.append(rec)
    H = np.empty((T - 1, B, n))
    for t in range(1, T):
        rec = _cell(Wx, Wh, params.embedding[tokens[:, t - 1]], rec.h, rec.c)
        records.append(rec)
        H[t - 1] = rec.h
    mask = tokens[:, 1:] != PAD
    return BatchTape(ctx, tokens, records, H, mask.T, n, params.vocab_size)


def trunk_backward(params: ModelParams, tape: BatchTape, dH: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of embedding, W0 and the LSTM matrices given dL/dH (T-1, B, n)."""
    if tape.n != params.n or tape.vocab_size != params.vocab_size:
        raise ValueError("tape does not match these parameters")
    if dH.shape != tape.H.shape:
        raise ValueError(f"dH has shape {dH.shape}, tape expects {tape.H.shape}")
    n = params.n
    Wx, Wh = params.lstm.stacked()
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    dE = np.zeros_like(params.embedding)
    dW0 = np.zeros_like(params.W0)
    B = tape.tokens.shape[0]
    dh_next = np.zeros((B, n))
    dc_next = np.zeros((B, n))
    dz = np.empty((B, 4 * n))
    for t in range(len(tape.records) - 1, -1, -1):
        r = tape.records[t]
        dh = dh_next + dH[t - 1] if t >= 1 else dh_next
        dc = dc_next + dh * r.o * (1.0 - r.tanh_c * r.tanh_c)
        dz[:, :n] = dc * r.g * r.i * (1.0 - r.i)
        dz[:, n:2 * n] = dc * r.c_prev * r.f * (1.0 - r.f)
        dz[:, 2 * n:3 * n] = dh * r.tanh_c * r.o * (1.0 - r.o)
        dz[:, 3 * n:] = dc * r.i * (1.0 - r.g * r.g)
        dc_next = dc * r.f
        dWx += dz.T @ r.u
        dWh += dz.T @ r.h_prev
        du = dz @ Wx
        dh_next = dz @ Wh
        if t == 0:
            dW0 += du.T @ tape.ctx
        else:
            np.add.at(dE, tape.tokens[:, t - 1], du)
    grads = {"embedding": dE, "W0": dW0}
    for k, gate in enumerate(GATES):
        grads[f"W_{gate}x"] = dWx[k * n:(k + 1) * n].copy()
        grads[f"W_{gate}h"] = dWh[k * n:(k + 1) * n].copy()
    return grads


def forward(params: ModelParams, ctx, tokens, tag: DomainTag = DomainTag.TARGET):
    """Per-step logits for one example, (len(tokens)-1, |V|), plus the tape."""
    tokens = check_tokens(tokens, params.vocab_size)
    tape = trunk_forward(params, np.asarray(ctx, dtype=np.float64)[None, :], np.array([tokens]))
    tape.tag = DomainTag(tag)
    W = eval_weight(params.head, tape.tag)
    return tape.H[:, 0, :] @ W.T, tape


def backward(params: ModelParams, tape: BatchTape, dlogits) -> dict[str, np.ndarray]:
    """Gradients of every parameter given dL/dlogits from ``forward``.

    For an augmented head the logits come from composed weights, so the
    general block and the tagged domain block receive the same gradient and
    the other domain block receives zero.
    """
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if tape.H.shape[1] != 1 or dlogits.shape != (tape.H.shape[0], params.vocab_size):
        raise ValueError("dlogits does not match the tape")
    tag = tape.tag
    H = tape.H[:, 0, :]
    W = eval_weight(params.head, tag)
    dW = dlogits.T @ H
    grads = trunk_backward(params, tape, (dlogits @ W)[:, None, :])
    head = params.head
    for key in head.mats:
        grads["head." + key] = np.zeros_like(head.mats[key])
    if head.variant == AUGMENTED:
        grads["head.theta_g"] = dW
        grads["head.theta_s" if tag is DomainTag.SOURCE else "head.theta_t"] = dW.copy()
    elif head.variant == "dual":
        grads["head.W_s" if tag is DomainTag.SOURCE else "head.W_t"] = dW
    else:
        grads["head.W"] = dW
    return grads
