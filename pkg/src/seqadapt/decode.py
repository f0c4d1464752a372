"""Beam-search generation, sentence scoring, answer selection, BLEU, perplexity.

Scores are unnormalized sums of log-probabilities everywhere, so shorter
sentences are favoured when everything else is equal.
"""

from __future__ import annotations

import collections
import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .heads import DomainTag, eval_weight
from .mathcore import log_softmax
from .model import ModelParams, _cell, check_tokens, forward
from .train import corpus_nll
from .vocab import BOS, EOS, PAD


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool


def _start(params: ModelParams, ctx):
    ctx = np.asarray(ctx, dtype=np.float64)
    if ctx.shape != (params.d_ctx,):
        raise ValueError(f"context has shape {ctx.shape}, expected ({params.d_ctx},)")
    Wx, Wh = params.lstm.stacked()
    zero = np.zeros((1, params.n))
    rec = _cell(Wx, Wh, (params.W0 @ ctx)[None, :], zero, zero)
    return Wx, Wh, rec.h, rec.c


def beam_search(params: ModelParams, ctx, width: int = 5, max_len: int = 30,
                tag: DomainTag = DomainTag.TARGET) -> Hypothesis:
    """Best EOS-terminated sequence by cumulative log-probability.

    ``max_len`` counts generated tokens including EOS. PAD and BOS are never
    proposed. Candidates are ranked by score, then by the rank of their
    parent, then by token id, so ties resolve deterministically. If nothing
    finishes within ``max_len`` the best unfinished hypothesis is returned.
    """
    if width < 1 or max_len < 1:
        raise ValueError("width and max_len must be >= 1")
    W = eval_weight(params.head, tag)
    Wx, Wh, h, c = _start(params, ctx)
    allowed = np.array([t for t in range(params.vocab_size) if t not in (PAD, BOS)])
    live_tokens = [(BOS,)]
    live_scores = np.zeros(1)
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        rec = _cell(Wx, Wh, params.embedding[[seq[-1] for seq in live_tokens]], h, c)
        logp = log_softmax(rec.h @ W.T)[:, allowed]
        cand = (live_scores[:, None] + logp).ravel()
        parent = np.repeat(np.arange(len(live_tokens)), len(allowed))
        token = np.tile(allowed, len(live_tokens))
        order = np.lexsort((token, parent, -cand))[:width]
        keep = []
        for k in order:
            seq = live_tokens[parent[k]] + (int(token[k]),)
            if token[k] == EOS:
                finished.append(Hypothesis(seq, float(cand[k]), True))
            else:
                keep.append(k)
        if not keep:
            break
        live_tokens = [live_tokens[parent[k]] + (int(token[k]),) for k in keep]
        live_scores = cand[keep]
        rows = parent[keep]
        h, c = rec.h[rows], rec.c[rows]
        # scores only fall as sequences grow, so a finished hypothesis that
        # beats every live one cannot be overtaken
        if finished and max(f.score for f in finished) >= live_scores.max():
            break
    if finished:
        return _best(finished)
    return Hypothesis(live_tokens[0], float(live_scores[0]), False)


def _best(hyps: list[Hypothesis]) -> Hypothesis:
    return min(hyps, key=lambda hyp: (-hyp.score, hyp.tokens))


def greedy_decode(params: ModelParams, ctx, max_len: int = 30, tag: DomainTag = DomainTag.TARGET) -> Hypothesis:
    W = eval_weight(params.head, tag)
    Wx, Wh, h, c = _start(params, ctx)
    tokens = [BOS]
    score = 0.0
    for _ in range(max_len):
        rec = _cell(Wx, Wh, params.embedding[[tokens[-1]]], h, c)
        h, c = rec.h, rec.c
        logp = log_softmax(rec.h[0] @ W.T)
        logp[[PAD, BOS]] = -np.inf
        nxt = int(np.argmax(logp))
        score += float(logp[nxt])
        tokens.append(nxt)
        if nxt == EOS:
            return Hypothesis(tuple(tokens), score, True)
    return Hypothesis(tuple(tokens), score, False)


def score_sentence(params: ModelParams, ctx, tokens, tag: DomainTag = DomainTag.TARGET) -> float:
    """log p(tokens | ctx) summed over every predicted position, EOS included."""
    tokens = check_tokens(tokens, params.vocab_size)
    logits, _ = forward(params, ctx, tokens, tag)
    logp = log_softmax(logits)
    return float(np.sum(logp[np.arange(len(tokens) - 1), tokens[1:]]))


def select_answer(params: ModelParams, ctx, choices: Sequence[Sequence[int]], tag: DomainTag = DomainTag.TARGET) -> int:
    if len(choices) == 0:
        raise ValueError("no choices given")
    if len(choices) < 2:
        raise ValueError("need at least two choices")
    scores = [score_sentence(params, ctx, c, tag) for c in choices]
    return int(np.argmax(scores))


# ---- BLEU ------------------------------------------------------------------------

def _ngrams(seq: Sequence, n: int) -> collections.Counter:
    return collections.Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n with clipped counts and a brevity penalty.

    Each candidate has a list of references. The effective reference length
    is the closest reference length (shorter wins a tie). No smoothing: a zero
    precision at any order makes that and every higher BLEU zero.
    """
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if len(refs) == 0:
            raise ValueError("a candidate has no references")
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            max_ref: collections.Counter = collections.Counter()
            for r in refs:
                max_ref |= _ngrams(list(r), n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matches[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


# ---- corpus evaluation ---------------------------------------------------------------

def perplexity(params: ModelParams, examples, tag: DomainTag = DomainTag.TARGET) -> float:
    if len(examples) == 0:
        raise ValueError("empty dataset")
    total, count = corpus_nll(params, examples, tag)
    return math.exp(total / count)


EVAL_FIELDS = ("bleu1", "bleu2", "bleu3", "bleu4", "perplexity", "sentences", "tokens", "hyp_words", "ref_words")


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    perplexity: float
    sentences: int
    tokens: int
    hyp_words: int
    ref_words: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([_fmt(getattr(self, k)) for k in EVAL_FIELDS])
        return buf.getvalue()

    @staticmethod
    def csv_header() -> str:
        return ",".join(EVAL_FIELDS) + "\n"


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def generate_all(params: ModelParams, contexts, width: int = 5, max_len: int = 30,
                 tag: DomainTag = DomainTag.TARGET) -> list[Hypothesis]:
    return [beam_search(params, ctx, width, max_len, tag) for ctx in contexts]


def strip_markers(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t not in (BOS, EOS, PAD)]


def evaluate(params: ModelParams, examples, tag: DomainTag = DomainTag.TARGET, width: int = 5,
             max_len: int = 30) -> EvalReport:
    """BLEU of beam-search captions against each example's caption, plus perplexity."""
    if len(examples) == 0:
        raise ValueError("empty dataset")
    hyps = generate_all(params, [ex.ctx for ex in examples], width, max_len, tag)
    cands = [strip_markers(h.tokens) for h in hyps]
    refs = [[strip_markers(ex.tokens)] for ex in examples]
    b = bleu(cands, refs)
    total, count = corpus_nll(params, examples, tag)
    return EvalReport(
        *b,
        perplexity=math.exp(total / count),
        sentences=len(examples),
        tokens=count,
        hyp_words=sum(len(c) for c in cands),
        ref_words=sum(len(r[0]) for r in refs),
    )
