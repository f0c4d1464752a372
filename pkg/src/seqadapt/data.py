"""Synthetic two-domain caption corpora and every on-disk format.

Files written here:

* ``vocab.txt`` -- header line, then one non-reserved token per line in id order.
* ``<domain>_<split>.jsonl`` -- a header object, then one ``{"ctx": [...],
  "tokens": [...]}`` object per example (tokens are words without BOS/EOS).
* checkpoints -- a JSON envelope with parameters hex-encoded as little-endian
  float64 so round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .heads import DomainTag
from .mathcore import Rng
from .model import ModelParams
from .vocab import BOS, EOS, RESERVED, UNK, Vocab

FORMAT_VERSION = 1
SPLITS = ("train", "dev", "test")


class DataFormatError(ValueError):
    """Malformed or incompatible file contents."""


class VocabMismatchError(DataFormatError):
    pass


@dataclass(eq=False)
class Example:
    ctx: np.ndarray
    tokens: tuple[int, ...]

    def __post_init__(self):
        self.ctx = np.asarray(self.ctx, dtype=np.float64)
        self.tokens = tuple(int(t) for t in self.tokens)
        if len(self.tokens) < 2:
            raise ValueError("an example needs at least BOS and EOS")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Example)
            and self.tokens == other.tokens
            and self.ctx.shape == other.ctx.shape
            and self.ctx.tobytes() == other.ctx.tobytes()
        )

    def key(self) -> tuple:
        return (self.tokens, self.ctx.tobytes())


@dataclass
class DomainDataset:
    domain: DomainTag
    vocab: Vocab
    train: list[Example] = field(default_factory=list)
    dev: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def split(self, name: str) -> list[Example]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def with_train(self, train: list[Example]) -> "DomainDataset":
        return dataclasses.replace(self, train=list(train))


@dataclass
class SynthSpec:
    shared_vocab: int = 60
    source_exclusive: int = 30
    target_exclusive: int = 30
    source_train: int = 5000
    source_dev: int = 250
    source_test: int = 250
    target_train: int = 300
    target_dev: int = 250
    target_test: int = 250
    min_len: int = 4
    max_len: int = 10
    d_ctx: int = 16
    n_topics: int = 8
    # 0 gives both domains the same topic prior
    prior_shift: float = 1.0
    exclusive_rate: float = 0.15
    bigram_bias: float = 0.5
    ctx_noise: float = 0.1
    seed: int = 0

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
        if self.shared_vocab + min(self.source_exclusive, self.target_exclusive) == 0:
            raise ValueError("each domain needs at least one word")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if self.n_topics < 1 or self.d_ctx < 1:
            raise ValueError("n_topics and d_ctx must be >= 1")
        for name in ("exclusive_rate", "bigram_bias"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthSpec":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise ValueError(f"unknown synth key {k!r}")
            kwargs[k] = float(v) if known[k].type in ("float", float) else int(v)
        return cls(**kwargs)


def _zipf_weights(rng: Rng, size: int, exponent: float = 1.1) -> np.ndarray:
    order = rng.permutation(size)
    w = np.empty(size)
    for rank, idx in enumerate(order):
        w[idx] = 1.0 / (rank + 1) ** exponent
    return w / w.sum()


def synth_generate(spec: SynthSpec) -> tuple[DomainDataset, DomainDataset]:
    """Draw source and target corpora from a seeded topic-mixture process.

    Every example has a main and a secondary topic; its context vector is a
    fixed random projection of that mixture plus Gaussian noise. Words come
    from the topic's distribution over the shared block or, with probability
    ``exclusive_rate``, over the domain's own block; with probability
    ``bigram_bias`` a word is instead the fixed successor of the previous one.
    """
    spec.validate()
    world = Rng(spec.seed).derive("world")
    shared = [f"w{i:03d}" for i in range(spec.shared_vocab)]
    excl = {
        DomainTag.SOURCE: [f"s{i:03d}" for i in range(spec.source_exclusive)],
        DomainTag.TARGET: [f"t{i:03d}" for i in range(spec.target_exclusive)],
    }
    vocab = Vocab(shared + excl[DomainTag.SOURCE] + excl[DomainTag.TARGET])
    K = spec.n_topics

    shared_ids = np.array([vocab.id(w) for w in shared], dtype=np.int64)
    topic_shared = [np.cumsum(_zipf_weights(world, len(shared))) for _ in range(K)] if shared else []
    projection = world.normal(spec.d_ctx * K).reshape(spec.d_ctx, K) / math.sqrt(K)
    base_prior = np.array([0.5 + world.random() for _ in range(K)])
    tilt = world.normal(K) * 1.5
    # shared words follow the same successor in both domains
    shared_successor = {int(w): int(shared_ids[world.randbelow(len(shared_ids))]) for w in shared_ids}

    domains = {}
    for tag in (DomainTag.SOURCE, DomainTag.TARGET):
        drng = world.derive(f"domain:{tag.value}")
        own_ids = np.array([vocab.id(w) for w in excl[tag]], dtype=np.int64)
        topic_own = [np.cumsum(_zipf_weights(drng, len(own_ids))) for _ in range(K)] if len(own_ids) else []
        domain_ids = np.concatenate([shared_ids, own_ids])
        successor = dict(shared_successor)
        for w in own_ids:
            successor[int(w)] = int(domain_ids[drng.randbelow(len(domain_ids))])
        sign = 1.0 if tag is DomainTag.TARGET else 0.0
        prior = base_prior * np.exp(sign * spec.prior_shift * tilt)
        prior_cdf = np.cumsum(prior / prior.sum())
        p_own = spec.exclusive_rate if len(own_ids) else 0.0
        if not len(shared_ids):
            p_own = 1.0

        def sample_example(rng: Rng) -> Example:
            k1 = rng.from_cdf(prior_cdf)
            k2 = rng.from_cdf(prior_cdf)
            mix = np.zeros(K)
            mix[k1] += 0.75
            mix[k2] += 0.25
            ctx = projection @ mix + spec.ctx_noise * rng.normal(spec.d_ctx)
            length = spec.min_len + rng.randbelow(spec.max_len - spec.min_len + 1)
            words = []
            for j in range(length):
                if j > 0 and rng.random() < spec.bigram_bias:
                    words.append(successor[words[-1]])
                    continue
                k = k1 if rng.random() < 0.75 else k2
                if rng.random() < p_own:
                    words.append(int(own_ids[rng.from_cdf(topic_own[k])]))
                else:
                    words.append(int(shared_ids[rng.from_cdf(topic_shared[k])]))
            return Example(ctx, (BOS, *words, EOS))

        counts = {
            "train": getattr(spec, f"{tag.value}_train"),
            "dev": getattr(spec, f"{tag.value}_dev"),
            "test": getattr(spec, f"{tag.value}_test"),
        }
        ds = DomainDataset(tag, vocab)
        for split in SPLITS:
            srng = Rng(spec.seed).derive(f"{tag.value}:{split}")
            ds.split(split).extend(sample_example(srng) for _ in range(counts[split]))
        domains[tag] = ds
    return domains[DomainTag.SOURCE], domains[DomainTag.TARGET]


def token_counts(examples: list[Example], vocab: Vocab) -> dict[str, int]:
    counts: dict[str, int] = {}
    for ex in examples:
        for t in ex.tokens:
            if t >= len(RESERVED):
                w = vocab.tokens[t]
                counts[w] = counts.get(w, 0) + 1
    return counts


def top_tokens(examples: list[Example], vocab: Vocab, k: int = 20) -> list[str]:
    counts = token_counts(examples, vocab)
    return [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


# ---- files -------------------------------------------------------------------

VOCAB_HEADER = f"#seqadapt-vocab format_version={FORMAT_VERSION} reserved=" + ",".join(RESERVED)


def save_vocab(vocab: Vocab, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(VOCAB_HEADER + "\n")
        for w in vocab.words():
            fh.write(w + "\n")


def load_vocab(path: str) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith("#seqadapt-vocab"):
        raise DataFormatError(f"{path}:1: missing vocab header")
    fields = dict(part.split("=", 1) for part in lines[0].split()[1:] if "=" in part)
    if fields.get("format_version") != str(FORMAT_VERSION):
        raise DataFormatError(f"{path}:1: unknown format_version {fields.get('format_version')!r}")
    if tuple(fields.get("reserved", "").split(",")) != RESERVED:
        raise DataFormatError(f"{path}:1: reserved symbols differ from {RESERVED}")
    vocab = Vocab()
    for lineno, w in enumerate(lines[1:], start=2):
        if w == "":
            continue
        if w in vocab.index:
            raise DataFormatError(f"{path}:{lineno}: duplicate token {w!r}")
        vocab.add(w)
    return vocab


def write_split(path: str, examples: list[Example], vocab: Vocab, domain: DomainTag, split: str):
    header = {
        "format_version": FORMAT_VERSION,
        "domain": DomainTag(domain).value,
        "split": split,
        "count": len(examples),
        "vocab_hash": vocab.hash(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for ex in examples:
            words = [vocab.tokens[t] for t in ex.tokens[1:-1]]
            fh.write(json.dumps({"ctx": ex.ctx.tolist(), "tokens": words}) + "\n")


def read_split(path: str, vocab: Vocab) -> tuple[dict, list[Example]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    try:
        header = json.loads(lines[0]) if lines else None
    except json.JSONDecodeError:
        header = None
    if not isinstance(header, dict) or "format_version" not in header:
        raise DataFormatError(f"{path}:1: missing header with format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise DataFormatError(f"{path}:1: unknown format_version {header['format_version']!r}")
    if header.get("vocab_hash") not in (None, vocab.hash()):
        raise VocabMismatchError(f"{path}:1: dataset was written with a different vocabulary")
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            ctx = [float(x) for x in rec["ctx"]]
            words = rec["tokens"]
            if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
                raise TypeError("tokens must be a list of strings")
            if any(w in (RESERVED[0], RESERVED[1], RESERVED[2]) for w in words):
                raise ValueError("reserved marker inside tokens")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
        examples.append(Example(np.array(ctx), vocab.encode(words)))
    if "count" in header and header["count"] != len(examples):
        raise DataFormatError(
            f"{path}:{len(lines) + 1}: expected {header['count']} records, found {len(examples)} (truncated?)"
        )
    return header, examples


def save_dataset(ds: DomainDataset, directory: str):
    os.makedirs(directory, exist_ok=True)
    vocab_path = os.path.join(directory, "vocab.txt")
    save_vocab(ds.vocab, vocab_path)
    for split in SPLITS:
        write_split(os.path.join(directory, f"{ds.domain.value}_{split}.jsonl"), ds.split(split), ds.vocab, ds.domain, split)


def load_dataset(directory: str, domain: DomainTag | str, vocab: Vocab | None = None) -> DomainDataset:
    domain = DomainTag(domain)
    if vocab is None:
        vocab = load_vocab(os.path.join(directory, "vocab.txt"))
    ds = DomainDataset(domain, vocab)
    for split in SPLITS:
        path = os.path.join(directory, f"{domain.value}_{split}.jsonl")
        header, examples = read_split(path, vocab)
        if header.get("domain") != domain.value:
            raise DataFormatError(f"{path}:1: header says domain {header.get('domain')!r}")
        ds.split(split).extend(examples)
    return ds


# ---- checkpoints ---------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "f64le": np.ascontiguousarray(a, dtype="<f8").tobytes().hex()}


def _decode_array(obj: dict) -> np.ndarray:
    raw = bytes.fromhex(obj["f64le"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def save_checkpoint(path: str, params: ModelParams, vocab: Vocab, config: dict | None = None,
                    metrics: dict | None = None, seed: int | None = None):
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "seqadapt-checkpoint",
        "head_variant": params.head.variant,
        "vocab_hash": vocab.hash(),
        "vocab_size": len(vocab),
        "vocab": vocab.words(),
        "seed": seed,
        "config": config or {},
        "metrics": metrics or {},
        "params": {k: _encode_array(v) for k, v in params.named().items()},
    }
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str, vocab: Vocab | None = None) -> tuple[ModelParams, dict]:
    """Returns (params, provenance). Refuses a checkpoint built on another vocab."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("kind") != "seqadapt-checkpoint":
        raise DataFormatError(f"{path}: not a checkpoint")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unknown format_version {doc.get('format_version')!r}")
    if vocab is not None and doc["vocab_hash"] != vocab.hash():
        raise VocabMismatchError(f"{path}: checkpoint vocab {doc['vocab_hash']} != data vocab {vocab.hash()}")
    arrays = {k: _decode_array(v) for k, v in doc["params"].items()}
    params = ModelParams.from_named(arrays, doc["head_variant"])
    meta = {k: v for k, v in doc.items() if k != "params"}
    return params, meta


# ---- multiple-choice questions --------------------------------------------------

@dataclass
class Question:
    ctx: np.ndarray
    choices: list[tuple[int, ...]]
    answer: int


def synth_questions(examples: list[Example], n_questions: int, n_choices: int, rng: Rng) -> list[Question]:
    """Questions whose correct choice is an example's own caption.

    Distractors are captions of other examples with the same length, so an
    unnormalized sentence score gains nothing from length alone. Examples
    whose length has too few partners are skipped.
    """
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_len.setdefault(len(ex.tokens), []).append(i)
    usable = [i for i, ex in enumerate(examples) if len(by_len[len(ex.tokens)]) >= n_choices]
    if not usable:
        raise ValueError("no caption length has enough examples for length-matched choices")
    questions = []
    for _ in range(n_questions):
        i = usable[rng.randbelow(len(usable))]
        pool = [j for j in by_len[len(examples[i].tokens)] if examples[j].tokens != examples[i].tokens]
        picks: list[tuple[int, ...]] = []
        for j in (pool[k] for k in rng.permutation(len(pool))):
            if examples[j].tokens not in picks:
                picks.append(examples[j].tokens)
            if len(picks) == n_choices - 1:
                break
        if len(picks) < n_choices - 1:
            continue
        answer = rng.randbelow(n_choices)
        choices = picks[:answer] + [examples[i].tokens] + picks[answer:]
        questions.append(Question(examples[i].ctx, choices, answer))
    return questions


def write_questions(path: str, questions: list[Question], vocab: Vocab):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION, "kind": "questions", "count": len(questions),
                             "vocab_hash": vocab.hash()}) + "\n")
        for q in questions:
            fh.write(json.dumps({
                "ctx": q.ctx.tolist(),
                "choices": [vocab.decode(c) for c in q.choices],
                "answer": q.answer,
            }) + "\n")


def read_questions(path: str, vocab: Vocab) -> list[Question]:
    """Records are numbered from 1 in error messages; the header is not a record."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    start = 0
    if lines:
        try:
            first = json.loads(lines[0])
        except json.JSONDecodeError:
            first = None
        if isinstance(first, dict) and "format_version" in first:
            if first["format_version"] != FORMAT_VERSION:
                raise DataFormatError(f"{path}: unknown format_version {first['format_version']!r}")
            start = 1
    out = []
    for rec_no, line in enumerate(lines[start:], start=1):
        try:
            rec = json.loads(line)
            ctx = np.array([float(x) for x in rec["ctx"]])
            choices = rec["choices"]
            if not isinstance(choices, list) or len(choices) < 2:
                raise ValueError("need at least two choices")
            if not all(isinstance(c, list) and all(isinstance(w, str) for w in c) for c in choices):
                raise TypeError("each choice must be a list of words")
            answer = rec.get("answer")
            if answer is not None and (not isinstance(answer, int) or not 0 <= answer < len(choices)):
                raise ValueError(f"answer {answer!r} out of range")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: record {rec_no}: malformed ({exc})") from None
        out.append(Question(ctx, [tuple(vocab.encode(c)) for c in choices], answer))
    return out
