import numpy as np
import pytest

from seqadapt.data import DomainDataset, Example, SynthSpec, synth_generate
from seqadapt.heads import AUGMENTED, DUAL, SINGLE, DomainTag
from seqadapt.mathcore import Rng
from seqadapt.model import init_params
from seqadapt.vocab import BOS, EOS, Vocab

VARIANTS = (SINGLE, DUAL, AUGMENTED)


def random_params(V, n, d_ctx, variant=SINGLE, seed=0, scale=0.5):
    return init_params(V, n, d_ctx, variant, Rng(seed), scale)


def random_tokens(rng: np.random.Generator, V, length):
    """BOS + (length - 2) content ids in [4, V) + EOS."""
    body = rng.integers(4, V, size=length - 2).tolist()
    return [BOS] + body + [EOS]


def toy_dataset(domain, sentences, d_ctx=3, seed=0, dev=None):
    """DomainDataset from word lists; ctx is a fixed random vector per sentence."""
    words = sorted({w for s in sentences for w in s})
    vocab = Vocab(words)
    rng = np.random.default_rng(seed)
    exs = [Example(rng.normal(size=d_ctx), tuple(vocab.encode(s))) for s in sentences]
    return DomainDataset(DomainTag(domain), vocab, exs, list(dev if dev is not None else exs), list(exs))


@pytest.fixture(scope="session")
def tiny_pair():
    spec = SynthSpec(shared_vocab=12, source_exclusive=6, target_exclusive=6, source_train=120, source_dev=20,
                     source_test=20, target_train=40, target_dev=20, target_test=20, min_len=3, max_len=6,
                     d_ctx=4, n_topics=3, seed=7)
    return synth_generate(spec)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
