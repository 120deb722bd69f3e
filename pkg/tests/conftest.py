import numpy as np
import pytest

from fedrecsim.data import SynthSpec, synth_generate
from fedrecsim.model import AttnRec, ModelConfig

TINY_SPEC = SynthSpec(
    n_users=6, n_news=12, n_topics=2, title_len=3, history_len=(1, 3),
    impressions_per_user=(2, 3), candidates_per_impression=5,
    tokens_per_topic=4, common_tokens=2,
)


def tiny_setup(seed=0, dim=4, negatives=4):
    corpus = synth_generate(TINY_SPEC, seed)
    model = AttnRec(ModelConfig(vocab_size=corpus.vocab_size, embed_dim=dim, negatives=negatives))
    return corpus, model


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(len(x)):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    # the floor keeps finite-difference roundoff on near-zero entries from dominating
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def tiny():
    return tiny_setup()


@pytest.fixture(scope="session")
def desk_corpus():
    return synth_generate(SynthSpec(), 0)
