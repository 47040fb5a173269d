import copy

import numpy as np

from uniprompt import prompts as P
from uniprompt import trainer as T
from uniprompt.encoders import EncoderConfig


def small_model(seed=0, d=6, n_ids=4, n_tok=2, jitter=0.3):
    """Tiny model with parameters pushed away from their init (adapter included)."""
    enc = EncoderConfig(d_feat=d, d_tok=d, d_emb=d, seed=seed)
    pc = P.PromptConfig(n_tokens_specific=n_tok, n_tokens_modality=n_tok, n_tokens_platform=n_tok,
                        d_tok=d, n_identities=n_ids, seed=seed)
    model = T.UniPromptModel(enc, pc)
    rng = np.random.default_rng([seed, 99])
    for t in model.parameters().values():
        t.data += rng.normal(0.0, jitter, t.shape)
    return model


def random_batch(rng, d, n_ids, n_classes, per_class):
    y = np.repeat(rng.choice(n_ids, size=n_classes, replace=False), per_class)
    sources = [(0, 0), (1, 0), (0, 1), (2, 1)]
    src = rng.integers(len(sources), size=len(y))
    mod = np.array([sources[s][0] for s in src])
    plat = np.array([sources[s][1] for s in src])
    return T.SampleBatch(np.arange(len(y)), y, mod, plat, rng.normal(size=(len(y), d)))


def snapshot(model):
    return copy.deepcopy(model.bank), copy.deepcopy(model.venet)


# criterion lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []
