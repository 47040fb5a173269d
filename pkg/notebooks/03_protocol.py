"""
The retrieval protocol
======================

Twelve query -> gallery settings over four sources, one query per camera,
the whole gallery source as gallery, ties broken by record id.
"""

import numpy as np

from uniprompt import evaluator as E
from uniprompt import synthdata as S
from uniprompt.encoders import EncoderConfig
from uniprompt.prompts import PromptConfig
from uniprompt.trainer import UniPromptModel

# AP on a ranked relevance list, then CMC
print("AP [1,0,1] =", E.average_precision([1, 0, 1], 2))
print("CMC@2 [0,0,1] =", E.cmc_at([0, 0, 1], 2), " CMC@3 =", E.cmc_at([0, 0, 1], 3))

# the three categories hold 2, 4 and 6 settings
for cat in E.CATEGORIES:
    names = [s.name for s in E.ALL_SETTINGS if E.classify_setting(s) == cat]
    print(f"{cat:27s} {len(names)}  {', '.join(names)}")

# synthetic data with source offsets, evaluated with untrained encoders
_, test, pool = S.generate(S.SynthConfig(n_identities=30, d_feat=32, seed=3))
model = UniPromptModel(EncoderConfig(d_feat=32), PromptConfig(n_identities=30))
s = E.Setting.parse("U_T->G_R")
q, g = E.build_split(test, s, np.random.default_rng(0))
print(f"{s}: {len(q)} queries, {len(g)} gallery records")

plain = E.evaluate(model, test, s, n_trials=10, rng=np.random.default_rng(0))
padded = E.evaluate(model, test, s, n_trials=10, distractor_fraction=0.1,
                    rng=np.random.default_rng(0), distractor_pool=pool)
print(f"mAP {plain.mAP:.3f} without distractors, {padded.mAP:.3f} with {padded.n_distractors}")

# every setting, then the table with both averaging conventions
entries = [E.evaluate(model, test, st, n_trials=3, rng=np.random.default_rng(k))
           for k, st in enumerate(E.ALL_SETTINGS)]
print(E.format_table(E.summarize(entries)))
