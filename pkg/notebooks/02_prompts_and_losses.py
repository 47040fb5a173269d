"""
Composing prompts and scoring them
==================================

A prompt is identity tokens, modality tokens, platform tokens and a class
token.  The meta-network turns an image feature into one bias per part.
"""

import math

import numpy as np

from uniprompt import diffcore as dc
from uniprompt import losses as L
from uniprompt import prompts as P
from uniprompt.encoders import EncoderConfig
from uniprompt.trainer import SampleBatch, UniPromptModel

model = UniPromptModel(EncoderConfig(d_feat=16, d_tok=8, d_emb=16),
                       P.PromptConfig(d_tok=8, n_identities=6))
a = np.random.default_rng(1).normal(size=16)

# identity 2 seen as IR (modality 1) from the ground (platform 0)
plain = P.compose_prompt(model.bank, model.venet, 2, 1, 0, a, enhance=False)
boosted = P.compose_prompt(model.bank, model.venet, 2, 1, 0, a, enhance=True)
print("prompt length", plain.tokens.shape[0])
shift = boosted.tokens.data - plain.tokens.data
print("rows of one part share a bias:", np.allclose(shift[0], shift[1]))
print("class token untouched:", not np.any(shift[-1]))

# a batch of six samples from three identities, one per source pairing
batch = SampleBatch(np.arange(6), np.array([0, 0, 1, 1, 4, 4]),
                    np.array([0, 1, 0, 2, 1, 0]), np.array([0, 0, 1, 1, 0, 1]),
                    np.random.default_rng(2).normal(size=(6, 16)))
# T_m and T_p are the same full prompt text; they differ only in which part
# the gradient may flow into, so the modality and platform terms match in value
t_id, t_m, t_p = P.batch_text_embeddings(model.bank, model.venet, model.text_encoder, batch)
V = model.image_encoder.encode(batch.feats)
parts = L.stage2_loss(L.TrainBatch(V, batch.y, T_identity=t_id, T_m=t_m, T_p=t_p))
for name in ("mi2t", "mt2i", "pi2t", "pt2i", "total"):
    print(f"{name:6s} {getattr(parts, name).item():.4f}")

# the modality losses only reach modality tokens: identity tokens get nothing
grads = dc.backward(parts.total)
print("identity-token gradient is zero:", not np.any(grads.get(model.bank.specific, 0.0)))

# a batch where every pair scores the same gives ln 2 for two samples
same = dc.constant(np.array([[1.0, 0.0], [1.0, 0.0]]))
flat = L.stage2_loss(L.TrainBatch(same, np.array([3, 3]), T_m=same, T_p=same))
print("uniform batch:", flat.mi2t.item(), flat.mt2i.item(), "ln 2 =", math.log(2))
