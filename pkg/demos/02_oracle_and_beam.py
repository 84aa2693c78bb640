"""
Brute force versus sbeam on a toy vocabulary
============================================

With ten single-letter tokens and sequences of at most two tokens the whole
search space fits in memory, so exhaustive enumeration gives the best
achievable cosine for any target. This demo trains a tiny base and corrector on
that space and checks how sbeam compares with the enumeration.

Because the synthetic embedder averages token vectors, "a b" and "b a" share
an embedding, as do "a a" and "a". Targets are therefore drawn from sorted,
repetition-free representatives.
"""
import itertools

import numpy as np

from embinv.corpus import (Document, build_inversion_dataset, documents_to_truncated,
                           generate_hypothesis_dataset)
from embinv.embedders import SyntheticEmbedder, cosine_rows
from embinv.inference import BeamConfig, Models, brute_force_invert, invert_sbeam
from embinv.models import InverterConfig
from embinv.tokens import Vocab
from embinv.training import Hyperparams, train_base, train_corrector

letters = list("abcdefghij")
emb = SyntheticEmbedder(dim=32, seed=0)

canon = letters + [f"{x} {y}" for x, y in itertools.combinations(letters, 2)]
print(f"{len(canon)} canonical texts; full search space has "
      f"{1 + len(letters) + len(letters) ** 2} strings")

docs = [Document(f"c{i}", t) for i, t in enumerate(canon)]
ds = build_inversion_dataset(documents_to_truncated(docs, "whitespace", 2), emb)
kw = dict(vocab=Vocab.build([letters]).tokens, embed_dim=emb.dim, d_enc=32, s=2, n_heads=4,
          enc_layers=1, dec_layers=1, ffn_dim=64, max_tokens=2)
hp = Hyperparams(lr=3e-3, epochs=150, batch_size=32, seed=0)

print("training base model ...")
base = train_base(ds, InverterConfig(role="base", **kw), hp, emb.embed_empty()).model
records = generate_hypothesis_dataset(base, ds, emb)
print("training corrector ...")
corr = train_corrector(records, InverterConfig(role="corrector", **kw), hp).model
models = Models(base, corr)

rows = []
for text in np.random.default_rng(0).choice(canon, size=12, replace=False):
    e = emb.embed([text])[0]
    oracle = brute_force_invert(emb, letters, 2, e)
    oracle_cos = float(cosine_rows(e, emb.embed([oracle.text]))[0])
    trace = invert_sbeam(models, emb, e, BeamConfig(width=4, max_rounds=5))
    rows.append((text, oracle.text, oracle_cos, trace.final.hypothesis.text, trace.final.cosine))

print(f"\n{'target':8} {'oracle':8} {'cos':>7}   {'sbeam':8} {'cos':>7}")
for text, o, oc, s, sc in rows:
    print(f"{text:8} {o:8} {oc:7.4f}   {s:8} {sc:7.4f}")

# sbeam can match the oracle but never beat it
assert all(sc <= oc + 1e-12 for *_, oc, _, sc in rows)
