"""Similarity metrics on two sibling models: CKA, NeuronSim, SVD, attention."""

import numpy as np

from prunelens import corpus as C
from prunelens import dumps as D
from prunelens import model as M
from prunelens import similarity as S
from prunelens import training as T

grammar = C.SyntheticGrammar(vocab_size=120, max_depth=2)
corpus = C.generate_corpus(seed=2, n_sentences=400, grammar=grammar)
inventory = C.TokenInventory(grammar, rare_threshold=60)
config = M.ModelConfig(num_layers=2, model_dim=32, num_heads=2, ffn_dim=64,
                       src_vocab=len(inventory.src_tokens),
                       tgt_vocab=len(inventory.tgt_tokens), max_len=96)

dumps = {}
for seed in (0, 1):
    registry = M.ParameterRegistry.build(config, seed=seed)
    recipe = T.TrainRecipe(epochs=4, rewind_epoch=0, batch_size=32, seed=seed,
                           warmup_steps=60)
    T.train(config, registry, None, corpus, inventory, recipe)
    acts, attns = D.collect_dumps(config, registry, None, corpus, inventory,
                                  "valid", model_id=f"seed{seed}")
    dumps[seed] = (acts, attns)

a_acts, a_attns = dumps[0]
b_acts, b_attns = dumps[1]

print("LayerSim (linear CKA) between the two models' encoder layers:")
heat = S.layer_sim_heatmap({l: a_acts[("encoder", l)].matrix() for l in (1, 2)},
                           {l: b_acts[("encoder", l)].matrix() for l in (1, 2)},
                           "seed0", "seed1")
print(np.round(heat.values, 3))

res = S.neuron_sim(a_acts[("encoder", 2)].matrix(),
                   b_acts[("encoder", 2)].matrix())
print(f"\nNeuronSim(enc-2): score {res.score:.3f}, argmax match rate "
      f"{res.match_rate:.3f}, dead neurons {res.dead_a}/{res.dead_b}")
print("self-similarity is exactly 1:",
      S.neuron_sim(a_acts[('encoder', 2)].matrix(),
                   a_acts[('encoder', 2)].matrix()).score)

rep = S.svd_variance(a_acts[("encoder", 2)].values)
print(f"\nSVD of final encoder layer: min-k for 50/80/90% variance = "
      f"{rep.min_k[0.5]}/{rep.min_k[0.8]}/{rep.min_k[0.9]} of {config.model_dim}")

print("\nAttentionSim per attention type (same layer, across models):")
for atype in ("enc_self", "enc_dec", "dec_self"):
    pm_a = a_attns[(atype, 2)].pair_matrix()
    pm_b = b_attns[(atype, 2)].pair_matrix()
    conc = S.attention_concentration(a_attns[(atype, 2)].distributions())
    print(f"  {atype}: CKA {S.attention_sim(pm_a, pm_b):.3f}, "
          f"concentration(>0.95) {conc:.3f}")
