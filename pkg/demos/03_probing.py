"""Probe frozen representations of an untrained vs briefly-trained model.

Runs linear probes for one tagging and one structural task on both models'
encoder layers: even this tiny setup shows training moving structure into
the representations.
"""

from prunelens import corpus as C
from prunelens import dumps as D
from prunelens import model as M
from prunelens import probing as PR
from prunelens import training as T

grammar = C.SyntheticGrammar(vocab_size=120, max_depth=2)
corpus = C.generate_corpus(seed=1, n_sentences=500, grammar=grammar)
inventory = C.TokenInventory(grammar, rare_threshold=60)
config = M.ModelConfig(num_layers=2, model_dim=32, num_heads=2, ffn_dim=64,
                       src_vocab=len(inventory.src_tokens),
                       tgt_vocab=len(inventory.tgt_tokens), max_len=96)

sentences = corpus.split("valid")
subs = [inventory.encode_src(s)[1] for s in sentences]
frames = {t: PR.build_task_frame(PR.TASKS[t], sentences, seed=0)
          for t in ("token_tag", "parent_tag")}

report = PR.ProbeReport()
for k, trained_epochs in enumerate((0, 6)):
    registry = M.ParameterRegistry.build(config, seed=1)
    if trained_epochs:
        recipe = T.TrainRecipe(epochs=trained_epochs, rewind_epoch=0,
                               batch_size=32, seed=1, warmup_steps=60)
        T.train(config, registry, None, corpus, inventory, recipe)
    acts, _ = D.collect_dumps(config, registry, None, corpus, inventory,
                              "valid", model_id=f"model{k}")
    for layer in (1, 2):
        dump = acts[("encoder", layer)]
        feats = PR.sentence_token_features(dump.values, dump.sent_table, subs)
        for task_id, frame in frames.items():
            metric = PR.train_probe(
                PR.ProbeSpec(task_id, layer=layer, hidden=config.model_dim),
                PR.assemble_dataset(frame, feats))
            report.add(model=f"{trained_epochs}ep", model_k=k, layer=layer,
                       task=task_id, family="linear", metric=metric)

print(f"{'model':>6} {'layer':>5} {'token_tag':>10} {'parent_tag':>11}")
for model in report.models():
    for layer in (1, 2):
        print(f"{model:>6} {layer:>5} "
              f"{report.metric(model, layer, 'token_tag', 'linear'):>10.3f} "
              f"{report.metric(model, layer, 'parent_tag', 'linear'):>11.3f}")

table = PR.zscore_table(report)
print("\nper-task z-scores over models (best layer):")
for task, zrow in zip(table.tasks, table.z):
    print(f"  {task}: {[round(z, 2) for z in zrow]}")
