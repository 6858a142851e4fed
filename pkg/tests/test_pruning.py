import numpy as np
import pytest

from prunelens import autodiff as ad
from prunelens import corpus as C
from prunelens import model as M
from prunelens import pruning as P
from prunelens import training as T


def registry_from(arrays: dict[str, np.ndarray]) -> M.ParameterRegistry:
    return M.ParameterRegistry({p: ad.Parameter(a, path=p)
                                for p, a in arrays.items()})


def test_magnitude_prune_sort_oracle():
    reg = registry_from({"encoder.01.fc1": np.array([[0.1, -0.5, 0.3, 0.02, -0.2]])})
    masks = P.full_masks(reg)
    out = P.magnitude_prune(reg, masks, rate=0.4)
    # floor(0.4 * 5) = 2 smallest magnitudes: 0.02 and 0.1
    assert np.array_equal(out["encoder.01.fc1"], [[0.0, 1.0, 1.0, 0.0, 1.0]])


def test_magnitude_prune_zero_count_is_noop():
    reg = registry_from({"encoder.01.fc1": np.arange(1.0, 6.0).reshape(1, 5)})
    masks = P.full_masks(reg)
    out = P.magnitude_prune(reg, masks, rate=0.01)
    assert np.array_equal(out["encoder.01.fc1"], masks["encoder.01.fc1"])


def test_magnitude_prune_rejects_exhausted_masks():
    reg = registry_from({"encoder.01.fc1": np.ones((2, 2))})
    empty = {"encoder.01.fc1": np.zeros((2, 2))}
    with pytest.raises(P.PruningError, match="nothing left"):
        P.magnitude_prune(reg, empty, rate=0.2)
    with pytest.raises(P.PruningError):
        P.magnitude_prune(reg, P.full_masks(reg), rate=1.5)


def test_schedule_identity_over_iterations():
    rng = np.random.default_rng(0)
    n = 1000
    reg = registry_from({"encoder.01.fc1": rng.standard_normal((n // 2, 2))})
    masks = P.full_masks(reg)
    for k in range(1, 8):
        masks = P.magnitude_prune(reg, masks, rate=0.2)
        frac = P.masked_fraction(masks)
        assert abs(frac - (1 - 0.8 ** k)) < k / n


def test_global_threshold_property_brute_force():
    rng = np.random.default_rng(1)
    reg = registry_from({"encoder.01.fc1": rng.standard_normal((4, 6)),
                         "decoder.01.self_attn.Wq": rng.standard_normal((5, 5))})
    masks = P.magnitude_prune(reg, P.full_masks(reg), rate=0.3)
    pruned_mags, kept_mags = [], []
    for p in masks:
        w = np.abs(reg[p].data)
        pruned_mags.extend(w[masks[p] == 0.0].tolist())
        kept_mags.extend(w[masks[p] == 1.0].tolist())
    assert max(pruned_mags) <= min(kept_mags)


def test_mask_monotonicity():
    rng = np.random.default_rng(2)
    reg = registry_from({"encoder.01.fc1": rng.standard_normal((10, 10))})
    masks = P.full_masks(reg)
    for _ in range(5):
        nxt = P.magnitude_prune(reg, masks, rate=0.25)
        for p in masks:
            # once zero, always zero
            assert np.all(nxt[p][masks[p] == 0.0] == 0.0)
        masks = nxt


def test_random_prune_count_parity_and_determinism():
    rng = np.random.default_rng(3)
    reg = registry_from({"encoder.01.fc1": rng.standard_normal((8, 8))})
    start = P.full_masks(reg)
    mag = P.magnitude_prune(reg, start, rate=0.2)
    rnd1 = P.random_prune(reg, start, rate=0.2, seed=42)
    rnd2 = P.random_prune(reg, start, rate=0.2, seed=42)
    assert sum(m.sum() for m in mag.values()) == sum(m.sum() for m in rnd1.values())
    for p in rnd1:
        assert np.array_equal(rnd1[p], rnd2[p])


def test_random_prune_spreads_across_paths():
    rng = np.random.default_rng(4)
    reg = registry_from({"encoder.01.fc1": rng.standard_normal((25, 20)),
                         "encoder.01.fc2": rng.standard_normal((20, 25))})
    start = P.full_masks(reg)
    rates = {p: [] for p in start}
    for seed in range(30):
        pruned = P.random_prune(reg, start, rate=0.2, seed=seed)
        for p, m in pruned.items():
            rates[p].append(1.0 - m.sum() / m.size)
    for p, r in rates.items():
        assert abs(np.mean(r) - 0.2) < 0.03  # Monte Carlo: per-path ~ global rate


def test_sparsity_report_counting_oracle():
    reg = registry_from({"encoder.01.fc1": np.arange(1.0, 11.0).reshape(2, 5),
                         "encoder.01.fc2": np.arange(1.0, 11.0).reshape(5, 2)})
    masks = P.full_masks(reg)
    masks["encoder.01.fc1"].reshape(-1)[:3] = 0.0
    masks["encoder.01.fc2"].reshape(-1)[:1] = 0.0
    report = P.sparsity_report(reg, masks)
    assert report.sparsity("encoder.01.fc1") == pytest.approx(0.3)
    assert report.sparsity("encoder.01.fc2") == pytest.approx(0.1)
    assert report.group_sparsity("encoder", 1, "fc") == pytest.approx(0.2)
    assert report.overall_excl_emb == pytest.approx(0.2)


def test_sparsity_report_all_ones_and_embeddings():
    config = M.ModelConfig(num_layers=1, model_dim=4, num_heads=1, ffn_dim=8,
                           src_vocab=10, tgt_vocab=10)
    reg = M.ParameterRegistry.build(config, seed=0)
    report = P.sparsity_report(reg, P.full_masks(reg))
    assert report.overall_incl_emb == 0.0
    assert report.overall_excl_emb == 0.0
    assert report.sparsity("embedding.src") == 0.0
    masks = P.magnitude_prune(reg, P.full_masks(reg), rate=0.5)
    report = P.sparsity_report(reg, masks)
    assert report.sparsity("embedding.src") == 0.0  # never pruned
    assert report.sparsity("output_proj") == 0.0
    assert report.overall_incl_emb < report.overall_excl_emb


def test_sparsity_csv_and_json(tmp_path):
    config = M.ModelConfig(num_layers=1, model_dim=4, num_heads=1, ffn_dim=8,
                           src_vocab=10, tgt_vocab=10)
    reg = M.ParameterRegistry.build(config, seed=0)
    masks = P.magnitude_prune(reg, P.full_masks(reg), rate=0.25)
    report = P.sparsity_report(reg, masks)
    out = tmp_path / "sparsity.csv"
    P.write_sparsity_csv(report, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "path,kept,total,sparsity"
    assert len(lines) == len(reg) + 1
    agg = P.sparsity_aggregate_json(report)
    assert 0.0 <= agg["overall_excl_emb"] <= 1.0
    for g in agg["groups"]:
        assert g["kept"] <= g["total"]


# -- the IMP loop -------------------------------------------------------------

@pytest.fixture(scope="module")
def imp_setup():
    grammar = C.SyntheticGrammar(vocab_size=30, max_depth=2)
    corpus = C.generate_corpus(seed=21, n_sentences=50, grammar=grammar)
    inventory = C.TokenInventory(grammar, rare_threshold=20)
    config = M.ModelConfig(num_layers=1, model_dim=8, num_heads=2, ffn_dim=16,
                           src_vocab=len(inventory.src_tokens),
                           tgt_vocab=len(inventory.tgt_tokens), max_len=64)
    recipe = T.TrainRecipe(epochs=2, rewind_epoch=1, batch_size=8, seed=0,
                           warmup_steps=10)
    return config, corpus, inventory, recipe


@pytest.mark.parametrize("mode", ["lr_rewind", "weight_rewind"])
def test_imp_run_family_schedule(imp_setup, mode):
    config, corpus, inventory, recipe = imp_setup
    family = P.imp_run(config, corpus, inventory, recipe, k_max=2, mode=mode)
    assert family.iterations() == [0, 1, 2]
    n = M.count_params(M.ParameterRegistry.build(config, seed=0), "non_embedding")
    for entry in family.entries:
        expected = 1 - 0.8 ** entry.k
        assert abs(entry.sparsity.overall_excl_emb - expected) <= max(entry.k, 1) / n
        assert 0.0 <= entry.bleu <= 100.0
        assert entry.checkpoint.masks is not None
    # monotone masks across iterations
    for prev, nxt in zip(family.entries, family.entries[1:]):
        for p in prev.masks:
            assert np.all(nxt.masks[p][prev.masks[p] == 0.0] == 0.0)


def test_imp_run_random_pruner_counts(imp_setup):
    config, corpus, inventory, recipe = imp_setup
    family = P.imp_run(config, corpus, inventory, recipe, k_max=1,
                       pruner="random")
    entry = family.entries[1]
    n = M.count_params(M.ParameterRegistry.build(config, seed=0), "non_embedding")
    assert abs(entry.sparsity.overall_excl_emb - 0.2) <= 1 / n


def test_imp_run_validates_arguments(imp_setup):
    config, corpus, inventory, recipe = imp_setup
    with pytest.raises(P.PruningError):
        P.imp_run(config, corpus, inventory, recipe, k_max=0)
    with pytest.raises(P.PruningError):
        P.imp_run(config, corpus, inventory, recipe, k_max=1, mode="nope")
    bad = T.TrainRecipe(epochs=2, rewind_epoch=2, batch_size=8, seed=0)
    with pytest.raises(P.PruningError, match="rewind"):
        P.imp_run(config, corpus, inventory, bad, k_max=1)
