import numpy as np
import pytest

from prunelens import autodiff as ad
from prunelens import model as M


def tiny_config(**kw):
    base = dict(num_layers=1, model_dim=4, num_heads=1, ffn_dim=8,
                src_vocab=10, tgt_vocab=10, max_len=16)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture(scope="module")
def setup():
    config = M.ModelConfig(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16,
                           src_vocab=12, tgt_vocab=14, max_len=16)
    registry = M.ParameterRegistry.build(config, seed=3)
    rng = np.random.default_rng(0)
    src = rng.integers(0, 12, size=(3, 6))
    tgt = rng.integers(0, 14, size=(3, 5))
    return config, registry, src, tgt


def test_config_validation():
    with pytest.raises(M.ModelError):
        tiny_config(model_dim=6, num_heads=4)
    with pytest.raises(M.ModelError):
        tiny_config(src_vocab=0)
    with pytest.raises(M.ModelError):
        tiny_config(num_layers=0)


def test_registry_paths_sorted_and_complete(setup):
    config, registry, _, _ = setup
    paths = registry.paths()
    assert paths == sorted(paths)
    assert "embedding.src" in paths and "output_proj" in paths
    assert M.module_path("decoder", 2, "cross_attn.Wo") in paths
    # cross-attention kinds only exist on the decoder
    assert not any(p.startswith("encoder") and "cross_attn" in p for p in paths)


def test_count_params_shape_enumeration_oracle():
    config = tiny_config()
    registry = M.ParameterRegistry.build(config, seed=0)
    d, f, v = 4, 8, 10
    enc = 4 * d * d + d * f + f * d
    dec = 8 * d * d + d * f + f * d
    assert M.count_params(registry, "non_embedding") == enc + dec
    ln = 2 * 2 * d + 3 * 2 * d  # 2 norms per encoder layer, 3 per decoder layer
    total = enc + dec + ln + 2 * v * d + d * v
    assert M.count_params(registry, "all") == total
    assert M.count_params(registry, "all") >= M.count_params(registry, "non_embedding")


def test_all_ones_mask_is_identity(setup):
    config, registry, src, tgt = setup
    masks = {p: np.ones(registry[p].shape) for p in registry.paths()
             if M.is_prunable(p)}
    with ad.no_grad():
        a = M.forward(config, registry, None, src, tgt).logits.data
        b = M.forward(config, registry, masks, src, tgt).logits.data
    assert np.array_equal(a, b)


def test_masked_forward_equals_zeroed_registry(setup):
    config, registry, src, tgt = setup
    rng = np.random.default_rng(5)
    masks = {p: (rng.random(registry[p].shape) > 0.5).astype(float)
             for p in registry.paths() if M.is_prunable(p)}
    zeroed = {}
    for path, p in registry.items():
        data = p.data.copy()
        if path in masks:
            data = data * masks[path]
        zeroed[path] = ad.Parameter(data, path=path)
    zeroed_registry = M.ParameterRegistry(zeroed)
    with ad.no_grad():
        a = M.forward(config, registry, masks, src, tgt).logits.data
        b = M.forward(config, zeroed_registry, None, src, tgt).logits.data
    assert np.array_equal(a, b)


def test_zero_output_proj_gives_uniform_rows(setup):
    config, registry, src, tgt = setup
    masks = {"output_proj": np.zeros(registry["output_proj"].shape)}
    with ad.no_grad():
        res = M.forward(config, registry, masks, src, tgt)
        probs = ad.softmax_rows(res.logits).data
    assert np.allclose(res.logits.data, 0.0)
    assert np.allclose(probs, 1.0 / config.tgt_vocab)


def test_attention_rows_sum_to_one():
    config = tiny_config()
    registry = M.ParameterRegistry.build(config, seed=1)
    src = np.array([[1, 2, 3, 4, 5]])
    tgt = np.array([[1, 2, 3]])
    with ad.no_grad():
        res = M.forward(config, registry, None, src, tgt, capture=True)
    assert set(res.attentions) == {("enc_self", 1), ("enc_dec", 1), ("dec_self", 1)}
    for probs in res.attentions.values():
        assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) < 1e-6


def test_decoder_self_attention_causal(setup):
    config, registry, src, tgt = setup
    with ad.no_grad():
        res = M.forward(config, registry, None, src, tgt, capture=True)
    Tt = tgt.shape[1]
    future = ~np.tril(np.ones((Tt, Tt), dtype=bool))
    for layer in range(1, config.num_layers + 1):
        probs = res.attentions[("dec_self", layer)]
        assert np.all(probs[:, :, future] == 0.0)


def test_capture_reproducible_bitwise(setup):
    config, registry, src, tgt = setup
    with ad.no_grad():
        r1 = M.forward(config, registry, None, src, tgt, capture=True)
        r2 = M.forward(config, registry, None, src, tgt, capture=True)
    assert np.array_equal(r1.logits.data, r2.logits.data)
    for key in r1.activations:
        assert np.array_equal(r1.activations[key], r2.activations[key])
    for key in r1.attentions:
        assert np.array_equal(r1.attentions[key], r2.attentions[key])


def test_forward_rejects_bad_inputs(setup):
    config, registry, src, tgt = setup
    with pytest.raises(M.ModelError):
        M.forward(config, registry, None, np.full_like(src, 99), tgt)
    with pytest.raises(M.ModelError):
        M.forward(config, registry, {"output_proj": np.ones((2, 2))}, src, tgt)


def test_greedy_decode_forced_eos():
    config = tiny_config()
    registry = M.ParameterRegistry.build(config, seed=2)
    eos = 2
    # bias the output projection so EOS dominates every step
    forced = np.zeros(registry["output_proj"].shape)
    forced[:, eos] = 100.0
    registry["output_proj"].data[:] = forced
    out = M.greedy_decode(config, registry, None, np.array([[1, 3, 4]]),
                          bos_id=1, eos_id=eos, max_len=8)
    assert out == [[]]


def test_greedy_decode_length_cap():
    config = tiny_config()
    registry = M.ParameterRegistry.build(config, seed=4)
    # suppress EOS entirely so decoding always hits the cap
    registry["output_proj"].data[:, 2] = -100.0
    out = M.greedy_decode(config, registry, None, np.array([[1, 3, 4], [5, 6, 7]]),
                          bos_id=1, eos_id=2, max_len=3)
    assert all(len(ids) <= 3 for ids in out)
    assert all(len(ids) == 3 for ids in out)
