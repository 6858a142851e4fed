"""Encoder-decoder transformer over the autodiff engine.

Every trainable weight is addressable by a structured path string
(component.layer.kind, layers zero-padded so lexicographic order is layer
order). Post-norm residual blocks, separate source/target embeddings,
no biases on the projection matrices. Forward passes can capture each
layer block's output representations and every head's attention
distributions for downstream analysis.

Batches may carry right-padding: `src_valid`/`tgt_valid` boolean masks keep
padded positions out of every attention's key set, and padded target
positions are excluded from the loss by the caller. Analysis passes use
exact-length batches and no padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ATTENTION_TYPES = ("enc_self", "enc_dec", "dec_self")

ATTN_KINDS = ("Wq", "Wk", "Wv", "Wo")
PRUNABLE_KINDS = ("self_attn.Wq", "self_attn.Wk", "self_attn.Wv", "self_attn.Wo",
                  "cross_attn.Wq", "cross_attn.Wk", "cross_attn.Wv", "cross_attn.Wo",
                  "fc1", "fc2")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    src_vocab: int = 0
    tgt_vocab: int = 0
    max_len: int = 160
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.num_layers < 1:
            raise ModelError("num_layers must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ModelError("model_dim must be divisible by num_heads")
        if self.src_vocab < 1 or self.tgt_vocab < 1:
            raise ModelError("vocab sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def module_path(component: str, layer: int | None, kind: str) -> str:
    """Canonical path string; layers are 1-based and zero-padded."""
    if layer is None:
        return f"{component}.{kind}" if kind else component
    return f"{component}.{layer:02d}.{kind}"


def layer_kinds(component: str) -> list[str]:
    kinds = ["self_attn.Wq", "self_attn.Wk", "self_attn.Wv", "self_attn.Wo",
             "self_attn.ln_gain", "self_attn.ln_bias"]
    if component == "decoder":
        kinds += ["cross_attn.Wq", "cross_attn.Wk", "cross_attn.Wv", "cross_attn.Wo",
                  "cross_attn.ln_gain", "cross_attn.ln_bias"]
    kinds += ["fc1", "fc2", "ffn.ln_gain", "ffn.ln_bias"]
    return kinds


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Full path -> shape table, the registry's single source of truth."""
    d, f = config.model_dim, config.ffn_dim
    vec_shapes = {"ln_gain": (d,), "ln_bias": (d,)}
    shapes: dict[str, tuple[int, ...]] = {
        "embedding.src": (config.src_vocab, d),
        "embedding.tgt": (config.tgt_vocab, d),
        "output_proj": (d, config.tgt_vocab),
    }
    for component in ("encoder", "decoder"):
        for layer in range(1, config.num_layers + 1):
            for kind in layer_kinds(component):
                leaf = kind.split(".")[-1]
                if leaf in vec_shapes:
                    shape = vec_shapes[leaf]
                elif kind == "fc1":
                    shape = (d, f)
                elif kind == "fc2":
                    shape = (f, d)
                else:
                    shape = (d, d)
                shapes[module_path(component, layer, kind)] = shape
    return dict(sorted(shapes.items()))


def is_prunable(path: str) -> bool:
    """Only the attention and FC weight matrices are ever pruned."""
    return any(path.endswith("." + k) for k in PRUNABLE_KINDS)


def is_embedding(path: str) -> bool:
    return path.startswith("embedding.") or path == "output_proj"


class ParameterRegistry:
    """All trainable weights, iterated in lexicographic path order."""

    def __init__(self, params: dict[str, ad.Parameter]):
        self._params = dict(sorted(params.items()))

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "ParameterRegistry":
        rng = np.random.default_rng(seed)
        params = {}
        for path, shape in parameter_shapes(config).items():
            leaf = path.split(".")[-1]
            if leaf == "ln_gain":
                data = np.ones(shape)
            elif leaf == "ln_bias":
                data = np.zeros(shape)
            elif path.startswith("embedding."):
                data = rng.normal(0.0, config.model_dim ** -0.5, size=shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-limit, limit, size=shape)
            params[path] = ad.Parameter(data, path=path)
        return cls(params)

    def paths(self) -> list[str]:
        return list(self._params.keys())

    def __getitem__(self, path: str) -> ad.Parameter:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()


def count_params(registry: ParameterRegistry, scope: str = "all") -> int:
    """Exact trainable-scalar count.

    scope "all" counts everything; scope "non_embedding" counts the prunable
    universe — the attention/FC weight matrices — excluding the
    vocabulary-sized matrices and the layer-norm vectors, which are never
    pruned and would otherwise skew the sparsity denominators.
    """
    if scope == "all":
        return sum(p.size for p in registry.values())
    if scope == "non_embedding":
        return sum(p.size for path, p in registry.items() if is_prunable(path))
    raise ModelError(f"unknown scope {scope!r}")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(max_len: int, d: int) -> np.ndarray:
    key = (max_len, d)
    if key not in _PE_CACHE:
        pos = np.arange(max_len)[:, None].astype(np.float64)
        i = np.arange(0, d, 2).astype(np.float64)
        angles = pos / np.power(10000.0, i / d)
        pe = np.zeros((max_len, d))
        pe[:, 0::2] = np.sin(angles)
        pe[:, 1::2] = np.cos(angles)
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


@dataclass
class ForwardResult:
    """Logits plus (when captured) per-layer activations and attentions.

    activations: (component, layer) -> (B, T, d) post-block representations.
    attentions:  (attention type, layer) -> (B, H, Tq, Tk) head distributions.
    """

    logits: ad.Tensor
    activations: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    attentions: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)


def _masked(registry, masks, path) -> ad.Tensor:
    p = registry[path]
    if masks is not None and path in masks and masks[path] is not None:
        m = masks[path]
        if m.shape != p.shape:
            raise ModelError(f"mask shape {m.shape} != param shape {p.shape} at {path}")
        return ad.mul(p, ad.tensor(m))
    return p


def _maybe_dropout(t: ad.Tensor, rate: float, rng) -> ad.Tensor:
    if rng is None or rate <= 0.0:
        return t
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return ad.mul(t, ad.tensor(keep))


def _attention(config, registry, masks, prefix, x_q, x_kv, mask, dropout_rng):
    """Multi-head attention block; returns (output, head probs ndarray)."""
    B, Tq, d = x_q.shape
    Tk = x_kv.shape[1]
    H, dh = config.num_heads, config.head_dim

    def heads(x, w_path, T):
        proj = ad.matmul(x, _masked(registry, masks, w_path))
        return ad.swapaxes(ad.reshape(proj, (B, T, H, dh)), 1, 2)

    q = heads(x_q, prefix + ".Wq", Tq)
    k = heads(x_kv, prefix + ".Wk", Tk)
    v = heads(x_kv, prefix + ".Wv", Tk)
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
    probs = ad.softmax_rows(scores, mask=mask)
    ctx = ad.reshape(ad.swapaxes(ad.matmul(probs, v), 1, 2), (B, Tq, d))
    out = ad.matmul(ctx, _masked(registry, masks, prefix + ".Wo"))
    out = _maybe_dropout(out, config.dropout, dropout_rng)
    return out, probs.data


def _ffn(config, registry, masks, component, layer, x, dropout_rng):
    h = ad.relu(ad.matmul(x, _masked(registry, masks,
                                     module_path(component, layer, "fc1"))))
    h = ad.matmul(h, _masked(registry, masks, module_path(component, layer, "fc2")))
    return _maybe_dropout(h, config.dropout, dropout_rng)


def _post_norm(registry, config, component, layer, sublayer, x, delta):
    gain = registry[module_path(component, layer, sublayer + ".ln_gain")]
    bias = registry[module_path(component, layer, sublayer + ".ln_bias")]
    return ad.layer_norm(ad.add(x, delta), gain, bias, eps=config.ln_eps)


def _check_ids(ids, vocab, what, max_len):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ModelError(f"{what} ids must be a (batch, time) array")
    if ids.shape[1] > max_len:
        raise ModelError(f"{what} length {ids.shape[1]} exceeds max_len={max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ModelError(f"{what} token id out of vocabulary")
    return ids


def _key_mask(valid, B, Tk):
    if valid is None:
        return None
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (B, Tk):
        raise ModelError("validity mask shape must be (batch, time)")
    return valid[:, None, None, :]


def _embed(config, registry, masks, table_path, ids, dropout_rng):
    B, T = ids.shape
    d = config.model_dim
    pe = positional_encoding(config.max_len, d)
    emb = ad.mul(ad.embedding(_masked(registry, masks, table_path), ids),
                 float(np.sqrt(d)))
    emb = ad.add(emb, ad.tensor(np.broadcast_to(pe[:T], (B, T, d)).copy()))
    return _maybe_dropout(emb, config.dropout, dropout_rng)


def encode(config: ModelConfig, registry: ParameterRegistry, masks, src_ids,
           src_valid=None, capture: bool = False, dropout_rng=None,
           result: ForwardResult | None = None) -> ad.Tensor:
    """Encoder stack; returns the (B, Ts, d) memory."""
    src_ids = _check_ids(src_ids, config.src_vocab, "source", config.max_len)
    B, Ts = src_ids.shape
    key_mask = _key_mask(src_valid, B, Ts)
    x = _embed(config, registry, masks, "embedding.src", src_ids, dropout_rng)
    for layer in range(1, config.num_layers + 1):
        attn_out, probs = _attention(config, registry, masks,
                                     module_path("encoder", layer, "self_attn"),
                                     x, x, key_mask, dropout_rng)
        x = _post_norm(registry, config, "encoder", layer, "self_attn", x, attn_out)
        x = _post_norm(registry, config, "encoder", layer, "ffn", x,
                       _ffn(config, registry, masks, "encoder", layer, x,
                            dropout_rng))
        if capture and result is not None:
            result.activations[("encoder", layer)] = x.data
            result.attentions[("enc_self", layer)] = probs
    return x


def decode(config: ModelConfig, registry: ParameterRegistry, masks,
           memory: ad.Tensor, tgt_ids, src_valid=None, tgt_valid=None,
           capture: bool = False, dropout_rng=None,
           result: ForwardResult | None = None,
           last_only: bool = False) -> ad.Tensor:
    """Decoder stack over a (possibly growing) target prefix; returns logits."""
    tgt_ids = _check_ids(tgt_ids, config.tgt_vocab, "target", config.max_len)
    B, Tt = tgt_ids.shape
    Ts = memory.shape[1]
    causal = np.tril(np.ones((Tt, Tt), dtype=bool))
    self_mask = causal[None, None, :, :]
    if tgt_valid is not None:
        self_mask = self_mask & _key_mask(tgt_valid, B, Tt)
    cross_mask = _key_mask(src_valid, B, Ts)
    y = _embed(config, registry, masks, "embedding.tgt", tgt_ids, dropout_rng)
    for layer in range(1, config.num_layers + 1):
        attn_out, self_probs = _attention(config, registry, masks,
                                          module_path("decoder", layer, "self_attn"),
                                          y, y, self_mask, dropout_rng)
        y = _post_norm(registry, config, "decoder", layer, "self_attn", y, attn_out)
        cross_out, cross_probs = _attention(config, registry, masks,
                                            module_path("decoder", layer, "cross_attn"),
                                            y, memory, cross_mask, dropout_rng)
        y = _post_norm(registry, config, "decoder", layer, "cross_attn", y, cross_out)
        y = _post_norm(registry, config, "decoder", layer, "ffn", y,
                       _ffn(config, registry, masks, "decoder", layer, y,
                            dropout_rng))
        if capture and result is not None:
            result.activations[("decoder", layer)] = y.data
            result.attentions[("dec_self", layer)] = self_probs
            result.attentions[("enc_dec", layer)] = cross_probs
    if last_only:
        # greedy decoding reads only the newest position's distribution
        y = ad.tensor(y.data[:, -1:, :])
    return ad.matmul(y, _masked(registry, masks, "output_proj"))


def forward(config: ModelConfig, registry: ParameterRegistry, masks,
            src_ids, tgt_ids, capture: bool = False, dropout_rng=None,
            src_valid=None, tgt_valid=None) -> ForwardResult:
    """Run the full encoder-decoder on a batch.

    Masked weights contribute exactly as zeros; decoder self-attention is
    causally masked. Returns logits (B, Tt, tgt_vocab) plus captured
    activations/attentions when requested.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
    if src_ids.ndim != 2 or tgt_ids.ndim != 2:
        raise ModelError("src_ids/tgt_ids must be (batch, time) arrays")
    if src_ids.shape[0] != tgt_ids.shape[0]:
        raise ModelError("source and target batch sizes differ")
    result = ForwardResult(logits=None)
    memory = encode(config, registry, masks, src_ids, src_valid=src_valid,
                    capture=capture, dropout_rng=dropout_rng, result=result)
    result.logits = decode(config, registry, masks, memory, tgt_ids,
                           src_valid=src_valid, tgt_valid=tgt_valid,
                           capture=capture, dropout_rng=dropout_rng,
                           result=result)
    return result


def greedy_decode(config: ModelConfig, registry: ParameterRegistry, masks,
                  src_ids, bos_id: int, eos_id: int, max_len: int,
                  src_valid=None) -> list[list[int]]:
    """Deterministic greedy decoding; the encoder runs once per batch.

    Returns per-sentence target ids without BOS, truncated at (and
    excluding) the first EOS; capped at max_len tokens.
    """
    if max_len < 1:
        raise ModelError("max_len must be >= 1")
    src_ids = np.asarray(src_ids, dtype=np.int64)
    B = src_ids.shape[0]
    ys = np.full((B, 1), bos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with ad.no_grad():
        memory = encode(config, registry, masks, src_ids, src_valid=src_valid)
        for _ in range(max_len):
            logits = decode(config, registry, masks, memory, ys,
                            src_valid=src_valid, last_only=True)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, eos_id, nxt)
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == eos_id
            if done.all():
                break
    out: list[list[int]] = []
    for row in ys[:, 1:]:
        ids = []
        for t in row:
            if t == eos_id:
                break
            ids.append(int(t))
        out.append(ids)
    return out
