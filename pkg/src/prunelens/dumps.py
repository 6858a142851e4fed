"""Persisted per-layer activations and attention maps for a fixed corpus.

One file per (model, component-or-attention-type, layer): magic, version,
JSON header with provenance and the per-sentence row table, float32 payload,
CRC32. Row order is sentence order then position, so dumps from different
models of one family are token-aligned by construction.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import training as training_mod
from .similarity import ActivationMatrix, AttentionPairMatrix

MAGIC = b"PLDUMP01"
VERSION = 1


class DumpError(IOError):
    pass


@dataclass
class ActivationDump:
    """Post-block token representations for every sentence of the corpus.

    values rows follow (sentence, position); `sent_table` holds
    (sentence id, n_rows) per sentence and `token_ids` the vocab id behind
    each row, so (sentence id, position, surface) metadata is recoverable.
    """

    model_id: str
    component: str
    layer: int
    values: np.ndarray          # rows x d
    sent_table: list[tuple[int, int]]
    token_ids: np.ndarray
    config_digest: str = ""
    corpus_digest: str = ""

    def matrix(self) -> ActivationMatrix:
        return ActivationMatrix(values=self.values, model_id=self.model_id,
                                component=self.component, layer=self.layer,
                                row_ids=self.token_ids)

    def row_metadata(self) -> list[tuple[int, int, int]]:
        """(sentence id, position, token id) per row."""
        out = []
        r = 0
        for sent_id, n in self.sent_table:
            for pos in range(n):
                out.append((sent_id, pos, int(self.token_ids[r])))
                r += 1
        return out


@dataclass
class AttentionDump:
    """Head distributions per sentence: blocks of shape (H, Tq, Tk).

    Decoder self-attention blocks carry exact zeros above the diagonal.
    """

    model_id: str
    attn_type: str              # enc_self | enc_dec | dec_self
    layer: int
    heads: int
    sent_table: list[tuple[int, int, int]]   # (sentence id, Tq, Tk)
    blocks: list[np.ndarray]
    config_digest: str = ""
    corpus_digest: str = ""

    def __post_init__(self):
        for (sid, tq, tk), block in zip(self.sent_table, self.blocks):
            if block.shape != (self.heads, tq, tk):
                raise DumpError(f"attention block shape mismatch for sentence {sid}")

    def valid_mask(self, tq: int, tk: int) -> np.ndarray:
        if self.attn_type == "dec_self":
            return np.tril(np.ones((tq, tk), dtype=bool))
        return np.ones((tq, tk), dtype=bool)

    def pair_matrix(self) -> AttentionPairMatrix:
        """Stack valid (query, key) pairs as rows with one column per head."""
        rows = []
        index: list[tuple[int, int, int]] = []
        for (sid, tq, tk), block in zip(self.sent_table, self.blocks):
            valid = self.valid_mask(tq, tk)
            qs, ks = np.nonzero(valid)
            rows.append(block[:, qs, ks].T)
            index.extend((sid, int(q), int(k)) for q, k in zip(qs, ks))
        return AttentionPairMatrix(values=np.concatenate(rows, axis=0),
                                   pair_index=index, model_id=self.model_id,
                                   attn_type=self.attn_type, layer=self.layer)

    def distributions(self):
        """Yield each (head, query) row restricted to its valid keys."""
        for (sid, tq, tk), block in zip(self.sent_table, self.blocks):
            for h in range(self.heads):
                for q in range(tq):
                    limit = q + 1 if self.attn_type == "dec_self" else tk
                    yield block[h, q, :limit]


# ---------------------------------------------------------------------------
# capture over a corpus
# ---------------------------------------------------------------------------

def collect_dumps(config, registry, masks, corpus, inventory, split: str,
                  model_id: str, config_digest: str = "",
                  corpus_digest: str = "", batch_size: int = 32):
    """Teacher-forced forward over `split`, capturing all layers and heads.

    Returns (activation dumps, attention dumps) keyed by (component, layer)
    and (attention type, layer). Decoder rows cover the BOS-shifted target
    positions, keeping rows aligned across models of one family.
    """
    sentences = corpus.split(split)
    if not sentences:
        raise DumpError(f"empty split {split!r}")
    encoded = training_mod.encode_split(corpus, inventory, split)
    L = config.num_layers

    acts: dict[tuple[str, int], list] = {("encoder", l): [None] * len(encoded)
                                         for l in range(1, L + 1)}
    acts.update({("decoder", l): [None] * len(encoded) for l in range(1, L + 1)})
    attns: dict[tuple[str, int], list] = {(t, l): [None] * len(encoded)
                                          for t in model_mod.ATTENTION_TYPES
                                          for l in range(1, L + 1)}
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, e in enumerate(encoded):
        buckets.setdefault((len(e.src), len(e.tgt_in)), []).append(i)
    import prunelens.autodiff as ad
    with ad.no_grad():
        for key in sorted(buckets):
            idxs = buckets[key]
            for j in range(0, len(idxs), batch_size):
                chunk = idxs[j:j + batch_size]
                src = np.stack([encoded[i].src for i in chunk])
                tgt_in = np.stack([encoded[i].tgt_in for i in chunk])
                res = model_mod.forward(config, registry, masks, src, tgt_in,
                                        capture=True)
                for (comp, layer), block in res.activations.items():
                    store = acts[(comp, layer)]
                    for bi, i in enumerate(chunk):
                        store[i] = block[bi]
                for (atype, layer), block in res.attentions.items():
                    store = attns[(atype, layer)]
                    for bi, i in enumerate(chunk):
                        store[i] = block[bi]

    act_dumps = {}
    for (comp, layer), rows in acts.items():
        token_ids = []
        table = []
        for i, e in enumerate(encoded):
            ids = e.src if comp == "encoder" else e.tgt_in
            token_ids.extend(int(t) for t in ids)
            table.append((i, len(ids)))
        act_dumps[(comp, layer)] = ActivationDump(
            model_id=model_id, component=comp, layer=layer,
            values=np.concatenate(rows, axis=0),
            sent_table=table, token_ids=np.asarray(token_ids, dtype=np.uint32),
            config_digest=config_digest, corpus_digest=corpus_digest)

    attn_dumps = {}
    for (atype, layer), blocks in attns.items():
        table = []
        for i, block in enumerate(blocks):
            _, tq, tk = block.shape
            table.append((i, tq, tk))
        attn_dumps[(atype, layer)] = AttentionDump(
            model_id=model_id, attn_type=atype, layer=layer,
            heads=config.num_heads, sent_table=table, blocks=list(blocks),
            config_digest=config_digest, corpus_digest=corpus_digest)
    return act_dumps, attn_dumps


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _write(path: Path, header: dict, payloads: list[np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<I", len(hbytes))
    blob += hbytes
    for arr in payloads:
        blob += np.ascontiguousarray(arr).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def _read(path: Path) -> tuple[dict, bytes, int]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[:len(MAGIC)] != MAGIC:
        raise DumpError(f"{path}: not a dump file")
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != struct.unpack("<I", blob[-4:])[0]:
        raise DumpError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = len(MAGIC)
    version = struct.unpack_from("<I", blob, off)[0]
    if version != VERSION:
        raise DumpError(f"{path}: unsupported dump version {version}")
    hlen = struct.unpack_from("<I", blob, off + 4)[0]
    off += 8
    header = json.loads(blob[off:off + hlen])
    return header, blob, off + hlen


def save_activation_dump(dump: ActivationDump, path: str | Path) -> None:
    rows, cols = dump.values.shape
    header = {"kind": "activation", "model_id": dump.model_id,
              "component": dump.component, "layer": dump.layer,
              "rows": rows, "cols": cols,
              "sent_table": [list(t) for t in dump.sent_table],
              "config_digest": dump.config_digest,
              "corpus_digest": dump.corpus_digest}
    _write(Path(path), header,
           [dump.values.astype("<f4"), dump.token_ids.astype("<u4")])


def load_activation_dump(path: str | Path) -> ActivationDump:
    header, blob, off = _read(Path(path))
    if header["kind"] != "activation":
        raise DumpError(f"{path}: expected an activation dump")
    rows, cols = header["rows"], header["cols"]
    values = np.frombuffer(blob, dtype="<f4", count=rows * cols,
                           offset=off).astype(np.float64).reshape(rows, cols)
    off += 4 * rows * cols
    token_ids = np.frombuffer(blob, dtype="<u4", count=rows, offset=off).copy()
    return ActivationDump(model_id=header["model_id"],
                          component=header["component"], layer=header["layer"],
                          values=values,
                          sent_table=[tuple(t) for t in header["sent_table"]],
                          token_ids=token_ids,
                          config_digest=header["config_digest"],
                          corpus_digest=header["corpus_digest"])


def save_attention_dump(dump: AttentionDump, path: str | Path) -> None:
    header = {"kind": "attention", "model_id": dump.model_id,
              "attn_type": dump.attn_type, "layer": dump.layer,
              "heads": dump.heads,
              "sent_table": [list(t) for t in dump.sent_table],
              "config_digest": dump.config_digest,
              "corpus_digest": dump.corpus_digest}
    _write(Path(path), header, [b.astype("<f4") for b in dump.blocks])


def load_attention_dump(path: str | Path) -> AttentionDump:
    header, blob, off = _read(Path(path))
    if header["kind"] != "attention":
        raise DumpError(f"{path}: expected an attention dump")
    heads = header["heads"]
    blocks = []
    for _, tq, tk in header["sent_table"]:
        n = heads * tq * tk
        blocks.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off)
                      .astype(np.float64).reshape(heads, tq, tk))
        off += 4 * n
    return AttentionDump(model_id=header["model_id"],
                         attn_type=header["attn_type"], layer=header["layer"],
                         heads=heads,
                         sent_table=[tuple(t) for t in header["sent_table"]],
                         blocks=blocks, config_digest=header["config_digest"],
                         corpus_digest=header["corpus_digest"])
