"""Deterministic synthetic translation language with gold annotations.

The language is built from a Zipf-weighted vocabulary of pseudo-words, each
carrying a lexical tag and a coarse semantic class. Sentences are bracketed
phrases nested up to a configurable depth; every sentence comes with its
parse (per-token parent index), labeled arcs, tags, and frequency ranks.

The source-to-target transformation is a pure function of the source parse:
a bijective lexicon substitution, reversal of each phrase's immediate
constituents, and an agreement marker appended to every phrase that names
its head word's tag. Gold targets are therefore unique and the lexicon part
is invertible.
"""

from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

# syllabary used to spell pseudo-words; 20 CV pairs cover 8000 3-syllable types
_SYLLABLES = ["ba", "de", "fi", "go", "hu", "ka", "le", "mi", "no", "pu",
              "ra", "se", "ti", "vo", "wu", "za", "ne", "ko", "ly", "shu"]

TAG_NAMES = ["N", "V", "A", "R", "P", "D", "C", "M", "BR"]
BRACKET_TAG = 8
SEM_CLASSES = 5
ARC_LABELS = ["child", "subhead", "bracket"]

OPEN, CLOSE = "(", ")"


class GrammarError(ValueError):
    pass


def _spell(rank: int) -> str:
    n = len(_SYLLABLES)
    digits = [(rank // n // n) % n, (rank // n) % n, rank % n]
    return "".join(_SYLLABLES[d] for d in digits)


@dataclass(frozen=True)
class SyntheticGrammar:
    """Parameters that fully determine the language (vocab, parses, lexicon)."""

    vocab_size: int = 2000
    zipf_exponent: float = 1.1
    n_tags: int = 8
    max_depth: int = 3          # bracket nesting levels; hard cap 5
    nest_prob: float = 0.3
    phrase_len: tuple[int, int] = (2, 4)   # children of the root phrase
    bracket_len: tuple[int, int] = (2, 2)  # children of bracketed phrases
    lexicon: str = "permute"    # "permute" (bijection) or "identity" (copy task)
    reorder: bool = True
    agreement: bool = True
    dedup_within_phrase: bool = True  # resample immediate duplicate words
    vocab_seed: int = 20177

    def __post_init__(self):
        if self.vocab_size < 1:
            raise GrammarError("empty vocabulary")
        if self.vocab_size > len(_SYLLABLES) ** 3:
            raise GrammarError("vocabulary too large for the syllabary")
        if not 1 <= self.max_depth <= 5:
            raise GrammarError("max_depth must be in [1, 5]")
        if self.lexicon not in ("permute", "identity"):
            raise GrammarError(f"unknown lexicon mode {self.lexicon!r}")
        if self.n_tags < 2 or self.n_tags > 8:
            raise GrammarError("n_tags must be in [2, 8]")

    def build_vocab(self) -> "Vocabulary":
        return Vocabulary(self)


class Vocabulary:
    """Derived word list: surfaces, tags, semantic classes, Zipf weights, lexicon."""

    def __init__(self, grammar: SyntheticGrammar):
        self.grammar = grammar
        rng = np.random.default_rng(grammar.vocab_seed)
        n = grammar.vocab_size
        self.surfaces = [_spell(r) for r in range(n)]
        self.tags = rng.integers(0, grammar.n_tags, size=n).tolist()
        self.sem_class = rng.integers(0, SEM_CLASSES, size=n).tolist()
        weights = np.arange(1, n + 1, dtype=np.float64) ** (-grammar.zipf_exponent)
        self.probs = weights / weights.sum()
        if grammar.lexicon == "permute":
            self.lex = rng.permutation(n).tolist()
        else:
            self.lex = list(range(n))
        self.inv_lex = [0] * n
        for s, t in enumerate(self.lex):
            self.inv_lex[t] = s
        # target surfaces are distinct strings unless running the copy task
        prefix = "" if grammar.lexicon == "identity" else "q"
        self.tgt_surfaces = [prefix + s for s in self.surfaces]

    def target_of(self, type_id: int) -> str:
        return self.tgt_surfaces[self.lex[type_id]]

    def source_of_target(self, tgt_surface: str) -> str | None:
        """Invert the lexicon for a content word; None for markers/brackets."""
        prefix = "" if self.grammar.lexicon == "identity" else "q"
        body = tgt_surface[len(prefix):] if tgt_surface.startswith(prefix) else None
        if body is None or body not in self._tgt_index():
            return None
        return self.surfaces[self.inv_lex[self._tgt_index()[body]]]

    def _tgt_index(self):
        if not hasattr(self, "_tidx"):
            self._tidx = {s: i for i, s in enumerate(self.surfaces)}
        return self._tidx


@dataclass
class AnnotatedSentence:
    """One source/target pair plus its gold linguistic annotations."""

    src: list[str]
    tgt: list[str]
    src_type_ids: list[int]      # -1 for brackets
    tags: list[int]              # tag id per source token (BRACKET_TAG for brackets)
    parent: list[int]            # parent token index per source token; -1 at root head
    arcs: list[tuple[int, int, int]]  # (child, parent, label id)
    freq_rank: list[int]         # 1-based Zipf rank per token; 0 for brackets

    def gparent(self, i: int) -> int:
        p = self.parent[i]
        return self.parent[p] if p >= 0 else -1

    def ggparent(self, i: int) -> int:
        g = self.gparent(i)
        return self.parent[g] if g >= 0 else -1


@dataclass
class SubtokenMap:
    """Deterministic split of a sentence's source tokens into subtokens."""

    pieces: list[list[str]]      # per original token
    owner: list[int]             # flat subtoken index -> owning token index

    @property
    def flat(self) -> list[str]:
        return [p for group in self.pieces for p in group]


def split_token(surface: str) -> tuple[str, str]:
    cut = (len(surface) + 1) // 2
    return surface[:cut], surface[cut:]


def split_subtokens(sentence: AnnotatedSentence, rare_threshold: float) -> SubtokenMap:
    """Split tokens whose frequency rank is worse than `rare_threshold`.

    Split tokens become exactly two subtokens whose concatenation is the
    original surface; everything else passes through unchanged.
    """
    if rare_threshold < 0:
        raise GrammarError("rare_threshold must be >= 0")
    pieces: list[list[str]] = []
    owner: list[int] = []
    for i, (tok, rank) in enumerate(zip(sentence.src, sentence.freq_rank)):
        if rank > rare_threshold:
            pieces.append(list(split_token(tok)))
            owner.extend([i, i])
        else:
            pieces.append([tok])
            owner.append(i)
    return SubtokenMap(pieces=pieces, owner=owner)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class _Phrase:
    children: list  # words (type ids) or nested _Phrase


def _sample_phrase(rng, vocab: Vocabulary, depth: int) -> _Phrase:
    g = vocab.grammar
    lo, hi = g.phrase_len if depth == 0 else g.bracket_len
    n_children = int(rng.integers(lo, hi + 1))
    children: list = []
    used: set[int] = set()
    for j in range(n_children):
        nest = (j > 0 and depth < g.max_depth
                and rng.random() < g.nest_prob)
        if nest:
            children.append(_sample_phrase(rng, vocab, depth + 1))
            continue
        word = int(rng.choice(len(vocab.probs), p=vocab.probs))
        if g.dedup_within_phrase:
            for _ in range(8):
                if word not in used:
                    break
                word = int(rng.choice(len(vocab.probs), p=vocab.probs))
        used.add(word)
        children.append(word)
    return _Phrase(children)


def _annotate(phrase: _Phrase, vocab: Vocabulary) -> AnnotatedSentence:
    src: list[str] = []
    type_ids: list[int] = []
    tags: list[int] = []
    parent: list[int] = []
    arcs: list[tuple[int, int, int]] = []
    rank: list[int] = []

    def emit_word(type_id: int) -> int:
        idx = len(src)
        src.append(vocab.surfaces[type_id])
        type_ids.append(type_id)
        tags.append(vocab.tags[type_id])
        parent.append(-2)  # fixed up by caller
        rank.append(type_id + 1)
        return idx

    def emit_bracket(tok: str, head: int):
        idx = len(src)
        src.append(tok)
        type_ids.append(-1)
        tags.append(BRACKET_TAG)
        parent.append(head)
        rank.append(0)
        arcs.append((idx, head, 2))

    def walk(ph: _Phrase, outer_head: int) -> int:
        """Emit tokens for `ph`; returns the phrase head's token index."""
        head = emit_word(ph.children[0])  # first child is always a word
        parent[head] = outer_head
        if outer_head >= 0:
            arcs.append((head, outer_head, 1))
        for child in ph.children[1:]:
            if isinstance(child, _Phrase):
                open_at = len(src)
                src.append(OPEN)
                type_ids.append(-1)
                tags.append(BRACKET_TAG)
                parent.append(-2)
                rank.append(0)
                sub_head = walk(child, head)
                parent[open_at] = sub_head
                arcs.insert(len(arcs), (open_at, sub_head, 2))
                emit_bracket(CLOSE, sub_head)
            else:
                w = emit_word(child)
                parent[w] = head
                arcs.append((w, head, 0))
        return head

    walk(phrase, -1)

    tgt = _transform(phrase, vocab)
    return AnnotatedSentence(src=src, tgt=tgt, src_type_ids=type_ids, tags=tags,
                             parent=parent, arcs=sorted(arcs), freq_rank=rank)


def _transform(phrase: _Phrase, vocab: Vocabulary) -> list[str]:
    """Apply the gold source-to-target transformation recursively.

    Reordering is within-bracket only: nested phrases emit their immediate
    constituents reversed, while the root level keeps source order.
    """
    g = vocab.grammar

    def render(ph: _Phrase, bracketed: bool) -> list[str]:
        units: list[list[str]] = []
        for child in ph.children:
            if isinstance(child, _Phrase):
                units.append([OPEN] + render(child, True) + [CLOSE])
            else:
                units.append([vocab.target_of(child)])
        if g.reorder and bracketed:
            units = units[::-1]
        out = [tok for unit in units for tok in unit]
        if g.agreement:
            out.append(agreement_marker(vocab.tags[ph.children[0]]))
        return out

    return render(phrase, False)


def agreement_marker(tag_id: int) -> str:
    return f"AGR_{TAG_NAMES[tag_id]}"


@dataclass
class Corpus:
    """Generated sentences plus the split assignment and derived vocab."""

    grammar: SyntheticGrammar
    seed: int
    sentences: list[AnnotatedSentence]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.vocab = self.grammar.build_vocab()

    def split(self, name: str) -> list[AnnotatedSentence]:
        return [self.sentences[i] for i in self.splits[name]]

    def token_counts(self) -> dict[str, int]:
        return {name: sum(len(self.sentences[i].src) for i in idx)
                for name, idx in self.splits.items()}


def generate_corpus(seed: int, n_sentences: int,
                    grammar: SyntheticGrammar | None = None,
                    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Corpus:
    """Generate `n_sentences` distinct annotated sentences, deterministically.

    Splits are disjoint by construction (sentences are deduplicated on their
    source token sequence before partitioning).
    """
    if n_sentences < 1:
        raise GrammarError("n_sentences must be >= 1")
    grammar = grammar or SyntheticGrammar()
    vocab = grammar.build_vocab()
    rng = np.random.default_rng(seed)
    sentences: list[AnnotatedSentence] = []
    seen: set[tuple[str, ...]] = set()
    attempts = 0
    while len(sentences) < n_sentences:
        attempts += 1
        if attempts > 50 * n_sentences:
            raise GrammarError("grammar too small to produce distinct sentences")
        ph = _sample_phrase(rng, vocab, depth=0)
        sent = _annotate(ph, vocab)
        key = tuple(sent.src)
        if key in seen:
            continue
        seen.add(key)
        sentences.append(sent)
    n_train = int(round(splits[0] * n_sentences))
    n_valid = int(round(splits[1] * n_sentences))
    split_map = {
        "train": list(range(0, n_train)),
        "valid": list(range(n_train, min(n_train + n_valid, n_sentences))),
        "test": list(range(min(n_train + n_valid, n_sentences), n_sentences)),
    }
    return Corpus(grammar=grammar, seed=seed, sentences=sentences, splits=split_map)


# ---------------------------------------------------------------------------
# model-facing token inventories
# ---------------------------------------------------------------------------

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


class TokenInventory:
    """Source subtoken and target token inventories for one grammar.

    Closed vocabularies derived from the grammar alone (not the sampled
    corpus), so any sentence the grammar can produce is representable.
    """

    def __init__(self, grammar: SyntheticGrammar, rare_threshold: float):
        vocab = grammar.build_vocab()
        self.rare_threshold = rare_threshold
        src: list[str] = [PAD, OPEN, CLOSE]
        for type_id, surface in enumerate(vocab.surfaces):
            if type_id + 1 > rare_threshold:
                src.extend(split_token(surface))
            else:
                src.append(surface)
        self.src_tokens = _dedup(src)
        tgt: list[str] = [PAD, BOS, EOS, OPEN, CLOSE]
        tgt.extend(agreement_marker(t) for t in range(grammar.n_tags))
        tgt.extend(vocab.tgt_surfaces)
        self.tgt_tokens = _dedup(tgt)
        self.src_index = {s: i for i, s in enumerate(self.src_tokens)}
        self.tgt_index = {s: i for i, s in enumerate(self.tgt_tokens)}
        self.bos_id = self.tgt_index[BOS]
        self.eos_id = self.tgt_index[EOS]

    def encode_src(self, sentence: AnnotatedSentence) -> tuple[list[int], SubtokenMap]:
        sub = split_subtokens(sentence, self.rare_threshold)
        return [self.src_index[s] for s in sub.flat], sub

    def encode_tgt(self, sentence: AnnotatedSentence) -> list[int]:
        return [self.tgt_index[t] for t in sentence.tgt]

    def decode_tgt(self, ids) -> list[str]:
        return [self.tgt_tokens[i] for i in ids
                if i not in (self.bos_id, self.eos_id, self.tgt_index[PAD])]


def _dedup(tokens: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for t in tokens:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n: int = 4,
                smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precision, brevity penalty.

    Single reference per hypothesis; any zero precision gives 0 unless
    `smooth` adds one to every numerator and denominator.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis/reference counts differ")
    if not hypotheses:
        raise ValueError("empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hc = _ngram_counts(hyp, n)
            rc = _ngram_counts(ref, n)
            matched[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    log_sum = 0.0
    for m, t in zip(matched, total):
        if smooth:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += np.log(m / t) / max_n
    bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / max(hyp_len, 1)))
    return float(100.0 * bp * np.exp(log_sum))


# ---------------------------------------------------------------------------
# persistence (line-delimited JSON)
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir: str | Path) -> dict:
    """Write manifest.json + sentences.jsonl; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {}
    for name, idx in corpus.splits.items():
        for i in idx:
            split_of[i] = name
    with open(out / "sentences.jsonl", "w") as fh:
        for i, s in enumerate(corpus.sentences):
            rec = dataclasses.asdict(s)
            rec["id"] = i
            rec["split"] = split_of[i]
            rec["arcs"] = [list(a) for a in s.arcs]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": corpus.seed,
        "grammar": dataclasses.asdict(corpus.grammar),
        "n_sentences": len(corpus.sentences),
        "splits": {k: len(v) for k, v in corpus.splits.items()},
        "token_counts": corpus.token_counts(),
        "tag_names": TAG_NAMES,
        "arc_labels": ARC_LABELS,
    }
    manifest["grammar"]["phrase_len"] = list(corpus.grammar.phrase_len)
    manifest["grammar"]["bracket_len"] = list(corpus.grammar.bracket_len)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_corpus(in_dir: str | Path) -> Corpus:
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise GrammarError(f"unsupported corpus schema {manifest['schema_version']}")
    g = dict(manifest["grammar"])
    g["phrase_len"] = tuple(g["phrase_len"])
    g["bracket_len"] = tuple(g["bracket_len"])
    grammar = SyntheticGrammar(**g)
    sentences: list[AnnotatedSentence] = []
    splits: dict[str, list[int]] = {k: [] for k in manifest["splits"]}
    with open(src / "sentences.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            splits[rec["split"]].append(rec["id"])
            sentences.append(AnnotatedSentence(
                src=rec["src"], tgt=rec["tgt"], src_type_ids=rec["src_type_ids"],
                tags=rec["tags"], parent=rec["parent"],
                arcs=[tuple(a) for a in rec["arcs"]], freq_rank=rec["freq_rank"]))
    return Corpus(grammar=grammar, seed=manifest["seed"], sentences=sentences,
                  splits=splits)
