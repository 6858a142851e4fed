"""Tour of the synthetic translation language: annotations, subtokens, BLEU."""

import math

from prunelens import corpus as C

grammar = C.SyntheticGrammar(vocab_size=300, max_depth=3)
corpus = C.generate_corpus(seed=7, n_sentences=200, grammar=grammar)

sentence = next(s for s in corpus.sentences if C.OPEN in s.src)
print("source :", " ".join(sentence.src))
print("target :", " ".join(sentence.tgt))
print("tags   :", [C.TAG_NAMES[t] for t in sentence.tags])
print("parents:", sentence.parent)
print("arcs   :", [(c, p, C.ARC_LABELS[l]) for c, p, l in sentence.arcs[:6]], "...")

# every bracket closes with an agreement marker naming its head word's tag,
# and the sentence ends with the root head's marker
root = sentence.parent.index(-1)
print("root head:", sentence.src[root], "->", sentence.tgt[-1])

# rare tokens split into two subtokens whose concatenation restores the word
sub = C.split_subtokens(sentence, rare_threshold=50)
for tok, pieces in zip(sentence.src, sub.pieces):
    if len(pieces) == 2:
        print(f"rare token {tok!r} -> {pieces}")
        break

# corpus BLEU: exact match = 100; a dropped final token costs brevity penalty
hyp = [list(s.tgt) for s in corpus.sentences[:50]]
ref = [list(s.tgt) for s in corpus.sentences[:50]]
print("\nperfect-match BLEU:", C.corpus_bleu(hyp, ref))
print("one short hypothesis:",
      round(C.corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]]), 3),
      "=", round(100 * math.exp(1 - 5 / 4), 3))
