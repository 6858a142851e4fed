"""Unsupervised cross-model similarity of activations and attention maps.

Three lenses on a layer pair: per-neuron max correlation (local), linear
centered kernel alignment over token representations (global), and CKA over
per-word-pair head-weight vectors (attention). Plus SVD variance curves and
token-group-restricted CKA for characterizing where representations differ.

All metrics are pure float64 functions of their inputs. CKA is computed in
feature form (columns are few, rows are many); the Gram/HSIC form lives in
the test suite as the independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SimilarityError(ValueError):
    pass


@dataclass
class ActivationMatrix:
    """Token-aligned activations: rows = analysis-corpus tokens, cols = neurons."""

    values: np.ndarray
    model_id: str = ""
    component: str = ""
    layer: int = 0
    row_ids: np.ndarray | None = None  # optional token identity per row

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise SimilarityError("activation matrix must be 2-D")


@dataclass
class AttentionPairMatrix:
    """Rows = within-sentence word pairs, columns = heads; entries in [0, 1]."""

    values: np.ndarray
    pair_index: list[tuple[int, int, int]]  # (sentence id, query pos, key pos)
    model_id: str = ""
    attn_type: str = ""
    layer: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.pair_index) != self.values.shape[0]:
            raise SimilarityError("pair matrix rows must match the pair index")
        if self.values.min() < -1e-9 or self.values.max() > 1 + 1e-9:
            raise SimilarityError("attention weights must lie in [0, 1]")


@dataclass
class SimilarityMatrix:
    kind: str                   # NeuronSim | LayerSim | AttentionSim
    model_a: str
    model_b: str
    layers_a: list[int]
    layers_b: list[int]
    values: np.ndarray          # len(layers_a) x len(layers_b)


@dataclass
class SVDReport:
    singular_values: np.ndarray        # descending
    cumulative: np.ndarray             # nondecreasing variance fractions
    min_k: dict[float, int]            # threshold -> smallest k reaching it


# ---------------------------------------------------------------------------
# neuron-level similarity
# ---------------------------------------------------------------------------

def neuron_corr(x, y) -> float:
    """Pearson correlation across tokens; defined as 0 for dead neurons."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise SimilarityError("neuron activation lengths differ")
    if x.ndim != 1 or x.size < 2:
        raise SimilarityError("need at least two aligned activations")
    xc = x - x.mean()
    yc = y - y.mean()
    nx = float(np.sqrt((xc * xc).sum()))
    ny = float(np.sqrt((yc * yc).sum()))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float((xc * yc).sum() / (nx * ny))


def _normalized_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-centered, unit-norm columns; dead (zero-variance) columns -> 0."""
    xc = x - x.mean(axis=0, keepdims=True)
    norms = np.sqrt((xc * xc).sum(axis=0))
    dead = norms == 0.0
    safe = np.where(dead, 1.0, norms)
    return xc / safe, dead


@dataclass
class NeuronSimResult:
    score: float
    match_rate: float
    max_corrs: np.ndarray    # per live A-neuron max correlation
    argmax: np.ndarray       # per live A-neuron best B index
    dead_a: int
    dead_b: int


def neuron_sim(a: ActivationMatrix, b: ActivationMatrix) -> NeuronSimResult:
    """Mean over A's neurons of the best correlation with any B neuron.

    Dead neurons correlate 0 with everything; they are excluded from both
    the score mean and the argmax match-rate denominator (and counted), so
    neuron_sim(A, A) is exactly 1 even in their presence.
    """
    _check_aligned_rows(a.values, b.values, a.row_ids, b.row_ids)
    xn, dead_a = _normalized_columns(a.values)
    yn, dead_b = _normalized_columns(b.values)
    corr = xn.T @ yn
    live = ~dead_a
    if not live.any():
        raise SimilarityError("all neurons of A are dead")
    rows = corr[live]
    argmax = rows.argmax(axis=1)
    maxima = rows[np.arange(rows.shape[0]), argmax]
    own_index = np.nonzero(live)[0]
    match_rate = float((argmax == own_index).mean())
    return NeuronSimResult(score=float(maxima.mean()), match_rate=match_rate,
                           max_corrs=maxima, argmax=argmax,
                           dead_a=int(dead_a.sum()), dead_b=int(dead_b.sum()))


def _check_aligned_rows(x, y, ids_x=None, ids_y=None):
    if x.shape[0] != y.shape[0]:
        raise SimilarityError(
            f"row misalignment: {x.shape[0]} vs {y.shape[0]} tokens")
    if ids_x is not None and ids_y is not None and not np.array_equal(ids_x, ids_y):
        raise SimilarityError("row identities differ between the two matrices")


# ---------------------------------------------------------------------------
# CKA
# ---------------------------------------------------------------------------

def linear_cka(x, y) -> float:
    """Linear centered kernel alignment, feature form.

    After column-centering: ||Yc'Xc||_F^2 / (||Xc'Xc||_F * ||Yc'Yc||_F).
    Symmetric, invariant to orthogonal transforms and isotropic scaling.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise SimilarityError("CKA expects 2-D matrices")
    if x.shape[0] != y.shape[0]:
        raise SimilarityError("CKA inputs must have equal row counts")
    if x.shape[0] < 2:
        raise SimilarityError("CKA needs at least 2 rows")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    xx = float(np.linalg.norm(xc.T @ xc, "fro"))
    yy = float(np.linalg.norm(yc.T @ yc, "fro"))
    if xx == 0.0 or yy == 0.0:
        raise SimilarityError("CKA input is all-zero after centering")
    xy = float(np.linalg.norm(yc.T @ xc, "fro"))
    return xy * xy / (xx * yy)


def layer_sim_heatmap(dumps_a: dict[int, ActivationMatrix],
                      dumps_b: dict[int, ActivationMatrix],
                      model_a: str = "", model_b: str = "",
                      kind: str = "LayerSim") -> SimilarityMatrix:
    """CKA between every layer pair of two models (same component)."""
    if not dumps_a or not dumps_b:
        raise SimilarityError("missing dumps for heatmap")
    layers_a = sorted(dumps_a)
    layers_b = sorted(dumps_b)
    values = np.zeros((len(layers_a), len(layers_b)))
    for i, la in enumerate(layers_a):
        for j, lb in enumerate(layers_b):
            values[i, j] = linear_cka(dumps_a[la].values, dumps_b[lb].values)
    return SimilarityMatrix(kind=kind, model_a=model_a, model_b=model_b,
                            layers_a=layers_a, layers_b=layers_b, values=values)


def attention_sim(a: AttentionPairMatrix, b: AttentionPairMatrix) -> float:
    """CKA treating each word pair as an H-dimensional example."""
    if a.pair_index != b.pair_index:
        raise SimilarityError("attention pair sets differ")
    return linear_cka(a.values, b.values)


# ---------------------------------------------------------------------------
# SVD complexity
# ---------------------------------------------------------------------------

def svd_variance(x, thresholds=(0.5, 0.8, 0.9)) -> SVDReport:
    """Cumulative variance fractions of the column-centered representation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise SimilarityError("SVD input must be 2-D")
    xc = x - x.mean(axis=0, keepdims=True)
    s = np.linalg.svd(xc, compute_uv=False)
    total = float((s * s).sum())
    if total == 0.0:
        raise SimilarityError("rank-0 matrix has no variance to explain")
    cum = np.cumsum(s * s) / total
    min_k = {}
    for t in thresholds:
        idx = int(np.searchsorted(cum, t, side="left"))
        min_k[t] = min(idx, len(cum) - 1) + 1
    return SVDReport(singular_values=s, cumulative=cum, min_k=min_k)


# ---------------------------------------------------------------------------
# grouped similarity and attention concentration
# ---------------------------------------------------------------------------

@dataclass
class GroupedSimilarity:
    scores: dict[str, float]
    sizes: dict[str, int]
    skipped: list[str] = field(default_factory=list)


def grouped_similarity(x: ActivationMatrix, y: ActivationMatrix, groups,
                       min_group: int = 10) -> GroupedSimilarity:
    """CKA restricted to each token group's rows.

    `groups` assigns one label per row; groups smaller than `min_group` are
    skipped (recorded). The labels must cover every row.
    """
    labels = np.asarray(groups)
    if labels.size == 0:
        raise SimilarityError("empty grouping")
    _check_aligned_rows(x.values, y.values, x.row_ids, y.row_ids)
    if labels.shape[0] != x.values.shape[0]:
        raise SimilarityError("grouping does not cover all tokens")
    out = GroupedSimilarity(scores={}, sizes={})
    for g in sorted(np.unique(labels).tolist()):
        rows = labels == g
        n = int(rows.sum())
        out.sizes[str(g)] = n
        if n < min_group:
            out.skipped.append(str(g))
            continue
        out.scores[str(g)] = linear_cka(x.values[rows], y.values[rows])
    return out


def attention_concentration(distributions, threshold: float = 0.95) -> float:
    """Fraction of attention distributions with max mass > threshold.

    `distributions` is an iterable of 1-D probability vectors (or a 2-D
    array of rows); rows may be zero-padded past their valid keys.
    """
    arr = [np.asarray(d, dtype=np.float64) for d in distributions]
    if not arr:
        raise SimilarityError("no distributions given")
    maxima = np.array([d.max() for d in arr])
    return float((maxima > threshold).mean())
