"""Probing classifiers over frozen per-layer token representations.

Tasks come in three groups: tagging (read a token's tag), structure
(ancestor tags, arc prediction/classification), and one hard pair task
(do two tokens share a head) that needs long-range structure. Single-token
tasks use the token's (subtoken-averaged) representation; pair tasks use
[w_i ; w_j ; w_i*w_j]. Probes are linear or one-hidden-layer MLPs trained
with Adam and dev-accuracy early stopping; the frozen representations are
never touched.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .corpus import AnnotatedSentence, SubtokenMap, TAG_NAMES, ARC_LABELS


class ProbingError(ValueError):
    pass


ROOT_CLASS = len(TAG_NAMES)  # "no ancestor" label for ancestor tasks


@dataclass(frozen=True)
class Task:
    id: str
    group: str            # tagging | structure | hard_pair
    arity: str            # single | pair
    n_classes: int


TASKS: dict[str, Task] = {t.id: t for t in [
    Task("token_tag", "tagging", "single", len(TAG_NAMES)),
    Task("parent_tag", "structure", "single", len(TAG_NAMES) + 1),
    Task("gparent_tag", "structure", "single", len(TAG_NAMES) + 1),
    Task("ggparent_tag", "structure", "single", len(TAG_NAMES) + 1),
    Task("arc_pred", "structure", "pair", 2),
    Task("arc_label", "structure", "pair", len(ARC_LABELS)),
    Task("same_head", "hard_pair", "pair", 2),
]}

GROUPS = ("tagging", "structure", "hard_pair")


def _single_label(task_id: str, s: AnnotatedSentence, i: int) -> int:
    if task_id == "token_tag":
        return s.tags[i]
    if task_id == "parent_tag":
        p = s.parent[i]
    elif task_id == "gparent_tag":
        p = s.gparent(i)
    elif task_id == "ggparent_tag":
        p = s.ggparent(i)
    else:
        raise ProbingError(f"not a single-token task: {task_id}")
    return ROOT_CLASS if p < 0 else s.tags[p]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def extract_token_reps(rows: np.ndarray, sub: SubtokenMap) -> np.ndarray:
    """Average each original token's subtoken rows into one feature row."""
    if rows.shape[0] != len(sub.owner):
        raise ProbingError("representation rows do not cover the sentence")
    out = np.zeros((len(sub.pieces), rows.shape[1]))
    start = 0
    for i, pieces in enumerate(sub.pieces):
        n = len(pieces)
        out[i] = rows[start:start + n].mean(axis=0)
        start += n
    return out


def build_pairwise_features(rep_i: np.ndarray, rep_j: np.ndarray) -> np.ndarray:
    """[w_i ; w_j ; w_i (elementwise*) w_j], dimension 3d."""
    rep_i = np.asarray(rep_i, dtype=np.float64)
    rep_j = np.asarray(rep_j, dtype=np.float64)
    if rep_i.shape != rep_j.shape:
        raise ProbingError("pair features need equal dimensions")
    return np.concatenate([rep_i, rep_j, rep_i * rep_j], axis=-1)


def sentence_token_features(dump_values: np.ndarray, sent_table, subs) -> list[np.ndarray]:
    """Per-sentence token-feature matrices from one activation dump."""
    feats = []
    offset = 0
    for (_, n_rows), sub in zip(sent_table, subs):
        feats.append(extract_token_reps(dump_values[offset:offset + n_rows], sub))
        offset += n_rows
    return feats


# ---------------------------------------------------------------------------
# task frames (model-independent item lists)
# ---------------------------------------------------------------------------

@dataclass
class TaskFrame:
    """Items, labels, and split assignment for one task on one corpus."""

    task: Task
    items: list[tuple]          # (sent, i) or (sent, i, j); sent indexes the split
    labels: np.ndarray
    split: np.ndarray           # "train" | "dev" | "test" per item


def _sentence_split(n: int, fractions=(0.7, 0.15, 0.15)) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    names = []
    for i in range(n):
        if i < n_train:
            names.append("train")
        elif i < n_train + n_dev:
            names.append("dev")
        else:
            names.append("test")
    return names


def build_task_frame(task: Task, sentences: list[AnnotatedSentence],
                     seed: int = 0) -> TaskFrame:
    # zlib.crc32 rather than hash(): stable across processes
    rng = np.random.default_rng([seed, zlib.crc32(task.id.encode())])
    split_names = _sentence_split(len(sentences))
    items: list[tuple] = []
    labels: list[int] = []
    split: list[str] = []

    for si, s in enumerate(sentences):
        n = len(s.src)
        if task.arity == "single":
            for i in range(n):
                items.append((si, i))
                labels.append(_single_label(task.id, s, i))
                split.append(split_names[si])
            continue
        if task.id == "arc_label":
            pairs = [((si, c, p), lab) for c, p, lab in s.arcs]
        elif task.id == "arc_pred":
            arc_set = {(c, p) for c, p, _ in s.arcs}
            pairs = [((si, c, p), 1) for c, p in sorted(arc_set)]
            candidates = [(i, j) for i in range(n) for j in range(n)
                          if i != j and (i, j) not in arc_set]
            take = min(len(pairs), len(candidates))
            for idx in rng.choice(len(candidates), size=take, replace=False):
                i, j = candidates[idx]
                pairs.append(((si, i, j), 0))
        elif task.id == "same_head":
            pos = [(i, j) for i in range(n) for j in range(i + 1, n)
                   if s.parent[i] == s.parent[j]]
            neg = [(i, j) for i in range(n) for j in range(i + 1, n)
                   if s.parent[i] != s.parent[j]]
            take = min(len(pos), len(neg))
            pairs = []
            if take:
                for idx in rng.choice(len(pos), size=take, replace=False):
                    pairs.append(((si, *pos[idx]), 1))
                for idx in rng.choice(len(neg), size=take, replace=False):
                    pairs.append(((si, *neg[idx]), 0))
        else:
            raise ProbingError(f"unknown pair task {task.id}")
        for item, lab in pairs:
            items.append(item)
            labels.append(lab)
            split.append(split_names[item[0]])

    return TaskFrame(task=task, items=items, labels=np.asarray(labels),
                     split=np.asarray(split))


@dataclass
class ProbeDataset:
    """Feature matrices and labels for one (task, model, layer) cell."""

    task: Task
    x: dict[str, np.ndarray]
    y: dict[str, np.ndarray]

    def n_features(self) -> int:
        return self.x["train"].shape[1]


def assemble_dataset(frame: TaskFrame, feats: list[np.ndarray]) -> ProbeDataset:
    """Gather features for a frame from per-sentence token features."""
    if frame.task.arity == "single":
        rows = np.stack([feats[si][i] for si, i in frame.items])
    else:
        left = np.stack([feats[si][i] for si, i, _ in frame.items])
        right = np.stack([feats[si][j] for si, _, j in frame.items])
        rows = build_pairwise_features(left, right)
    x, y = {}, {}
    for name in ("train", "dev", "test"):
        pick = frame.split == name
        x[name] = rows[pick]
        y[name] = frame.labels[pick]
    return ProbeDataset(task=frame.task, x=x, y=y)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeSpec:
    task_id: str
    layer: int
    family: str = "linear"       # linear | mlp
    hidden: int = 64             # mlp hidden width; callers pass the model dim
    replicate_seeds: tuple[int, ...] = (0,)
    lr: float = 1e-3
    max_epochs: int = 50
    patience: int = 3
    batch_size: int = 128

    def __post_init__(self):
        if self.family not in ("linear", "mlp"):
            raise ProbingError(f"unknown probe family {self.family!r}")


def _init_probe(family, n_in, n_out, hidden, rng):
    def glorot(n1, n2):
        lim = np.sqrt(6.0 / (n1 + n2))
        return rng.uniform(-lim, lim, size=(n1, n2))

    # zero-init the classifier head: logits start neutral, so the first
    # updates move toward the class means instead of unwinding a random
    # (possibly confidently wrong) hyperplane
    if family == "linear":
        return [ad.Parameter(np.zeros((n_in, n_out))), ad.Parameter(np.zeros(n_out))]
    return [ad.Parameter(glorot(n_in, hidden)), ad.Parameter(np.zeros(hidden)),
            ad.Parameter(np.zeros((hidden, n_out))), ad.Parameter(np.zeros(n_out))]


def _probe_logits(params, x: ad.Tensor) -> ad.Tensor:
    if len(params) == 2:
        return ad.add(ad.matmul(x, params[0]), params[1])
    h = ad.relu(ad.add(ad.matmul(x, params[0]), params[1]))
    return ad.add(ad.matmul(h, params[2]), params[3])


def _accuracy(params, x: np.ndarray, y: np.ndarray) -> float:
    with ad.no_grad():
        logits = _probe_logits(params, ad.tensor(x)).data
    return float((logits.argmax(axis=1) == y).mean())


def _standardize(x: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    mu = x["train"].mean(axis=0)
    sd = x["train"].std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    return {name: (arr - mu) / sd for name, arr in x.items()}


def _train_once(spec: ProbeSpec, dataset: ProbeDataset, seed: int) -> float:
    rng = np.random.default_rng([seed, 911])
    x = _standardize(dataset.x)
    x_train, y_train = x["train"], dataset.y["train"]
    params = _init_probe(spec.family, dataset.n_features(),
                         dataset.task.n_classes, spec.hidden, rng)
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    step = 0
    best_dev = -1.0
    best_params = [p.data.copy() for p in params]
    stale = 0
    for _ in range(spec.max_epochs):
        order = rng.permutation(len(x_train))
        for lo in range(0, len(order), spec.batch_size):
            idx = order[lo:lo + spec.batch_size]
            for p in params:
                p.zero_grad()
            loss = ad.cross_entropy(
                _probe_logits(params, ad.tensor(x_train[idx])), y_train[idx])
            loss.backward()
            step += 1
            for i, p in enumerate(params):
                g = p.grad
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                mhat = m[i] / (1 - 0.9 ** step)
                vhat = v[i] / (1 - 0.999 ** step)
                p.data -= spec.lr * mhat / (np.sqrt(vhat) + 1e-8)
        dev_acc = _accuracy(params, x["dev"], dataset.y["dev"])
        if dev_acc > best_dev:
            best_dev = dev_acc
            best_params = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    for p, best in zip(params, best_params):
        p.data = best
    return _accuracy(params, x["test"], dataset.y["test"])


def train_probe(spec: ProbeSpec, dataset: ProbeDataset) -> float:
    """Test accuracy at the best-dev epoch, averaged over replicate seeds."""
    if len(np.unique(dataset.y["train"])) < 2:
        raise ProbingError("probe training set has fewer than 2 classes")
    metrics = [_train_once(spec, dataset, s) for s in spec.replicate_seeds]
    return float(np.mean(metrics))


# ---------------------------------------------------------------------------
# reports, z-scores, trends
# ---------------------------------------------------------------------------

@dataclass
class ProbeRecord:
    model: str
    model_k: int
    layer: int
    task: str
    family: str
    metric: float


@dataclass
class ProbeReport:
    records: list[ProbeRecord] = field(default_factory=list)

    def add(self, **kw):
        self.records.append(ProbeRecord(**kw))

    def models(self) -> list[str]:
        seen = {}
        for r in self.records:
            seen.setdefault(r.model, r.model_k)
        return sorted(seen, key=seen.get)

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.records})

    def tasks(self) -> list[str]:
        return sorted({r.task for r in self.records})

    def metric(self, model, layer, task, family) -> float:
        for r in self.records:
            if (r.model, r.layer, r.task, r.family) == (model, layer, task, family):
                return r.metric
        raise KeyError((model, layer, task, family))

    def per_layer(self, model, task, family) -> dict[int, float]:
        return {r.layer: r.metric for r in self.records
                if (r.model, r.task, r.family) == (model, task, family)}

    def best_over_layers(self, model, task, family) -> float:
        vals = self.per_layer(model, task, family)
        if not vals:
            raise KeyError((model, task, family))
        return max(vals.values())


def zscores(values) -> np.ndarray:
    """Population-std standardization; all-equal vectors map to zeros."""
    v = np.asarray(values, dtype=np.float64)
    std = v.std()
    if std == 0.0:
        return np.zeros_like(v)
    return (v - v.mean()) / std


@dataclass
class ZScoreTable:
    """Per task: best-over-layers metric across models, standardized."""

    models: list[str]
    tasks: list[str]
    raw: np.ndarray      # tasks x models
    z: np.ndarray        # tasks x models


def zscore_table(report: ProbeReport, family: str = "linear") -> ZScoreTable:
    models = report.models()
    if len(models) < 2:
        raise ProbingError("z-scores need at least 2 models")
    tasks = report.tasks()
    raw = np.zeros((len(tasks), len(models)))
    for ti, task in enumerate(tasks):
        for mi, model in enumerate(models):
            raw[ti, mi] = report.best_over_layers(model, task, family)
    z = np.vstack([zscores(row) for row in raw])
    return ZScoreTable(models=models, tasks=tasks, raw=raw, z=z)


def classify_trend(metrics_over_iterations, threshold: float = 0.6) -> str:
    """Spearman rank correlation of metric against pruning iteration."""
    v = np.asarray(metrics_over_iterations, dtype=np.float64)
    if v.size < 5:
        raise ProbingError("trend classification needs >= 5 models")
    if np.all(v == v[0]):
        return "sparsity-invariant"  # constant vector: rho undefined, no trend
    rho = stats.spearmanr(np.arange(v.size), v).statistic
    if np.isnan(rho):
        rho = 0.0
    if rho >= threshold:
        return "sparsity-improving"
    if rho <= -threshold:
        return "sparsity-degrading"
    return "sparsity-invariant"


def layer_group_summary(report: ProbeReport, grouping: dict[str, list[str]],
                        family: str = "linear") -> dict[str, np.ndarray]:
    """Mean per-(model, layer) z-score over each task group.

    Each task is standardized over the full (model x layer) grid so layer
    trends survive; the group cell is the mean of its tasks' z-scores.
    """
    models = report.models()
    layers = report.layers()
    out = {}
    for group, task_ids in grouping.items():
        if not task_ids:
            raise ProbingError(f"empty task group {group!r}")
        acc = np.zeros((len(models), len(layers)))
        for task in task_ids:
            grid = np.array([[report.metric(m, l, task, family)
                              for l in layers] for m in models])
            acc += zscores(grid.reshape(-1)).reshape(grid.shape)
        out[group] = acc / len(task_ids)
    return out
