"""Global magnitude pruning and the iterative prune-rewind-retrain loop.

The prunable universe is the non-embedding weight matrices (attention
projections and FC layers); embeddings, the output projection, and the
layer-norm vectors are never pruned. Each iteration masks a fraction of the
*remaining* unmasked weights, chosen by a single global magnitude threshold
with a deterministic (path, flat index) tie-break, so the excl-embedding
sparsity after k iterations at rate r is 1-(1-r)^k up to floor rounding.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import training as training_mod
from .checkpoint import Checkpoint
from .training import TrainingDiverged


class PruningError(ValueError):
    pass


MaskSet = dict[str, np.ndarray]  # prunable path -> float 0/1 array


def full_masks(registry) -> MaskSet:
    """All-ones masks over the prunable paths."""
    return {p: np.ones(t.shape) for p, t in registry.items()
            if model_mod.is_prunable(p)}


def masked_fraction(masks: MaskSet) -> float:
    total = sum(m.size for m in masks.values())
    kept = sum(int(m.sum()) for m in masks.values())
    return 1.0 - kept / total


def _unmasked_entries(registry, masks: MaskSet):
    """(path order, magnitudes, path idx, flat idx) for currently kept weights."""
    paths = sorted(masks.keys())
    mags, path_idx, flat_idx = [], [], []
    for pi, p in enumerate(paths):
        m = masks[p].reshape(-1).astype(bool)
        w = registry[p].data.reshape(-1)
        keep = np.nonzero(m)[0]
        mags.append(np.abs(w[keep]))
        path_idx.append(np.full(keep.size, pi, dtype=np.int64))
        flat_idx.append(keep)
    return (paths, np.concatenate(mags), np.concatenate(path_idx),
            np.concatenate(flat_idx))


def _apply_prune(masks: MaskSet, paths, path_idx, flat_idx, chosen) -> MaskSet:
    out = {p: m.copy() for p, m in masks.items()}
    for pi, fi in zip(path_idx[chosen], flat_idx[chosen]):
        out[paths[pi]].reshape(-1)[fi] = 0.0
    return out


def magnitude_prune(registry, masks: MaskSet, rate: float) -> MaskSet:
    """Mask the `rate` fraction of the smallest-|w| currently kept weights.

    The threshold is global across all prunable paths; ties break on
    lexicographic (path, flat index). Count is floor(rate * kept).
    """
    if not 0.0 < rate < 1.0:
        raise PruningError("rate must be in (0, 1)")
    paths, mags, path_idx, flat_idx = _unmasked_entries(registry, masks)
    if mags.size == 0:
        raise PruningError("nothing left to prune")
    n_prune = int(rate * mags.size)
    if n_prune == 0:
        return {p: m.copy() for p, m in masks.items()}
    order = np.lexsort((flat_idx, path_idx, mags))
    return _apply_prune(masks, paths, path_idx, flat_idx, order[:n_prune])


def random_prune(registry, masks: MaskSet, rate: float, seed) -> MaskSet:
    """Mask the same count as magnitude_prune, chosen uniformly at random."""
    if not 0.0 < rate < 1.0:
        raise PruningError("rate must be in (0, 1)")
    paths, mags, path_idx, flat_idx = _unmasked_entries(registry, masks)
    if mags.size == 0:
        raise PruningError("nothing left to prune")
    n_prune = int(rate * mags.size)
    if n_prune == 0:
        return {p: m.copy() for p, m in masks.items()}
    rng = np.random.default_rng(seed)
    chosen = rng.choice(mags.size, size=n_prune, replace=False)
    return _apply_prune(masks, paths, path_idx, flat_idx, chosen)


# ---------------------------------------------------------------------------
# sparsity accounting
# ---------------------------------------------------------------------------

_GROUP_OF_KIND = {"self_attn": "self_attn", "cross_attn": "cross_attn",
                  "fc1": "fc", "fc2": "fc", "ffn": "ln"}


def _group(path: str) -> tuple[str, int, str] | None:
    parts = path.split(".")
    if parts[0] not in ("encoder", "decoder"):
        return None
    component, layer = parts[0], int(parts[1])
    kind = parts[2]
    if kind in ("self_attn", "cross_attn") and parts[3].startswith("ln"):
        return component, layer, "ln"
    return component, layer, _GROUP_OF_KIND[kind]


@dataclass
class SparsityReport:
    """Exact per-path and aggregated zero fractions for one mask set."""

    per_path: dict[str, tuple[int, int]]             # path -> (kept, total)
    aggregates: dict[tuple[str, int, str], tuple[int, int]]
    overall_incl_emb: float
    overall_excl_emb: float

    def sparsity(self, path: str) -> float:
        kept, total = self.per_path[path]
        return 1.0 - kept / total

    def group_sparsity(self, component: str, layer: int, group: str) -> float:
        kept, total = self.aggregates[(component, layer, group)]
        return 1.0 - kept / total


def sparsity_report(registry, masks: MaskSet) -> SparsityReport:
    per_path: dict[str, tuple[int, int]] = {}
    aggregates: dict[tuple[str, int, str], list[int]] = {}
    pruned = 0
    for path, p in registry.items():
        total = p.size
        mask = masks.get(path)
        kept = total if mask is None else int(mask.sum())
        per_path[path] = (kept, total)
        pruned += total - kept
        key = _group(path)
        if key is not None:
            acc = aggregates.setdefault(key, [0, 0])
            acc[0] += kept
            acc[1] += total
    n_all = model_mod.count_params(registry, "all")
    n_prunable = model_mod.count_params(registry, "non_embedding")
    return SparsityReport(
        per_path=per_path,
        aggregates={k: (a[0], a[1]) for k, a in sorted(aggregates.items())},
        overall_incl_emb=pruned / n_all,
        overall_excl_emb=pruned / n_prunable)


def write_sparsity_csv(report: SparsityReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "kept", "total", "sparsity"])
        for p, (kept, total) in sorted(report.per_path.items()):
            w.writerow([p, kept, total, f"{1.0 - kept / total:.10g}"])


def sparsity_aggregate_json(report: SparsityReport) -> dict:
    return {
        "overall_incl_emb": report.overall_incl_emb,
        "overall_excl_emb": report.overall_excl_emb,
        "groups": [
            {"component": c, "layer": layer, "group": g,
             "kept": kept, "total": total, "sparsity": 1.0 - kept / total}
            for (c, layer, g), (kept, total) in sorted(report.aggregates.items())
        ],
    }


# ---------------------------------------------------------------------------
# the IMP loop
# ---------------------------------------------------------------------------

@dataclass
class IterationEntry:
    k: int
    checkpoint: Checkpoint
    masks: MaskSet
    bleu: float
    sparsity: SparsityReport


@dataclass
class LthFamily:
    """Ordered LTH0..LTHk models; k=0 is the unpruned one."""

    mode: str
    pruner: str
    entries: list[IterationEntry] = field(default_factory=list)
    diagnostic: str | None = None

    def append(self, entry: IterationEntry) -> None:
        if self.entries and (entry.sparsity.overall_excl_emb
                             <= self.entries[-1].sparsity.overall_excl_emb):
            raise PruningError("sparsity must strictly increase across iterations")
        self.entries.append(entry)

    def iterations(self) -> list[int]:
        return [e.k for e in self.entries]


def imp_run(config, corpus, inventory, recipe, k_max: int,
            mode: str = "lr_rewind", pruner: str = "magnitude",
            rate: float = 0.2, config_digest: str = "",
            eval_split: str = "test",
            base_result: training_mod.TrainResult | None = None,
            base_bleu: float | None = None) -> LthFamily:
    """Full IMP experiment: train LTH0, then prune-rewind-retrain k_max times.

    `base_result`/`base_bleu` let several pruner variants share one trained
    LTH0. On training divergence the family is returned truncated, with the
    diagnostic recorded.
    """
    if k_max < 1:
        raise PruningError("k_max must be >= 1")
    if mode not in ("lr_rewind", "weight_rewind"):
        raise PruningError(f"unknown rewind mode {mode!r}")
    if pruner not in ("magnitude", "random"):
        raise PruningError(f"unknown pruner {pruner!r}")
    if recipe.rewind_epoch >= recipe.epochs:
        raise PruningError("rewind epoch must precede the end of training")

    registry = model_mod.ParameterRegistry.build(config, seed=recipe.seed)
    if base_result is None:
        base_result = training_mod.train(config, registry, None, corpus,
                                         inventory, recipe,
                                         config_digest=config_digest)
    training_mod.load_into_registry(registry, base_result.final.values)
    masks = full_masks(registry)
    if base_bleu is None:
        base_bleu = training_mod.evaluate_bleu(config, registry, masks, corpus,
                                               inventory, eval_split)
    family = LthFamily(mode=mode, pruner=pruner)
    ckpt0 = base_result.final
    if ckpt0.masks is None:
        ckpt0.masks = {p: m.copy() for p, m in masks.items()}
    family.append(IterationEntry(k=0, checkpoint=ckpt0, masks=masks,
                                 bleu=base_bleu,
                                 sparsity=sparsity_report(registry, masks)))
    rewind_ckpt = base_result.rewind
    if rewind_ckpt is None:
        raise PruningError("base training produced no rewind checkpoint")

    schedule = training_mod.LRSchedule(**rewind_ckpt.schedule)
    for k in range(1, k_max + 1):
        if pruner == "magnitude":
            masks = magnitude_prune(registry, masks, rate)
        else:
            masks = random_prune(registry, masks, rate,
                                 seed=[recipe.seed, 7001, k])
        if mode == "weight_rewind":
            values, opt = training_mod.rewind_weights(masks, rewind_ckpt,
                                                      config_digest, schedule)
            training_mod.load_into_registry(registry, values)
        else:
            # LR rewinding: weights carry over, newly masked ones zeroed
            for path, m in masks.items():
                registry[path].data *= m
            opt = None
        rng = np.random.default_rng([recipe.seed, 4099, k,
                                     0 if pruner == "magnitude" else 1])
        try:
            result = training_mod.train(config, registry, masks, corpus,
                                        inventory, recipe,
                                        config_digest=config_digest,
                                        start_epoch=recipe.rewind_epoch,
                                        opt=opt, rng=rng)
        except TrainingDiverged as err:
            family.diagnostic = f"iteration {k}: {err}"
            return family
        training_mod.load_into_registry(registry, result.final.values)
        bleu = training_mod.evaluate_bleu(config, registry, masks, corpus,
                                          inventory, eval_split)
        ckpt = result.final
        ckpt.masks = {p: m.copy() for p, m in masks.items()}
        family.append(IterationEntry(k=k, checkpoint=ckpt, masks=masks,
                                     bleu=bleu,
                                     sparsity=sparsity_report(registry, masks)))
    return family
