"""Seq2seq training: Adam, rewindable LR schedule, masked updates, eval BLEU.

Rewinding follows the pruning literature's LR-rewinding recipe: after each
prune the step counter is reset to the stored rewind point and training
continues to the original epoch budget with the weights left in place
(or restored from the stored checkpoint in weight-rewinding mode).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import model as model_mod
from .checkpoint import Checkpoint, snapshot_array


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class LRSchedule:
    """Inverse-sqrt schedule with linear warmup, in units of optimizer steps."""

    warmup_steps: int = 300
    scale: float = 1.0
    model_dim: int = 64
    steps_per_epoch: int = 1
    total_epochs: int = 0

    def lr(self, step: int) -> float:
        if step < 1:
            raise TrainingError("schedule is defined for steps >= 1")
        s = float(step)
        return (self.scale * self.model_dim ** -0.5
                * min(s ** -0.5, s * self.warmup_steps ** -1.5))

    def epoch_start_step(self, epoch: int) -> int:
        """Completed-step count at the start of `epoch` (0-based)."""
        return epoch * self.steps_per_epoch


@dataclass
class OptimizerState:
    """Adam moments per parameter path plus the global step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def fresh(cls, registry, beta1=0.9, beta2=0.98, eps=1e-9) -> "OptimizerState":
        return cls(m={p: np.zeros(t.shape) for p, t in registry.items()},
                   v={p: np.zeros(t.shape) for p, t in registry.items()},
                   step=0, beta1=beta1, beta2=beta2, eps=eps)

    def apply(self, registry, masks, lr: float) -> None:
        """One Adam step; gradients and updated weights stay exactly masked."""
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for path, p in registry.items():
            g = p.grad
            if g is None:
                continue
            mask = masks.get(path) if masks else None
            if mask is not None:
                g = g * mask
            m = self.m[path]
            v = self.v[path]
            np.multiply(m, self.beta1, out=m)
            m += (1.0 - self.beta1) * g
            np.multiply(v, self.beta2, out=v)
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            p.data -= (lr / bc1) * m / denom
            if mask is not None:
                p.data *= mask


def rewind_lr(state: OptimizerState, schedule: LRSchedule, to_epoch: int,
              retain_moments: bool = False) -> OptimizerState:
    """Reset the step counter to the start of `to_epoch`; weights untouched.

    Adam moments are zeroed unless `retain_moments` (stale moments for newly
    masked coordinates are meaningless, so reset is the default).
    """
    if to_epoch < 0 or (schedule.total_epochs and to_epoch > schedule.total_epochs):
        raise TrainingError(f"rewind epoch {to_epoch} outside schedule range")
    out = OptimizerState(
        m={p: (a.copy() if retain_moments else np.zeros_like(a))
           for p, a in state.m.items()},
        v={p: (a.copy() if retain_moments else np.zeros_like(a))
           for p, a in state.v.items()},
        step=schedule.epoch_start_step(to_epoch),
        beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return out


def rewind_weights(masks, stored: Checkpoint, config_digest: str,
                   schedule: LRSchedule):
    """Restore unmasked weights from the stored checkpoint; masked stay 0.

    Returns (values dict, OptimizerState) with the LR rewound to the stored
    epoch. The stored checkpoint must come from the same configuration.
    """
    if stored.config_digest != config_digest:
        raise TrainingError("checkpoint config digest mismatch")
    values = {}
    for path, arr in stored.values.items():
        v = arr.copy()
        mask = masks.get(path) if masks else None
        if mask is not None:
            v = v * mask
        values[path] = v
    opt = OptimizerState(
        m={p: np.zeros_like(a) for p, a in stored.values.items()},
        v={p: np.zeros_like(a) for p, a in stored.values.items()},
        step=schedule.epoch_start_step(stored.epoch),
        beta1=stored.adam["beta1"], beta2=stored.adam["beta2"],
        eps=stored.adam["eps"])
    return values, opt


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class EncodedSentence:
    src: np.ndarray      # subtoken ids
    tgt_in: np.ndarray   # BOS + target ids
    tgt_out: np.ndarray  # target ids + EOS


def encode_split(corpus, inventory, split: str) -> list[EncodedSentence]:
    out = []
    for s in corpus.split(split):
        src_ids, _ = inventory.encode_src(s)
        tgt_ids = inventory.encode_tgt(s)
        out.append(EncodedSentence(
            src=np.asarray(src_ids, dtype=np.int64),
            tgt_in=np.asarray([inventory.bos_id] + tgt_ids, dtype=np.int64),
            tgt_out=np.asarray(tgt_ids + [inventory.eos_id], dtype=np.int64)))
    return out


IGNORE_INDEX = -1


def steps_per_epoch(encoded, batch_size: int) -> int:
    return (len(encoded) + batch_size - 1) // batch_size


def epoch_batches(encoded, batch_size: int, rng) -> list[np.ndarray]:
    """Length-sorted chunks with shuffled ties and shuffled batch order.

    Sorting keeps padding waste small; the per-epoch permutation varies both
    batch composition (among equal lengths) and batch order.
    """
    perm = rng.permutation(len(encoded))
    keys = np.array([(len(encoded[i].src), len(encoded[i].tgt_in))
                     for i in perm])
    order = perm[np.lexsort((keys[:, 1], keys[:, 0]))]
    chunks = [order[j:j + batch_size] for j in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def _stack(encoded, idx):
    """Right-pad a batch; returns ids, validity masks, and ignore-padded targets."""
    ts = max(len(encoded[i].src) for i in idx)
    tt = max(len(encoded[i].tgt_in) for i in idx)
    B = len(idx)
    src = np.zeros((B, ts), dtype=np.int64)
    src_valid = np.zeros((B, ts), dtype=bool)
    tgt_in = np.zeros((B, tt), dtype=np.int64)
    tgt_valid = np.zeros((B, tt), dtype=bool)
    tgt_out = np.full((B, tt), IGNORE_INDEX, dtype=np.int64)
    for row, i in enumerate(idx):
        e = encoded[i]
        ns, nt = len(e.src), len(e.tgt_in)
        src[row, :ns] = e.src
        src_valid[row, :ns] = True
        tgt_in[row, :nt] = e.tgt_in
        tgt_valid[row, :nt] = True
        tgt_out[row, :nt] = e.tgt_out
    return src, src_valid, tgt_in, tgt_valid, tgt_out


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 16
    batch_size: int = 64
    seed: int = 0
    rewind_epoch: int = 8
    warmup_steps: int = 300
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    retain_moments_on_rewind: bool = False

    def __post_init__(self):
        if not 0 <= self.rewind_epoch <= self.epochs:
            raise TrainingError("rewind_epoch must lie within the epoch budget")


@dataclass
class TrainResult:
    final: Checkpoint
    rewind: Checkpoint | None
    epoch_losses: list[float] = field(default_factory=list)


def _snapshot(registry, masks, opt: OptimizerState, epoch: int,
              config_digest: str, rng, schedule: LRSchedule) -> Checkpoint:
    """Freeze state into a checkpoint, rounding through float32 once.

    The live registry is left untouched; consumers that continue from a
    checkpoint (the IMP loop, the pipeline stages) reload its values so that
    what runs next is exactly what a reader of the checkpoint file sees.
    """
    values = {path: snapshot_array(p.data) for path, p in registry.items()}
    return Checkpoint(
        values=values,
        masks={p: a.copy() for p, a in masks.items()} if masks else None,
        opt_m={p: snapshot_array(a) for p, a in opt.m.items()},
        opt_v={p: snapshot_array(a) for p, a in opt.v.items()},
        step=opt.step, epoch=epoch, config_digest=config_digest,
        adam={"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        schedule={"warmup_steps": schedule.warmup_steps, "scale": schedule.scale,
                  "model_dim": schedule.model_dim,
                  "steps_per_epoch": schedule.steps_per_epoch,
                  "total_epochs": schedule.total_epochs},
        rng_state=copy.deepcopy(rng.bit_generator.state))


def train(config: model_mod.ModelConfig, registry, masks, corpus, inventory,
          recipe: TrainRecipe, config_digest: str = "",
          start_epoch: int = 0, opt: OptimizerState | None = None,
          rng: np.random.Generator | None = None) -> TrainResult:
    """Train from `start_epoch` to the recipe's epoch budget.

    Masked coordinates receive zero gradient and are re-masked after every
    update, so pruned weights stay exactly 0.0 throughout. A checkpoint is
    captured at the end of the rewind epoch (when crossed) and at completion.
    """
    encoded = encode_split(corpus, inventory, "train")
    if not encoded:
        raise TrainingError("empty training corpus")
    spe = steps_per_epoch(encoded, recipe.batch_size)
    schedule = LRSchedule(warmup_steps=recipe.warmup_steps, scale=recipe.lr_scale,
                          model_dim=config.model_dim, steps_per_epoch=spe,
                          total_epochs=recipe.epochs)
    if rng is None:
        rng = np.random.default_rng(recipe.seed)
    if opt is None:
        opt = OptimizerState.fresh(registry, beta1=recipe.beta1,
                                   beta2=recipe.beta2, eps=recipe.adam_eps)
        opt.step = schedule.epoch_start_step(start_epoch)
    masks = masks or {}
    rewind_ckpt: Checkpoint | None = None
    losses: list[float] = []
    dropout_rng = rng if config.dropout > 0 else None
    for epoch in range(start_epoch, recipe.epochs):
        epoch_loss = 0.0
        n = 0
        for idx in epoch_batches(encoded, recipe.batch_size, rng):
            src, src_valid, tgt_in, tgt_valid, tgt_out = _stack(encoded, idx)
            registry.zero_grads()
            try:
                res = model_mod.forward(config, registry, masks, src, tgt_in,
                                        dropout_rng=dropout_rng,
                                        src_valid=src_valid, tgt_valid=tgt_valid)
                loss = ad.cross_entropy(res.logits, tgt_out,
                                        ignore_index=IGNORE_INDEX)
                loss.backward()
            except ad.NumericsError as err:
                raise TrainingDiverged(
                    f"divergence at epoch {epoch} step {opt.step + 1}: {err}"
                ) from err
            opt.apply(registry, masks, schedule.lr(opt.step + 1))
            epoch_loss += loss.item() * len(idx)
            n += len(idx)
        losses.append(epoch_loss / n)
        if epoch + 1 == recipe.rewind_epoch:
            rewind_ckpt = _snapshot(registry, masks, opt, recipe.rewind_epoch,
                                    config_digest, rng, schedule)
    final = _snapshot(registry, masks, opt, recipe.epochs, config_digest, rng,
                      schedule)
    return TrainResult(final=final, rewind=rewind_ckpt, epoch_losses=losses)


def load_into_registry(registry, values: dict[str, np.ndarray]) -> None:
    for path, arr in values.items():
        registry[path].data = np.asarray(arr, dtype=np.float64).copy()


def evaluate_bleu(config, registry, masks, corpus, inventory, split: str,
                  batch_size: int = 64) -> float:
    """Corpus BLEU of greedy decodes against the gold targets of `split`."""
    sentences = corpus.split(split)
    if not sentences:
        raise TrainingError(f"empty split {split!r}")
    encoded = [inventory.encode_src(s)[0] for s in sentences]
    hyps: list[list[str] | None] = [None] * len(sentences)
    order = sorted(range(len(encoded)), key=lambda i: (len(encoded[i]), i))
    for j in range(0, len(order), batch_size):
        chunk = order[j:j + batch_size]
        ts = max(len(encoded[i]) for i in chunk)
        src = np.zeros((len(chunk), ts), dtype=np.int64)
        src_valid = np.zeros((len(chunk), ts), dtype=bool)
        for row, i in enumerate(chunk):
            src[row, :len(encoded[i])] = encoded[i]
            src_valid[row, :len(encoded[i])] = True
        cap = min(config.max_len - 1, 2 * ts + 8)
        outs = model_mod.greedy_decode(config, registry, masks, src,
                                       bos_id=inventory.bos_id,
                                       eos_id=inventory.eos_id, max_len=cap,
                                       src_valid=src_valid)
        for i, ids in zip(chunk, outs):
            hyps[i] = inventory.decode_tgt(ids)
    refs = [s.tgt for s in sentences]
    return corpus_mod.corpus_bleu(hyps, refs)
