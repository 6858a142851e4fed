"""Configuration-driven pipeline: generate -> train -> imp -> dump -> probe ->
similarity -> report, with content-addressed idempotence.

Each stage records an input digest (the config sections it reads plus the
checksums of its upstream artifacts) and the checksums of what it wrote. A
stage reruns only when that digest changes, its outputs went missing or
corrupt, or --force is given. All emitted files are deterministic functions
of (config, seed): reruns produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import corpus as corpus_mod
from . import dumps as dumps_mod
from . import model as model_mod
from . import probing as probing_mod
from . import pruning as pruning_mod
from . import similarity as sim_mod
from . import training as training_mod
from .checkpoint import load_checkpoint, save_checkpoint

SCHEMA_VERSION = 1
TOOL_VERSION = "0.1.0"

STAGES = ("generate", "train", "imp", "dump", "probe", "similarity", "report")

PAPER_VALUE_NON_GOALS = [
    "absolute test BLEU 27.77 (paper-scale WMT16 En-De training)",
    "NeuronSim magnitudes 0.82/0.71 at the eighth pruning iteration",
    "SVD 80%-variance ranks k=290 (dense) vs k=176 (sparse encoder)",
    "token-category similarities 0.95 (mid-frequency) / 0.87 (common, rare) / 0.79 (possessive)",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


class StageError(RuntimeError):
    """A stage could not run or produced inconsistent artifacts (exit code 2)."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "grammar": {
        "vocab_size": 1000,
        "zipf_exponent": 1.1,
        "n_tags": 8,
        "max_depth": 3,
        "nest_prob": 0.3,
        "phrase_len": [2, 3],
        "bracket_len": [2, 2],
        "lexicon": "permute",
        "reorder": True,
        "agreement": True,
        "vocab_seed": 20177,
    },
    "corpus": {"n_sentences": 6000, "splits": [0.8, 0.1, 0.1], "rare_threshold": 500},
    "model": {"num_layers": 2, "model_dim": 64, "num_heads": 4, "ffn_dim": 256,
              "max_len": 160, "dropout": 0.0},
    "training": {"epochs": 20, "batch_size": 48, "rewind_epoch": 10,
                 "warmup_steps": 400, "lr_scale": 0.5},
    "imp": {"k_max": 4, "rate": 0.2, "mode": "lr_rewind", "pruner": "magnitude",
            "with_random_baseline": True},
    "analysis": {"split": "valid"},
    "probe": {
        "families": ["linear", "mlp"],
        "tasks": ["token_tag", "parent_tag", "gparent_tag", "ggparent_tag",
                  "arc_pred", "arc_label", "same_head"],
        "replicates_hard": 5,
        "trend_threshold": 0.6,
        "max_epochs": 50,
        "patience": 3,
        "lr": 1e-3,
        "batch_size": 128,
        "seed": 17,
    },
    "similarity": {"svd_thresholds": [0.5, 0.8, 0.9],
                   "concentration_threshold": 0.95,
                   "freq_bin_edges": [5, 100, 500],
                   "min_group": 10},
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key!r} must be a table")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment settings with typed constructors for each module."""

    raw: dict

    @classmethod
    def load(cls, toml_path: str | Path | None = None,
             seed: int | None = None) -> "ExperimentConfig":
        raw = DEFAULT_CONFIG
        if toml_path is not None:
            try:
                with open(toml_path, "rb") as fh:
                    user = tomllib.load(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {toml_path}")
            except tomllib.TOMLDecodeError as err:
                raise ConfigError(f"config does not parse: {err}")
            raw = _merge(DEFAULT_CONFIG, user)
        if seed is not None:
            raw = dict(raw)
            raw["seed"] = int(seed)
        config = cls(raw=raw)
        config.validate()
        return config

    def validate(self) -> None:
        try:
            self.grammar()
            recipe = self.recipe()
        except (corpus_mod.GrammarError, training_mod.TrainingError) as err:
            raise ConfigError(str(err))
        imp = self.raw["imp"]
        if imp["k_max"] < 1:
            raise ConfigError("imp.k_max must be >= 1")
        if not 0.0 < imp["rate"] < 1.0:
            raise ConfigError("imp.rate must be in (0, 1)")
        if imp["mode"] not in ("lr_rewind", "weight_rewind"):
            raise ConfigError(f"unknown imp.mode {imp['mode']!r}")
        if imp["pruner"] not in ("magnitude", "random"):
            raise ConfigError(f"unknown imp.pruner {imp['pruner']!r}")
        if recipe.rewind_epoch >= recipe.epochs:
            raise ConfigError("training.rewind_epoch must precede training.epochs")
        for task in self.raw["probe"]["tasks"]:
            if task not in probing_mod.TASKS:
                raise ConfigError(f"unknown probe task {task!r}")
        for fam in self.raw["probe"]["families"]:
            if fam not in ("linear", "mlp"):
                raise ConfigError(f"unknown probe family {fam!r}")
        if self.raw["analysis"]["split"] not in ("train", "valid", "test"):
            raise ConfigError("analysis.split must be train/valid/test")
        splits = self.raw["corpus"]["splits"]
        if len(splits) != 3 or abs(sum(splits) - 1.0) > 1e-9:
            raise ConfigError("corpus.splits must be three fractions summing to 1")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def lineage_digest(self) -> str:
        """Digest of the sections that determine model/training artifacts.

        Checkpoints are stamped with this (not the full digest) so that
        analysis-only config edits don't invalidate rewind compatibility.
        """
        lineage = {"seed": self.seed,
                   **self.section("grammar", "corpus", "model", "training")}
        blob = json.dumps(lineage, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def grammar(self) -> corpus_mod.SyntheticGrammar:
        g = dict(self.raw["grammar"])
        g["phrase_len"] = tuple(g["phrase_len"])
        g["bracket_len"] = tuple(g["bracket_len"])
        return corpus_mod.SyntheticGrammar(**g)

    def inventory(self) -> corpus_mod.TokenInventory:
        return corpus_mod.TokenInventory(self.grammar(),
                                         self.raw["corpus"]["rare_threshold"])

    def model_config(self, inventory) -> model_mod.ModelConfig:
        m = self.raw["model"]
        return model_mod.ModelConfig(src_vocab=len(inventory.src_tokens),
                                     tgt_vocab=len(inventory.tgt_tokens), **m)

    def recipe(self) -> training_mod.TrainRecipe:
        t = self.raw["training"]
        return training_mod.TrainRecipe(seed=self.seed, **t)

    def section(self, *names) -> dict:
        return {n: self.raw[n] for n in names}


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def file_sha(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Append-only record of stage completions and their artifacts."""

    def __init__(self, path: Path):
        self.path = path
        if path.exists():
            self.data = json.loads(path.read_text())
        else:
            self.data = {"tool_version": TOOL_VERSION, "config_digest": None,
                         "stages": {}, "stage_graph": " -> ".join(STAGES)}

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        tmp.replace(self.path)

    def record(self, stage: str, input_digest: str, outputs: dict[str, str],
               wall_time: float) -> None:
        self.data["stages"][stage] = {
            "input_digest": input_digest,
            "outputs": outputs,
            "wall_time_s": round(wall_time, 3),
        }
        self.save()

    def up_to_date(self, stage: str, input_digest: str, root: Path) -> bool:
        rec = self.data["stages"].get(stage)
        if rec is None or rec["input_digest"] != input_digest:
            return False
        for rel, sha in rec["outputs"].items():
            p = root / rel
            if not p.exists() or file_sha(p) != sha:
                return False
        return True

    def outputs_of(self, stage: str) -> dict[str, str]:
        rec = self.data["stages"].get(stage)
        if rec is None:
            raise StageError(
                f"stage '{stage}' has not completed; run its prerequisites first")
        return rec["outputs"]

    def verify_outputs(self, stage: str, root: Path) -> None:
        for rel, sha in self.outputs_of(stage).items():
            p = root / rel
            if not p.exists():
                raise StageError(f"artifact missing for stage '{stage}': {rel}; "
                                 f"rerun that stage (or use --force)")
            if file_sha(p) != sha:
                raise StageError(f"artifact checksum mismatch for stage '{stage}':"
                                 f" {rel} is stale or corrupt; rerun with --force")


def _digest_of(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------

class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir: str | Path,
                 force: bool = False):
        self.config = config
        self.root = Path(out_dir)
        self.force = force
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.root / "manifest.json")
        digest = config.digest()
        self.manifest.data["config_digest"] = digest
        (self.root / "config.json").write_text(
            json.dumps({"digest": digest, "config": config.raw}, indent=2,
                       sort_keys=True))
        self.manifest.save()

    # -- helpers ------------------------------------------------------------

    def _run_stage(self, name: str, input_digest: str, fn) -> None:
        if not self.force and self.manifest.up_to_date(name, input_digest, self.root):
            print(f"[{name}] up to date, skipping")
            return
        print(f"[{name}] running")
        t0 = time.time()
        paths = fn()
        outputs = {str(Path(p).relative_to(self.root)): file_sha(Path(p))
                   for p in paths}
        self.manifest.record(name, input_digest, outputs, time.time() - t0)
        print(f"[{name}] done in {time.time() - t0:.1f}s ({len(outputs)} artifacts)")

    def _upstream_digest(self, *stages) -> dict:
        return {s: self.manifest.outputs_of(s) for s in stages}

    def run(self, stages=None) -> Manifest:
        wanted = list(stages) if stages else list(STAGES)
        for s in wanted:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}")
        order = [s for s in STAGES if s in wanted]
        for stage in order:
            getattr(self, f"_stage_{stage}")()
        return self.manifest

    # -- stages ---------------------------------------------------------------

    def _stage_generate(self) -> None:
        digest = _digest_of({"config": self.config.section("grammar", "corpus"),
                             "seed": self.config.seed})

        def fn():
            c = self.config.raw["corpus"]
            corpus = corpus_mod.generate_corpus(self.config.seed,
                                                c["n_sentences"],
                                                grammar=self.config.grammar(),
                                                splits=tuple(c["splits"]))
            corpus_dir = self.root / "corpus"
            corpus_mod.save_corpus(corpus, corpus_dir)
            return [corpus_dir / "manifest.json", corpus_dir / "sentences.jsonl"]

        self._run_stage("generate", digest, fn)

    def _load_corpus(self):
        self.manifest.verify_outputs("generate", self.root)
        return corpus_mod.load_corpus(self.root / "corpus")

    def _stage_train(self) -> None:
        self.manifest.verify_outputs("generate", self.root)
        digest = _digest_of({
            "config": self.config.section("grammar", "corpus", "model", "training"),
            "seed": self.config.seed,
            "upstream": self._upstream_digest("generate")})

        def fn():
            corpus = self._load_corpus()
            inventory = self.config.inventory()
            mconfig = self.config.model_config(inventory)
            registry = model_mod.ParameterRegistry.build(mconfig, self.config.seed)
            recipe = self.config.recipe()
            result = training_mod.train(mconfig, registry, None, corpus, inventory,
                                        recipe,
                                        config_digest=self.config.lineage_digest())
            training_mod.load_into_registry(registry, result.final.values)
            bleu = training_mod.evaluate_bleu(mconfig, registry, None, corpus,
                                              inventory, "test")
            base = self.root / "models" / "LTH0"
            base.mkdir(parents=True, exist_ok=True)
            save_checkpoint(result.final, base / "checkpoint.ckpt")
            save_checkpoint(result.rewind, base / "rewind.ckpt")
            (base / "metrics.json").write_text(json.dumps(
                {"bleu": bleu, "epoch_losses": result.epoch_losses}, indent=2))
            return [base / "checkpoint.ckpt", base / "rewind.ckpt",
                    base / "metrics.json"]

        self._run_stage("train", digest, fn)

    def _stage_imp(self) -> None:
        self.manifest.verify_outputs("train", self.root)
        digest = _digest_of({
            "config": self.config.section("imp"),
            "upstream": self._upstream_digest("generate", "train")})

        def fn():
            corpus = self._load_corpus()
            inventory = self.config.inventory()
            mconfig = self.config.model_config(inventory)
            recipe = self.config.recipe()
            base_dir = self.root / "models" / "LTH0"
            final = load_checkpoint(base_dir / "checkpoint.ckpt")
            rewind = load_checkpoint(base_dir / "rewind.ckpt")
            bleu0 = json.loads((base_dir / "metrics.json").read_text())["bleu"]
            base = training_mod.TrainResult(final=final, rewind=rewind)
            imp = self.config.raw["imp"]
            pruners = [imp["pruner"]]
            if imp["with_random_baseline"] and "random" not in pruners:
                pruners.append("random")
            outputs = []
            for pruner in pruners:
                family = pruning_mod.imp_run(
                    mconfig, corpus, inventory, recipe, k_max=imp["k_max"],
                    mode=imp["mode"], pruner=pruner, rate=imp["rate"],
                    config_digest=self.config.lineage_digest(),
                    base_result=base, base_bleu=bleu0)
                if family.diagnostic:
                    raise StageError(f"IMP diverged ({pruner}): {family.diagnostic}")
                fam_dir = self.root / "models" / pruner
                rows = []
                for entry in family.entries:
                    mdir = fam_dir / f"LTH{entry.k}"
                    mdir.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(entry.checkpoint, mdir / "checkpoint.ckpt")
                    pruning_mod.write_sparsity_csv(entry.sparsity,
                                                   mdir / "sparsity.csv")
                    (mdir / "sparsity.json").write_text(json.dumps(
                        pruning_mod.sparsity_aggregate_json(entry.sparsity),
                        indent=2, sort_keys=True))
                    rows.append({"k": entry.k, "bleu": entry.bleu,
                                 "sparsity_incl_emb": entry.sparsity.overall_incl_emb,
                                 "sparsity_excl_emb": entry.sparsity.overall_excl_emb})
                    outputs += [mdir / "checkpoint.ckpt", mdir / "sparsity.csv",
                                mdir / "sparsity.json"]
                (fam_dir / "family.json").write_text(
                    json.dumps({"pruner": pruner, "mode": imp["mode"],
                                "entries": rows}, indent=2, sort_keys=True))
                outputs.append(fam_dir / "family.json")
            return outputs

        self._run_stage("imp", digest, fn)

    def _analysis_models(self) -> list[tuple[str, int, Path]]:
        """(model id, iteration k, checkpoint path) for the analyzed family."""
        pruner = self.config.raw["imp"]["pruner"]
        out = [("LTH0", 0, self.root / "models" / "LTH0" / "checkpoint.ckpt")]
        for k in range(1, self.config.raw["imp"]["k_max"] + 1):
            out.append((f"LTH{k}", k,
                        self.root / "models" / pruner / f"LTH{k}" / "checkpoint.ckpt"))
        return out

    def _stage_dump(self) -> None:
        self.manifest.verify_outputs("imp", self.root)
        digest = _digest_of({
            "config": self.config.section("analysis"),
            "upstream": self._upstream_digest("generate", "train", "imp")})

        def fn():
            corpus = self._load_corpus()
            inventory = self.config.inventory()
            mconfig = self.config.model_config(inventory)
            split = self.config.raw["analysis"]["split"]
            corpus_digest = file_sha(self.root / "corpus" / "sentences.jsonl")[:16]
            outputs = []
            for model_id, _, ckpt_path in self._analysis_models():
                ckpt = load_checkpoint(ckpt_path)
                registry = model_mod.ParameterRegistry.build(mconfig,
                                                             self.config.seed)
                training_mod.load_into_registry(registry, ckpt.values)
                masks = ckpt.masks
                acts, attns = dumps_mod.collect_dumps(
                    mconfig, registry, masks, corpus, inventory, split,
                    model_id=model_id, config_digest=self.config.digest(),
                    corpus_digest=corpus_digest)
                ddir = self.root / "dumps" / model_id
                ddir.mkdir(parents=True, exist_ok=True)
                for (comp, layer), dump in sorted(acts.items()):
                    p = ddir / f"{comp}.{layer:02d}.dump"
                    dumps_mod.save_activation_dump(dump, p)
                    outputs.append(p)
                for (atype, layer), dump in sorted(attns.items()):
                    p = ddir / f"{atype}.{layer:02d}.dump"
                    dumps_mod.save_attention_dump(dump, p)
                    outputs.append(p)
            return outputs

        self._run_stage("dump", digest, fn)

    def _reports_dir(self) -> Path:
        d = self.root / "reports"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _stage_probe(self) -> None:
        self.manifest.verify_outputs("dump", self.root)
        digest = _digest_of({
            "config": self.config.section("probe", "analysis"),
            "upstream": self._upstream_digest("dump")})

        def fn():
            corpus = self._load_corpus()
            inventory = self.config.inventory()
            mconfig = self.config.model_config(inventory)
            split = self.config.raw["analysis"]["split"]
            sentences = corpus.split(split)
            subs = [inventory.encode_src(s)[1] for s in sentences]
            pconf = self.config.raw["probe"]
            frames = {t: probing_mod.build_task_frame(probing_mod.TASKS[t],
                                                      sentences,
                                                      seed=pconf["seed"])
                      for t in pconf["tasks"]}
            report = probing_mod.ProbeReport()
            for model_id, k, _ in self._analysis_models():
                for layer in range(1, mconfig.num_layers + 1):
                    dump = dumps_mod.load_activation_dump(
                        self.root / "dumps" / model_id / f"encoder.{layer:02d}.dump")
                    feats = probing_mod.sentence_token_features(
                        dump.values, dump.sent_table, subs)
                    for task_id, frame in frames.items():
                        dataset = probing_mod.assemble_dataset(frame, feats)
                        hard = probing_mod.TASKS[task_id].group == "hard_pair"
                        seeds = tuple(range(pconf["replicates_hard"])) if hard else (0,)
                        for family in pconf["families"]:
                            spec = probing_mod.ProbeSpec(
                                task_id=task_id, layer=layer, family=family,
                                hidden=mconfig.model_dim,
                                replicate_seeds=seeds, lr=pconf["lr"],
                                max_epochs=pconf["max_epochs"],
                                patience=pconf["patience"],
                                batch_size=pconf["batch_size"])
                            metric = probing_mod.train_probe(spec, dataset)
                            report.add(model=model_id, model_k=k, layer=layer,
                                       task=task_id, family=family, metric=metric)
            rdir = self._reports_dir()
            outputs = []

            p = rdir / "probe_metrics.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["model", "k", "layer", "task", "family", "metric"])
                for r in report.records:
                    w.writerow([r.model, r.model_k, r.layer, r.task, r.family,
                                _fmt(r.metric)])
            outputs.append(p)

            trends: dict[str, dict[str, str]] = {}
            p = rdir / "probe_zscores.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["family", "task", "model", "k", "best_metric", "zscore"])
                for family in pconf["families"]:
                    table = probing_mod.zscore_table(report, family=family)
                    trends[family] = {}
                    for ti, task in enumerate(table.tasks):
                        values = table.raw[ti]
                        if len(values) >= 5:
                            trends[family][task] = probing_mod.classify_trend(
                                values, threshold=pconf["trend_threshold"])
                        for mi, model in enumerate(table.models):
                            w.writerow([family, task, model, mi,
                                        _fmt(table.raw[ti, mi]),
                                        _fmt(table.z[ti, mi])])
            outputs.append(p)

            p = rdir / "probe_trends.json"
            p.write_text(json.dumps(trends, indent=2, sort_keys=True))
            outputs.append(p)

            grouping = {g: [t for t in pconf["tasks"]
                            if probing_mod.TASKS[t].group == g]
                        for g in probing_mod.GROUPS}
            grouping = {g: ts for g, ts in grouping.items() if ts}
            p = rdir / "probe_layer_groups.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["family", "group", "model", "layer", "mean_zscore"])
                for family in pconf["families"]:
                    summary = probing_mod.layer_group_summary(report, grouping,
                                                              family=family)
                    models = report.models()
                    layers = report.layers()
                    for group in sorted(summary):
                        grid = summary[group]
                        for mi, model in enumerate(models):
                            for li, layer in enumerate(layers):
                                w.writerow([family, group, model, layer,
                                            _fmt(grid[mi, li])])
            outputs.append(p)
            return outputs

        self._run_stage("probe", digest, fn)

    def _stage_similarity(self) -> None:
        self.manifest.verify_outputs("dump", self.root)
        digest = _digest_of({
            "config": self.config.section("similarity", "analysis"),
            "upstream": self._upstream_digest("dump")})

        def fn():
            corpus = self._load_corpus()
            inventory = self.config.inventory()
            mconfig = self.config.model_config(inventory)
            sconf = self.config.raw["similarity"]
            split = self.config.raw["analysis"]["split"]
            sentences = corpus.split(split)
            models = self._analysis_models()
            L = mconfig.num_layers
            rdir = self._reports_dir()
            outputs = []

            def act(model_id, comp, layer):
                return dumps_mod.load_activation_dump(
                    self.root / "dumps" / model_id / f"{comp}.{layer:02d}.dump")

            def attn(model_id, atype, layer):
                return dumps_mod.load_attention_dump(
                    self.root / "dumps" / model_id / f"{atype}.{layer:02d}.dump")

            # LayerSim heatmaps: (LTH0, LTHk) for every k, per component
            p = rdir / "layer_sim.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["component", "model_a", "model_b", "layer_a",
                            "layer_b", "cka"])
                for comp in ("encoder", "decoder"):
                    base = {l: act("LTH0", comp, l).matrix() for l in range(1, L + 1)}
                    for model_id, k, _ in models:
                        other = {l: act(model_id, comp, l).matrix()
                                 for l in range(1, L + 1)}
                        mat = sim_mod.layer_sim_heatmap(base, other, "LTH0", model_id)
                        for i, la in enumerate(mat.layers_a):
                            for j, lb in enumerate(mat.layers_b):
                                w.writerow([comp, "LTH0", model_id, la, lb,
                                            _fmt(mat.values[i, j])])
            outputs.append(p)

            # AttentionSim per attention type
            p = rdir / "attention_sim.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["attn_type", "model_a", "model_b", "layer_a",
                            "layer_b", "cka"])
                for atype in model_mod.ATTENTION_TYPES:
                    base = {l: attn("LTH0", atype, l).pair_matrix()
                            for l in range(1, L + 1)}
                    for model_id, k, _ in models:
                        other = {l: attn(model_id, atype, l).pair_matrix()
                                 for l in range(1, L + 1)}
                        for la in range(1, L + 1):
                            for lb in range(1, L + 1):
                                w.writerow([atype, "LTH0", model_id, la, lb,
                                            _fmt(sim_mod.attention_sim(base[la],
                                                                       other[lb]))])
            outputs.append(p)

            # NeuronSim against LTH0, layer-matched, plus max-corr histograms
            p = rdir / "neuron_sim.csv"
            q = rdir / "neuron_maxcorr.csv"
            with open(p, "w", newline="") as fp, open(q, "w", newline="") as fq:
                wp = csv.writer(fp)
                wq = csv.writer(fq)
                wp.writerow(["component", "layer", "model", "k", "score",
                             "match_rate", "dead_base", "dead_model"])
                wq.writerow(["component", "layer", "model", "k", "neuron",
                             "max_corr"])
                for comp in ("encoder", "decoder"):
                    for layer in range(1, L + 1):
                        base = act("LTH0", comp, layer).matrix()
                        for model_id, k, _ in models:
                            other = act(model_id, comp, layer).matrix()
                            res = sim_mod.neuron_sim(base, other)
                            wp.writerow([comp, layer, model_id, k,
                                         _fmt(res.score), _fmt(res.match_rate),
                                         res.dead_a, res.dead_b])
                            for n, c in enumerate(res.max_corrs):
                                wq.writerow([comp, layer, model_id, k, n, _fmt(c)])
            outputs += [p, q]

            # SVD of final-layer representations
            p = rdir / "svd_curves.csv"
            q = rdir / "svd_mink.csv"
            min_k_rows = []
            with open(p, "w", newline="") as fp, open(q, "w", newline="") as fq:
                wp = csv.writer(fp)
                wq = csv.writer(fq)
                wp.writerow(["model", "k", "component", "rank", "cumulative_variance"])
                wq.writerow(["model", "k", "component", "threshold", "min_k"])
                for model_id, k, _ in models:
                    for comp in ("encoder", "decoder"):
                        rep = sim_mod.svd_variance(
                            act(model_id, comp, L).values,
                            thresholds=tuple(sconf["svd_thresholds"]))
                        for r, c in enumerate(rep.cumulative, start=1):
                            wp.writerow([model_id, k, comp, r, _fmt(c)])
                        for t, mk in sorted(rep.min_k.items()):
                            wq.writerow([model_id, k, comp, _fmt(t), mk])
                            min_k_rows.append({"model": model_id, "component": comp,
                                               "threshold": t, "min_k": mk})
            outputs += [p, q]
            (rdir / "svd_mink.json").write_text(
                json.dumps(min_k_rows, indent=2, sort_keys=True))
            outputs.append(rdir / "svd_mink.json")

            # grouped similarity: dense vs sparsest, final encoder layer,
            # token-averaged rows
            last_id = models[-1][0]
            subs = [inventory.encode_src(s)[1] for s in sentences]
            base_dump = act("LTH0", "encoder", L)
            other_dump = act(last_id, "encoder", L)
            base_feats = np.concatenate(probing_mod.sentence_token_features(
                base_dump.values, base_dump.sent_table, subs))
            other_feats = np.concatenate(probing_mod.sentence_token_features(
                other_dump.values, other_dump.sent_table, subs))
            edges = sconf["freq_bin_edges"]

            def freq_bin(rank: int) -> str:
                if rank <= edges[0]:
                    return f"top-{edges[0]}"
                if rank <= edges[1]:
                    return f"{edges[0]}-{edges[1]}"
                if rank <= edges[2]:
                    return f"{edges[1]}-{edges[2]}"
                return f">{edges[2]}"

            vocab = corpus.vocab
            groupings: dict[str, list[str]] = {"frequency": [], "tag": [],
                                               "semantic": []}
            for s in sentences:
                for i in range(len(s.src)):
                    groupings["frequency"].append(freq_bin(s.freq_rank[i]))
                    groupings["tag"].append(corpus_mod.TAG_NAMES[s.tags[i]])
                    tid = s.src_type_ids[i]
                    groupings["semantic"].append(
                        "punct" if tid < 0 else f"sem{vocab.sem_class[tid]}")
            p = rdir / "grouped_similarity.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["grouping", "group", "size", "cka"])
                for gname in sorted(groupings):
                    res = sim_mod.grouped_similarity(
                        sim_mod.ActivationMatrix(base_feats),
                        sim_mod.ActivationMatrix(other_feats),
                        groupings[gname], min_group=sconf["min_group"])
                    for group in sorted(res.sizes):
                        score = res.scores.get(group)
                        w.writerow([gname, group, res.sizes[group],
                                    "" if score is None else _fmt(score)])
            outputs.append(p)

            # attention concentration
            p = rdir / "concentration.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["model", "k", "attn_type", "layer", "fraction"])
                for model_id, k, _ in models:
                    for atype in model_mod.ATTENTION_TYPES:
                        for layer in range(1, L + 1):
                            dump = attn(model_id, atype, layer)
                            frac = sim_mod.attention_concentration(
                                dump.distributions(),
                                threshold=sconf["concentration_threshold"])
                            w.writerow([model_id, k, atype, layer, _fmt(frac)])
            outputs.append(p)
            return outputs

        self._run_stage("similarity", digest, fn)

    def _stage_report(self) -> None:
        for stage in ("imp", "probe", "similarity"):
            self.manifest.verify_outputs(stage, self.root)
        digest = _digest_of({
            "upstream": self._upstream_digest("imp", "probe", "similarity")})

        def fn():
            rdir = self._reports_dir()
            outputs = []
            imp = self.config.raw["imp"]
            pruner = imp["pruner"]
            fam = json.loads((self.root / "models" / pruner /
                              "family.json").read_text())
            random_bleu = {}
            if imp["with_random_baseline"]:
                rf = json.loads((self.root / "models" / "random" /
                                 "family.json").read_text())
                random_bleu = {e["k"]: e["bleu"] for e in rf["entries"]}

            table = []
            p = rdir / "table_family.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["k", "sparsity_incl_emb", "sparsity_excl_emb",
                            "bleu_magnitude", "bleu_random"])
                for e in fam["entries"]:
                    rb = random_bleu.get(e["k"])
                    w.writerow([e["k"], _fmt(e["sparsity_incl_emb"]),
                                _fmt(e["sparsity_excl_emb"]), _fmt(e["bleu"]),
                                "" if rb is None else _fmt(rb)])
                    table.append({"k": e["k"],
                                  "sparsity_incl_emb": e["sparsity_incl_emb"],
                                  "sparsity_excl_emb": e["sparsity_excl_emb"],
                                  "bleu_magnitude": e["bleu"],
                                  "bleu_random": rb})
            outputs.append(p)

            # per-module sparsity trajectories
            p = rdir / "module_sparsity.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["k", "component", "layer", "group", "kept", "total",
                            "sparsity"])
                for model_id, k, ckpt in self._analysis_models():
                    spath = (self.root / "models" / pruner / f"LTH{k}"
                             / "sparsity.json")
                    if not spath.exists():
                        raise StageError(f"report input missing: {spath}")
                    agg = json.loads(spath.read_text())
                    for g in agg["groups"]:
                        w.writerow([k, g["component"], g["layer"], g["group"],
                                    g["kept"], g["total"], _fmt(g["sparsity"])])
            outputs.append(p)

            trends = json.loads((rdir / "probe_trends.json").read_text())
            min_k_rows = json.loads((rdir / "svd_mink.json").read_text())

            files = {
                "family_table": "table_family.csv",
                "module_sparsity": "module_sparsity.csv",
                "probe_metrics": "probe_metrics.csv",
                "probe_zscores": "probe_zscores.csv",
                "probe_layer_groups": "probe_layer_groups.csv",
                "layer_sim": "layer_sim.csv",
                "attention_sim": "attention_sim.csv",
                "neuron_sim": "neuron_sim.csv",
                "neuron_maxcorr": "neuron_maxcorr.csv",
                "svd_curves": "svd_curves.csv",
                "svd_mink": "svd_mink.csv",
                "grouped_similarity": "grouped_similarity.csv",
                "concentration": "concentration.csv",
            }
            for rel in files.values():
                if not (rdir / rel).exists():
                    raise StageError(f"report input missing: reports/{rel}")

            bundle = {
                "schema_version": SCHEMA_VERSION,
                "config_digest": self.config.digest(),
                "iterations": [e["k"] for e in fam["entries"]],
                "family_table": table,
                "probe_trends": trends,
                "svd_min_k": min_k_rows,
                "files": files,
                "non_goals": PAPER_VALUE_NON_GOALS,
            }
            validate_bundle(bundle)
            p = rdir / "bundle.json"
            p.write_text(json.dumps(bundle, indent=2, sort_keys=True))
            outputs.append(p)
            return outputs

        self._run_stage("report", digest, fn)


def bundle_schema() -> dict:
    schema_path = Path(__file__).parent / "schemas" / "report_bundle.schema.json"
    return json.loads(schema_path.read_text())


def validate_bundle(bundle: dict) -> None:
    import jsonschema
    jsonschema.validate(bundle, bundle_schema())
