"""Figure rendering for report bundles.

Reads only the documented CSV/JSON files of a report bundle directory and
writes deterministic PNGs: fixed styles, fixed dpi, no timestamps or
software metadata. Color scales are pinned per metric family ([0,1] for CKA
heatmaps, [-1,1] for correlations) so images are comparable across runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

CKA_BOUNDS = (0.0, 1.0)
CORR_BOUNDS = (-1.0, 1.0)
_SAVE_KW = {"dpi": 110, "metadata": {"Software": None, "Creation Time": None}}


class RenderError(ValueError):
    pass


@dataclass
class FigureSpec:
    kind: str                 # heatmap | lines | histogram | grid
    name: str
    inputs: list[str]
    out: str
    title: str = ""
    color_bounds: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("heatmap", "lines", "histogram", "grid"):
            raise RenderError(f"unknown figure kind {self.kind!r}")
        if self.color_bounds is not None and not all(
                np.isfinite(self.color_bounds)):
            raise RenderError("color bounds must be finite")


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _require_columns(rows: list[dict], needed: set[str], path: Path) -> None:
    have = set(rows[0].keys()) if rows else set()
    if not needed <= have:
        raise RenderError(f"{path.name}: schema mismatch; missing columns "
                          f"{sorted(needed - have)}, found {sorted(have)}")


def _pivot(rows, row_key, col_key, val_key):
    r_labels = sorted({r[row_key] for r in rows}, key=_label_key)
    c_labels = sorted({r[col_key] for r in rows}, key=_label_key)
    grid = np.full((len(r_labels), len(c_labels)), np.nan)
    for r in rows:
        i = r_labels.index(r[row_key])
        j = c_labels.index(r[col_key])
        if r[val_key] != "":
            grid[i, j] = float(r[val_key])
    return r_labels, c_labels, grid


def _label_key(label: str):
    try:
        return (0, float(label), "")
    except ValueError:
        return (1, 0.0, label)


def _heatmap(ax, grid, r_labels, c_labels, bounds, cell_text=True):
    vmin, vmax = bounds if bounds else (np.nanmin(grid), np.nanmax(grid))
    im = ax.imshow(grid, vmin=vmin, vmax=vmax, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(c_labels)), c_labels, rotation=45, ha="right",
                  fontsize=7)
    ax.set_yticks(range(len(r_labels)), r_labels, fontsize=7)
    if cell_text and grid.size <= 400:
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                            fontsize=6,
                            color="white" if grid[i, j] < (vmin + vmax) / 2
                            else "black")
    return im


def render(spec: FigureSpec, bundle_dir: str | Path) -> Path:
    """Render one figure; returns the written image path."""
    bundle = Path(bundle_dir)
    for rel in spec.inputs:
        if not (bundle / rel).exists():
            raise RenderError(f"input missing: {rel}")
    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig = _FIGURES[spec.name](spec, bundle)
    fig.savefig(out, **_SAVE_KW)
    plt.close(fig)
    return out


# -- figure builders, one per standard figure --------------------------------

def _fig_probe_zgrid(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"family", "task", "model", "zscore"},
                     bundle / spec.inputs[0])
    family = spec.meta["family"]
    rows = [r for r in rows if r["family"] == family]
    if not rows:
        raise RenderError(f"no rows for probe family {family!r}")
    models, tasks, grid = _pivot(rows, "model", "task", "zscore")
    fig, ax = plt.subplots(figsize=(7, 4.2))
    _heatmap(ax, grid, models, tasks, (-2.0, 2.0))
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_layer_groups(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"family", "group", "model", "layer", "mean_zscore"},
                     bundle / spec.inputs[0])
    family = spec.meta["family"]
    groups = sorted({r["group"] for r in rows if r["family"] == family})
    fig, axes = plt.subplots(1, max(len(groups), 1),
                             figsize=(3.2 * max(len(groups), 1), 3.2))
    axes = np.atleast_1d(axes)
    for ax, group in zip(axes, groups):
        sub = [r for r in rows if r["family"] == family and r["group"] == group]
        layers, models, grid = _pivot(sub, "layer", "model", "mean_zscore")
        _heatmap(ax, grid, layers, models, (-2.0, 2.0), cell_text=False)
        ax.set_title(group, fontsize=8)
        ax.set_ylabel("layer", fontsize=7)
    fig.suptitle(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_layer_sim(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"component", "model_a", "model_b", "layer_a",
                            "layer_b", "cka"}, bundle / spec.inputs[0])
    component = spec.meta["component"]
    model_b = spec.meta["model_b"]
    sub = [r for r in rows if r["component"] == component
           and r["model_b"] == model_b]
    if not sub:
        raise RenderError(f"no layer_sim rows for {component}/{model_b}")
    la, lb, grid = _pivot(sub, "layer_a", "layer_b", "cka")
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    _heatmap(ax, grid, la, lb, CKA_BOUNDS)
    ax.set_xlabel(f"{model_b} layer", fontsize=8)
    ax.set_ylabel("LTH0 layer", fontsize=8)
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_attention_sim(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"attn_type", "model_b", "layer_a", "layer_b", "cka"},
                     bundle / spec.inputs[0])
    attn_type = spec.meta["attn_type"]
    model_b = spec.meta["model_b"]
    sub = [r for r in rows if r["attn_type"] == attn_type
           and r["model_b"] == model_b]
    if not sub:
        raise RenderError(f"no attention_sim rows for {attn_type}/{model_b}")
    la, lb, grid = _pivot(sub, "layer_a", "layer_b", "cka")
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    _heatmap(ax, grid, la, lb, CKA_BOUNDS)
    ax.set_xlabel(f"{model_b} layer", fontsize=8)
    ax.set_ylabel("LTH0 layer", fontsize=8)
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_neuron_sim_lines(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"component", "layer", "k", "score"},
                     bundle / spec.inputs[0])
    component = spec.meta["component"]
    sub = [r for r in rows if r["component"] == component]
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    for layer in sorted({r["layer"] for r in sub}, key=_label_key):
        pts = sorted(((int(r["k"]), float(r["score"])) for r in sub
                      if r["layer"] == layer))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"layer {layer}")
    ax.set_xlabel("pruning iteration k")
    ax.set_ylabel("NeuronSim vs LTH0")
    ax.set_ylim(*CORR_BOUNDS)
    ax.legend(fontsize=7)
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_maxcorr_hist(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"component", "layer", "k", "max_corr"},
                     bundle / spec.inputs[0])
    component = spec.meta["component"]
    sub = [r for r in rows if r["component"] == component]
    ks = sorted({int(r["k"]) for r in sub})
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    bins = np.linspace(-1.0, 1.0, 41)
    for k in ks:
        vals = [float(r["max_corr"]) for r in sub if int(r["k"]) == k]
        ax.hist(vals, bins=bins, histtype="step", label=f"LTH{k}")
    ax.set_xlabel("max correlation with an LTH0 neuron")
    ax.set_ylabel("neurons")
    ax.set_xlim(*CORR_BOUNDS)
    ax.legend(fontsize=7)
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_svd_curves(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"model", "component", "rank", "cumulative_variance"},
                     bundle / spec.inputs[0])
    component = spec.meta["component"]
    sub = [r for r in rows if r["component"] == component]
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    for model in sorted({r["model"] for r in sub}, key=_label_key):
        pts = sorted(((int(r["rank"]), float(r["cumulative_variance"]))
                      for r in sub if r["model"] == model))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=model)
    ax.axhline(0.8, linestyle=":", linewidth=0.8, color="gray")
    ax.set_xlabel("top-k singular vectors")
    ax.set_ylabel("variance explained")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=7)
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_module_sparsity(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"k", "component", "layer", "group", "sparsity"},
                     bundle / spec.inputs[0])
    component = spec.meta["component"]
    group = spec.meta["group"]
    sub = [r for r in rows if r["component"] == component
           and r["group"] == group]
    if not sub:
        raise RenderError(f"no module_sparsity rows for {component}/{group}")
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    for layer in sorted({r["layer"] for r in sub}, key=_label_key):
        pts = sorted(((int(r["k"]), float(r["sparsity"])) for r in sub
                      if r["layer"] == layer))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"layer {layer}")
    ax.set_xlabel("pruning iteration k")
    ax.set_ylabel("module sparsity")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=7)
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_bleu_sparsity(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"k", "sparsity_excl_emb", "bleu_magnitude"},
                     bundle / spec.inputs[0])
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    xs = [float(r["sparsity_excl_emb"]) for r in rows]
    ax.plot(xs, [float(r["bleu_magnitude"]) for r in rows], marker="o",
            label="magnitude")
    if any(r.get("bleu_random") for r in rows):
        ax.plot(xs, [float(r["bleu_random"]) if r["bleu_random"] else np.nan
                     for r in rows], marker="s", label="random")
    ax.set_xlabel("sparsity (excl. embeddings)")
    ax.set_ylabel("toy BLEU")
    ax.legend(fontsize=7)
    ax.set_title(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


def _fig_concentration(spec, bundle):
    rows = _read_csv(bundle / spec.inputs[0])
    _require_columns(rows, {"model", "attn_type", "layer", "fraction"},
                     bundle / spec.inputs[0])
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.0))
    for ax, attn_type in zip(axes, ("enc_self", "enc_dec", "dec_self")):
        sub = [r for r in rows if r["attn_type"] == attn_type]
        models, layers, grid = _pivot(sub, "model", "layer", "fraction")
        _heatmap(ax, grid, models, layers, (0.0, 1.0), cell_text=False)
        ax.set_title(attn_type, fontsize=8)
        ax.set_xlabel("layer", fontsize=7)
    fig.suptitle(spec.title, fontsize=9)
    fig.tight_layout()
    return fig


_FIGURES = {
    "probe_zgrid": _fig_probe_zgrid,
    "probe_layer_groups": _fig_layer_groups,
    "layer_sim": _fig_layer_sim,
    "attention_sim": _fig_attention_sim,
    "neuron_sim_lines": _fig_neuron_sim_lines,
    "maxcorr_hist": _fig_maxcorr_hist,
    "svd_curves": _fig_svd_curves,
    "module_sparsity": _fig_module_sparsity,
    "bleu_sparsity": _fig_bleu_sparsity,
    "concentration": _fig_concentration,
}


# -- the standard set ----------------------------------------------------------

def standard_specs(bundle_dir: str | Path, out_dir: str | Path) -> list[FigureSpec]:
    """The figure set implied by a bundle's contents."""
    bundle = Path(bundle_dir)
    out = Path(out_dir)
    meta = json.loads((bundle / "bundle.json").read_text()) \
        if (bundle / "bundle.json").exists() else {}
    files = meta.get("files", {})
    iterations = meta.get("iterations", [])
    sparsest = f"LTH{max(iterations)}" if iterations else None
    specs: list[FigureSpec] = []

    def add(kind, name, inputs, fname, title, **meta_kw):
        specs.append(FigureSpec(kind=kind, name=name, inputs=inputs,
                                out=str(out / fname), title=title,
                                meta=meta_kw))

    pz = files.get("probe_zscores", "probe_zscores.csv")
    for family in ("linear", "mlp"):
        add("heatmap", "probe_zgrid", [pz], f"probe_zgrid_{family}.png",
            f"best-layer probe z-scores ({family})", family=family)
    plg = files.get("probe_layer_groups", "probe_layer_groups.csv")
    add("grid", "probe_layer_groups", [plg], "probe_layer_groups_linear.png",
        "per-layer group z-scores (linear)", family="linear")

    ls = files.get("layer_sim", "layer_sim.csv")
    ats = files.get("attention_sim", "attention_sim.csv")
    if sparsest:
        for component in ("encoder", "decoder"):
            add("heatmap", "layer_sim", [ls],
                f"layer_sim_{component}_{sparsest}.png",
                f"{component} LayerSim: LTH0 vs {sparsest}",
                component=component, model_b=sparsest)
        for attn_type in ("enc_self", "enc_dec", "dec_self"):
            add("heatmap", "attention_sim", [ats],
                f"attention_sim_{attn_type}_{sparsest}.png",
                f"AttentionSim {attn_type}: LTH0 vs {sparsest}",
                attn_type=attn_type, model_b=sparsest)

    ns = files.get("neuron_sim", "neuron_sim.csv")
    mc = files.get("neuron_maxcorr", "neuron_maxcorr.csv")
    sv = files.get("svd_curves", "svd_curves.csv")
    ms = files.get("module_sparsity", "module_sparsity.csv")
    for component in ("encoder", "decoder"):
        add("lines", "neuron_sim_lines", [ns], f"neuron_sim_{component}.png",
            f"{component} NeuronSim vs pruning iteration", component=component)
        add("histogram", "maxcorr_hist", [mc], f"maxcorr_hist_{component}.png",
            f"{component} max-correlation distributions", component=component)
        add("lines", "svd_curves", [sv], f"svd_{component}.png",
            f"{component} final-layer SVD variance", component=component)
        add("lines", "module_sparsity", [ms],
            f"sparsity_{component}_fc.png",
            f"{component} FC sparsity per layer", component=component,
            group="fc")
        add("lines", "module_sparsity", [ms],
            f"sparsity_{component}_self_attn.png",
            f"{component} self-attention sparsity per layer",
            component=component, group="self_attn")
    add("lines", "module_sparsity", [ms], "sparsity_decoder_cross_attn.png",
        "decoder cross-attention sparsity per layer", component="decoder",
        group="cross_attn")

    tf = files.get("family_table", "table_family.csv")
    add("lines", "bleu_sparsity", [tf], "bleu_vs_sparsity.png",
        "toy BLEU vs sparsity")
    cc = files.get("concentration", "concentration.csv")
    add("heatmap", "concentration", [cc], "concentration.png",
        "attention concentration (fraction of rows > threshold)")
    return specs


def render_all(bundle_dir: str | Path, out_dir: str | Path,
               only: str | None = None) -> dict:
    """Render the standard set; skips figures whose inputs are missing.

    Returns (and writes) a manifest of rendered and skipped figures.
    """
    bundle = Path(bundle_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rendered = []
    skipped = []
    for spec in standard_specs(bundle, out):
        if only and spec.kind != only:
            skipped.append({"figure": Path(spec.out).name,
                            "reason": f"filtered by --only {only}"})
            continue
        try:
            path = render(spec, bundle)
            rendered.append({"figure": path.name, "inputs": spec.inputs,
                             "kind": spec.kind})
        except RenderError as err:
            skipped.append({"figure": Path(spec.out).name, "reason": str(err)})
    manifest = {"bundle": str(bundle), "rendered": rendered, "skipped": skipped}
    (out / "render_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
