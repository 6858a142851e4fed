import json
from pathlib import Path

import numpy as np
import pytest

from prunefig import figures as F
from prunefig.cli import main as cli_main


def make_bundle(root: Path, iterations=(0, 1, 2), layers=(1, 2)) -> Path:
    """Write a minimal but schema-complete report bundle."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    models = [f"LTH{k}" for k in iterations]
    tasks = ["token_tag", "arc_pred", "same_head"]

    def write(name, header, rows):
        lines = [",".join(header)]
        lines += [",".join(str(v) for v in row) for row in rows]
        (root / name).write_text("\n".join(lines) + "\n")

    write("probe_zscores.csv",
          ["family", "task", "model", "k", "best_metric", "zscore"],
          [(fam, t, m, k, round(rng.random(), 4), round(rng.normal(), 4))
           for fam in ("linear", "mlp") for t in tasks
           for k, m in enumerate(models)])
    write("probe_layer_groups.csv",
          ["family", "group", "model", "layer", "mean_zscore"],
          [("linear", g, m, l, round(rng.normal(), 4))
           for g in ("tagging", "structure") for m in models for l in layers])
    write("layer_sim.csv",
          ["component", "model_a", "model_b", "layer_a", "layer_b", "cka"],
          [(c, "LTH0", m, la, lb, round(rng.random(), 4))
           for c in ("encoder", "decoder") for m in models
           for la in layers for lb in layers])
    write("attention_sim.csv",
          ["attn_type", "model_a", "model_b", "layer_a", "layer_b", "cka"],
          [(a, "LTH0", m, la, lb, round(rng.random(), 4))
           for a in ("enc_self", "enc_dec", "dec_self") for m in models
           for la in layers for lb in layers])
    write("neuron_sim.csv",
          ["component", "layer", "model", "k", "score", "match_rate",
           "dead_base", "dead_model"],
          [(c, l, m, k, round(rng.random(), 4), 1.0, 0, 0)
           for c in ("encoder", "decoder") for l in layers
           for k, m in enumerate(models)])
    write("neuron_maxcorr.csv",
          ["component", "layer", "model", "k", "neuron", "max_corr"],
          [(c, l, m, k, n, round(rng.random(), 4))
           for c in ("encoder", "decoder") for l in layers
           for k, m in enumerate(models) for n in range(8)])
    write("svd_curves.csv",
          ["model", "k", "component", "rank", "cumulative_variance"],
          [(m, k, c, r, round(min(1.0, 0.2 * r + rng.random() * 0.1), 4))
           for k, m in enumerate(models) for c in ("encoder", "decoder")
           for r in range(1, 6)])
    write("svd_mink.csv", ["model", "k", "component", "threshold", "min_k"],
          [(m, k, c, t, 3) for k, m in enumerate(models)
           for c in ("encoder", "decoder") for t in (0.5, 0.8, 0.9)])
    write("module_sparsity.csv",
          ["k", "component", "layer", "group", "kept", "total", "sparsity"],
          [(k, c, l, g, 80, 100, round(rng.random(), 4))
           for k in iterations for c in ("encoder", "decoder") for l in layers
           for g in ("fc", "self_attn", "cross_attn")
           if not (c == "encoder" and g == "cross_attn")])
    write("table_family.csv",
          ["k", "sparsity_incl_emb", "sparsity_excl_emb", "bleu_magnitude",
           "bleu_random"],
          [(k, round(1 - 0.9 ** k, 3), round(1 - 0.8 ** k, 3),
            round(95 - k, 2), round(94 - 2 * k, 2)) for k in iterations])
    write("grouped_similarity.csv", ["grouping", "group", "size", "cka"],
          [("frequency", "top-5", 120, 0.95), ("frequency", ">500", 40, 0.81),
           ("tag", "N", 300, 0.9)])
    write("concentration.csv", ["model", "k", "attn_type", "layer", "fraction"],
          [(m, k, a, l, round(rng.random(), 4)) for k, m in enumerate(models)
           for a in ("enc_self", "enc_dec", "dec_self") for l in layers])
    bundle = {
        "schema_version": 1,
        "config_digest": "0" * 16,
        "iterations": list(iterations),
        "family_table": [],
        "probe_trends": {},
        "svd_min_k": [],
        "files": {
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
        },
        "non_goals": ["placeholder"],
    }
    (root / "bundle.json").write_text(json.dumps(bundle, indent=2))
    return root


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return make_bundle(tmp_path_factory.mktemp("bundle"))


def test_render_all_standard_set(bundle, tmp_path):
    out = tmp_path / "figs"
    manifest = F.render_all(bundle, out)
    assert len(manifest["rendered"]) >= 8
    for entry in manifest["rendered"]:
        img = out / entry["figure"]
        assert img.exists() and img.stat().st_size > 0
    assert (out / "render_manifest.json").exists()


def test_render_deterministic(bundle, tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    F.render_all(bundle, out1)
    F.render_all(bundle, out2)
    images = sorted(p.name for p in out1.glob("*.png"))
    assert images
    for name in images:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_heatmap_dimensions_match_input(bundle, tmp_path):
    import csv
    import matplotlib
    matplotlib.use("Agg")
    spec = F.FigureSpec(kind="heatmap", name="layer_sim",
                        inputs=["layer_sim.csv"],
                        out=str(tmp_path / "h.png"),
                        meta={"component": "encoder", "model_b": "LTH2"})
    with open(bundle / "layer_sim.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh)
                if r["component"] == "encoder" and r["model_b"] == "LTH2"]
    n_a = len({r["layer_a"] for r in rows})
    n_b = len({r["layer_b"] for r in rows})
    fig = F._fig_layer_sim(spec, bundle)
    image = fig.axes[0].get_images()[0]
    assert image.get_array().shape == (n_a, n_b)


def test_partial_bundle_skips_gracefully(bundle, tmp_path):
    partial = tmp_path / "partial"
    partial.mkdir()
    for name in ("bundle.json", "table_family.csv", "layer_sim.csv"):
        (partial / name).write_text((bundle / name).read_text())
    manifest = F.render_all(partial, tmp_path / "figs")
    assert manifest["rendered"]
    assert manifest["skipped"]
    reasons = {s["reason"] for s in manifest["skipped"]}
    assert any("input missing" in r for r in reasons)


def test_schema_mismatch_reports_columns(bundle, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "bundle.json").write_text((bundle / "bundle.json").read_text())
    (broken / "layer_sim.csv").write_text("foo,bar\n1,2\n")
    spec = F.FigureSpec(kind="heatmap", name="layer_sim",
                        inputs=["layer_sim.csv"], out=str(tmp_path / "x.png"),
                        meta={"component": "encoder", "model_b": "LTH2"})
    with pytest.raises(F.RenderError, match="missing columns"):
        F.render(spec, broken)


def test_empty_dir_yields_empty_manifest(tmp_path):
    out = tmp_path / "figs"
    manifest = F.render_all(tmp_path / "nothing_here", out)
    assert manifest["rendered"] == []
    assert manifest["skipped"]


def test_renderer_never_mutates_bundle(bundle, tmp_path):
    before = {p.name: p.read_bytes() for p in bundle.iterdir()}
    F.render_all(bundle, tmp_path / "figs")
    after = {p.name: p.read_bytes() for p in bundle.iterdir()}
    assert before == after


def test_figure_spec_validation(tmp_path):
    with pytest.raises(F.RenderError):
        F.FigureSpec(kind="sculpture", name="x", inputs=[], out="x.png")
    with pytest.raises(F.RenderError):
        F.FigureSpec(kind="heatmap", name="x", inputs=[], out="x.png",
                     color_bounds=(0.0, float("inf")))


def test_cli_roundtrip(bundle, tmp_path, capsys):
    assert cli_main(["render", "--bundle", str(bundle),
                     "--out", str(tmp_path / "figs")]) == 0
    out = capsys.readouterr().out
    assert "rendered" in out
    assert cli_main(["render", "--bundle", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "x")]) == 1


def test_cli_only_filter(bundle, tmp_path):
    out = tmp_path / "figs"
    assert cli_main(["render", "--bundle", str(bundle), "--out", str(out),
                     "--only", "histogram"]) == 0
    manifest = json.loads((out / "render_manifest.json").read_text())
    assert all(r["kind"] == "histogram" for r in manifest["rendered"])
    assert manifest["rendered"]
