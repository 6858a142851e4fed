"""End-to-end pipeline on a miniature config, then figure rendering.

Writes runs/demo/ with corpus, checkpoints, dumps, and the report bundle;
reruns skip completed stages. If the prunefig package is installed the
bundle is also rendered to runs/demo/figures/.
"""

from pathlib import Path

from prunelens.pipeline import ExperimentConfig, Pipeline

MINI = """
seed = 5
[grammar]
vocab_size = 150
max_depth = 2
[corpus]
n_sentences = 400
rare_threshold = 75
[model]
num_layers = 2
model_dim = 32
num_heads = 2
ffn_dim = 64
max_len = 96
[training]
epochs = 4
batch_size = 32
rewind_epoch = 2
warmup_steps = 50
[imp]
k_max = 2
[probe]
families = ["linear"]
tasks = ["token_tag", "parent_tag", "arc_pred", "same_head"]
max_epochs = 10
[similarity]
min_group = 5
"""

out = Path("runs/demo")
out.mkdir(parents=True, exist_ok=True)
config_path = out / "config.toml"
config_path.write_text(MINI)

config = ExperimentConfig.load(config_path)
pipeline = Pipeline(config, out / "artifacts")
pipeline.run()

bundle = out / "artifacts" / "reports"
print("\nreport bundle:")
for p in sorted(bundle.iterdir()):
    print("  ", p.name)

try:
    from prunefig import render_all
except ImportError:
    print("\nprunefig not installed; skipping figure rendering "
          "(pip install -e renderer/)")
else:
    manifest = render_all(bundle, out / "figures")
    print(f"\nrendered {len(manifest['rendered'])} figures into {out / 'figures'}")
