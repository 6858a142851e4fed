import numpy as np
import pytest

from prunelens import corpus as C
from prunelens import probing as PR


def test_extract_token_reps_singleton_and_mean():
    sub = C.SubtokenMap(pieces=[["ab"], ["cd", "ef"]], owner=[0, 1, 1])
    rows = np.array([[5.0, 5.0], [1.0, 2.0], [3.0, 4.0]])
    out = PR.extract_token_reps(rows, sub)
    assert np.array_equal(out[0], [5.0, 5.0])       # unsplit token unchanged
    assert np.array_equal(out[1], [2.0, 3.0])       # mean oracle
    dup = C.SubtokenMap(pieces=[["xy", "zw"]], owner=[0, 0])
    v = np.array([[7.0, -1.0], [7.0, -1.0]])
    assert np.array_equal(PR.extract_token_reps(v, dup)[0], [7.0, -1.0])


def test_extract_token_reps_rejects_short_rows():
    sub = C.SubtokenMap(pieces=[["ab", "cd"]], owner=[0, 0])
    with pytest.raises(PR.ProbingError):
        PR.extract_token_reps(np.ones((1, 3)), sub)


def test_pairwise_features():
    out = PR.build_pairwise_features(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert np.array_equal(out, [1.0, 2.0, 3.0, 4.0, 3.0, 8.0])
    zero = PR.build_pairwise_features(np.zeros(2), np.array([3.0, 4.0]))
    assert np.array_equal(zero[:2], [0.0, 0.0]) and np.array_equal(zero[4:], [0.0, 0.0])
    swapped = PR.build_pairwise_features(np.array([3.0, 4.0]), np.array([1.0, 2.0]))
    assert np.array_equal(swapped[4:], out[4:])  # product block is symmetric
    with pytest.raises(PR.ProbingError):
        PR.build_pairwise_features(np.ones(2), np.ones(3))


@pytest.fixture(scope="module")
def frames_setup():
    grammar = C.SyntheticGrammar(vocab_size=60, max_depth=2)
    corpus = C.generate_corpus(seed=31, n_sentences=120, grammar=grammar)
    return corpus.split("train")


def test_task_frames_deterministic_and_split(frames_setup):
    sentences = frames_setup
    for task_id in PR.TASKS:
        f1 = PR.build_task_frame(PR.TASKS[task_id], sentences, seed=1)
        f2 = PR.build_task_frame(PR.TASKS[task_id], sentences, seed=1)
        assert f1.items == f2.items
        assert np.array_equal(f1.labels, f2.labels)
        assert set(np.unique(f1.split)) <= {"train", "dev", "test"}
        assert (f1.labels < PR.TASKS[task_id].n_classes).all()


def test_pair_tasks_balanced(frames_setup):
    for task_id in ("arc_pred", "same_head"):
        frame = PR.build_task_frame(PR.TASKS[task_id], frames_setup, seed=0)
        pos = int((frame.labels == 1).sum())
        neg = int((frame.labels == 0).sum())
        assert pos == neg and pos > 50


def test_single_task_labels_match_annotations(frames_setup):
    s = frames_setup[0]
    frame = PR.build_task_frame(PR.TASKS["parent_tag"], frames_setup, seed=0)
    for (si, i), lab in zip(frame.items, frame.labels):
        if si != 0:
            continue
        p = s.parent[i]
        assert lab == (PR.ROOT_CLASS if p < 0 else s.tags[p])


def _separable_dataset(n=400, d=8, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    x = rng.standard_normal((n, d)) + 4.0 * y[:, None]
    task = PR.Task("toy", "tagging", "single", 2)
    cut1, cut2 = int(0.7 * n), int(0.85 * n)
    return PR.ProbeDataset(task=task,
                           x={"train": x[:cut1], "dev": x[cut1:cut2], "test": x[cut2:]},
                           y={"train": y[:cut1], "dev": y[cut1:cut2], "test": y[cut2:]})


def test_probe_learns_separable_data():
    ds = _separable_dataset()
    metric = PR.train_probe(PR.ProbeSpec("toy", layer=1, family="linear"), ds)
    assert metric == 1.0


def test_probe_chance_on_shuffled_labels():
    rng = np.random.default_rng(7)
    n = 3000
    x = rng.standard_normal((n, 8))
    y = np.tile([0, 1], n // 2)  # balanced, independent of features
    task = PR.Task("control", "tagging", "single", 2)
    cut1, cut2 = 1000, 1500
    ds = PR.ProbeDataset(task=task,
                         x={"train": x[:cut1], "dev": x[cut1:cut2], "test": x[cut2:]},
                         y={"train": y[:cut1], "dev": y[cut1:cut2], "test": y[cut2:]})
    metric = PR.train_probe(PR.ProbeSpec("control", layer=1), ds)
    assert abs(metric - 0.5) <= 0.05


def test_mlp_probe_at_least_linear_on_xor():
    rng = np.random.default_rng(3)
    n = 1200
    x = rng.standard_normal((n, 2))
    y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
    task = PR.Task("xor", "tagging", "single", 2)
    ds = PR.ProbeDataset(task=task,
                         x={"train": x[:800], "dev": x[800:1000], "test": x[1000:]},
                         y={"train": y[:800], "dev": y[800:1000], "test": y[1000:]})
    linear = PR.train_probe(PR.ProbeSpec("xor", layer=1, family="linear"), ds)
    mlp = PR.train_probe(PR.ProbeSpec("xor", layer=1, family="mlp", hidden=16,
                                      max_epochs=40), ds)
    assert mlp >= linear - 0.02
    assert mlp > 0.8  # xor needs the hidden layer


def test_probe_rejects_single_class():
    ds = _separable_dataset()
    ds.y["train"] = np.zeros_like(ds.y["train"])
    with pytest.raises(PR.ProbingError):
        PR.train_probe(PR.ProbeSpec("toy", layer=1), ds)


def test_probe_deterministic():
    ds = _separable_dataset(seed=5)
    spec = PR.ProbeSpec("toy", layer=1, family="mlp", hidden=8,
                        replicate_seeds=(0, 1))
    assert PR.train_probe(spec, ds) == PR.train_probe(spec, ds)


# -- z-scores, trends, summaries ------------------------------------------------

def test_zscores_formula_and_degenerate():
    z = PR.zscores([1.0, 2.0, 3.0])
    assert np.allclose(z, [-1.224744871, 0.0, 1.224744871])
    assert np.array_equal(PR.zscores([4.0, 4.0, 4.0]), [0.0, 0.0, 0.0])
    # affine invariance
    z2 = PR.zscores(np.array([1.0, 2.0, 3.0]) * 7.0 + 3.0)
    assert np.allclose(z, z2)


def _toy_report():
    report = PR.ProbeReport()
    rng = np.random.default_rng(0)
    for k, model in enumerate(["LTH0", "LTH1", "LTH2"]):
        for layer in (1, 2):
            for task in ("token_tag", "arc_pred"):
                report.add(model=model, model_k=k, layer=layer, task=task,
                           family="linear",
                           metric=0.5 + 0.1 * k + 0.05 * layer
                                  + (0.01 if task == "arc_pred" else 0.0)
                                  + rng.random() * 1e-3)
    return report


def test_zscore_table_constraints():
    table = PR.zscore_table(_toy_report())
    for row in table.z:
        assert abs(row.mean()) < 1e-9
        assert abs(row.std() - 1.0) < 1e-9


def test_zscore_table_needs_two_models():
    report = PR.ProbeReport()
    report.add(model="LTH0", model_k=0, layer=1, task="t", family="linear",
               metric=0.5)
    with pytest.raises(PR.ProbingError):
        PR.zscore_table(report)


def test_best_over_layers_dominates():
    report = _toy_report()
    for model in report.models():
        for task in report.tasks():
            best = report.best_over_layers(model, task, "linear")
            per_layer = report.per_layer(model, task, "linear")
            assert best == max(per_layer.values())
            assert all(best >= v for v in per_layer.values())


def test_classify_trend():
    assert PR.classify_trend([1, 2, 3, 4, 5]) == "sparsity-improving"
    assert PR.classify_trend([2, 2, 2, 2, 2]) == "sparsity-invariant"
    assert PR.classify_trend([5, 5, 5, 4.5, 4, 3.5, 3, 3, 2.5]) == "sparsity-degrading"
    with pytest.raises(PR.ProbingError):
        PR.classify_trend([1, 2, 3])


def test_classify_trend_matches_rank_oracle():
    # independent Spearman for the degrading fixture: rank-correlate by hand
    v = np.array([5, 5, 5, 4.5, 4, 3.5, 3, 3, 2.5])
    def ranks(a):
        order = np.argsort(a, kind="stable")
        r = np.empty(len(a))
        r[order] = np.arange(1, len(a) + 1)
        # average ties
        for val in np.unique(a):
            idx = a == val
            r[idx] = r[idx].mean()
        return r
    rx = ranks(np.arange(len(v), dtype=float))
    ry = ranks(v)
    rho = np.corrcoef(rx, ry)[0, 1]
    assert rho <= -0.6


def test_layer_group_summary():
    report = _toy_report()
    summary = PR.layer_group_summary(report, {"g": ["token_tag", "arc_pred"]})
    assert summary["g"].shape == (3, 2)
    single = PR.layer_group_summary(report, {"s": ["token_tag"]})
    grid = np.array([[report.metric(m, l, "token_tag", "linear")
                      for l in report.layers()] for m in report.models()])
    z = PR.zscores(grid.reshape(-1)).reshape(grid.shape)
    assert np.allclose(single["s"], z)
    with pytest.raises(PR.ProbingError):
        PR.layer_group_summary(report, {"empty": []})
