import numpy as np
import pytest
from hypothesis import given, strategies as st

from vidpeaks import SIGNALS, embedstore
from vidpeaks.errors import ContractViolation, MomentNotEmbedded, UnknownField
from vidpeaks.experiment import (ExperimentConfig, MomentTable, build_moment_table, checkpoint_name, make_split,
                                 run_experiment, train_all, video_reference_matrix)
from vidpeaks.model import Dataset, TrainConfig, predict, train

FAST = TrainConfig(lr=1e-2, batch_size=256, max_epochs=15, patience=3, hidden=16)


def table_of(course_sizes, fields=None):
    course, field = [], []
    for i, n in enumerate(course_sizes):
        course += [f"c{i:02d}"] * n
        field += [(fields or {}).get(i, "F")] * n
    n = len(course)
    return MomentTable(np.array([f"v{c}" for c in course], dtype=object), np.arange(n), np.array(course, dtype=object),
                       np.array(field, dtype=object), np.arange(n), {}, {})


def test_ten_equal_courses_put_one_in_test():
    table = table_of([50] * 10)
    plan = make_split(table, "course", seed=4)
    assert len(plan.test) == 1
    assert make_split(table, "course", seed=4).test == plan.test
    assert plan.test_mask(table).sum() == 50


def test_course_frequency_over_seeds():
    table = table_of([50] * 10)
    counts = {f"c{i:02d}": 0 for i in range(10)}
    for seed in range(100):
        for c in make_split(table, "course", seed=seed).test:
            counts[c] += 1
    assert all(abs(v / 100 - 0.1) <= 0.05 for v in counts.values())


def test_field_holdout_takes_every_course_of_the_field(small_table):
    table, _ = small_table
    plan = make_split(table, "field", field="Mathematics")
    mask = plan.test_mask(table)
    np.testing.assert_array_equal(mask, table.field == "Mathematics")
    with pytest.raises(UnknownField):
        make_split(table, "field", field="Astrology")


def test_single_course_cannot_split():
    with pytest.raises(ContractViolation):
        make_split(table_of([30]), "course")


@given(st.lists(st.integers(1, 40), min_size=2, max_size=15), st.integers(0, 10**6))
def test_splits_never_leak_courses(sizes, seed):
    table = table_of(sizes)
    try:
        plan = make_split(table, "course", seed=seed)
    except ContractViolation:
        return
    assert not plan.train & plan.test
    assert plan.train | plan.test == set(table.course_id)
    assert plan.test_mask(table).sum() >= 0.1 * len(table)


def test_reference_matrix_is_per_video_mean():
    X = np.array([[1.0, 2.0], [3.0, 4.0], [10.0, 0.0]])
    R = video_reference_matrix(X, np.array(["a", "a", "b"], dtype=object))
    np.testing.assert_allclose(R, [[2, 3], [2, 3], [10, 0]])


def test_moment_table_requires_embeddings(small_corpus, tmp_path):
    out, ing, videos = small_corpus
    keys = [(videos[0].video_id, 30)]
    m = embedstore.open_manifest(embedstore.write_manifest(tmp_path, {"P": np.zeros((1, 2))}, keys))
    with pytest.raises(MomentNotEmbedded):
        build_moment_table(videos[:1], ing.metas, m)


def test_moment_table_labels_match_archive(small_corpus, small_table):
    _, _, videos = small_corpus
    table, manifest = small_table
    v = videos[3]
    rows = table.video_id == v.video_id
    np.testing.assert_array_equal(table.t[rows], np.arange(30, v.duration - 29, 5))
    np.testing.assert_array_equal(table.labels[("PausedAt", 10)][rows], v.labels[("PausedAt", 10)][::5])
    assert all(manifest.row(v.video_id, t) == r for t, r in zip(table.t[rows], table.row[rows]))


def leak_manifest(tmp_path, table, manifest, values):
    X = np.zeros((manifest.row_count, 1))
    X[table.row, 0] = values
    keys = sorted(manifest.index, key=manifest.index.get)
    return embedstore.open_manifest(embedstore.write_manifest(tmp_path, {"leak": X}, keys))


def test_leaked_labels_are_recovered(small_table, tmp_path):
    table, manifest = small_table
    y = table.labels[("PausedAt", 10)].astype(float)
    noise = np.random.default_rng(0).normal(0, 0.05, len(y))
    m = leak_manifest(tmp_path, table, manifest, y + noise)
    cfg = ExperimentConfig(signals=("PausedAt",), ks=(10,), selections={"leak": ["leak"]}, train=FAST)
    (report,) = run_experiment(table, m, cfg)
    assert report.auc >= 0.99


def test_constant_embeddings_give_chance(small_table, tmp_path):
    table, manifest = small_table
    m = leak_manifest(tmp_path, table, manifest, np.ones(len(table)))
    cfg = ExperimentConfig(signals=("PausedAt",), ks=(10,), selections={"flat": ["leak"]}, seeds=(0, 1, 2, 3, 4),
                           train=FAST)
    (report,) = run_experiment(table, m, cfg)
    assert abs(report.auc - 0.5) <= 0.02


def test_report_schema_and_checkpoint_reuse(small_table, tmp_path):
    table, manifest = small_table
    cfg = ExperimentConfig(seeds=(0, 1), train=TrainConfig(max_epochs=3, hidden=16, batch_size=512))
    sink = []
    reports = run_experiment(table, manifest, cfg, sink.append, checkpoint_dir=str(tmp_path))
    assert [(r.signal, r.K) for r in reports] == [(s, k) for s in SIGNALS for k in (10, 5)]
    for r in reports:
        assert 0 <= r.auc <= 1 and r.lift >= 0
        assert len(r.per_seed_auc) == 2 and np.isfinite(r.auc_std)
        assert r.n_test == int(make_split(table, "course", 1).test_mask(table).sum())
    assert len(sink) == sum(int(make_split(table, "course", s).test_mask(table).sum()) for s in (0, 1)) * 8
    name = checkpoint_name("e_x", "full", "PausedAt", 10, 1)
    assert (tmp_path / name).exists()
    again = run_experiment(table, manifest, cfg, checkpoint_dir=str(tmp_path))
    assert [r.to_dict() for r in again] == [r.to_dict() for r in reports]
    paths = train_all(table, manifest, cfg, str(tmp_path))
    assert len(paths) == 16


def test_balanced_training_keeps_prior(small_table):
    table, manifest = small_table
    X = embedstore.assemble_rows(manifest, embedstore.DEFAULT_SELECTION, table.row)
    y = table.labels[("PausedAt", 10)]
    vids = table.video_id.astype(str)
    cfg = TrainConfig(max_epochs=10, hidden=32, seed=0)
    params, log = train(Dataset(X, y, vids, prevalence=0.1), cfg)
    # balanced evaluation set: every positive plus as many random negatives
    rng = np.random.default_rng(0)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    idx = np.concatenate([pos, rng.choice(neg, len(pos), replace=False)])
    R = video_reference_matrix(X, table.video_id)
    mean_p = predict(params, X[idx], R[idx]).mean()
    assert 0.3 <= mean_p <= 0.7
