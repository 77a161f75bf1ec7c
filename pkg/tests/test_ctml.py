from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import binary_tables, kappa_exact
from vidpeaks.ctml import (BINARY, FEATURES, LEVELS, ORDINAL, RUBRIC, Coder, CTMLRecord, agreement,
                           association_summary, cohen_kappa, features_to_vector, read_ctml, vector_to_record,
                           weighted_kappa, write_ctml)
from vidpeaks.errors import ContractViolation, DataError, EmptyJoin, IncompleteRecord


def full_record(video="v", t=30, coder=Coder.Adjudicated, **over):
    kw = {f: (1 if f in ORDINAL else 0) for f in FEATURES}
    kw.update(over)
    return CTMLRecord(video, t, coder=coder, **kw)


def test_rubric_shape():
    assert len(FEATURES) == 15 and ORDINAL == {"visual_complexity", "redundancy"}
    assert len(BINARY) == 13
    assert FEATURES[0] == "formula" and FEATURES[-1] == "redundancy"


def test_identical_ratings_kappa_one():
    assert cohen_kappa([0, 1, 1, 0, 1], [0, 1, 1, 0, 1]) == 1.0


def test_opposite_ratings_kappa_minus_one():
    assert cohen_kappa([1, 1, 0, 0], [0, 0, 1, 1]) == -1.0


def test_kappa_enumeration_oracle():
    for a, b in binary_tables(6):
        exact = kappa_exact(a, b, (0, 1))
        got = cohen_kappa(a, b, (0, 1))
        w = weighted_kappa(a, b, levels=(0, 1))
        if exact is None:
            assert got == w == (1.0 if a == b else 0.0)
        else:
            assert got == float(exact)
            assert w == got


def test_weighted_kappa_offset_by_one_level():
    a = [1, 2, 3, 4, 5] * 4
    b = [2, 3, 4, 5, 5] * 4
    # hand-built O and E with weights (i-j)^2/16
    O = np.zeros((5, 5))
    for x, y in zip(a, b):
        O[x - 1, y - 1] += 1 / len(a)
    E = np.outer(O.sum(1), O.sum(0))
    W = np.array([[(i - j) ** 2 / 16 for j in range(5)] for i in range(5)])
    assert weighted_kappa(a, b) == pytest.approx(1 - (W * O).sum() / (W * E).sum(), abs=1e-15)


def test_weighted_kappa_degenerate_conventions():
    assert weighted_kappa([3, 3, 3], [3, 3, 3]) == 1.0
    assert weighted_kappa([3, 3, 3], [2, 2, 2]) == 0.0
    assert weighted_kappa([1, 2, 5], [1, 2, 5]) == 1.0


def test_kappa_input_checks():
    with pytest.raises(ContractViolation):
        cohen_kappa([0, 1], [0])
    with pytest.raises(ContractViolation):
        weighted_kappa([0, 1], [1, 1])


ratings = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from(LEVELS), min_size=n, max_size=n),
    st.lists(st.sampled_from(LEVELS), min_size=n, max_size=n)))


@given(ratings)
def test_kappas_symmetric(ab):
    a, b = ab
    assert cohen_kappa(a, b) == cohen_kappa(b, a)
    assert weighted_kappa(a, b) == weighted_kappa(b, a)


@given(ratings, st.permutations(LEVELS))
def test_kappa_invariant_under_relabeling(ab, perm):
    a, b = ab
    relabel = dict(zip(LEVELS, perm))
    assert cohen_kappa([relabel[x] for x in a], [relabel[x] for x in b]) == pytest.approx(cohen_kappa(a, b), abs=1e-15)


def test_feature_vector_extremes():
    assert not features_to_vector(full_record()).any()
    v = features_to_vector(full_record(visual_complexity=5, redundancy=5))
    assert sorted(v.tolist()).count(1.0) == 2 and v.sum() == 2.0


def test_feature_vector_needs_every_feature():
    with pytest.raises(IncompleteRecord):
        features_to_vector(CTMLRecord("v", 30, formula=1))


records = st.fixed_dictionaries({f: st.sampled_from(LEVELS) if f in ORDINAL else st.integers(0, 1) for f in FEATURES})


@given(records, records)
def test_vector_round_trip_and_injective(a, b):
    ra, rb = CTMLRecord("v", 30, coder=Coder.Machine, **a), CTMLRecord("v", 30, coder=Coder.Machine, **b)
    va, vb = features_to_vector(ra), features_to_vector(rb)
    assert vector_to_record(va, "v", 30) == ra
    assert np.array_equal(features_to_vector(vector_to_record(va, "v", 30)), va)
    assert (a == b) == np.array_equal(va, vb)


def test_record_validation():
    with pytest.raises(DataError):
        CTMLRecord("v", 30, visual_complexity=7)
    with pytest.raises(DataError):
        CTMLRecord("v", 30, formula=2)
    with pytest.raises(DataError):
        CTMLRecord("v", 30, formula=True)


def test_ctml_file_round_trip_and_duplicates(tmp_path):
    recs = [full_record("v", 30, formula=1), full_record("v", 35, coder=Coder.Machine, redundancy=4)]
    write_ctml(tmp_path / "c.jsonl", recs)
    assert read_ctml(tmp_path / "c.jsonl") == recs
    write_ctml(tmp_path / "d.jsonl", recs + recs[:1])
    with pytest.raises(DataError):
        read_ctml(tmp_path / "d.jsonl")


def test_agreement_identical_coders():
    rng = np.random.default_rng(0)
    recs = [full_record("v", 30 + i, **{f: int(rng.integers(0, 2)) for f in BINARY},
                        visual_complexity=int(rng.integers(1, 6)), redundancy=int(rng.integers(1, 6)))
            for i in range(40)]
    reports = agreement(recs, recs)
    assert len(reports) == 15 and all(r.kappa == 1.0 for r in reports)
    assert {r.feature for r in reports if r.weighted} == ORDINAL
    with pytest.raises(EmptyJoin):
        agreement(recs, [full_record("w", 30)])


def test_association_null_and_planted_effects():
    rng = np.random.default_rng(3)
    recs, lookup = [], {}
    for i in range(1500):
        planted, null = int(rng.random() < 0.3), int(rng.random() < 0.5)
        rank = float(np.clip(rng.uniform(0.1, 0.9) + 0.12 * planted, 0, 1))
        rec = CTMLRecord("v", i, formula=planted, photo=null)
        recs.append(rec)
        lookup[rec.key] = {"PausedAt": rank}
    means, tests = association_summary(recs, lookup, ["PausedAt"], alpha=0.01)
    by = {t.feature: t for t in tests}
    assert by["formula"].diff >= 0.05 and by["formula"].significant
    assert abs(by["photo"].diff) <= 0.02 and not by["photo"].significant
    lv = {(m.feature, m.level): m for m in means}
    assert lv[("formula", 1)].mean_rank > lv[("formula", 0)].mean_rank
    assert lv[("screen", 0)].n == 0 and lv[("screen", 0)].mean_rank is None
    assert by["screen"].t_stat is None and not by["screen"].significant


def test_synth_association_on_corpus(small_corpus):
    out, ing, videos = small_corpus
    recs = read_ctml(out.ctml_adjudicated)
    lookup = {}
    for v in videos:
        for i, t in enumerate(range(v.t0, v.t0 + len(v.ranks["PausedAt"]))):
            lookup[(v.video_id, t)] = {s: float(v.ranks[s][i]) for s in v.ranks}
    _, tests = association_summary(recs, lookup, ["PausedAt"])
    by = {t.feature: t for t in tests}
    assert by["visual_breakpoint"].diff >= 0.05 and by["visual_breakpoint"].significant
