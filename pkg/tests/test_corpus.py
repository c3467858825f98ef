import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from unlearnlab import corpus as C


def test_deterministic():
    a = C.generate(7, 20, 3)
    b = C.generate(7, 20, 3)
    assert [f.to_record() for f in a.all_facts()] == [f.to_record() for f in b.all_facts()]


def test_floor_rounded_split_sizes():
    # 664 facts with floor rounding
    assert C.split_sizes(664, (0.05, 0.10, 0.70)) == (33, 66, 464, 101)


def test_remainder_goes_to_utility():
    nf, nr, nt, nu = C.split_sizes(200, (0.05, 0.10, 0.70))
    assert nu == 200 - nf - nr - nt == 30


def test_default_corpus_shape():
    sp = C.generate(0, 50, 4)
    assert [len(sp.split(s)) for s in C.SPLITS] == [10, 20, 140, 30]


def test_every_answer_used_at_least_twice():
    for seed in range(5):
        sp = C.generate(seed, 21, 3)
        counts = Counter(f.object for f in sp.all_facts())
        assert min(counts.values()) >= 2


def test_subject_relation_pairs_unique():
    sp = C.generate(3, 30, 5)
    keys = [f.key for f in sp.all_facts()]
    assert len(keys) == len(set(keys))


def test_rendering_round_trip():
    sp = C.generate(0, 20, 2)
    for f in sp.all_facts():
        for t, q in enumerate(f.questions):
            assert sp.vocab.decode(q) == C.render_question(t, f.subject, f.relation)
        assert sp.vocab.decode(f.answer) == f.object


def test_too_small_corpus_rejected():
    with pytest.raises(C.CorpusError):
        C.generate(0, 4, 4)


def test_vocab_overflow_rejected():
    with pytest.raises(C.CorpusError, match="vocab"):
        C.generate(0, 50, 4, vocab_limit=64)


def test_bad_fractions_rejected():
    with pytest.raises(C.CorpusError):
        C.generate(0, 20, 2, fractions=(0.5, 0.4, 0.3))


@settings(max_examples=120, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    ents=st.integers(10, 40),
    rels=st.integers(2, 5),
    f=st.floats(0.0, 0.3),
    r=st.floats(0.0, 0.3),
    t=st.floats(0.0, 0.4),
)
def test_split_disjointness_and_sizes(seed, ents, rels, f, r, t):
    sp = C.generate(seed, ents, rels, (f, r, t))
    ids = [set(x.fact_id for x in sp.split(s)) for s in C.SPLITS]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not ids[i] & ids[j]
    n = ents * rels
    assert sum(map(len, ids)) == n
    assert tuple(map(len, ids)) == C.split_sizes(n, (f, r, t))
    assert all(x.split == s for s in C.SPLITS for x in sp.split(s))


def test_benign_size_and_determinism():
    sp = C.generate(0, 50, 4)
    a = C.benign_corpus(1, 1000, sp)
    assert len(a) == 1000
    assert a == C.benign_corpus(1, 1000, sp)


def test_benign_has_no_forget_overlap_or_answers():
    sp = C.generate(0, 50, 4)
    items = C.benign_corpus(5, 500, sp)
    assert C.benign_overlap(items, sp.forget, sp.vocab) == set()
    answers = {t for f in sp.all_facts() for t in f.answer}
    assert not any(set(it.prompt + it.response) & answers for it in items)


def test_benign_overlap_detects_pairs():
    sp = C.generate(0, 20, 2)
    f = sp.forget[0]
    planted = C.BenignItem(sp.vocab.encode(f"{f.subject} {f.relation}"), sp.vocab.encode("red"))
    assert C.benign_overlap([planted], sp.forget, sp.vocab) == {f.key}


@pytest.mark.parametrize("p,attack,held", [(0.1, 3, 27), (0.3, 9, 21)])
def test_attack_subset_ceiling(p, attack, held):
    sp = C.generate(0, 50, 4, fractions=(0.15, 0.1, 0.5))
    pool = sp.forget[:30]
    a, h = C.attack_subset(pool, p, seed=4)
    assert (len(a), len(h)) == (attack, held)
    assert not {x.fact_id for x in a} & {x.fact_id for x in h}


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 40), p=st.floats(0.01, 0.99), seed=st.integers(0, 100))
def test_attack_subset_disjoint_cover(n, p, seed):
    sp = C.generate(0, 50, 4, fractions=(0.2, 0.1, 0.5))
    pool = sp.forget[:n]
    k = math.ceil(p * n - 1e-9)
    if k >= n:
        with pytest.raises(C.CorpusError):
            C.attack_subset(pool, p, seed)
        return
    a, h = C.attack_subset(pool, p, seed)
    assert len(a) == k
    assert {x.fact_id for x in a} | {x.fact_id for x in h} == {x.fact_id for x in pool}
    assert not {x.fact_id for x in a} & {x.fact_id for x in h}


def test_attack_subset_eligibility_filter():
    sp = C.generate(0, 50, 4)
    keep = {f.fact_id for f in sp.forget[:6]}
    a, h = C.attack_subset(sp.forget, 0.3, 0, eligible=lambda f: f.fact_id in keep)
    assert {x.fact_id for x in a + h} == keep


def test_attack_subset_rejects_bad_p():
    sp = C.generate(0, 50, 4)
    with pytest.raises(C.CorpusError):
        C.attack_subset(sp.forget, 0.0, 0)
    with pytest.raises(C.CorpusError):
        C.attack_subset(sp.forget[:1], 0.5, 0)


def test_export_import_round_trip(tmp_path):
    sp = C.generate(2, 20, 3)
    benign = C.benign_corpus(0, 10, sp)
    path = tmp_path / "corpus.jsonl"
    C.export_corpus(sp, path, benign)
    first = path.read_bytes()
    back, b2 = C.import_corpus(path)
    assert [f.to_record() for f in back.all_facts()] == [f.to_record() for f in sp.all_facts()]
    assert b2 == benign and back.vocab == sp.vocab
    C.export_corpus(back, path, b2)
    assert path.read_bytes() == first
