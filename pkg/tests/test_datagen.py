import random
from collections import Counter

import pytest

from dprag import datagen as dg


def test_world_deterministic_and_sized():
    a, b = dg.gen_world(5, 240), dg.gen_world(5, 240)
    assert dg.world_to_json(a) == dg.world_to_json(b)
    assert len(a.entities) == 240
    assert dg.world_to_json(dg.gen_world(6, 240)) != dg.world_to_json(a)


def test_world_rejects_tiny():
    with pytest.raises(ValueError):
        dg.gen_world(0, 5)


def test_splits_entity_disjoint(world):
    names = Counter(e.name for e in world.entities)
    assert max(names.values()) == 1
    for e in world.entities:
        mentor = e.facts.get("mentor")
        if mentor:
            assert world.by_name()[mentor].split == e.split


def test_ood_first_names_unseen_in_distillation(world):
    train_first = {e.name.split()[0] for e in world.by_split("distill-train")}
    ood_first = {e.name.split()[0] for e in world.by_split("eval-ood-style")}
    assert ood_first and not (train_first & ood_first)


def test_render_contains_every_fact(world):
    for e in world.entities[:30]:
        doc = dg.render_document(e)
        assert doc == dg.render_document(e)
        assert doc.count(" . ") + 1 >= 2
        for rel, value in e.facts.items():
            assert value in doc
        assert dg.parse_facts([doc])[e.name] == e.facts


def test_single_doc_qa(world):
    rng = random.Random(0)
    for e in world.entities:
        qa = dg.synth_single_doc_qa(e, rng)
        assert 2 <= len(qa) <= 5
        for t in qa:
            assert t.answer in t.docs[0]
            assert dg.answer_from(t.docs, t.question) == t.answer


def test_single_doc_qa_skips_thin_docs(caplog):
    e = dg.Entity(0, "ann lee", {"birthplace": "oslo"}, "distill-train")
    assert dg.synth_single_doc_qa(e, random.Random(0)) == []


def test_cross_doc_qa_needs_both_docs(world):
    rng = random.Random(1)
    pool = world.by_split("distill-train")
    for ea, eb in zip(pool[::2], pool[1::2]):
        qa = dg.synth_cross_doc_qa(ea, eb, rng)
        if not qa:
            continue
        assert len(qa) >= 5
        for t in qa:
            assert t.kind == "cross"
            assert dg.answer_from(t.docs, t.question) == t.answer
            assert dg.answer_from(t.docs[:1], t.question) is None
            assert dg.answer_from(t.docs[1:], t.question) is None


def test_cross_doc_qa_same_entity_rejected(world):
    e = world.entities[0]
    with pytest.raises(ValueError):
        dg.synth_cross_doc_qa(e, e, random.Random(0))


def test_training_set_ratio_and_answerability():
    w = dg.gen_world(2, 600)
    data = dg.build_training_set(w)
    counts = Counter(t.kind for t in data)
    target = 149356 / 289079
    assert abs(counts["cross"] / len(data) - target) <= 0.02
    assert all(dg.answer_from(t.docs, t.question) == t.answer for t in data)
    assert len(data) == len(dg.build_training_set(w))
    assert len({t.question for t in data}) == len(data)


def test_training_set_single_only(world):
    data = dg.build_training_set(world, single_only=True)
    assert data and all(t.kind == "single" for t in data)


def test_degraded_set_breaks_some_questions(world):
    data = dg.build_training_set(world, degraded=True)
    bad = sum(dg.answer_from(t.docs, t.question) != t.answer for t in data)
    assert bad > 0.15 * len(data)


def test_jsonl_roundtrip(tmp_path, world):
    data = dg.build_training_set(world)
    dg.write_jsonl(tmp_path / "d.jsonl", data)
    back = dg.read_jsonl(tmp_path / "d.jsonl")
    assert [t.to_json() for t in back] == [t.to_json() for t in data]
    dg.write_corpus(tmp_path / "c.jsonl", world)
    assert len(dg.read_corpus(tmp_path / "c.jsonl")) == len(world.entities)


def test_eval_sets_fixed(world):
    a = dg.build_eval_set(world, "eval-in-domain", "single", 20, 1)
    b = dg.build_eval_set(world, "eval-in-domain", "single", 20, 1)
    assert [t.question for t in a] == [t.question for t in b]
    ood = dg.build_eval_set(world, "eval-ood-style", "cross", 5, 1, ood=True)
    assert all(dg.answer_from(t.docs, t.question) == t.answer for t in ood)
