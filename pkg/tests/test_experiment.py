from dprag.experiment import episode, reading_examples, retrieval_examples


def test_episode_weights_answer_fully(tok):
    ex = episode(tok, ["alpha beta"], "who", "gamma", 0.1)
    assert len(ex.tokens) == len(ex.weights)
    assert ex.weights[0] == 0.0
    assert ex.tokens[-1] == tok.eoa_id
    # answer token plus EOA carry full weight, everything before is context
    assert ex.weights[-2:] == [1.0, 1.0] and set(ex.weights[1:-2]) == {0.1}


def test_reading_examples_layout(tok):
    exs = reading_examples(tok, 30, seed=0, qa_per_episode=3, chunk_entities=40, chunk_episodes=20)
    assert len(exs) == 30
    for ex in exs:
        assert ex.tokens[0] == tok.bos_id and len(ex.tokens) <= 256
        seps = [i for i, t in enumerate(ex.tokens) if t == tok.sep_id]
        assert len(seps) == 2 * ex.tokens.count(tok.eoa_id)
        full = [t for t, w in zip(ex.tokens, ex.weights) if w == 1.0]
        assert full[-1] == tok.eoa_id and tok.sep_id not in full


def test_reading_examples_deterministic(tok):
    a = reading_examples(tok, 12, seed=4, chunk_entities=40)
    b = reading_examples(tok, 12, seed=4, chunk_entities=40)
    assert [x.tokens for x in a] == [x.tokens for x in b]
    c = reading_examples(tok, 12, seed=5, chunk_entities=40)
    assert [x.tokens for x in a] != [x.tokens for x in c]


def test_retrieval_examples_single_question(tok):
    exs = retrieval_examples(tok, 25, seed=1, k=3, chunk_entities=40, chunk_episodes=10)
    assert len(exs) == 25
    for ex in exs:
        assert ex.tokens.count(tok.sep_id) == 2 and ex.tokens.count(tok.eoa_id) == 1
        assert ex.tokens.count(tok.bos_id) == 1
