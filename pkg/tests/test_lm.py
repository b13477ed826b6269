import math
from types import SimpleNamespace

import pytest
import torch

from dprag import lora
from dprag.lm import (
    ForwardTrace, LmConfig, LmExample, LmModel, embedding_matrix, greedy_decode, lm_loss, pad_batch, pretrain_lm,
)
from dprag.mask import compute_stats, install_mask

from conftest import tiny_lm


def test_shapes():
    lm = tiny_lm(30, d=16, layers=2)
    tr = lm(torch.arange(7))
    assert tr.logits.shape == (7, 30)
    assert len(tr.hidden_states) == 2 and tr.hidden_states[0].shape == (7, 16)


def test_forward_errors():
    lm = tiny_lm(30)
    with pytest.raises(ValueError):
        lm(torch.tensor([0, 30]))
    with pytest.raises(ValueError):
        lm(torch.zeros(161, dtype=torch.long))
    with pytest.raises(ValueError):
        LmConfig(30, d_model=10, n_heads=3)


def test_causal():
    lm = tiny_lm(30)
    a = lm(torch.tensor([1, 2, 3, 4, 5])).logits
    b = lm(torch.tensor([1, 2, 3, 9, 9])).logits
    assert torch.equal(a[:3], b[:3]) and not torch.equal(a[3:], b[3:])


def test_zero_b_adapter_is_identity():
    lm = tiny_lm(30)
    d = lora.random(lm.cfg.lora_shape(), torch.Generator().manual_seed(0))
    d = lora.LoraDelta(d.A, {k: torch.zeros_like(v) for k, v in d.B.items()}, d.rank, d.alpha)
    toks = torch.arange(10)
    base, adapted = lm(toks), lm(toks, d)
    assert (base.logits - adapted.logits).abs().max() <= 1e-12
    for h0, h1 in zip(base.hidden_states, adapted.hidden_states):
        assert (h0 - h1).abs().max() <= 1e-12


def test_batched_equals_unbatched():
    lm = tiny_lm(30)
    toks = torch.randint(0, 30, (3, 8), generator=torch.Generator().manual_seed(0))
    batched = lm(toks).logits
    for i in range(3):
        assert torch.allclose(batched[i], lm(toks[i]).logits, atol=1e-12)


def test_greedy_decode_hand_chain():
    # bigram toy: next token after t is table[t]; 0 -> 2 -> 1 -> eos(3)
    table = {0: 2, 2: 1, 1: 3, 3: 0}

    class Toy:
        cfg = SimpleNamespace(max_len=50)

        def __call__(self, seq, adapter=None):
            logits = torch.zeros(len(seq), 4)
            for i, t in enumerate(seq.tolist()):
                logits[i, table[t]] = 5.0
            return ForwardTrace(logits, [], seq)

    assert greedy_decode(Toy(), [0], max_new_tokens=10, eos_id=3) == [2, 1]
    assert greedy_decode(Toy(), [0], max_new_tokens=10) == [2, 1, 3, 0, 2, 1, 3, 0, 2, 1]
    assert greedy_decode(Toy(), [0], max_new_tokens=0) == []


def test_greedy_decode_deterministic():
    lm = tiny_lm(30)
    assert greedy_decode(lm, [1, 2, 3], max_new_tokens=5) == greedy_decode(lm, [1, 2, 3], max_new_tokens=5)
    with pytest.raises(ValueError):
        greedy_decode(lm, [])


def test_embedding_matrix_consistent(tok):
    lm = tiny_lm(len(tok), tok.mask_id)
    me = install_mask(lm, "stats", 0)
    E = embedding_matrix(lm)
    assert E.shape[0] == len(tok)
    assert torch.equal(E[tok.mask_id], me.e_mask.to(E.dtype))
    toks = torch.tensor([5, tok.mask_id])
    emb = lm.embed(toks) - lm.pos[:2]
    assert torch.allclose(emb, E[toks], atol=1e-12)
    keep = [i for i in range(len(tok)) if i != tok.mask_id]
    mu, _ = compute_stats(E[keep])
    brute = torch.stack([E[keep][:, j].sum() / len(keep) for j in range(E.shape[1])])
    assert torch.allclose(mu, brute, atol=1e-12)


def test_pad_batch():
    toks, valid = pad_batch([[1, 2, 3], [4]], pad_id=0)
    assert toks.tolist() == [[1, 2, 3], [4, 0, 0]]
    assert valid.tolist() == [[True, True, True], [True, False, False]]


def test_save_load_roundtrip(tmp_path):
    lm = tiny_lm(30, mask_id=1, dtype=torch.float32)
    lm.mask_vec.data.normal_()
    lm.save(tmp_path / "lm.safetensors")
    back = LmModel.load(tmp_path / "lm.safetensors")
    toks = torch.arange(6)
    assert torch.equal(lm(toks).logits, back(toks).logits)
    assert back.config_hash() == lm.config_hash()


def _toy_examples(V=12, n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(n):
        start = int(torch.randint(2, V - 6, (1,), generator=g))
        seq = [1] + list(range(start, start + 6))
        out.append(LmExample(seq, [0.0] + [1.0] * 6))
    return out


def test_initial_loss_near_log_v():
    V = 300
    lm = LmModel(LmConfig(V, 32, 2, 2, 64, 64, 0))
    ex = [LmExample(list(range(i, i + 20)), [0.0] + [1.0] * 19) for i in range(0, 200, 20)]
    loss = float(lm_loss(lm, ex, pad_id=0).detach())
    assert abs(loss - math.log(V)) <= 0.05 * math.log(V)


def test_pretrain_reduces_loss_and_is_deterministic():
    ex = _toy_examples()
    cfg = LmConfig(12, 16, 2, 2, 32, 16, seed=0)
    m1, l1 = pretrain_lm(ex, cfg, 60, pad_id=0, mask_id=None, batch_size=8, lr=3e-3)
    m2, l2 = pretrain_lm(ex, cfg, 60, pad_id=0, mask_id=None, batch_size=8, lr=3e-3)
    assert l1 == l2
    assert sum(l1[-10:]) / 10 < 0.7 * sum(l1[:10]) / 10
    for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
