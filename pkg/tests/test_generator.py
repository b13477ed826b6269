import pytest
import torch

from dprag import checkpoint
from dprag import datagen as dg
from dprag.distill import DistillConfig, batch_losses, prepare
from dprag.generator import (
    DocEncoder, EncoderConfig, GeneratorConfig, GeneratorNet, encode_documents, mlm_accuracy, pretrain_encoder,
)
from dprag.lora import flatten

from conftest import tiny_stack


def test_encoder_shape_and_determinism(tok):
    enc = DocEncoder(EncoderConfig(len(tok), 16, 1, 2, 32, 64, 0)).freeze()
    toks = tok.encode("ann lee was born in oslo .")
    a, b = encode_documents(enc, toks), encode_documents(enc, toks)
    assert a.shape == (len(toks), 16) and torch.equal(a, b)
    with pytest.raises(ValueError):
        encode_documents(enc, [])
    with pytest.raises(ValueError):
        enc(torch.zeros(65, dtype=torch.long))


def test_encoder_swap_changes_swapped_rows():
    enc = DocEncoder(EncoderConfig(50, 16, 1, 2, 32, 64, 0)).freeze()
    toks = torch.arange(3, 23)
    swapped = toks.clone()
    swapped[[1, 18]] = swapped[[18, 1]]
    a, b = enc(toks), enc(swapped)
    assert not torch.allclose(a[1], b[1]) and not torch.allclose(a[18], b[18])


def test_encoder_pretraining_beats_chance(tok, world):
    docs = [tok.encode(dg.render_document(e)) for e in world.entities]
    train, held = docs[:100], docs[100:]
    cfg = EncoderConfig(len(tok), 32, 1, 2, 64, 160, 0)
    enc, losses = pretrain_encoder(train, cfg, 150, tok.mask_id, tok.pad_id, tok.special_ids, batch_size=16, lr=3e-3)
    assert enc.frozen and not any(p.requires_grad for p in enc.parameters())
    assert losses[-1] < losses[0]
    acc = mlm_accuracy(enc, held, tok.mask_id, tok.pad_id, tok.special_ids)
    assert acc > 10 / len(tok)
    enc2, _ = pretrain_encoder(train, cfg, 150, tok.mask_id, tok.pad_id, tok.special_ids, batch_size=16, lr=3e-3)
    assert checkpoint.module_checksum(enc) == checkpoint.module_checksum(enc2)


def test_generator_output_slices():
    gen = GeneratorNet(GeneratorConfig(3, 8, 16, 2, 32.0, 2, 1, 32))
    d = gen(torch.randn(11, 16))
    assert d.layers() == [0, 1, 2] and d.rank == 2
    assert flatten(d).numel() == gen.cfg.lora_shape().flat_len()
    batched = gen(torch.randn(4, 11, 16), torch.ones(4, 11, dtype=torch.bool))
    assert batched.batched and batched.A[(0, "q")].shape == (4, 2, 8)


def test_initial_delta_is_zero_and_student_equals_base(tok):
    lm, enc, gen = tiny_stack(tok)
    doc = tok.encode("ann lee was born in oslo .")
    d = gen(encode_documents(enc, doc))
    assert all(d.dense(k).abs().max() == 0 for k in d.keys)
    toks = torch.tensor(doc)
    assert torch.equal(lm(toks, d).logits, lm(toks).logits)


def test_padding_does_not_change_delta(tok):
    _, enc, gen = tiny_stack(tok, zero_head=False)
    doc = torch.tensor(tok.encode("ann lee was born in oslo ."))
    E = enc(doc)
    single = flatten(gen(E))
    padded = torch.cat([E, torch.randn(5, E.shape[1], dtype=E.dtype)])
    valid = torch.tensor([True] * len(doc) + [False] * 5)
    assert torch.allclose(flatten(gen(padded, valid)), single, atol=1e-10)


def test_only_generator_receives_gradient(tok, world):
    lm, enc, gen = tiny_stack(tok, zero_head=False)
    batch = prepare(dg.build_training_set(world, seed=1)[:3], tok, DistillConfig())
    batch_losses(lm, enc, gen, batch, DistillConfig()).total.backward()
    assert gen.queries.grad is not None and gen.queries.grad.abs().max() > 0
    assert all(p.grad is not None for p in gen.parameters())
    assert all(p.grad is None for p in list(lm.parameters()) + list(enc.parameters()))


def test_save_load_refuses_other_lm(tmp_path):
    gen = GeneratorNet(GeneratorConfig(2, 8, 16, 2, 32.0, 2, 1, 32, lm_hash="abc"))
    gen.save(tmp_path / "g.safetensors")
    back = GeneratorNet.load(tmp_path / "g.safetensors", lm_hash="abc")
    E = torch.randn(4, 16)
    assert torch.equal(flatten(back(E)), flatten(gen.eval()(E)))
    with pytest.raises(checkpoint.CheckpointError):
        GeneratorNet.load(tmp_path / "g.safetensors", lm_hash="xyz")
