import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dprag import lora
from dprag.lora import LoraDelta, LoraShape, apply_delta, flatten, fuse_average, fuse_concat_rank, unflatten

from conftest import tiny_lm


def test_apply_delta_zero_B_is_identity():
    W = torch.randn(3, 4, dtype=torch.float64)
    out = apply_delta(W, torch.randn(2, 4, dtype=torch.float64), torch.zeros(3, 2, dtype=torch.float64), 16.0)
    assert torch.equal(out, W)


def test_apply_delta_hand_rank_one():
    # B = e1, A = e2^T: adds 1 at (0, 1)
    W = torch.zeros(2, 2, dtype=torch.float64)
    out = apply_delta(W, torch.tensor([[0.0, 1.0]], dtype=torch.float64),
                      torch.tensor([[1.0], [0.0]], dtype=torch.float64), 1.0)
    assert out.tolist() == [[0.0, 1.0], [0.0, 0.0]]


def test_apply_delta_linear_in_alpha():
    W = torch.randn(3, 3, dtype=torch.float64)
    A, B = torch.randn(2, 3, dtype=torch.float64), torch.randn(3, 2, dtype=torch.float64)
    d1 = apply_delta(W, A, B, 32 / 2) - W
    d2 = apply_delta(W, A, B, 64 / 2) - W
    assert torch.allclose(d2, 2 * d1, atol=0, rtol=1e-15)


def test_apply_delta_shape_mismatch():
    with pytest.raises(ValueError):
        apply_delta(torch.zeros(3, 3), torch.zeros(2, 4), torch.zeros(3, 2), 1.0)


SHAPE = LoraShape(n_layers=2, d_model=6, rank=2, alpha=32.0)


def _rand(seed, shape=SHAPE):
    return lora.random(shape, torch.Generator().manual_seed(seed))


def test_concat_two_copies_doubles():
    d = _rand(0)
    fused = fuse_concat_rank([d, d])
    for k in d.keys:
        assert torch.allclose(fused.dense(k), 2 * d.dense(k), atol=1e-12)


def test_concat_singleton():
    d = _rand(1)
    fused = fuse_concat_rank([d])
    for k in d.keys:
        assert torch.allclose(fused.dense(k), d.dense(k), atol=1e-12)


def test_concat_equals_dense_sum():
    ds = [_rand(s) for s in range(3)]
    fused = fuse_concat_rank(ds)
    assert fused.rank == 6
    for k in ds[0].keys:
        oracle = sum(d.scale * d.B[k] @ d.A[k] for d in ds)
        assert (fused.dense(k) - oracle).abs().max() <= 1e-9


def test_concat_target_mismatch():
    a = _rand(0)
    b = LoraDelta({k: v for k, v in a.A.items() if k[0] == 0}, {k: v for k, v in a.B.items() if k[0] == 0}, 2, 32.0)
    with pytest.raises(ValueError):
        fuse_concat_rank([a, b])


def test_average_identical_is_idempotent():
    d = _rand(2)
    avg = fuse_average([d, d, d])
    for k in d.keys:
        assert torch.allclose(avg.A[k], d.A[k]) and torch.allclose(avg.B[k], d.B[k])


def test_average_antisymmetric_pair():
    d = _rand(3)
    neg = LoraDelta({k: -v for k, v in d.A.items()}, dict(d.B), d.rank, d.alpha)
    avg = fuse_average([d, neg])
    for k in d.keys:
        assert avg.dense(k).abs().max() == 0


def test_average_is_not_mean_of_updates():
    a, b = _rand(4), _rand(5)
    avg = fuse_average([a, b])
    k = a.keys[0]
    gap = avg.dense(k) - (a.dense(k) + b.dense(k)) / 2
    assert gap.norm() > 0


def test_average_rank_mismatch():
    with pytest.raises(ValueError):
        fuse_average([_rand(0), _rand(1, LoraShape(2, 6, 1, 32.0))])


def test_flatten_length_and_roundtrip():
    d = _rand(6)
    v = flatten(d)
    assert v.numel() == SHAPE.flat_len() == 2 * 2 * 2 * (6 + 6)
    back = unflatten(v, SHAPE)
    for k in d.keys:
        assert torch.equal(back.A[k], d.A[k]) and torch.equal(back.B[k], d.B[k])


def test_flatten_documented_order():
    # one 2x2 target, rank 1: [A00, A01, B00, B10]
    shape = LoraShape(1, 2, 1, 1.0, ("q",))
    d = LoraDelta({(0, "q"): torch.tensor([[1.0, 2.0]])}, {(0, "q"): torch.tensor([[3.0], [4.0]])}, 1, 1.0)
    assert flatten(d).tolist() == [1.0, 2.0, 3.0, 4.0]
    assert unflatten(torch.tensor([1.0, 2.0, 3.0, 4.0]), shape).B[(0, "q")].tolist() == [[3.0], [4.0]]


def test_unflatten_length_mismatch():
    with pytest.raises(ValueError):
        unflatten(torch.zeros(5), SHAPE)


@settings(max_examples=30, deadline=None)
@given(seeds=st.lists(st.integers(0, 10_000), min_size=1, max_size=4))
def test_concat_additive_property(seeds):
    ds = [_rand(s) for s in seeds]
    fused = fuse_concat_rank(ds)
    for k in ds[0].keys:
        assert torch.allclose(fused.dense(k), sum(d.dense(k) for d in ds), atol=1e-9)


def test_adapter_file_roundtrip(tmp_path):
    d = _rand(7)
    lora.save_adapter(tmp_path / "a.safetensors", d)
    back = lora.load_adapter(tmp_path / "a.safetensors")
    assert back.rank == d.rank and back.alpha == d.alpha
    for k in d.keys:
        assert torch.equal(back.A[k], d.A[k]) and torch.equal(back.B[k], d.B[k])


def test_inject_equals_merge():
    lm = tiny_lm(40)
    delta = lora.random(lm.cfg.lora_shape(), torch.Generator().manual_seed(0), std=0.2)
    toks = torch.randint(0, 40, (12,), generator=torch.Generator().manual_seed(1))
    injected = lm(toks, delta).logits
    merged = lm.merged(delta)(toks).logits
    assert (injected - merged).abs().max() <= 1e-9
