import pytest
import torch

from dprag import datagen as dg
from dprag.experiment import build_tokenizer
from dprag.generator import DocEncoder, EncoderConfig, GeneratorConfig, GeneratorNet
from dprag.lm import LmConfig, LmModel
from dprag.mask import install_mask

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def world():
    return dg.gen_world(3, 120)


@pytest.fixture(scope="session")
def tok(world):
    return build_tokenizer(world)


def tiny_lm(vocab_size, mask_id=None, d=16, layers=2, seed=0, dtype=torch.float64):
    m = LmModel(LmConfig(vocab_size, d, layers, 2, 32, 160, seed), mask_id).to(dtype)
    m.requires_grad_(False)
    m.eval()
    return m


def tiny_stack(tok, seed=0, d=16, layers=2, dtype=torch.float64, zero_head=True):
    lm = tiny_lm(len(tok), tok.mask_id, d, layers, seed, dtype)
    install_mask(lm, "stats", seed)
    enc = DocEncoder(EncoderConfig(len(tok), 16, 1, 2, 32, 160, seed)).to(dtype).freeze()
    gen = GeneratorNet(GeneratorConfig(layers, d, 16, 2, 32.0, 2, 1, 32, seed=seed)).to(dtype)
    if not zero_head:
        with torch.no_grad():
            gen.ffn[-1].weight.normal_(0.0, 0.02, generator=torch.Generator().manual_seed(seed))
    return lm, enc, gen


@pytest.fixture
def stack(tok):
    return tiny_stack(tok)


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance verdict; returns whether it passed (checks and budget)."""

    def report(num: int, name: str, ok: bool, detail: str, seconds: float, budget: float | None = None) -> bool:
        in_budget = budget is None or seconds <= budget
        passed = bool(ok) and in_budget
        timing = f"{seconds:.1f}s" + (f" of {budget:.0f}s budget" if budget is not None else "")
        line = f"criterion {num:>2}: {'PASS' if passed else 'FAIL'}  {name}  ({detail}; {timing})"
        request.config.stash[_CRITERIA].append((num, line))
        with capsys.disabled():
            print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
