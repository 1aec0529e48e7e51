import numpy as np
import pytest

from headprune import autodiff as ad
from headprune.data import gen_needle_data
from headprune.model import ModelConfig, build_model
from headprune.optim import SGD

SIGNAL_HEADS = (2, 5)


def tiny_classifier(seed=0, d=8, heads=2, layers=1, vocab=6, length=5):
    cfg = ModelConfig(task="classifier", n_layers=layers, n_heads=heads, d_model=d, vocab_size=vocab, max_len=length)
    return build_model(cfg, np.random.default_rng(seed))


def tiny_seq2seq(seed=0, d=8, heads=2, vocab=6, length=5, d_head=None):
    cfg = ModelConfig(
        task="seq2seq", n_layers=1, n_dec_layers=1, n_heads=heads, d_model=d,
        vocab_size=vocab, max_len=length, d_head=d_head,
    )
    return build_model(cfg, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def planted():
    """Needle classifier (H=8) trained with only heads 2 and 5 switched on.

    Every other head's output projection is zeroed afterwards, so its gate has
    no influence on the loss and only the two signal heads matter.
    """
    cfg = ModelConfig(task="classifier", n_layers=2, n_heads=4, d_model=16, vocab_size=6, max_len=10)
    model = build_model(cfg, np.random.default_rng(7))
    train = gen_needle_data(11, 1500, 6, 10)
    heldout = gen_needle_data(12, 256, 6, 10)
    # each batch sees one or both signal heads, so either head is useful on its own
    subsets = [SIGNAL_HEADS[:1], SIGNAL_HEADS[1:], SIGNAL_HEADS]
    opt = SGD(model.parameters(), 0.1)
    batches = np.random.default_rng(3)
    for _ in range(6):
        for batch in train.batches(32, batches):
            gates = np.zeros(model.n_heads)
            gates[list(subsets[batches.integers(3)])] = 1.0
            opt.zero_grad()
            ad.backward(model.loss(batch, gates))
            opt.step()
    for block, off in zip(model.blocks, model.block_offsets()):
        wo = model.params[f"{block.prefix}.wo"].data
        for j in range(block.n_heads):
            if off + j not in SIGNAL_HEADS:
                wo[j] = 0.0
    model.zero_grad()
    return model, train, heldout


# acceptance criteria report one line each at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
