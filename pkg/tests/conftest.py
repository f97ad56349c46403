import random

import pytest

from mg2p.data import Dataset, PronunciationEntry, build_vocabulary
from mg2p.model import ModelConfig
from mg2p.synthetic import make_splits
from mg2p.training import TrainConfig, train_seeds


class Run:
    def __init__(self, train, dev, src, tgt, checkpoints):
        self.train, self.dev, self.src, self.tgt, self.checkpoints = train, dev, src, tgt, checkpoints


@pytest.fixture(scope="session")
def toy_run():
    """Micro model trained briefly on three toy languages."""
    train, dev = [], []
    for code in ("alf", "bet", "gam"):
        a, b = make_splits(code, 60, 15)
        train += a
        dev += b
    src, tgt = build_vocabulary([Dataset(train, "train")])
    tc = TrainConfig(total_steps=300, batch_tokens=256, warmup_steps=60, lr_scale=1.0, seeds=(1,))
    ckpts = train_seeds(train, src, tgt, ModelConfig.micro(), tc)
    return Run(train, dev, src, tgt, ckpts)


def binary_lexicon(n, seed):
    """Source words over {a, b, c}; targets over two phonemes {x, y}."""
    rng = random.Random(seed)
    sounds = {"a": ("x",), "b": ("y",), "c": ("x", "y")}
    out = []
    for _ in range(n):
        word = "".join(rng.choice("abc") for _ in range(rng.randint(1, 3)))
        target = tuple(s for ch in word for s in sounds[ch])[:3]
        out.append(PronunciationEntry("bin", tuple(word), target))
    return out


@pytest.fixture(scope="session")
def binary_run():
    """Toy model whose target vocabulary is the 4 specials plus 2 phonemes."""
    train = binary_lexicon(80, 0)
    src, tgt = build_vocabulary([Dataset(train, "train")])
    assert len(tgt) == 6
    tc = TrainConfig(total_steps=120, batch_tokens=256, warmup_steps=30, lr_scale=1.0, seeds=(2,))
    mc = ModelConfig.micro(hidden_size=32, embed_size=32, ff_size=64)
    ckpts = train_seeds(train, src, tgt, mc, tc)
    return Run(train, binary_lexicon(50, 1), src, tgt, ckpts)
