import math

import numpy as np
import pytest

from mg2p.data import Dataset, build_vocabulary
from mg2p.model import ModelConfig, init_model
from mg2p.synthetic import make_splits
from mg2p.training import (
    Adam,
    Checkpoint,
    ChecksumError,
    CheckpointError,
    FingerprintError,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    token_batches,
    train,
    train_seeds,
)


def test_lr_schedule_crossover_and_values():
    warmup, h = 4000, 512
    assert warmup ** -0.5 == pytest.approx(warmup * warmup ** -1.5)
    assert lr_schedule(2, 100, 64) == pytest.approx(2 * lr_schedule(1, 100, 64))
    assert lr_schedule(4000, 4000, 512) == pytest.approx(1 / math.sqrt(512 * 4000))
    assert lr_schedule(4000, 4000, 512) == pytest.approx(6.99e-4, abs=5e-7)
    early = [lr_schedule(s, warmup, h) for s in range(1, warmup + 1)]
    late = [lr_schedule(s, warmup, h) for s in range(warmup, warmup + 500)]
    assert all(a < b for a, b in zip(early, early[1:]))
    assert all(a > b for a, b in zip(late, late[1:]))
    with pytest.raises(ValueError):
        lr_schedule(0, warmup, h)


def test_adam_matches_reference_scalar():
    b1, b2, eps, lr = 0.9, 0.98, 1e-9, 0.01
    x = np.array([1.5])
    opt = Adam(1, b1, b2, eps, dtype=np.float64)
    ref_x, m, v = 1.5, 0.0, 0.0
    for t in range(1, 51):
        # minimize (x - 0.3)^2
        g = 2 * (x[0] - 0.3)
        opt.step(x, np.array([g]), lr)
        rg = 2 * (ref_x - 0.3)
        m = b1 * m + (1 - b1) * rg
        v = b2 * v + (1 - b2) * rg * rg
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        ref_x -= lr * m_hat / (math.sqrt(v_hat) + eps)
        assert abs(x[0] - ref_x) < 1e-12


def test_config_checkpoint_steps():
    assert TrainConfig(total_steps=2000).checkpoint_steps == [500, 1000, 1500, 2000]
    assert TrainConfig().checkpoint_steps == [50_000, 100_000, 150_000, 200_000]
    assert len(TrainConfig().seeds) * len(TrainConfig().checkpoint_steps) == 12
    with pytest.raises(ValueError):
        TrainConfig(total_steps=2001)
    with pytest.raises(ValueError):
        TrainConfig(seeds=())


def test_token_batches_budget_and_coverage():
    train_set, _ = make_splits("bet", 120, 0)
    batches = token_batches(train_set, 64, np.random.default_rng(0))
    seen = sorted(i for b in batches for i in b)
    assert seen == list(range(len(train_set)))
    for b in batches:
        width = max(len(train_set[i].target) + 1 for i in b)
        assert width * len(b) <= 64
    again = token_batches(train_set, 64, np.random.default_rng(0))
    assert again == batches
    with pytest.raises(ValueError):
        token_batches(train_set, 3, np.random.default_rng(0))


@pytest.fixture(scope="module")
def small_run():
    data, _ = make_splits("alf", 30, 0)
    src, tgt = build_vocabulary([Dataset(data, "train")])
    mc = ModelConfig.micro(hidden_size=16, embed_size=16, ff_size=32, num_heads=2)
    tc = TrainConfig(total_steps=40, batch_tokens=128, warmup_steps=10, lr_scale=1.0, seeds=(7,))
    return data, src, tgt, mc, tc


def test_train_emits_quarter_checkpoints(small_run):
    data, src, tgt, mc, tc = small_run
    model = init_model(mc, len(src), len(tgt), 7)
    seen = []
    ckpts = train(model, data, src, tgt, tc, 7, on_checkpoint=seen.append)
    assert [c.step for c in ckpts] == [10, 20, 30, 40]
    assert seen == ckpts
    assert np.array_equal(ckpts[-1].params, model.flat)
    assert all(c.seed == 7 and c.src_fingerprint == src.fingerprint() for c in ckpts)


def test_training_is_bitwise_deterministic(small_run):
    data, src, tgt, mc, tc = small_run
    a = train_seeds(data, src, tgt, mc, tc)
    b = train_seeds(data, src, tgt, mc, tc)
    assert [c.params.tobytes() for c in a] == [c.params.tobytes() for c in b]


def test_nonfinite_loss_aborts(small_run):
    data, src, tgt, mc, tc = small_run
    model = init_model(mc, len(src), len(tgt), 7)
    model.params["out.b"].data[0] = np.nan
    with pytest.raises(TrainingError, match="step 1"):
        train(model, data, src, tgt, tc, 7)


def test_empty_training_set(small_run):
    _, src, tgt, mc, tc = small_run
    with pytest.raises(TrainingError):
        train(init_model(mc, len(src), len(tgt), 0), [], src, tgt, tc, 0)


def test_loss_windows_fall_after_warmup():
    data, _ = make_splits("gam", 12, 0)
    src, tgt = build_vocabulary([Dataset(data, "train")])
    mc = ModelConfig.micro(dropout_p=0.0)
    tc = TrainConfig(total_steps=800, batch_tokens=4096, warmup_steps=100, lr_scale=1.0, seeds=(1,))
    losses = []
    train(init_model(mc, len(src), len(tgt), 1), data, src, tgt, tc, 1, loss_log=losses)
    # one batch holds the whole set, so every step sees the same batch
    windows = [np.mean(losses[s: s + 200]) for s in range(100, 800, 200)]
    assert all(a >= b for a, b in zip(windows, windows[1:]))


def test_checkpoint_round_trip_and_corruption(small_run, tmp_path):
    data, src, tgt, mc, tc = small_run
    ckpt = train_seeds(data, src, tgt, mc, tc)[-1]
    path = save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(path, src, tgt)
    assert back.params.tobytes() == ckpt.params.tobytes()
    assert (back.step, back.seed, back.config) == (ckpt.step, ckpt.seed, ckpt.config)

    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(bad)

    short = tmp_path / "short.ckpt"
    short.write_bytes(path.read_bytes()[:50])
    with pytest.raises(CheckpointError):
        load_checkpoint(short)

    other_src, other_tgt = build_vocabulary([Dataset(make_splits("bet", 30, 0)[0], "train")])
    with pytest.raises(FingerprintError):
        load_checkpoint(path, other_src, other_tgt)


def test_checkpoint_step_invariant(small_run):
    _, src, tgt, mc, _ = small_run
    with pytest.raises(CheckpointError):
        Checkpoint(np.zeros(1), mc, step=5, seed=1, total_steps=4, src_vocab_size=1, tgt_vocab_size=1,
                   src_fingerprint=0, tgt_fingerprint=0)
