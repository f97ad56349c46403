import math

import numpy as np
import pytest

from mg2p.data import BOS_ID, PAD_ID, Dataset, build_vocabulary
from mg2p.model import ConfigError, ModelConfig, forward_loss, init_model, make_batch
from mg2p.nn import gradient_check, no_grad
from mg2p.synthetic import make_splits
from mg2p.training import Adam


def test_default_config_matches_published_hyperparameters():
    c = ModelConfig()
    assert (c.num_layers, c.hidden_size, c.embed_size, c.ff_size, c.num_heads, c.dropout_p) == (6, 512, 512, 2048, 8, 0.1)


@pytest.mark.parametrize(
    "kwargs",
    [dict(num_heads=3), dict(embed_size=32), dict(num_layers=0), dict(dropout_p=1.0), dict(label_smoothing=-0.1)],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig.micro(**kwargs)


def test_parameter_count_closed_form():
    # H=64, F=256, L=2, V_src=50, V_tgt=60
    # attention 4(H^2+H)=16640, feed-forward 2HF+F+H=33088, norm 2H=128
    # encoder layer 16640+33088+2*128=49984; decoder layer 2*16640+33088+3*128=66752
    # embeddings (50+60)*64=7040; output 64*60+60=3900
    model = init_model(ModelConfig.micro(), 50, 60, seed=1)
    assert model.num_parameters() == 2 * 49984 + 2 * 66752 + 7040 + 3900 == 244412


def test_init_determinism():
    a = init_model(ModelConfig.micro(), 20, 30, seed=1)
    b = init_model(ModelConfig.micro(), 20, 30, seed=1)
    c = init_model(ModelConfig.micro(), 20, 30, seed=2)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert not np.array_equal(a.flat, c.flat)
    assert np.isfinite(a.flat).all()
    assert (a.params["enc0.self.bq"].data == 0).all()
    assert (a.params["enc0.norm1.gamma"].data == 1).all()


@pytest.fixture(scope="module")
def tiny():
    train, _ = make_splits("alf", 40, 0)
    src, tgt = build_vocabulary([Dataset(train, "train")])
    model = init_model(ModelConfig.micro(dropout_p=0.0), len(src), len(tgt), seed=3)
    return model, src, tgt, train


def _source_batch(src, entries):
    batch = make_batch(entries, src, src)
    return batch.src


def test_encode_shape_and_batch_independence(tiny):
    model, src, tgt, train = tiny
    ids = make_batch(train[:5], src, tgt).src
    with no_grad():
        mem = model.encode(ids).data
        perm = [3, 0, 4, 1, 2]
        mem_perm = model.encode(ids[perm]).data
    assert mem.shape == (5, ids.shape[1], 64)
    np.testing.assert_allclose(mem_perm, mem[perm], rtol=1e-5, atol=1e-6)


def test_padding_does_not_leak(tiny):
    model, src, tgt, train = tiny
    ids = make_batch(train[:6], src, tgt).src
    pad = ids == PAD_ID
    assert pad.any()
    other = ids.copy()
    other[pad] = 5
    with no_grad():
        a = model.encode(ids, pad).data
        b = model.encode(other, pad).data
    assert np.array_equal(a[~pad], b[~pad])


def test_sequence_too_long():
    model = init_model(ModelConfig.micro(max_positions=8), 10, 10, seed=0)
    with pytest.raises(ValueError):
        model.encode(np.ones((1, 9), dtype=int))


def test_decode_step_distribution_and_causality(tiny):
    model, src, tgt, train = tiny
    batch = make_batch(train[:3], src, tgt)
    rng = np.random.default_rng(0)
    with no_grad():
        mem = model.encode(batch.src)
        prefix = np.concatenate([np.full((3, 1), BOS_ID), rng.integers(4, len(tgt), size=(3, 5))], axis=1)
        full = model.decode_distributions(mem, batch.src_pad, prefix)
        for t in range(1, 6):
            short = model.decode_step(mem, batch.src_pad, prefix[:, :t])
            np.testing.assert_allclose(short, full[:, t - 1], rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(full.sum(-1), 1.0, atol=1e-6)
    entropy = -(full * np.log(full)).sum(-1)
    assert np.all(np.abs(entropy - math.log(len(tgt))) < 0.1)


def test_decode_step_prefix_rules(tiny):
    model, src, tgt, train = tiny
    batch = make_batch(train[:1], src, tgt)
    with no_grad():
        mem = model.encode(batch.src)
        with pytest.raises(ValueError):
            model.decode_step(mem, batch.src_pad, np.zeros((1, 0), dtype=int))
        with pytest.raises(ValueError):
            model.decode_step(mem, batch.src_pad, np.array([[5]]))


def test_untrained_loss_near_uniform(tiny):
    model, src, tgt, train = tiny
    with no_grad():
        loss = forward_loss(model, train, src, tgt).item()
    assert loss >= 0
    assert abs(loss - math.log(len(tgt))) < 0.1
    with pytest.raises(ValueError):
        forward_loss(model, [], src, tgt)


def test_eval_forward_is_pure(tiny):
    model, src, tgt, train = tiny
    m = init_model(ModelConfig.micro(), len(src), len(tgt), seed=3).eval()
    with no_grad():
        a = forward_loss(m, train[:4], src, tgt).item()
        b = forward_loss(m, train[:4], src, tgt).item()
    assert a == b


def test_small_model_gradients():
    train, _ = make_splits("bet", 4, 0)
    src, tgt = build_vocabulary([Dataset(train, "train")])
    cfg = ModelConfig(num_layers=1, hidden_size=8, embed_size=8, ff_size=16, num_heads=2, dropout_p=0.0, max_positions=32)
    model = init_model(cfg, len(src), len(tgt), seed=0, dtype=np.float64)
    batch = make_batch(train, src, tgt)
    from mg2p.model import batch_loss

    err = gradient_check(lambda: batch_loss(model, batch), list(model.params.values()), samples=300, seed=1)
    assert err < 1e-4


def test_overfit_single_batch():
    train, _ = make_splits("gam", 8, 0)
    src, tgt = build_vocabulary([Dataset(train, "train")])
    model = init_model(ModelConfig.micro(dropout_p=0.0), len(src), len(tgt), seed=0)
    opt = Adam(model.flat.size, 0.9, 0.98, 1e-9)
    batch = make_batch(train, src, tgt)
    from mg2p.model import batch_loss

    for _ in range(500):
        model.zero_grad()
        loss = batch_loss(model, batch)
        loss.backward()
        opt.step(model.flat, model.flat_grad, 1e-3)
    assert loss.item() < 0.05
