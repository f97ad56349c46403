import itertools
import math

import numpy as np
import pytest

from mg2p.data import BOS_ID, EOS_ID, PAD_ID, Dataset, build_vocabulary
from mg2p.decoding import (
    DecodingError,
    EnsembleSpec,
    PredictionFailure,
    PredictionResult,
    beam_search,
    confidence,
    ensemble_distribution,
    greedy_decode,
    predict_file,
)
from mg2p.model import TransformerModel
from mg2p.nn import no_grad
from mg2p.synthetic import make_splits
from mg2p.training import FingerprintError


def test_ensemble_distribution_examples():
    p = np.array([[0.6, 0.4]], dtype=np.float32)
    out = ensemble_distribution([p, p, p])
    assert np.array_equal(out, p.astype(np.float64))
    np.testing.assert_allclose(ensemble_distribution([np.array([0.6, 0.4]), np.array([0.2, 0.8])]), [0.4, 0.6])
    onehots = [np.eye(3)[i] for i in range(3)]
    np.testing.assert_allclose(ensemble_distribution(onehots), [1 / 3] * 3)
    with pytest.raises(DecodingError):
        ensemble_distribution([np.ones(3) / 3, np.ones(4) / 4])
    with pytest.raises(DecodingError):
        ensemble_distribution([])


def test_ensemble_of_random_float32_members_is_exact_mean_for_copies():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.dirichlet(np.ones(9)).astype(np.float32)
        out = ensemble_distribution([p] * rng.integers(1, 13))
        assert np.array_equal(out, p.astype(np.float64))
        assert abs(out.sum() - 1) < 1e-6


def _result(probs):
    return PredictionResult("fre", ("a",), ("a",), (4, EOS_ID), tuple(probs), 0.0, True)


def test_confidence_is_mean_step_prob():
    assert confidence(_result([0.1, 0.3, 0.2])) == pytest.approx(0.2)
    assert confidence(_result([0.9])) == pytest.approx(0.9)
    with pytest.raises(DecodingError):
        confidence(_result([]))


def spec_of(run, members):
    return EnsembleSpec.from_checkpoints(members, run.src, run.tgt)


def test_result_invariants(toy_run):
    spec = spec_of(toy_run, toy_run.checkpoints[-1:])
    for e in toy_run.dev[:20]:
        r = beam_search(spec, e.lang, e.source)
        assert len(r.step_probs) == len(r.token_ids)
        assert all(0 < p <= 1 for p in r.step_probs)
        assert r.finished == (r.token_ids[-1] == EOS_ID)
        assert r.score == pytest.approx(sum(math.log(p) for p in r.step_probs), abs=1e-9)
        assert 0 < r.confidence <= 1
        assert len(r.target) == len(r.token_ids) - (1 if r.finished else 0)


def test_width_one_is_greedy(toy_run):
    spec = spec_of(toy_run, toy_run.checkpoints[-2:])
    for e in toy_run.dev:
        beam = beam_search(spec, e.lang, e.source, beam_width=1)
        greedy = greedy_decode(spec, e.lang, e.source)
        assert beam.token_ids == greedy.token_ids
        assert beam.step_probs == greedy.step_probs


def test_identical_members_match_single_model(toy_run):
    ckpt = toy_run.checkpoints[-1]
    single = spec_of(toy_run, [ckpt])
    triple = spec_of(toy_run, [ckpt, ckpt, ckpt])
    for e in toy_run.dev[:25]:
        a = beam_search(single, e.lang, e.source)
        b = beam_search(triple, e.lang, e.source)
        assert a.token_ids == b.token_ids
        assert a.step_probs == b.step_probs
        assert a.confidence == b.confidence


def test_ensemble_of_one_equals_model(toy_run):
    ckpt = toy_run.checkpoints[-1]
    spec = EnsembleSpec((ckpt.to_model(),), toy_run.src, toy_run.tgt)
    same = spec_of(toy_run, [ckpt])
    e = toy_run.dev[0]
    assert beam_search(spec, e.lang, e.source) == beam_search(same, e.lang, e.source)


def _sequence_logprob(spec, src_ids, seq):
    src = np.array([src_ids])
    pad = src == PAD_ID
    prefix = np.array([[BOS_ID] + list(seq[:-1])])
    total = 0.0
    with no_grad():
        members = [m.decode_distributions(m.encode(src, pad), pad, prefix)[0] for m in spec.models]
    dist = ensemble_distribution(members)
    for t, tok in enumerate(seq):
        total += math.log(dist[t, tok])
    return total


def test_beam_is_exact_with_saturating_width(binary_run):
    spec = spec_of(binary_run, binary_run.checkpoints[-1:])
    max_len = 4
    content = [3, 4, 5]  # UNK and the two phonemes; PAD/BOS are never emitted
    width = (len(content) + 1) ** max_len
    for e in binary_run.dev[:10]:
        src_ids = spec.src_vocab.encode(["<bin>"] + list(e.source))
        best = max(
            (tuple(body) + (EOS_ID,) for n in range(max_len) for body in itertools.product(content, repeat=n)),
            key=lambda s: _sequence_logprob(spec, src_ids, s),
        )
        got = beam_search(spec, "bin", e.source, beam_width=width, max_len=max_len)
        assert got.token_ids == best


def test_uniform_model_breaks_ties_by_lowest_id():
    class Uniform(TransformerModel):
        def decode_step(self, memory, src_pad, prefix_ids):
            return np.full((prefix_ids.shape[0], self.tgt_vocab_size), 1.0 / self.tgt_vocab_size, dtype=np.float32)

    data, _ = make_splits("alf", 10, 0)
    src, tgt = build_vocabulary([Dataset(data, "train")])
    from mg2p.model import ModelConfig

    spec = EnsembleSpec((Uniform(ModelConfig.micro(), len(src), len(tgt)),), src, tgt)
    r = beam_search(spec, "alf", ("a", "b"), beam_width=3)
    assert r.token_ids == (EOS_ID,)
    assert r.target == ()


def test_beam_errors(toy_run):
    spec = spec_of(toy_run, toy_run.checkpoints[-1:])
    with pytest.raises(DecodingError):
        beam_search(spec, "alf", ())
    with pytest.raises(DecodingError):
        beam_search(spec, "alf", ("a",), beam_width=0)
    with pytest.raises(DecodingError):
        beam_search(spec, "alf", ("a",), max_len=0)


def test_max_len_caps_output(toy_run):
    spec = spec_of(toy_run, toy_run.checkpoints[-1:])
    r = beam_search(spec, "alf", tuple("pataka"), max_len=2)
    assert len(r.token_ids) <= 2


def test_predict_file(toy_run):
    spec = spec_of(toy_run, toy_run.checkpoints[-1:])
    assert predict_file(spec, [], "alf") == []
    words = ["puche", "famu", "puche", "vu"]
    out = predict_file(spec, words, "alf")
    assert [r.word for r in out] == words
    assert out[0] == out[2]
    assert predict_file(spec, words, "alf", jobs=2) == out
    failed = predict_file(spec, ["ab"], "zzz")
    assert isinstance(failed[0], PredictionFailure) and "zzz" in failed[0].error


def test_mismatched_vocab_rejected(toy_run):
    other_src, other_tgt = build_vocabulary([Dataset(make_splits("dal", 20, 0)[0], "train")])
    with pytest.raises(FingerprintError):
        EnsembleSpec.from_checkpoints(toy_run.checkpoints[-1:], other_src, other_tgt)
    with pytest.raises(DecodingError):
        EnsembleSpec.from_checkpoints([], toy_run.src, toy_run.tgt)
