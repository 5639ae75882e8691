from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import running_means
from satforge.synth_data import (
    AttributeLatents,
    CorpusConfig,
    Utterance,
    cmn,
    frame_observations,
    gen_corpus,
    load_embedding_table,
    oracle_embedding,
    read_corpus,
    split_enroll_test,
    write_corpus,
)


def _small(**kw):
    base = dict(feat_dim=4, num_classes=3, num_speakers=6, dev_speakers=1, eval_speakers=1,
                utts_per_speaker=4, min_frames=10, max_frames=30)
    base.update(kw)
    return CorpusConfig(**base)


def _utt(uid, spk, frames, labels=None, offset=None, channel=None, noise=0.0, period=0.01):
    frames = np.asarray(frames, np.float32)
    f = frames.shape[1]
    lat = AttributeLatents(
        spk,
        np.zeros(f, np.float32) if offset is None else np.asarray(offset, np.float32),
        np.ones(f, np.float32) if channel is None else np.asarray(channel, np.float32),
        noise,
    )
    labels = np.zeros(len(frames), np.int64) if labels is None else np.asarray(labels)
    return Utterance(uid, 0, frames, labels, lat, "eval", period)


# generation ---------------------------------------------------------------------


def test_attributes_off_gives_prototypes():
    cfg = _small(speaker_offset_std=0.0, channel_log_std=0.0, channel_utt_log_std=0.0, noise_min=0.0, noise_max=0.0)
    corpus = gen_corpus(cfg)
    for u in corpus.utterances:
        np.testing.assert_array_equal(u.frames, corpus.prototypes[u.labels])


def test_same_seed_is_bit_identical():
    a, b = gen_corpus(_small(), seed=5), gen_corpus(_small(), seed=5)
    assert [u.id for u in a.utterances] == [u.id for u in b.utterances]
    for ua, ub in zip(a.utterances, b.utterances):
        assert ua.frames.tobytes() == ub.frames.tobytes()
        assert ua.labels.tobytes() == ub.labels.tobytes()
    assert gen_corpus(_small(), seed=6).utterances[0].frames.tobytes() != a.utterances[0].frames.tobytes()


def test_seed_argument_is_recorded_in_config():
    assert gen_corpus(_small(), seed=9).config.seed == 9


def test_speaker_means_recover_offsets():
    # channel fixed at 1 so the class-weighted prototype mean is shared; offsets with unit spread
    cfg = _small(feat_dim=3, num_speakers=4, dev_speakers=0, eval_speakers=0, utts_per_speaker=40,
                 min_frames=300, max_frames=300, speaker_offset_std=1.0, channel_log_std=0.0,
                 channel_utt_log_std=0.0, noise_min=0.5, noise_max=0.5, p_stay=0.0)
    corpus = gen_corpus(cfg, seed=1)
    for spk in corpus.speakers():
        utts = [u for u in corpus.utterances if u.speaker == spk]
        frames = np.concatenate([u.frames for u in utts]).astype(np.float64)
        labels = np.concatenate([u.labels for u in utts])
        assert len(frames) >= 10_000
        expected = corpus.prototypes[labels].mean(axis=0) + utts[0].latents.speaker_offset
        # frames within a speaker are independent given the labels, so this is a fair bound
        resid = frames - corpus.prototypes[labels]
        stderr = resid.std(axis=0) / np.sqrt(len(frames))
        assert np.all(np.abs(frames.mean(axis=0) - expected) < 3 * stderr + 1e-6)


def test_labels_in_range_and_markov_persistence():
    corpus = gen_corpus(_small(p_stay=1.0))
    for u in corpus.utterances:
        assert u.num_frames >= 1
        assert np.all(u.labels == u.labels[0])
    corpus = gen_corpus(_small(p_stay=0.0))
    for u in corpus.utterances:
        assert np.all((u.labels >= 0) & (u.labels < 3))
        assert np.all(np.diff(u.labels) != 0)


def test_offsets_constant_within_speaker_and_channel_per_utterance():
    corpus = gen_corpus(_small(session_mean_utts=1.0))
    for spk in corpus.speakers():
        utts = [u for u in corpus.utterances if u.speaker == spk]
        for u in utts[1:]:
            np.testing.assert_array_equal(u.latents.speaker_offset, utts[0].latents.speaker_offset)
        assert len({u.latents.channel_scale.tobytes() for u in utts}) == len(utts)
        assert all(np.all(u.latents.channel_scale > 0) for u in utts)


def test_split_layout():
    corpus = gen_corpus(_small())
    assert len(corpus.speakers("train")) == 4
    assert not set(corpus.speakers("eval")) & set(corpus.speakers("train"))
    overlap = gen_corpus(_small(speaker_overlap=True, utts_per_speaker=10))
    assert set(overlap.speakers("eval")) <= set(overlap.speakers("train"))


@pytest.mark.parametrize(
    "kw",
    [dict(num_classes=1), dict(num_speakers=1), dict(feat_dim=1), dict(num_speakers=2, dev_speakers=1, eval_speakers=1),
     dict(noise_min=0.5, noise_max=0.1), dict(min_frames=0)],
)
def test_degenerate_configs_rejected(kw):
    with pytest.raises(ValueError):
        gen_corpus(_small(**kw))


def test_fingerprint_tracks_config():
    a = _small()
    assert a.fingerprint() == _small().fingerprint()
    assert a.fingerprint() != replace(a, seed=1).fingerprint()


# cmn ---------------------------------------------------------------------------


def test_cmn_zero_speaker_mean_and_idempotent(tiny_corpus):
    utts = tiny_corpus.split("train")
    once = cmn(utts)
    for spk in tiny_corpus.speakers("train"):
        stacked = np.concatenate([once[u.id] for u in utts if u.speaker == spk]).astype(np.float64)
        assert np.all(np.abs(stacked.mean(axis=0)) < 1e-6)
    twice = cmn(utts, once)
    for uid in once:
        np.testing.assert_allclose(twice[uid], once[uid], atol=1e-6)


def test_cmn_removes_offset_for_balanced_noise_free_speakers():
    protos = np.array([[1.0, 2.0], [-3.0, 0.5]])
    labels = np.array([0, 1, 1, 0])
    utts = []
    for spk, off in (("a", [5.0, -1.0]), ("b", [-2.0, 7.0])):
        frames = protos[labels] + np.array(off)
        utts.append(_utt(f"{spk}-0", spk, frames, labels, offset=off))
    out = cmn(utts)
    np.testing.assert_allclose(out["a-0"], out["b-0"], atol=1e-6)
    np.testing.assert_allclose(out["a-0"], protos[labels] - protos[labels].mean(axis=0), atol=1e-6)


# oracle embeddings ----------------------------------------------------------------


def test_oracle_full_identical_without_jitter():
    a = _utt("a", "s", np.zeros((5, 2)), offset=[1, 2], channel=[0.5, 2.0], noise=0.3)
    b = _utt("b", "s", np.ones((9, 2)), offset=[1, 2], channel=[0.5, 2.0], noise=0.3)
    ea = oracle_embedding(a, "oracle_full", 1, jitter=0.0)
    eb = oracle_embedding(b, "oracle_full", 2, jitter=0.0)
    np.testing.assert_array_equal(ea.vector, eb.vector)
    np.testing.assert_allclose(ea.vector, [1, 2, 0.5, 2.0, 0.3], rtol=1e-6)
    assert ea.vector.shape == (2 * 2 + 1,)


def test_oracle_speaker_channel_invariant_and_full_is_not():
    a = _utt("a", "s", np.zeros((5, 2)), offset=[1, 2], channel=[0.5, 2.0])
    b = _utt("b", "s", np.zeros((5, 2)), offset=[1, 2], channel=[1.5, 0.7])
    assert oracle_embedding(a, "oracle_speaker", 0, 0.0).vector.tobytes() == oracle_embedding(b, "oracle_speaker", 1, 0.0).vector.tobytes()
    assert not np.array_equal(oracle_embedding(a, "oracle_full", 0, 0.0).vector, oracle_embedding(b, "oracle_full", 0, 0.0).vector)


def test_oracle_speaker_jitter_shrinks_with_length():
    spread = {}
    for n in (10, 1000):
        u = _utt("a", "s", np.zeros((n, 3)))
        spread[n] = np.std([oracle_embedding(u, "oracle_speaker", i, 0.5).vector for i in range(300)])
    assert spread[1000] < spread[10] / 5


def test_noisy_kind_has_larger_jitter(tiny_corpus):
    u = tiny_corpus.utterances[0]
    clean = np.concatenate([u.latents.speaker_offset, u.latents.channel_scale, [u.latents.noise_level]])
    full = np.std([oracle_embedding(u, "oracle_full", i, 0.05).vector - clean for i in range(200)])
    noisy = np.std([oracle_embedding(u, "oracle_full_noisy", i, 0.3).vector - clean for i in range(200)])
    assert noisy > 3 * full


def test_oracle_frame_matches_running_mean_oracle(tiny_corpus):
    u = tiny_corpus.utterances[3]
    emb = oracle_embedding(u, "oracle_frame", 11, 0.5)
    assert emb.level == "frame" and emb.vector.shape == (u.num_frames, 2 * 6 + 1)
    expected = running_means(frame_observations(u, 11, 0.5))
    np.testing.assert_allclose(emb.vector, expected, rtol=1e-5, atol=1e-6)


def test_oracle_frame_converges_towards_full():
    # error at the end of the utterance should shrink relative to early frames, majority over seeds
    wins = 0
    for seed in range(3):
        u = _utt("a", "s", np.zeros((400, 3)), offset=[1, -1, 0.5], channel=[1, 2, 3], noise=0.2)
        clean = np.array([1, -1, 0.5, 1, 2, 3, 0.2])
        track = oracle_embedding(u, "oracle_frame", seed, 0.5).vector
        err = np.linalg.norm(track - clean, axis=1)
        wins += err[-1] < err[9] and err[99] < err[9]
    assert wins >= 2


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        oracle_embedding(_utt("a", "s", np.zeros((3, 2))), "ivector")


def test_corpus_embeddings_are_cached_and_deterministic(tiny_corpus):
    a = tiny_corpus.embeddings("oracle_full")
    assert a is tiny_corpus.embeddings("oracle_full")
    fresh = gen_corpus(tiny_corpus.config).embeddings("oracle_full")
    assert all(a[k].vector.tobytes() == fresh[k].vector.tobytes() for k in a)


# enroll/test split ----------------------------------------------------------------


def test_four_utterances_split_two_two():
    utts = [_utt(f"s-{i}", "s", np.zeros((2, 2))) for i in range(4)]
    split = split_enroll_test(utts)
    assert len(split.enroll) == 2 and len(split.test) == 2


@given(st.lists(st.integers(1, 5), min_size=1, max_size=8))
@settings(max_examples=30)
def test_split_is_a_partition(counts):
    utts = [_utt(f"s{k}-{i}", f"s{k}", np.zeros((2, 2))) for k, c in enumerate(counts) for i in range(c)]
    split = split_enroll_test(utts)
    enroll = {u.id for u in split.enroll}
    test = {u.id for u in split.test}
    assert not enroll & test
    kept = {u.id for u in utts if counts[int(u.speaker[1:])] >= 2}
    assert enroll | test == kept
    assert set(split.excluded) == {f"s{k}" for k, c in enumerate(counts) if c < 2}
    for k, c in enumerate(counts):
        if c >= 2:
            assert any(u.speaker == f"s{k}" for u in split.enroll) and any(u.speaker == f"s{k}" for u in split.test)
    assert split_enroll_test(utts) == split


# persistence -----------------------------------------------------------------------


def test_write_read_round_trip(tmp_path, tiny_corpus):
    write_corpus(tiny_corpus, tmp_path, kinds=("oracle_full", "oracle_frame"))
    back = read_corpus(tmp_path)
    assert back.config == tiny_corpus.config
    assert back.fingerprint == tiny_corpus.fingerprint
    for a, b in zip(tiny_corpus.utterances, back.utterances):
        assert a.id == b.id and a.split == b.split and a.speaker == b.speaker
        assert a.frames.tobytes() == b.frames.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.latents.noise_level == pytest.approx(b.latents.noise_level, rel=1e-6)
    orig = tiny_corpus.embeddings("oracle_full")
    for uid, e in back.embeddings("oracle_full").items():
        np.testing.assert_allclose(e.vector, orig[uid].vector, rtol=1e-6)
    frame = load_embedding_table(tmp_path, "oracle_frame")
    u = tiny_corpus.utterances[0]
    assert frame[u.id].vector.shape == (u.num_frames, 13)
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert len(manifest) == len(tiny_corpus.utterances)
    assert manifest[0].split()[:2] == [u.id, u.speaker]


def test_read_missing_corpus(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_corpus(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_embedding_table(tmp_path, "oracle_full")
