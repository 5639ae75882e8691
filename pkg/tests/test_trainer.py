from dataclasses import replace

import numpy as np
import pytest

from satforge.conditioning import ConditioningSpec, attach
from satforge.config import ModelConfig, TrainingConfig
from satforge.nn_core import MLP, DenseLayer
from satforge.serialization import dump_tensors
from satforge.synth_data import CorpusConfig, gen_corpus
from satforge.trainer import (
    EvalReport,
    ExperimentResult,
    FrameSet,
    TrainingError,
    compare_experiments,
    eval_fer,
    eval_fer_by_min_length,
    fer_by_min_length,
    frame_set,
    train_sat,
    train_si,
    trainable_names,
)

SMALL = ModelConfig(hidden_layers=2, hidden_units=16)
FAST = TrainingConfig(epochs_stage1=3, epochs_stage2=2, batch_size=64, seed=1)


@pytest.fixture(scope="module")
def si(tiny_corpus):
    return train_si(tiny_corpus, SMALL, FAST)


def _main_bytes(model):
    return dump_tensors({k: v for k, v in model.state_dict().items() if not k.startswith("cond.")})


def _toy_set(x, y, durations=None):
    n = len(y)
    return FrameSet(np.asarray(x, np.float32), np.asarray(y), [f"u{i}" for i in range(n)],
                    np.arange(n + 1), np.ones(n) if durations is None else np.asarray(durations, float))


# stage 1 ----------------------------------------------------------------------------


def test_separable_data_is_learned():
    cfg = CorpusConfig(feat_dim=6, num_classes=4, num_speakers=3, dev_speakers=1, eval_speakers=1,
                       utts_per_speaker=8, speaker_offset_std=0.0, channel_log_std=0.0, channel_utt_log_std=0.0,
                       noise_min=0.0, noise_max=0.0, prototype_std=1.0, seed=2)
    corpus = gen_corpus(cfg)
    model, result = train_si(corpus, SMALL, TrainingConfig(epochs_stage1=20, batch_size=64, patience=20))
    train = eval_fer(model, frame_set(corpus, "train"))
    assert train.fer_percent < 1.0
    assert result.eval.fer_percent < 1.0


def test_si_is_deterministic(tiny_corpus, si):
    model, result = train_si(tiny_corpus, SMALL, FAST)
    assert result.dev.fer_percent == si[1].dev.fer_percent
    assert dump_tensors(model.state_dict()) == dump_tensors(si[0].state_dict())


def test_dev_fer_is_the_selection_criterion(si):
    _, result = si
    assert result.dev.fer_percent == min(result.history)
    assert result.stage == "si" and result.name == "si-cmn"
    assert 0 <= result.eval.fer_percent <= 100


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(tiny_corpus):
    with pytest.raises(TrainingError, match="epoch 1"):
        train_si(tiny_corpus, ModelConfig(hidden_layers=1, hidden_units=8, batch_norm=False),
                 replace(FAST, lr=1e30, momentum=0.0))


# stage 2 ----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "spec",
    [
        ConditioningSpec("control_layer"),
        ConditioningSpec("control_layer", site="all_hidden"),
        ConditioningSpec("control_network", site="all_hidden", mode="both", shared_units=8),
        ConditioningSpec("control_variable", site="input"),
        ConditioningSpec("concatenate"),
    ],
    ids=lambda s: s.label,
)
def test_zero_epoch_stage2_stays_near_si(tiny_corpus, si, spec):
    pca = 6 if spec.mechanism == "control_variable" else 0
    _, result = train_sat(si[0], tiny_corpus, spec, "oracle_full", train_cfg=FAST, epochs=0, pca_dim=pca)
    assert abs(result.dev.fer_percent - si[1].dev.fer_percent) <= 0.5
    assert result.epochs_run == 0


def test_concatenate_is_exact_before_training(tiny_corpus, si):
    model, result = train_sat(si[0], tiny_corpus, ConditioningSpec("concatenate"), train_cfg=FAST, epochs=0)
    assert result.dev.fer_percent == si[1].dev.fer_percent
    w = model.layers[0].weight
    np.testing.assert_array_equal(w[:6], si[0].layers[0].weight)
    assert not w[6:].any()


def test_freeze_main_keeps_main_weights_bit_exact(tiny_corpus, si):
    before = _main_bytes(si[0])
    for spec in (ConditioningSpec("control_layer", site="all_hidden"), ConditioningSpec("concatenate")):
        model, _ = train_sat(si[0], tiny_corpus, spec, policy="freeze_main", train_cfg=FAST)
        if spec.mechanism == "concatenate":
            state = model.state_dict()
            w = state.pop("layer0.W")
            np.testing.assert_array_equal(w[:6], si[0].layers[0].weight)
            ref = si[0].state_dict()
            ref.pop("layer0.W")
            assert dump_tensors({k: v for k, v in state.items() if not k.startswith("cond.")}) == dump_tensors(ref)
        else:
            assert _main_bytes(model) == before
    assert _main_bytes(si[0]) == before  # the SI model itself is never touched


def test_fine_tune_all_updates_main_weights(tiny_corpus, si):
    from satforge.nn_core import cross_entropy_loss

    model = attach(si[0], ConditioningSpec("control_layer"), 13)
    skip, masks = trainable_names(model, "fine_tune_all")
    data = frame_set(tiny_corpus, "train")
    e = np.ones((64, 13), np.float32)
    cache = model.forward(data.x[:64], e, training=True)
    _, d = cross_entropy_loss(cache.logits, data.y[:64])
    grads = model.backward(cache, d, skip=skip)
    assert set(grads) == set(model.params()) and not masks
    assert all(np.any(grads[n]) for n in ("layer0.W", "layer1.W", "cond.site0.W"))


def test_incompatible_embedding_rejected_before_training(tiny_corpus, si):
    with pytest.raises(ValueError, match="pca_dim"):
        train_sat(si[0], tiny_corpus, ConditioningSpec("control_vector"), "oracle_full", train_cfg=FAST)
    with pytest.raises(ValueError):
        train_sat(si[0], tiny_corpus, ConditioningSpec("control_layer"), policy="freeze_all", train_cfg=FAST)


def test_trainable_names_policies(si):
    model = attach(si[0], ConditioningSpec("control_layer"), 4)
    skip, masks = trainable_names(model, "freeze_main")
    assert skip == {n for n in model.params() if not n.startswith("cond.")}
    assert trainable_names(model, "fine_tune_all") == (frozenset(), {})
    concat = attach(si[0], ConditioningSpec("concatenate"), 4)
    skip, masks = trainable_names(concat, "freeze_main")
    assert "layer0.W" not in skip
    assert masks["layer0.W"][:6].sum() == 0 and masks["layer0.W"][6:].all()


def test_frame_level_embeddings_train(tiny_corpus, si):
    _, result = train_sat(si[0], tiny_corpus, ConditioningSpec("control_layer"), "oracle_frame", train_cfg=FAST, epochs=1)
    assert 0 <= result.dev.fer_percent <= 100


# evaluation ------------------------------------------------------------------------------


def test_perfect_classifier_scores_zero():
    net = MLP([DenseLayer(np.eye(3, dtype=np.float32), np.zeros(3, np.float32), "linear")], [None])
    y = np.array([0, 1, 2, 2, 1])
    assert eval_fer(net, _toy_set(np.eye(3)[y], y)).fer_percent == 0.0


def test_constant_classifier_is_at_chance():
    k = 4
    net = MLP([DenseLayer(np.zeros((2, k), np.float32), np.array([1, 0, 0, 0], np.float32), "linear")], [None])
    y = np.tile(np.arange(k), 25)
    report = eval_fer(net, _toy_set(np.random.default_rng(0).normal(size=(100, 2)), y))
    assert report.fer_percent == pytest.approx((1 - 1 / k) * 100)


def test_fer_is_batch_size_invariant(tiny_corpus, si):
    dev = frame_set(tiny_corpus, "dev")
    a = eval_fer(si[0], dev, batch_size=7)
    b = eval_fer(si[0], dev, batch_size=100_000)
    assert a.fer_percent == b.fer_percent and a.per_utterance == b.per_utterance


def test_embedding_presence_must_match_model(tiny_corpus, si):
    dev = frame_set(tiny_corpus, "dev")
    model = attach(si[0], ConditioningSpec("control_layer"), 3)
    with pytest.raises(ValueError):
        eval_fer(model, dev)
    with pytest.raises(ValueError):
        eval_fer(si[0], dev.with_embeddings(np.zeros((len(dev), 3), np.float32)))


def test_fer_by_min_length(tiny_corpus, si):
    dev = frame_set(tiny_corpus, "dev")
    report = eval_fer(si[0], dev)
    durations = sorted(v[2] for v in report.per_utterance.values())
    mid = durations[len(durations) // 2]
    curve = fer_by_min_length(report, [0.0, mid, durations[-1] + 1])
    assert curve[0.0] == report.fer_percent
    assert durations[-1] + 1 not in curve
    kept = [v for v in report.per_utterance.values() if v[2] >= mid]
    assert curve[mid] == pytest.approx(100 * sum(v[0] for v in kept) / sum(v[1] for v in kept))
    assert eval_fer_by_min_length(si[0], dev, [0.0]) == {0.0: report.fer_percent}


def test_utterance_counts_shrink_with_threshold():
    report = EvalReport("dev", 0.0, {f"u{i}": (0, 10, float(i)) for i in range(6)})
    counts = [sum(v[2] >= t for v in report.per_utterance.values()) for t in (0, 1, 2.5, 5)]
    assert counts == sorted(counts, reverse=True)


# comparison ------------------------------------------------------------------------------


def _result(name, fer, fp="c0"):
    rep = EvalReport("eval", fer, {})
    return ExperimentResult(name, "si", fp, "x", rep, rep)


def test_compare_single_and_gain():
    assert compare_experiments([_result("a", 10.0)])[0]["experiment"] == "a"
    rows = compare_experiments([_result("base", 20.0), _result("sat", 15.0)], baseline="base")
    assert [r["experiment"] for r in rows] == ["sat", "base"]
    assert rows[0]["rel_gain"] == pytest.approx(0.25)
    assert rows[1]["rel_gain"] == 0.0


def test_compare_rejects_mixed_corpora_and_unknown_baseline():
    with pytest.raises(ValueError):
        compare_experiments([_result("a", 1.0, "c0"), _result("b", 1.0, "c1")])
    with pytest.raises(KeyError):
        compare_experiments([_result("a", 1.0)], baseline="zzz")


def test_result_rows_include_length_curve(si):
    rows = si[1].rows((0.0, 0.3))
    assert rows[0][:3] == ("si-cmn", "si", "dev")
    assert rows[1][2:4] == ("eval", 0.0)
