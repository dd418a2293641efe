import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from accent_units import neural
from accent_units.corpus import ShiftSpec, apply_accent_shift, generate_standard, make_lexicon
from accent_units.exceptions import ContractError, NotFittedError
from accent_units.mlm import (
    CountScorer,
    MaskedUnitLM,
    NeuralScorer,
    SpanMaskPolicy,
    apply_span_mask,
    load_scorer,
    masked_accuracy,
    predict_masked,
    score_confidences,
    select_spans,
    train_mlm,
)
from accent_units.seqcore import run_boundaries


def test_span_selection_budget_and_shape():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sel, short = select_spans(100, 10, 0.2, rng)
        assert sel.sum() >= 20 and not short
        starts, lengths = run_boundaries(sel.astype(int))
        for s, n in zip(starts, lengths):
            if sel[s] and s + n < 100:
                assert n % 10 == 0


def test_keep_only_policy_leaves_tokens():
    toks = np.arange(40) % 7
    m = apply_span_mask(toks, SpanMaskPolicy(5, 0.3, 0.0, 0.0, 1.0), seed=1, vocab_size=7)
    assert np.array_equal(m.corrupted, toks)
    assert m.positions.sum() >= 12


def test_mask_replacement_rate_binomial():
    toks = np.zeros(500, dtype=np.int64)
    policy = SpanMaskPolicy(10, 0.2)
    rng = np.random.default_rng(7)
    masked = selected = 0
    while selected < 10_000:
        m = apply_span_mask(toks, policy, rng, vocab_size=9)
        masked += int((m.corrupted[m.positions] == 9).sum())
        selected += int(m.positions.sum())
    rate = masked / selected
    assert abs(rate - 0.8) <= 3 * math.sqrt(0.16 / selected)


def test_policy_validation():
    with pytest.raises(ContractError):
        SpanMaskPolicy(10, 1.0)
    with pytest.raises(ContractError):
        SpanMaskPolicy(10, 0.2, 0.5, 0.5, 0.5)


# -- count scorer ------------------------------------------------------------------

def test_single_line_closed_form():
    for k in (1e-3, 0.1, 2.0):
        sc = CountScorer(vocab_size=5, smoothing=k).fit([[1, 2, 3]])
        assert sc.context_distribution(1, 3)[2] == pytest.approx((1 + k) / (1 + k * 5))
    assert CountScorer(5, 1e-4).fit([[1, 2, 3]]).context_distribution(1, 3)[2] > 0.999


def test_unseen_context_tends_to_uniform():
    gaps = []
    for k in (0.01, 1.0, 100.0, 1e6):
        d = CountScorer(6, k).fit([[1, 2, 3, 1, 2, 3], [4, 4, 5]]).context_distribution(5, 0)
        gaps.append(np.abs(d - 1 / 6).max())
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-5


def test_distributions_normalised_random_contexts(rng):
    corpus = [rng.integers(0, 12, size=rng.integers(3, 30)) for _ in range(40)]
    sc = CountScorer(12, 0.05).fit(corpus)
    for _ in range(100):
        l, r = rng.integers(-1, 14, size=2)
        assert sc.context_distribution(int(l), int(r)).sum() == pytest.approx(1.0, abs=1e-9)
    seq = rng.integers(0, 13, size=25)
    assert np.allclose(sc.distributions(seq).sum(1), 1.0, atol=1e-9)


def test_confidences_on_periodic_corpus():
    sc = CountScorer(4, 1e-3).fit([[1, 2] * 20])
    conf = score_confidences(sc, [1, 2, 1, 2])
    assert np.all(conf > 0.99)


def test_confidence_input_rejects_masks():
    sc = CountScorer(4).fit([[1, 2, 3]])
    with pytest.raises(ContractError):
        score_confidences(sc, [1, 4, 2])


@given(st.lists(st.integers(0, 6), min_size=1, max_size=30))
def test_confidences_are_probabilities(tokens):
    sc = CountScorer(7, 0.01).fit([[0, 1, 2, 3], [4, 5, 6, 6, 0]])
    conf = score_confidences(sc, tokens)
    assert np.all(np.isfinite(conf)) and np.all((conf >= 0) & (conf <= 1))


def test_predict_masked_context_oracle():
    sc = CountScorer(5, 1e-3).fit([[1, 2, 1, 3, 3, 0]] * 3 + [[0, 1, 2, 1]])
    pos, best, conf = predict_masked(sc, [1, 5, 1])
    assert pos.tolist() == [1] and best.tolist() == [2]
    assert conf[0] > 0.99


def test_fully_masked_single_frame_is_unigram_argmax():
    corpus = [[3, 3, 1, 4], [4, 2, 4], [0, 4]]
    sc = CountScorer(5, 0.01).fit(corpus)
    _, best, _ = predict_masked(sc, [5])
    # 4 forms four runs, more than any other unit
    assert best.tolist() == [4]


def test_span_fill_can_change_inside_one_group():
    sc = CountScorer(8, 0.01).fit([[5, 1, 1, 2, 2, 6]] * 4)
    _, best, _ = predict_masked(sc, [5, 8, 8, 8, 8, 6])
    assert best.tolist() == [1, 1, 2, 2]


def test_predict_and_confidence_share_distribution(rng):
    corpus = [rng.integers(0, 6, size=20) for _ in range(30)]
    sc = CountScorer(6, 0.1).fit(corpus)
    seq = rng.integers(0, 6, size=15)
    masked = seq.copy()
    masked[[3, 4, 9]] = 6
    dist = sc.distributions(masked)
    pos, best, conf = predict_masked(sc, masked)
    for p, b, c in zip(pos, best, conf):
        assert c == dist[p, b]
        assert dist[p, seq[p]] == sc.distributions(masked)[p, seq[p]]


def test_predict_masked_needs_masks():
    sc = CountScorer(4).fit([[1, 2, 3]])
    with pytest.raises(ContractError):
        predict_masked(sc, [1, 2])


def test_count_scorer_roundtrip(tmp_path, rng):
    corpus = [rng.integers(0, 9, size=rng.integers(4, 40)) for _ in range(30)]
    sc = CountScorer(9, 0.02).fit(corpus)
    sc.save(tmp_path / "s.json")
    back = load_scorer(tmp_path / "s.json")
    seq = rng.integers(0, 10, size=40)
    assert np.array_equal(back.distributions(seq), sc.distributions(seq))


def test_count_scorer_contracts():
    with pytest.raises(NotFittedError):
        CountScorer(4).distributions([1, 2])
    with pytest.raises(ContractError):
        CountScorer(4).fit([[]])
    with pytest.raises(ContractError):
        CountScorer(4).fit([[1, 4]])
    with pytest.raises(ContractError):
        CountScorer(4, smoothing=0).fit([[1]])


# -- neural masked LM ----------------------------------------------------------------

def small_config(V, layers=2, dim=32):
    return neural.EncoderConfig(layers=layers, model_dim=dim, heads=4, ffn_dim=2 * dim,
                                max_len=64, vocab_out=V)


def test_zero_lr_keeps_parameters():
    cfg = small_config(5)
    init = neural.init_params(cfg, seed=3)
    params, log = train_mlm([[1, 2, 3, 4] * 5], cfg, SpanMaskPolicy(2, 0.2), neural.LRSchedule(0.0, 0, 2), seed=3)
    for n, t in init.tensors.items():
        assert torch.equal(t, params.tensors[n])
    assert len(log.rows) == 2


def test_initial_loss_near_log_v():
    cfg = small_config(20)
    _, log = train_mlm([np.arange(20)] * 4, cfg, SpanMaskPolicy(3, 0.2), neural.LRSchedule(0.0, 0, 1))
    assert log.losses[0] == pytest.approx(math.log(20), abs=0.2)


def test_periodic_pattern_is_learned():
    lm = MaskedUnitLM(vocab_size=4, layers=2, model_dim=32, heads=4, ffn_dim=64, max_len=64,
                      span_len=1, p_mask=0.15, peak_lr=3e-3, warmup_steps=20, n_steps=250,
                      batch_size=8, random_state=0)
    lm.fit([[1, 2, 3] * 16] * 8)
    acc = masked_accuracy(lm.scorer_, [[1, 2, 3] * 16] * 8, SpanMaskPolicy(1, 0.15), seed=1)
    assert acc == 1.0


def test_neural_scorer_prefers_standard_units():
    """Shifted units get lower confidence than the standard unit in the same slot."""
    lex = make_lexicon(seed=0, n_clusters=50)
    std = generate_standard(lex, 400, seed=0)
    lm = MaskedUnitLM(vocab_size=50, layers=2, model_dim=48, heads=4, ffn_dim=96, max_len=128,
                      span_len=3, p_mask=0.2, peak_lr=3e-3, warmup_steps=50, n_steps=400,
                      batch_size=8, random_state=0).fit(std.cluster_sequences())
    acc = apply_accent_shift(generate_standard(lex, 40, seed=1), ShiftSpec(apply_prob=1.0), seed=2)
    diffs = []
    for u in acc:
        changed = u.clusters != u.standard_clusters
        if not changed.any():
            continue
        shifted_conf = lm.frame_confidences(u.clusters[:128])[changed[:128]]
        standard_conf = lm.frame_confidences(u.standard_clusters[:128])[changed[:128]]
        diffs.extend(standard_conf - shifted_conf)
    assert len(diffs) > 100
    assert np.mean(diffs) > 0


def test_neural_checkpoint_scorer(tmp_path):
    cfg = small_config(6, layers=1, dim=16)
    params, _ = train_mlm([[1, 2, 3, 4, 5]] * 3, cfg, SpanMaskPolicy(2, 0.2), neural.LRSchedule(1e-3, 0, 3))
    neural.save_params(params, tmp_path / "m.encp")
    sc = load_scorer(tmp_path / "m.encp")
    assert isinstance(sc, NeuralScorer)
    d = sc.distributions([1, 6, 3])
    assert d.shape == (3, 6) and np.allclose(d.sum(1), 1)
    batch = sc.distributions_batch([np.array([1, 6, 3]), np.array([2])])
    assert np.allclose(batch[0], d, atol=1e-6)


def test_load_scorer_rejects_garbage(tmp_path):
    (tmp_path / "x").write_text("not json")
    with pytest.raises(ContractError):
        load_scorer(tmp_path / "x")
