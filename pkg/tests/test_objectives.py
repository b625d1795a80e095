import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewvlm.config import load_experiment_config, load_objective_config
from fewvlm.data import Vocab, tokenize
from fewvlm.experiments import CATALOG_SENTINELS
from fewvlm.objectives import (
    MASKED,
    PREFIX,
    build_pretrain_batches,
    mask_spans,
    prefix_split,
    reconstruct,
)
from fewvlm.utils.errors import ConfigError, EmptyCorpus, SentinelOverflow, TooShort

BIG = Vocab.build(["w%d" % i for i in range(40)], n_sentinels=100)
WORD_IDS = st.lists(st.sampled_from(BIG.word_ids), min_size=2, max_size=40)


def test_mask_spans_documented_example(vocab):
    ids = list(tokenize("a red circle next to a blue square", vocab))
    pair = mask_spans(ids, vocab, forced_mask=[1, 2, 6])
    s0, s1 = vocab.sentinel_id(0), vocab.sentinel_id(1)
    assert list(pair.input_ids) == [ids[0], s0, ids[3], ids[4], ids[5], s1, ids[7]]
    assert list(pair.target_ids) == [s0, ids[1], ids[2], s1, ids[6]]
    assert pair.objective == MASKED


def test_mask_spans_offset(vocab):
    ids = list(tokenize("a red circle", vocab))
    pair = mask_spans(ids, vocab, forced_mask=[1], sentinel_offset=1)
    assert pair.input_ids[1] == vocab.sentinel_id(1) == pair.target_ids[0]


@settings(max_examples=1000, deadline=None)
@given(WORD_IDS, st.integers(0, 2**32 - 1))
def test_masked_pairs_reconstruct(ids, seed):
    v = BIG
    pair = mask_spans(ids, v, 0.15, np.random.default_rng(seed))
    assert reconstruct(pair.input_ids, pair.target_ids, v) == ids

    # sentinels appear in increasing order, the same in input and target
    sent_in = [t for t in pair.input_ids if v.is_sentinel(t)]
    sent_out = [t for t in pair.target_ids if v.is_sentinel(t)]
    assert sent_in == sent_out == list(range(len(sent_in)))
    assert len(sent_in) >= 1
    # every sentinel in the target is followed by at least one token
    for a, b in zip(pair.target_ids, list(pair.target_ids[1:]) + [None]):
        if v.is_sentinel(a):
            assert b is not None and not v.is_sentinel(b)


def test_empirical_mask_rate():
    rng = np.random.default_rng(0)
    ids = BIG.word_ids
    masked = total = 0
    for _ in range(1000):
        pair = mask_spans(ids, BIG, 0.15, rng)
        masked += sum(not BIG.is_sentinel(t) for t in pair.target_ids)
        total += len(ids)
    assert total >= 10_000
    assert 0.14 <= masked / total <= 0.16


@settings(max_examples=1000, deadline=None)
@given(WORD_IDS, st.integers(0, 2**32 - 1))
def test_prefix_pairs_concatenate(ids, seed):
    pair = prefix_split(ids, np.random.default_rng(seed))
    assert list(pair.input_ids) + list(pair.target_ids) == ids
    assert len(pair.input_ids) >= 1 and len(pair.target_ids) >= 1
    assert pair.objective == PREFIX


def test_short_texts_are_rejected(vocab):
    with pytest.raises(TooShort):
        mask_spans([vocab.word_ids[0]], vocab, 0.15, np.random.default_rng(0))
    with pytest.raises(TooShort):
        prefix_split([vocab.word_ids[0]], np.random.default_rng(0))


def test_sentinel_overflow(vocab):
    # alternating mask needs one sentinel per masked token
    ids = [vocab.word_ids[0]] * 30
    with pytest.raises(SentinelOverflow):
        mask_spans(ids, vocab, forced_mask=list(range(0, 30, 2)))


def test_bad_mask_rate(vocab):
    with pytest.raises(ConfigError):
        mask_spans(vocab.word_ids[:3], vocab, 0.0, np.random.default_rng(0))


@pytest.mark.parametrize("forced", [[3], [-1], [0, 7], []])
def test_forced_mask_positions_are_checked(vocab, forced):
    with pytest.raises(ConfigError):
        mask_spans(vocab.word_ids[:3], vocab, forced_mask=forced)


def test_default_objective_config_starts_at_text_0(vocab):
    cfg = load_objective_config()
    assert cfg.sentinel_offset == 0
    ids = list(tokenize("a red circle", vocab))
    pair = mask_spans(ids, vocab, forced_mask=[1], sentinel_offset=cfg.sentinel_offset)
    assert pair.input_ids[1] == vocab.sentinel_id(0) == pair.target_ids[0]


def test_pretrain_command_opts_in_to_text_1():
    overrides = load_experiment_config("pretrain")["objectives"]
    assert load_objective_config(**overrides).sentinel_offset == 1
    assert load_objective_config(**CATALOG_SENTINELS).sentinel_offset == 1


# ----------------------------------------------------------------------------
#                      Batch stream
# ----------------------------------------------------------------------------
CORPUS = [(f"img{i}", "a red circle next to a blue square") for i in range(10)]


def test_batches_cover_corpus_each_epoch(vocab):
    batches = list(build_pretrain_batches(CORPUS, vocab, 0.5, 4, np.random.default_rng(0), epochs=2))
    assert [len(b) for b in batches] == [4, 4, 2, 4, 4, 2]
    first_epoch = [p.image_id for b in batches[:3] for p in b]
    assert sorted(first_epoch) == sorted(i for i, _ in CORPUS)


@pytest.mark.parametrize("mix, objective", [(1.0, MASKED), (0.0, PREFIX)])
def test_pure_objectives(vocab, mix, objective):
    batches = build_pretrain_batches(CORPUS, vocab, mix, 3, np.random.default_rng(0))
    assert {p.objective for b in batches for p in b} == {objective}


def test_mix_is_respected(vocab):
    corpus = CORPUS * 50
    pairs = [p for b in build_pretrain_batches(corpus, vocab, 0.5, 32, np.random.default_rng(1))
             for p in b]
    frac = sum(p.objective == MASKED for p in pairs) / len(pairs)
    assert 0.4 < frac < 0.6


def test_stream_is_seeded(vocab):
    a = list(build_pretrain_batches(CORPUS, vocab, 0.5, 4, np.random.default_rng(3)))
    b = list(build_pretrain_batches(CORPUS, vocab, 0.5, 4, np.random.default_rng(3)))
    assert a == b


def test_stream_errors(vocab):
    with pytest.raises(EmptyCorpus):
        list(build_pretrain_batches([], vocab, 0.5, 4, np.random.default_rng(0)))
    with pytest.raises(ConfigError):
        list(build_pretrain_batches(CORPUS, vocab, 1.5, 4, np.random.default_rng(0)))
    with pytest.raises(TooShort):
        list(build_pretrain_batches([("x", "circle")], vocab, 0.5, 4, np.random.default_rng(0)))
