import numpy as np
import pytest

from fewvlm.config import load_model_config
from fewvlm.data import RegionFeatures, tokenize
from fewvlm.model import FewVLMModel, load_model
from fewvlm.nncore import Adam, float64_mode
from fewvlm.nncore.gradcheck import check_gradients
from fewvlm.nncore.tensor import log_softmax
from fewvlm.trainer import make_text_pair, train_step
from fewvlm.utils.errors import (
    ConfigError,
    EmptyTarget,
    FeatureDimMismatch,
    SequenceTooLong,
    ShapeMismatch,
)

PROMPT = "question: what color is the circle? answer: <text_1>"


def toy_model(vocab, seed: int = 0, **kwargs) -> FewVLMModel:
    return FewVLMModel(load_model_config("toy", vocab_size=vocab.size, **kwargs), seed=seed)


def example(vocab, make_regions, seed: int = 0):
    regions = make_regions(np.random.default_rng(seed), n=3, dim=16)
    return regions, list(tokenize(PROMPT, vocab)), list(tokenize("<text_1> red", vocab))


def test_encode_shape(vocab, make_regions):
    model = toy_model(vocab)
    regions, inp, _ = example(vocab, make_regions)
    h = model.encode(regions, inp)
    assert h.shape == (len(inp) + model.config.n_regions, model.config.hidden_dim)


def test_logits_shape_and_tied_output(vocab, make_regions):
    model = toy_model(vocab)
    regions, inp, tgt = example(vocab, make_regions)
    assert model.logits(regions, inp, tgt, vocab.bos_id).shape == (len(tgt), vocab.size)
    assert model.output_weight is model.token_emb.weight


def test_zero_embeddings_give_uniform_loss(vocab, make_regions):
    model = toy_model(vocab)
    model.token_emb.weight.data[:] = 0.0
    regions, inp, tgt = example(vocab, make_regions)
    loss = model.nll_loss(regions, inp, tgt, vocab.bos_id).item()
    assert loss == pytest.approx(len(tgt) * np.log(vocab.size), rel=1e-5)


def test_loss_equals_summed_log_probs(vocab, make_regions):
    model = toy_model(vocab)
    regions, inp, tgt = example(vocab, make_regions)
    logp = log_softmax(model.logits(regions, inp, tgt, vocab.bos_id)).data
    expected = -sum(logp[i, t] for i, t in enumerate(tgt))
    assert model.nll_loss(regions, inp, tgt, vocab.bos_id).item() == pytest.approx(expected, rel=1e-5)


def test_batch_loss_is_sum_of_example_losses(vocab, make_regions):
    model = toy_model(vocab)
    rng = np.random.default_rng(1)
    regions = [make_regions(rng, n=n, dim=16) for n in (1, 3, 4)]
    inputs = [list(tokenize(t, vocab)) for t in ("what color", PROMPT, "")]
    targets = [list(tokenize(t, vocab)) for t in ("red", "<text_1> a blue square", "circle ?")]
    batch = model.batch_losses(regions, inputs, targets, vocab.bos_id).data
    single = [model.nll_loss(r, i, t, vocab.bos_id).item() for r, i, t in zip(regions, inputs, targets)]
    np.testing.assert_allclose(batch, single, rtol=1e-4)
    assert model.batch_loss(regions, inputs, targets, vocab.bos_id).item() == pytest.approx(
        sum(single), rel=1e-4
    )


def test_decoder_is_causal(vocab, make_regions):
    model = toy_model(vocab)
    regions, inp, _ = example(vocab, make_regions)
    a = tokenize("a red circle", vocab)
    b = tokenize("a blue circle", vocab)
    la = model.logits(regions, inp, list(a), vocab.bos_id).data
    lb = model.logits(regions, inp, list(b), vocab.bos_id).data
    # position i only sees targets before i
    np.testing.assert_allclose(la[:2], lb[:2], rtol=1e-5, atol=1e-6)
    assert not np.allclose(la[2], lb[2])


def test_padding_regions_are_ignored(vocab, make_regions):
    model = toy_model(vocab)
    regions, inp, tgt = example(vocab, make_regions)
    padded = RegionFeatures(
        np.concatenate([regions.features, np.zeros((1, 16))]),
        np.concatenate([regions.boxes, np.zeros((1, 4))]),
    )
    assert model.nll_loss(padded, inp, tgt, vocab.bos_id).item() == pytest.approx(
        model.nll_loss(regions, inp, tgt, vocab.bos_id).item(), rel=1e-6
    )


def test_input_errors(vocab, make_regions):
    model = toy_model(vocab)
    regions, inp, tgt = example(vocab, make_regions)
    with pytest.raises(FeatureDimMismatch):
        model.nll_loss(make_regions(np.random.default_rng(0), n=2, dim=8), inp, tgt, vocab.bos_id)
    with pytest.raises(ShapeMismatch):
        model.nll_loss(make_regions(np.random.default_rng(0), n=5, dim=16), inp, tgt, vocab.bos_id)
    with pytest.raises(SequenceTooLong):
        model.encode(regions, inp * 3)
    with pytest.raises(EmptyTarget):
        model.nll_loss(regions, inp, [], vocab.bos_id)


# ----------------------------------------------------------------------------
#                      Gradients and training
# ----------------------------------------------------------------------------
CHECKED = (
    "token_emb.weight",
    "feat_proj.weight",
    "box_proj.weight",
    "encoder.1.attn.wq.weight",
    "decoder.1.cross_attn.wv.weight",
    "dec_ln.gamma",
)


@pytest.mark.parametrize("seed", range(20))
def test_full_loss_gradients(vocab, make_regions, seed):
    with float64_mode():
        model = toy_model(vocab, seed=seed, n_enc_layers=2, n_dec_layers=2)
        regions, inp, tgt = example(vocab, make_regions, seed)
        params = model.named_parameters()
        errors = check_gradients(
            lambda: model.nll_loss(regions, inp, tgt + [vocab.eos_id], vocab.bos_id),
            [params[k] for k in CHECKED],
        )
    assert max(errors.values()) < 1e-4, errors


def test_adam_steps_reduce_loss(vocab, make_regions):
    model = toy_model(vocab)
    regions, _, _ = example(vocab, make_regions)
    pair = make_text_pair(regions, PROMPT, "<text_1> red", vocab)
    opt = Adam(model.named_parameters(), lr=1e-2, total_steps=20, warmup=0.0)
    losses = [train_step(model, opt, [pair], vocab.bos_id) for _ in range(20)]
    assert losses[-1] < losses[0]


def test_overfit_single_example(vocab, make_regions):
    model = toy_model(vocab)
    regions, _, _ = example(vocab, make_regions)
    pair = make_text_pair(regions, PROMPT, "<text_1> red", vocab)
    opt = Adam(model.named_parameters(), lr=3e-2, total_steps=200, warmup=0.05)
    loss = float("inf")
    for _ in range(200):
        loss = train_step(model, opt, [pair], vocab.bos_id)
        if loss < 0.01:
            break
    assert loss < 0.01
    model.eval()
    out = model.generate(regions, list(pair.input_ids), 10, vocab.bos_id, vocab.eos_id)
    assert out == list(pair.target_ids)[:-1]


# ----------------------------------------------------------------------------
#                      Decoding
# ----------------------------------------------------------------------------
def test_greedy_is_deterministic(vocab, make_regions):
    model = toy_model(vocab).eval()
    regions, inp, _ = example(vocab, make_regions)
    a = model.generate(regions, inp, 6, vocab.bos_id, vocab.eos_id)
    b = model.generate(regions, inp, 6, vocab.bos_id, vocab.eos_id)
    assert a == b
    assert len(a) <= 6 and vocab.eos_id not in a


def test_batch_generation_matches_single(vocab, make_regions):
    model = toy_model(vocab).eval()
    rng = np.random.default_rng(5)
    regions = [make_regions(rng, n=n, dim=16) for n in (2, 4)]
    inputs = [list(tokenize("what color", vocab)), list(tokenize(PROMPT, vocab))]
    batch = model.generate_batch(regions, inputs, 5, vocab.bos_id, vocab.eos_id)
    single = [model.generate(r, i, 5, vocab.bos_id, vocab.eos_id) for r, i in zip(regions, inputs)]
    assert batch == single


def test_beam_of_one_is_greedy(vocab, make_regions):
    model = toy_model(vocab, seed=3).eval()
    regions, inp, _ = example(vocab, make_regions, seed=3)
    greedy = model.generate(regions, inp, 6, vocab.bos_id, vocab.eos_id)
    assert model.beam_search(regions, inp, 6, vocab.bos_id, vocab.eos_id, k=1) == greedy


def test_beam_search_width(vocab, make_regions):
    model = toy_model(vocab, seed=4).eval()
    regions, inp, _ = example(vocab, make_regions)
    out = model.generate(regions, inp, 5, vocab.bos_id, vocab.eos_id, beam_size=3)
    assert len(out) <= 5 and vocab.eos_id not in out


def eos_favouring_model(vocab) -> FewVLMModel:
    """Every decoder position puts its largest logit on eos"""
    model = toy_model(vocab).eval()
    emb = model.token_emb.weight.data
    emb[vocab.eos_id] = 5.0
    model.dec_ln.gamma.data[:] = 0.0
    model.dec_ln.beta.data[:] = emb[vocab.eos_id]
    return model


def test_first_token_is_never_eos(vocab, make_regions):
    model = eos_favouring_model(vocab)
    regions, inp, tgt = example(vocab, make_regions)
    assert model.logits(regions, inp, tgt, vocab.bos_id).data.argmax(axis=-1).tolist() == (
        [vocab.eos_id] * len(tgt)
    )
    for max_len in (1, 4):
        out = model.generate(regions, inp, max_len, vocab.bos_id, vocab.eos_id)
        assert len(out) == 1 and out[0] != vocab.eos_id
        beam = model.generate(regions, inp, max_len, vocab.bos_id, vocab.eos_id, beam_size=3)
        assert len(beam) == 1 and beam[0] != vocab.eos_id
    assert model.generate_batch([regions] * 2, [inp, inp[:3]], 1, vocab.bos_id, vocab.eos_id) == [
        out, model.generate(regions, inp[:3], 1, vocab.bos_id, vocab.eos_id)
    ]


def test_max_len_one_gives_one_token(vocab, make_regions):
    model = toy_model(vocab, seed=2).eval()
    regions, inp, _ = example(vocab, make_regions)
    assert len(model.generate(regions, inp, 1, vocab.bos_id, vocab.eos_id)) == 1
    assert len(model.generate(regions, inp, 1, vocab.bos_id, vocab.eos_id, beam_size=2)) == 1


def test_generate_needs_budget(vocab, make_regions):
    model = toy_model(vocab)
    regions, inp, _ = example(vocab, make_regions)
    with pytest.raises(ConfigError):
        model.generate(regions, inp, 0, vocab.bos_id, vocab.eos_id)


# ----------------------------------------------------------------------------
#                      State
# ----------------------------------------------------------------------------
def test_save_and_load(tmp_path, vocab, make_regions):
    model = toy_model(vocab, seed=7)
    regions, inp, tgt = example(vocab, make_regions)
    model.save(tmp_path / "m.ckpt", vocab, objective="masked")
    loaded, loaded_vocab, meta = load_model(tmp_path / "m.ckpt")
    assert loaded_vocab == vocab and meta["objective"] == "masked"
    assert not loaded.training
    np.testing.assert_array_equal(
        loaded.logits(regions, inp, tgt, vocab.bos_id).data,
        model.logits(regions, inp, tgt, vocab.bos_id).data,
    )


def test_clone_is_independent(vocab):
    model = toy_model(vocab)
    twin = model.clone()
    twin.token_emb.weight.data += 1.0
    assert not np.allclose(twin.token_emb.weight.data, model.token_emb.weight.data)


def test_load_state_dict_checks_shapes(vocab):
    model = toy_model(vocab)
    state = model.state_dict()
    state["dec_ln.gamma"] = np.ones(3)
    with pytest.raises(ShapeMismatch):
        model.load_state_dict(state)
