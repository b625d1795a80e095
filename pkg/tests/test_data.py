import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fewvlm.data import (
    FEATURE_MAGIC,
    CaptionExample,
    ClassifyExample,
    FeatureStore,
    RegionFeatures,
    TokenSeq,
    VQAExample,
    Vocab,
    detokenize,
    load_features,
    read_corpus,
    read_dataset,
    save_features,
    sentinel,
    split_text,
    tokenize,
    write_dataset,
)
from fewvlm.utils.errors import (
    BadMagic,
    ConfigError,
    InvalidBox,
    InvalidId,
    MissingField,
    MissingFile,
    NonFiniteValue,
    ParseError,
    ShapeMismatch,
)


def test_vocab_layout(vocab):
    assert [vocab.token(k) for k in range(vocab.n_sentinels)] == [sentinel(k) for k in range(10)]
    assert vocab.sentinel_id(1) == 1
    assert vocab.is_sentinel(0) and not vocab.is_sentinel(vocab.pad_id)
    assert min(vocab.word_ids) == vocab.n_sentinels + 4
    assert vocab.id("never-seen-word") == vocab.unk_id


def test_vocab_build_is_order_independent():
    texts = ["a red circle", "a blue square", "a red star"]
    assert Vocab.build(texts).tokens == Vocab.build(texts[::-1]).tokens
    # most frequent word first
    v = Vocab.build(texts)
    assert v.tokens[v.word_ids[0]] == "a"


def test_vocab_save_load(vocab, tmp_path):
    vocab.save(tmp_path / "vocab.txt")
    loaded = Vocab.load(tmp_path / "vocab.txt")
    assert loaded == vocab
    assert loaded.n_sentinels == vocab.n_sentinels


def test_vocab_rejects_missing_specials():
    with pytest.raises(ConfigError):
        Vocab(tuple(sentinel(k) for k in range(3)) + ("word",), 3)


def test_token_out_of_range(vocab):
    with pytest.raises(InvalidId):
        vocab.token(vocab.size)
    with pytest.raises(InvalidId):
        TokenSeq((0, vocab.size + 5)).check(vocab)
    with pytest.raises(InvalidId):
        detokenize([vocab.size], vocab)


def test_split_text_keeps_sentinels():
    assert split_text("Question: What color? answer: <text_1>") == [
        "question", ":", "what", "color", "?", "answer", ":", "<text_1>",
    ]


def test_tokenize_sentinel_literal(vocab):
    ids = tokenize("<text_1> red", vocab)
    assert ids[0] == vocab.sentinel_id(1)


def test_detokenize_drops_specials(vocab):
    ids = [vocab.bos_id] + list(tokenize("a red circle", vocab)) + [vocab.eos_id, vocab.pad_id]
    assert detokenize(ids, vocab) == "a red circle"


@given(st.lists(st.sampled_from(["a", "red", "blue", "circle", "square", "star", "?"]),
                min_size=1, max_size=12))
def test_tokenize_roundtrip_on_known_words(words):
    v = Vocab.build(["a red blue circle square star ?"])
    text = " ".join(words)
    assert detokenize(tokenize(text, v), v) == text


def test_token_seq_concat():
    s = TokenSeq((1, 2)) + [3]
    assert s.ids == (1, 2, 3) and len(s) == 3


# ----------------------------------------------------------------------------
#                      Examples and JSONL
# ----------------------------------------------------------------------------
def test_vqa_answer_is_majority():
    ex = VQAExample("1", "what?", ("red", "blue", "blue", "red", "blue"))
    assert ex.answer == "blue"
    # tie goes to the first
    assert VQAExample("1", "q", ("x", "y")).answer == "x"


def test_examples_need_targets():
    with pytest.raises(MissingField):
        VQAExample("1", "q", ())
    with pytest.raises(MissingField):
        CaptionExample("1", ())
    with pytest.raises(MissingField):
        ClassifyExample("1", "dog", ("cat", "bird"))


def test_dataset_write_read(tmp_path):
    examples = [
        VQAExample("img1", "what color is the circle?", ("red",) * 10),
        VQAExample("img2", "how many objects are there?", ("two", "2")),
    ]
    write_dataset(tmp_path / "vqa.jsonl", examples)
    assert read_dataset(tmp_path / "vqa.jsonl", "vqa") == examples

    caps = [CaptionExample("c1", ("a red circle", "a circle"))]
    write_dataset(tmp_path / "cap.jsonl", caps)
    assert read_dataset(tmp_path / "cap.jsonl", "caption") == caps


def test_missing_field_reports_line(tmp_path):
    path = tmp_path / "vqa.jsonl"
    path.write_text(
        json.dumps({"image_id": "1", "question": "q", "answers": ["a"]}) + "\n"
        + json.dumps({"image_id": "2", "question": "q"}) + "\n"
    )
    with pytest.raises(MissingField, match="line 2"):
        read_dataset(path, "vqa")


def test_parse_error_carries_line(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text('{"image_id": "1", "caption": "a b"}\n{not json\n')
    with pytest.raises(ParseError) as err:
        read_corpus(path)
    assert err.value.line == 2


@pytest.mark.parametrize(
    "task, rec",
    [
        ("vqa", {"image_id": "1", "question": "q", "answers": "pitcher"}),
        ("vqa", {"image_id": "1", "question": None, "answers": ["red"]}),
        ("vqa", {"image_id": "1", "question": "q", "answers": ["red", 2]}),
        ("vqa", {"image_id": None, "question": "q", "answers": ["red"]}),
        ("caption", {"image_id": "1", "captions": "a red circle"}),
        ("classify", {"image_id": "1", "label": ["star"], "candidate_labels": ["star"]}),
        ("classify", {"image_id": "1", "label": "star", "candidate_labels": "star"}),
    ],
)
def test_field_types_are_checked(tmp_path, task, rec):
    path = tmp_path / "data.jsonl"
    good = {"vqa": {"image_id": "0", "question": "q", "answers": ["red"]},
            "caption": {"image_id": "0", "captions": ["a red circle"]},
            "classify": {"image_id": "0", "label": "star", "candidate_labels": ["star"]}}[task]
    path.write_text(json.dumps(good) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ParseError) as err:
        read_dataset(path, task)
    assert err.value.line == 2


def test_corpus_caption_must_be_text(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text(json.dumps({"image_id": 7, "caption": ["a", "b"]}) + "\n")
    with pytest.raises(ParseError) as err:
        read_corpus(path)
    assert err.value.line == 1


def test_integer_image_ids_are_accepted(tmp_path):
    path = tmp_path / "vqa.jsonl"
    path.write_text(json.dumps({"image_id": 7, "question": "q", "answers": ["red"]}) + "\n")
    assert read_dataset(path, "vqa")[0].image_id == "7"


def test_missing_files(tmp_path):
    with pytest.raises(MissingFile):
        read_dataset(tmp_path / "absent.jsonl", "vqa")
    with pytest.raises(MissingFile):
        Vocab.load(tmp_path / "absent.txt")
    with pytest.raises(MissingFile):
        FeatureStore(tmp_path).get("absent")


def test_unknown_task(tmp_path):
    (tmp_path / "x.jsonl").write_text("")
    with pytest.raises(ConfigError):
        read_dataset(tmp_path / "x.jsonl", "detection")


# ----------------------------------------------------------------------------
#                      Region features
# ----------------------------------------------------------------------------
def test_region_features_are_frozen(make_regions):
    reg = make_regions(np.random.default_rng(0))
    assert reg.features.dtype == np.float32
    with pytest.raises(ValueError):
        reg.features[0, 0] = 1.0


def test_region_feature_validation():
    with pytest.raises(NonFiniteValue):
        RegionFeatures(np.array([[np.nan, 1.0]]), np.zeros((1, 4)))
    with pytest.raises(ShapeMismatch):
        RegionFeatures(np.zeros((2, 3)), np.zeros((3, 4)))
    with pytest.raises(ShapeMismatch):
        RegionFeatures(np.zeros((0, 3)), np.zeros((0, 4)))
    with pytest.raises(InvalidBox):
        RegionFeatures(np.zeros((1, 3)), np.array([[0.5, 0.0, 0.2, 1.0]]))


def test_feature_file_roundtrip(tmp_path, make_regions):
    reg = make_regions(np.random.default_rng(1), n=5, dim=7)
    save_features(tmp_path / "x.vlft", reg)
    back = load_features(tmp_path / "x.vlft")
    np.testing.assert_array_equal(back.features, reg.features)
    np.testing.assert_array_equal(back.boxes, reg.boxes)
    assert (tmp_path / "x.vlft").read_bytes()[:4] == FEATURE_MAGIC


def test_feature_file_bad_magic(tmp_path):
    (tmp_path / "x.vlft").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(BadMagic):
        load_features(tmp_path / "x.vlft")


def test_feature_file_size_mismatch(tmp_path, make_regions):
    save_features(tmp_path / "x.vlft", make_regions(np.random.default_rng(2)))
    raw = (tmp_path / "x.vlft").read_bytes()
    (tmp_path / "x.vlft").write_bytes(raw[:-4])
    with pytest.raises(ShapeMismatch):
        load_features(tmp_path / "x.vlft")

    header = FEATURE_MAGIC + np.array([0, 8], dtype="<u4").tobytes()
    (tmp_path / "empty.vlft").write_bytes(header)
    with pytest.raises(ShapeMismatch):
        load_features(tmp_path / "empty.vlft")


def test_feature_store(tmp_path, make_regions):
    store = FeatureStore(tmp_path / "features")
    reg = make_regions(np.random.default_rng(3))
    store.put("img1", reg)
    assert "img1" in store and "img2" not in store

    fresh = FeatureStore(tmp_path / "features")
    np.testing.assert_array_equal(fresh.get("img1").features, reg.features)
    assert fresh["img1"] is fresh.get("img1")
