"""Tokenization, dataset records and the binary region-feature store.

Files handled here:

- vocabulary: one token per line, the line number is the id
- datasets: UTF-8 JSONL, one record per line (VQA, caption, classify or
  pre-training corpus)
- region features: one little-endian file per image, "VLFT" magic, u32
  n_regions, u32 dim, f32 features (n_regions x dim), f32 boxes (n_regions x 4)
"""

import json
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

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
from fewvlm.utils.logging import logger

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
SENTINEL_RE = re.compile(r"^<text_(\d+)>$")
TOKEN_RE = re.compile(r"<text_\d+>|\w+|[^\w\s]")

FEATURE_MAGIC = b"VLFT"


def sentinel(k: int) -> str:
    return f"<text_{k}>"


# ----------------------------------------------------------------------------
#                      Vocabulary and tokenization
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class Vocab:
    """
    Token inventory. Ids 0..n_sentinels-1 are the sentinels `<text_k>`,
    followed by the four special tokens and then ordinary words.

    Attributes
    ----------
    tokens : tuple[str, ...]
        Token strings, the position is the id.
    n_sentinels : int
        Number of leading sentinel tokens.
    """

    tokens: tuple
    n_sentinels: int
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.n_sentinels < 2:
            raise ConfigError(f"Need at least 2 sentinels, got {self.n_sentinels=}")
        for k in range(self.n_sentinels):
            if self.tokens[k] != sentinel(k):
                raise ConfigError(f"Token id {k} must be {sentinel(k)!r}, got {self.tokens[k]!r}")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            dups = [t for t, c in Counter(self.tokens).items() if c > 1]
            raise ConfigError(f"Duplicate vocabulary entries: {dups[:10]}")
        missing = [s for s in SPECIALS if s not in index]
        if missing:
            raise ConfigError(f"Vocabulary lacks special tokens {missing}")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise InvalidId(f"Token id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def sentinel_id(self, k: int) -> int:
        if not 0 <= k < self.n_sentinels:
            raise InvalidId(f"Sentinel {k} outside the {self.n_sentinels} reserved sentinels")
        return k

    def is_sentinel(self, idx: int) -> bool:
        return 0 <= idx < self.n_sentinels

    @property
    def word_ids(self) -> list[int]:
        """Ids of ordinary words, i.e. neither sentinels nor special tokens"""
        start = self.n_sentinels + len(SPECIALS)
        return list(range(start, len(self.tokens)))

    @classmethod
    def build(cls, texts: Iterable[str], n_sentinels: int = 10, min_count: int = 1) -> "Vocab":
        """
        Build a vocabulary from raw texts.

        Words are ordered by decreasing frequency, ties alphabetically, so the
        result does not depend on the order of `texts`.
        """
        counts = Counter()
        for t in texts:
            counts.update(w for w in split_text(t) if not SENTINEL_RE.match(w))
        words = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS),
                       key=lambda w: (-counts[w], w))
        tokens = [sentinel(k) for k in range(n_sentinels)] + list(SPECIALS) + words
        logger.info(f"Built vocabulary with {len(tokens)} tokens from {sum(counts.values())} words")
        return cls(tuple(tokens), n_sentinels)

    @classmethod
    def load(cls, path: Path | str) -> "Vocab":
        try:
            tokens = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as err:
            raise MissingFile(f"Cannot read vocabulary {path}: {err}") from err
        n = 0
        while n < len(tokens) and tokens[n] == sentinel(n):
            n += 1
        return cls(tuple(tokens), n)

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TokenSeq:
    """Token ids of one text, no implicit padding"""

    ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids)

    def __getitem__(self, i):
        return self.ids[i]

    def __add__(self, other: "TokenSeq | Sequence[int]") -> "TokenSeq":
        return TokenSeq(self.ids + tuple(other))

    def check(self, vocab: Vocab) -> "TokenSeq":
        bad = [i for i in self.ids if not 0 <= i < vocab.size]
        if bad:
            raise InvalidId(f"Token ids {bad} outside vocabulary of size {vocab.size}")
        return self


def split_text(text: str) -> list[str]:
    """Lowercase and split into sentinel markers, words and punctuation marks"""
    return TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    return " ".join(split_text(text))


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    return TokenSeq(tuple(vocab.id(w) for w in split_text(text)))


def detokenize(seq: TokenSeq | Sequence[int], vocab: Vocab) -> str:
    skip = {vocab.pad_id, vocab.bos_id, vocab.eos_id}
    words = [vocab.token(int(i)) for i in seq]
    return " ".join(w for i, w in zip(seq, words) if int(i) not in skip)


# ----------------------------------------------------------------------------
#                      Dataset records
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class VLExample:
    image_id: str

    task = ""

    @property
    def question(self) -> str | None:
        return None

    @property
    def answer(self) -> str:
        """The text used as the training target"""
        raise NotImplementedError

    @property
    def references(self) -> list[str]:
        """All acceptable target texts, used for scoring"""
        return [self.answer]

    def to_record(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class VQAExample(VLExample):
    text: str = ""
    answers: tuple = ()

    task = "vqa"

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise MissingField(f"VQA example {self.image_id!r} has no answers")

    @property
    def question(self) -> str:
        return self.text

    @property
    def answer(self) -> str:
        # most frequent answer, the first one on ties
        counts = Counter(self.answers)
        best = max(counts.values())
        return next(a for a in self.answers if counts[a] == best)

    @property
    def references(self) -> list[str]:
        return list(self.answers)

    def to_record(self) -> dict:
        return {"image_id": self.image_id, "question": self.text, "answers": list(self.answers)}


@dataclass(frozen=True)
class CaptionExample(VLExample):
    captions: tuple = ()

    task = "caption"

    def __post_init__(self):
        object.__setattr__(self, "captions", tuple(self.captions))
        if not self.captions:
            raise MissingField(f"Caption example {self.image_id!r} has no captions")

    @property
    def answer(self) -> str:
        return self.captions[0]

    @property
    def references(self) -> list[str]:
        return list(self.captions)

    def to_record(self) -> dict:
        return {"image_id": self.image_id, "captions": list(self.captions)}


@dataclass(frozen=True)
class ClassifyExample(VLExample):
    label: str = ""
    candidate_labels: tuple = ()

    task = "classify"

    def __post_init__(self):
        object.__setattr__(self, "candidate_labels", tuple(self.candidate_labels))
        if not self.candidate_labels:
            raise MissingField(f"Classify example {self.image_id!r} has no candidate_labels")
        if self.label not in self.candidate_labels:
            raise MissingField(
                f"Classify example {self.image_id!r}: label {self.label!r} not among"
                f" {list(self.candidate_labels)}"
            )

    @property
    def answer(self) -> str:
        return self.label

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "label": self.label,
            "candidate_labels": list(self.candidate_labels),
        }


REQUIRED_FIELDS = {
    "vqa": ("image_id", "question", "answers"),
    "caption": ("image_id", "captions"),
    "classify": ("image_id", "label", "candidate_labels"),
    "pretrain": ("image_id", "caption"),
}


def _text(rec: dict, key: str, lineno: int) -> str:
    value = rec[key]
    if not isinstance(value, str):
        raise ParseError(f"field {key!r} must be a string, got {type(value).__name__}", lineno)
    return value


def _text_list(rec: dict, key: str, lineno: int) -> tuple[str, ...]:
    value = rec[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError(f"field {key!r} must be a list of strings, got {value!r}", lineno)
    return tuple(value)


def _image_id(rec: dict, lineno: int) -> str:
    value = rec["image_id"]
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise ParseError(f"field 'image_id' must be a string or integer, got {value!r}", lineno)
    return str(value)


def example_from_record(task: str, rec: dict, lineno: int = 0) -> VLExample:
    image_id = _image_id(rec, lineno)
    if task == "vqa":
        return VQAExample(image_id, _text(rec, "question", lineno), _text_list(rec, "answers", lineno))
    if task == "caption":
        return CaptionExample(image_id, _text_list(rec, "captions", lineno))
    return ClassifyExample(image_id, _text(rec, "label", lineno),
                           _text_list(rec, "candidate_labels", lineno))


def read_jsonl(path: Path | str) -> Iterator[tuple[int, dict]]:
    """Yield (line number, record) for every non-blank line, numbering starts at 1"""
    if not Path(path).is_file():
        raise MissingFile(f"JSONL file {path} does not exist")
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}: {err.msg}", lineno) from err
            if not isinstance(rec, dict):
                raise ParseError(f"{path}: expected a JSON object, got {type(rec).__name__}", lineno)
            yield lineno, rec


def _check_fields(task: str, rec: dict, path, lineno: int) -> None:
    missing = [k for k in REQUIRED_FIELDS[task] if k not in rec]
    if missing:
        raise MissingField(f"{path} line {lineno}: missing {missing} for a {task} record")


def read_dataset(path: Path | str, task: str) -> list[VLExample]:
    """
    Read a JSONL dataset of the given task kind.

    Parameters
    ----------
    path : Path | str
        The JSONL file.
    task : str
        One of "vqa", "caption" or "classify".

    Returns
    -------
    list[VLExample]
        The examples in file order.
    """
    if task not in ("vqa", "caption", "classify"):
        raise ConfigError(f"Unknown task {task=}, expected vqa, caption or classify")
    examples = []
    for lineno, rec in read_jsonl(path):
        _check_fields(task, rec, path, lineno)
        try:
            examples.append(example_from_record(task, rec, lineno))
        except MissingField as err:
            raise MissingField(f"{path} line {lineno}: {err}") from err
    logger.debug(f"Read {len(examples)} {task} examples from {path}")
    return examples


def read_corpus(path: Path | str) -> list[tuple[str, str]]:
    """Pre-training corpus as (image_id, caption) pairs"""
    corpus = []
    for lineno, rec in read_jsonl(path):
        _check_fields("pretrain", rec, path, lineno)
        corpus.append((_image_id(rec, lineno), _text(rec, "caption", lineno)))
    return corpus


def write_jsonl(path: Path | str, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_dataset(path: Path | str, examples: Iterable[VLExample]) -> None:
    write_jsonl(path, (ex.to_record() for ex in examples))


# ----------------------------------------------------------------------------
#                      Region features
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class RegionFeatures:
    """
    Per-image region features with normalized boxes.

    Attributes
    ----------
    features : np.ndarray
        float32, shape (n_regions, dim), all values finite.
    boxes : np.ndarray
        float32, shape (n_regions, 4) as (x1, y1, x2, y2) within [0, 1].
    """

    features: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float32)
        boxes = np.array(self.boxes, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ShapeMismatch(f"features must be a non-empty 2d matrix, got {feats.shape}")
        if boxes.shape != (feats.shape[0], 4):
            raise ShapeMismatch(f"boxes must have shape {(feats.shape[0], 4)}, got {boxes.shape}")
        if not np.isfinite(feats).all() or not np.isfinite(boxes).all():
            raise NonFiniteValue("Region features or boxes contain NaN or Inf")
        x1, y1, x2, y2 = boxes.T
        ok = (0 <= x1) & (x1 <= x2) & (x2 <= 1) & (0 <= y1) & (y1 <= y2) & (y2 <= 1)
        if not ok.all():
            raise InvalidBox(f"Boxes {np.flatnonzero(~ok).tolist()} are not ordered within [0, 1]")
        feats.flags.writeable = False
        boxes.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "boxes", boxes)

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def zeros(cls, n_regions: int, dim: int) -> "RegionFeatures":
        return cls(np.zeros((n_regions, dim)), np.zeros((n_regions, 4)))


def save_features(path: Path | str, regions: RegionFeatures) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([regions.n_regions, regions.dim], dtype="<u4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(header.tobytes())
        f.write(regions.features.astype("<f4").tobytes())
        f.write(regions.boxes.astype("<f4").tobytes())


def load_features(path: Path | str) -> RegionFeatures:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise MissingFile(f"Cannot read region features {path}: {err}") from err
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: expected magic {FEATURE_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise ShapeMismatch(f"{path}: truncated header")
    n, dim = (int(v) for v in np.frombuffer(raw[4:12], dtype="<u4"))
    if n == 0 or dim == 0:
        raise ShapeMismatch(f"{path}: header declares ({n}, {dim}) regions")
    expected = 12 + 4 * n * dim + 16 * n
    if len(raw) != expected:
        raise ShapeMismatch(
            f"{path}: header ({n}, {dim}) needs {expected} bytes, file has {len(raw)}"
        )
    feats = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=12).reshape(n, dim)
    boxes = np.frombuffer(raw, dtype="<f4", count=n * 4, offset=12 + 4 * n * dim).reshape(n, 4)
    return RegionFeatures(feats, boxes)


class FeatureStore:
    """
    Per-image feature files under one directory, `<directory>/<image_id>.vlft`.

    Loaded files are cached in memory; lookups are safe from several threads.
    """

    suffix = ".vlft"

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        self._cache: dict[str, RegionFeatures] = {}
        self._lock = threading.Lock()

    def path_for(self, image_id: str) -> Path:
        return self.directory / f"{image_id}{self.suffix}"

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._cache or self.path_for(image_id).exists()

    def get(self, image_id: str) -> RegionFeatures:
        with self._lock:
            if image_id not in self._cache:
                self._cache[image_id] = load_features(self.path_for(image_id))
            return self._cache[image_id]

    __getitem__ = get

    def preload(self, entries: dict[str, RegionFeatures]) -> None:
        with self._lock:
            self._cache.update(entries)

    def put(self, image_id: str, regions: RegionFeatures) -> Path:
        path = self.path_for(image_id)
        save_features(path, regions)
        with self._lock:
            self._cache[image_id] = regions
        return path
