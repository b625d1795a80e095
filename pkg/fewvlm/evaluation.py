"""Metrics of the generative tasks: VQA accuracy, CIDEr-D and classification accuracy."""

import re
import string
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from fewvlm.data import VLExample
from fewvlm.utils.errors import ConfigError, EmptyAnswers, EmptyReferences, LengthMismatch, ParseError

ARTICLES = ("a", "an", "the")
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


@dataclass
class MetricReport:
    metric: str
    per_example: list = field(default_factory=list)
    score: float = 0.0
    n_examples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _report(metric: str, per_example: Sequence[float]) -> MetricReport:
    per_example = [float(s) for s in per_example]
    score = float(np.mean(per_example)) if per_example else 0.0
    return MetricReport(metric, per_example, score, len(per_example))


# ----------------------------------------------------------------------------
#                      Accuracies
# ----------------------------------------------------------------------------
def normalize_answer(s: str) -> str:
    """
    Lowercase, drop punctuation, collapse whitespace and drop leading articles.

    An answer consisting of an article only is kept as is.
    """
    words = _PUNCT.sub("", s.lower()).split()
    while len(words) > 1 and words[0] in ARTICLES:
        words = words[1:]
    return " ".join(words)


def vqa_accuracy(pred: str, answers: Sequence[str]) -> float:
    """
    With 4 or more answers the consensus rule min(#matches / 3, 1) applies,
    with fewer an exact match of the normalized strings.
    """
    if not answers:
        raise EmptyAnswers("vqa_accuracy needs at least one reference answer")
    p = normalize_answer(pred)
    normed = [normalize_answer(a) for a in answers]
    if len(answers) >= 4:
        return min(sum(a == p for a in normed) / 3.0, 1.0)
    return float(p in normed)


def vqa_report(preds: Sequence[str], answers: Sequence[Sequence[str]]) -> MetricReport:
    if len(preds) != len(answers):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(answers)} answer lists")
    return _report("vqa_accuracy", [vqa_accuracy(p, a) for p, a in zip(preds, answers)])


def classify_report(preds: Sequence[str], labels: Sequence[str]) -> MetricReport:
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    return _report(
        "classify_accuracy",
        [normalize_answer(p) == normalize_answer(y) for p, y in zip(preds, labels)],
    )


def classify_accuracy(preds: Sequence[str], labels: Sequence[str]) -> float:
    return classify_report(preds, labels).score


# ----------------------------------------------------------------------------
#                      CIDEr
# ----------------------------------------------------------------------------
def caption_tokens(s: str) -> list[str]:
    return _PUNCT.sub(" ", s.lower()).split()


def _ngrams(words: list[str], n_max: int) -> Counter:
    counts = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(words) - n + 1):
            counts[tuple(words[i : i + n])] += 1
    return counts


class CiderScorer:
    """
    CIDEr over one corpus.

    Document frequencies are counted over the reference sets of the corpus:
    an n-gram counts once per image whose references contain it.

    Parameters
    ----------
    references : Sequence[Sequence[str]]
        Reference captions per image.
    n_max : int
        Largest n-gram order.
    sigma : float
        Width of the Gaussian length penalty.
    clipped : bool
        CIDEr-D (clipped counts and length penalty) if True, plain CIDEr else.
    """

    def __init__(self, references: Sequence[Sequence[str]], n_max: int = 4, sigma: float = 6.0,
                 clipped: bool = True):
        if any(len(refs) == 0 for refs in references):
            raise EmptyReferences("Every image needs at least one reference caption")
        self.n_max = n_max
        self.sigma = sigma
        self.clipped = clipped
        self.doc_freq: Counter = Counter()
        for refs in references:
            seen = set()
            for r in refs:
                seen.update(_ngrams(caption_tokens(r), n_max))
            self.doc_freq.update(seen)
        self.ref_len = np.log(float(max(len(references), 1)))

    def _vec(self, text: str):
        counts = _ngrams(caption_tokens(text), self.n_max)
        vec = [defaultdict(float) for _ in range(self.n_max)]
        norm = np.zeros(self.n_max)
        length = 0
        for gram, tf in counts.items():
            n = len(gram) - 1
            df = np.log(max(1.0, self.doc_freq[gram]))
            vec[n][gram] = float(tf) * (self.ref_len - df)
            norm[n] += vec[n][gram] ** 2
            if n == 1:
                # length in bigrams
                length += tf
        return vec, np.sqrt(norm), length

    def _sim(self, hyp, ref) -> np.ndarray:
        vec_h, norm_h, len_h = hyp
        vec_r, norm_r, len_r = ref
        val = np.zeros(self.n_max)
        for n in range(self.n_max):
            for gram, w in vec_h[n].items():
                r = vec_r[n].get(gram, 0.0)
                val[n] += (min(w, r) if self.clipped else w) * r
            if norm_h[n] != 0 and norm_r[n] != 0:
                val[n] /= norm_h[n] * norm_r[n]
            if self.clipped:
                val[n] *= np.exp(-((len_h - len_r) ** 2) / (2 * self.sigma**2))
        return val

    def score(self, candidate: str, refs: Sequence[str]) -> float:
        if not refs:
            raise EmptyReferences("Candidate has no reference captions")
        hyp = self._vec(candidate)
        total = np.zeros(self.n_max)
        for r in refs:
            total += self._sim(hyp, self._vec(r))
        return float(np.mean(total) / len(refs) * 10.0)


def cider(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    n_max: int = 4,
    sigma: float = 6.0,
    clipped: bool = True,
    idf_references: Sequence[Sequence[str]] | None = None,
) -> MetricReport:
    """
    Corpus CIDEr-D, the mean of the per-image scores.

    Parameters
    ----------
    candidates : Sequence[str]
        One generated caption per image.
    references : Sequence[Sequence[str]]
        Reference captions per image.
    n_max : int
        Largest n-gram order, scores average over orders 1..n_max.
    sigma : float
        Width of the Gaussian length penalty.
    clipped : bool
        False gives plain CIDEr, without clipping and length penalty.
    idf_references : Sequence[Sequence[str]] | None
        Reference sets for the document frequencies, `references` by default.

    Returns
    -------
    MetricReport
    """
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} reference sets")
    scorer = CiderScorer(references if idf_references is None else idf_references,
                         n_max, sigma, clipped)
    if any(len(refs) == 0 for refs in references):
        raise EmptyReferences("Every image needs at least one reference caption")
    metric = "cider_d" if clipped else "cider"
    return _report(metric, [scorer.score(c, refs) for c, refs in zip(candidates, references)])


# ----------------------------------------------------------------------------
#                      Dispatch
# ----------------------------------------------------------------------------
METRICS = ("vqa_accuracy", "cider", "classify_accuracy")


def score_predictions(metric: str, preds: Sequence[str], examples: Sequence[VLExample]
                      ) -> MetricReport:
    """Score predictions against the references of the matching examples"""
    if len(preds) != len(examples):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(examples)} examples")
    if metric == "vqa_accuracy":
        return vqa_report(preds, [ex.references for ex in examples])
    if metric == "cider":
        return cider(preds, [ex.references for ex in examples])
    if metric == "classify_accuracy":
        return classify_report(preds, [ex.answer for ex in examples])
    raise ConfigError(f"Unknown metric {metric!r}, expected one of {METRICS}")


def match_predictions(records: Sequence[dict], examples: Sequence[VLExample]) -> list[str]:
    """
    Pair prediction records with examples by position.

    Raises
    ------
    LengthMismatch
        If the counts differ.
    ParseError
        If a record's image_id differs from its example's.
    """
    if len(records) != len(examples):
        raise LengthMismatch(f"{len(records)} predictions vs {len(examples)} references")
    preds = []
    for i, (rec, ex) in enumerate(zip(records, examples), start=1):
        if str(rec.get("image_id")) != ex.image_id:
            raise ParseError(
                f"prediction for {rec.get('image_id')!r} where {ex.image_id!r} is expected", i
            )
        preds.append(str(rec.get("prediction", "")))
    return preds
