"""Pre-training pairs: masked span prediction and prefix continuation.

MaskedLM replaces each run of masked tokens with one numbered sentinel; the
target lists every sentinel followed by the tokens it hides. PrefixLM cuts the
text in two and asks for the continuation.
"""

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from fewvlm.data import TokenSeq, Vocab, tokenize
from fewvlm.utils.errors import ConfigError, EmptyCorpus, SentinelOverflow, TooShort
from fewvlm.utils.logging import logger

MASKED = "masked"
PREFIX = "prefix"


@dataclass(frozen=True)
class PretrainPair:
    objective: str
    input_ids: TokenSeq
    target_ids: TokenSeq
    image_id: str = ""


def _check_len(text_ids: Sequence[int]) -> None:
    if len(text_ids) < 2:
        raise TooShort(f"Pre-training needs at least 2 tokens, got {len(text_ids)}")


def mask_spans(
    text_ids: Sequence[int],
    vocab: Vocab,
    mask_rate: float = 0.15,
    rng: np.random.Generator | None = None,
    forced_mask: Sequence[int] | None = None,
    sentinel_offset: int = 0,
    image_id: str = "",
) -> PretrainPair:
    """
    Build a MaskedLM pair.

    Parameters
    ----------
    text_ids : Sequence[int]
        The tokenized text, at least 2 tokens.
    vocab : Vocab
        Provides the sentinel ids.
    mask_rate : float
        Probability of masking each token independently.
    rng : np.random.Generator | None
        Source of the masking draws, required unless `forced_mask` is given.
    forced_mask : Sequence[int] | None
        Positions to mask instead of sampling.
    sentinel_offset : int
        Number of the first sentinel, spans use `<text_{offset + k}>`.
    image_id : str
        Carried into the pair.

    Returns
    -------
    PretrainPair
    """
    _check_len(text_ids)
    n = len(text_ids)
    if forced_mask is not None:
        bad = [int(i) for i in forced_mask if not 0 <= int(i) < n]
        if bad or not len(forced_mask):
            raise ConfigError(f"forced_mask needs positions within [0, {n}), got {list(forced_mask)}")
        masked = np.zeros(n, dtype=bool)
        masked[list(forced_mask)] = True
    else:
        if not 0 < mask_rate < 1:
            raise ConfigError(f"mask_rate must be in (0, 1), got {mask_rate=}")
        masked = rng.random(n) < mask_rate
        if not masked.any():
            masked[rng.integers(n)] = True

    inp: list[int] = []
    tgt: list[int] = []
    k = sentinel_offset
    i = 0
    while i < n:
        if not masked[i]:
            inp.append(int(text_ids[i]))
            i += 1
            continue
        if k >= vocab.n_sentinels:
            raise SentinelOverflow(
                f"Text needs more than the {vocab.n_sentinels} sentinels (offset {sentinel_offset})"
            )
        inp.append(vocab.sentinel_id(k))
        tgt.append(vocab.sentinel_id(k))
        while i < n and masked[i]:
            tgt.append(int(text_ids[i]))
            i += 1
        k += 1
    return PretrainPair(MASKED, TokenSeq(inp), TokenSeq(tgt), image_id)


def reconstruct(input_ids: Sequence[int], target_ids: Sequence[int], vocab: Vocab) -> list[int]:
    """Put the target spans back in place of their sentinels"""
    spans: dict[int, list[int]] = {}
    current = None
    for t in target_ids:
        if vocab.is_sentinel(t):
            current = t
            spans[t] = []
        elif current is not None:
            spans[current].append(int(t))
    out: list[int] = []
    for t in input_ids:
        out.extend(spans[t] if vocab.is_sentinel(t) and t in spans else [int(t)])
    return out


def prefix_split(
    text_ids: Sequence[int], rng: np.random.Generator, image_id: str = ""
) -> PretrainPair:
    """Split at an index drawn uniformly from [1, len - 1]"""
    _check_len(text_ids)
    cut = int(rng.integers(1, len(text_ids)))
    ids = tuple(int(t) for t in text_ids)
    return PretrainPair(PREFIX, TokenSeq(ids[:cut]), TokenSeq(ids[cut:]), image_id)


def build_pretrain_batches(
    corpus: Sequence[tuple[str, str]],
    vocab: Vocab,
    mix: float,
    batch_size: int,
    rng: np.random.Generator,
    epochs: int = 1,
    mask_rate: float = 0.15,
    sentinel_offset: int = 0,
) -> Iterator[list[PretrainPair]]:
    """
    Stream pre-training batches.

    Every epoch visits each corpus item once in an order shuffled by `rng`.
    Each visit draws the objective, MaskedLM with probability `mix`, else
    PrefixLM. The last batch of an epoch may be smaller than `batch_size`.

    Parameters
    ----------
    corpus : Sequence[tuple[str, str]]
        (image_id, caption) pairs.
    mix : float
        Fraction of MaskedLM pairs, 1.0 for masked only, 0.0 for prefix only.
    """
    if not corpus:
        raise EmptyCorpus("Pre-training corpus is empty")
    if not 0 <= mix <= 1:
        raise ConfigError(f"mix must be in [0, 1], got {mix=}")
    tokenized = [(image_id, tokenize(caption, vocab)) for image_id, caption in corpus]
    short = [image_id for image_id, ids in tokenized if len(ids) < 2]
    if short:
        raise TooShort(f"{len(short)} corpus captions have fewer than 2 tokens, e.g. {short[:3]}")

    for epoch in range(epochs):
        order = rng.permutation(len(tokenized))
        batch: list[PretrainPair] = []
        for idx in order:
            image_id, ids = tokenized[idx]
            if rng.random() < mix:
                pair = mask_spans(ids, vocab, mask_rate, rng, sentinel_offset=sentinel_offset,
                                  image_id=image_id)
            else:
                pair = prefix_split(ids, rng, image_id=image_id)
            batch.append(pair)
            if len(batch) == batch_size:
                yield batch
                batch = []
        if batch:
            yield batch
        logger.debug(f"Pre-training stream finished epoch {epoch + 1}/{epochs}")
