"""Training loop shared by pre-training and fine-tuning."""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fewvlm.config import ObjectiveConfig, TrainConfig
from fewvlm.data import FeatureStore, RegionFeatures, TokenSeq, Vocab, tokenize
from fewvlm.model import FewVLMModel
from fewvlm.nncore.optim import Adam
from fewvlm.nncore.tensor import mul
from fewvlm.objectives import build_pretrain_batches
from fewvlm.utils.errors import ConfigError, NonFiniteValue
from fewvlm.utils.logging import logger

OBJECTIVE_MIX = {"masked": 1.0, "prefix": 0.0}


@dataclass(frozen=True)
class TrainingPair:
    """Model-ready example, the target ends with eos"""

    regions: RegionFeatures
    input_ids: TokenSeq
    target_ids: TokenSeq


def make_pair(regions: RegionFeatures, input_ids: Sequence[int], target_ids: Sequence[int],
              vocab: Vocab) -> TrainingPair:
    return TrainingPair(regions, TokenSeq(tuple(input_ids)), TokenSeq(tuple(target_ids) + (vocab.eos_id,)))


def make_text_pair(regions: RegionFeatures, input_text: str, target_text: str, vocab: Vocab
                   ) -> TrainingPair:
    return make_pair(regions, tokenize(input_text, vocab), tokenize(target_text, vocab), vocab)


def train_step(model: FewVLMModel, optimizer: Adam, batch: Sequence[TrainingPair], bos_id: int
               ) -> float:
    """One update on the batch mean of the per-example summed NLL, returns that loss"""
    optimizer.zero_grad()
    loss = model.batch_loss(
        [p.regions for p in batch], [p.input_ids for p in batch], [p.target_ids for p in batch],
        bos_id,
    )
    loss = mul(loss, 1.0 / len(batch))
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteValue(f"Training loss became {value}")
    loss.backward()
    optimizer.step()
    return value


def pretrain(
    model: FewVLMModel,
    corpus: Sequence[tuple[str, str]],
    store: FeatureStore,
    vocab: Vocab,
    objective: str,
    train_cfg: TrainConfig,
    obj_cfg: ObjectiveConfig,
) -> list[float]:
    """
    Pre-train on (image_id, caption) pairs with MaskedLM, PrefixLM or both.

    Parameters
    ----------
    objective : str
        "masked", "prefix" or "both"; "both" draws MaskedLM with probability
        `obj_cfg.mix`.

    Returns
    -------
    list[float]
        Mean training loss per epoch.
    """
    if objective not in ("masked", "prefix", "both"):
        raise ConfigError(f"Unknown objective {objective=}, expected masked, prefix or both")
    mix = OBJECTIVE_MIX.get(objective, obj_cfg.mix)
    steps_per_epoch = math.ceil(len(corpus) / train_cfg.batch_size)
    optimizer = Adam(model.named_parameters(), train_cfg.lr, train_cfg.epochs * steps_per_epoch,
                     train_cfg.warmup)
    rng = np.random.default_rng(train_cfg.seed)
    model.seed_dropout(train_cfg.seed)
    model.train()

    stream = build_pretrain_batches(corpus, vocab, mix, train_cfg.batch_size, rng,
                                    epochs=train_cfg.epochs, mask_rate=obj_cfg.mask_rate,
                                    sentinel_offset=obj_cfg.sentinel_offset)
    epoch_losses: list[float] = []
    losses: list[float] = []
    for step, batch in enumerate(stream, start=1):
        pairs = [make_pair(store.get(p.image_id), p.input_ids, p.target_ids, vocab) for p in batch]
        losses.append(train_step(model, optimizer, pairs, vocab.bos_id))
        logger.debug(f"pretrain step {step}: loss={losses[-1]:.4f}")
        if step % steps_per_epoch == 0:
            epoch_losses.append(float(np.mean(losses)))
            logger.info(
                f"pretrain[{objective}] epoch {len(epoch_losses)}/{train_cfg.epochs}:"
                f" loss={epoch_losses[-1]:.4f} lr={optimizer.current_lr:.2e}"
            )
            losses = []
    model.eval()
    return epoch_losses
