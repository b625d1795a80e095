"""Zero- and few-shot protocol: seeded splits, fine-tuning with best-dev
selection, multi-split aggregation and k-shot episodes."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from fewvlm.config import TrainConfig
from fewvlm.data import FeatureStore, VLExample, Vocab, detokenize, tokenize
from fewvlm.evaluation import MetricReport, classify_report, score_predictions
from fewvlm.model import FewVLMModel
from fewvlm.nncore.optim import Adam
from fewvlm.prompts import PromptTemplate, apply_prompt, extract_label
from fewvlm.trainer import TrainingPair, make_text_pair, train_step
from fewvlm.utils.errors import DatasetTooSmall, MalformedEpisode
from fewvlm.utils.logging import logger


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    n_train: int
    n_dev: int
    train_ids: tuple
    dev_ids: tuple


def sample_splits(dataset_size: int, n_splits: int = 5, n_train: int = 16, n_dev: int = 16,
                  master_seed: int = 0) -> list[SplitSpec]:
    """
    Draw `n_splits` disjoint train/dev index sets without replacement.

    Split i uses the seed master_seed + i.
    """
    if dataset_size < n_train + n_dev:
        raise DatasetTooSmall(
            f"Need {n_train} + {n_dev} examples per split, the dataset has {dataset_size}"
        )
    splits = []
    for i in range(n_splits):
        seed = master_seed + i
        perm = np.random.default_rng(seed).permutation(dataset_size)
        splits.append(SplitSpec(
            seed, n_train, n_dev,
            tuple(int(j) for j in perm[:n_train]),
            tuple(int(j) for j in perm[n_train : n_train + n_dev]),
        ))
    return splits


# ----------------------------------------------------------------------------
#                      Prompted examples
# ----------------------------------------------------------------------------
def prompted_pairs(examples: Sequence[VLExample], template: PromptTemplate, vocab: Vocab,
                   store: FeatureStore) -> list[TrainingPair]:
    pairs = []
    for ex in examples:
        inp, tgt = apply_prompt(template, ex)
        pairs.append(make_text_pair(store.get(ex.image_id), inp, tgt, vocab))
    return pairs


def predict(model: FewVLMModel, examples: Sequence[VLExample], template: PromptTemplate,
            vocab: Vocab, store: FeatureStore, max_len: int = 20, batch_size: int = 32,
            ) -> list[str]:
    """Greedy generations with the target template removed"""
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        inputs = [tokenize(apply_prompt(template, ex)[0], vocab) for ex in chunk]
        outs = model.generate_batch([store.get(ex.image_id) for ex in chunk], inputs, max_len,
                                    vocab.bos_id, vocab.eos_id)
        preds += [extract_label(detokenize(o, vocab), template) for o in outs]
    return preds


def evaluate(model: FewVLMModel, examples: Sequence[VLExample], template: PromptTemplate,
             vocab: Vocab, store: FeatureStore, metric: str, max_len: int = 20) -> MetricReport:
    was_training = model.training
    model.eval()
    try:
        preds = predict(model, examples, template, vocab, store, max_len)
        return score_predictions(metric, preds, examples)
    finally:
        model.train(was_training)


# ----------------------------------------------------------------------------
#                      Fine-tuning
# ----------------------------------------------------------------------------
@dataclass
class FinetuneResult:
    """
    Attributes
    ----------
    best_epoch : int
        Epoch of the kept weights, the last epoch without dev examples.
    best_metric : float
        Dev metric of the kept weights.
    trace : list[tuple[int, float]]
        (epoch, dev metric) at every evaluation.
    losses : list[float]
        Mean training loss per epoch.
    """

    best_epoch: int = 0
    best_metric: float = 0.0
    trace: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def finetune(
    model: FewVLMModel,
    train_examples: Sequence[VLExample],
    dev_examples: Sequence[VLExample],
    template: PromptTemplate,
    cfg: TrainConfig,
    metric: str,
    vocab: Vocab,
    store: FeatureStore,
) -> FinetuneResult:
    """
    Fine-tune `model` in place on prompted training examples.

    The dev metric is computed every `cfg.eval_stride` epochs and after the
    last one; the model ends up with the weights of the best evaluation, the
    earliest one on ties. Without dev examples the final weights are kept.

    Returns
    -------
    FinetuneResult
    """
    pairs = prompted_pairs(train_examples, template, vocab, store)
    result = FinetuneResult()
    if not pairs:
        return result

    batch_size = min(len(pairs), cfg.batch_size)
    steps_per_epoch = math.ceil(len(pairs) / batch_size)
    optimizer = Adam(model.named_parameters(), cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup)
    rng = np.random.default_rng(cfg.seed)
    model.seed_dropout(cfg.seed)
    model.train()

    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pairs))
        losses = [
            train_step(model, optimizer, [pairs[i] for i in order[s : s + batch_size]], vocab.bos_id)
            for s in range(0, len(pairs), batch_size)
        ]
        result.losses.append(float(np.mean(losses)))

        if dev_examples and (epoch % cfg.eval_stride == 0 or epoch == cfg.epochs):
            dev = evaluate(model, dev_examples, template, vocab, store, metric, cfg.max_gen_len)
            result.trace.append((epoch, dev.score))
            if best_state is None or dev.score > result.best_metric:
                best_state = model.state_dict()
                result.best_epoch, result.best_metric = epoch, dev.score
            logger.info(
                f"finetune[{template.id}] epoch {epoch}/{cfg.epochs}: loss={result.losses[-1]:.4f}"
                f" dev {metric}={dev.score:.4f}"
            )
        else:
            logger.debug(f"finetune[{template.id}] epoch {epoch}: loss={result.losses[-1]:.4f}")

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = cfg.epochs
    model.eval()
    return result


# ----------------------------------------------------------------------------
#                      Protocol
# ----------------------------------------------------------------------------
@dataclass
class RunResult:
    metric: str
    template: str
    n_train: int
    n_dev: int
    per_split: list = field(default_factory=list)
    best_epochs: list = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0

    @property
    def zero_shot(self) -> bool:
        return self.n_train == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "zero_shot": self.zero_shot}


def _aggregate(result: RunResult) -> RunResult:
    result.mean = float(np.mean(result.per_split))
    result.std = float(np.std(result.per_split))
    return result


def run_protocol(
    model: FewVLMModel,
    pool: Sequence[VLExample],
    test: Sequence[VLExample],
    template: PromptTemplate,
    cfg: TrainConfig,
    metric: str,
    vocab: Vocab,
    store: FeatureStore,
    n_splits: int = 5,
    n_train: int = 16,
    n_dev: int = 16,
    master_seed: int = 0,
    threads: int = 1,
) -> RunResult:
    """
    Fine-tune a copy of `model` per sampled split and score it on `test`.

    With n_train == 0 the model is scored as is (zero-shot), epochs and
    learning rate are not used. Splits run on up to `threads` worker threads.

    Returns
    -------
    RunResult
        Per-split test metrics with their mean and (population) std.
    """
    result = RunResult(metric, template.id, n_train, n_dev)
    if n_train == 0:
        report = evaluate(model, test, template, vocab, store, metric, cfg.max_gen_len)
        result.per_split, result.best_epochs = [report.score], [0]
        logger.info(f"zero-shot[{template.id}] {metric}={report.score:.4f}")
        return _aggregate(result)

    splits = sample_splits(len(pool), n_splits, n_train, n_dev, master_seed)
    # clones are made up front, worker threads never touch the shared weights
    jobs = [(split, model.clone()) for split in splits]

    def run_split(job) -> tuple[float, int]:
        split, clone = job
        ft = finetune(
            clone,
            [pool[i] for i in split.train_ids],
            [pool[i] for i in split.dev_ids],
            template, replace(cfg, seed=split.seed), metric, vocab, store,
        )
        test_score = evaluate(clone, test, template, vocab, store, metric, cfg.max_gen_len).score
        logger.info(
            f"split seed={split.seed}: best epoch {ft.best_epoch}, dev={ft.best_metric:.4f},"
            f" test {metric}={test_score:.4f}"
        )
        return test_score, ft.best_epoch

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool_exec:
        outcomes = list(pool_exec.map(run_split, jobs))
    result.per_split = [s for s, _ in outcomes]
    result.best_epochs = [e for _, e in outcomes]
    return _aggregate(result)


# ----------------------------------------------------------------------------
#                      Episodes
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class Episode:
    classes: tuple
    support: tuple
    query: tuple

    @property
    def shots(self) -> int:
        return len(self.support) // max(1, len(self.classes))


def check_episode(episode: Episode, n_way: int = 5) -> None:
    if len(set(episode.classes)) != len(episode.classes):
        raise MalformedEpisode(f"Episode repeats classes: {list(episode.classes)}")
    if len(episode.classes) != n_way:
        raise MalformedEpisode(f"Episode has {len(episode.classes)} classes, expected {n_way}")
    per_class = {c: 0 for c in episode.classes}
    for ex in (*episode.support, *episode.query):
        if ex.label not in per_class:
            raise MalformedEpisode(f"Example label {ex.label!r} is not an episode class")
    for ex in episode.support:
        per_class[ex.label] += 1
    if len(set(per_class.values())) != 1 or 0 in per_class.values():
        raise MalformedEpisode(f"Support shots per class differ: {per_class}")
    if not episode.query:
        raise MalformedEpisode("Episode has no query examples")


@dataclass
class EpisodeResult:
    shots: int
    accuracies: list = field(default_factory=list)
    mean: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def episode_protocol(
    model: FewVLMModel,
    episodes: Sequence[Episode],
    template: PromptTemplate,
    cfg: TrainConfig,
    vocab: Vocab,
    store: FeatureStore,
    n_way: int = 5,
) -> EpisodeResult:
    """
    Fine-tune a fresh copy of `model` on each episode's support set and
    score its queries by exact match of the generated class name.
    """
    for ep in episodes:
        check_episode(ep, n_way)
    result = EpisodeResult(shots=episodes[0].shots if episodes else 0)
    for i, ep in enumerate(episodes):
        clone = model.clone()
        finetune(clone, list(ep.support), [], template, replace(cfg, seed=cfg.seed + i),
                 "classify_accuracy", vocab, store)
        preds = predict(clone, list(ep.query), template, vocab, store, cfg.max_gen_len)
        acc = classify_report(preds, [ex.label for ex in ep.query]).score
        result.accuracies.append(acc)
        logger.info(f"episode {i + 1}/{len(episodes)} ({ep.shots}-shot): accuracy={acc:.3f}")
    result.mean = float(np.mean(result.accuracies)) if result.accuracies else 0.0
    return result
