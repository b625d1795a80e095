"""Command line entry points.

    python -m fewvlm.main synth --output_dir=./data/synth
    python -m fewvlm.main pretrain --objective=masked
    python -m fewvlm.main finetune --template=P3 --n_train=16
    python -m fewvlm.main zeroshot --template=no-prompt
    python -m fewvlm.main eval --predictions=preds.jsonl --references=vqa_test.jsonl
    python -m fewvlm.main report --results_dir=./results
    python -m fewvlm.main reproduce --experiment=objectives

Every command prints one JSON document to stdout, logs go to stderr and the
log file. Settings come from configs/experiment.yaml, then the flags, then an
optional `--config` file.
"""

import json
import sys
from pathlib import Path
from typing import Callable

from fire import Fire

from fewvlm.config import (
    ExperimentConfig,
    load_experiment_config,
    load_model_config,
    load_objective_config,
    load_synth_config,
    load_train_config,
)
from fewvlm.data import FeatureStore, Vocab, read_corpus, read_dataset, read_jsonl, write_jsonl
from fewvlm.evaluation import match_predictions, score_predictions
from fewvlm.experiments import run_experiment
from fewvlm.fewshot import predict, run_protocol
from fewvlm.model import FewVLMModel, load_model
from fewvlm.prompts import PromptTemplate, load_catalog, noisy_prompt
from fewvlm.report import build_report
from fewvlm.synthdata import build_world, write_world
from fewvlm.trainer import pretrain
from fewvlm.utils.errors import ConfigError, FewVLMError
from fewvlm.utils.logging import configure_logging, logger

METRIC_TASKS = {"vqa_accuracy": "vqa", "cider": "caption", "classify_accuracy": "classify"}


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _require_files(cfg: ExperimentConfig, *keys: str) -> None:
    missing = {k: cfg.get(k) for k in keys if cfg.get(k) is None or not Path(cfg[k]).exists()}
    if missing:
        raise ConfigError(f"Referenced files do not exist: {missing}")


def _write_result(cfg: ExperimentConfig, name: str, payload: dict) -> None:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _resolve_template(template_id: str, vocab: Vocab) -> PromptTemplate:
    # noisy-token prompts are drawn from the vocabulary, the suffix is the seed
    if template_id.startswith("noisy-token-"):
        return noisy_prompt("noisy_tokens", int(template_id.rsplit("-", 1)[1]), vocab)
    return load_catalog().get(template_id)


def _checkpoint(cfg: ExperimentConfig) -> tuple[FewVLMModel, Vocab]:
    _require_files(cfg, "checkpoint")
    model, vocab, _ = load_model(cfg["checkpoint"])
    if vocab is None:
        raise ConfigError(f"Checkpoint {cfg['checkpoint']} carries no vocabulary")
    return model, vocab


def _run(command: str, body: Callable[[ExperimentConfig], dict], config: str | None,
         log_level: str | None, **flags) -> None:
    """Resolve the config, run `body` and print its result, or the error as JSON with exit code 1"""
    configure_logging(log_level)
    try:
        cfg = load_experiment_config(command, config_file=config, **flags)
        result = body(cfg)
    except (FewVLMError, OSError, ValueError, KeyError, TypeError) as err:
        if not isinstance(err, FewVLMError):
            logger.exception(f"{command} failed with an unexpected {type(err).__name__}")
        logger.error(f"{command} failed: {err}")
        _emit({"error": type(err).__name__, "message": str(err)})
        sys.exit(1)
    _emit({"command": command, "config": cfg.values, "config_hash": cfg.hash, "result": result})


# ----------------------------------------------------------------------------
#                      Commands
# ----------------------------------------------------------------------------
def _synth(cfg: ExperimentConfig) -> dict:
    synth_cfg = load_synth_config(**(cfg.get("synth") or {}))
    world = build_world(synth_cfg, seed=cfg["seed"])
    paths = write_world(world, cfg["output_dir"])
    return {"paths": paths, "n_images": len(world.features), "vocab_size": world.vocab.size}


def cmd_synth(output_dir: str | None = None, seed: int | None = None, config: str | None = None,
              log_level: str | None = None):
    """Generate the synthetic region world: features, task JSONL files, episodes, vocabulary"""
    _run("synth", _synth, config, log_level, output_dir=output_dir, seed=seed)


def _pretrain(cfg: ExperimentConfig) -> dict:
    _require_files(cfg, "corpus", "features_dir", "vocab")
    corpus = read_corpus(cfg["corpus"])
    vocab = Vocab.load(cfg["vocab"])
    store = FeatureStore(cfg["features_dir"])
    first = store.get(corpus[0][0]) if corpus else None
    dims = {"n_regions": first.n_regions, "feature_dim": first.dim} if first else {}
    model = FewVLMModel(load_model_config(cfg["model_profile"], vocab_size=vocab.size, **dims),
                        seed=cfg["seed"])
    train_cfg = load_train_config(cfg["train_profile"], seed=cfg["seed"],
                                  **(cfg.get("train") or {}))
    losses = pretrain(model, corpus, store, vocab, cfg["objective"], train_cfg,
                      load_objective_config(**(cfg.get("objectives") or {})))

    ckpt = Path(cfg["output_dir"]) / "model.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt, vocab, objective=cfg["objective"], config_hash=cfg.hash)
    result = {"checkpoint": str(ckpt), "epoch_losses": losses,
              "n_parameters": model.n_parameters()}
    _write_result(cfg, "pretrain.json", {"command": "pretrain", "config": cfg.values,
                                         "config_hash": cfg.hash, "result": result})
    return result


def cmd_pretrain(corpus: str | None = None, features_dir: str | None = None,
                 vocab: str | None = None, objective: str | None = None,
                 model_profile: str | None = None, train_profile: str | None = None,
                 output_dir: str | None = None, seed: int | None = None,
                 config: str | None = None, log_level: str | None = None):
    """Pre-train with MaskedLM (masked), PrefixLM (prefix) or a mix of both (both)"""
    _run("pretrain", _pretrain, config, log_level, corpus=corpus, features_dir=features_dir,
         vocab=vocab, objective=objective, model_profile=model_profile,
         train_profile=train_profile, output_dir=output_dir, seed=seed)


def _finetune(cfg: ExperimentConfig) -> dict:
    _require_files(cfg, "dataset", "test_dataset", "features_dir")
    model, vocab = _checkpoint(cfg)
    pool = read_dataset(cfg["dataset"], cfg["task"])
    test = read_dataset(cfg["test_dataset"], cfg["task"])
    train_cfg = load_train_config(cfg["train_profile"], seed=cfg["seed"],
                                  **(cfg.get("train") or {}))
    run = run_protocol(
        model, pool, test, _resolve_template(cfg["template"], vocab), train_cfg, cfg["metric"],
        vocab, FeatureStore(cfg["features_dir"]), n_splits=cfg["n_splits"],
        n_train=cfg["n_train"], n_dev=cfg["n_dev"], master_seed=cfg["seed"],
        threads=cfg["threads"],
    )
    result = run.to_dict()
    _write_result(cfg, "run.json", {"command": "finetune", "config": cfg.values,
                                    "config_hash": cfg.hash, "result": result})
    return result


def cmd_finetune(checkpoint: str | None = None, dataset: str | None = None,
                 test_dataset: str | None = None, features_dir: str | None = None,
                 task: str | None = None, template: str | None = None, metric: str | None = None,
                 train_profile: str | None = None, n_splits: int | None = None,
                 n_train: int | None = None, n_dev: int | None = None,
                 output_dir: str | None = None, threads: int | None = None,
                 seed: int | None = None, config: str | None = None, log_level: str | None = None):
    """
    Few-shot protocol: fine-tune a copy of the checkpoint on each of `n_splits`
    seeded train/dev splits, keep the best dev epoch and score the test set.
    """
    _run("finetune", _finetune, config, log_level, checkpoint=checkpoint, dataset=dataset,
         test_dataset=test_dataset, features_dir=features_dir, task=task, template=template,
         metric=metric, train_profile=train_profile, n_splits=n_splits, n_train=n_train,
         n_dev=n_dev, output_dir=output_dir, threads=threads, seed=seed)


def _zeroshot(cfg: ExperimentConfig) -> dict:
    _require_files(cfg, "test_dataset", "features_dir")
    model, vocab = _checkpoint(cfg)
    test = read_dataset(cfg["test_dataset"], cfg["task"])
    preds = predict(model, test, _resolve_template(cfg["template"], vocab), vocab,
                    FeatureStore(cfg["features_dir"]), cfg["max_gen_len"])
    report = score_predictions(cfg["metric"], preds, test)

    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / f"predictions_{cfg['template']}.jsonl",
                ({"image_id": ex.image_id, "prediction": p} for ex, p in zip(test, preds)))
    result = report.to_dict()
    _write_result(cfg, f"zeroshot_{cfg['template']}.json",
                  {"command": "zeroshot", "config": cfg.values, "config_hash": cfg.hash,
                   "result": result})
    return result


def cmd_zeroshot(checkpoint: str | None = None, test_dataset: str | None = None,
                 features_dir: str | None = None, task: str | None = None,
                 template: str | None = None, metric: str | None = None,
                 output_dir: str | None = None, max_gen_len: int | None = None,
                 config: str | None = None, log_level: str | None = None):
    """Score the checkpoint on the test set without any fine-tuning"""
    _run("zeroshot", _zeroshot, config, log_level, checkpoint=checkpoint,
         test_dataset=test_dataset, features_dir=features_dir, task=task, template=template,
         metric=metric, output_dir=output_dir, max_gen_len=max_gen_len)


def _eval(cfg: ExperimentConfig) -> dict:
    _require_files(cfg, "predictions", "references")
    task = cfg.get("task") or METRIC_TASKS.get(cfg["metric"])
    if task is None:
        raise ConfigError(f"Unknown metric {cfg['metric']!r}, expected one of {list(METRIC_TASKS)}")
    examples = read_dataset(cfg["references"], task)
    records = [rec for _, rec in read_jsonl(cfg["predictions"])]
    return score_predictions(cfg["metric"], match_predictions(records, examples), examples).to_dict()


def cmd_eval(predictions: str | None = None, references: str | None = None,
             metric: str | None = None, task: str | None = None, config: str | None = None,
             log_level: str | None = None):
    """Score a predictions JSONL ({"image_id", "prediction"} per line) against a dataset file"""
    _run("eval", _eval, config, log_level, predictions=predictions, references=references,
         metric=metric, task=task)


def _report(cfg: ExperimentConfig) -> dict:
    _require_files(cfg, "results_dir")
    return build_report(cfg["results_dir"], cfg.get("output_dir"))


def cmd_report(results_dir: str | None = None, output_dir: str | None = None,
               config: str | None = None, log_level: str | None = None):
    """Markdown/CSV tables and HTML figures from everything under `results_dir`"""
    _run("report", _report, config, log_level, results_dir=results_dir, output_dir=output_dir)


def _reproduce(cfg: ExperimentConfig) -> dict:
    result = run_experiment(cfg["experiment"], cfg["output_dir"], n_seeds=cfg["n_seeds"],
                            seed=cfg["seed"], threads=cfg["threads"],
                            **(cfg.get("kwargs") or {}))
    return {"summary": result["summary"], "trends": result["trends"],
            "file": str(Path(cfg["output_dir"]) / f"{cfg['experiment']}.json")}


def cmd_reproduce(experiment: str | None = None, output_dir: str | None = None,
                  n_seeds: int | None = None, threads: int | None = None,
                  seed: int | None = None, config: str | None = None,
                  log_level: str | None = None):
    """Run one directional experiment on freshly generated synthetic worlds, see experiments.EXPERIMENTS"""
    _run("reproduce", _reproduce, config, log_level, experiment=experiment,
         output_dir=output_dir, n_seeds=n_seeds, threads=threads, seed=seed)


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "zeroshot": cmd_zeroshot,
    "eval": cmd_eval,
    "report": cmd_report,
    "reproduce": cmd_reproduce,
}


if __name__ == "__main__":
    Fire(COMMANDS)
