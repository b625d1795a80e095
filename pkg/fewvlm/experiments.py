"""Directional experiments on the synthetic world.

- objectives: pre-train masked-only, prefix-only and mixed models, compare
  zero-shot (and optionally few-shot) question answering and captioning
- prompts: zero-shot hand-crafted vs no prompt, then a training-size sweep
  of the hand-crafted prompt against noisy prompts
- caption_prompts: training-size sweep of the captioning prompts
- target_prompts: sentinel target prompts against plain answer targets
- episodes: 5-way category episodes with 1, 3 and 5 shots

Every function returns plain dicts ready for JSON. `run_experiment` adds the
CPU seconds spent, so the runtime budgets can be checked.
"""

import json
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from fewvlm.config import (
    ModelConfig,
    TrainConfig,
    load_model_config,
    load_objective_config,
    load_synth_config,
    load_train_config,
)
from fewvlm.data import FeatureStore
from fewvlm.fewshot import episode_protocol, evaluate, run_protocol
from fewvlm.model import FewVLMModel
from fewvlm.prompts import PromptCatalog, PromptTemplate, load_catalog, noisy_prompt
from fewvlm.synthdata import World, build_world, world_store
from fewvlm.trainer import pretrain
from fewvlm.utils.errors import ConfigError
from fewvlm.utils.logging import logger

OBJECTIVES = ("masked", "prefix", "both")
EXPERIMENTS = ("objectives", "prompts", "caption_prompts", "target_prompts", "episodes")

# pre-training sentinels start at <text_1>, like the literal in the catalog prompts
CATALOG_SENTINELS = {"sentinel_offset": 1}

# pool, test split and metric per task
SWEEP_TASKS = {
    "vqa": ("vqa_pool", "vqa_test", "vqa_accuracy"),
    "caption": ("caption_pool", "caption_test", "cider"),
}
# answers are a sentinel plus one word, captions at most three objects long
GEN_LEN = {"vqa_accuracy": 6, "cider": 16}

NOISY_KINDS = ("noisy-token", "irrelevant", "random-sentence")
CAPTION_TEMPLATES = ("caption-no-prompt", "Q1", "Q2", "Q3")
TARGET_TEMPLATES = ("P1", "P2", "P3", "P1-A", "P2-A", "P3-A")


def _model_config(profile: str, world: World, **overrides) -> ModelConfig:
    return load_model_config(
        profile,
        vocab_size=world.vocab.size,
        n_regions=world.cfg.n_regions,
        feature_dim=world.cfg.feature_dim,
        **overrides,
    )


def _world(output_dir: Path | str, seed: int, synth_overrides: dict | None = None,
           **build_kw) -> tuple[World, FeatureStore]:
    world = build_world(load_synth_config(**(synth_overrides or {})), seed=seed, **build_kw)
    return world, world_store(world, Path(output_dir) / f"world-{seed}")


def pretrained(world: World, store: FeatureStore, objective: str, seed: int,
               model_profile: str = "synth", train_profile: str = "desk_pretrain",
               objective_overrides: dict | None = None, model_overrides: dict | None = None,
               **train_overrides) -> FewVLMModel:
    model = FewVLMModel(_model_config(model_profile, world, **(model_overrides or {})), seed=seed)
    cfg = load_train_config(train_profile, seed=seed, **train_overrides)
    obj_cfg = load_objective_config(**{**CATALOG_SENTINELS, **(objective_overrides or {})})
    pretrain(model, world.corpus, store, world.vocab, objective, cfg, obj_cfg)
    return model


def zero_shot_scores(model: FewVLMModel, world: World, store: FeatureStore,
                     vqa_template: str = "P3", caption_template: str = "Q1") -> dict:
    catalog = load_catalog()
    vqa = evaluate(model, world.datasets["vqa_test"], catalog.get(vqa_template), world.vocab,
                   store, "vqa_accuracy", GEN_LEN["vqa_accuracy"])
    cap = evaluate(model, world.datasets["caption_test"], catalog.get(caption_template),
                   world.vocab, store, "cider", GEN_LEN["cider"])
    return {"vqa_accuracy": vqa.score, "cider": cap.score}


def few_shot_scores(model: FewVLMModel, world: World, store: FeatureStore, n_train: int,
                    cfg: TrainConfig, master_seed: int = 0, vqa_template: str = "P3",
                    caption_template: str = "Q1") -> dict:
    """Test scores after fine-tuning on one split of `n_train` examples per task"""
    catalog = load_catalog()
    out = {}
    for task, template_id in (("vqa", vqa_template), ("caption", caption_template)):
        pool, test, metric = SWEEP_TASKS[task]
        run = run_protocol(model, world.datasets[pool], world.datasets[test],
                           catalog.get(template_id), cfg, metric, world.vocab, store,
                           n_splits=1, n_train=n_train, n_dev=n_train, master_seed=master_seed)
        out[f"fewshot_{metric}"] = run.mean
    return out


def objective_study(output_dir: Path | str, n_seeds: int = 3, seed: int = 0,
                    synth_overrides: dict | None = None, fewshot_n: int = 0,
                    fewshot_profile: str = "desk_fewshot", **pretrain_kw) -> dict:
    """
    Scores of masked-only, prefix-only and mixed pre-training, averaged over
    `n_seeds` worlds and model seeds.

    Zero-shot scores are always computed; `fewshot_n` > 0 adds the test scores
    after fine-tuning on `fewshot_n` examples per task.
    """
    per_seed = {obj: [] for obj in OBJECTIVES}
    for i in range(n_seeds):
        world, store = _world(output_dir, seed + i, synth_overrides)
        for obj in OBJECTIVES:
            model = pretrained(world, store, obj, seed + i, **pretrain_kw)
            scores = zero_shot_scores(model, world, store)
            if fewshot_n:
                cfg = load_train_config(fewshot_profile, seed=seed + i,
                                        max_gen_len=max(GEN_LEN.values()))
                scores.update(few_shot_scores(model, world, store, fewshot_n, cfg, seed + i))
            logger.info(f"objectives seed={seed + i} {obj}: {scores}")
            per_seed[obj].append(scores)
    summary = {
        obj: {k: float(np.mean([s[k] for s in runs])) for k in runs[0]}
        for obj, runs in per_seed.items()
    }
    return {"experiment": "objectives", "n_seeds": n_seeds, "fewshot_n": fewshot_n,
            "per_seed": per_seed, "summary": summary}


def objective_trends(result: dict) -> dict:
    """The directional claims of the objective study, as booleans"""
    s = result["summary"]
    trends = {
        "masked_beats_prefix_on_vqa": s["masked"]["vqa_accuracy"] > s["prefix"]["vqa_accuracy"],
        "prefix_beats_masked_on_captions": s["prefix"]["cider"] > s["masked"]["cider"],
        "mixed_not_below_specialists": all(
            s["both"][k] >= min(s["masked"][k], s["prefix"][k]) for k in ("vqa_accuracy", "cider")
        ),
    }
    if "fewshot_vqa_accuracy" in s["masked"]:
        trends["fewshot_masked_beats_prefix_on_vqa"] = (
            s["masked"]["fewshot_vqa_accuracy"] > s["prefix"]["fewshot_vqa_accuracy"]
        )
        trends["fewshot_prefix_beats_masked_on_captions"] = (
            s["prefix"]["fewshot_cider"] > s["masked"]["fewshot_cider"]
        )
    return trends


def training_size_sweep(
    model: FewVLMModel,
    world: World,
    store: FeatureStore,
    templates: Sequence[PromptTemplate],
    sizes: Sequence[int] = (0, 16, 32, 64),
    cfg: TrainConfig | None = None,
    n_splits: int = 1,
    master_seed: int = 0,
    threads: int = 1,
    task: str = "vqa",
) -> dict:
    """
    Test scores per template and training size, dev sets as large as the
    training sets.

    Parameters
    ----------
    task : str
        "vqa" (scored with vqa_accuracy) or "caption" (scored with cider).

    Returns
    -------
    dict
        template id -> {n_train: mean test score}
    """
    if task not in SWEEP_TASKS:
        raise ConfigError(f"Unknown sweep task {task=}, expected one of {list(SWEEP_TASKS)}")
    pool, test, metric = SWEEP_TASKS[task]
    cfg = cfg or load_train_config("desk_fewshot", max_gen_len=GEN_LEN[metric])
    out: dict = {}
    for template in templates:
        out[template.id] = {}
        for n in sizes:
            run = run_protocol(
                model, world.datasets[pool], world.datasets[test], template, cfg, metric,
                world.vocab, store, n_splits=n_splits, n_train=n, n_dev=n,
                master_seed=master_seed, threads=threads,
            )
            out[template.id][n] = run.mean
            logger.info(f"sweep {template.id} n_train={n}: {metric}={run.mean:.4f}")
    return out


def _noisy_template(kind: str, seed: int, world: World, catalog: PromptCatalog) -> PromptTemplate:
    if kind == "noisy-token":
        return noisy_prompt("noisy_tokens", seed, world.vocab, catalog)
    pool = catalog.irrelevant if kind == "irrelevant" else catalog.random_sentence
    return noisy_prompt(kind.replace("-", "_"), seed % len(pool), catalog=catalog)


def prompt_study(output_dir: Path | str, n_seeds: int = 3, seed: int = 0,
                 sizes: Sequence[int] = (0, 16, 32, 64), threads: int = 1,
                 synth_overrides: dict | None = None, fewshot_profile: str = "desk_fewshot",
                 noisy_kinds: Sequence[str] = ("noisy-token",), **pretrain_kw) -> dict:
    """
    Zero-shot hand-crafted vs no prompt, then the training-size sweep of the
    hand-crafted prompt against each kind in `noisy_kinds`.

    Noisy kinds are "noisy-token" (random vocabulary words), "irrelevant" and
    "random-sentence" (fixed lists, the entry is picked by the seed).
    """
    unknown = set(noisy_kinds) - set(NOISY_KINDS)
    if unknown:
        raise ConfigError(f"Unknown noisy prompt kinds {sorted(unknown)}, expected {NOISY_KINDS}")
    catalog = load_catalog()
    series = ("P3", *noisy_kinds)
    runs = []
    for i in range(n_seeds):
        world, store = _world(output_dir, seed + i, synth_overrides)
        model = pretrained(world, store, "both", seed + i, **pretrain_kw)
        zs = {
            t: evaluate(model, world.datasets["vqa_test"], catalog.get(t), world.vocab, store,
                        "vqa_accuracy", GEN_LEN["vqa_accuracy"]).score
            for t in ("P3", "no-prompt")
        }
        templates = [catalog.get("P3")] + [_noisy_template(k, seed + i, world, catalog)
                                           for k in noisy_kinds]
        cfg = load_train_config(fewshot_profile, seed=seed + i, max_gen_len=GEN_LEN["vqa_accuracy"])
        sweep = training_size_sweep(model, world, store, templates, sizes, cfg,
                                    master_seed=seed + i, threads=threads)
        # noisy template ids carry their seed, align them by kind for averaging
        sweep = {name: sweep[t.id] for name, t in zip(series, templates)}
        runs.append({"zero_shot": zs, "sweep": sweep,
                     "templates": {name: t.to_dict() for name, t in zip(series, templates)}})

    summary = {
        "zero_shot": {t: float(np.mean([r["zero_shot"][t] for r in runs])) for t in ("P3", "no-prompt")},
        "sweep": {
            t: {n: float(np.mean([r["sweep"][t][n] for r in runs])) for n in sizes}
            for t in series
        },
    }
    return {"experiment": "prompts", "n_seeds": n_seeds, "sizes": list(sizes), "per_seed": runs,
            "summary": summary}


def prompt_trends(result: dict, margin: float = 0.05) -> dict:
    s = result["summary"]
    largest = max(result["sizes"])
    noisy = [t for t in s["sweep"] if t != "P3"]
    return {
        "prompt_beats_no_prompt_zero_shot": s["zero_shot"]["P3"] - s["zero_shot"]["no-prompt"] >= margin,
        "noisy_gap_closes": largest >= 64 and all(
            abs(s["sweep"]["P3"][largest] - s["sweep"][t][largest]) <= margin for t in noisy
        ),
    }


def template_study(name: str, output_dir: Path | str, template_ids: Sequence[str],
                   task: str = "vqa", n_seeds: int = 3, seed: int = 0,
                   sizes: Sequence[int] = (0, 16, 32), threads: int = 1,
                   synth_overrides: dict | None = None, fewshot_profile: str = "desk_fewshot",
                   **pretrain_kw) -> dict:
    """Training-size sweep of catalog templates on one task, averaged over seeds"""
    if task not in SWEEP_TASKS:
        raise ConfigError(f"Unknown sweep task {task=}, expected one of {list(SWEEP_TASKS)}")
    catalog = load_catalog()
    templates = [catalog.get(t) for t in template_ids]
    metric = SWEEP_TASKS[task][2]
    runs = []
    for i in range(n_seeds):
        world, store = _world(output_dir, seed + i, synth_overrides)
        model = pretrained(world, store, "both", seed + i, **pretrain_kw)
        cfg = load_train_config(fewshot_profile, seed=seed + i, max_gen_len=GEN_LEN[metric])
        runs.append(training_size_sweep(model, world, store, templates, sizes, cfg,
                                        master_seed=seed + i, threads=threads, task=task))
    summary = {t: {n: float(np.mean([r[t][n] for r in runs])) for n in sizes} for t in template_ids}
    return {"experiment": name, "task": task, "metric": metric, "n_seeds": n_seeds,
            "sizes": list(sizes), "templates": list(template_ids), "per_seed": runs,
            "summary": summary}


def caption_prompt_trends(result: dict) -> dict:
    """Prompts help zero-shot captioning, and the choice among them matters less with data"""
    s, sizes = result["summary"], result["sizes"]
    lo, hi = min(sizes), max(sizes)
    prompted = [t for t in s if t != "caption-no-prompt"]

    def spread(n):
        return max(s[t][n] for t in prompted) - min(s[t][n] for t in prompted)

    return {
        "prompt_beats_no_prompt_zero_shot": min(s[t][lo] for t in prompted) > s["caption-no-prompt"][lo],
        "prompt_spread_shrinks": spread(hi) <= spread(lo),
    }


def target_prompt_trends(result: dict) -> dict:
    """Sentinel targets beat plain answer targets when data is scarce"""
    s, lo = result["summary"], min(result["sizes"])
    sentinel = [t for t in s if not t.endswith("-A")]
    plain = [t for t in s if t.endswith("-A")]
    return {
        "sentinel_target_helps_zero_shot": float(np.mean([s[t][lo] for t in sentinel]))
        > float(np.mean([s[t][lo] for t in plain])),
    }


def episode_shots(output_dir: Path | str, n_seeds: int = 3, seed: int = 0,
                  shots: Sequence[int] = (1, 3, 5), synth_overrides: dict | None = None,
                  fewshot_profile: str = "desk_fewshot", **pretrain_kw) -> dict:
    """Mean query accuracy of 5-way category episodes per number of shots"""
    catalog = load_catalog()
    per_seed = {k: [] for k in shots}
    for i in range(n_seeds):
        world, store = _world(output_dir, seed + i, synth_overrides, shots=tuple(shots))
        model = pretrained(world, store, "both", seed + i, **pretrain_kw)
        cfg = load_train_config(fewshot_profile, seed=seed + i, max_gen_len=5)
        for k in shots:
            res = episode_protocol(model, world.episodes[k], catalog.get("classify"), cfg,
                                   world.vocab, store, n_way=world.cfg.n_way)
            per_seed[k].append(res.mean)
    summary = {k: float(np.mean(v)) for k, v in per_seed.items()}
    return {"experiment": "episodes", "n_seeds": n_seeds, "per_seed": per_seed, "summary": summary}


def episode_trends(result: dict, chance: float = 0.2) -> dict:
    s = result["summary"]
    lo, hi = min(s), max(s)
    return {
        "more_shots_help": s[hi] > s[lo],
        "above_chance": s[lo] > chance and s[hi] > chance,
    }


def run_experiment(name: str, output_dir: Path | str, n_seeds: int = 3, seed: int = 0,
                   threads: int = 1, **kwargs) -> dict:
    """
    Run one of `EXPERIMENTS`, write `<output_dir>/<name>.json` and return the
    result, including its trends and the CPU seconds it took.
    """
    output_dir = Path(output_dir)
    start = time.process_time()
    if name == "objectives":
        result = objective_study(output_dir, n_seeds, seed, **kwargs)
        result["trends"] = objective_trends(result)
    elif name == "prompts":
        result = prompt_study(output_dir, n_seeds, seed, threads=threads, **kwargs)
        result["trends"] = prompt_trends(result)
    elif name == "caption_prompts":
        kwargs.setdefault("template_ids", CAPTION_TEMPLATES)
        result = template_study(name, output_dir, task="caption", n_seeds=n_seeds, seed=seed,
                                threads=threads, **kwargs)
        result["trends"] = caption_prompt_trends(result)
    elif name == "target_prompts":
        kwargs.setdefault("template_ids", TARGET_TEMPLATES)
        result = template_study(name, output_dir, task="vqa", n_seeds=n_seeds, seed=seed,
                                threads=threads, **kwargs)
        result["trends"] = target_prompt_trends(result)
    elif name == "episodes":
        result = episode_shots(output_dir, n_seeds, seed, **kwargs)
        result["trends"] = episode_trends(result)
    else:
        raise ConfigError(f"Unknown experiment {name!r}, expected one of {EXPERIMENTS}")
    result["cpu_seconds"] = time.process_time() - start

    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / f"{name}.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    logger.info(f"{name} took {result['cpu_seconds']:.0f} CPU seconds, trends: {result['trends']}")
    return result
