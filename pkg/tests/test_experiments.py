"""Experiment plumbing on tiny worlds with the toy model, the trends themselves are in test_acceptance"""

import dataclasses
import json

import pytest

from fewvlm.experiments import (
    CAPTION_TEMPLATES,
    TARGET_TEMPLATES,
    _world,
    caption_prompt_trends,
    objective_study,
    pretrained,
    prompt_study,
    prompt_trends,
    run_experiment,
    target_prompt_trends,
    training_size_sweep,
)
from fewvlm.prompts import load_catalog
from fewvlm.utils.errors import ConfigError

SIZES = (0, 4)


@pytest.fixture
def study_kw(tiny_synth) -> dict:
    return dict(
        synth_overrides=dataclasses.asdict(tiny_synth),
        model_profile="toy",
        model_overrides={"max_text_len": 48},
        epochs=1,
        batch_size=16,
        fewshot_profile="toy_fewshot",
    )


@pytest.fixture
def toy_world(tmp_path, study_kw):
    world, store = _world(tmp_path, 0, study_kw["synth_overrides"])
    model = pretrained(world, store, "both", 0, model_profile="toy",
                       model_overrides=study_kw["model_overrides"], epochs=1, batch_size=16)
    return model, world, store


def test_caption_sweep_is_scored_with_cider(toy_world):
    model, world, store = toy_world
    catalog = load_catalog()
    out = training_size_sweep(model, world, store, [catalog.get("Q1"), catalog.get("Q2")],
                              sizes=SIZES, task="caption")
    assert set(out) == {"Q1", "Q2"}
    assert all(set(series) == set(SIZES) for series in out.values())
    assert all(v >= 0.0 for series in out.values() for v in series.values())


def test_unknown_sweep_task(toy_world):
    model, world, store = toy_world
    with pytest.raises(ConfigError):
        training_size_sweep(model, world, store, [load_catalog().get("P3")], SIZES, task="retrieval")


def test_prompt_study_noisy_kinds(tmp_path, study_kw):
    res = prompt_study(tmp_path, n_seeds=1, sizes=SIZES,
                       noisy_kinds=("noisy-token", "irrelevant", "random-sentence"), **study_kw)
    sweep = res["summary"]["sweep"]
    assert list(sweep) == ["P3", "noisy-token", "irrelevant", "random-sentence"]
    assert all(0.0 <= v <= 1.0 for series in sweep.values() for v in series.values())
    templates = res["per_seed"][0]["templates"]
    assert templates["irrelevant"]["id"].startswith("irrelevant-")
    assert templates["random-sentence"]["id"].startswith("random-sentence-")
    # the gap can only close once 64 examples were seen
    assert prompt_trends(res)["noisy_gap_closes"] is False


def test_prompt_study_rejects_unknown_kind(tmp_path, study_kw):
    with pytest.raises(ConfigError):
        prompt_study(tmp_path, n_seeds=1, sizes=SIZES, noisy_kinds=("gibberish",), **study_kw)


def test_objective_study_fewshot_columns(tmp_path, study_kw):
    res = run_experiment("objectives", tmp_path, n_seeds=1, fewshot_n=4, **study_kw)
    assert set(res["summary"]) == {"masked", "prefix", "both"}
    for scores in res["summary"].values():
        assert set(scores) == {"vqa_accuracy", "cider", "fewshot_vqa_accuracy", "fewshot_cider"}
    assert "fewshot_masked_beats_prefix_on_vqa" in res["trends"]
    assert "fewshot_prefix_beats_masked_on_captions" in res["trends"]
    assert res["cpu_seconds"] > 0
    assert json.loads((tmp_path / "objectives.json").read_text())["fewshot_n"] == 4


def test_objective_study_zero_shot_only(tmp_path, study_kw):
    res = objective_study(tmp_path, n_seeds=1, **study_kw)
    assert all(set(s) == {"vqa_accuracy", "cider"} for s in res["summary"].values())


@pytest.mark.parametrize(
    "name, templates, metric",
    [("caption_prompts", CAPTION_TEMPLATES, "cider"), ("target_prompts", TARGET_TEMPLATES, "vqa_accuracy")],
)
def test_template_studies(tmp_path, study_kw, name, templates, metric):
    res = run_experiment(name, tmp_path, n_seeds=1, sizes=SIZES, **study_kw)
    assert res["experiment"] == name and res["metric"] == metric
    assert list(res["summary"]) == list(templates)
    assert all(set(series) == set(SIZES) for series in res["summary"].values())
    assert all(isinstance(v, bool) for v in res["trends"].values())
    assert res["cpu_seconds"] > 0
    assert (tmp_path / f"{name}.json").exists()


def test_template_trends():
    caption = {"sizes": [0, 16], "summary": {
        "caption-no-prompt": {0: 0.1, 16: 1.0},
        "Q1": {0: 0.5, 16: 1.2}, "Q2": {0: 0.3, 16: 1.1},
    }}
    assert caption_prompt_trends(caption) == {"prompt_beats_no_prompt_zero_shot": True,
                                              "prompt_spread_shrinks": True}
    target = {"sizes": [0, 16], "summary": {
        "P1": {0: 0.3, 16: 0.5}, "P1-A": {0: 0.1, 16: 0.5},
    }}
    assert target_prompt_trends(target) == {"sentinel_target_helps_zero_shot": True}


def test_unknown_experiment(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment("ablations", tmp_path)
