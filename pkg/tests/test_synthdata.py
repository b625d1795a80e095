from collections import Counter

import numpy as np
import pytest

from fewvlm.data import FeatureStore, read_corpus, read_dataset
from fewvlm.synthdata import (
    SceneObject,
    SceneSpec,
    build_world,
    make_tasks,
    parse_caption,
    read_episodes,
    render_features,
    sample_scene,
    write_world,
)
from fewvlm.utils.errors import ConfigError, ParseError, TooManyObjects

SCENE = SceneSpec(
    (
        SceneObject("circle", "red", (0, 0)),
        SceneObject("square", "blue", (1, 2)),
        SceneObject("circle", "green", (2, 1)),
    ),
    seed=4,
)


def test_render_one_region_per_object(tiny_synth):
    regions = render_features(SCENE, tiny_synth)
    assert regions.features.shape == (tiny_synth.n_regions, tiny_synth.feature_dim)
    # unused slots stay zero
    assert not regions.features[3:].any() and not regions.boxes[3:].any()
    np.testing.assert_allclose(regions.boxes[1], [2 / 3, 1 / 3, 1.0, 2 / 3], rtol=1e-6)
    assert np.all(regions.boxes[:3, 2] > regions.boxes[:3, 0])


def test_render_is_deterministic_and_separates_attributes(tiny_synth):
    a, b = render_features(SCENE, tiny_synth), render_features(SCENE, tiny_synth)
    np.testing.assert_array_equal(a.features, b.features)
    # two circles share their shape component and differ in color
    same_shape = np.linalg.norm(a.features[0] - a.features[2])
    assert same_shape > 10 * tiny_synth.noise_sigma


def test_render_rejects_bad_scenes(tiny_synth):
    crowded = SceneSpec(tuple(SceneObject("star", "red", (i // 3, i % 3)) for i in range(5)), 0)
    with pytest.raises(TooManyObjects):
        render_features(crowded, tiny_synth)
    shared = SceneSpec((SceneObject("star", "red", (0, 0)), SceneObject("circle", "red", (0, 0))), 0)
    with pytest.raises(ConfigError):
        render_features(shared, tiny_synth)
    with pytest.raises(ConfigError):
        SceneSpec((), 0)


def test_make_tasks(tiny_synth):
    tasks = make_tasks(SCENE, tiny_synth)
    assert tasks.caption == "a red circle next to a blue square next to a green circle"
    qa = dict(tasks.qa)
    # the circle occurs twice, so no color question about it
    assert "what color is the circle?" not in qa
    assert qa["what color is the square?"] == "blue"
    assert qa["what shape is the green object?"] == "circle"
    assert qa["how many objects are there?"] == "three"
    assert tasks.label == "circle"


def test_dominant_shape_ties_go_to_inventory_order(tiny_synth):
    scene = SceneSpec((SceneObject("star", "red", (0, 0)), SceneObject("square", "red", (0, 1))), 0)
    assert make_tasks(scene, tiny_synth).label == "square"


def test_parse_caption():
    assert parse_caption("a red circle next to a red circle next to a blue star") == Counter(
        {("red", "circle"): 2, ("blue", "star"): 1}
    )
    with pytest.raises(ParseError) as err:
        parse_caption("a red circle next to big blue star")
    assert err.value.line == 2


def test_sampled_scenes_follow_config(tiny_synth):
    rng = np.random.default_rng(0)
    for _ in range(50):
        scene = sample_scene(rng, tiny_synth)
        assert tiny_synth.min_objects <= scene.n_objects <= tiny_synth.max_objects
        assert len({o.cell for o in scene.objects}) == scene.n_objects
        assert parse_caption(make_tasks(scene, tiny_synth).caption) == Counter(
            (o.color, o.shape) for o in scene.objects
        )


def test_world_is_a_function_of_config_and_seed(tiny_synth):
    a, b, c = build_world(tiny_synth, 1), build_world(tiny_synth, 1), build_world(tiny_synth, 2)
    assert a.corpus == b.corpus and a.datasets == b.datasets and a.vocab == b.vocab
    assert a.corpus != c.corpus
    for k in a.features:
        np.testing.assert_array_equal(a.features[k].features, b.features[k].features)


def test_world_contents(tiny_synth):
    world = build_world(tiny_synth, 0)
    assert len(world.corpus) == tiny_synth.n_pretrain
    assert len(world.datasets["vqa_pool"]) == tiny_synth.n_vqa_pool
    assert len(world.datasets["caption_test"]) == tiny_synth.n_caption_test
    assert set(world.episodes) == {1, 3, 5}
    ids = [i for i, _ in world.corpus] + [ex.image_id for d in world.datasets.values() for ex in d]
    assert len(ids) == len(set(ids)) and all(i in world.features for i in ids)
    for ex in world.datasets["classify_test"]:
        assert ex.candidate_labels == tiny_synth.shapes
    # every task word is in the vocabulary
    for text in world.texts():
        for w in text.lower().replace("?", " ").split():
            assert w in world.vocab.tokens


def test_write_world_roundtrip(tiny_synth, tmp_path):
    world = build_world(tiny_synth, 0)
    paths = write_world(world, tmp_path)
    assert read_corpus(paths["corpus"]) == world.corpus
    assert read_dataset(paths["vqa_test"], "vqa") == world.datasets["vqa_test"]
    assert read_dataset(paths["classify_test"], "classify") == world.datasets["classify_test"]
    assert read_episodes(paths["episodes_3shot"]) == world.episodes[3]

    store = FeatureStore(paths["features_dir"])
    image_id = world.corpus[0][0]
    np.testing.assert_array_equal(store.get(image_id).features, world.features[image_id].features)
