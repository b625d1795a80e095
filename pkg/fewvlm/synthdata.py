"""Synthetic region world.

Scenes hold a few colored shapes on a grid. Each object becomes one region
whose feature vector is a fixed random projection of its one-hot attributes
plus small noise, so every task answer is known exactly. The generator writes
the same JSONL and feature files as real data would use.
"""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fewvlm.config import SynthConfig
from fewvlm.data import (
    CaptionExample,
    ClassifyExample,
    FeatureStore,
    RegionFeatures,
    VQAExample,
    Vocab,
    example_from_record,
    read_jsonl,
    write_dataset,
    write_jsonl,
)
from fewvlm.fewshot import Episode
from fewvlm.prompts import load_catalog
from fewvlm.utils.errors import ConfigError, ParseError, TooManyObjects
from fewvlm.utils.logging import logger

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
JOINER = " next to "


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple  # (row, col)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    seed: int

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ConfigError("A scene needs at least one object")

    @property
    def n_objects(self) -> int:
        return len(self.objects)


def sample_scene(rng: np.random.Generator, cfg: SynthConfig, n_objects: int | None = None
                 ) -> SceneSpec:
    n = n_objects or int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = np.sort(rng.choice(cfg.grid_size**2, size=n, replace=False))
    objects = tuple(
        SceneObject(
            cfg.shapes[rng.integers(len(cfg.shapes))],
            cfg.colors[rng.integers(len(cfg.colors))],
            divmod(int(c), cfg.grid_size),
        )
        for c in cells
    )
    return SceneSpec(objects, int(rng.integers(2**31)))


def projection(cfg: SynthConfig) -> np.ndarray:
    """Fixed map from the (shape, color) one-hot to feature space"""
    rng = np.random.default_rng(cfg.projection_seed)
    return rng.normal(0.0, 1.0, size=(len(cfg.shapes) + len(cfg.colors), cfg.feature_dim))


def render_features(scene: SceneSpec, cfg: SynthConfig) -> RegionFeatures:
    """
    One region per object, unused slots stay zero with zero boxes.

    Noise is Gaussian with `cfg.noise_sigma`, clipped to three sigma, and seeded
    by the scene so rendering is deterministic.
    """
    if scene.n_objects > cfg.n_regions:
        raise TooManyObjects(f"{scene.n_objects} objects exceed {cfg.n_regions} region slots")
    if len({o.cell for o in scene.objects}) != scene.n_objects:
        raise ConfigError("Two objects share a grid cell")

    proj = projection(cfg)
    rng = np.random.default_rng(scene.seed)
    feats = np.zeros((cfg.n_regions, cfg.feature_dim))
    boxes = np.zeros((cfg.n_regions, 4))
    g = cfg.grid_size
    bound = 3 * cfg.noise_sigma
    for i, obj in enumerate(scene.objects):
        onehot = np.zeros(len(cfg.shapes) + len(cfg.colors))
        onehot[cfg.shapes.index(obj.shape)] = 1.0
        onehot[len(cfg.shapes) + cfg.colors.index(obj.color)] = 1.0
        noise = np.clip(rng.normal(0.0, cfg.noise_sigma, cfg.feature_dim), -bound, bound)
        feats[i] = onehot @ proj + noise
        r, c = obj.cell
        boxes[i] = (c / g, r / g, (c + 1) / g, (r + 1) / g)
    return RegionFeatures(feats, boxes)


# ----------------------------------------------------------------------------
#                      Task text
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class SceneTasks:
    caption: str
    qa: tuple
    label: str


def make_tasks(scene: SceneSpec, cfg: SynthConfig | None = None) -> SceneTasks:
    """
    Caption, unambiguous question/answer pairs and the dominant shape.

    A color question is asked only for a shape that occurs once, a shape
    question only for a color that occurs once. The dominant shape is the most
    frequent one, ties go to the earlier shape of the inventory.
    """
    cfg = cfg or SynthConfig()
    caption = JOINER.join(f"a {o.color} {o.shape}" for o in scene.objects)
    shapes = Counter(o.shape for o in scene.objects)
    colors = Counter(o.color for o in scene.objects)

    qa = []
    for shape in cfg.shapes:
        if shapes[shape] == 1:
            color = next(o.color for o in scene.objects if o.shape == shape)
            qa.append((f"what color is the {shape}?", color))
    for color in cfg.colors:
        if colors[color] == 1:
            shape = next(o.shape for o in scene.objects if o.color == color)
            qa.append((f"what shape is the {color} object?", shape))
    qa.append(("how many objects are there?", NUMBER_WORDS[scene.n_objects]))

    top = max(shapes.values())
    label = next(s for s in cfg.shapes if shapes[s] == top)
    return SceneTasks(caption, tuple(qa), label)


def parse_caption(caption: str) -> Counter:
    """Multiset of (color, shape) named by a generated caption"""
    out = Counter()
    for i, phrase in enumerate(caption.split(JOINER.strip())):
        words = phrase.split()
        if len(words) != 3 or words[0] != "a":
            raise ParseError(f"cannot read object phrase {phrase.strip()!r}", i + 1)
        out[(words[1], words[2])] += 1
    return out


# ----------------------------------------------------------------------------
#                      World
# ----------------------------------------------------------------------------
@dataclass
class World:
    """Everything the generator emits, kept in memory"""

    cfg: SynthConfig
    seed: int
    features: dict = field(default_factory=dict)
    corpus: list = field(default_factory=list)
    datasets: dict = field(default_factory=dict)
    episodes: dict = field(default_factory=dict)
    vocab: Vocab | None = None

    def texts(self) -> list[str]:
        out = [c for _, c in self.corpus]
        for examples in self.datasets.values():
            for ex in examples:
                out += ex.references + ([ex.question] if ex.question else [])
        out += [" ".join(self.cfg.colors + self.cfg.shapes), " ".join(NUMBER_WORDS)]
        return out


def _scenes(rng, cfg, prefix: str, n: int) -> list[tuple[str, SceneSpec]]:
    return [(f"{prefix}-{i:05d}", sample_scene(rng, cfg)) for i in range(n)]


def _vqa(image_id: str, tasks: SceneTasks, rng) -> VQAExample:
    q, a = tasks.qa[int(rng.integers(len(tasks.qa)))]
    return VQAExample(image_id, q, (a,))


def build_world(cfg: SynthConfig, seed: int = 0, shots: tuple = (1, 3, 5)) -> World:
    """
    Generate the pre-training corpus, the task datasets and the episodes.

    A pure function of (cfg, seed).
    """
    rng = np.random.default_rng(seed)
    world = World(cfg, seed)

    def add(image_id: str, scene: SceneSpec) -> SceneTasks:
        world.features[image_id] = render_features(scene, cfg)
        return make_tasks(scene, cfg)

    for image_id, scene in _scenes(rng, cfg, "pre", cfg.n_pretrain):
        world.corpus.append((image_id, add(image_id, scene).caption))

    for split, n in (("vqa_pool", cfg.n_vqa_pool), ("vqa_test", cfg.n_vqa_test)):
        world.datasets[split] = [
            _vqa(image_id, add(image_id, scene), rng) for image_id, scene in _scenes(rng, cfg, split, n)
        ]
    for split, n in (("caption_pool", cfg.n_caption_pool), ("caption_test", cfg.n_caption_test)):
        world.datasets[split] = [
            CaptionExample(image_id, (add(image_id, scene).caption,))
            for image_id, scene in _scenes(rng, cfg, split, n)
        ]
    world.datasets["classify_test"] = [
        ClassifyExample(image_id, add(image_id, scene).label, cfg.shapes)
        for image_id, scene in _scenes(rng, cfg, "classify_test", cfg.n_vqa_test)
    ]

    categories = [f"{c} {s}" for s in cfg.shapes for c in cfg.colors]
    for k in shots:
        world.episodes[k] = [
            _episode(rng, cfg, categories, k, f"ep{k}-{e:03d}", add) for e in range(cfg.n_episodes)
        ]

    world.vocab = Vocab.build(world.texts() + load_catalog().texts())
    logger.info(
        f"Built synthetic world {seed=}: {len(world.features)} images,"
        f" {len(world.corpus)} corpus captions, vocab {world.vocab.size}"
    )
    return world


def _episode(rng, cfg: SynthConfig, categories: list[str], k: int, prefix: str, add) -> Episode:
    classes = tuple(categories[i] for i in rng.choice(len(categories), size=cfg.n_way, replace=False))

    def one(image_id: str, cls: str) -> ClassifyExample:
        color, shape = cls.split()
        cell = divmod(int(rng.integers(cfg.grid_size**2)), cfg.grid_size)
        scene = SceneSpec((SceneObject(shape, color, cell),), int(rng.integers(2**31)))
        add(image_id, scene)
        return ClassifyExample(image_id, cls, classes)

    support = tuple(one(f"{prefix}-s{c}-{j}", cls) for c, cls in enumerate(classes) for j in range(k))
    query = tuple(
        one(f"{prefix}-q{c}-{j}", cls) for c, cls in enumerate(classes) for j in range(cfg.n_query)
    )
    return Episode(classes, support, query)


def episode_record(ep: Episode) -> dict:
    return {
        "classes": list(ep.classes),
        "support": [ex.to_record() for ex in ep.support],
        "query": [ex.to_record() for ex in ep.query],
    }


def read_episodes(path: Path | str) -> list[Episode]:
    episodes = []
    for lineno, rec in read_jsonl(path):
        missing = [k for k in ("classes", "support", "query") if k not in rec]
        if missing:
            raise ParseError(f"{path}: episode lacks {missing}", lineno)
        support, query = (tuple(example_from_record("classify", r, lineno) for r in rec[k])
                          for k in ("support", "query"))
        episodes.append(Episode(tuple(rec["classes"]), support, query))
    return episodes


def write_world(world: World, output_dir: Path | str) -> dict:
    """Write features, datasets, episodes and vocabulary, return the written paths"""
    out = Path(output_dir)
    store = FeatureStore(out / "features")
    for image_id, regions in world.features.items():
        store.put(image_id, regions)
    paths = {"features_dir": str(store.directory)}

    write_jsonl(out / "pretrain.jsonl",
                ({"image_id": i, "caption": c} for i, c in world.corpus))
    paths["corpus"] = str(out / "pretrain.jsonl")
    for name, examples in world.datasets.items():
        write_dataset(out / f"{name}.jsonl", examples)
        paths[name] = str(out / f"{name}.jsonl")
    for k, episodes in world.episodes.items():
        write_jsonl(out / f"episodes_{k}shot.jsonl", map(episode_record, episodes))
        paths[f"episodes_{k}shot"] = str(out / f"episodes_{k}shot.jsonl")
    world.vocab.save(out / "vocab.txt")
    paths["vocab"] = str(out / "vocab.txt")
    logger.info(f"Wrote synthetic world to {out}")
    return paths


def world_store(world: World, output_dir: Path | str) -> FeatureStore:
    """Feature store over a written world, pre-filled from memory"""
    store = FeatureStore(Path(output_dir) / "features")
    store.preload(world.features)
    return store
