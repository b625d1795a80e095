"""Prompt templates: application, label extraction and the template catalog.

A template maps an example to an (input, target) text pair. `[Q]` in the
input pattern is replaced by the question, `[A]` in the target pattern by the
answer. `extract_label` inverts the target pattern on generated text.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fewvlm.data import VLExample, Vocab
from fewvlm.utils.errors import ConfigError, IndexOutOfRange, PlaceholderMismatch
from fewvlm.utils.logging import CONFIG_DIR

Q = "[Q]"
A = "[A]"
CATALOG_FILE = CONFIG_DIR / "prompts.json"

NOISY_KINDS = ("irrelevant", "noisy_tokens", "random_sentence")


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    input_pattern: str
    target_pattern: str
    task: str = "vqa"

    def __post_init__(self):
        if self.target_pattern.count(A) != 1:
            raise PlaceholderMismatch(
                f"Template {self.id!r}: target must hold {A} exactly once, got {self.target_pattern!r}"
            )
        if self.input_pattern.count(Q) > 1:
            raise PlaceholderMismatch(
                f"Template {self.id!r}: input holds {Q} more than once, got {self.input_pattern!r}"
            )

    @property
    def target_affixes(self) -> tuple[str, str]:
        prefix, suffix = self.target_pattern.split(A)
        return prefix.strip(), suffix.strip()

    def to_dict(self) -> dict:
        return {"id": self.id, "task": self.task, "input": self.input_pattern,
                "target": self.target_pattern}


@dataclass(frozen=True)
class PromptCatalog:
    """
    Hand-crafted templates plus the pools used for noisy prompts.

    Attributes
    ----------
    templates : dict[str, PromptTemplate]
        Templates keyed by id.
    irrelevant : tuple[str, ...]
        Input patterns of the irrelevant prompts.
    random_sentence : tuple[str, ...]
        Input patterns of the random-sentence prompts.
    noisy_target : str
        Target pattern of every noisy prompt.
    """

    templates: dict = field(default_factory=dict)
    irrelevant: tuple = ()
    random_sentence: tuple = ()
    noisy_target: str = "<text_1> [A]"

    def get(self, template_id: str) -> PromptTemplate:
        if template_id in self.templates:
            return self.templates[template_id]
        for kind in ("irrelevant", "random-sentence"):
            if template_id.startswith(kind + "-"):
                return noisy_prompt(kind.replace("-", "_"), int(template_id.rsplit("-", 1)[1]),
                                    catalog=self)
        raise ConfigError(f"Unknown template id {template_id!r}, available: {list(self.templates)}")

    def for_task(self, task: str) -> list[PromptTemplate]:
        return [t for t in self.templates.values() if t.task == task]

    def texts(self) -> list[str]:
        """All literal prompt text, placeholders removed"""
        out = []
        for t in self.templates.values():
            out += [t.input_pattern, t.target_pattern]
        out += [*self.irrelevant, *self.random_sentence, self.noisy_target]
        return [s.replace(Q, " ").replace(A, " ") for s in out]

    def to_dict(self) -> dict:
        return {
            "templates": [t.to_dict() for t in self.templates.values()],
            "irrelevant": list(self.irrelevant),
            "random_sentence": list(self.random_sentence),
            "noisy_target": self.noisy_target,
        }


def load_catalog(path: Path | str | None = None) -> PromptCatalog:
    raw = json.loads(Path(path or CATALOG_FILE).read_text(encoding="utf-8"))
    templates = {}
    for t in raw["templates"]:
        if t["id"] in templates:
            raise ConfigError(f"Duplicate template id {t['id']!r} in the prompt catalog")
        templates[t["id"]] = PromptTemplate(t["id"], t["input"], t["target"], t["task"])
    return PromptCatalog(
        templates=templates,
        irrelevant=tuple(raw["irrelevant"]),
        random_sentence=tuple(raw["random_sentence"]),
        noisy_target=raw["noisy_target"],
    )


def export_catalog(path: Path | str, catalog: PromptCatalog | None = None) -> None:
    catalog = catalog or load_catalog()
    Path(path).write_text(json.dumps(catalog.to_dict(), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def apply_prompt(template: PromptTemplate, example: VLExample, label: str | None = None
                 ) -> tuple[str, str]:
    """
    Build the (input, target) texts of an example.

    Parameters
    ----------
    template : PromptTemplate
        The template to apply.
    example : VLExample
        Provides the question for `[Q]` and, unless `label` is given, the answer for `[A]`.
    label : str | None
        Overrides the example's answer, e.g. one specific caption.

    Returns
    -------
    tuple[str, str]
        The input text and the target text.
    """
    if Q in template.input_pattern:
        if example.question is None:
            raise PlaceholderMismatch(
                f"Template {template.id!r} needs a question, {example.task} example"
                f" {example.image_id!r} has none"
            )
        inp = template.input_pattern.replace(Q, example.question)
    else:
        inp = template.input_pattern
    answer = example.answer if label is None else label
    return inp, template.target_pattern.replace(A, answer)


def extract_label(generated: str, template: PromptTemplate) -> str:
    """Strip the literal text around `[A]` once from each end, if present"""
    prefix, suffix = template.target_affixes
    s = generated.strip()
    if prefix and s.startswith(prefix):
        s = s[len(prefix):]
    if suffix and s.endswith(suffix):
        s = s[: -len(suffix)]
    return s.strip()


def noisy_prompt(
    kind: str,
    index_or_rng: int | np.random.Generator,
    vocab: Vocab | None = None,
    catalog: PromptCatalog | None = None,
) -> PromptTemplate:
    """
    Template with an uninformative input pattern.

    Parameters
    ----------
    kind : str
        "irrelevant" or "random_sentence" pick entry `index_or_rng` of the
        fixed lists; "noisy_tokens" draws 5 to 9 vocabulary words and puts them
        before or after `[Q]`.
    index_or_rng : int | np.random.Generator
        List index, or the seed (or generator) for "noisy_tokens".
    vocab : Vocab | None
        Word source for "noisy_tokens".

    Returns
    -------
    PromptTemplate
        Always with the target pattern `<text_1> [A]`.
    """
    if kind not in NOISY_KINDS:
        raise ConfigError(f"Unknown noisy prompt kind {kind=}, expected one of {NOISY_KINDS}")
    catalog = catalog or load_catalog()

    if kind in ("irrelevant", "random_sentence"):
        pool = getattr(catalog, kind)
        idx = int(index_or_rng)
        if not 0 <= idx < len(pool):
            raise IndexOutOfRange(f"No {kind} prompt {idx}, there are {len(pool)}")
        return PromptTemplate(f"{kind.replace('_', '-')}-{idx}", pool[idx], catalog.noisy_target)

    if vocab is None:
        raise ConfigError("noisy_tokens prompts need a vocabulary to draw from")
    if isinstance(index_or_rng, np.random.Generator):
        rng, tag = index_or_rng, "rng"
    else:
        rng, tag = np.random.default_rng(int(index_or_rng)), str(int(index_or_rng))
    n = int(rng.integers(5, 10))
    words = " ".join(vocab.tokens[i] for i in rng.choice(vocab.word_ids, size=n))
    pattern = f"{words} {Q}" if rng.random() < 0.5 else f"{Q} {words}"
    return PromptTemplate(f"noisy-token-{tag}", pattern, catalog.noisy_target)
