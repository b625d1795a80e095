"""Exceptions raised across fewvlm.

All of them derive from `FewVLMError`, itself a `ValueError`, so callers can
catch the whole family at once. The CLI reports the class name as the
machine-readable error id.
"""


class FewVLMError(ValueError):
    pass


# data
class InvalidId(FewVLMError):
    pass


class BadMagic(FewVLMError):
    pass


class ShapeMismatch(FewVLMError):
    pass


class NonFiniteValue(FewVLMError):
    pass


class ParseError(FewVLMError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class MissingField(FewVLMError):
    pass


# objectives
class TooShort(FewVLMError):
    pass


class SentinelOverflow(FewVLMError):
    pass


class EmptyCorpus(FewVLMError):
    pass


# prompts
class PlaceholderMismatch(FewVLMError):
    pass


class IndexOutOfRange(FewVLMError):
    pass


# fewshot
class DatasetTooSmall(FewVLMError):
    pass


class MalformedEpisode(FewVLMError):
    pass


# evaluation
class EmptyAnswers(FewVLMError):
    pass


class LengthMismatch(FewVLMError):
    pass


class EmptyReferences(FewVLMError):
    pass


# model
class SequenceTooLong(FewVLMError):
    pass


class FeatureDimMismatch(FewVLMError):
    pass


class EmptyTarget(FewVLMError):
    pass


# synthdata
class TooManyObjects(FewVLMError):
    pass


class ConfigError(FewVLMError):
    pass


class InvalidBox(FewVLMError):
    pass


class MissingFile(ConfigError):
    pass
