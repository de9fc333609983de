"""Prompt construction and the frozen toy text encoder.

Prompts are word sequences over a small closed vocabulary.  A styled prompt
renders as ``content ++ ["in"] ++ descriptor ++ ["style"]``.  Encoding is a
pure row lookup into an embedding table (trained with the base model, frozen
afterwards); unknown words map to the unknown token, and the empty negative
prompt encodes to the single null-token row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"
RARE_TOKEN = "<rare>"

_SPECIALS = (NULL_TOKEN, UNK_TOKEN, RARE_TOKEN)

_TEMPLATE_WORDS = ("a", "an", "in", "of", "on", "the", "style", "small", "big")
_CONTENT_WORDS = ("circle", "triangle", "square", "glyph", "cross", "ring")
_STYLE_WORDS = ("ember", "ocean", "moss", "slate", "coral", "dune", "berry", "frost")
_SCENE_WORDS = (
    "chihuahua", "tabby", "cat", "portrait", "human", "face", "walking",
    "street", "forest", "apple", "banana", "table", "dish", "ground",
    "church", "temple", "cabin", "mountain", "field", "beach",
)

DEFAULT_EMBED_DIM = 32


@dataclass(frozen=True)
class Vocabulary:
    words: tuple

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        for tok, want in zip(self.words, _SPECIALS):
            if tok != want:
                raise ValueError("vocabulary must start with the special tokens")

    @property
    def size(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.words.index(word.lower())
        except ValueError:
            return 1  # <unk>


def default_vocab() -> Vocabulary:
    return Vocabulary(_SPECIALS + _TEMPLATE_WORDS + _CONTENT_WORDS + _STYLE_WORDS + _SCENE_WORDS)


@dataclass(frozen=True)
class PromptSpec:
    content_text: tuple
    style_descriptor: tuple | None = None
    is_negative: bool = False

    def __post_init__(self):
        if not self.content_text and not self.is_negative:
            raise ValueError("only negative prompts may be empty")
        if self.style_descriptor is not None and len(self.style_descriptor) == 0:
            raise ValueError("style descriptor, when present, must be non-empty")

    def rendered(self) -> list:
        words = list(self.content_text)
        if self.style_descriptor is not None:
            words += ["in", *self.style_descriptor, "style"]
        return words

    def as_text(self) -> str:
        return " ".join(self.rendered())


def _words(x) -> tuple:
    if x is None:
        return ()
    if isinstance(x, str):
        return tuple(x.split())
    return tuple(x)


def build_prompt(content, style_descriptor=None, is_negative: bool = False) -> PromptSpec:
    sd = _words(style_descriptor)
    return PromptSpec(_words(content), sd if sd else None, is_negative)


EMPTY_NEGATIVE = PromptSpec((), None, True)


def strip_style(p: PromptSpec) -> PromptSpec:
    return PromptSpec(p.content_text, None, p.is_negative)


def token_ids(p: PromptSpec, vocab: Vocabulary, rare_token_mode: bool = False) -> np.ndarray:
    """Vocabulary ids for a prompt; the empty prompt is the null token."""
    if rare_token_mode and p.style_descriptor is not None:
        words = list(p.content_text) + ["in", RARE_TOKEN, "style"]
    else:
        words = p.rendered()
    if not words:
        return np.array([0], dtype=np.int64)  # <null>
    return np.array([vocab.id(w) for w in words], dtype=np.int64)


def init_text_table(vocab_size: int, embed_dim: int = DEFAULT_EMBED_DIM, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 0.5, size=(vocab_size, embed_dim))


def encode_text(
    p: PromptSpec,
    table: np.ndarray,
    vocab: Vocabulary,
    rare_token_mode: bool = False,
) -> np.ndarray:
    """Frozen row lookup: (S, E) embedding matrix for the prompt."""
    return table[token_ids(p, vocab, rare_token_mode)]
