"""Word vocabulary, class names, and prompt templates for the toy language side.

Every class name is exactly two tokens ("shape color", plus the special
"plain background" entry), so all text sequences under one template have the
same length. Class id = shape_index * len(COLORS) + color_index; the
background entry sits last, after the compositional classes.
"""

from __future__ import annotations

import numpy as np

SHAPES = ("square", "disc", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
BACKGROUND_NAME = "plain background"
END_TOKEN = "<end>"

# template text per prompt length; length = number of words
TEMPLATES = {
    4: "a photo of a",
    5: "a cropped photo of the",
    6: "this is a photo of a",
}

_EXTRA_WORDS = ("this", "is", "a", "photo", "of", "cropped", "the", "plain", "background")

WORDS = tuple(dict.fromkeys(_EXTRA_WORDS + SHAPES + COLORS)) + (END_TOKEN,)


class Vocabulary:
    """Fixed word-to-id map shared by templates and class names."""

    def __init__(self, words=WORDS):
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.end_id = self.index[END_TOKEN]

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in text.split():
            if w not in self.index:
                raise KeyError(f"word {w!r} not in vocabulary")
            ids.append(self.index[w])
        return ids


def default_vocab() -> Vocabulary:
    return Vocabulary()


def class_names(include_background: bool = True) -> list[str]:
    """All class names in class-id order."""
    names = [f"{s} {c}" for s in SHAPES for c in COLORS]
    if include_background:
        names.append(BACKGROUND_NAME)
    return names


def class_token_ids(vocab: Vocabulary, names: list[str]) -> np.ndarray:
    """(c, 2) token id matrix; every name must be exactly two known words."""
    rows = []
    for name in names:
        ids = vocab.encode(name)
        if len(ids) != 2:
            raise ValueError(f"class name {name!r} must be exactly two tokens")
        rows.append(ids)
    return np.asarray(rows, dtype=np.int64)


def write_class_file(path, names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for name in names:
            f.write(name + "\n")


def read_class_file(path, vocab: Vocabulary | None = None) -> list[str]:
    """One class per line, each a two-word name drawn from the vocabulary."""
    vocab = vocab or default_vocab()
    names = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: class name must be two tokens, got {line!r}")
            for w in parts:
                if w not in vocab.index:
                    raise ValueError(f"{path}:{lineno}: unknown word {w!r}")
            names.append(" ".join(parts))
    return names
