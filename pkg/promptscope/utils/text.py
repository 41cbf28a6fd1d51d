"""Word-level tokenization over the closed synthetic vocabulary."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, List, Sequence

from promptscope.errors import EmptyInputError, UnknownTokenError

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = [PAD, BOS, EOS, SEP]
TEMPLATE_WORDS = ["there", "is", "a", "no", "in", "the", "zone", "zones"]

_SPLIT = re.compile(r"[^a-z<>]+")


def words(text: str) -> List[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


class Vocabulary:
    """Index = position in the token list; specials come first."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary tokens")
        self.tokens = list(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, extra_words: Iterable[str]) -> "Vocabulary":
        seen = list(SPECIALS)
        for w in list(TEMPLATE_WORDS) + [w for phrase in extra_words for w in words(phrase)]:
            if w not in seen:
                seen.append(w)
        return cls(seen)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    def encode(self, text: str) -> List[int]:
        ws = words(text)
        if not ws:
            raise EmptyInputError("text has no tokens")
        try:
            return [self._index[w] for w in ws]
        except KeyError as e:
            raise UnknownTokenError(f"unknown token {e.args[0]!r} in {text!r}") from None

    def encode_joined(self, sentences: Sequence[str]) -> List[int]:
        """Several sentences as one target, separated by <sep>."""
        out: List[int] = []
        for i, s in enumerate(sentences):
            if i:
                out.append(self.sep_id)
            out.extend(self.encode(s))
        if not out:
            raise EmptyInputError("no sentences to encode")
        return out

    def decode(self, ids: Sequence[int]) -> str:
        parts: List[List[str]] = [[]]
        for i in ids:
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            if i == self.sep_id:
                parts.append([])
                continue
            parts[-1].append(self.tokens[i])
        return ". ".join(" ".join(p) for p in parts if p)
