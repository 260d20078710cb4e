import re
from pathlib import Path
from typing import Iterable

from .errors import ConfigError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS)

# a/b fractions, hyphenated words, then single punctuation marks
_TOKEN_RE = re.compile(r"\d+/\d+|\w+(?:-\w+)*|[^\w\s]")
_SPACE_BEFORE_PUNCT = re.compile(r" ([.,;:])")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Iterable[str]) -> str:
    return _SPACE_BEFORE_PUNCT.sub(r"\1", " ".join(tokens))


class Vocabulary:
    """Word-level vocabulary; the index of a token is its line in the vocabulary file."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ConfigError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id, self.unk_id, self.bos_id, self.eos_id = range(4)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(tokenize(text))
        words.difference_update(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            words.append(self.tokens[i] if 0 <= i < len(self.tokens) else UNK)
        return detokenize(words)

    def save(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"vocabulary file not found: {path}")
        return cls(path.read_text(encoding="utf-8").splitlines())
