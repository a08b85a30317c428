"""Byte-level BPE tokenizer, compatible with the published merges format.

The vocabulary is constructed from the merges file the way CLIP-style
tokenizers do: 256 byte symbols, the same symbols with an end-of-word
marker, one entry per merge rule, then the start/end specials. Text is
whitespace-normalized and lowercased, split with the usual word regex,
and each word is merged greedily by rank (lowest-rank adjacent pair
first).
"""

from __future__ import annotations

import gzip
import html
from functools import lru_cache
from pathlib import Path

import regex as re

from .errors import VocabLoadError

SOT = "<|startoftext|>"
EOT = "<|endoftext|>"
END_OF_WORD = "</w>"
CONTEXT_LIMIT = 77

_WORD_PATTERN = re.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    re.IGNORECASE,
)


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable-unicode map used by byte-level BPE."""
    bs = (list(range(ord("!"), ord("~") + 1))
          + list(range(ord("\xa1"), ord("\xac") + 1))
          + list(range(ord("\xae"), ord("\xff") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


class BpeVocab:
    """Vocabulary table, ranked merge rules, and the two specials."""

    def __init__(self, merges: list[tuple[str, str]], context_limit: int = CONTEXT_LIMIT):
        if context_limit <= 2:
            raise ValueError("context_limit must exceed the two specials")
        byte_symbols = list(bytes_to_unicode().values())
        vocab = byte_symbols + [s + END_OF_WORD for s in byte_symbols]
        vocab.extend("".join(pair) for pair in merges)
        vocab.extend([SOT, EOT])
        self.encoder: dict[str, int] = {tok: i for i, tok in enumerate(vocab)}
        if len(self.encoder) != len(vocab):
            raise VocabLoadError("duplicate merge rules produce colliding tokens")
        self.decoder = {i: tok for tok, i in self.encoder.items()}
        self.merge_ranks: dict[tuple[str, str], int] = {
            pair: rank for rank, pair in enumerate(merges)
        }
        self.sot_id = self.encoder[SOT]
        self.eot_id = self.encoder[EOT]
        self.context_limit = context_limit

    @classmethod
    def from_merges_file(cls, path: str | Path, max_merges: int | None = None,
                         context_limit: int = CONTEXT_LIMIT) -> "BpeVocab":
        """Load merge rules from a text (optionally gzipped) merges file.

        Lines hold two space-separated symbols in rank order; a leading
        header line (comment or a non-pair line) is skipped.
        """
        path = Path(path)
        if not path.exists():
            raise VocabLoadError(f"merges file not found: {path}")
        try:
            if path.suffix == ".gz":
                text = gzip.open(path, "rt", encoding="utf-8").read()
            else:
                text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise VocabLoadError(f"cannot read {path}: {exc}") from exc
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if lines and (lines[0].startswith("#") or len(lines[0].split()) != 2):
            lines = lines[1:]
        merges = []
        for i, line in enumerate(lines):
            parts = line.split()
            if len(parts) != 2:
                raise VocabLoadError(f"{path}: line {i + 1} is not a merge pair: {line!r}")
            merges.append((parts[0], parts[1]))
        if max_merges is not None:
            merges = merges[:max_merges]
        if not merges:
            raise VocabLoadError(f"{path}: no merge rules found")
        return cls(merges, context_limit=context_limit)


def _merge_word(word: tuple[str, ...], ranks: dict[tuple[str, str], int]) -> tuple[str, ...]:
    while len(word) > 1:
        pairs = set(zip(word[:-1], word[1:]))
        best = min(pairs, key=lambda p: ranks.get(p, float("inf")))
        if best not in ranks:
            break
        first, second = best
        merged = []
        i = 0
        while i < len(word):
            if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                merged.append(first + second)
                i += 2
            else:
                merged.append(word[i])
                i += 1
        word = tuple(merged)
    return word


def normalize_text(text: str) -> str:
    return " ".join(html.unescape(html.unescape(text)).split()).lower()


def bpe_tokenize(text: str, vocab: BpeVocab) -> list[int]:
    """Token ids for text, wrapped with the start/end specials."""
    byte_encoder = bytes_to_unicode()
    ids = [vocab.sot_id]
    for word in _WORD_PATTERN.findall(normalize_text(text)):
        mapped = "".join(byte_encoder[b] for b in word.encode("utf-8"))
        symbols = tuple(mapped[:-1]) + (mapped[-1] + END_OF_WORD,)
        for token in _merge_word(symbols, vocab.merge_ranks):
            ids.append(vocab.encoder[token])
    ids.append(vocab.eot_id)
    return ids
